import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from specmono.atlas_spectrum import (ZERO_CORRECTIONS, Annulus, Corrections, GoodRectangle, SpectrumDataset,
                                     build_focus_focus_atlas, build_trivial_atlas, counter_noise, good_rectangle,
                                     synthesize_rectangle)
from specmono.classical_dynamics import SemiclassicalRegime
from specmono.lattice_detect import (ChartFit, FitError, InsufficientDataError, LabelingError, cloud_from_points,
                                     detect_basis, detect_rectangle, fit_chart, gauss_reduce, label_lattice,
                                     overlap_center, rescale)

NO_CORR = Corrections(dict(ZERO_CORRECTIONS))


def lattice(b1, b2, n, center=(0.0, 0.0)):
    i, j = np.meshgrid(np.arange(-n, n + 1), np.arange(-n, n + 1), indexing="ij")
    k = np.column_stack([i.ravel(), j.ravel()])
    pts = np.asarray(center) + k[:, :1] * np.asarray(b1) + k[:, 1:] * np.asarray(b2)
    return pts, k


def align(labels, truth):
    """Integer (B, t) with labels = B truth + t, or None."""
    A = np.column_stack([truth, np.ones(len(truth))])
    sol, *_ = np.linalg.lstsq(A, labels.astype(float), rcond=None)
    B = np.rint(sol[:2].T).astype(int)
    t = np.rint(sol[2]).astype(int)
    if abs(round(np.linalg.det(B))) != 1 or not np.array_equal(truth @ B.T + t, labels):
        return None
    return B, t


def in_span(vectors, basis):
    """Every vector is an integer combination of the basis rows."""
    c = np.linalg.solve(np.asarray(basis).T, np.asarray(vectors).T).T
    return np.allclose(c, np.rint(c), atol=1e-6)


# --- rescale ---------------------------------------------------------------

def _dataset(mu, regime):
    mu = np.asarray(mu)
    return SpectrumDataset(mu.real.copy(), mu.imag.copy(), regime)


def test_rescale_division():
    reg = SemiclassicalRegime(1e-4, 1e-2, 0.5)
    mu = 1 + 0.004j + np.linspace(-1e-4, 1e-4, 20)
    cloud = rescale(_dataset(mu, reg), GoodRectangle(1 + 0.004j, 0.001, 1e-5))
    assert len(cloud) == 20
    assert np.allclose(cloud.points[np.argmin(np.abs(mu - (1 + 0.004j)))], (1.0, 0.4))


def test_rescale_empty_and_small():
    reg = SemiclassicalRegime(1e-4, 1e-2, 0.5)
    mu = 1 + 0.004j + 1e-5 * np.arange(15)
    with pytest.raises(InsufficientDataError):
        rescale(_dataset(mu, reg), GoodRectangle(5 + 0j, 0.001, 1e-5))
    with pytest.raises(InsufficientDataError):
        rescale(_dataset(mu, reg), GoodRectangle(1 + 0.004j, 0.01, 1e-4))


def test_rescale_keeps_all_points():
    reg = SemiclassicalRegime(1e-4, 1e-2, 0.5)
    rng = np.random.default_rng(0)
    mu = rng.uniform(-1, 1, 10 ** 4) + 1j * reg.eps * rng.uniform(-1, 1, 10 ** 4)
    assert len(rescale(_dataset(mu, reg), GoodRectangle(0j, 1.0, reg.eps))) == 10 ** 4


# --- basis -----------------------------------------------------------------

def test_gauss_reduce_properties():
    b1, b2 = gauss_reduce((1.0, 0.0), (7.3, 1.0))
    assert abs(b1 @ b2) <= 0.5 * (b1 @ b1) + 1e-12 and b1 @ b1 <= b2 @ b2


@settings(max_examples=40, deadline=None)
@given(st.integers(-5, 5), st.integers(-5, 5), st.integers(-5, 5))
def test_gauss_reduce_preserves_lattice(a, b, c):
    B = np.array([[1, a], [0, 1]]) @ np.array([[1, 0], [b, 1]]) @ np.array([[1, c], [0, 1]])
    base = np.array([[1.0, 0.2], [0.3, 1.1]])
    v = B @ base
    r1, r2 = gauss_reduce(v[0], v[1])
    assert in_span(base, [r1, r2]) and in_span([r1, r2], base)


def test_detect_square_lattice():
    h = 0.01
    reg = SemiclassicalRegime(h, 0.1, 0.5)
    pts, _ = lattice((h, 0), (0, h), 20)
    b1, b2 = detect_basis(cloud_from_points(pts, reg))
    got = sorted([tuple(np.abs(np.round(b / h, 9))) for b in (b1, b2)])
    assert got == [(0.0, 1.0), (1.0, 0.0)]


def test_detect_shear_lattice_same_span():
    h = 1e-3
    reg = SemiclassicalRegime(h, 0.1, 0.5)
    planted = np.array([[h, 0.3 * h], [0.0, h]])
    pts, _ = lattice(planted[0], planted[1], 25)
    b = detect_basis(cloud_from_points(pts, reg))
    assert in_span(planted, b) and in_span(b, planted)


def test_detect_insufficient():
    reg = SemiclassicalRegime(0.01, 0.1, 0.5)
    with pytest.raises(InsufficientDataError):
        cloud_from_points(np.random.default_rng(0).random((15, 2)), reg)


# --- labeling --------------------------------------------------------------

def _label(pts, h, noise=0.0, seed=0):
    reg = SemiclassicalRegime(h, 0.1, 0.5)
    if noise:
        pts = pts + counter_noise(seed, 0, np.arange(2 * len(pts)).reshape(-1, 2), noise)
    cloud = cloud_from_points(pts, reg)
    return label_lattice(cloud, detect_basis(cloud))


def test_label_exact_lattice():
    h = 1e-3
    pts, k = lattice((h, 0.3 * h), (0.0, h), 30)
    lab = _label(pts, h)
    assert lab.coverage == 1.0
    assert align(lab.labels, k) is not None
    assert len({tuple(x) for x in lab.labels}) == len(pts)


def test_label_noisy_lattice():
    h = 1e-3
    pts, k = lattice((h, 0.0), (0.2 * h, h), 30)
    lab = _label(pts, h, noise=0.01 * h, seed=4)
    assert lab.coverage == 1.0 and align(lab.labels, k) is not None


def test_label_random_cloud_rejected():
    h = 1e-3
    pts, _ = lattice((h, 0.0), (0.0, h), 30)
    rng = np.random.default_rng(1)
    rand = rng.uniform(pts.min(axis=0), pts.max(axis=0), size=pts.shape)
    with pytest.raises(LabelingError) as exc:
        _label(rand, h)
    assert exc.value.coverage < 0.95


def test_relabel_transforms_basis():
    h = 1e-3
    pts, k = lattice((h, 0.0), (0.0, h), 10)
    lab = _label(pts, h)
    B = np.array([[2, 1], [1, 1]])
    lab2 = lab.relabel(B, (3, -1))
    assert np.array_equal(lab2.labels, lab.labels @ B.T + [3, -1])
    # positions are still labels times the basis rows, up to the shift
    p0 = pts[lab.anchor]
    pred = p0 + (lab2.labels - lab2.labels[lab.anchor]) @ lab2.basis
    assert np.allclose(pred, pts, atol=1e-9)


# --- fitting ---------------------------------------------------------------

@pytest.fixture(scope="module")
def ff_data():
    reg = SemiclassicalRegime(1e-4, 1e-2, 0.5, lam=1e-6)
    at = build_focus_focus_atlas(Annulus(), reg)
    rect = good_rectangle(1.04, 0.4, reg)
    noisy = synthesize_rectangle(at, 0, rect, reg, 0.01, 2.0, seed=1)
    clean = synthesize_rectangle(at, 0, rect, reg, 0.0)
    return reg, at, rect, noisy, clean


def test_fit_trivial_degree1_exact():
    reg = SemiclassicalRegime(1e-4, 1e-2, 0.5)
    shear = 0.3
    at = build_trivial_atlas(Annulus(), shear=shear, bilinear=0.0, corrections=NO_CORR)
    rect = good_rectangle(1.02, 0.4, reg)
    ds = synthesize_rectangle(at, 0, rect, reg, noise_kappa=0.0)
    fit, lab, cloud = detect_rectangle(ds, rect, degree=1)
    assert fit.residual_max <= 1e-9
    B, _ = align(lab.labels[lab.labeled], ds.k[cloud.index][lab.labeled])
    planted = np.array([[1.0, 0.0], [shear, 1.0]])
    assert np.allclose(fit.leading_differential, B @ planted, atol=1e-9)


def test_fit_focus_focus_rms(ff_data):
    reg, at, rect, noisy, _ = ff_data
    fit, _, _ = detect_rectangle(noisy, rect, degree=2)
    assert fit.residual_rms <= 0.05


def test_fit_degree_precondition(ff_data):
    reg, at, rect, noisy, _ = ff_data
    cloud = rescale(noisy, rect)
    lab = label_lattice(cloud, detect_basis(cloud))
    for bad in (0, 4):
        with pytest.raises(ValueError):
            fit_chart(cloud, lab, bad, reg)


def test_fit_tolerance_enforced(ff_data):
    reg, at, rect, noisy, _ = ff_data
    with pytest.raises(FitError):
        detect_rectangle(noisy, rect, degree=1, tolerance=1e-3)


def test_relabel_equivariance(ff_data):
    reg, _, rect, noisy, _ = ff_data
    cloud = rescale(noisy, rect)
    lab = label_lattice(cloud, detect_basis(cloud))
    base = fit_chart(cloud, lab, 2, reg)
    rng = np.random.default_rng(2)
    for _ in range(5):
        B = np.array([[1, rng.integers(-3, 4)], [0, 1]]) @ np.array([[1, 0], [rng.integers(-3, 4), 1]])
        t = rng.integers(-50, 50, 2)
        fit = fit_chart(cloud, lab.relabel(B, t), 2, reg)
        D0 = B @ base.leading_differential
        assert np.abs(fit.leading_differential - D0).max() <= 1e-8 * np.abs(D0).max()


def test_scale_consistency():
    diffs = []
    for h in (1e-4, 5e-5):
        reg = SemiclassicalRegime.from_delta(h, 0.5, lam=1e-6)
        at = build_focus_focus_atlas(Annulus(), reg)
        rect = good_rectangle(1.04, 0.4, reg)
        ds = synthesize_rectangle(at, 0, rect, reg, 0.01, 2.0, seed=1)
        fit, lab, cloud = detect_rectangle(ds, rect)
        B, _ = align(lab.labels[lab.labeled], ds.k[cloud.index][lab.labeled])
        diffs.append(np.linalg.solve(B, fit.leading_differential))
    rel = np.abs(diffs[0] - diffs[1]).max() / np.abs(diffs[1]).max()
    assert rel <= 1e-4 ** 0.5


def test_residual_bound_pure_noise():
    reg = SemiclassicalRegime(1e-4, 1e-2, 0.5)
    at = build_trivial_atlas(Annulus(), bilinear=0.0, corrections=NO_CORR)
    rect = good_rectangle(1.02, 0.4, reg)
    kappa = 0.01
    ds = synthesize_rectangle(at, 0, rect, reg, kappa, 2.0, seed=5)
    fit, _, _ = detect_rectangle(ds, rect, degree=1)
    # residuals are in units of h; noise kappa h^2 is kappa h of a cell
    assert fit.residual_rms * reg.h <= 3 * kappa * reg.h ** 2


def test_inverse_consistency(ff_data):
    reg, at, rect, noisy, clean = ff_data
    fit, lab, cloud = detect_rectangle(noisy, rect)
    B, t = align(lab.labels[lab.labeled], noisy.k[cloud.index][lab.labeled])
    # clean points are planted inverses of h k; the fitted map should send them back
    f = fit.evaluate(clean.rescaled_points()) / reg.h
    assert np.linalg.norm(f - (clean.k @ B.T + t), axis=1).max() <= 0.05


def test_chart_fit_round_trip(ff_data):
    reg, _, rect, noisy, _ = ff_data
    fit, _, _ = detect_rectangle(noisy, rect)
    back = ChartFit.from_dict(fit.to_dict())
    u = rect.rescaled(reg.eps)[0] + np.array([1e-3, 2e-5])
    assert np.array_equal(back.evaluate(u), fit.evaluate(u))
    assert np.array_equal(back.jacobian(u), fit.jacobian(u))
    e = 1e-7
    fd = np.column_stack([(fit.evaluate(u + d) - fit.evaluate(u - d))[0] / (2 * e)
                          for d in (np.array([e, 0]), np.array([0, e]))])
    assert np.allclose(fit.jacobian(u), fd, rtol=1e-6)


def test_overlap_center():
    a = GoodRectangle(0j, 1.0, 1.0)
    b = GoodRectangle(1.5 + 0.5j, 1.0, 1.0)
    assert np.allclose(overlap_center(a, b, 1.0), (0.75, 0.25))
    with pytest.raises(ValueError):
        overlap_center(a, GoodRectangle(5 + 0j, 1.0, 1.0), 1.0)
