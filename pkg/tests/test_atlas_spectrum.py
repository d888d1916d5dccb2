import math

import numpy as np
import pytest
from scipy.spatial import cKDTree

from oracles import grid_points
from specmono.atlas_spectrum import (
    ZERO_CORRECTIONS, Annulus, AtlasError, AtlasSpec, Corrections, FocusFocusBranch, GoodRectangle,
    MaslovConsistencyError, ShearBranch, SpectrumDataset, auto_loop_count, build_focus_focus_atlas,
    build_trivial_atlas, counter_noise, good_rectangle, loop_centers, synthesize_band, synthesize_rectangle)
from specmono.classical_dynamics import DomainError, SemiclassicalRegime
from specmono.monodromy_core import FOCUS_FOCUS_MONODROMY, IDENTITY, IntMatrix2, cocycle_check

NO_CORR = Corrections(dict(ZERO_CORRECTIONS))


@pytest.fixture(scope="module")
def ff_atlas(default_regime):
    return build_focus_focus_atlas(Annulus(), default_regime)


# --- atlases ---------------------------------------------------------------

def test_trivial_atlas_structure():
    at = build_trivial_atlas()
    assert len(at.charts) == 4
    assert all(m == IDENTITY for m in at.planted_transitions.values())
    assert cocycle_check(at.cocycle()).passed
    assert at.loop_product() == IDENTITY


def test_focus_focus_atlas_structure(ff_atlas):
    assert ff_atlas.loop_product() == FOCUS_FOCUS_MONODROMY
    assert all(m.det == 1 for m in ff_atlas.planted_transitions.values())
    non_identity = {k: m for k, m in ff_atlas.planted_transitions.items() if m != IDENTITY}
    assert non_identity == {(3, 0): FOCUS_FOCUS_MONODROMY, (0, 3): FOCUS_FOCUS_MONODROMY.inverse()}
    assert cocycle_check(ff_atlas.cocycle()).passed


def _numeric_transition(atlas, i, j, w):
    """d(g_i o g_j^-1) at g_j(w), by central differences of the branches."""
    gi, gj = atlas.chart(i).psi_inverse, atlas.chart(j).psi_inverse
    e = 1e-7
    Ji = np.column_stack([(gi(w + d) - gi(w - d)) / (2 * e) for d in (np.array([e, 0]), np.array([0, e]))])
    Jj = np.column_stack([(gj(w + d) - gj(w - d)) / (2 * e) for d in (np.array([e, 0]), np.array([0, e]))])
    return Ji @ np.linalg.inv(Jj)


def test_planted_transitions_match_branch_derivatives(ff_atlas):
    for (i, j), m in ff_atlas.planted_transitions.items():
        ang = ff_atlas.chart(i).base_domain.overlap_midangle(ff_atlas.chart(j).base_domain)
        w = 0.02 * np.array([math.cos(ang), math.sin(ang)])
        assert np.allclose(_numeric_transition(ff_atlas, i, j, w), m.to_array(), atol=1e-6)
        # and the branches differ by the integer map itself, not only infinitesimally
        gi, gj = ff_atlas.chart(i).psi_inverse(w), ff_atlas.chart(j).psi_inverse(w)
        assert np.allclose(gi, m.to_array() @ gj, atol=1e-15)


def test_analytic_jacobians_match_finite_differences():
    rng = np.random.default_rng(0)
    for branch in (ShearBranch(0.3, 0.1), FocusFocusBranch(math.pi / 2, 0.2, 0.1)):
        for _ in range(10):
            w = rng.uniform(-0.05, 0.05, 2)
            if w[1] < 0 and abs(w[0]) < 0.01:
                continue
            e = 1e-7
            fd = np.column_stack([(branch(w + d) - branch(w - d)) / (2 * e)
                                  for d in (np.array([e, 0]), np.array([0, e]))])
            assert np.allclose(branch.jacobian(w), fd, atol=1e-6)


def test_corrections_jacobian(default_regime):
    c = Corrections()
    w = np.array([0.01, -0.02])
    e = 1e-7
    fd = np.column_stack([(c.phi(w + d, default_regime) - c.phi(w - d, default_regime)) / (2 * e)
                          for d in (np.array([e, 0]), np.array([0, e]))])
    assert np.allclose(c.phi_jacobian(w, default_regime), fd, atol=1e-8)
    # leading term is the identity at the singular point
    assert np.allclose(c.phi_jacobian(np.zeros(2), default_regime), np.eye(2))


def test_atlas_round_trip(ff_atlas):
    at2 = AtlasSpec.from_dict(ff_atlas.to_dict())
    assert at2.planted_transitions == ff_atlas.planted_transitions
    at2.validate()
    u = np.array([1.01, 0.41])
    assert np.array_equal(at2.f_tilde(0, u, SemiclassicalRegime(1e-4, 1e-2, 0.5)),
                          ff_atlas.f_tilde(0, u, SemiclassicalRegime(1e-4, 1e-2, 0.5)))


def test_chart_tau_matches_action_integrals(ff_atlas):
    for c in ff_atlas.charts:
        xi = c.psi_inverse(c.ref_point - ff_atlas.base_topology.u0)
        assert np.allclose(np.asarray(c.action_integrals()) / (2 * math.pi) - xi, c.tau)


def test_validate_rejects_bad_planted(ff_atlas):
    d = ff_atlas.to_dict()
    d["planted_transitions"][0]["m"] = [[2, 0], [0, 1]]
    with pytest.raises(AtlasError):
        AtlasSpec.from_dict(d).validate()


def test_validate_rejects_gap_in_cover():
    with pytest.raises(AtlasError):
        build_trivial_atlas(overlap=-0.1)


def test_maslov_guard(default_regime):
    with pytest.raises(MaslovConsistencyError):
        build_focus_focus_atlas(Annulus(), default_regime, eta=(1, 0))
    with pytest.raises(MaslovConsistencyError):
        build_focus_focus_atlas(Annulus(), default_regime, tau=(0.3 * default_regime.h, 0.0))
    # eta_1 = 4 and an arbitrary tau_2 are compatible with [[1,0],[1,1]]
    build_focus_focus_atlas(Annulus(), default_regime, eta=(4, 3), tau=(0.0, 0.123))


# --- good rectangles -------------------------------------------------------

def test_good_rectangle_arithmetic(default_regime):
    r = good_rectangle(1.0, 0.4, default_regime, C1=2)
    assert r.half_width_re == pytest.approx(0.005)
    assert r.half_width_im == pytest.approx(5e-5)
    assert r.center == pytest.approx(complex(1.0, 0.004))
    r.check(default_regime)


def test_good_rectangle_rejects_small_C1(default_regime):
    with pytest.raises(ValueError):
        good_rectangle(1.0, 0.4, default_regime, C1=0.5)


def test_point_count_matches_cell_count(ff_atlas, default_regime):
    rect = good_rectangle(1.0 + 0.04, 0.4, default_regime)
    ds = synthesize_rectangle(ff_atlas, 0, rect, default_regime, noise_kappa=0.0)
    expected = (2 * default_regime.h ** (default_regime.delta - 1) / 2) ** 2
    # the chart Jacobian determinant near angle 0 is about 1 + 1/(2 pi)
    J = ff_atlas.f_tilde_jacobian(0, rect.rescaled(default_regime.eps)[0], default_regime)
    assert len(ds) == pytest.approx(expected * abs(np.linalg.det(J)), rel=0.03)


# --- synthesis -------------------------------------------------------------

def _flat_trivial(annulus=Annulus((0.0, 0.0), 0.01, 1.0), eta=(0, 0)):
    return build_trivial_atlas(annulus, bilinear=0.0, eta=eta, corrections=NO_CORR)


def test_trivial_closed_form_grid():
    reg = SemiclassicalRegime(h=0.1, eps=0.5, delta=0.3)
    at = _flat_trivial()
    rect = GoodRectangle(0j, 0.25, 0.5 * 0.25)
    ds = synthesize_rectangle(at, 0, rect, reg, noise_kappa=0.0)
    assert len(ds) == 25
    expected = sorted(grid_points(0.1, (-0.25, -0.25), (0.25, 0.25)))
    got = sorted(map(tuple, ds.rescaled_points()))
    assert np.allclose(got, expected, atol=1e-15)
    assert np.array_equal(ds.k, np.rint(ds.rescaled_points() / 0.1).astype(int))


def test_trivial_maslov_shift():
    reg = SemiclassicalRegime(h=0.1, eps=0.5, delta=0.3)
    at = _flat_trivial(eta=(1, 0))
    rect = GoodRectangle(0j, 0.25, 0.5 * 0.25)
    ds = synthesize_rectangle(at, 0, rect, reg, noise_kappa=0.0)
    expected = sorted(grid_points(0.1, (-0.25, -0.25), (0.25, 0.25), shift=(-0.025, 0.0)))
    got = sorted(map(tuple, ds.rescaled_points()))
    assert np.allclose(got, expected, atol=1e-15)


def test_focus_focus_residual(ff_atlas, default_regime):
    rect = good_rectangle(1.0115, 0.4, default_regime)
    ds = synthesize_rectangle(ff_atlas, 0, rect, default_regime, noise_kappa=0.0)
    f = ff_atlas.f_tilde(0, ds.rescaled_points(), default_regime)
    h = default_regime.h
    assert np.abs(f - h * np.rint(f / h)).max() <= 1e-12
    assert np.array_equal(np.rint(f / h).astype(int), ds.k)


@pytest.mark.parametrize("pair,angle", [((0, 1), math.pi / 4), ((3, 0), -math.pi / 4)])
def test_branch_consistency_on_overlaps(ff_atlas, default_regime, pair, angle):
    R = 0.02
    rect = good_rectangle(1.0 + R * math.cos(angle), 0.4 + R * math.sin(angle), default_regime)
    a = synthesize_rectangle(ff_atlas, pair[0], rect, default_regime, noise_kappa=0.0).rescaled_points()
    b = synthesize_rectangle(ff_atlas, pair[1], rect, default_regime, noise_kappa=0.0).rescaled_points()
    assert len(a) == len(b) > 5000
    d, _ = cKDTree(b).query(a)
    assert d.max() <= 1e-9 * default_regime.h


def test_rectangle_outside_chart(ff_atlas, default_regime):
    rect = good_rectangle(1.0 - 0.02, 0.4, default_regime)
    with pytest.raises(DomainError):
        synthesize_rectangle(ff_atlas, 0, rect, default_regime)


def test_band_overlaps_and_dedup(ff_atlas, default_regime):
    centers = loop_centers(ff_atlas.base_topology, 8, 0.0115)
    ds = synthesize_band(ff_atlas, centers, default_regime, noise_kappa=0.0)
    assert 7e4 <= len(ds) <= 9e4
    sizes = [int(r.contains_u(ds.rescaled_points(), default_regime.eps).sum()) for r in ds.rectangles]
    pairs = {(i, j): n for i, j, n in ds.overlaps}
    for i in range(8):
        j = (i + 1) % 8
        shared = pairs[(min(i, j), max(i, j))]
        assert shared >= 0.1 * min(sizes[i], sizes[j])
    d, _ = cKDTree(ds.rescaled_points()).query(ds.rescaled_points(), k=2)
    assert d[:, 1].min() > 1e-6 * default_regime.h


def test_band_single_and_duplicate_centers(ff_atlas, default_regime):
    c = (1.0115, 0.4)
    one = synthesize_band(ff_atlas, [c], default_regime, seed=3)
    dup = synthesize_band(ff_atlas, [c, c, c], default_regime, seed=3)
    rect = synthesize_rectangle(ff_atlas, 0, good_rectangle(*c, default_regime), default_regime, seed=3)
    for other in (dup, rect):
        assert np.array_equal(one.re, other.re) and np.array_equal(one.im, other.im)
        assert np.array_equal(one.k, other.k)


def test_band_constraint_and_noise_bounds(ff_atlas, default_regime):
    rect = good_rectangle(1.0115, 0.4, default_regime)
    kappa, power = 0.01, 1.0
    clean = synthesize_rectangle(ff_atlas, 0, rect, default_regime, noise_kappa=0.0)
    noisy = synthesize_rectangle(ff_atlas, 0, rect, default_regime, noise_kappa=kappa, noise_power=power, seed=1)
    mag = kappa * default_regime.h ** power
    assert np.all(np.abs(noisy.im - rect.center.imag) <= rect.half_width_im + 3 * mag * default_regime.eps)
    assert np.all(np.abs(noisy.im) <= (0.4 + 0.005 + 3 * mag) * default_regime.eps)
    by_k = {tuple(k): p for k, p in zip(clean.k.tolist(), clean.rescaled_points())}
    disp = np.array([np.linalg.norm(p - by_k[tuple(k)]) for k, p in zip(noisy.k.tolist(), noisy.rescaled_points())])
    assert disp.max() <= mag * (1 + 1e-6)
    assert disp.mean() > 0.5 * mag


def test_determinism_and_worker_independence(ff_atlas, default_regime):
    centers = loop_centers(ff_atlas.base_topology, 8, 0.0115)[:3]
    a = synthesize_band(ff_atlas, centers, default_regime, seed=9)
    b = synthesize_band(ff_atlas, centers, default_regime, seed=9, workers=2)
    assert np.array_equal(a.re, b.re) and np.array_equal(a.im, b.im)
    c = synthesize_band(ff_atlas, centers, default_regime, seed=10)
    assert not np.array_equal(a.re, c.re)


def test_counter_noise_is_pure():
    k = np.array([[1, 2], [3, -4], [1, 2]])
    n = counter_noise(5, 2, k, 1.0)
    assert np.array_equal(n[0], n[2]) and not np.array_equal(n[0], n[1])
    assert np.all(np.hypot(n[:, 0], n[:, 1]) <= 1.0)
    assert np.array_equal(counter_noise(5, 2, k[1:2], 1.0)[0], n[1])


def test_trivial_spacing(default_regime):
    at = build_trivial_atlas(Annulus(), corrections=NO_CORR, bilinear=0.0)
    rect = good_rectangle(1.02, 0.4, default_regime)
    pts = synthesize_rectangle(at, 0, rect, default_regime, noise_kappa=0.0).rescaled_points()
    d, _ = cKDTree(pts).query(pts, k=2)
    assert np.allclose(d[:, 1], default_regime.h, rtol=1e-9)


def test_dataset_csv_round_trip(tmp_path, ff_atlas, default_regime):
    ds = synthesize_rectangle(ff_atlas, 0, good_rectangle(1.0115, 0.4, default_regime), default_regime, seed=2)
    ds.write(tmp_path / "d.csv", tmp_path / "d.json")
    back = SpectrumDataset.read(tmp_path / "d.csv", tmp_path / "d.json")
    assert np.array_equal(back.re, ds.re) and np.array_equal(back.im, ds.im) and np.array_equal(back.k, ds.k)
    assert back.regime == ds.regime
    ds.write(tmp_path / "b.csv", tmp_path / "b.json", blind=True)
    assert (tmp_path / "b.csv").read_text().splitlines()[0] == "re,im"
    blind = SpectrumDataset.read(tmp_path / "b.csv", tmp_path / "b.json")
    assert blind.blind and np.array_equal(blind.re, ds.re)
    text = (tmp_path / "d.csv").read_bytes()
    assert b"\r" not in text and text.splitlines()[0] == b"re,im,source_chart,k1,k2"


def test_eigenvalue_iteration(ff_atlas, default_regime):
    ds = synthesize_rectangle(ff_atlas, 0, good_rectangle(1.0115, 0.4, default_regime), default_regime)
    ev = next(iter(ds))
    assert ev.source_chart == 0 and len(ev.k_label) == 2


def test_auto_loop_count(default_regime):
    assert auto_loop_count(0.0115, default_regime, 2.0) == 8
    assert auto_loop_count(0.0115, default_regime.halved(), 2.0) > 8
