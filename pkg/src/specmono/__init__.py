"""Spectral monodromy of non-selfadjoint perturbations of (nearly) integrable systems.

The package synthesizes eigenvalue pseudo-lattices from the semiclassical
quantization rule, detects their local lattice structure and reads off the
GL(2, Z) holonomy of the resulting chart cocycle.

Submodules
----------
classical_dynamics   frequencies, Diophantine tests, torus/time averages, good values
atlas_spectrum       quantization atlases and eigenvalue synthesis
lattice_detect       rescaling, basis detection, labeling, chart fitting
monodromy_core       integer transitions, Cech cocycles, holonomy classes
pipeline             configuration-driven stages used by the ``specmono`` CLI
"""

__version__ = "0.1.0"
