import numpy as np
import pytest

from tomobench.dataio import write_raw_f32le
from tomobench.geometry import canonical_like_geometry, default_grid
from tomobench.phantoms import Ellipse, EllipsePhantom, analytic_sinogram
from tomobench.preprocess import DetectorCalibration, simulate_counts
from tomobench.projector import FanBeamProjector
from tomobench.solvers import SolverConfig, VariationalProblem, agd

MINI_ANGLES = 120
MINI_DET = 192
MINI_GRID = 96
MINI_IDS = tuple(range(4481, 4491))  # ten slices inside the test split


def _mini_phantom(rng):
    return EllipsePhantom(
        (
            Ellipse((0.0, 0.0), (22.0, 19.0), 0.0, 0.008),
            Ellipse(
                (float(rng.uniform(-8, 8)), float(rng.uniform(-8, 8))),
                (6.0, 3.5),
                float(rng.uniform(0, 180)),
                0.006,
            ),
        )
    )


@pytest.fixture(scope="session")
def mini_geometry():
    return canonical_like_geometry(MINI_ANGLES, MINI_DET)


@pytest.fixture(scope="session")
def mini_grid(mini_geometry):
    return default_grid(mini_geometry, MINI_GRID)


@pytest.fixture(scope="session")
def mini_dataset(tmp_path_factory, mini_geometry, mini_grid):
    """Ten-slice synthetic dataset (ids in the test split) with references.

    Counts are Poisson-noisy synthetic measurements of random two-ellipse
    phantoms; references mirror the real pipeline: an iterative least-squares
    reconstruction of the clean sinogram on the default grid.
    """
    root = tmp_path_factory.mktemp("minidata")
    g, grid = mini_geometry, mini_grid
    cal = DetectorCalibration(np.full(MINI_DET, 40.0), np.full(MINI_DET, 4040.0))
    op = FanBeamProjector(g, grid)
    op_norm = op.operator_norm(iters=30, seed=0)
    for sid in MINI_IDS:
        rng = np.random.default_rng(sid)
        sino = analytic_sinogram(_mini_phantom(rng), g)
        counts = simulate_counts(sino, cal, photons_i0=1e5, seed=sid, poisson=True)
        mdir = root / f"slice{sid:05d}" / "mode2"
        mdir.mkdir(parents=True)
        write_raw_f32le(mdir / "counts.raw", counts.values)
        write_raw_f32le(mdir / "dark.raw", cal.dark[None, :])
        write_raw_f32le(mdir / "flat.raw", cal.flat[None, :])
        ref, _ = agd(
            VariationalProblem(op, sino),
            SolverConfig(max_iters=60),
            op_norm=op_norm,
        )
        write_raw_f32le(mdir / "reference.raw", ref.values)
    return root
