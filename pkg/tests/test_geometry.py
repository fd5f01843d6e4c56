import numpy as np
import pytest

from tomobench.errors import GeometryError, SelectionError
from tomobench.geometry import (
    FanBeamGeometry,
    Full,
    ImageGrid,
    LimitedWedge,
    SparseStride,
    apply_selection,
    canonical_2detect_geometry,
    default_grid,
    magnification,
)


def test_canonical_scanner_values():
    g = canonical_2detect_geometry()
    assert g.source_object_dist == 431.020
    assert g.source_detector_dist == 529.000
    assert g.detector_pixel_count == 956
    assert g.detector_pixel_size == 0.1496
    assert g.n_angles == 3600
    assert g.angles[1] - g.angles[0] == pytest.approx(0.1, abs=0)
    assert g.angles[0] == 0.0
    assert g.angles[-1] < 360.0


def test_geometry_validation():
    with pytest.raises(GeometryError):
        FanBeamGeometry(500.0, 400.0, 10, 1.0, np.arange(4) * 1.0)  # SDD < SOD
    with pytest.raises(GeometryError):
        FanBeamGeometry(400.0, 500.0, 0, 1.0, np.arange(4) * 1.0)
    with pytest.raises(GeometryError):
        FanBeamGeometry(400.0, 500.0, 10, -1.0, np.arange(4) * 1.0)
    with pytest.raises(GeometryError):
        FanBeamGeometry(400.0, 500.0, 10, 1.0, np.array([0.0, 0.0, 1.0]))
    with pytest.raises(GeometryError):
        FanBeamGeometry(400.0, 500.0, 10, 1.0, np.array([10.0, 5.0]))
    with pytest.raises(GeometryError):
        FanBeamGeometry(400.0, 500.0, 10, 1.0, np.array([0.0, 360.0]))


def test_magnification():
    assert magnification(canonical_2detect_geometry()) == pytest.approx(
        529.000 / 431.020
    )
    g = FanBeamGeometry(100.0, 200.0, 8, 1.0, np.arange(4) * 90.0)
    assert magnification(g) == 2.0


def test_default_grid_matches_detector_sampling():
    g = canonical_2detect_geometry()
    grid = default_grid(g, 1024)
    assert grid.pixel_size == pytest.approx(0.1496 / (529.0 / 431.02))
    assert grid.pixel_size == pytest.approx(0.1219, abs=5e-4)
    fov = grid.pixel_size * 1024
    assert fov == pytest.approx(124.8, abs=0.2)
    big = default_grid(g, 2048)
    assert big.shape == (2048, 2048)
    assert big.pixel_size == grid.pixel_size


def test_limited_wedge_selection():
    g = canonical_2detect_geometry()
    sub, idx = apply_selection(g, LimitedWedge(1200))
    assert sub.n_angles == 1200
    assert np.array_equal(idx, np.arange(1200))
    assert sub.angles[0] == 0.0
    assert sub.angles[-1] == pytest.approx(119.9)
    # the kept set is a prefix with unchanged values
    assert np.array_equal(sub.angles, g.angles[:1200])


def test_sparse_stride_selection():
    g = canonical_2detect_geometry()
    sub, idx = apply_selection(g, SparseStride(60))
    assert sub.n_angles == 60
    assert np.array_equal(idx, np.arange(0, 3600, 60))
    assert np.allclose(np.diff(sub.angles), 6.0)


def test_full_selection_is_identity():
    g = canonical_2detect_geometry()
    sub, idx = apply_selection(g, Full())
    assert sub is g
    assert np.array_equal(idx, np.arange(3600))


def test_sparse_after_full_equals_sparse():
    g = canonical_2detect_geometry()
    full_first, _ = apply_selection(g, Full())
    a, _ = apply_selection(full_first, SparseStride(120))
    b, _ = apply_selection(g, SparseStride(120))
    assert a == b


def test_selection_errors():
    g = canonical_2detect_geometry()
    with pytest.raises(SelectionError):
        apply_selection(g, LimitedWedge(0))
    with pytest.raises(SelectionError):
        apply_selection(g, LimitedWedge(3601))
    with pytest.raises(SelectionError):
        apply_selection(g, SparseStride(7))  # does not divide 3600


def test_grid_coordinates_centered():
    grid = ImageGrid(4, 4, 2.0)
    assert np.allclose(grid.x_coords(), [-3.0, -1.0, 1.0, 3.0])
    assert np.allclose(grid.y_coords(), [3.0, 1.0, -1.0, -3.0])
    off = ImageGrid(2, 2, 1.0, center=(10.0, -5.0))
    assert np.allclose(off.x_coords(), [9.5, 10.5])
    with pytest.raises(GeometryError):
        ImageGrid(0, 4, 1.0)
    with pytest.raises(GeometryError):
        ImageGrid(4, 4, 0.0)


def test_geometry_equality_and_hash():
    a = canonical_2detect_geometry()
    b = canonical_2detect_geometry()
    assert a == b and hash(a) == hash(b)
    c, _ = apply_selection(a, LimitedWedge(10))
    assert a != c
