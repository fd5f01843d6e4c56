"""Fan-beam acquisition geometry, image grids and angular sub-selections.

Conventions used throughout the toolbox:

* the rotation axis sits at the origin of a right-handed (x, y) frame in mm;
* an acquisition angle ``beta`` places the X-ray point source at
  ``SOD * (cos beta, sin beta)``;
* the detector is flat, perpendicular to the source-origin ray, centered at
  ``(SOD - SDD) * (cos beta, sin beta)`` and oriented along
  ``(-sin beta, cos beta)``;
* angles are stored in degrees, ascending, in ``[0, 360)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Union

import numpy as np

from .errors import GeometryError, SelectionError

# Canonical scanner values. The acquisition stores 3601 projections at
# 0.1 deg of which the last duplicates the first (0 deg == 360 deg),
# hence 3600 usable angles.
CANONICAL_SOD_MM = 431.020
CANONICAL_SDD_MM = 529.000
CANONICAL_DETECTOR_PIXELS = 956
CANONICAL_DETECTOR_PIXEL_MM = 0.1496
CANONICAL_ANGLE_COUNT = 3600
CANONICAL_ANGLE_STEP_DEG = 0.1


@dataclass(frozen=True, eq=False)
class FanBeamGeometry:
    """Full description of one fan-beam scan.

    Parameters
    ----------
    source_object_dist : float
        Distance from the source to the rotation axis (SOD), mm.
    source_detector_dist : float
        Distance from the source to the detector line (SDD), mm.
    detector_pixel_count : int
        Number of detector pixels.
    detector_pixel_size : float
        Detector pixel pitch, mm.
    angles : numpy.ndarray
        Acquisition angles in degrees, strictly increasing, within [0, 360).
    detector_center_offset : float, optional
        Lateral shift of the detector center along its axis, mm. The scanner
        motor readings carry an unmodelled alignment error; this field is the
        hook for correcting it and defaults to 0.
    """

    source_object_dist: float
    source_detector_dist: float
    detector_pixel_count: int
    detector_pixel_size: float
    angles: np.ndarray
    detector_center_offset: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "angles", np.asarray(self.angles, dtype=np.float64))
        if not (self.source_detector_dist > self.source_object_dist > 0):
            raise GeometryError(
                f"need SDD > SOD > 0, got SOD={self.source_object_dist}, "
                f"SDD={self.source_detector_dist}"
            )
        if self.detector_pixel_count < 1:
            raise GeometryError("detector_pixel_count must be >= 1")
        if self.detector_pixel_size <= 0:
            raise GeometryError("detector_pixel_size must be > 0")
        a = self.angles
        if a.ndim != 1 or a.size < 1:
            raise GeometryError("angles must be a non-empty 1-D array")
        if np.any(a < 0.0) or np.any(a >= 360.0):
            raise GeometryError("angles must lie in [0, 360) degrees")
        if a.size > 1 and np.any(np.diff(a) <= 0):
            raise GeometryError("angles must be strictly increasing")
        self.angles.setflags(write=False)

    def __eq__(self, other):
        if not isinstance(other, FanBeamGeometry):
            return NotImplemented
        return (
            self.source_object_dist == other.source_object_dist
            and self.source_detector_dist == other.source_detector_dist
            and self.detector_pixel_count == other.detector_pixel_count
            and self.detector_pixel_size == other.detector_pixel_size
            and self.detector_center_offset == other.detector_center_offset
            and np.array_equal(self.angles, other.angles)
        )

    def __hash__(self):
        return hash(
            (
                self.source_object_dist,
                self.source_detector_dist,
                self.detector_pixel_count,
                self.detector_pixel_size,
                self.detector_center_offset,
                self.angles.tobytes(),
            )
        )

    @property
    def n_angles(self) -> int:
        return int(self.angles.size)

    @property
    def angles_rad(self) -> np.ndarray:
        return np.deg2rad(self.angles)

    def angular_step_deg(self) -> float:
        """Uniform angular increment in degrees (mean spacing for 1 angle: 0)."""
        if self.n_angles < 2:
            return 0.0
        return float((self.angles[-1] - self.angles[0]) / (self.n_angles - 1))

    def angular_span_deg(self) -> float:
        """Covered span including the trailing step, e.g. 360 for a full scan."""
        return float(self.angles[-1] - self.angles[0]) + self.angular_step_deg()

    def detector_coords(self) -> np.ndarray:
        """Signed detector-pixel-center coordinates along the detector axis, mm."""
        n = self.detector_pixel_count
        idx = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
        return idx * self.detector_pixel_size + self.detector_center_offset

    def source_position(self, beta_rad: float) -> np.ndarray:
        r = self.source_object_dist
        return np.array([r * np.cos(beta_rad), r * np.sin(beta_rad)])

    def detector_pixel_positions(self, beta_rad: float) -> np.ndarray:
        """(n_detector, 2) array of detector pixel centers at one angle."""
        e_src = np.array([np.cos(beta_rad), np.sin(beta_rad)])
        u_hat = np.array([-np.sin(beta_rad), np.cos(beta_rad)])
        center = (self.source_object_dist - self.source_detector_dist) * e_src
        return center[None, :] + self.detector_coords()[:, None] * u_hat[None, :]

    def fan_half_angle_rad(self) -> float:
        """Largest |angle| between a detector ray and the central ray."""
        u = self.detector_coords()
        half_span = max(abs(u[0]), abs(u[-1]))
        return float(np.arctan2(half_span, self.source_detector_dist))


@dataclass(frozen=True)
class ImageGrid:
    """Square-pixel reconstruction grid centered near the rotation axis."""

    width_px: int
    height_px: int
    pixel_size: float
    center: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.width_px < 1 or self.height_px < 1:
            raise GeometryError("grid dimensions must be >= 1")
        if self.pixel_size <= 0:
            raise GeometryError("pixel_size must be > 0")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height_px, self.width_px)

    @property
    def n_pixels(self) -> int:
        return self.width_px * self.height_px

    def x_coords(self) -> np.ndarray:
        """Pixel-center x coordinates per column, mm."""
        c = np.arange(self.width_px, dtype=np.float64) - (self.width_px - 1) / 2.0
        return self.center[0] + c * self.pixel_size

    def y_coords(self) -> np.ndarray:
        """Pixel-center y coordinates per row, mm. Row 0 is the top (max y)."""
        r = (self.height_px - 1) / 2.0 - np.arange(self.height_px, dtype=np.float64)
        return self.center[1] + r * self.pixel_size


@dataclass(frozen=True)
class Full:
    """Keep every projection."""


@dataclass(frozen=True)
class LimitedWedge:
    """Keep the first `first_k_rows` projections (a contiguous angular wedge)."""

    first_k_rows: int


@dataclass(frozen=True)
class SparseStride:
    """Keep `n_kept` projections evenly strided over the full angle list."""

    n_kept: int


AngularSelection = Union[Full, LimitedWedge, SparseStride]


def canonical_2detect_geometry() -> FanBeamGeometry:
    """Geometry of the canonical scan: 3600 angles at 0.1 deg, 956-pixel detector."""
    angles = np.arange(CANONICAL_ANGLE_COUNT) * CANONICAL_ANGLE_STEP_DEG
    return FanBeamGeometry(
        source_object_dist=CANONICAL_SOD_MM,
        source_detector_dist=CANONICAL_SDD_MM,
        detector_pixel_count=CANONICAL_DETECTOR_PIXELS,
        detector_pixel_size=CANONICAL_DETECTOR_PIXEL_MM,
        angles=angles,
    )


def canonical_like_geometry(n_angles: int, n_detector: int) -> FanBeamGeometry:
    """Desk-scale geometry with the canonical distances and detector span.

    The detector keeps its physical width (so the fan covers the same field
    of view) but is rebinned to `n_detector` pixels, and the scan uses
    `n_angles` uniform angles over [0, 360). Useful for fast tests that must
    still mirror the canonical proportions.
    """
    span = CANONICAL_DETECTOR_PIXELS * CANONICAL_DETECTOR_PIXEL_MM
    angles = np.arange(n_angles) * (360.0 / n_angles)
    return FanBeamGeometry(
        source_object_dist=CANONICAL_SOD_MM,
        source_detector_dist=CANONICAL_SDD_MM,
        detector_pixel_count=n_detector,
        detector_pixel_size=span / n_detector,
        angles=angles,
    )


def magnification(g: FanBeamGeometry) -> float:
    """Geometric magnification SDD/SOD."""
    return g.source_detector_dist / g.source_object_dist


def default_grid(g: FanBeamGeometry, n: int) -> ImageGrid:
    """n-by-n grid whose pixel size is the detector pitch projected to the axis."""
    if n < 1:
        raise GeometryError("grid size must be >= 1")
    return ImageGrid(
        width_px=n,
        height_px=n,
        pixel_size=g.detector_pixel_size / magnification(g),
    )


def selection_indices(g: FanBeamGeometry, sel: AngularSelection) -> np.ndarray:
    """Row indices kept by a selection, in ascending order."""
    n = g.n_angles
    if isinstance(sel, Full):
        return np.arange(n)
    if isinstance(sel, LimitedWedge):
        k = sel.first_k_rows
        if not (1 <= k <= n):
            raise SelectionError(f"LimitedWedge({k}) out of range for {n} angles")
        return np.arange(k)
    if isinstance(sel, SparseStride):
        kept = sel.n_kept
        if kept < 1 or n % kept != 0:
            raise SelectionError(
                f"SparseStride({kept}) must divide the angle count {n}"
            )
        return np.arange(0, n, n // kept)
    raise SelectionError(f"unknown selection {sel!r}")


def apply_selection(
    g: FanBeamGeometry, sel: AngularSelection
) -> tuple[FanBeamGeometry, np.ndarray]:
    """Sub-geometry restricted to a selection, plus the kept row indices."""
    idx = selection_indices(g, sel)
    if idx.size == g.n_angles:
        return g, idx
    return replace(g, angles=g.angles[idx]), idx
