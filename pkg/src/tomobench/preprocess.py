"""Photon-count preprocessing: offset/sensitivity correction and Beer-Lambert log.

Raw detector readings carry an illumination-independent offset (dark current)
and a pixel-dependent sensitivity (flat field). Correction normalizes counts
to transmission in (0, 1], which the negative logarithm turns into attenuation
line integrals. The same chain run backwards (`simulate_counts`) produces
synthetic raw data for desk-scale testing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError, ShapeError
from .geometry import AngularSelection, apply_selection
from .projector import Sinogram, Stage

# transmission floor before the log; photon-starved pixels would otherwise
# produce infinities
TRANSMISSION_FLOOR = 1e-6


@dataclass
class DetectorCalibration:
    """Dark (offset) and flat (full illumination) frames.

    Both are either per-detector-pixel vectors of length n_detector or
    per-angle maps of shape (n_angles, n_detector).
    """

    dark: np.ndarray
    flat: np.ndarray

    def __post_init__(self):
        self.dark = np.atleast_1d(np.asarray(self.dark, dtype=np.float64))
        self.flat = np.atleast_1d(np.asarray(self.flat, dtype=np.float64))
        gain = self.flat - self.dark
        if np.any(gain <= 0):
            raise CalibrationError(
                "flat field must exceed dark frame everywhere "
                f"(min flat-dark = {gain.min()!r})"
            )

    def _broadcast_check(self, shape: tuple[int, int]) -> None:
        for name, arr in (("dark", self.dark), ("flat", self.flat)):
            if arr.ndim == 1:
                if arr.shape[0] != shape[1]:
                    raise ShapeError(
                        f"{name} has {arr.shape[0]} pixels, sinogram has {shape[1]}"
                    )
            elif arr.shape != shape:
                raise ShapeError(
                    f"{name} shape {arr.shape} does not match sinogram {shape}"
                )


def flat_dark_correct(
    raw: Sinogram,
    cal: DetectorCalibration,
    floor: float = TRANSMISSION_FLOOR,
) -> Sinogram:
    """Counts -> transmission: (raw - dark) / (flat - dark), clamped at `floor`.

    The dark frame is subtracted from the flat field as well, the standard
    radiographic normalization.
    """
    raw.require_stage(Stage.COUNTS)
    cal._broadcast_check(raw.values.shape)
    t = (raw.values - cal.dark) / (cal.flat - cal.dark)
    t = np.maximum(t, floor)
    return Sinogram(
        raw.geometry, t, stage=Stage.TRANSMISSION, noise_model_note=raw.noise_model_note
    )


def neg_log(t: Sinogram) -> Sinogram:
    """Transmission -> line integrals via the Beer-Lambert law."""
    t.require_stage(Stage.TRANSMISSION)
    if np.any(t.values <= 0):
        raise ValueError("transmission must be positive; was the clamp disabled?")
    return Sinogram(
        t.geometry,
        -np.log(t.values),
        stage=Stage.LINE_INTEGRAL,
        noise_model_note=t.noise_model_note,
    )


def subset_sinogram(y: Sinogram, sel: AngularSelection) -> Sinogram:
    """Extract the rows of an angular selection; geometry follows along."""
    sub_geom, idx = apply_selection(y.geometry, sel)
    if idx.size == y.geometry.n_angles:
        return y
    return Sinogram(
        sub_geom, y.values[idx], stage=y.stage, noise_model_note=y.noise_model_note
    )


def simulate_counts(
    line_integrals: Sinogram,
    cal: DetectorCalibration,
    photons_i0: float = 1e5,
    seed: int = 0,
    poisson: bool = False,
) -> Sinogram:
    """Synthesize raw counts from line integrals (inverse of the correction chain).

    Transmission exp(-l) scales an incident budget of `photons_i0` photons;
    with `poisson` the photon count is Poisson-sampled before renormalizing,
    so the relative noise of the corrected data shrinks like 1/sqrt(i0).
    Noise-free output inverts `flat_dark_correct` + `neg_log` exactly.
    """
    line_integrals.require_stage(Stage.LINE_INTEGRAL)
    if photons_i0 <= 0:
        raise ValueError("photons_i0 must be positive")
    cal._broadcast_check(line_integrals.values.shape)
    transmission = np.exp(-line_integrals.values)
    note = "noise-free synthetic counts"
    if poisson:
        rng = np.random.default_rng(seed)
        photons = rng.poisson(photons_i0 * transmission)
        transmission = photons / photons_i0
        note = f"poisson synthetic counts i0={photons_i0!r} seed={seed}"
    counts = cal.dark + (cal.flat - cal.dark) * transmission
    counts = np.broadcast_to(counts, line_integrals.values.shape).copy()
    return Sinogram(
        line_integrals.geometry, counts, stage=Stage.COUNTS, noise_model_note=note
    )
