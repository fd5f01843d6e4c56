"""Ellipse phantoms with exactly known fan-beam sinograms.

A phantom is a list of ellipses whose attenuations add where they overlap.
Because the chord of a line through an ellipse has a closed form, the fan-beam
sinogram of a phantom is available analytically and serves as the independent
oracle for the discrete projector and the reconstruction chain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .geometry import FanBeamGeometry, ImageGrid
from .projector import Image, Sinogram, Stage


@dataclass(frozen=True)
class Ellipse:
    center: tuple[float, float]
    semi_axes: tuple[float, float]
    rotation_deg: float
    attenuation: float
    additive: bool = True

    def __post_init__(self):
        if self.semi_axes[0] <= 0 or self.semi_axes[1] <= 0:
            raise ShapeError("ellipse semi-axes must be positive")


@dataclass(frozen=True)
class EllipsePhantom:
    components: tuple[Ellipse, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))

    def rotated(self, delta_deg: float) -> "EllipsePhantom":
        """Phantom rotated by `delta_deg` counterclockwise about the origin."""
        rad = np.deg2rad(delta_deg)
        c, s = np.cos(rad), np.sin(rad)
        comps = []
        for e in self.components:
            cx, cy = e.center
            comps.append(
                Ellipse(
                    center=(c * cx - s * cy, s * cx + c * cy),
                    semi_axes=e.semi_axes,
                    rotation_deg=e.rotation_deg + delta_deg,
                    attenuation=e.attenuation,
                    additive=e.additive,
                )
            )
        return EllipsePhantom(tuple(comps))


def _ellipse_frame(e: Ellipse) -> tuple[np.ndarray, np.ndarray]:
    """Affine map z -> M (z - c) sending the ellipse onto the unit disk."""
    rad = np.deg2rad(e.rotation_deg)
    c, s = np.cos(rad), np.sin(rad)
    rot = np.array([[c, s], [-s, c]])  # rotate by -rotation_deg
    scale = np.diag([1.0 / e.semi_axes[0], 1.0 / e.semi_axes[1]])
    return scale @ rot, np.asarray(e.center, dtype=np.float64)


def rasterize(p: EllipsePhantom, grid: ImageGrid, supersample: int = 1) -> Image:
    """Sample a phantom on a grid.

    Pixels take the summed attenuation of the additive ellipses containing
    their center; non-additive ellipses overwrite the accumulated value
    inside their support. `supersample=2` averages a 2x2 sub-pixel pattern
    (4x antialiasing) and so on.
    """
    if supersample < 1:
        raise ValueError("supersample must be >= 1")
    s = supersample
    xs, ys = grid.x_coords(), grid.y_coords()
    if s > 1:
        sub = ((np.arange(s) + 0.5) / s - 0.5) * grid.pixel_size
        xs = (xs[:, None] + sub[None, :]).ravel()
        ys = (ys[:, None] + sub[None, :]).ravel()
    X, Y = np.meshgrid(xs, ys)
    out = np.zeros_like(X)
    for e in p.components:
        m, c = _ellipse_frame(e)
        u = m[0, 0] * (X - c[0]) + m[0, 1] * (Y - c[1])
        v = m[1, 0] * (X - c[0]) + m[1, 1] * (Y - c[1])
        inside = u * u + v * v <= 1.0
        if e.additive:
            out += np.where(inside, e.attenuation, 0.0)
        else:
            out = np.where(inside, e.attenuation, out)
    if s > 1:
        out = out.reshape(grid.height_px, s, grid.width_px, s).mean(axis=(1, 3))
    return Image(grid, out)


def analytic_sinogram(p: EllipsePhantom, g: FanBeamGeometry) -> Sinogram:
    """Exact line integrals of a phantom for every ray of a geometry."""
    for e in p.components:
        if not e.additive:
            raise ValueError(
                "analytic sinogram requires additive components only"
            )
    out = np.zeros((g.n_angles, g.detector_pixel_count), dtype=np.float64)
    betas = g.angles_rad
    cb, sb = np.cos(betas), np.sin(betas)
    srcs = g.source_object_dist * np.stack([cb, sb], axis=1)  # (A, 2)
    centers = (g.source_object_dist - g.source_detector_dist) * np.stack(
        [cb, sb], axis=1
    )
    u_hat = np.stack([-sb, cb], axis=1)
    u = g.detector_coords()
    ends = centers[:, None, :] + u[None, :, None] * u_hat[:, None, :]  # (A, R, 2)
    d = ends - srcs[:, None, :]
    ray_len = np.hypot(d[..., 0], d[..., 1])

    for e in p.components:
        m, c = _ellipse_frame(e)
        # ray in the unit-disk frame: p0 + t * dm, t in [0, 1]
        rel = srcs - c[None, :]
        p0 = rel @ m.T  # (A, 2)
        dm = np.einsum("ij,arj->ari", m, d)  # (A, R, 2)
        a = dm[..., 0] ** 2 + dm[..., 1] ** 2
        b = 2.0 * (p0[:, None, 0] * dm[..., 0] + p0[:, None, 1] * dm[..., 1])
        cc = (p0[:, 0] ** 2 + p0[:, 1] ** 2 - 1.0)[:, None]
        disc = b * b - 4.0 * a * cc
        hit = disc > 0.0
        # |t1 - t2| = sqrt(disc) / a; chord in world units is that times |d|
        chord = np.where(hit, np.sqrt(np.maximum(disc, 0.0)) / a, 0.0) * ray_len
        out += e.attenuation * chord
    return Sinogram(g, out, stage=Stage.LINE_INTEGRAL)


def line_integral_oracle(
    p: EllipsePhantom,
    src: np.ndarray,
    end: np.ndarray,
    n_steps: int = 4000,
    refine: int = 60,
) -> float:
    """Brute-force line integral of a phantom along one segment.

    Samples the inside/outside indicator densely, then bisects each crossing
    so the entry/exit points are located to machine precision. Independent of
    the quadratic-formula path used by :func:`analytic_sinogram`.
    """
    src = np.asarray(src, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    seg = end - src
    length = float(np.hypot(*seg))
    total = 0.0
    for e in p.components:
        m, c = _ellipse_frame(e)

        def inside(t):
            pt = src + np.multiply.outer(t, seg) - c
            q = pt @ m.T
            return (q[..., 0] ** 2 + q[..., 1] ** 2) <= 1.0

        t = np.linspace(0.0, 1.0, n_steps + 1)
        flags = inside(t)
        crossings = np.nonzero(flags[1:] != flags[:-1])[0]
        # bisect each bracketing interval
        cuts = []
        for i in crossings:
            lo, hi = t[i], t[i + 1]
            lo_in = bool(flags[i])
            for _ in range(refine):
                mid = 0.5 * (lo + hi)
                if bool(inside(np.array([mid]))[0]) == lo_in:
                    lo = mid
                else:
                    hi = mid
            cuts.append(0.5 * (lo + hi))
        bounds = [0.0] + cuts + [1.0]
        for k in range(len(bounds) - 1):
            mid = 0.5 * (bounds[k] + bounds[k + 1])
            if bool(inside(np.array([mid]))[0]):
                total += e.attenuation * (bounds[k + 1] - bounds[k]) * length
    return total


def ray_sampling_oracle(
    img: np.ndarray,
    grid: ImageGrid,
    src: np.ndarray,
    end: np.ndarray,
    oversample: int = 10,
) -> float:
    """Dense bilinear sampling of a discrete image along one segment.

    Steps `oversample` times finer than the grid pitch; used to cross-check
    the Joseph kernel against an implementation-independent integration of
    the same discrete image.
    """
    src = np.asarray(src, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    seg = end - src
    length = float(np.hypot(*seg))
    n = int(np.ceil(length / (grid.pixel_size / oversample)))
    t = (np.arange(n) + 0.5) / n
    pts = src[None, :] + t[:, None] * seg[None, :]
    xs, ys = grid.x_coords(), grid.y_coords()
    fc = (pts[:, 0] - xs[0]) / grid.pixel_size
    fr = (ys[0] - pts[:, 1]) / grid.pixel_size
    c0 = np.floor(fc).astype(np.int64)
    r0 = np.floor(fr).astype(np.int64)
    wc = fc - c0
    wr = fr - r0
    val = np.zeros(n)
    h_px, w_px = grid.shape
    for dr, dc, w in (
        (0, 0, (1 - wr) * (1 - wc)),
        (0, 1, (1 - wr) * wc),
        (1, 0, wr * (1 - wc)),
        (1, 1, wr * wc),
    ):
        rr, cc = r0 + dr, c0 + dc
        ok = (rr >= 0) & (rr < h_px) & (cc >= 0) & (cc < w_px)
        val += np.where(ok, img[np.clip(rr, 0, h_px - 1), np.clip(cc, 0, w_px - 1)] * w, 0.0)
    return float(val.sum() * length / n)


# ----------------------------------------------------------------------
# stock phantoms (sized for the canonical ~125 mm field of view)
# ----------------------------------------------------------------------


def disk_phantom(radius: float = 20.0, attenuation: float = 0.01) -> EllipsePhantom:
    return EllipsePhantom((Ellipse((0.0, 0.0), (radius, radius), 0.0, attenuation),))


def three_ellipse_phantom() -> EllipsePhantom:
    """Off-center trio with distinct sizes, tilts and contrasts."""
    return EllipsePhantom(
        (
            Ellipse((0.0, 0.0), (45.0, 36.0), 0.0, 0.008),
            Ellipse((-12.0, 8.0), (14.0, 7.0), 30.0, 0.006),
            Ellipse((15.0, -11.0), (8.0, 12.0), -20.0, 0.004),
        )
    )


def bead_ring_phantom() -> EllipsePhantom:
    """Container tube with an inner ring of small dense beads."""
    comps = [
        Ellipse((0.0, 0.0), (50.0, 50.0), 0.0, 0.004),
        Ellipse((0.0, 0.0), (46.0, 46.0), 0.0, -0.002),
    ]
    for k in range(8):
        ang = 2.0 * np.pi * k / 8
        comps.append(
            Ellipse(
                (28.0 * np.cos(ang), 28.0 * np.sin(ang)),
                (4.5, 3.0),
                45.0 * k,
                0.012,
            )
        )
    return EllipsePhantom(tuple(comps))


_STOCK = {
    "disk": disk_phantom,
    "three_ellipse": three_ellipse_phantom,
    "bead_ring": bead_ring_phantom,
}


def stock_phantom(name: str) -> EllipsePhantom:
    try:
        return _STOCK[name]()
    except KeyError:
        raise KeyError(
            f"unknown phantom {name!r}; available: {sorted(_STOCK)}"
        ) from None


# ----------------------------------------------------------------------
# declarative text format: one ellipse per line
#   cx cy a b rotation_deg attenuation [additive]
# ----------------------------------------------------------------------


def parse_phantom(text: str) -> EllipsePhantom:
    comps = []
    for ln, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        parts = body.split()
        if len(parts) not in (6, 7):
            raise ValueError(
                f"phantom line {ln}: expected 6 or 7 fields, got {len(parts)}"
            )
        cx, cy, a, b, rot, mu = (float(v) for v in parts[:6])
        additive = True
        if len(parts) == 7:
            if parts[6] not in ("0", "1"):
                raise ValueError(f"phantom line {ln}: additive flag must be 0 or 1")
            additive = parts[6] == "1"
        comps.append(Ellipse((cx, cy), (a, b), rot, mu, additive))
    return EllipsePhantom(tuple(comps))


def format_phantom(p: EllipsePhantom) -> str:
    lines = ["# cx cy a b rotation_deg attenuation additive"]
    for e in p.components:
        lines.append(
            f"{e.center[0]!r} {e.center[1]!r} {e.semi_axes[0]!r} "
            f"{e.semi_axes[1]!r} {e.rotation_deg!r} {e.attenuation!r} "
            f"{1 if e.additive else 0}"
        )
    return "\n".join(lines) + "\n"


def load_phantom(path) -> EllipsePhantom:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_phantom(fh.read())


def save_phantom(path, p: EllipsePhantom) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_phantom(p))
