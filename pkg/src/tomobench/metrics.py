"""PSNR and SSIM against a reference slice, plus table aggregation.

Both metrics need a data range. The default takes the per-slice reference
max - min, which is an explicit, configurable convention (`range_rule`):
pass "ref-range" (default), "ref-max", or a fixed float. Before computing
SSIM moments the joint minimum of the two slices is subtracted, which makes
the score exactly invariant to adding a common constant to both images --
attenuation offsets are arbitrary, similarity should not depend on them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ShapeError

RangeRule = Union[str, float]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricRecord:
    slice_id: int
    psnr: float  # dB; math.inf for identical images
    ssim: float
    data_range_used: float


def _resolve_range(ref: np.ndarray, range_rule: RangeRule) -> float:
    if isinstance(range_rule, (int, float)) and not isinstance(range_rule, bool):
        if range_rule <= 0:
            raise ValueError("fixed data range must be positive")
        return float(range_rule)
    if range_rule == "ref-range":
        r = float(ref.max() - ref.min())
    elif range_rule == "ref-max":
        r = float(ref.max())
    else:
        raise ValueError(f"unknown range rule {range_rule!r}")
    # degenerate constant reference: fall back to a unit range
    return r if r > 0 else 1.0


def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "values", x), dtype=np.float64)


def psnr(x, ref, range_rule: RangeRule = "ref-range") -> float:
    """Peak signal-to-noise ratio in dB; +inf when the images are identical."""
    xv, rv = _as_array(x), _as_array(ref)
    if xv.shape != rv.shape:
        raise ShapeError(f"psnr shapes differ: {xv.shape} vs {rv.shape}")
    rng = _resolve_range(rv, range_rule)
    mse = float(np.mean((xv - rv) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(rng * rng / mse)


def ssim(
    x,
    ref,
    range_rule: RangeRule = "ref-range",
    window: int = SSIM_WINDOW,
    sigma: float = SSIM_SIGMA,
    k1: float = SSIM_K1,
    k2: float = SSIM_K2,
) -> float:
    """Mean structural similarity with a Gaussian window.

    Local means/variances/covariance come from an 11x11, sigma=1.5 Gaussian
    window (reflective boundary, no border crop); C_i = (K_i * range)^2 with
    the shared `range_rule`.
    """
    xv, rv = _as_array(x), _as_array(ref)
    if xv.shape != rv.shape:
        raise ShapeError(f"ssim shapes differ: {xv.shape} vs {rv.shape}")
    if min(xv.shape) < window:
        raise ShapeError(f"image {xv.shape} smaller than ssim window {window}")
    rng = _resolve_range(rv, range_rule)
    offset = min(float(xv.min()), float(rv.min()))
    xv = xv - offset
    rv = rv - offset
    if window % 2 != 1:
        raise ValueError("ssim window must be odd")
    radius = (window - 1) // 2
    truncate = radius / sigma

    def smooth(a):
        return gaussian_filter(a, sigma=sigma, truncate=truncate, mode="reflect")

    mu_x = smooth(xv)
    mu_r = smooth(rv)
    var_x = smooth(xv * xv) - mu_x * mu_x
    var_r = smooth(rv * rv) - mu_r * mu_r
    cov = smooth(xv * rv) - mu_x * mu_r
    c1 = (k1 * rng) ** 2
    c2 = (k2 * rng) ** 2
    s = ((2 * mu_x * mu_r + c1) * (2 * cov + c2)) / (
        (mu_x**2 + mu_r**2 + c1) * (var_x + var_r + c2)
    )
    return float(s.mean())


def score(slice_id: int, x, ref, range_rule: RangeRule = "ref-range") -> MetricRecord:
    rv = _as_array(ref)
    return MetricRecord(
        slice_id=slice_id,
        psnr=psnr(x, ref, range_rule),
        ssim=ssim(x, ref, range_rule),
        data_range_used=_resolve_range(rv, range_rule),
    )


@dataclass
class MetricSummary:
    n: int
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    psnr_inf_excluded: int

    def cell(self, metric: str) -> str:
        """`mean +- std` with 4 decimals, the table cell convention."""
        mean = getattr(self, f"{metric}_mean")
        std = getattr(self, f"{metric}_std")
        if math.isinf(mean):
            return "inf"
        return f"{mean:.4f} ± {std:.4f}"


def _mean_std(values: Sequence[float], ddof: int) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    # a single record reports std 0 by convention
    std = float(arr.std(ddof=ddof)) if arr.size > 1 else 0.0
    return mean, std


def aggregate(records: Iterable[MetricRecord], sample_std: bool = True) -> MetricSummary:
    """Mean and standard deviation per metric over a record set.

    The std is the sample one (N-1) by default; pass ``sample_std=False``
    for the population convention. Records with infinite PSNR (identical
    slices) are excluded from the PSNR average and counted in
    `psnr_inf_excluded`.
    """
    recs = list(records)
    if not recs:
        raise ValueError("aggregate requires at least one record")
    ddof = 1 if sample_std else 0
    finite_psnr = [r.psnr for r in recs if math.isfinite(r.psnr)]
    n_inf = len(recs) - len(finite_psnr)
    if finite_psnr:
        p_mean, p_std = _mean_std(finite_psnr, ddof)
    else:
        p_mean, p_std = math.inf, 0.0
    s_mean, s_std = _mean_std([r.ssim for r in recs], ddof)
    return MetricSummary(
        n=len(recs),
        psnr_mean=p_mean,
        psnr_std=p_std,
        ssim_mean=s_mean,
        ssim_std=s_std,
        psnr_inf_excluded=n_inf,
    )


# ----------------------------------------------------------------------
# delimited / markdown emission
# ----------------------------------------------------------------------

CSV_HEADER = "task,method,slice_id,psnr_db,ssim,data_range"


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf"
    return repr(float(v))


def records_csv(rows: Iterable[tuple[str, str, MetricRecord]]) -> str:
    """CSV body for (task, method, record) rows; floats keep full precision."""
    lines = [CSV_HEADER]
    for task, method, r in rows:
        lines.append(
            f"{task},{method},{r.slice_id},{_fmt(r.psnr)},{_fmt(r.ssim)},"
            f"{_fmt(r.data_range_used)}"
        )
    return "\n".join(lines) + "\n"


def summary_markdown(
    summaries: dict[tuple[str, str], MetricSummary],
    tasks: Optional[Sequence[str]] = None,
    methods: Optional[Sequence[str]] = None,
) -> str:
    """Markdown table: one method per block row, SSIM/PSNR sub-rows, tasks as columns."""
    if tasks is None:
        tasks = sorted({t for t, _ in summaries})
    if methods is None:
        methods = sorted({m for _, m in summaries})
    head = "| Method | Metric | " + " | ".join(tasks) + " |"
    rule = "|---" * (len(tasks) + 2) + "|"
    lines = [head, rule]
    for m in methods:
        for metric in ("ssim", "psnr"):
            cells = []
            for t in tasks:
                s = summaries.get((t, m))
                cells.append(s.cell(metric) if s is not None else "-")
            label = m if metric == "ssim" else ""
            lines.append(
                f"| {label} | {metric.upper()} | " + " | ".join(cells) + " |"
            )
    return "\n".join(lines) + "\n"
