"""The nine standardized experiments and the parameter-file contract.

Task table: full-data, three limited-angle wedges and three sparse-angle
thinnings of the clean mode-2 scan, low-dose (mode 1, full) and
beam-hardening (mode 3, full). Every task scores against the mode-2
reference reconstruction.

Parameter files are versioned, human-readable ``key = value`` text with
``[section]`` groups; reading back a written file reproduces the value
exactly. Unknown keys under ``[learned]`` round-trip untouched, reserving
room for configs of learned reconstructors this package does not run.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import __version__
from .errors import ParamsError, ParamsVersionError
from .dataio import DatasetManifest, Mode, Split, SliceRecord, load_slice, SPLIT_TABLE_VERSION
from .geometry import (
    AngularSelection,
    FanBeamGeometry,
    Full,
    ImageGrid,
    LimitedWedge,
    SparseStride,
    canonical_2detect_geometry,
    default_grid,
)
from .metrics import MetricRecord, MetricSummary, aggregate, score
from .preprocess import TRANSMISSION_FLOOR, flat_dark_correct, neg_log, subset_sinogram
from .projector import Image
from .solvers import SolverConfig

PARAMS_FORMAT = "tomobench-params"
PARAMS_VERSION = 1


@dataclass(frozen=True)
class TaskSpec:
    name: str
    source_mode: Mode
    selection: AngularSelection
    target: str = "mode2_reference"


_TASK_TABLE: dict[str, tuple[Mode, AngularSelection]] = {
    "FullData": (Mode.MODE2, Full()),
    "LimitedAngle120": (Mode.MODE2, LimitedWedge(1200)),
    "LimitedAngle90": (Mode.MODE2, LimitedWedge(900)),
    "LimitedAngle60": (Mode.MODE2, LimitedWedge(600)),
    "SparseAngle360": (Mode.MODE2, SparseStride(360)),
    "SparseAngle120": (Mode.MODE2, SparseStride(120)),
    "SparseAngle60": (Mode.MODE2, SparseStride(60)),
    "LowDose": (Mode.MODE1, Full()),
    "BeamHardening": (Mode.MODE3, Full()),
}

TASK_NAMES = tuple(_TASK_TABLE)


def build_task(name: str) -> TaskSpec:
    """Canonical task spec for one of the nine experiment names."""
    try:
        mode, sel = _TASK_TABLE[name]
    except KeyError:
        raise KeyError(
            f"unknown task {name!r}; known tasks: {', '.join(TASK_NAMES)}"
        ) from None
    return TaskSpec(name=name, source_mode=mode, selection=sel)


@dataclass
class ExperimentParams:
    task: TaskSpec
    geometry: FanBeamGeometry
    grid: ImageGrid
    method: str
    solver: SolverConfig
    tv_weight: float = 0.0
    transmission_floor: float = TRANSMISSION_FLOOR
    manifest_version: str = SPLIT_TABLE_VERSION
    seed: int = 0
    artifact_version: str = __version__
    learned: dict[str, str] = field(default_factory=dict)


def default_params(task_name: str, method: str = "fbp") -> ExperimentParams:
    g = canonical_2detect_geometry()
    return ExperimentParams(
        task=build_task(task_name),
        geometry=g,
        grid=default_grid(g, 1024),
        method=method,
        solver=SolverConfig(),
    )


# ----------------------------------------------------------------------
# parameter file serialization
# ----------------------------------------------------------------------


def _fmt_float(v: float) -> str:
    return repr(float(v))


def _selection_fields(sel: AngularSelection) -> dict[str, str]:
    if isinstance(sel, Full):
        return {"selection": "full"}
    if isinstance(sel, LimitedWedge):
        return {"selection": "limited_wedge", "first_k_rows": str(sel.first_k_rows)}
    if isinstance(sel, SparseStride):
        return {"selection": "sparse_stride", "n_kept": str(sel.n_kept)}
    raise ParamsError(f"unknown selection {sel!r}")


def _selection_from_fields(d: dict[str, str]) -> AngularSelection:
    kind = d["selection"]
    if kind == "full":
        return Full()
    if kind == "limited_wedge":
        return LimitedWedge(int(d["first_k_rows"]))
    if kind == "sparse_stride":
        return SparseStride(int(d["n_kept"]))
    raise ParamsError(f"unknown selection kind {kind!r}")


def _geometry_fields(g: FanBeamGeometry) -> dict[str, str]:
    out = {
        "source_object_dist_mm": _fmt_float(g.source_object_dist),
        "source_detector_dist_mm": _fmt_float(g.source_detector_dist),
        "detector_pixel_count": str(g.detector_pixel_count),
        "detector_pixel_size_mm": _fmt_float(g.detector_pixel_size),
        "detector_center_offset_mm": _fmt_float(g.detector_center_offset),
    }
    a = g.angles
    # compact start/step/count form only when it reproduces the angle list
    # bit-exactly, so the round trip is lossless either way
    if a.size >= 2:
        step = float(a[1] - a[0])
        uniform = step > 0 and np.array_equal(a[0] + step * np.arange(a.size), a)
    else:
        uniform = True
        step = 0.0
    if uniform:
        out["angle_start_deg"] = _fmt_float(a[0])
        out["angle_step_deg"] = _fmt_float(step)
        out["angle_count"] = str(a.size)
    else:
        out["angles_deg"] = ",".join(_fmt_float(v) for v in a)
    return out


def _geometry_from_fields(d: dict[str, str]) -> FanBeamGeometry:
    if "angles_deg" in d:
        angles = np.array([float(v) for v in d["angles_deg"].split(",")])
    else:
        n = int(d["angle_count"])
        start = float(d["angle_start_deg"])
        step = float(d["angle_step_deg"])
        angles = start + step * np.arange(n)
    return FanBeamGeometry(
        source_object_dist=float(d["source_object_dist_mm"]),
        source_detector_dist=float(d["source_detector_dist_mm"]),
        detector_pixel_count=int(d["detector_pixel_count"]),
        detector_pixel_size=float(d["detector_pixel_size_mm"]),
        angles=angles,
        detector_center_offset=float(d["detector_center_offset_mm"]),
    )


def format_params(p: ExperimentParams) -> str:
    lines = [f"{PARAMS_FORMAT} {PARAMS_VERSION}", ""]

    def section(name: str, fields: dict[str, str]):
        lines.append(f"[{name}]")
        for k, v in fields.items():
            lines.append(f"{k} = {v}")
        lines.append("")

    section(
        "experiment",
        {
            "task": p.task.name,
            "source_mode": str(p.task.source_mode.value),
            **_selection_fields(p.task.selection),
            "target": p.task.target,
            "method": p.method,
            "seed": str(p.seed),
            "manifest_version": p.manifest_version,
            "artifact_version": p.artifact_version,
        },
    )
    section("geometry", _geometry_fields(p.geometry))
    section(
        "grid",
        {
            "width_px": str(p.grid.width_px),
            "height_px": str(p.grid.height_px),
            "pixel_size_mm": _fmt_float(p.grid.pixel_size),
            "center_x_mm": _fmt_float(p.grid.center[0]),
            "center_y_mm": _fmt_float(p.grid.center[1]),
        },
    )
    section(
        "solver",
        {
            "max_iters": str(p.solver.max_iters),
            "step_scale": _fmt_float(p.solver.step_scale),
            "filter": p.solver.filter.value,
            "tolerance": _fmt_float(p.solver.tolerance),
            "seed": str(p.solver.seed),
            "tv_weight": _fmt_float(p.tv_weight),
        },
    )
    section("preprocess", {"transmission_floor": _fmt_float(p.transmission_floor)})
    if p.learned:
        section("learned", dict(p.learned))
    return "\n".join(lines)


def parse_params(text: str, source: str = "<string>") -> ExperimentParams:
    lines = text.splitlines()
    if not lines:
        raise ParamsError(f"{source}: empty parameter file")
    head = lines[0].split()
    if len(head) != 2 or head[0] != PARAMS_FORMAT:
        raise ParamsError(
            f"{source}: first line must be '{PARAMS_FORMAT} <version>', got {lines[0]!r}"
        )
    version = int(head[1])
    if version != PARAMS_VERSION:
        raise ParamsVersionError(
            f"{source}: parameter file version {version} needs migration; "
            f"this build reads version {PARAMS_VERSION}"
        )
    sections: dict[str, dict[str, str]] = {}
    current: Optional[str] = None
    for ln, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections.setdefault(current, {})
            continue
        if "=" not in line or current is None:
            raise ParamsError(f"{source}:{ln}: expected 'key = value' inside a section")
        k, v = line.split("=", 1)
        sections[current][k.strip()] = v.strip()
    try:
        exp = sections["experiment"]
        task = TaskSpec(
            name=exp["task"],
            source_mode=Mode(int(exp["source_mode"])),
            selection=_selection_from_fields(exp),
            target=exp.get("target", "mode2_reference"),
        )
        sol = sections["solver"]
        solver = SolverConfig(
            max_iters=int(sol["max_iters"]),
            step_scale=float(sol["step_scale"]),
            filter=sol["filter"],
            tolerance=float(sol["tolerance"]),
            seed=int(sol["seed"]),
        )
        grid_d = sections["grid"]
        grid = ImageGrid(
            width_px=int(grid_d["width_px"]),
            height_px=int(grid_d["height_px"]),
            pixel_size=float(grid_d["pixel_size_mm"]),
            center=(float(grid_d["center_x_mm"]), float(grid_d["center_y_mm"])),
        )
        return ExperimentParams(
            task=task,
            geometry=_geometry_from_fields(sections["geometry"]),
            grid=grid,
            method=exp["method"],
            solver=solver,
            tv_weight=float(sol.get("tv_weight", "0.0")),
            transmission_floor=float(
                sections.get("preprocess", {}).get(
                    "transmission_floor", repr(TRANSMISSION_FLOOR)
                )
            ),
            manifest_version=exp.get("manifest_version", SPLIT_TABLE_VERSION),
            seed=int(exp.get("seed", "0")),
            artifact_version=exp.get("artifact_version", __version__),
            learned=dict(sections.get("learned", {})),
        )
    except KeyError as e:
        raise ParamsError(f"{source}: missing required field {e}") from None


def write_params(path, p: ExperimentParams) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_params(p))


def read_params(path) -> ExperimentParams:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_params(fh.read(), source=str(path))


# ----------------------------------------------------------------------
# experiment runner
# ----------------------------------------------------------------------

Reconstructor = Callable[..., Image]  # (sinogram, grid) -> image


@dataclass
class SliceFailure:
    slice_id: int
    error: str


@dataclass
class RunResult:
    task: str
    method: str
    results: list[tuple[int, Image, MetricRecord]]
    summary: MetricSummary
    failures: list[SliceFailure]


def run_experiment(
    params: ExperimentParams,
    data: DatasetManifest,
    split: Split,
    reconstructor: Reconstructor,
    jobs: int = 1,
) -> RunResult:
    """Reconstruct and score every slice of a split.

    Per slice: load raw counts for the task's mode, flat/dark correct,
    neg-log, apply the task's angular selection, reconstruct on the params
    grid, then score against the mode-2 reference. Per-slice failures are
    collected without aborting the run; results keep manifest order. The
    whole run is a pure function of (params, manifest, reconstructor).
    """
    ids = data.ids(split)
    if not ids:
        raise ValueError(f"split {split.value!r} is empty in this manifest")

    def one(slice_id: int):
        rec: SliceRecord = load_slice(
            data, slice_id, params.task.source_mode, geometry=params.geometry
        )
        trans = flat_dark_correct(
            rec.raw, rec.calibration, floor=params.transmission_floor
        )
        y = subset_sinogram(neg_log(trans), params.task.selection)
        img = reconstructor(y, params.grid)
        if rec.reference is None:
            raise FileNotFoundError(
                f"slice {slice_id} has no mode-2 reference to score against"
            )
        record = score(slice_id, img.values, rec.reference.values)
        return slice_id, img, record

    results: dict[int, tuple[int, Image, MetricRecord]] = {}
    failures: list[SliceFailure] = []
    if jobs <= 1:
        outcomes = []
        for sid in ids:
            try:
                outcomes.append((sid, one(sid), None))
            except Exception as e:  # noqa: BLE001 - per-slice isolation
                outcomes.append((sid, None, e))
    else:
        outcomes = []
        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            futs = {pool.submit(one, sid): sid for sid in ids}
            done = {}
            for fut, sid in futs.items():
                try:
                    done[sid] = (fut.result(), None)
                except Exception as e:  # noqa: BLE001
                    done[sid] = (None, e)
        outcomes = [(sid, *done[sid]) for sid in ids]
    for sid, ok, err in outcomes:
        if err is not None:
            failures.append(SliceFailure(sid, f"{type(err).__name__}: {err}"))
        else:
            results[sid] = ok
    ordered = [results[sid] for sid in ids if sid in results]
    if not ordered:
        raise RuntimeError(
            f"all {len(ids)} slices failed; first error: {failures[0].error}"
        )
    summary = aggregate([r for _, _, r in ordered])
    return RunResult(
        task=params.task.name,
        method=params.method,
        results=ordered,
        summary=summary,
        failures=failures,
    )
