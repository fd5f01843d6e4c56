"""Uniform reconstructor interface for built-in solvers and external tools.

Built-in classical methods dispatch straight to the solvers module. External
methods run as a child process speaking a byte protocol over stdin/stdout:

* parent -> child stdin: one RawF32LE block holding the line-integral
  sinogram, then a parameter-file text block (UTF-8, same schema as
  experiment parameter files) describing geometry and grid; stdin is closed
  afterwards.
* child -> parent stdout: exactly one RawF32LE block holding the image, row
  count = grid height, col count = grid width.

Nonzero exit, malformed headers, wrong shapes or exceeding the wall-clock
timeout raise ExternalProtocolError with captured diagnostics. Every image
that crosses the registry boundary is float32, so in-process and external
routes of the same method are bit-identical.
"""

from __future__ import annotations

import struct
import subprocess
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dataio import Mode, parse_raw_f32le, raw_f32le_bytes
from .errors import ExternalProtocolError, RegistryError
from .geometry import Full, ImageGrid
from .projector import FanBeamProjector, Image, Sinogram
from .solvers import (
    Regularizer,
    SolverConfig,
    VariationalProblem,
    agd,
    chambolle_pock_tv,
    fbp,
)

CLASSICAL_METHODS = ("fbp", "agd", "chp_tv")

CATEGORIES = (
    "Classical",
    "PostProcessing",
    "Unrolled",
    "LearnedRegularizer",
    "PlugAndPlay",
    "External",
)


@dataclass(frozen=True)
class ReconstructorDescriptor:
    name: str
    category: str = "Classical"
    config: dict = field(default_factory=dict)
    provenance: str = ""

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise RegistryError(f"unknown category {self.category!r}")


class Registry:
    """Name -> descriptor map; names are unique."""

    def __init__(self):
        self._by_name: dict[str, ReconstructorDescriptor] = {}

    def register(self, desc: ReconstructorDescriptor) -> None:
        if desc.name in self._by_name:
            raise RegistryError(f"reconstructor {desc.name!r} already registered")
        self._by_name[desc.name] = desc

    def get(self, name: str) -> ReconstructorDescriptor:
        try:
            return self._by_name[name]
        except KeyError:
            raise RegistryError(
                f"unknown reconstructor {name!r}; registered: {sorted(self._by_name)}"
            ) from None

    def names(self) -> list[str]:
        return sorted(self._by_name)


def default_registry() -> Registry:
    reg = Registry()
    for name in CLASSICAL_METHODS:
        reg.register(ReconstructorDescriptor(name=name, category="Classical"))
    return reg


_CONFIG_FIELDS = (
    ("max_iters", int),
    ("step_scale", float),
    ("filter", str),
    ("tolerance", float),
    ("seed", int),
)


def _solver_config(config: dict) -> SolverConfig:
    kwargs = {k: cast(config[k]) for k, cast in _CONFIG_FIELDS if k in config}
    return SolverConfig(**kwargs)


def reconstruct(
    d: ReconstructorDescriptor, y: Sinogram, grid: ImageGrid
) -> Image:
    """Run one reconstruction through the registry boundary.

    Sinograms are quantized to float32 on entry and images on exit -- the
    registry contract is the RawF32LE wire precision, which makes in-process
    and external routes of the same method bit-identical.
    """
    y = Sinogram(
        y.geometry,
        np.asarray(y.values, dtype=np.float32).astype(np.float64),
        stage=y.stage,
        noise_model_note=y.noise_model_note,
    )
    if d.category == "External":
        img = _run_external(d, y, grid)
    elif d.name == "fbp":
        img, _ = fbp(y, grid, _solver_config(d.config))
    elif d.name == "agd":
        op = FanBeamProjector(y.geometry, grid)
        img, _ = agd(VariationalProblem(op, y), _solver_config(d.config))
    elif d.name == "chp_tv":
        op = FanBeamProjector(y.geometry, grid)
        lam = float(d.config.get("tv_weight", 0.0))
        img, _ = chambolle_pock_tv(
            VariationalProblem(op, y, regularizer=Regularizer("tv", lam)),
            _solver_config(d.config),
        )
    else:
        raise RegistryError(f"no dispatch rule for {d.name!r} ({d.category})")
    return Image(grid, img.values.astype(np.float32))


def _protocol_params_text(y: Sinogram, grid: ImageGrid) -> str:
    # reuse the experiment parameter schema for the geometry/grid block
    from .tasks import ExperimentParams, TaskSpec, format_params

    params = ExperimentParams(
        task=TaskSpec(name="FullData", source_mode=Mode.MODE2, selection=Full()),
        geometry=y.geometry,
        grid=grid,
        method="external",
        solver=SolverConfig(),
    )
    return format_params(params)


def _run_external(
    d: ReconstructorDescriptor, y: Sinogram, grid: ImageGrid
) -> Image:
    command = d.config.get("command")
    if not command:
        raise RegistryError(f"external reconstructor {d.name!r} has no command")
    timeout = float(d.config.get("timeout_s", 300.0))
    payload = raw_f32le_bytes(y.values) + _protocol_params_text(y, grid).encode("utf-8")
    try:
        proc = subprocess.run(
            list(command),
            input=payload,
            capture_output=True,
            timeout=timeout,
        )
    except subprocess.TimeoutExpired as e:
        raise ExternalProtocolError(
            f"{d.name}: child exceeded {timeout} s wall clock and was terminated"
        ) from e
    if proc.returncode != 0:
        stderr = proc.stderr.decode("utf-8", errors="replace").strip()
        raise ExternalProtocolError(
            f"{d.name}: child exited with {proc.returncode}; stderr: {stderr[:2000]}"
        )
    try:
        values = parse_raw_f32le(proc.stdout, source=f"{d.name} stdout")
    except Exception as e:
        raise ExternalProtocolError(f"{d.name}: {e}") from e
    if values.shape != grid.shape:
        raise ExternalProtocolError(
            f"{d.name}: child returned {values.shape}, requested grid is {grid.shape}"
        )
    return Image(grid, values)


def run_worker(stdin_bytes: bytes, method: str, config: Optional[dict] = None) -> bytes:
    """Child-side half of the protocol: parse stdin, reconstruct, emit stdout bytes.

    Lets this package host itself behind the external boundary (the loopback
    fixture), and doubles as a reference implementation for foreign tools.
    """
    from .tasks import parse_params

    header_view = stdin_bytes[:16]
    if len(header_view) < 16:
        raise ExternalProtocolError("worker stdin shorter than a RawF32LE header")
    _, _, rows, cols = struct.unpack("<4sIII", header_view)
    blob_len = 16 + rows * cols * 4
    sino_values = parse_raw_f32le(stdin_bytes[:blob_len], source="worker stdin")
    params = parse_params(
        stdin_bytes[blob_len:].decode("utf-8"), source="worker params block"
    )
    y = Sinogram(params.geometry, sino_values)
    desc = ReconstructorDescriptor(
        name=method, category="Classical", config=config or {}
    )
    img = reconstruct(desc, y, params.grid)
    return raw_f32le_bytes(img.values)
