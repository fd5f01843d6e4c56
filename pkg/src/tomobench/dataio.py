"""On-disk formats and the dataset manifest.

Exchange format (RawF32LE): a 16-byte header -- magic ``TBNK``, version,
rows, cols as little-endian uint32 -- followed by rows*cols little-endian
float32 values in row-major order. Bit-exact and documented here so external
reconstructors can speak it.

Preview format (PNG16): 16-bit grayscale PNG, min-max windowed per image;
a constant image maps to mid-gray.

Dataset layout: ``root/slice<id>/mode<m>/`` directories holding
``counts.raw``, ``dark.raw``, ``flat.raw`` (or ``flat1.raw``/``flat2.raw``,
averaged on load) and, under mode 2, an optional ``reference.raw``. The
canonical decoder reads RawF32LE; a different on-disk raster codec can be
plugged in via the `decoder` argument of `load_slice`.
"""

from __future__ import annotations

import enum
import re
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import CorruptFileError, ShapeError
from .geometry import FanBeamGeometry, ImageGrid, canonical_2detect_geometry
from .preprocess import DetectorCalibration
from .projector import Image, Sinogram, Stage

RAW_MAGIC = b"TBNK"
RAW_VERSION = 1
_RAW_HEADER = struct.Struct("<4sIII")

# split id ranges of the canonical manifest, version "v1":
# 3930 training, 550 validation, 470 test slices
SPLIT_TABLE_VERSION = "v1"
SPLIT_RANGES = {
    "train": (1, 3930),
    "validation": (3931, 4480),
    "test": (4481, 4950),
}


class Split(enum.Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


class Mode(enum.Enum):
    MODE1 = 1  # low-dose
    MODE2 = 2  # high-dose clean (reference source)
    MODE3 = 3  # unfiltered beam (beam hardening)


def split_for_id(slice_id: int) -> Split:
    for name, (lo, hi) in SPLIT_RANGES.items():
        if lo <= slice_id <= hi:
            return Split(name)
    # ids beyond the canonical table land in training; flagged by the manifest
    return Split.TRAIN


# ----------------------------------------------------------------------
# RawF32LE
# ----------------------------------------------------------------------


def write_raw_f32le(path, values: np.ndarray) -> None:
    arr = np.asarray(values, dtype="<f4")
    if arr.ndim != 2:
        raise ShapeError("RawF32LE stores 2-D arrays")
    header = _RAW_HEADER.pack(RAW_MAGIC, RAW_VERSION, arr.shape[0], arr.shape[1])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr).tobytes())


def raw_f32le_bytes(values: np.ndarray) -> bytes:
    arr = np.asarray(values, dtype="<f4")
    if arr.ndim != 2:
        raise ShapeError("RawF32LE stores 2-D arrays")
    return _RAW_HEADER.pack(
        RAW_MAGIC, RAW_VERSION, arr.shape[0], arr.shape[1]
    ) + np.ascontiguousarray(arr).tobytes()


def parse_raw_f32le(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < _RAW_HEADER.size:
        raise CorruptFileError(
            f"{source}: {len(blob)} bytes is shorter than the 16-byte header"
        )
    magic, version, rows, cols = _RAW_HEADER.unpack_from(blob)
    if magic != RAW_MAGIC:
        raise CorruptFileError(f"{source}: bad magic {magic!r}, expected {RAW_MAGIC!r}")
    if version != RAW_VERSION:
        raise CorruptFileError(
            f"{source}: RawF32LE version {version} unsupported (this build reads "
            f"{RAW_VERSION})"
        )
    expect = _RAW_HEADER.size + rows * cols * 4
    if len(blob) != expect:
        raise CorruptFileError(
            f"{source}: payload is {len(blob)} bytes, header promises {expect} "
            f"({rows}x{cols} float32)"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=_RAW_HEADER.size)
    return data.reshape(rows, cols).astype(np.float64)


def read_raw_f32le(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    return parse_raw_f32le(blob, source=str(path))


# ----------------------------------------------------------------------
# PNG16 preview
# ----------------------------------------------------------------------


def _png_chunk(tag: bytes, payload: bytes) -> bytes:
    return (
        struct.pack(">I", len(payload))
        + tag
        + payload
        + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF)
    )


def write_png16(path, values: np.ndarray) -> None:
    """Min-max windowed 16-bit grayscale preview; constant images map to mid-gray."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError("PNG16 preview stores 2-D arrays")
    lo, hi = float(arr.min()), float(arr.max())
    if hi > lo:
        scaled = np.round((arr - lo) / (hi - lo) * 65535.0)
    else:
        scaled = np.full(arr.shape, 32768.0)
    pix = scaled.astype(">u2")
    h, w = arr.shape
    ihdr = struct.pack(">IIBBBBB", w, h, 16, 0, 0, 0, 0)  # 16-bit grayscale
    scanlines = b"".join(b"\x00" + pix[r].tobytes() for r in range(h))
    out = (
        b"\x89PNG\r\n\x1a\n"
        + _png_chunk(b"IHDR", ihdr)
        + _png_chunk(b"IDAT", zlib.compress(scanlines, 6))
        + _png_chunk(b"IEND", b"")
    )
    with open(path, "wb") as fh:
        fh.write(out)


def read_png16(path) -> np.ndarray:
    """Decoder for this module's own PNG16 output (filter-0 scanlines only)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != b"\x89PNG\r\n\x1a\n":
        raise CorruptFileError(f"{path}: not a PNG file")
    pos = 8
    w = h = None
    idat = b""
    while pos < len(blob):
        (length,) = struct.unpack_from(">I", blob, pos)
        tag = blob[pos + 4 : pos + 8]
        payload = blob[pos + 8 : pos + 8 + length]
        if tag == b"IHDR":
            w, h, depth, ctype = struct.unpack_from(">IIBB", payload)
            if depth != 16 or ctype != 0:
                raise CorruptFileError(f"{path}: not 16-bit grayscale")
        elif tag == b"IDAT":
            idat += payload
        pos += 12 + length
    raw = zlib.decompress(idat)
    rows = []
    stride = 1 + 2 * w
    for r in range(h):
        line = raw[r * stride : (r + 1) * stride]
        if line[0] != 0:
            raise CorruptFileError(f"{path}: unsupported PNG filter {line[0]}")
        rows.append(np.frombuffer(line[1:], dtype=">u2"))
    return np.stack(rows).astype(np.float64)


def save_image(path, image: Image, format: str = "raw") -> None:
    if format == "raw":
        write_raw_f32le(path, image.values)
    elif format == "png16":
        write_png16(path, image.values)
    else:
        raise ValueError(f"unknown image format {format!r}")


def save_sinogram(path, sino: Sinogram, format: str = "raw") -> None:
    if format == "raw":
        write_raw_f32le(path, sino.values)
    elif format == "png16":
        write_png16(path, sino.values)
    else:
        raise ValueError(f"unknown sinogram format {format!r}")


# ----------------------------------------------------------------------
# dataset manifest
# ----------------------------------------------------------------------

_SLICE_DIR = re.compile(r"^slice(\d+)$")

Decoder = Callable[[Path], np.ndarray]


@dataclass
class SliceEntry:
    slice_id: int
    path: Path
    modes: dict[int, Path]
    has_reference: bool
    split: Split
    problems: list[str] = field(default_factory=list)


@dataclass
class DatasetManifest:
    root: Path
    entries: list[SliceEntry]
    split_table_version: str = SPLIT_TABLE_VERSION

    def ids(self, split: Optional[Split] = None) -> list[int]:
        return [e.slice_id for e in self.entries if split is None or e.split is split]

    def entry(self, slice_id: int) -> SliceEntry:
        for e in self.entries:
            if e.slice_id == slice_id:
                return e
        raise KeyError(f"slice {slice_id} not in manifest")

    def split_counts(self) -> dict[str, int]:
        counts = {s.value: 0 for s in Split}
        for e in self.entries:
            counts[e.split.value] += 1
        return counts


@dataclass
class SliceRecord:
    mode: Mode
    raw: Sinogram
    calibration: DetectorCalibration
    reference: Optional[Image]


def build_manifest(root) -> DatasetManifest:
    """Scan a dataset root into a manifest with deterministic split assignment.

    Missing files are reported per slice in `entry.problems`; the manifest is
    still built. Split assignment only depends on the slice id (the shipped
    id-range table), so the same root always produces the same manifest.
    """
    root = Path(root)
    if not root.exists():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    entries: list[SliceEntry] = []
    for child in sorted(root.iterdir()):
        if not child.is_dir():
            continue
        m = _SLICE_DIR.match(child.name)
        if not m:
            continue
        slice_id = int(m.group(1))
        modes: dict[int, Path] = {}
        problems: list[str] = []
        for mode in (1, 2, 3):
            mdir = child / f"mode{mode}"
            if not mdir.is_dir():
                continue
            modes[mode] = mdir
            if not (mdir / "counts.raw").exists():
                problems.append(f"mode{mode}: counts.raw missing")
            if not (mdir / "dark.raw").exists():
                problems.append(f"mode{mode}: dark.raw missing")
            if not (
                (mdir / "flat.raw").exists() or (mdir / "flat1.raw").exists()
            ):
                problems.append(f"mode{mode}: flat field missing")
        if not modes:
            problems.append("no mode directories")
        has_ref = (child / "mode2" / "reference.raw").exists()
        split = split_for_id(slice_id)
        if not SPLIT_RANGES["train"][0] <= slice_id <= SPLIT_RANGES["test"][1]:
            problems.append("slice id outside the canonical split table; assigned to train")
        entries.append(
            SliceEntry(
                slice_id=slice_id,
                path=child,
                modes=modes,
                has_reference=has_ref,
                split=split,
                problems=problems,
            )
        )
    entries.sort(key=lambda e: e.slice_id)
    ids = [e.slice_id for e in entries]
    if len(ids) != len(set(ids)):
        raise CorruptFileError(f"duplicate slice ids in {root}")
    manifest = DatasetManifest(root=root, entries=entries)
    _assert_no_leakage(manifest)
    return manifest


def _assert_no_leakage(manifest: DatasetManifest) -> None:
    seen: dict[int, Split] = {}
    for e in manifest.entries:
        if e.slice_id in seen and seen[e.slice_id] is not e.split:
            raise CorruptFileError(
                f"slice {e.slice_id} assigned to two splits"
            )
        seen[e.slice_id] = e.split


def infer_geometry(
    values: np.ndarray, geometry: Optional[FanBeamGeometry] = None
) -> FanBeamGeometry:
    """Geometry for a sinogram-shaped array: the given one, the canonical one
    when the shape matches (either orientation), else uniform full-turn angles
    with the canonical distances and detector span."""
    if geometry is not None:
        return geometry
    canonical = canonical_2detect_geometry()
    canon_shape = (canonical.n_angles, canonical.detector_pixel_count)
    if values.shape in (canon_shape, canon_shape[::-1]):
        return canonical
    # fall back to uniform full-turn angles with the canonical distances
    n_angles, n_det = values.shape
    span = canonical.detector_pixel_count * canonical.detector_pixel_size
    return FanBeamGeometry(
        source_object_dist=canonical.source_object_dist,
        source_detector_dist=canonical.source_detector_dist,
        detector_pixel_count=n_det,
        detector_pixel_size=span / n_det,
        angles=np.arange(n_angles) * (360.0 / n_angles),
    )


def load_slice(
    manifest: DatasetManifest,
    slice_id: int,
    mode: Mode,
    geometry: Optional[FanBeamGeometry] = None,
    decoder: Decoder = read_raw_f32le,
) -> SliceRecord:
    """Load one slice's raw counts, calibration and (if present) reference.

    Sinogram files may be stored angle-major (n_angles x n_detector) or in
    the native detector-major order; detector-major input is transposed so
    the in-memory convention is always [angle, detector]. The mode-2
    reference is attached whatever `mode` is requested, since it is the
    scoring target for every task.
    """
    entry = manifest.entry(slice_id)
    mdir = entry.modes.get(mode.value)
    if mdir is None:
        raise FileNotFoundError(
            f"slice {slice_id} has no mode{mode.value} data under {entry.path}"
        )
    counts = decoder(mdir / "counts.raw")
    geom = infer_geometry(counts, geometry)
    expect = (geom.n_angles, geom.detector_pixel_count)
    if counts.shape == expect[::-1] and expect[0] != expect[1]:
        counts = counts.T
    if counts.shape != expect:
        raise CorruptFileError(
            f"{mdir / 'counts.raw'}: shape {counts.shape} matches neither "
            f"{expect} nor its transpose"
        )

    def _cal_frame(name: str) -> np.ndarray:
        if (mdir / f"{name}.raw").exists():
            return decoder(mdir / f"{name}.raw")
        frames = sorted(mdir.glob(f"{name}[0-9].raw"))
        if not frames:
            raise FileNotFoundError(f"slice {slice_id}: no {name} frame in {mdir}")
        return np.mean([decoder(f) for f in frames], axis=0)

    def _squeeze(arr: np.ndarray) -> np.ndarray:
        # single-row calibration files hold one value per detector pixel
        return arr[0] if arr.ndim == 2 and arr.shape[0] == 1 else arr

    dark = _squeeze(_cal_frame("dark"))
    flat = _squeeze(_cal_frame("flat"))
    cal = DetectorCalibration(dark=dark, flat=flat)

    reference = None
    ref_path = entry.path / "mode2" / "reference.raw"
    if ref_path.exists():
        ref_values = decoder(ref_path)
        ref_grid = ImageGrid(
            width_px=ref_values.shape[1],
            height_px=ref_values.shape[0],
            pixel_size=1.0,
        )
        reference = Image(ref_grid, ref_values)

    raw = Sinogram(geom, counts, stage=Stage.COUNTS)
    return SliceRecord(mode=mode, raw=raw, calibration=cal, reference=reference)
