"""Volumes, masks and fracture annotations on a physical grid.

Arrays are held as ``data[z, y, x]`` (x fastest in memory) while every
public index triple is ``(x, y, z)``.  Axis convention: x runs
left->right, y posterior->anterior, z inferior->superior; the axial plane
is fixed z, coronal fixed y, sagittal fixed x.
"""
from __future__ import annotations

import csv
import enum
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    IoError,
    MalformedHeaderError,
    MalformedRowError,
    MissingFileError,
    OutOfBoundsError,
    SizeMismatchError,
    UnknownLabelError,
)

ELEMENT_TYPES = {"MET_SHORT": np.dtype("<i2"), "MET_UCHAR": np.dtype("u1")}
_TYPE_NAMES = {np.dtype("int16"): "MET_SHORT", np.dtype("uint8"): "MET_UCHAR"}


@dataclass(frozen=True, eq=False)
class Volume:
    """Immutable 3D scalar grid with spacing and origin in millimetres."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if data.dtype not in _TYPE_NAMES:
            raise ValueError(f"unsupported element type {data.dtype}; use int16 or uint8")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")
        data = np.ascontiguousarray(data)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def element_type(self) -> str:
        return _TYPE_NAMES[self.data.dtype]

    def world(self, index) -> np.ndarray:
        """Voxel index (x, y, z), possibly fractional or an (n, 3) array, to mm."""
        return np.asarray(self.origin) + np.asarray(index, dtype=float) * np.asarray(self.spacing)

    def voxel(self, point) -> np.ndarray:
        """Inverse of :meth:`world`; returns fractional voxel coordinates."""
        return (np.asarray(point, dtype=float) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Bounding box of the voxel footprints (half a voxel beyond the outer centres)."""
        spacing = np.asarray(self.spacing)
        lo = np.asarray(self.origin) - spacing / 2
        hi = lo + np.asarray(self.dims) * spacing
        return lo, hi

    def contains(self, point) -> bool:
        lo, hi = self.bounds()
        p = np.asarray(point, dtype=float)
        return bool(np.all(p >= lo) and np.all(p <= hi))

    def value(self, index) -> float:
        x, y, z = (int(i) for i in index)
        return self.data[z, y, x]

    def same_grid(self, other: "Volume") -> bool:
        return self.dims == other.dims and np.allclose(self.spacing, other.spacing)

    def equals(self, other: "Volume") -> bool:
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.origin == other.origin
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
        )


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def save_volume(v: Volume, header_path) -> None:
    """Write ``header_path`` (.mhd text header) plus a sibling .raw payload."""
    header_path = Path(header_path)
    raw_path = header_path.with_suffix(".raw")
    header = "\n".join(
        [
            "ObjectType = Image",
            "NDims = 3",
            "BinaryData = True",
            "BinaryDataByteOrderMSB = False",
            "DimSize = " + " ".join(str(d) for d in v.dims),
            "ElementSpacing = " + _fmt(v.spacing),
            "Offset = " + _fmt(v.origin),
            f"ElementType = {v.element_type}",
            f"ElementDataFile = {raw_path.name}",
            "",
        ]
    )
    payload = v.data.astype(ELEMENT_TYPES[v.element_type], copy=False).tobytes(order="C")
    try:
        header_path.write_text(header)
        raw_path.write_bytes(payload)
    except OSError as exc:
        raise IoError(f"cannot write volume to {header_path}: {exc}") from exc


def _parse_header(text: str, path: Path) -> dict[str, str]:
    fields = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise MalformedHeaderError(f"{path}:{lineno}: expected 'Key = Value'")
        key, value = line.split("=", 1)
        fields[key.strip()] = value.strip()
    return fields


def _triple(fields, key, cast, default=None, path=None):
    if key not in fields:
        if default is None:
            raise MalformedHeaderError(f"{path}: missing {key}")
        return default
    parts = fields[key].split()
    try:
        values = tuple(cast(p) for p in parts)
    except ValueError:
        raise MalformedHeaderError(f"{path}: cannot parse {key} = {fields[key]!r}") from None
    if len(values) != 3:
        raise MalformedHeaderError(f"{path}: {key} needs 3 values, got {len(values)}")
    return values


def load_volume(header_path) -> Volume:
    header_path = Path(header_path)
    if not header_path.is_file():
        raise MissingFileError(f"no such header: {header_path}")
    try:
        fields = _parse_header(header_path.read_text(), header_path)
    except UnicodeDecodeError:
        raise MalformedHeaderError(f"{header_path}: header is not text") from None

    if fields.get("NDims", "3").strip() != "3":
        raise MalformedHeaderError(f"{header_path}: only NDims = 3 is supported")
    dims = _triple(fields, "DimSize", int, path=header_path)
    if min(dims) < 1:
        raise MalformedHeaderError(f"{header_path}: DimSize must be positive")
    spacing = _triple(fields, "ElementSpacing", float, (1.0, 1.0, 1.0), header_path)
    origin_key = next((k for k in ("Offset", "Origin", "Position") if k in fields), "Offset")
    origin = _triple(fields, origin_key, float, (0.0, 0.0, 0.0), header_path)
    etype = fields.get("ElementType")
    if etype not in ELEMENT_TYPES:
        raise MalformedHeaderError(f"{header_path}: unsupported ElementType {etype!r}")
    if fields.get("BinaryDataByteOrderMSB", "False").lower() == "true":
        raise MalformedHeaderError(f"{header_path}: big-endian payloads are not supported")
    data_file = fields.get("ElementDataFile")
    if not data_file or data_file.upper() == "LOCAL":
        raise MalformedHeaderError(f"{header_path}: ElementDataFile must name a separate raw file")

    raw_path = header_path.parent / data_file
    if not raw_path.is_file():
        raise MissingFileError(f"no such raw payload: {raw_path}")
    dtype = ELEMENT_TYPES[etype]
    nx, ny, nz = dims
    expected = nx * ny * nz * dtype.itemsize
    payload = raw_path.read_bytes()
    if len(payload) != expected:
        raise SizeMismatchError(f"{raw_path}: {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype=dtype).reshape(nz, ny, nx).astype(dtype.newbyteorder("="))
    try:
        return Volume(data, spacing, origin)
    except ValueError as exc:
        raise MalformedHeaderError(f"{header_path}: {exc}") from None


class ProcessLabel(enum.Enum):
    LEFT = "left"
    RIGHT = "right"
    SPINOUS = "spinous"


@dataclass(frozen=True)
class Annotation:
    patient_id: str
    position: tuple[float, float, float]
    process_label: ProcessLabel = field(default=ProcessLabel.SPINOUS)


ANNOTATION_COLUMNS = ("patient_id", "x_mm", "y_mm", "z_mm", "process_label")


def load_annotations(csv_path, v: Volume) -> list[Annotation]:
    csv_path = Path(csv_path)
    if not csv_path.is_file():
        raise MissingFileError(f"no such annotation file: {csv_path}")
    out = []
    with csv_path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != ANNOTATION_COLUMNS:
            raise MalformedRowError(f"{csv_path}:1: header must be {','.join(ANNOTATION_COLUMNS)}")
        for lineno, row in enumerate(reader, 2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 5:
                raise MalformedRowError(f"{csv_path}:{lineno}: expected 5 fields, got {len(row)}")
            pid, xs, ys, zs, label = (c.strip() for c in row)
            try:
                pos = (float(xs), float(ys), float(zs))
            except ValueError:
                raise MalformedRowError(f"{csv_path}:{lineno}: non-numeric coordinate") from None
            if not all(np.isfinite(pos)):
                raise MalformedRowError(f"{csv_path}:{lineno}: non-finite coordinate")
            try:
                process = ProcessLabel(label.lower())
            except ValueError:
                raise UnknownLabelError(f"{csv_path}:{lineno}: unknown process label {label!r}") from None
            if not v.contains(pos):
                raise OutOfBoundsError(f"{csv_path}:{lineno}: {pos} lies outside the volume")
            out.append(Annotation(pid, pos, process))
    return out


def save_annotations(annotations, csv_path) -> None:
    try:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(ANNOTATION_COLUMNS)
            for a in annotations:
                writer.writerow([a.patient_id, *(repr(float(c)) for c in a.position), a.process_label.value])
    except OSError as exc:
        raise IoError(f"cannot write annotations to {csv_path}: {exc}") from exc


def volume_paths(header_path) -> tuple[str, str]:
    header_path = Path(header_path)
    return os.fspath(header_path), os.fspath(header_path.with_suffix(".raw"))
