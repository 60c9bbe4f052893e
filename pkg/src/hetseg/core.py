"""Domain types, dataset manifests and volume I/O.

Two on-disk volume formats are supported:

* a minimal uncompressed NIfTI-1 subset (single file ``.nii``, little-endian,
  float32 or uint8, no scaling);
* a raw format with a 32-byte header: magic ``b"SGH1"``, ``3 x uint32`` shape,
  ``3 x float32`` spacing, ``uint32`` dtype code (0 = float32, 1 = uint8),
  followed by a C-order little-endian payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

LABEL_KEYS = ("all_t1", "all_t2", "new_t2", "vanish_t2")
FORMATS = ("cross_sectional", "longitudinal")
SPLITS = ("train", "test")

DEFAULT_SPACING = (1.0, 1.0, 1.0)
DEFAULT_THRESHOLD = 0.5


class HetsegError(Exception):
    """Base class for package errors."""


class ValidationError(HetsegError, ValueError):
    pass


class FormatError(HetsegError, ValueError):
    pass


class UnsupportedFormatError(FormatError):
    pass


class ConsistencyError(HetsegError, ValueError):
    pass


class ConfigError(HetsegError, ValueError):
    pass


class NumericalError(HetsegError, ArithmeticError):
    pass


def _as_spacing(spacing) -> tuple[float, float, float]:
    sp = tuple(float(np.float32(s)) for s in spacing)
    if len(sp) != 3:
        raise ValidationError(f"spacing must have 3 components, got {len(sp)}")
    if not all(s > 0 and np.isfinite(s) for s in sp):
        raise ValidationError(f"spacing must be strictly positive, got {sp}")
    return sp


@dataclass(frozen=True, eq=False)
class Volume3D:
    """A 3D grid with voxel spacing in mm.

    ``data`` is stored read-only as float32, or as uint8 when given boolean or
    uint8 input (masks).
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = DEFAULT_SPACING

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValidationError(f"expected a non-empty 3D grid, got shape {arr.shape}")
        if arr.dtype == np.bool_ or arr.dtype == np.uint8:
            arr = np.array(arr, dtype=np.uint8)
            if arr.max(initial=0) > 1:
                raise ValidationError("uint8 volumes must be {0,1} masks")
        else:
            arr = np.array(arr, dtype=np.float32)
            if not np.isfinite(arr).all():
                raise ValidationError("volume contains non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.data.shape)

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def is_mask(self) -> bool:
        return self.data.dtype == np.uint8

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.data
        return self.data.astype(dtype)

    def like(self, data) -> Volume3D:
        """New volume with ``data`` and this volume's spacing."""
        return Volume3D(data, self.spacing)

    def same_grid(self, other: Volume3D) -> bool:
        return self.shape == other.shape and self.spacing == other.spacing

    def equals(self, other: Volume3D) -> bool:
        return (
            self.same_grid(other)
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
        )


def mask(data, spacing=DEFAULT_SPACING) -> Volume3D:
    """Build a {0,1} mask volume from anything truthy."""
    return Volume3D(np.asarray(data) != 0, spacing)


def probability(data, spacing=DEFAULT_SPACING) -> Volume3D:
    arr = np.asarray(data, dtype=np.float32)
    if arr.size and (arr.min() < 0 or arr.max() > 1):
        raise ValidationError("probability volume outside [0, 1]")
    return Volume3D(arr, spacing)


def binarize(v, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    arr = np.asarray(v)
    if arr.dtype == np.uint8 or arr.dtype == np.bool_:
        return arr.astype(bool)
    return arr >= threshold


@dataclass(frozen=True)
class LabelSet:
    all_t1: Volume3D | None = None
    all_t2: Volume3D | None = None
    new_t2: Volume3D | None = None
    vanish_t2: Volume3D | None = None

    def present(self) -> dict[str, bool]:
        return {k: getattr(self, k) is not None for k in LABEL_KEYS}

    def items(self) -> Iterator[tuple[str, Volume3D]]:
        for k in LABEL_KEYS:
            v = getattr(self, k)
            if v is not None:
                yield k, v

    def restrict(self, keep: dict[str, bool]) -> LabelSet:
        """Drop every label whose flag in ``keep`` is false."""
        return LabelSet(**{k: (getattr(self, k) if keep.get(k) else None) for k in LABEL_KEYS})


# (name, operand a, operand b, kind): kind "disjoint" means a AND b empty,
# "subset" means a minus b empty.
LABEL_RULES = (
    ("new_t2 disjoint all_t1", "new_t2", "all_t1", "disjoint"),
    ("new_t2 subset all_t2", "new_t2", "all_t2", "subset"),
    ("vanish_t2 subset all_t1", "vanish_t2", "all_t1", "subset"),
    ("vanish_t2 disjoint all_t2", "vanish_t2", "all_t2", "disjoint"),
)


@dataclass(frozen=True)
class Violation:
    rule: str
    voxels: int


def validate_label_consistency(labels: LabelSet) -> list[Violation]:
    """Check the subset/disjointness rules whose operands are both present."""
    present = dict(labels.items())
    if not present:
        raise ValidationError("label set is empty")
    first = next(iter(present.values()))
    for key, v in present.items():
        if v.shape != first.shape:
            raise ValidationError(f"label {key} has shape {v.shape}, expected {first.shape}")
    out = []
    for name, a, b, kind in LABEL_RULES:
        if a not in present or b not in present:
            continue
        ma, mb = binarize(present[a]), binarize(present[b])
        bad = ma & mb if kind == "disjoint" else ma & ~mb
        n = int(bad.sum())
        if n:
            out.append(Violation(name, n))
    return out


@dataclass(frozen=True)
class Timepoint:
    image: Volume3D
    wm_mask: Volume3D | None = None
    offset_years: float = 0.0


@dataclass(frozen=True)
class SubjectRecord:
    """One subject: ordered timepoints plus labels keyed by timepoint pair.

    Labels for a cross-sectional record live under the degenerate pair (0, 0).
    """

    subject_id: str
    timepoints: tuple[Timepoint, ...]
    labels: dict[tuple[int, int], LabelSet] = field(default_factory=dict)

    def __post_init__(self):
        tps = tuple(self.timepoints)
        object.__setattr__(self, "timepoints", tps)
        if not tps:
            raise ValidationError(f"{self.subject_id}: record needs at least one timepoint")
        offsets = [tp.offset_years for tp in tps]
        if offsets[0] < 0 or any(b <= a for a, b in zip(offsets, offsets[1:])):
            raise ValidationError(f"{self.subject_id}: offsets must be non-negative and strictly increasing")
        ref = tps[0].image
        for tp in tps:
            vols = [tp.image] + ([tp.wm_mask] if tp.wm_mask is not None else [])
            for v in vols:
                if not v.same_grid(ref):
                    raise ValidationError(f"{self.subject_id}: volumes do not share shape and spacing")
        n = len(tps)
        for (i, j), ls in self.labels.items():
            if not (0 <= i < n and 0 <= j < n):
                raise ValidationError(f"{self.subject_id}: label pair {(i, j)} out of range")
            for key, v in ls.items():
                if not v.same_grid(ref):
                    raise ValidationError(f"{self.subject_id}: label {key} does not match image grid")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.timepoints[0].image.shape

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.timepoints[0].image.spacing

    def labels_for(self, pair) -> LabelSet:
        return self.labels.get(tuple(pair), LabelSet())


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    format: str
    availability: dict[str, bool]
    records: tuple[SubjectRecord, ...]
    split: dict[str, str]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if self.format not in FORMATS:
            raise ValidationError(f"unknown dataset format {self.format!r}")
        if set(self.availability) != set(LABEL_KEYS):
            raise ValidationError(f"availability must have exactly the keys {LABEL_KEYS}")
        for rec in self.records:
            if self.format == "cross_sectional" and len(rec.timepoints) != 1:
                raise ConsistencyError(f"{rec.subject_id}: cross-sectional record with {len(rec.timepoints)} timepoints")
            if self.split.get(rec.subject_id) not in SPLITS:
                raise ValidationError(f"{rec.subject_id}: split must be one of {SPLITS}")
            for pair, ls in rec.labels.items():
                present = ls.present()
                for k in LABEL_KEYS:
                    if present[k] != bool(self.availability[k]):
                        state = "missing" if self.availability[k] else "unexpected"
                        raise ConsistencyError(f"{self.name}/{rec.subject_id} pair {pair}: {state} label {k}")
            if any(self.availability.values()) and not rec.labels:
                raise ConsistencyError(f"{self.name}/{rec.subject_id}: no labels but availability flags set")

    def records_in(self, split: str) -> list[SubjectRecord]:
        return [r for r in self.records if self.split[r.subject_id] == split]

    def record(self, subject_id: str) -> SubjectRecord:
        for r in self.records:
            if r.subject_id == subject_id:
                return r
        raise KeyError(subject_id)


# ---------------------------------------------------------------------------
# volume I/O

RAW_MAGIC = b"SGH1"
_RAW_HEADER = struct.Struct("<4s3I3fI")
_RAW_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}

_NII_HEADER_SIZE = 348
_NII_VOX_OFFSET = 352
_NII_DTYPES = {16: np.dtype("<f4"), 2: np.dtype("u1")}


def _dtype_for(v: Volume3D) -> np.dtype:
    return np.dtype("u1") if v.is_mask else np.dtype("<f4")


def _nifti_header(v: Volume3D) -> bytes:
    hdr = bytearray(_NII_HEADER_SIZE)
    code = 2 if v.is_mask else 16
    bitpix = 8 if v.is_mask else 32
    struct.pack_into("<i", hdr, 0, _NII_HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *v.shape, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, code, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *v.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(_NII_VOX_OFFSET))
    struct.pack_into("<ff", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: mm
    struct.pack_into("<hh", hdr, 252, 0, 1)  # qform_code, sform_code
    sx, sy, sz = v.spacing
    struct.pack_into("<4f", hdr, 280, sx, 0.0, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 296, 0.0, sy, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, sz, 0.0)
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def _read_nifti(buf: bytes) -> Volume3D:
    if len(buf) < _NII_HEADER_SIZE:
        raise FormatError("truncated NIfTI header")
    (sizeof_hdr,) = struct.unpack_from("<i", buf, 0)
    if sizeof_hdr != _NII_HEADER_SIZE:
        if struct.unpack_from(">i", buf, 0)[0] == _NII_HEADER_SIZE:
            raise UnsupportedFormatError("big-endian NIfTI is not supported")
        raise FormatError(f"bad NIfTI sizeof_hdr {sizeof_hdr}")
    magic = buf[344:348]
    if magic != b"n+1\x00":
        raise UnsupportedFormatError(f"only single-file NIfTI-1 (n+1) is supported, got magic {magic!r}")
    dim = struct.unpack_from("<8h", buf, 40)
    ndim = dim[0]
    if ndim < 3 or ndim > 7 or any(d != 1 for d in dim[4 : ndim + 1]):
        raise UnsupportedFormatError(f"only 3D volumes are supported, got dim {dim}")
    shape = tuple(int(d) for d in dim[1:4])
    if min(shape) < 1:
        raise FormatError(f"bad NIfTI dimensions {shape}")
    code, _bitpix = struct.unpack_from("<hh", buf, 70)
    if code not in _NII_DTYPES:
        raise UnsupportedFormatError(f"unsupported NIfTI datatype code {code}")
    pixdim = struct.unpack_from("<8f", buf, 76)
    (vox_offset,) = struct.unpack_from("<f", buf, 108)
    slope, inter = struct.unpack_from("<ff", buf, 112)
    if slope not in (0.0, 1.0) or inter != 0.0:
        raise UnsupportedFormatError("scaled NIfTI data (scl_slope/scl_inter) is not supported")
    dtype = _NII_DTYPES[code]
    start = int(vox_offset)
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if start < _NII_HEADER_SIZE or len(buf) < start + nbytes:
        raise FormatError("NIfTI payload truncated")
    flat = np.frombuffer(buf, dtype=dtype, count=int(np.prod(shape)), offset=start)
    data = flat.reshape(shape, order="F")
    try:
        spacing = _as_spacing(pixdim[1:4])
    except ValidationError as exc:
        raise FormatError(str(exc)) from None
    return Volume3D(data, spacing)


def _read_raw(buf: bytes) -> Volume3D:
    if len(buf) < _RAW_HEADER.size:
        raise FormatError("truncated raw header")
    magic, nx, ny, nz, sx, sy, sz, code = _RAW_HEADER.unpack_from(buf, 0)
    if magic != RAW_MAGIC:
        raise FormatError(f"bad raw magic {magic!r}")
    if code not in _RAW_DTYPES:
        raise UnsupportedFormatError(f"unsupported raw dtype code {code}")
    shape = (nx, ny, nz)
    if min(shape) < 1:
        raise FormatError(f"bad raw dimensions {shape}")
    dtype = _RAW_DTYPES[code]
    count = nx * ny * nz
    if len(buf) != _RAW_HEADER.size + count * dtype.itemsize:
        raise FormatError("raw payload size does not match header")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=_RAW_HEADER.size).reshape(shape)
    try:
        spacing = _as_spacing((sx, sy, sz))
    except ValidationError as exc:
        raise FormatError(str(exc)) from None
    return Volume3D(data, spacing)


def load_volume(path) -> Volume3D:
    """Read a ``.nii`` or raw (``SGH1``) volume.

    Raises FormatError for malformed headers, UnsupportedFormatError for
    gzip, big-endian or exotic datatypes, and ValidationError for non-finite
    payloads.
    """
    buf = Path(path).read_bytes()
    if buf[:2] == b"\x1f\x8b":
        raise UnsupportedFormatError(f"{path}: compressed volumes are not supported")
    if buf[:4] == RAW_MAGIC:
        return _read_raw(buf)
    return _read_nifti(buf)


def write_volume(v: Volume3D, path) -> None:
    """Write ``v`` as NIfTI-1 for ``.nii`` paths, otherwise as raw."""
    path = Path(path)
    dtype = _dtype_for(v)
    if path.suffix == ".nii":
        payload = np.asarray(v.data, dtype=dtype).tobytes(order="F")
        blob = _nifti_header(v) + b"\x00" * (_NII_VOX_OFFSET - _NII_HEADER_SIZE) + payload
    else:
        code = 1 if v.is_mask else 0
        header = _RAW_HEADER.pack(RAW_MAGIC, *v.shape, *v.spacing, code)
        blob = header + np.ascontiguousarray(v.data, dtype=dtype).tobytes(order="C")
    path.write_bytes(blob)


# ---------------------------------------------------------------------------
# manifests


def load_manifest(path) -> DatasetManifest:
    """Load a dataset manifest and every volume it references.

    Paths inside the manifest are relative to the manifest file.
    """
    path = Path(path)
    root = path.parent
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    for key in ("name", "format", "availability", "records"):
        if key not in doc:
            raise FormatError(f"{path}: manifest lacks field {key!r}")
    availability = {k: bool(doc["availability"].get(k, False)) for k in LABEL_KEYS}
    cache: dict[str, Volume3D] = {}

    def vol(rel: str, what: str) -> Volume3D:
        if rel not in cache:
            p = root / rel
            if not p.exists():
                raise ConsistencyError(f"{path}: {what} file {rel} is missing")
            cache[rel] = load_volume(p)
        return cache[rel]

    records, split = [], {}
    for rdoc in doc["records"]:
        sid = str(rdoc["subject_id"])
        tps = []
        for k, tdoc in enumerate(rdoc["timepoints"]):
            wm = vol(tdoc["wm_mask"], "wm_mask") if tdoc.get("wm_mask") else None
            # missing offsets default to one scan per year
            offset = float(tdoc.get("offset_years", float(k)))
            tps.append(Timepoint(vol(tdoc["image"], "image"), wm, offset))
        labels = {}
        for ldoc in rdoc.get("labels", []):
            pair = tuple(int(i) for i in ldoc["pair"])
            fields = {}
            for k in LABEL_KEYS:
                if availability[k]:
                    if not ldoc.get(k):
                        raise ConsistencyError(f"{path}: {sid} pair {pair} lacks available label {k}")
                    fields[k] = vol(ldoc[k], k)
                elif ldoc.get(k):
                    raise ConsistencyError(f"{path}: {sid} pair {pair} has label {k} not flagged available")
            labels[pair] = LabelSet(**fields)
        records.append(SubjectRecord(sid, tps, labels))
        split[sid] = rdoc.get("split", "train")
    return DatasetManifest(doc["name"], doc["format"], availability, records, split)


def manifest_document(
    name: str,
    fmt: str,
    availability: dict[str, bool],
    records: list[dict],
) -> dict:
    """Assemble the JSON document for a manifest from already-relative paths."""
    return {
        "name": name,
        "format": fmt,
        "availability": {k: bool(availability[k]) for k in LABEL_KEYS},
        "records": records,
    }


def write_json(doc, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
