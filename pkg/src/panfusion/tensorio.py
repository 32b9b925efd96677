"""Binary tensor container and dataset manifest handling."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"TEN1"
DTYPE_FLOAT32 = 0
# magic(4) + dtype(1) + ndim(1) + three little-endian uint32 dims
HEADER = struct.Struct("<4sBBIII")


class TensorFormatError(ValueError):
    """A .ten file (or tensor about to be written) is malformed."""


class ManifestError(ValueError):
    """A dataset manifest is inconsistent with the files it references."""


@dataclass
class ImageTensor:
    """Dense multi-band raster, band-major float32, shape (bands, height, width).

    ``range_hint`` carries the nominal value range; the data itself is not
    clipped to it.
    """

    data: np.ndarray
    range_hint: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise TensorFormatError(
                f"expected 3 dims (bands, height, width), got {self.data.ndim}"
            )
        if min(self.data.shape) < 1:
            raise TensorFormatError(f"degenerate dims {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise TensorFormatError("non-finite values in data")
        lo, hi = self.range_hint
        if not lo < hi:
            raise TensorFormatError(f"range_hint {self.range_hint} is not increasing")

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def write_tensor(path: str | Path, tensor: ImageTensor | np.ndarray) -> None:
    """Serialize to the .ten format (header + raw little-endian float32)."""
    if not isinstance(tensor, ImageTensor):
        tensor = ImageTensor(tensor)
    c, h, w = tensor.data.shape
    payload = tensor.data.astype("<f4", copy=False).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, DTYPE_FLOAT32, 3, c, h, w))
        fh.write(payload)


def read_tensor(path: str | Path, range_hint: tuple[float, float] = (0.0, 1.0)) -> ImageTensor:
    """Parse a .ten file, validating every header field and the payload size."""
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise TensorFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, dtype_code, ndim, c, h, w = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {magic!r}")
    if dtype_code != DTYPE_FLOAT32:
        raise TensorFormatError(f"{path}: unsupported dtype code {dtype_code}")
    if ndim != 3:
        raise TensorFormatError(f"{path}: unsupported ndim {ndim}")
    if min(c, h, w) < 1:
        raise TensorFormatError(f"{path}: degenerate dims ({c}, {h}, {w})")
    expected = HEADER.size + 4 * c * h * w
    if len(raw) < expected:
        raise TensorFormatError(
            f"{path}: truncated payload ({len(raw)} bytes, expected {expected})"
        )
    if len(raw) > expected:
        raise TensorFormatError(f"{path}: trailing bytes after payload")
    data = np.frombuffer(raw, dtype="<f4", offset=HEADER.size).reshape(c, h, w)
    if not np.all(np.isfinite(data)):
        raise TensorFormatError(f"{path}: non-finite values in payload")
    return ImageTensor(data.copy(), range_hint=range_hint)


@dataclass
class ManifestEntry:
    """File references for one fusion sample; gt is absent at full scale."""

    pan: Path
    lrms: Path
    ms: Path
    gt: Path | None = None


@dataclass
class DatasetManifest:
    split: str
    scale_ratio: int
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path = Path(".")

    def to_json_dict(self) -> dict:
        def rel(p: Path | None):
            return None if p is None else str(p.relative_to(self.root))

        return {
            "split": self.split,
            "scale_ratio": self.scale_ratio,
            "entries": [
                {k: v for k, v in
                 {"pan": rel(e.pan), "lrms": rel(e.lrms),
                  "ms": rel(e.ms), "gt": rel(e.gt)}.items() if v is not None}
                for e in self.entries
            ],
        }


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest.to_json_dict(), indent=2) + "\n")


def load_manifest(path: str | Path, validate: bool = True) -> DatasetManifest:
    """Load a manifest and eagerly check every referenced file and its dims.

    Validation enforces pan/lrms at the same size, ms smaller by exactly
    ``scale_ratio``, a single pan band, and matching gt dims when present.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from exc
    for key in ("split", "scale_ratio", "entries"):
        if key not in doc:
            raise ManifestError(f"{path}: missing key {key!r}")
    if doc["split"] not in ("train", "val", "test"):
        raise ManifestError(f"{path}: bad split {doc['split']!r}")
    ratio = doc["scale_ratio"]
    if not (isinstance(ratio, int) and ratio >= 1):
        raise ManifestError(f"{path}: bad scale_ratio {ratio!r}")
    root = path.parent
    entries = []
    for i, rec in enumerate(doc["entries"]):
        for key in ("pan", "lrms", "ms"):
            if key not in rec:
                raise ManifestError(f"{path}: entry {i}: missing key {key!r}")
        entry = ManifestEntry(
            pan=root / rec["pan"],
            lrms=root / rec["lrms"],
            ms=root / rec["ms"],
            gt=(root / rec["gt"]) if rec.get("gt") else None,
        )
        entries.append(entry)
    manifest = DatasetManifest(split=doc["split"], scale_ratio=ratio,
                               entries=entries, root=root)
    if validate:
        _validate_entries(manifest, path)
    return manifest


def _validate_entries(manifest: DatasetManifest, src: Path) -> None:
    for i, entry in enumerate(manifest.entries):
        tensors = {}
        for key in ("pan", "lrms", "ms", "gt"):
            p = getattr(entry, key)
            if p is None:
                continue
            if not p.exists():
                raise ManifestError(f"{src}: entry {i}: {key} file {p} does not exist")
            try:
                tensors[key] = read_tensor(p)
            except TensorFormatError as exc:
                raise ManifestError(f"{src}: entry {i}: {key}: {exc}") from exc
        pan, lrms, ms = tensors["pan"], tensors["lrms"], tensors["ms"]
        r = manifest.scale_ratio
        if pan.bands != 1:
            raise ManifestError(f"{src}: entry {i}: pan has {pan.bands} bands, expected 1")
        if (pan.height, pan.width) != (lrms.height, lrms.width):
            raise ManifestError(
                f"{src}: entry {i}: pan {pan.height}x{pan.width} does not match "
                f"lrms {lrms.height}x{lrms.width}"
            )
        if (lrms.height, lrms.width) != (r * ms.height, r * ms.width):
            raise ManifestError(
                f"{src}: entry {i}: lrms {lrms.height}x{lrms.width} is not "
                f"{r}x ms {ms.height}x{ms.width}"
            )
        if lrms.bands != ms.bands:
            raise ManifestError(
                f"{src}: entry {i}: lrms has {lrms.bands} bands, ms has {ms.bands}"
            )
        gt = tensors.get("gt")
        if gt is not None and gt.data.shape != lrms.data.shape:
            raise ManifestError(
                f"{src}: entry {i}: gt shape {gt.data.shape} does not match "
                f"lrms shape {lrms.data.shape}"
            )
