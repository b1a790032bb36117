"""Frozen-backbone snapshot model, its binary format, masks and manifests.

A snapshot captures everything the segmentation head needs from one image:
the open-vocabulary text bank ``t_open`` (V x D), per-proposal mask
embeddings ``z_open`` (N x D), soft mask proposals ``m_open`` (H x W x N)
with entries in [0, 1], a logit scale, the vocabulary names, and optionally
an image feature map ``f`` (Hf x Wf x D) for visual-embedding extraction.

On disk everything floating is IEEE-754 binary32 (POVS format, little
endian); in memory arrays are promoted to float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    FormatError,
    InvariantError,
    TruncatedPayloadError,
    VersionMismatchError,
)

MAGIC = b"POVS"
VERSION = 1
_FLAG_FEATURES = 0x01
# magic(4) + version(1) + flags(1) + 7 x u32 + f8 logit scale
_HEADER = struct.Struct("<4sBB7Id")


@dataclass
class FrozenSnapshot:
    t_open: np.ndarray            # (V, D)
    z_open: np.ndarray            # (N, D)
    m_open: np.ndarray            # (H, W, N), entries in [0, 1]
    vocab_names: list[str]
    logit_scale: float = 1.0
    features: np.ndarray | None = None   # (Hf, Wf, D)

    @property
    def vocab_size(self) -> int:
        return self.t_open.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.t_open.shape[1]

    @property
    def num_proposals(self) -> int:
        return self.m_open.shape[2]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.m_open.shape[0], self.m_open.shape[1]

    def validate(self) -> None:
        if self.t_open.ndim != 2 or self.z_open.ndim != 2 or self.m_open.ndim != 3:
            raise InvariantError("t_open must be 2-D, z_open 2-D, m_open 3-D")
        v, d = self.t_open.shape
        n = self.z_open.shape[0]
        if self.z_open.shape[1] != d:
            raise InvariantError(
                f"z_open dim {self.z_open.shape[1]} != embedding dim {d}")
        if self.m_open.shape[2] != n:
            raise InvariantError(
                f"m_open has {self.m_open.shape[2]} channels, expected {n}")
        if len(self.vocab_names) != v:
            raise InvariantError(
                f"{len(self.vocab_names)} vocab names for {v} text rows")
        for arr, name in ((self.t_open, "t_open"), (self.z_open, "z_open"),
                          (self.m_open, "m_open")):
            if not np.isfinite(arr).all():
                raise InvariantError(f"non-finite value in {name}")
        if self.m_open.size and (self.m_open.min() < 0.0 or self.m_open.max() > 1.0):
            raise InvariantError("m_open entries must lie in [0, 1]")
        if not (np.isfinite(self.logit_scale) and self.logit_scale > 0.0):
            raise InvariantError(f"logit scale must be positive, got {self.logit_scale}")
        if self.features is not None:
            if self.features.ndim != 3 or self.features.shape[2] != d:
                raise InvariantError("feature map must be (Hf, Wf, D)")
            if not np.isfinite(self.features).all():
                raise InvariantError("non-finite value in features")


def save_snapshot(snapshot: FrozenSnapshot, path: str | Path) -> None:
    """Write a snapshot in POVS format. Byte-deterministic for equal input."""
    snapshot.validate()
    v, d = snapshot.t_open.shape
    n = snapshot.z_open.shape[0]
    h, w = snapshot.grid_shape
    has_f = snapshot.features is not None
    hf, wf = snapshot.features.shape[:2] if has_f else (0, 0)

    parts = [_HEADER.pack(MAGIC, VERSION, _FLAG_FEATURES if has_f else 0,
                          v, d, n, h, w, hf, wf, float(snapshot.logit_scale))]
    for arr in (snapshot.t_open, snapshot.z_open, snapshot.m_open):
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    if has_f:
        parts.append(np.ascontiguousarray(snapshot.features, dtype="<f4").tobytes())
    parts.append(struct.pack("<I", v))
    for name in snapshot.vocab_names:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise InvariantError(f"vocab name too long ({len(raw)} bytes)")
        parts.append(struct.pack("<H", len(raw)) + raw)
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, count: int) -> bytes:
        if self.off + count > len(self.data):
            raise TruncatedPayloadError(
                f"{self.path}: needed {count} bytes at offset {self.off}, "
                f"file has {len(self.data)}")
        out = self.data[self.off:self.off + count]
        self.off += count
        return out

    def array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float64)


def load_snapshot(path: str | Path) -> FrozenSnapshot:
    """Read and validate a POVS file."""
    path = Path(path)
    rd = _Reader(path.read_bytes(), path)
    magic, version, flags, v, d, n, h, w, hf, wf, logit_scale = _HEADER.unpack(
        rd.take(_HEADER.size))
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    has_f = bool(flags & _FLAG_FEATURES)
    if not has_f and (hf or wf):
        raise FormatError(f"{path}: feature dims set but feature flag clear")

    t_open = rd.array(v * d).reshape(v, d)
    z_open = rd.array(n * d).reshape(n, d)
    m_open = rd.array(h * w * n).reshape(h, w, n)
    features = rd.array(hf * wf * d).reshape(hf, wf, d) if has_f else None

    (count,) = struct.unpack("<I", rd.take(4))
    if count != v:
        raise FormatError(f"{path}: vocab count {count} != V {v}")
    names = []
    for _ in range(count):
        (nbytes,) = struct.unpack("<H", rd.take(2))
        names.append(rd.take(nbytes).decode("utf-8"))
    if rd.off != len(rd.data):
        raise FormatError(f"{path}: {len(rd.data) - rd.off} trailing bytes")

    snap = FrozenSnapshot(t_open=t_open, z_open=z_open, m_open=m_open,
                          vocab_names=names, logit_scale=logit_scale,
                          features=features)
    snap.validate()
    # loaded snapshots are immutable and safe to share across evaluators
    for arr in (snap.t_open, snap.z_open, snap.m_open, snap.features):
        if arr is not None:
            arr.setflags(write=False)
    return snap


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    """Write a binary mask as raw H*W bytes of 0/1."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise InvariantError("mask must be 2-D")
    if not np.isin(arr, (0, 1)).all():
        raise InvariantError("mask values must be 0 or 1")
    Path(path).write_bytes(arr.astype(np.uint8).tobytes())


def load_mask(path: str | Path, h: int, w: int) -> np.ndarray:
    """Read a raw binary mask and check it against the expected grid."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) != h * w:
        raise FormatError(f"{path}: {len(raw)} bytes, expected {h * w} for {h}x{w}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w)
    bad = (arr > 1)
    if bad.any():
        raise FormatError(
            f"{path}: mask byte {int(arr[bad][0])} at flat index "
            f"{int(np.flatnonzero(bad)[0])} is not 0/1")
    return arr.copy()


def mask_is_degenerate(mask: np.ndarray) -> bool:
    """All-foreground or all-background masks are legal but degenerate."""
    return bool(mask.all() or not mask.any())


def downsample_mask(mask: np.ndarray, hf: int, wf: int) -> np.ndarray:
    """Area-average a binary mask onto an (hf, wf) grid, threshold at 0.5.

    Exact fractional-overlap pooling, so non-divisible resolutions are fine;
    pooled values of exactly 0.5 round to foreground.
    """
    h, w = mask.shape
    if hf <= 0 or wf <= 0:
        raise InvariantError(f"target resolution {hf}x{wf} must be positive")
    if hf > h or wf > w:
        raise InvariantError(f"target {hf}x{wf} exceeds source {h}x{w}")
    pooled = _overlap(hf, h) @ mask.astype(np.float64) @ _overlap(wf, w).T
    return (pooled >= 0.5).astype(np.uint8)


def _overlap(n_out: int, n_in: int) -> np.ndarray:
    """(n_out, n_in) matrix of source-cell coverage fractions per target cell."""
    scale = n_in / n_out
    weights = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
            weights[i, j] = min(hi, j + 1) - max(lo, j)
    return weights / scale


@dataclass
class ManifestEntry:
    snapshot: Path
    mask: Path | None
    split: str        # "train" | "test"
    polarity: str     # "positive" | "negative"
    class_name: str


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    @property
    def personal_class_name(self) -> str:
        return self.entries[0].class_name

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]


def load_manifest(path: str | Path) -> Manifest:
    """Parse a tab-separated manifest; paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise FormatError(f"{path}:{lineno}: expected 5 tab-separated fields")
        snap_rel, mask_rel, split, polarity, class_name = fields
        if split not in ("train", "test"):
            raise FormatError(f"{path}:{lineno}: unknown split {split!r}")
        if polarity not in ("positive", "negative"):
            raise FormatError(f"{path}:{lineno}: unknown polarity {polarity!r}")
        snap_path = base / snap_rel
        mask_path = None if mask_rel == "-" else base / mask_rel
        if split == "train" and mask_path is None:
            raise FormatError(f"{path}:{lineno}: train entry without a mask")
        if not snap_path.exists():
            raise FormatError(f"{path}:{lineno}: missing snapshot {snap_path}")
        if mask_path is not None and not mask_path.exists():
            raise FormatError(f"{path}:{lineno}: missing mask {mask_path}")
        entries.append(ManifestEntry(snap_path, mask_path, split, polarity, class_name))
    if not entries:
        raise FormatError(f"{path}: empty manifest")
    names = {e.class_name for e in entries}
    if len(names) != 1:
        raise FormatError(f"{path}: multiple personal class names {sorted(names)}")
    return Manifest(entries)
