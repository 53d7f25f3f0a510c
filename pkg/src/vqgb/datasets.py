"""Bounded datasets in the unit box: synthetic mixtures, IDX ingestion, CSV export."""
from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

IDX_MAGIC = 0x00000803


class IdxFormatError(ValueError):
    """Malformed IDX file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class UnboxedDataError(ValueError):
    pass


@dataclass
class BoundedDataset:
    """Points in ``[0,1]^dim``; ``delta`` is the matching loss bound for squared error."""

    points: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ValueError("points must be a non-empty (n, dim) array")
        if not np.all(np.isfinite(pts)) or pts.min() < 0.0 or pts.max() > 1.0:
            raise UnboxedDataError("points must lie in the unit box")
        self.points = pts

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def delta(self) -> float:
        return float(self.dim)

    def __len__(self):
        return self.n

    def subset(self, idx) -> "BoundedDataset":
        return BoundedDataset(self.points[idx], dict(self.provenance, subset=True))


def require_boxed(points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.size and (not np.all(np.isfinite(pts)) or pts.min() < 0.0 or pts.max() > 1.0):
        raise UnboxedDataError("data outside [0,1]^dim; normalize first")
    return pts


def lattice_means(dim: int, components: int) -> np.ndarray:
    """First ``components`` points of a regular lattice spanning ``[0.2, 0.8]^dim``."""
    if components < 1:
        raise ValueError("components must be at least 1")
    if components == 1:
        return np.full((1, dim), 0.5)
    per_axis = max(2, math.ceil(components ** (1.0 / dim) - 1e-9))
    ticks = np.linspace(0.2, 0.8, per_axis)
    grid = np.stack(np.meshgrid(*([ticks] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    return grid[:components].copy()


def synth_mixture(dim: int, components: int, n: int, spread: float,
                  rng: np.random.Generator | int | None = None) -> BoundedDataset:
    """Equal-weight isotropic Gaussian mixture, clamped to the unit box."""
    if components < 1:
        raise ValueError("components must be at least 1")
    if spread <= 0:
        raise ValueError("spread must be positive")
    if dim < 1 or n < 1:
        raise ValueError("dim and n must be positive")
    rng = np.random.default_rng(rng)
    means = lattice_means(dim, components)
    comp = rng.integers(0, components, size=n)
    raw = means[comp] + spread * rng.standard_normal((n, dim))
    return BoundedDataset(np.clip(raw, 0.0, 1.0),
                          {"source": "synth_mixture", "components": components,
                           "spread": spread})


def write_idx(path, images: np.ndarray) -> None:
    """Write a ``(count, rows, cols)`` uint8 tensor as IDX."""
    arr = np.asarray(images)
    if arr.ndim != 3:
        raise ValueError("images must be (count, rows, cols)")
    arr = arr.astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_MAGIC))
        fh.write(struct.pack(">III", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_idx_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise IdxFormatError("truncated magic number", len(blob))
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != IDX_MAGIC:
        raise IdxFormatError(f"bad magic 0x{magic:08x}, expected 0x{IDX_MAGIC:08x}", 0)
    if len(blob) < 16:
        raise IdxFormatError("truncated dimension header", len(blob))
    count, rows, cols = struct.unpack(">III", blob[4:16])
    expected = count * rows * cols
    payload = len(blob) - 16
    if payload != expected:
        raise IdxFormatError(
            f"header declares {expected} pixel bytes, payload has {payload}",
            16 + min(payload, expected))
    return np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(count, rows, cols)


def load_idx(path) -> BoundedDataset:
    """Load an unsigned-byte IDX image file; pixels scaled to ``[0,1]``, rows flattened."""
    arr = read_idx_array(path)
    if arr.shape[0] == 0:
        raise IdxFormatError("file declares zero images", 4)
    flat = arr.reshape(arr.shape[0], -1).astype(np.float64) / 255.0
    return BoundedDataset(flat, {"source": "idx", "path": str(path)})


@dataclass(frozen=True)
class AffineRecord:
    """``x = lo + scale * y``; constant coordinates have ``scale == 0`` and map to 0.5."""

    lo: np.ndarray
    scale: np.ndarray

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        safe = np.where(self.scale > 0, self.scale, 1.0)
        y = (x - self.lo) / safe
        return np.where(self.scale > 0, y, 0.5)

    def inverse(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        return self.lo + self.scale * np.where(self.scale > 0, y, 0.0)


def normalize_to_box(points) -> tuple[BoundedDataset, AffineRecord]:
    """Per-coordinate min-max scaling into ``[0,1]``."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[0] == 0:
        raise ValueError("need at least one point")
    lo = pts.min(axis=0)
    scale = pts.max(axis=0) - lo
    rec = AffineRecord(lo, scale)
    y = np.clip(rec.forward(pts), 0.0, 1.0)
    return BoundedDataset(y, {"source": "normalized"}), rec


def _atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def export_csv(dataset: BoundedDataset, path) -> None:
    lines = ["dim,n", f"{dataset.dim},{dataset.n}"]
    lines += [",".join(repr(float(v)) for v in row) for row in dataset.points]
    _atomic_write_text(path, "\n".join(lines) + "\n")


def import_csv(path) -> BoundedDataset:
    with open(path) as fh:
        rows = [ln.strip() for ln in fh if ln.strip()]
    if len(rows) < 2 or rows[0].replace(" ", "") != "dim,n":
        raise ValueError("missing 'dim,n' header")
    dim, n = (int(v) for v in rows[1].split(","))
    pts = np.array([[float(v) for v in r.split(",")] for r in rows[2:]], dtype=np.float64)
    if pts.shape != (n, dim):
        raise ValueError(f"header declares {n}x{dim}, found {pts.shape}")
    return BoundedDataset(pts, {"source": "csv", "path": str(path)})
