"""Dense float64 feature-map primitives and the FMT1 tensor file format.

Feature maps are contiguous row-major float64 arrays shaped ``(C, H, W)`` or
batched ``(B, C, H, W)``.  Spatial operations act on the trailing two axes,
so both layouts (and plain ``(H, W)`` grids in tests) work unchanged.

All operations are pure; inputs are never mutated.  Block means use a fixed
summation order (row-major pairs for the 2x2 window) so results are
reproducible across runs and so that pooling a blockwise-constant grid is
exact.
"""

from __future__ import annotations

import struct

import numpy as np

__all__ = [
    "ShapeMismatch",
    "DimensionError",
    "InvalidConfig",
    "Fmt1Error",
    "as_tensor",
    "block_avg_pool",
    "block_max_pool",
    "block_max_pool_with_index",
    "upsample_replicate",
    "broadcast_mul",
    "add",
    "sub",
    "mul",
    "read_fmt1",
    "write_fmt1",
]


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DimensionError(ValueError):
    """A spatial dimension violates an operation's constraints."""


class InvalidConfig(ValueError):
    """A configuration value is out of range or unrecognized."""


class Fmt1Error(ValueError):
    """Malformed FMT1 tensor file."""


def as_tensor(data) -> np.ndarray:
    """Coerce ``data`` to a contiguous row-major float64 array."""
    return np.ascontiguousarray(data, dtype=np.float64)


def _check_window(x: np.ndarray, k: int, op: str) -> None:
    if x.ndim < 2:
        raise DimensionError(f"{op}: need at least 2 axes, got shape {x.shape}")
    if k < 1:
        raise DimensionError(f"{op}: window must be >= 1, got {k}")
    h, w = x.shape[-2], x.shape[-1]
    if h % k or w % k:
        raise DimensionError(
            f"{op}: spatial dims ({h}, {w}) are not divisible by window {k}"
        )


def _blocked(x: np.ndarray, k: int) -> np.ndarray:
    """View ``(..., H, W)`` as ``(..., H/k, W/k, k*k)`` blocks.

    The last axis enumerates each block's cells in row-major order, which
    fixes the tie-breaking order for argmax-based routines.
    """
    lead = x.shape[:-2]
    h, w = x.shape[-2], x.shape[-1]
    v = x.reshape(*lead, h // k, k, w // k, k)
    v = np.moveaxis(v, -3, -2)
    return v.reshape(*lead, h // k, w // k, k * k)


def _unblocked(v: np.ndarray, k: int) -> np.ndarray:
    """Inverse of :func:`_blocked`."""
    lead = v.shape[:-3]
    hk, wk = v.shape[-3], v.shape[-2]
    u = v.reshape(*lead, hk, wk, k, k)
    u = np.moveaxis(u, -2, -3)
    return np.ascontiguousarray(u.reshape(*lead, hk * k, wk * k))


def block_avg_pool(x, k: int = 2) -> np.ndarray:
    """Mean over non-overlapping ``k x k`` blocks; spatial dims shrink by ``k``.

    For ``k == 2`` the block sum is ``(tl + tr) + (bl + br)``; summing four
    identical values this way is exact, so pooling after replication
    round-trips bitwise.
    """
    x = as_tensor(x)
    _check_window(x, k, "block_avg_pool")
    if k == 1:
        return x.copy()
    if k == 2:
        tl = x[..., 0::2, 0::2]
        tr = x[..., 0::2, 1::2]
        bl = x[..., 1::2, 0::2]
        br = x[..., 1::2, 1::2]
        return ((tl + tr) + (bl + br)) * 0.25
    return _blocked(x, k).sum(axis=-1) / float(k * k)


def block_max_pool(x, k: int = 2) -> np.ndarray:
    """Maximum over non-overlapping ``k x k`` blocks."""
    x = as_tensor(x)
    _check_window(x, k, "block_max_pool")
    if k == 1:
        return x.copy()
    if k == 2:
        tl = x[..., 0::2, 0::2]
        tr = x[..., 0::2, 1::2]
        bl = x[..., 1::2, 0::2]
        br = x[..., 1::2, 1::2]
        return np.maximum(np.maximum(tl, tr), np.maximum(bl, br))
    return _blocked(x, k).max(axis=-1)


def block_max_pool_with_index(x, k: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Block max plus the flat in-block index of each maximum.

    Ties resolve to the first maximal cell in row-major block order, which
    is the cell that receives the gradient in adjoint routines.
    """
    x = as_tensor(x)
    _check_window(x, k, "block_max_pool_with_index")
    v = _blocked(x, k)
    idx = np.argmax(v, axis=-1)
    pooled = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]
    return pooled, idx


def upsample_replicate(x, k: int = 2) -> np.ndarray:
    """Replicate every cell into a ``k x k`` block; spatial dims grow by ``k``."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(
            f"upsample_replicate: need at least 2 axes, got shape {x.shape}"
        )
    if k < 1:
        raise DimensionError(f"upsample_replicate: factor must be >= 1, got {k}")
    if k == 1:
        return x.copy()
    return np.repeat(np.repeat(x, k, axis=-2), k, axis=-1)


def _channel_axis(x: np.ndarray) -> int:
    if x.ndim not in (3, 4):
        raise ShapeMismatch(
            f"expected a (C, H, W) or (B, C, H, W) tensor, got shape {x.shape}"
        )
    return x.ndim - 3


def broadcast_mul(x, w) -> np.ndarray:
    """Scale every spatial position of channel ``c`` by ``w[c]``."""
    x = as_tensor(x)
    w = as_tensor(w)
    axis = _channel_axis(x)
    if w.ndim != 1 or w.shape[0] != x.shape[axis]:
        raise ShapeMismatch(
            f"channel vector of length {w.shape} does not match {x.shape[axis]} channels"
        )
    return x * w.reshape((-1, 1, 1))


def _same_shape(x: np.ndarray, y: np.ndarray, op: str) -> None:
    if x.shape != y.shape:
        raise ShapeMismatch(f"{op}: shapes {x.shape} and {y.shape} differ")


def add(x, y) -> np.ndarray:
    """Elementwise sum of two identically shaped tensors."""
    x, y = as_tensor(x), as_tensor(y)
    _same_shape(x, y, "add")
    return x + y


def sub(x, y) -> np.ndarray:
    """Elementwise difference of two identically shaped tensors."""
    x, y = as_tensor(x), as_tensor(y)
    _same_shape(x, y, "sub")
    return x - y


def mul(x, y) -> np.ndarray:
    """Elementwise product of two identically shaped tensors."""
    x, y = as_tensor(x), as_tensor(y)
    _same_shape(x, y, "mul")
    return x * y


# --- FMT1 on-disk format ---------------------------------------------------
#
# magic "FMT1" | u32 rank | rank * u32 dims | little-endian f64 payload,
# row-major.  Everything little-endian.

_FMT1_MAGIC = b"FMT1"
_FMT1_MAX_RANK = 8


def write_fmt1(x, path) -> None:
    """Serialize a tensor to ``path`` in the FMT1 binary format."""
    x = as_tensor(x)
    if not 1 <= x.ndim <= _FMT1_MAX_RANK:
        raise Fmt1Error(f"FMT1 supports rank 1..{_FMT1_MAX_RANK}, got {x.ndim}")
    with open(path, "wb") as fh:
        fh.write(_FMT1_MAGIC)
        fh.write(struct.pack("<I", x.ndim))
        fh.write(struct.pack(f"<{x.ndim}I", *x.shape))
        fh.write(x.astype("<f8", copy=False).tobytes(order="C"))


def read_fmt1(path) -> np.ndarray:
    """Deserialize an FMT1 file back into a float64 array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:4] != _FMT1_MAGIC:
        raise Fmt1Error(f"{path}: missing FMT1 magic")
    (rank,) = struct.unpack_from("<I", raw, 4)
    if not 1 <= rank <= _FMT1_MAX_RANK:
        raise Fmt1Error(f"{path}: unsupported rank {rank}")
    header_end = 8 + 4 * rank
    if len(raw) < header_end:
        raise Fmt1Error(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    if any(d < 1 for d in dims):
        raise Fmt1Error(f"{path}: non-positive dimension in {dims}")
    count = 1
    for d in dims:
        count *= d
    expected = header_end + 8 * count
    if len(raw) != expected:
        raise Fmt1Error(
            f"{path}: payload is {len(raw) - header_end} bytes, expected {8 * count}"
        )
    data = np.frombuffer(raw, dtype="<f8", offset=header_end, count=count)
    return np.ascontiguousarray(data.astype(np.float64).reshape(dims))
