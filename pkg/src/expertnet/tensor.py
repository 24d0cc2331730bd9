"""Dense tensor plumbing: shape checks, fills, seeded randomness, raw dumps.

All tensors are contiguous row-major numpy arrays.  Activations and image
batches use the (batch, channels, height, width) axis order; weights and
biases keep their natural lower rank.  float32 is the working precision,
float64 exists for finite-difference verification.
"""

import struct

import numpy as np

from .errors import FormatError, NumericError, ShapeError

DEFAULT_DTYPE = np.float32
VERIFY_DTYPE = np.float64

TENSOR_MAGIC_F32 = b"XPNT0001"
TENSOR_MAGIC_F64 = b"XPNT0002"

_SPLITMIX_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SPLITMIX_M1 = np.uint64(0xBF58476D1CE4E5B9)
_SPLITMIX_M2 = np.uint64(0x94D049BB133111EB)
_U53_SCALE = float(2.0 ** -53)


def check_shape(shape):
    """Validate a shape tuple: every extent a positive integer."""
    dims = tuple(int(d) for d in shape)
    if len(dims) == 0:
        raise ShapeError("shape must have at least one extent")
    for d in dims:
        if d < 1:
            raise ShapeError(f"shape {dims} has a non-positive extent")
    return dims


def tensor_new(shape, fill=0.0, dtype=DEFAULT_DTYPE):
    """Allocate a tensor of the given shape with every element set to fill."""
    dims = check_shape(shape)
    return np.full(dims, fill, dtype=dtype)


def tensor_rand(shape, stddev, rng, dtype=DEFAULT_DTYPE):
    """Zero-mean Gaussian tensor with the given standard deviation.

    Consumes the rng stream deterministically: identical seed and shape
    always reproduce the same tensor bit for bit.
    """
    dims = check_shape(shape)
    if stddev < 0:
        raise ValueError(f"stddev must be non-negative, got {stddev}")
    n = 1
    for d in dims:
        n *= d
    draws = rng.normal(n) * stddev
    return draws.reshape(dims).astype(dtype)


def zip_elementwise(a, b, f):
    """Combine two same-shape tensors elementwise: c[i] = f(a[i], b[i]).

    f must accept numpy arrays (any ufunc or arithmetic lambda works).
    """
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    out = np.asarray(f(a, b), dtype=a.dtype)
    if out.shape != a.shape:
        raise ShapeError(f"combiner changed shape: {a.shape} -> {out.shape}")
    return out


def assert_finite(arr, what="tensor"):
    """Raise NumericError if the array holds any NaN or infinity."""
    if not np.isfinite(arr).all():
        raise NumericError(f"{what} contains non-finite values")


def dump_tensor(arr):
    """Serialize a tensor: magic, rank u32, extents u32, raw IEEE-754 LE data.

    float32 tensors carry the XPNT0001 magic; the float64 verification mode
    uses XPNT0002 so a reader can never misinterpret the element width.
    """
    if arr.dtype == np.float32:
        magic, elem = TENSOR_MAGIC_F32, "<f4"
    elif arr.dtype == np.float64:
        magic, elem = TENSOR_MAGIC_F64, "<f8"
    else:
        raise FormatError(f"unsupported dtype {arr.dtype} for tensor dump")
    dims = check_shape(arr.shape)
    head = magic + struct.pack("<I", len(dims))
    head += struct.pack(f"<{len(dims)}I", *dims)
    return head + np.ascontiguousarray(arr).astype(elem).tobytes()


def load_tensor(data, offset=0):
    """Parse one serialized tensor, returning (array, next_offset)."""
    magic = data[offset:offset + 8]
    if magic == TENSOR_MAGIC_F32:
        elem, width = "<f4", 4
    elif magic == TENSOR_MAGIC_F64:
        elem, width = "<f8", 8
    else:
        raise FormatError(f"bad tensor magic {magic!r}")
    pos = offset + 8
    if len(data) < pos + 4:
        raise FormatError("truncated tensor header")
    (rank,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if rank == 0 or rank > 8:
        raise FormatError(f"implausible tensor rank {rank}")
    if len(data) < pos + 4 * rank:
        raise FormatError("truncated tensor extents")
    dims = struct.unpack_from(f"<{rank}I", data, pos)
    pos += 4 * rank
    dims = check_shape(dims)
    count = 1
    for d in dims:
        count *= d
    end = pos + count * width
    if len(data) < end:
        raise FormatError("truncated tensor payload")
    arr = np.frombuffer(data[pos:end], dtype=elem).reshape(dims).copy()
    return arr, end


class SeededRng:
    """Deterministic random stream (splitmix64 core, Box-Muller Gaussians).

    Counter based, so the k-th draw depends only on (seed, k): identical
    seeds reproduce identical streams across runs and platforms.  All
    integer mixing is exact uint64 arithmetic; no platform-dependent
    generator state is involved.
    """

    def __init__(self, seed):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._counter = 0

    def _raw(self, n):
        """Next n raw 64-bit words of the stream."""
        start = self._counter + 1
        self._counter += n
        idx = np.arange(start, start + n, dtype=np.uint64)
        z = np.uint64(self.seed) + idx * _SPLITMIX_GAMMA
        z = (z ^ (z >> np.uint64(30))) * _SPLITMIX_M1
        z = (z ^ (z >> np.uint64(27))) * _SPLITMIX_M2
        return z ^ (z >> np.uint64(31))

    def uniform(self, n=None):
        """Uniform float64 draws in [0, 1); scalar when n is None."""
        raw = self._raw(1 if n is None else n)
        vals = (raw >> np.uint64(11)).astype(np.float64) * _U53_SCALE
        return float(vals[0]) if n is None else vals

    def normal(self, n=None):
        """Standard normal float64 draws; scalar when n is None.

        Box-Muller on consecutive raw pairs; consumes 2 * ceil(n / 2)
        raw words per call.
        """
        count = 1 if n is None else int(n)
        pairs = (count + 1) // 2
        raw = self._raw(2 * pairs)
        # u1 in (0, 1] so the log never sees zero.
        u1 = ((raw[0::2] >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * _U53_SCALE
        u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * _U53_SCALE
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = (2.0 * np.pi) * u2
        vals = np.empty(2 * pairs, dtype=np.float64)
        vals[0::2] = radius * np.cos(angle)
        vals[1::2] = radius * np.sin(angle)
        return float(vals[0]) if n is None else vals[:count]

    def integer(self, bound):
        """One integer in [0, bound)."""
        if bound < 1:
            raise ValueError(f"bound must be positive, got {bound}")
        return int(self._raw(1)[0] % np.uint64(bound))

    def permutation(self, n):
        """Fisher-Yates permutation of range(n)."""
        order = np.arange(n)
        if n > 1:
            raw = self._raw(n - 1)
            for i in range(n - 1, 0, -1):
                j = int(raw[n - 1 - i] % np.uint64(i + 1))
                order[i], order[j] = order[j], order[i]
        return order

    def shuffle(self, items):
        """Return a new list with the items in permuted order."""
        order = self.permutation(len(items))
        return [items[i] for i in order]
