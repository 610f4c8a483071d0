"""Deterministic numerical substrate: unitary FFTs, seeded randomness, array file I/O.

Every other module builds on the conventions fixed here:

* images are 2-D float64 arrays (magnitude convention), k-space is complex128;
* the 2-D FFT is unitary (``1/sqrt(N)`` both directions) and restricted to
  power-of-two sizes;
* randomness always flows through :class:`SeededRng` (PCG64), so identical
  seeds give identical streams on every platform;
* arrays on disk use NPY format version 1.0 with a small, validated dtype set.
"""

from __future__ import annotations

import ast
import struct

import numpy as np

from .errors import ArrayIOError

__all__ = [
    "SeededRng",
    "fft2",
    "ifft2",
    "gaussian",
    "save_array",
    "load_array",
    "write_pgm",
]

RNG_ALGORITHM = "pcg64"

# dtype descriptors admitted by the array-file interchange contract
_ALLOWED_DESCR = {"<f4", "<f8", "<c8", "<c16"}


class SeededRng:
    """Reproducible random stream.

    A stream is identified by a 64-bit ``seed`` plus an optional derivation
    path of integers, so embarrassingly parallel work (one image, one chain,
    one training step) can grab an independent substream via :meth:`derive`
    without sharing mutable state.
    """

    algorithm = RNG_ALGORITHM

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(k) for k in path)
        seq = np.random.SeedSequence([self.seed, *self.path])
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def derive(self, *keys: int) -> "SeededRng":
        """Independent substream keyed by ``keys``; deterministic in (seed, path, keys)."""
        return SeededRng(self.seed, self.path + tuple(int(k) for k in keys))

    def normal(self, shape=None) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=np.float64)

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, path={self.path}, algorithm={self.algorithm!r})"


def _require_pow2_2d(a: np.ndarray) -> None:
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {a.shape}")
    for n in a.shape:
        if n < 1 or (n & (n - 1)) != 0:
            raise ValueError(f"FFT dimensions must be powers of two, got {a.shape}")


def fft2(img: np.ndarray) -> np.ndarray:
    """Unitary 2-D DFT; preserves the l2 norm. Dimensions must be powers of two."""
    _require_pow2_2d(img)
    return np.fft.fft2(img, norm="ortho")


def ifft2(ksp: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2` under the same unitary normalization."""
    _require_pow2_2d(ksp)
    return np.fft.ifft2(ksp, norm="ortho")


def gaussian(rng: SeededRng, shape) -> np.ndarray:
    """I.i.d. standard normal draws, reproducible per seed."""
    return rng.normal(shape)


def _descr_for(dtype: np.dtype) -> str:
    descr = np.dtype(dtype).newbyteorder("<").str
    if descr not in _ALLOWED_DESCR:
        raise ArrayIOError(
            f"dtype {np.dtype(dtype)} is outside the interchange contract {sorted(_ALLOWED_DESCR)}"
        )
    return descr


def save_array(path, array: np.ndarray) -> None:
    """Write ``array`` as NPY version 1.0 (little-endian, C order).

    Only float32/float64/complex64/complex128 arrays are accepted; entries
    must be finite. The written bytes round-trip exactly through
    :func:`load_array` (and through ``numpy.load``).
    """
    a = np.ascontiguousarray(array)
    descr = _descr_for(a.dtype)
    if a.size and not np.all(np.isfinite(a)):
        raise ArrayIOError("refusing to write non-finite entries")
    a = a.astype(np.dtype(descr), copy=False)

    header = "{'descr': %r, 'fortran_order': False, 'shape': %s, }" % (
        descr,
        repr(tuple(int(n) for n in a.shape)),
    )
    # pad with spaces so magic+version+len+header+'\n' is a multiple of 64
    base = 6 + 2 + 2
    pad = (-(base + len(header) + 1)) % 64
    header = header + " " * pad + "\n"

    with open(path, "wb") as fh:
        fh.write(b"\x93NUMPY")
        fh.write(bytes([1, 0]))
        fh.write(struct.pack("<H", len(header)))
        fh.write(header.encode("latin1"))
        fh.write(a.tobytes(order="C"))


def load_array(path, expect: str | None = None) -> np.ndarray:
    """Read an NPY version 1.0 file written by :func:`save_array`.

    ``expect`` may be ``"real"`` or ``"complex"``; a mismatch between the
    stored dtype kind and the expectation raises :class:`ArrayIOError`, as do
    malformed headers and truncated payloads.
    """
    with open(path, "rb") as fh:
        magic = fh.read(6)
        if magic != b"\x93NUMPY":
            raise ArrayIOError(f"{path}: not an NPY file (bad magic {magic!r})")
        version = fh.read(2)
        if len(version) != 2 or (version[0], version[1]) != (1, 0):
            raise ArrayIOError(f"{path}: unsupported NPY version {tuple(version)!r}")
        raw_len = fh.read(2)
        if len(raw_len) != 2:
            raise ArrayIOError(f"{path}: truncated header length")
        (hlen,) = struct.unpack("<H", raw_len)
        raw_header = fh.read(hlen)
        if len(raw_header) != hlen:
            raise ArrayIOError(f"{path}: truncated header")
        try:
            header = ast.literal_eval(raw_header.decode("latin1"))
        except (ValueError, SyntaxError) as exc:
            raise ArrayIOError(f"{path}: malformed header: {exc}") from exc
        if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
            raise ArrayIOError(f"{path}: malformed header dict {header!r}")
        descr = header["descr"]
        if descr not in _ALLOWED_DESCR:
            raise ArrayIOError(f"{path}: dtype {descr!r} outside the interchange contract")
        if header["fortran_order"] is not False:
            raise ArrayIOError(f"{path}: fortran_order must be False")
        shape = header["shape"]
        if not (isinstance(shape, tuple) and all(isinstance(n, int) and n >= 0 for n in shape)):
            raise ArrayIOError(f"{path}: malformed shape {shape!r}")

        dtype = np.dtype(descr)
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = fh.read(count * dtype.itemsize + 1)
        if len(payload) != count * dtype.itemsize:
            raise ArrayIOError(
                f"{path}: truncated payload ({len(payload)} bytes, expected {count * dtype.itemsize})"
            )

    if expect == "real" and dtype.kind != "f":
        raise ArrayIOError(f"{path}: expected a real array, found dtype {descr!r}")
    if expect == "complex" and dtype.kind != "c":
        raise ArrayIOError(f"{path}: expected a complex array, found dtype {descr!r}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def write_pgm(path, img: np.ndarray) -> None:
    """Binary PGM (P5, maxval 65535, big-endian samples) preview of a real image.

    The image is min-max scaled to the full 16-bit range; a constant image
    maps to zero.
    """
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"PGM export needs a 2-D image, got shape {a.shape}")
    lo, hi = float(a.min()), float(a.max())
    scale = 65535.0 / (hi - lo) if hi > lo else 0.0
    q = np.clip(np.round((a - lo) * scale), 0, 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{a.shape[1]} {a.shape[0]}\n65535\n".encode("ascii"))
        fh.write(q.tobytes(order="C"))
