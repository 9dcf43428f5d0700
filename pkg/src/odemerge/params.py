"""Flat parameter-vector algebra, architecture descriptors and checkpoint I/O.

Every model in a merge stream lives in the same space R^d, represented as a
1-D ``numpy.float64`` array.  The helpers here validate lengths and
finiteness; they never mutate their inputs.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, NumericError

ACTIVATIONS = {"tanh": 0, "relu": 1}
_ACTIVATION_NAMES = {v: k for k, v in ACTIVATIONS.items()}

MAGIC = b"ODEM"
FORMAT_VERSION = 1


def as_vector(x) -> np.ndarray:
    """Return ``x`` as a contiguous 1-D float64 array (copying only if needed)."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"expected a 1-D parameter vector, got shape {arr.shape}")
    return arr


def _check_pair(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise DimensionError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")


def check_finite(x: np.ndarray, what: str = "vector") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite entries in {what}")
    return x


def axpy(a: float, x, y) -> np.ndarray:
    """Return ``a*x + y`` as a new vector."""
    x, y = as_vector(x), as_vector(y)
    _check_pair(x, y)
    if not np.isfinite(a):
        raise NumericError(f"non-finite scale {a!r}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a * x + y
    return check_finite(out, "axpy result")


def dot(x, y) -> float:
    x, y = as_vector(x), as_vector(y)
    _check_pair(x, y)
    return float(np.dot(x, y))


def norm(x) -> float:
    return float(np.linalg.norm(as_vector(x)))


def project_onto(u, g) -> tuple[np.ndarray, np.ndarray]:
    """Split ``u`` into its component along ``g`` and the orthogonal rest.

    Returns ``(u_par, u_perp)`` with ``u_par + u_perp == u``.  A zero ``g``
    has no direction, so the whole of ``u`` is reported as orthogonal.
    """
    u, g = as_vector(u), as_vector(g)
    _check_pair(u, g)
    gg = float(np.dot(g, g))
    if gg == 0.0:
        return np.zeros_like(u), u.copy()
    u_par = (float(np.dot(u, g)) / gg) * g
    return u_par, u - u_par


@dataclass(frozen=True)
class ArchDescriptor:
    """Shape list for a flat vector; MLPs alternate ``(rows, cols)`` weights and ``(cols,)`` biases."""

    layer_shapes: tuple
    activation: str = "tanh"
    class_count: int = 4

    def __post_init__(self):
        shapes = tuple(tuple(int(n) for n in s) for s in self.layer_shapes)
        for s in shapes:
            if len(s) not in (1, 2) or any(n <= 0 for n in s):
                raise FormatError(f"invalid shape entry {s}")
        if self.activation not in ACTIVATIONS:
            raise FormatError(f"unknown activation {self.activation!r}")
        if self.class_count < 1:
            raise FormatError("class_count must be positive")
        object.__setattr__(self, "layer_shapes", shapes)

    @classmethod
    def mlp(cls, sizes, activation="tanh"):
        """Dense network with layer widths ``sizes`` (input first, classes last)."""
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2:
            raise FormatError("an MLP needs at least input and output sizes")
        shapes = []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            shapes += [(n_in, n_out), (n_out,)]
        return cls(tuple(shapes), activation, sizes[-1])

    @property
    def size(self) -> int:
        return int(sum(np.prod(s) for s in self.layer_shapes))

    def blocks(self) -> list[slice]:
        """Slices of the flat vector, one per shape entry."""
        out, start = [], 0
        for s in self.layer_shapes:
            n = int(np.prod(s))
            out.append(slice(start, start + n))
            start += n
        return out

    def mlp_sizes(self) -> list[int]:
        """Recover the layer widths; raises if the shapes are not an MLP."""
        shapes = self.layer_shapes
        if len(shapes) % 2 or not shapes:
            raise FormatError("shapes do not describe weight/bias pairs")
        sizes = [shapes[0][0]]
        for w, b in zip(shapes[0::2], shapes[1::2]):
            if len(w) != 2 or b != (w[1],) or w[0] != sizes[-1]:
                raise FormatError(f"inconsistent layer pair {w}, {b}")
            sizes.append(w[1])
        if sizes[-1] != self.class_count:
            raise FormatError("output width differs from class_count")
        return sizes

    def to_dict(self) -> dict:
        return {
            "layer_shapes": [list(s) for s in self.layer_shapes],
            "activation": self.activation,
            "class_count": self.class_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchDescriptor":
        return cls(tuple(tuple(s) for s in d["layer_shapes"]), d["activation"], int(d["class_count"]))


@dataclass(frozen=True)
class Checkpoint:
    arch: ArchDescriptor
    params: np.ndarray = field(repr=False)
    label: str = ""
    seed: int = 0

    def __post_init__(self):
        p = as_vector(self.params)
        if p.shape[0] != self.arch.size:
            raise DimensionError(f"params length {p.shape[0]} != arch size {self.arch.size}")
        p = p.copy()
        p.flags.writeable = False
        object.__setattr__(self, "params", p)


def save_checkpoint(c: Checkpoint, path) -> None:
    """Write ``c`` in the little-endian ODEM binary layout.

    Layout: magic ``ODEM``, u32 version, u32 shape count, one u64 pair per
    shape (1-D shapes stored as ``(len, 0)``), u8 activation tag, u32 class
    count, u32 label byte length + UTF-8 label, u64 seed, u64 d, d float64.
    """
    label = c.label.encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(c.arch.layer_shapes))]
    for s in c.arch.layer_shapes:
        parts.append(struct.pack("<QQ", s[0], s[1] if len(s) == 2 else 0))
    parts.append(struct.pack("<BI", ACTIVATIONS[c.arch.activation], c.arch.class_count))
    parts.append(struct.pack("<I", len(label)) + label)
    parts.append(struct.pack("<QQ", c.seed, c.params.shape[0]))
    parts.append(c.params.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, fmt: str):
        n = struct.calcsize(fmt)
        if self.pos + n > len(self.buf):
            raise FormatError("truncated checkpoint")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += n
        return vals

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.raw(4) != MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    version, n_shapes = r.take("<II")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    shapes = []
    for _ in range(n_shapes):
        rows, cols = r.take("<QQ")
        shapes.append((rows, cols) if cols else (rows,))
    tag, class_count = r.take("<BI")
    if tag not in _ACTIVATION_NAMES:
        raise FormatError(f"{path}: unknown activation tag {tag}")
    (n_label,) = r.take("<I")
    try:
        label = r.raw(n_label).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: label is not UTF-8") from exc
    seed, d = r.take("<QQ")
    try:
        arch = ArchDescriptor(tuple(shapes), _ACTIVATION_NAMES[tag], class_count)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if arch.size != d:
        raise FormatError(f"{path}: shape sum {arch.size} != vector length {d}")
    values = np.frombuffer(r.raw(8 * d), dtype="<f8").astype(np.float64)
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: trailing bytes")
    return Checkpoint(arch, values, label, seed)
