"""Top-q sparsification with residual error feedback, the sparse wire codec and
the expected-size estimators used for routing predictions."""

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

_HEADER = struct.Struct("<IIB")  # n_d, entry count, elem_bits
_FLOAT_VIEW = {32: (np.float32, np.uint32), 16: (np.float16, np.uint16)}


def index_bits(n_d: int) -> int:
    """Bits needed to address one of ``n_d`` entries."""
    return max(1, math.ceil(math.log2(n_d)))


def kept_count(n_d: int, q: float) -> int:
    """n_a = floor(n_d * q), the number of entries Top-q keeps."""
    if not 0.0 < q <= 1.0:
        raise DomainError(f"q must be in (0, 1], got {q}")
    # tolerate 0.07 * 100 = 7.000000000000001 style representation error
    n_a = math.floor(n_d * q + 1e-9)
    if n_a == 0:
        raise DomainError(f"q={q} keeps no entries of a {n_d}-vector")
    return n_a


@dataclass(eq=False)
class SparseGradient:
    n_d: int
    indices: np.ndarray  # int64, strictly increasing
    values: np.ndarray  # float64, nonzero
    elem_bits: int = 32
    weight: float = 0.0  # sum of sample counts of the contributions it holds

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.indices.shape != self.values.shape or self.indices.ndim != 1:
            raise DomainError("indices and values must be 1-d arrays of equal length")
        if len(self.indices):
            if self.indices[0] < 0 or self.indices[-1] >= self.n_d:
                raise DomainError(f"indices out of range [0, {self.n_d})")
            if np.any(np.diff(self.indices) <= 0):
                raise DomainError("indices must be strictly increasing")
        if np.any(self.values == 0):
            raise DomainError("sparse entries must be nonzero")

    @property
    def index_bits(self) -> int:
        return index_bits(self.n_d)

    @property
    def nnz(self) -> int:
        return len(self.indices)

    @property
    def wire_bits(self) -> int:
        return self.nnz * (self.elem_bits + self.index_bits)

    @property
    def entries(self) -> list[tuple[int, float]]:
        return list(zip(self.indices.tolist(), self.values.tolist()))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.n_d)
        out[self.indices] = self.values
        return out

    def scaled(self, factor: float, weight: float | None = None) -> "SparseGradient":
        if factor == 0:
            return SparseGradient(self.n_d, [], [], self.elem_bits, self.weight if weight is None else weight)
        return SparseGradient(
            self.n_d, self.indices.copy(), self.values * factor, self.elem_bits,
            self.weight if weight is None else weight,
        )

    @classmethod
    def empty(cls, n_d: int, elem_bits: int = 32) -> "SparseGradient":
        return cls(n_d, np.empty(0, np.int64), np.empty(0), elem_bits)


@dataclass
class ResidualState:
    delta: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def zeros(cls, n_d: int) -> "ResidualState":
        return cls(np.zeros(n_d))


def top_q(vec: np.ndarray, q: float, elem_bits: int = 32) -> SparseGradient:
    """Keep the floor(n_d*q) largest-magnitude entries; ties go to the lower index."""
    vec = np.asarray(vec, dtype=np.float64).ravel()
    n_d = vec.size
    n_a = kept_count(n_d, q)
    order = np.lexsort((np.arange(n_d), -np.abs(vec)))
    keep = np.sort(order[:n_a])
    keep = keep[vec[keep] != 0]
    return SparseGradient(n_d, keep, vec[keep].copy(), elem_bits)


def compress_gradient(g: np.ndarray, state: ResidualState, q: float, elem_bits: int = 32) -> SparseGradient:
    """Top-q of (g + residual); whatever is dropped goes back into the residual."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != state.delta.shape:
        raise DomainError(f"gradient shape {g.shape} does not match residual {state.delta.shape}")
    acc = g + state.delta
    out = top_q(acc, q, elem_bits)
    acc[out.indices] = 0.0
    state.delta = acc
    return out


class TopQCompressor:
    """Per-satellite compressor that owns its residual across global iterations."""

    def __init__(self, q: float, n_d: int, elem_bits: int = 32):
        kept_count(n_d, q)
        self.q = q
        self.elem_bits = elem_bits
        self.state = ResidualState.zeros(n_d)

    def __call__(self, g: np.ndarray) -> SparseGradient:
        return compress_gradient(g, self.state, self.q, self.elem_bits)

    def reset(self) -> None:
        self.state = ResidualState.zeros(len(self.state.delta))


def sparse_add(a: SparseGradient, b: SparseGradient) -> SparseGradient:
    if a.n_d != b.n_d:
        raise DomainError(f"dimension mismatch: {a.n_d} vs {b.n_d}")
    idx = np.concatenate([a.indices, b.indices])
    vals = np.concatenate([a.values, b.values])
    uniq, inverse = np.unique(idx, return_inverse=True)
    sums = np.zeros(len(uniq))
    np.add.at(sums, inverse, vals)
    nonzero = sums != 0
    return SparseGradient(a.n_d, uniq[nonzero], sums[nonzero], a.elem_bits, a.weight + b.weight)


def payload_bytes(sg: SparseGradient) -> bytes:
    """Bit-packed (index, value) pairs, LSB first, ceil(nnz*(omega+index_bits)/8) bytes."""
    float_t, uint_t = _FLOAT_VIEW[sg.elem_bits]
    ib = sg.index_bits
    idx_bits = (sg.indices[:, None] >> np.arange(ib)) & 1
    raw = sg.values.astype(float_t).view(uint_t).astype(np.int64)
    val_bits = (raw[:, None] >> np.arange(sg.elem_bits)) & 1
    bits = np.concatenate([idx_bits, val_bits], axis=1).astype(np.uint8).ravel()
    return np.packbits(bits, bitorder="little").tobytes()


def encode_sparse(sg: SparseGradient) -> bytes:
    return _HEADER.pack(sg.n_d, sg.nnz, sg.elem_bits) + payload_bytes(sg)


def decode_sparse(data: bytes) -> SparseGradient:
    if len(data) < _HEADER.size:
        raise DomainError("truncated sparse header")
    n_d, count, elem_bits = _HEADER.unpack_from(data)
    if elem_bits not in _FLOAT_VIEW:
        raise DomainError(f"unsupported element width {elem_bits}")
    ib = index_bits(n_d)
    width = ib + elem_bits
    payload = np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size)
    if len(payload) != math.ceil(count * width / 8):
        raise DomainError("payload length does not match the header")
    bits = np.unpackbits(payload, bitorder="little")[: count * width].reshape(count, width).astype(np.int64)
    indices = (bits[:, :ib] << np.arange(ib)).sum(axis=1)
    float_t, uint_t = _FLOAT_VIEW[elem_bits]
    raw = (bits[:, ib:] << np.arange(elem_bits)).sum(axis=1).astype(uint_t)
    return SparseGradient(n_d, indices, raw.view(float_t).astype(np.float64), elem_bits)


# -- expected sizes -----------------------------------------------------------


def expected_nnz(n_d: int, q: float, L: int) -> float:
    """Expected nonzeros in the sum of L Top-q vectors with independent uniform supports."""
    if L < 1:
        raise DomainError(f"L must be >= 1, got {L}")
    n_a = kept_count(n_d, q)
    return n_d - n_d * (1 - n_a / n_d) ** L


def expected_total_bits(n_d: int, elem_bits: int, q: float, H: int) -> float:
    """Expected bits sent along an H-hop chain that adds one Top-q vector per hop."""
    if H < 1:
        raise DomainError(f"H must be >= 1, got {H}")
    n_a = kept_count(n_d, q)
    a = n_a / n_d
    bracket = H + 1 - (1 / a) * (1 - (1 - a) ** (H + 1))
    return n_d * (elem_bits + index_bits(n_d)) * bracket


def sparse_routing_size(n_d: int, elem_bits: int, q: float, K_p: int) -> float:
    """Predicted gradient bits along the longest branch of a K_p-ring aggregation tree."""
    if K_p < 1:
        raise DomainError(f"K_p must be >= 1, got {K_p}")
    return expected_total_bits(n_d, elem_bits, q, math.ceil(K_p / 2))


# -- Monte Carlo checks -------------------------------------------------------


def _union_sizes(n_d: int, n_a: int, L: int, trials: int, rng: np.random.Generator) -> np.ndarray:
    """(trials, L) support sizes of running sums of independent uniform n_a-subsets."""
    sizes = np.empty((trials, L), dtype=np.int64)
    u = np.full(trials, n_a, dtype=np.int64)
    sizes[:, 0] = u
    for level in range(1, L):
        # overlap of a fresh uniform subset with the current support
        overlap = rng.hypergeometric(u, n_d - u, n_a)
        u = u + n_a - overlap
        sizes[:, level] = u
    return sizes


def _mean_stderr(samples: np.ndarray) -> tuple[float, float]:
    if len(samples) < 2:
        return float(np.mean(samples)), 0.0
    return float(np.mean(samples)), float(np.std(samples, ddof=1) / math.sqrt(len(samples)))


def monte_carlo_nnz(n_d: int, q: float, L: int, trials: int, rng: np.random.Generator) -> tuple[float, float]:
    """Mean and standard error of nnz after summing L independent Top-q supports."""
    sizes = _union_sizes(n_d, kept_count(n_d, q), L, trials, rng)
    return _mean_stderr(sizes[:, -1])


def monte_carlo_total_bits(
    n_d: int, elem_bits: int, q: float, H: int, trials: int, rng: np.random.Generator
) -> tuple[float, float]:
    sizes = _union_sizes(n_d, kept_count(n_d, q), H, trials, rng)
    return _mean_stderr(sizes.sum(axis=1) * (elem_bits + index_bits(n_d)))


def shared_signal_total_bits(
    n_d: int,
    elem_bits: int,
    q: float,
    H: int,
    trials: int,
    rng: np.random.Generator,
    noise: float = 1.0,
) -> tuple[float, float]:
    """Chain traffic when every hop's gradient is a common signal plus private noise."""
    totals = np.empty(trials)
    for trial in range(trials):
        signal = rng.standard_normal(n_d)
        running = SparseGradient.empty(n_d, elem_bits)
        bits = 0
        for _ in range(H):
            running = sparse_add(running, top_q(signal + noise * rng.standard_normal(n_d), q, elem_bits))
            bits += running.wire_bits
        totals[trial] = bits
    return _mean_stderr(totals)
