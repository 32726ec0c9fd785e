"""Finite-alphabet probability core: pmf containers, entropy functionals, types.

All information quantities are in bits (base-2 logs), with the 0*log(0) = 0
convention. Infinities are represented by float('inf') and propagate through
arithmetic by saturation. Probability arrays are validated on construction
(nonnegative, normalized within NORMALIZATION_TOL) and stored read-only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import gammaln, xlogy

LOG2 = math.log(2.0)
NORMALIZATION_TOL = 1e-12


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Alphabet:
    """Finite symbol set with a stable ordering."""

    symbols: tuple

    def __post_init__(self):
        object.__setattr__(self, "symbols", tuple(self.symbols))
        if len(self.symbols) == 0:
            raise ValueError("alphabet must be non-empty")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("alphabet symbols must be distinct")

    @property
    def size(self) -> int:
        return len(self.symbols)

    def index(self, symbol) -> int:
        return self.symbols.index(symbol)


def _validated_probs(probs: np.ndarray, shape: tuple) -> np.ndarray:
    arr = np.asarray(probs, dtype=float)
    if arr.shape != shape:
        raise ValueError(f"probs shape {arr.shape} does not match axes {shape}")
    if np.any(arr < -NORMALIZATION_TOL):
        raise ValueError("probability entries must be nonnegative")
    arr = np.where(arr < 0.0, 0.0, arr)
    total = float(arr.sum())
    if abs(total - 1.0) > NORMALIZATION_TOL:
        raise ValueError(f"probabilities sum to {total!r}, not 1")
    arr = arr / total
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class JointPmf:
    """Joint pmf over an ordered tuple of alphabets, stored as a dense array."""

    axes: tuple
    probs: np.ndarray = field(repr=False)

    def __post_init__(self):
        axes = tuple(self.axes)
        object.__setattr__(self, "axes", axes)
        shape = tuple(a.size for a in axes)
        object.__setattr__(self, "probs", _validated_probs(self.probs, shape))

    @property
    def shape(self) -> tuple:
        return self.probs.shape

    def marginal(self, axis_indices: Sequence[int]) -> "JointPmf":
        """Marginal over the given axes, in the requested order."""
        keep = tuple(axis_indices)
        drop = tuple(i for i in range(len(self.axes)) if i not in keep)
        arr = self.probs.sum(axis=drop) if drop else self.probs
        # arr currently has kept axes in ascending order
        ascending = tuple(sorted(keep))
        order = tuple(ascending.index(i) for i in keep)
        arr = np.transpose(arr, order)
        return JointPmf(tuple(self.axes[i] for i in keep), arr)

    def conditional(self, target: Sequence[int], given: Sequence[int]) -> "ConditionalPmf":
        """Conditional pmf of target axes given the others listed in `given`.

        Rows with zero conditioning mass are filled uniformly.
        """
        target = tuple(target)
        given = tuple(given)
        joint = self.marginal(given + target).probs
        g_shape = tuple(self.axes[i].size for i in given)
        t_shape = tuple(self.axes[i].size for i in target)
        g_cells = int(np.prod(g_shape)) if g_shape else 1
        t_cells = int(np.prod(t_shape))
        flat = joint.reshape(g_cells, t_cells)
        row_mass = flat.sum(axis=1, keepdims=True)
        safe = np.where(row_mass > 0.0, row_mass, 1.0)
        rows = flat / safe
        rows = np.where(row_mass > 0.0, rows, 1.0 / t_cells)
        return ConditionalPmf(
            given_axes=tuple(self.axes[i] for i in given),
            target_axes=tuple(self.axes[i] for i in target),
            probs=rows.reshape(g_shape + t_shape),
        )

    def to_json(self) -> str:
        return json.dumps({
            "axes": [list(a.symbols) for a in self.axes],
            "probs": [float(v) for v in self.probs.reshape(-1)],
        })

    @staticmethod
    def from_json(text: str) -> "JointPmf":
        data = json.loads(text)
        axes = tuple(Alphabet(tuple(sym)) for sym in data["axes"])
        shape = tuple(a.size for a in axes)
        return JointPmf(axes, np.asarray(data["probs"], dtype=float).reshape(shape))


@dataclass(frozen=True)
class ConditionalPmf:
    """Row-stochastic conditional pmf, shaped (given axes..., target axes...)."""

    given_axes: tuple
    target_axes: tuple
    probs: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "given_axes", tuple(self.given_axes))
        object.__setattr__(self, "target_axes", tuple(self.target_axes))
        g_shape = tuple(a.size for a in self.given_axes)
        t_shape = tuple(a.size for a in self.target_axes)
        arr = np.asarray(self.probs, dtype=float)
        if arr.shape != g_shape + t_shape:
            raise ValueError("conditional probs shape mismatch")
        if np.any(arr < -NORMALIZATION_TOL):
            raise ValueError("conditional entries must be nonnegative")
        arr = np.where(arr < 0.0, 0.0, arr)
        t_axes = tuple(range(len(g_shape), len(g_shape) + len(t_shape)))
        row = arr.sum(axis=t_axes, keepdims=True)
        if np.any(np.abs(row - 1.0) > 1e-9):
            raise ValueError("conditional rows must each sum to 1")
        arr = arr / row
        arr.flags.writeable = False
        object.__setattr__(self, "probs", arr)

    def join(self, given_pmf: "JointPmf") -> "JointPmf":
        """Compose with a pmf on the given axes into a joint pmf (given..., target...)."""
        g = given_pmf.probs.reshape(given_pmf.probs.shape + (1,) * len(self.target_axes))
        return JointPmf(self.given_axes + self.target_axes, g * self.probs)


@dataclass(frozen=True)
class EmpiricalType:
    """Integer occurrence counts of joint symbols in length-n sequences."""

    axes: tuple
    counts: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "axes", tuple(self.axes))
        counts = np.asarray(self.counts)
        if counts.shape != tuple(a.size for a in self.axes):
            raise ValueError("counts shape mismatch")
        if np.any(counts < 0) or not np.issubdtype(counts.dtype, np.integer):
            raise ValueError("counts must be nonnegative integers")
        counts = counts.copy()
        counts.flags.writeable = False
        object.__setattr__(self, "counts", counts)

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def pmf(self) -> JointPmf:
        return JointPmf(self.axes, self.counts / self.n)


# ---------------------------------------------------------------------------
# array kernels (bits; 0 log 0 = 0; explicit +inf)
# ---------------------------------------------------------------------------

def entropy_bits(probs: np.ndarray) -> float:
    """Entropy in bits of an arbitrary nonnegative array summing to 1."""
    return float(-xlogy(probs, probs).sum() / LOG2)


def kl_bits(p: np.ndarray, q: np.ndarray) -> float:
    """D(p||q) in bits; +inf when p is not absolutely continuous wrt q."""
    p = np.asarray(p, float).reshape(-1)
    q = np.asarray(q, float).reshape(-1)
    mask = p > 0.0
    if np.any(q[mask] <= 0.0):
        return math.inf
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))) / LOG2)


def entropy_bits_batch(rows: np.ndarray) -> np.ndarray:
    """Row-wise entropy in bits for an (N, d) batch."""
    return -xlogy(rows, rows).sum(axis=-1) / LOG2


def kl_bits_batch(rows: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise D(row||q) in bits; +inf where a row escapes q's support."""
    q = np.asarray(q, float).reshape(-1)
    pos = q > 0.0
    logq = np.where(pos, np.log(np.where(pos, q, 1.0)), 0.0)
    vals = (xlogy(rows, rows) - rows * logq).sum(axis=-1) / LOG2
    bad = (rows[..., ~pos] > 0.0).any(axis=-1) if (~pos).any() else np.zeros(rows.shape[:-1], bool)
    return np.where(bad, np.inf, vals)


# ---------------------------------------------------------------------------
# information functionals on JointPmf
# ---------------------------------------------------------------------------

def entropy(pmf: JointPmf, axis_indices: Sequence[int] | None = None) -> float:
    """H of the marginal on the given axes (all axes when omitted)."""
    if axis_indices is None:
        return entropy_bits(pmf.probs)
    return entropy_bits(pmf.marginal(axis_indices).probs)


def conditional_entropy(pmf: JointPmf, target: Sequence[int], given: Sequence[int]) -> float:
    """H(target | given) = H(target, given) - H(given)."""
    both = tuple(given) + tuple(target)
    return entropy(pmf, both) - entropy(pmf, tuple(given))


def mutual_information(pmf: JointPmf, first: Sequence[int], second: Sequence[int]) -> float:
    """I(first; second) for disjoint axis groups."""
    if set(first) & set(second):
        raise ValueError("axis groups must be disjoint")
    return entropy(pmf, first) + entropy(pmf, second) - entropy(pmf, tuple(first) + tuple(second))


def kl_divergence(p: JointPmf, q: JointPmf) -> float:
    """D(p||q) in bits over identical axes; +inf off q's support."""
    if tuple(a.symbols for a in p.axes) != tuple(a.symbols for a in q.axes):
        raise ValueError("pmfs must share the same axes")
    return kl_bits(p.probs, q.probs)


def conditional_kl(p: JointPmf, q: JointPmf, given: Sequence[int]) -> float:
    """Expected row-wise divergence sum_g p(g) D(p(.|g) || q(.|g)) in bits."""
    if tuple(a.symbols for a in p.axes) != tuple(a.symbols for a in q.axes):
        raise ValueError("pmfs must share the same axes")
    given = tuple(given)
    target = tuple(i for i in range(len(p.axes)) if i not in given)
    order = given + target
    g_cells = int(np.prod([p.axes[i].size for i in given])) if given else 1
    pj = p.marginal(order).probs.reshape(g_cells, -1)
    qj = q.marginal(order).probs.reshape(g_cells, -1)
    total = 0.0
    for g in range(g_cells):
        pg = float(pj[g].sum())
        if pg <= 0.0:
            continue
        qg = float(qj[g].sum())
        if qg <= 0.0:
            return math.inf
        d = kl_bits(pj[g] / pg, qj[g] / qg)
        if math.isinf(d):
            return math.inf
        total += pg * d
    return total


# ---------------------------------------------------------------------------
# empirical types and type enumeration
# ---------------------------------------------------------------------------

def empirical_type(sequences: Sequence[np.ndarray], axes: Sequence[Alphabet]) -> EmpiricalType:
    """Joint type of parallel index sequences (one per axis, equal lengths)."""
    axes = tuple(axes)
    seqs = [np.asarray(s, dtype=np.int64) for s in sequences]
    if len(seqs) != len(axes):
        raise ValueError("one sequence per axis required")
    n = len(seqs[0])
    if any(len(s) != n for s in seqs):
        raise ValueError("sequences must have equal length")
    sizes = tuple(a.size for a in axes)
    for s, size in zip(seqs, sizes):
        if n and (s.min() < 0 or s.max() >= size):
            raise ValueError("sequence entry outside alphabet range")
    flat = np.zeros(n, dtype=np.int64)
    for s, size in zip(seqs, sizes):
        flat = flat * size + s
    counts = np.bincount(flat, minlength=int(np.prod(sizes))).reshape(sizes)
    return EmpiricalType(axes, counts)


def log_type_class_size(etype: EmpiricalType, mode: str = "exact") -> float:
    """log2 of the number of sequences sharing the type.

    mode="exact" is the multinomial coefficient; mode="asymptotic" is n*H(type).
    """
    counts = etype.counts.reshape(-1).astype(float)
    n = float(counts.sum())
    if mode == "exact":
        return float((gammaln(n + 1.0) - gammaln(counts + 1.0).sum()) / LOG2)
    if mode == "asymptotic":
        return n * entropy_bits(counts / n) if n > 0 else 0.0
    raise ValueError(f"unknown mode {mode!r}")


def _compositions(total: int, parts: int) -> Iterator[tuple]:
    """All nonnegative integer tuples of the given length summing to total, lexicographic."""
    if parts == 1:
        yield (total,)
        return
    for head in range(total + 1):
        for rest in _compositions(total - head, parts - 1):
            yield (head,) + rest


def enumerate_types(n: int, axes: Sequence[Alphabet]) -> Iterator[EmpiricalType]:
    """All joint types of length-n sequences over the axes, in lexicographic order."""
    axes = tuple(axes)
    sizes = tuple(a.size for a in axes)
    cells = int(np.prod(sizes))
    for comp in _compositions(n, cells):
        yield EmpiricalType(axes, np.asarray(comp, dtype=np.int64).reshape(sizes))


def simplex_grid(dim: int, resolution: int) -> Iterator[np.ndarray]:
    """Probability vectors with entries k/resolution, lexicographic in composition order."""
    for comp in _compositions(resolution, dim):
        yield np.asarray(comp, dtype=float) / resolution


def _composition_array(total: int, parts: int) -> np.ndarray:
    if parts == 1:
        return np.array([[total]], dtype=np.int64)
    blocks = []
    for head in range(total + 1):
        tail = _composition_array(total - head, parts - 1)
        col = np.full((tail.shape[0], 1), head, dtype=np.int64)
        blocks.append(np.hstack([col, tail]))
    return np.vstack(blocks)


def simplex_grid_array(dim: int, resolution: int) -> np.ndarray:
    """Dense (N, dim) array of the simplex grid, same order as simplex_grid."""
    return _composition_array(resolution, dim) / float(resolution)


# ---------------------------------------------------------------------------
# canned sources
# ---------------------------------------------------------------------------

def doubly_symmetric_binary(p: float) -> JointPmf:
    """Uniform binary X with Y = X xor Bernoulli(p)."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("crossover must lie in [0, 1]")
    bit = Alphabet((0, 1))
    probs = np.array([[0.5 * (1 - p), 0.5 * p], [0.5 * p, 0.5 * (1 - p)]])
    return JointPmf((bit, bit), probs)


def sign_magnitude_source() -> JointPmf:
    """Uniform X over {-3,-1,+1,+3} with Y = |X|; x is recoverable from (sign, |x|)."""
    x_axis = Alphabet((-3, -1, 1, 3))
    y_axis = Alphabet((1, 3))
    probs = np.zeros((4, 2))
    for i, x in enumerate(x_axis.symbols):
        probs[i, y_axis.index(abs(x))] = 0.25
    return JointPmf((x_axis, y_axis), probs)
