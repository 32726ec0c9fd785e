"""Random-binning channel specifications and finite-n bin sampling.

A binning channel assigns a bin sequence u to a source sequence x with
probability governed, on the exponential scale, by a nonnegative cost
functional of the joint empirical distribution of (u, x). Four families are
supported:

* fixed_rate   constant cost R (a classical fixed-rate bin index),
* vrsw         cost H(Q_U) on a designated bin marginal, infinite elsewhere,
* star         cost H_Q(U|X) on a designated conditional, infinite elsewhere,
* general_table  arbitrary user-supplied cost of the (bin, source) joint.

Joint arrays over (bin, source) are shaped (|U|, |X|) throughout. Designated
maps may be constant tables or callables of the source marginal q_x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import gammaln

from .probability import (
    LOG2,
    Alphabet,
    _compositions,
    entropy_bits,
    simplex_grid_array,
)

FAMILIES = ("fixed_rate", "vrsw", "star", "general_table")


@dataclass(frozen=True)
class DistortionSpec:
    """Per-symbol distortion d(x, u) >= 0, shaped (|X|, |U|), plus the
    maximum allowed average distortion ``level``."""

    source_alphabet: Alphabet
    bin_alphabet: Alphabet
    table: np.ndarray = field(repr=False)
    level: float = 0.0

    def __post_init__(self):
        arr = np.asarray(self.table, dtype=float)
        if arr.shape != (self.source_alphabet.size, self.bin_alphabet.size):
            raise ValueError("distortion table shape mismatch")
        if np.any(arr < 0.0):
            raise ValueError("distortion must be nonnegative")
        if self.level < 0.0:
            raise ValueError("distortion level must be nonnegative")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "table", arr)

    @staticmethod
    def hamming(alphabet: Alphabet, level: float = 0.0) -> "DistortionSpec":
        eye = np.eye(alphabet.size)
        return DistortionSpec(alphabet, alphabet, 1.0 - eye, level)

    def with_level(self, level: float) -> "DistortionSpec":
        return DistortionSpec(self.source_alphabet, self.bin_alphabet,
                              np.array(self.table), level)

    @property
    def max_value(self) -> float:
        return float(self.table.max())


@dataclass(frozen=True)
class RbcSpec:
    """One binning channel: alphabets, family, and family parameters."""

    source_alphabet: Alphabet
    bin_alphabet: Alphabet
    family: str
    rate: float | None = None
    marginal_map: np.ndarray | Callable | None = None
    conditional_map: np.ndarray | Callable | None = None
    bin_cost: float | Callable | dict | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.family == "fixed_rate":
            if self.rate is None or not 0.0 <= self.rate <= math.log2(self.bin_alphabet.size) + 1e-12:
                raise ValueError("fixed_rate needs rate in [0, log2 |U|]")
        elif self.family == "vrsw":
            if self.marginal_map is None:
                raise ValueError("vrsw needs a marginal map")
            if not callable(self.marginal_map):
                object.__setattr__(
                    self, "marginal_map",
                    _checked_pmf(self.marginal_map, self.bin_alphabet.size, "marginal map"))
        elif self.family == "star":
            if self.conditional_map is None:
                raise ValueError("star needs a conditional map")
            if not callable(self.conditional_map):
                object.__setattr__(
                    self, "conditional_map",
                    _checked_rows(self.conditional_map,
                                  (self.source_alphabet.size, self.bin_alphabet.size),
                                  "conditional map"))
        elif self.family == "general_table":
            if self.bin_cost is None:
                raise ValueError("general_table needs a bin cost (constant, callable, or table)")

    # -- designated maps, evaluated at a source marginal ------------------

    def marginal_at(self, q_x: np.ndarray) -> np.ndarray:
        if self.family == "vrsw":
            m = self.marginal_map(q_x) if callable(self.marginal_map) else self.marginal_map
            return _checked_pmf(m, self.bin_alphabet.size, "marginal map output")
        if self.family == "star":
            rows = self.conditional_at(q_x)
            return np.asarray(q_x, float) @ rows
        raise ValueError(f"{self.family} has no designated bin marginal")

    def conditional_at(self, q_x: np.ndarray) -> np.ndarray:
        if self.family != "star":
            raise ValueError(f"{self.family} has no designated conditional")
        rows = self.conditional_map(q_x) if callable(self.conditional_map) else self.conditional_map
        return _checked_rows(rows, (self.source_alphabet.size, self.bin_alphabet.size),
                             "conditional map output")

    @property
    def bins_are_sequences(self) -> bool:
        """Whether sampled bins are per-symbol sequences (all families but fixed_rate)."""
        return self.family != "fixed_rate"

    def is_deterministic_map(self) -> bool:
        """True for a star spec whose constant conditional rows are all point masses."""
        if self.family != "star" or callable(self.conditional_map):
            return False
        rows = np.asarray(self.conditional_map)
        return bool(np.all(np.max(rows, axis=1) > 1.0 - 1e-12))

    # -- serialization -----------------------------------------------------

    def to_jsonable(self) -> dict:
        out = {
            "family": self.family,
            "source_alphabet": list(self.source_alphabet.symbols),
            "bin_alphabet": list(self.bin_alphabet.symbols),
        }
        if self.family == "fixed_rate":
            out["rate"] = float(self.rate)
        elif self.family == "vrsw":
            if callable(self.marginal_map):
                raise ValueError("callable marginal maps are not serializable")
            out["marginal"] = np.asarray(self.marginal_map).tolist()
        elif self.family == "star":
            if callable(self.conditional_map):
                raise ValueError("callable conditional maps are not serializable")
            out["conditional"] = np.asarray(self.conditional_map).tolist()
        else:
            if callable(self.bin_cost):
                raise ValueError("callable bin costs are not serializable")
            if isinstance(self.bin_cost, dict):
                out["cost_table"] = {
                    "resolution": int(self.bin_cost["resolution"]),
                    "entries": [[list(map(int, k)), float(v)]
                                for k, v in self.bin_cost["entries"].items()],
                }
            else:
                out["constant_cost"] = float(self.bin_cost)
        return out

    @staticmethod
    def from_jsonable(data: dict) -> "RbcSpec":
        src = Alphabet(tuple(data["source_alphabet"]))
        bins = Alphabet(tuple(data["bin_alphabet"]))
        family = data["family"]
        if family == "fixed_rate":
            return RbcSpec(src, bins, family, rate=float(data["rate"]))
        if family == "vrsw":
            if "marginal" in data:
                return RbcSpec(src, bins, family, marginal_map=np.asarray(data["marginal"], float))
            return RbcSpec(src, bins, family,
                           marginal_map=_table_lookup_map(data["marginal_table"], kind="marginal"))
        if family == "star":
            if "conditional" in data:
                return RbcSpec(src, bins, family,
                               conditional_map=np.asarray(data["conditional"], float))
            return RbcSpec(src, bins, family,
                           conditional_map=_table_lookup_map(data["conditional_table"], kind="conditional"))
        if family == "general_table":
            if "constant_cost" in data:
                return RbcSpec(src, bins, family, bin_cost=float(data["constant_cost"]))
            table = data["cost_table"]
            entries = {tuple(map(int, key)): float(val) for key, val in table["entries"]}
            return RbcSpec(src, bins, family,
                           bin_cost={"resolution": int(table["resolution"]), "entries": entries})
        raise ValueError(f"unknown family {family!r}")


def _checked_pmf(values, size: int, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.shape != (size,):
        raise ValueError(f"{what} must have length {size}")
    if np.any(arr < -1e-12):
        raise ValueError(f"{what} must be nonnegative")
    arr = np.clip(arr, 0.0, None)
    total = arr.sum()
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"{what} must sum to 1")
    arr = arr / total
    arr.flags.writeable = False
    return arr


def _checked_rows(values, shape: tuple, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.shape != shape:
        raise ValueError(f"{what} must have shape {shape}")
    if np.any(arr < -1e-12):
        raise ValueError(f"{what} must be nonnegative")
    arr = np.clip(arr, 0.0, None)
    row = arr.sum(axis=1, keepdims=True)
    if np.any(np.abs(row - 1.0) > 1e-9):
        raise ValueError(f"{what} rows must sum to 1")
    arr = arr / row
    arr.flags.writeable = False
    return arr


def _table_lookup_map(table: dict, kind: str) -> Callable:
    """Per-type lookup keyed by the source marginal quantized at a resolution."""
    resolution = int(table["resolution"])
    entries = {}
    for key, value in table["entries"]:
        entries[tuple(int(k) for k in key)] = np.asarray(value, dtype=float)

    def lookup(q_x: np.ndarray) -> np.ndarray:
        key = tuple(int(c) for c in quantize_counts(np.asarray(q_x, float), resolution))
        if key not in entries:
            raise KeyError(f"no {kind} entry for quantized source marginal {key}")
        return entries[key]

    return lookup


# ---------------------------------------------------------------------------
# cost evaluation
# ---------------------------------------------------------------------------

def eval_F(spec: RbcSpec, q_ux: np.ndarray, atol: float = 1e-9) -> float:
    """Cost of a (bin, source) joint under the spec; +inf off the designated set."""
    q_ux = np.asarray(q_ux, dtype=float)
    if q_ux.shape != (spec.bin_alphabet.size, spec.source_alphabet.size):
        raise ValueError("q_ux must be shaped (|U|, |X|)")
    if spec.family == "fixed_rate":
        return float(spec.rate)
    q_x = q_ux.sum(axis=0)
    if spec.family == "vrsw":
        q_u = q_ux.sum(axis=1)
        if np.max(np.abs(q_u - spec.marginal_at(q_x))) > atol:
            return math.inf
        return entropy_bits(q_u)
    if spec.family == "star":
        rows = spec.conditional_at(q_x)
        if np.max(np.abs(q_ux - (q_x[None, :] * rows.T))) > atol:
            return math.inf
        return entropy_bits(q_ux) - entropy_bits(q_x)
    # general_table
    cost = spec.bin_cost
    if callable(cost):
        return float(cost(q_ux))
    if isinstance(cost, dict):
        key = tuple(int(c) for c in quantize_counts(q_ux.reshape(-1), int(cost["resolution"])))
        if key not in cost["entries"]:
            return math.inf
        return float(cost["entries"][key])
    return float(cost)


# ---------------------------------------------------------------------------
# quantization
# ---------------------------------------------------------------------------

def quantize_counts(weights: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder rounding of weights*total to integers summing to total.

    Remainder ties go to the lowest index.
    """
    weights = np.asarray(weights, dtype=float)
    target = weights / weights.sum() * total if weights.sum() > 0 else np.zeros_like(weights)
    base = np.floor(target).astype(np.int64)
    frac = target - base
    short = int(total - base.sum())
    if short > 0:
        order = np.argsort(-frac, kind="stable")
        base[order[:short]] += 1
    return base


def quantize_conditional(rows: np.ndarray, counts_per_symbol: np.ndarray) -> np.ndarray:
    """Integer bin counts per source symbol from conditional rows and symbol counts."""
    rows = np.asarray(rows, dtype=float)
    counts_per_symbol = np.asarray(counts_per_symbol, dtype=np.int64)
    if rows.shape[0] != counts_per_symbol.shape[0]:
        raise ValueError("one row per source symbol required")
    out = np.zeros(rows.shape, dtype=np.int64)
    for i, n_i in enumerate(counts_per_symbol):
        if n_i > 0:
            out[i] = quantize_counts(rows[i], int(n_i))
    return out


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def fixed_rate_bin_count(spec: RbcSpec, n: int) -> int:
    """Block-level bin index range floor(2^{nR}) used for fixed-rate decoding."""
    if spec.family != "fixed_rate":
        raise ValueError("bin counts are defined for fixed_rate specs")
    return max(1, int(math.floor(2.0 ** (n * spec.rate))))


def _shuffled_multiset(counts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    seq = np.repeat(np.arange(len(counts), dtype=np.int64), counts)
    rng.shuffle(seq)
    return seq


def sample_bin(spec: RbcSpec, x_seq: np.ndarray, rng: np.random.Generator,
               max_general_types: int = 500_000) -> np.ndarray:
    """Draw one bin sequence for x_seq under the spec's binning distribution.

    star: uniform over the conditional type class of the quantized designated
    conditional. vrsw: uniform over the type class of the quantized designated
    marginal. fixed_rate: i.i.d. uniform bin symbols. general_table: a
    conditional type class is selected with probability proportional to
    (class size) * 2^{-n*cost}, then a member uniformly within it; this is the
    restriction-to-types realization and is approximate by construction.
    """
    x_seq = np.asarray(x_seq, dtype=np.int64)
    n = len(x_seq)
    n_u = spec.bin_alphabet.size
    n_x = spec.source_alphabet.size
    if spec.family == "fixed_rate":
        return rng.integers(0, n_u, size=n).astype(np.int64)

    sym_counts = np.bincount(x_seq, minlength=n_x).astype(np.int64)
    q_x = sym_counts / n

    if spec.family == "vrsw":
        marg = spec.marginal_at(q_x)
        counts = quantize_counts(marg, n)
        return _shuffled_multiset(counts, rng)

    if spec.family == "star":
        rows = spec.conditional_at(q_x)
        counts = quantize_conditional(rows, sym_counts)
        u = np.empty(n, dtype=np.int64)
        for a in range(n_x):
            if sym_counts[a] > 0:
                u[x_seq == a] = _shuffled_multiset(counts[a], rng)
        return u

    # general_table: enumerate per-symbol compositions of bin counts
    present = [a for a in range(n_x) if sym_counts[a] > 0]
    comp_lists = [list(_compositions(int(sym_counts[a]), n_u)) for a in present]
    total = int(np.prod([len(c) for c in comp_lists]))
    if total > max_general_types:
        raise ValueError(
            f"general_table sampling would enumerate {total} conditional types "
            f"(cap {max_general_types}); reduce n or alphabet sizes")
    log_weights = np.full(total, -np.inf)
    type_counts = np.zeros((total, n_u, n_x), dtype=np.int64)
    idx = np.zeros(len(present), dtype=np.int64)
    for t in range(total):
        counts = np.zeros((n_u, n_x), dtype=np.int64)
        log_size = 0.0
        for slot, a in enumerate(present):
            row = np.asarray(comp_lists[slot][idx[slot]], dtype=np.int64)
            counts[:, a] = row
            n_a = float(sym_counts[a])
            log_size += float((gammaln(n_a + 1.0) - gammaln(row + 1.0).sum()) / LOG2)
        cost = eval_F(spec, counts / n)
        if math.isfinite(cost):
            log_weights[t] = log_size - n * cost
        type_counts[t] = counts
        # odometer over the composition lists
        for slot in range(len(present) - 1, -1, -1):
            idx[slot] += 1
            if idx[slot] < len(comp_lists[slot]):
                break
            idx[slot] = 0
    if np.all(np.isinf(log_weights)):
        raise ValueError("bin cost is infinite on every achievable conditional type")
    w = np.exp(log_weights - log_weights[np.isfinite(log_weights)].max())
    w = np.where(np.isfinite(log_weights), w, 0.0)
    choice = rng.choice(total, p=w / w.sum())
    counts = type_counts[choice]
    u = np.empty(n, dtype=np.int64)
    for a in present:
        u[x_seq == a] = _shuffled_multiset(counts[:, a], rng)
    return u


# ---------------------------------------------------------------------------
# distortion and validity
# ---------------------------------------------------------------------------

def expected_distortion(q_ux: np.ndarray, dist: DistortionSpec) -> float:
    """Mean distortion sum_{u,x} q(u,x) d(x,u) of a (bin, source) joint."""
    q_ux = np.asarray(q_ux, dtype=float)
    return float(np.sum(q_ux * dist.table.T))


def _conditional_entropy_given_source(q_x: np.ndarray, rows: np.ndarray) -> float:
    q_ux = q_x[None, :] * rows.T
    return entropy_bits(q_ux) - entropy_bits(q_x)


def _normalization_gap(spec: RbcSpec, q_x: np.ndarray, resolution: int,
                       restarts: int, rng: np.random.Generator) -> float:
    """sup over conditionals of H(U|X) - cost at one source marginal."""
    n_x = spec.source_alphabet.size
    n_u = spec.bin_alphabet.size

    if spec.family == "fixed_rate":
        # sup of H(U|X) is log2|U|, at the uniform conditional
        return math.log2(n_u) - float(spec.rate)

    if spec.family == "star":
        # the designated conditional is the only finite-cost point; there the
        # cost equals H(U|X) computed along the identical code path
        rows = spec.conditional_at(q_x)
        q_ux = q_x[None, :] * rows.T
        return _conditional_entropy_given_source(q_x, rows) - eval_F(spec, q_ux)

    if spec.family == "vrsw":
        # couplings pinned to the designated marginal: the independent one
        # attains the sup H(U|X) = H(Q_U) exactly; sampled pinned couplings
        # below can only fall at or under it
        marg = spec.marginal_at(q_x)
        best = _conditional_entropy_given_source(q_x, np.tile(marg, (n_x, 1))) - entropy_bits(marg)
        for _ in range(restarts):
            raw = rng.random((n_x, n_u)) + 1e-3
            raw /= raw.sum(axis=1, keepdims=True)
            # scale columns toward the pinned marginal, then renormalize rows
            for _ in range(40):
                col = q_x @ raw
                raw = raw * np.where(col > 0, marg / np.where(col > 0, col, 1.0), 1.0)[None, :]
                raw /= raw.sum(axis=1, keepdims=True)
            q_ux = q_x[None, :] * raw.T
            cost = eval_F(spec, q_ux, atol=1e-6)
            if math.isfinite(cost):
                best = max(best, _conditional_entropy_given_source(q_x, raw) - cost)
        return best

    # general_table: numeric sup over all conditionals
    def gap_of(rows: np.ndarray) -> float:
        q_ux = rows.T * q_x[None, :]
        cost = eval_F(spec, q_ux)
        if not math.isfinite(cost):
            return -math.inf
        return _conditional_entropy_given_source(q_x, rows) - cost

    row_grid = simplex_grid_array(n_u, resolution)
    best = -math.inf
    best_rows = None
    if row_grid.shape[0] ** n_x <= 200_000:
        mesh = np.meshgrid(*([np.arange(row_grid.shape[0])] * n_x), indexing="ij")
        combos = np.stack([m.reshape(-1) for m in mesh], axis=1)
        for combo in combos:
            rows = row_grid[combo]
            g = gap_of(rows)
            if g > best:
                best, best_rows = g, rows
    else:
        for _ in range(max(restarts, 8)):
            rows = rng.random((n_x, n_u)) + 1e-3
            rows /= rows.sum(axis=1, keepdims=True)
            g = gap_of(rows)
            if g > best:
                best, best_rows = g, rows
    if best_rows is not None:
        z0 = np.log(np.clip(best_rows, 1e-9, None)).reshape(-1)
        res = minimize(
            lambda z: -gap_of(_softmax_rows(z, n_x, n_u)),
            z0, method="Nelder-Mead",
            options={"maxiter": 400, "xatol": 1e-7, "fatol": 1e-10})
        best = max(best, -float(res.fun))
    return best


def _softmax_rows(z: np.ndarray, n_rows: int, n_cols: int) -> np.ndarray:
    z = z.reshape(n_rows, n_cols)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def validate_rbc(spec: RbcSpec, q_x_samples: Sequence[np.ndarray] | None = None,
                 resolution: int = 24, restarts: int = 4, seed: int = 0) -> float:
    """Normalization residual max over sampled source marginals of
    |sup_{conditional} [H(U|X) - cost]|.

    A properly normalized binning channel has residual 0: the cost dominates
    H(U|X) everywhere with equality somewhere, for every source marginal.
    """
    rng = np.random.default_rng(seed)
    if q_x_samples is None:
        q_x_samples = list(simplex_grid_array(spec.source_alphabet.size, 7))
        q_x_samples = [q for q in q_x_samples if np.all(q > 0)]
    worst = 0.0
    for q_x in q_x_samples:
        gap = _normalization_gap(spec, np.asarray(q_x, float), resolution, restarts, rng)
        worst = max(worst, abs(gap))
    return worst
