"""Finite-blocklength Monte Carlo for random binning codes.

Realizes the whole pipeline at small n: draw i.i.d. source pairs, assign
bins through realized bin-assignment tables, decode jointly with the MAP
rule or the empirical-entropy rule, and count decoding errors, excess
code-length events, and reconstruction distortion when one stream is
dropped.

Joint decoding enumerates preimages exhaustively, so block lengths are
capped (n_max, default 14 for binary alphabets). Runs that never invert
the bin maps (drop_stream != "none" on designated-conditional channels)
have no such cap.

RNG streams are counter-based (Philox) and derived per (seed, trial,
role), so threaded runs reproduce serial results bit for bit.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .probability import Alphabet, JointPmf, entropy_bits
from .rbc import DistortionSpec, RbcSpec, eval_F, sample_bin

__all__ = [
    "SimConfig", "SimReport", "DecoderStats",
    "generate_source", "build_code", "map_decode", "universal_decode",
    "excess_length_event", "empirical_cost", "run_trials", "robustness_eval",
]

_Z95 = 1.959963984540054

# decoder scores within this margin count as ties; far below any real score
# gap, far above accumulated rounding noise
_TIE_TOL = 1e-9

# rng stream roles
_ROLE_SOURCE = 0
_ROLE_CODE_F = 1
_ROLE_CODE_G = 2


def _stream(seed: int, trial: int, role: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed, counter=[trial, role, 0, 0]))


def _wilson(k: int, t: int) -> tuple:
    p = k / t
    z2 = _Z95 * _Z95
    denom = 1.0 + z2 / t
    center = (p + z2 / (2 * t)) / denom
    half = _Z95 * math.sqrt(p * (1.0 - p) / t + z2 / (4.0 * t * t)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


# ---------------------------------------------------------------------------
# configuration and report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    p_xy: JointPmf
    spec_f: RbcSpec
    spec_g: RbcSpec
    n: int
    trials: int
    seed: int
    decoder: str = "map"              # map | universal | both
    r_tilde_x: float = 0.0
    r_tilde_y: float = 0.0
    drop_stream: str = "none"         # none | x | y
    dist: DistortionSpec | None = None
    fresh_code_per_trial: bool = False
    n_max: int = 14
    table_budget: int = 1 << 20
    threads: int = 1

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if not (0 <= self.seed < 2 ** 64):
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.decoder not in ("map", "universal", "both"):
            raise ValueError(f"unknown decoder {self.decoder!r}")
        if self.drop_stream not in ("none", "x", "y"):
            raise ValueError(f"unknown drop_stream {self.drop_stream!r}")
        if self.n > self.n_max:
            raise ValueError(f"n={self.n} exceeds configured n_max={self.n_max}")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")

    def to_jsonable(self) -> dict:
        out = {
            "p_xy": {"axes": [list(a.symbols) for a in self.p_xy.axes],
                     "probs": self.p_xy.probs.tolist()},
            "spec_f": self.spec_f.to_jsonable(),
            "spec_g": self.spec_g.to_jsonable(),
            "n": self.n, "trials": self.trials, "seed": self.seed,
            "decoder": self.decoder,
            "r_tilde_x": self.r_tilde_x, "r_tilde_y": self.r_tilde_y,
            "drop_stream": self.drop_stream,
            "fresh_code_per_trial": self.fresh_code_per_trial,
            "n_max": self.n_max, "table_budget": self.table_budget,
            "threads": self.threads,
        }
        if self.dist is not None:
            out["dist"] = {
                "source_alphabet": list(self.dist.source_alphabet.symbols),
                "bin_alphabet": list(self.dist.bin_alphabet.symbols),
                "table": np.asarray(self.dist.table, dtype=float).tolist(),
                "level": self.dist.level,
            }
        return out

    @staticmethod
    def from_jsonable(data: dict) -> "SimConfig":
        px = data["p_xy"]
        axes = tuple(Alphabet(tuple(s)) for s in px["axes"])
        p = JointPmf(axes, np.asarray(px["probs"], dtype=float))
        dist = None
        if data.get("dist") is not None:
            dd = data["dist"]
            dist = DistortionSpec(Alphabet(tuple(dd["source_alphabet"])),
                                  Alphabet(tuple(dd["bin_alphabet"])),
                                  np.asarray(dd["table"], dtype=float),
                                  float(dd.get("level", 0.0)))
        kwargs = {k: data[k] for k in
                  ("decoder", "r_tilde_x", "r_tilde_y", "drop_stream",
                   "fresh_code_per_trial", "n_max", "table_budget", "threads")
                  if k in data}
        return SimConfig(p, RbcSpec.from_jsonable(data["spec_f"]),
                         RbcSpec.from_jsonable(data["spec_g"]),
                         int(data["n"]), int(data["trials"]), int(data["seed"]),
                         dist=dist, **kwargs)


@dataclass(frozen=True)
class DecoderStats:
    name: str
    err_total: int
    err_x_only: int
    err_y_only: int
    err_both: int
    trials: int
    n: int

    @property
    def p_err(self) -> float:
        return self.err_total / self.trials

    @property
    def wilson_ci(self) -> tuple:
        return _wilson(self.err_total, self.trials)

    @property
    def empirical_exponent(self):
        # None doubles as the undefined flag for zero observed errors
        if self.err_total == 0:
            return None
        return -math.log2(self.err_total / self.trials) / self.n


@dataclass(frozen=True)
class SimReport:
    n: int
    trials: int
    stats: tuple = ()
    ecl_count: int = 0
    mean_distortion: float | None = None
    uncontrolled_distortion: bool = False

    def _primary(self) -> DecoderStats:
        if not self.stats:
            return DecoderStats("none", 0, 0, 0, 0, self.trials, self.n)
        return self.stats[0]

    @property
    def err_total(self) -> int:
        return self._primary().err_total

    @property
    def err_x_only(self) -> int:
        return self._primary().err_x_only

    @property
    def err_y_only(self) -> int:
        return self._primary().err_y_only

    @property
    def err_both(self) -> int:
        return self._primary().err_both

    @property
    def wilson_ci(self) -> tuple:
        return self._primary().wilson_ci

    @property
    def empirical_exponent(self):
        return self._primary().empirical_exponent

    def decoder(self, name: str) -> DecoderStats:
        for s in self.stats:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_jsonable(self) -> dict:
        out = {
            "n": self.n,
            "trials": self.trials,
            "ecl_count": self.ecl_count,
            "mean_distortion": self.mean_distortion,
            "uncontrolled_distortion": self.uncontrolled_distortion,
            "decoders": [
                {
                    "name": s.name,
                    "err_total": s.err_total,
                    "err_x_only": s.err_x_only,
                    "err_y_only": s.err_y_only,
                    "err_both": s.err_both,
                    "p_err": s.p_err,
                    "wilson_ci": list(s.wilson_ci),
                    "empirical_exponent": s.empirical_exponent,
                }
                for s in self.stats
            ],
        }
        return out

    @staticmethod
    def csv_header() -> list:
        return ["n", "trials", "decoder", "err_total", "err_x_only",
                "err_y_only", "err_both", "p_err", "wilson_lo", "wilson_hi",
                "empirical_exponent", "ecl_count", "mean_distortion"]

    def csv_rows(self) -> list:
        base = lambda s: [self.n, self.trials, s.name, s.err_total,
                          s.err_x_only, s.err_y_only, s.err_both,
                          s.p_err, s.wilson_ci[0], s.wilson_ci[1],
                          s.empirical_exponent, self.ecl_count,
                          self.mean_distortion]
        if self.stats:
            return [base(s) for s in self.stats]
        return [[self.n, self.trials, "none", 0, 0, 0, 0, 0.0, 0.0, 0.0,
                 None, self.ecl_count, self.mean_distortion]]


# ---------------------------------------------------------------------------
# sources and realized codes
# ---------------------------------------------------------------------------

def generate_source(p_xy: JointPmf, n: int, rng: np.random.Generator):
    """n i.i.d. draws from the joint source, as index sequences."""
    p = np.asarray(p_xy.probs, dtype=float)
    nx, ny = p.shape
    flat = rng.choice(nx * ny, size=n, p=p.reshape(-1))
    return (flat // ny).astype(np.int64), (flat % ny).astype(np.int64)


def _enumerate_seqs(n_sym: int, n: int) -> np.ndarray:
    # all sequences in lexicographic order, one row each
    total = n_sym ** n
    idx = np.arange(total)
    out = np.empty((total, n), dtype=np.int64)
    for pos in range(n - 1, -1, -1):
        out[:, pos] = idx % n_sym
        idx //= n_sym
    return out


def _seq_index(seq: np.ndarray, n_sym: int) -> int:
    v = 0
    for s in np.asarray(seq, dtype=np.int64):
        v = v * n_sym + int(s)
    return v


class _TableCode:
    """Exhaustive table: one sampled bin sequence per source sequence."""

    bins_are_sequences = True

    def __init__(self, spec: RbcSpec, n: int, rng: np.random.Generator,
                 seqs: np.ndarray):
        self.spec = spec
        self.n = n
        self.n_sym = spec.source_alphabet.size
        self.seqs = seqs
        self.bins = np.stack([sample_bin(spec, s, rng) for s in seqs])
        pre: dict = {}
        for i, row in enumerate(self.bins):
            pre.setdefault(row.tobytes(), []).append(i)
        self._pre = {k: np.asarray(v, dtype=np.int64) for k, v in pre.items()}

    def encode(self, x_seq: np.ndarray) -> np.ndarray:
        return self.bins[_seq_index(x_seq, self.n_sym)]

    def preimage(self, u: np.ndarray) -> np.ndarray:
        idx = self._pre.get(np.asarray(u, dtype=np.int64).tobytes())
        if idx is None:
            raise RuntimeError("bin sequence outside the realized code range")
        return self.seqs[idx]

    def length_rate(self, u: np.ndarray) -> float:
        counts = np.bincount(u, minlength=self.spec.bin_alphabet.size)
        return entropy_bits(counts / len(u))


class _SymbolCode:
    """Deterministic per-symbol map; preimages are position-wise products."""

    bins_are_sequences = True

    def __init__(self, spec: RbcSpec, n: int, table_budget: int):
        rows = np.asarray(spec.conditional_map, dtype=float)
        self.spec = spec
        self.n = n
        self.smap = np.argmax(rows, axis=1).astype(np.int64)
        self.choices = [np.flatnonzero(self.smap == u) for u in
                        range(spec.bin_alphabet.size)]
        self.table_budget = table_budget
        self._cache: dict = {}

    def encode(self, x_seq: np.ndarray) -> np.ndarray:
        return self.smap[np.asarray(x_seq, dtype=np.int64)]

    def preimage(self, u: np.ndarray) -> np.ndarray:
        key = np.asarray(u, dtype=np.int64).tobytes()
        got = self._cache.get(key)
        if got is not None:
            return got
        per_pos = [self.choices[int(b)] for b in u]
        total = 1
        for c in per_pos:
            total *= len(c)
            if total > self.table_budget:
                raise ValueError("preimage product exceeds the table budget")
        if total == 0:
            raise RuntimeError("bin sequence outside the realized code range")
        grids = np.meshgrid(*per_pos, indexing="ij")
        out = np.stack([g.reshape(-1) for g in grids], axis=1)
        if len(self._cache) < 64:
            self._cache[key] = out
        return out

    def length_rate(self, u: np.ndarray) -> float:
        counts = np.bincount(u, minlength=self.spec.bin_alphabet.size)
        return entropy_bits(counts / len(u))


class _IndexCode:
    """Fixed-rate block binning: a uniform index among floor(2^{nR}) bins."""

    bins_are_sequences = False

    def __init__(self, spec: RbcSpec, n: int, rng: np.random.Generator,
                 seqs: np.ndarray):
        self.spec = spec
        self.n = n
        self.n_sym = spec.source_alphabet.size
        self.seqs = seqs
        self.n_bins = max(1, int(math.floor(2.0 ** (n * spec.rate) + 1e-9)))
        self.bins = rng.integers(0, self.n_bins, size=len(seqs))

    def encode(self, x_seq: np.ndarray) -> int:
        return int(self.bins[_seq_index(x_seq, self.n_sym)])

    def preimage(self, u: int) -> np.ndarray:
        return self.seqs[np.flatnonzero(self.bins == u)]

    def length_rate(self, u) -> float:
        return float(self.spec.rate)


def build_code(spec_pair, n: int, rng: np.random.Generator,
               table_budget: int = 1 << 20):
    """Realize both bin-assignment tables for block length n.

    Fixed-rate channels become uniform block indices, deterministic
    designated conditionals become per-symbol maps, and everything else
    is sampled row by row into an exhaustive table (source alphabet size
    to the power n must stay within table_budget).
    """
    out = []
    for spec in spec_pair:
        out.append(_single_code(spec, n, rng, table_budget))
    return tuple(out)


def _single_code(spec: RbcSpec, n: int, rng: np.random.Generator,
                 table_budget: int):
    if spec.family == "star" and spec.is_deterministic_map():
        return _SymbolCode(spec, n, table_budget)
    if spec.source_alphabet.size ** n > table_budget:
        raise ValueError(
            f"{spec.source_alphabet.size}^{n} source sequences exceed the "
            f"table budget {table_budget}")
    seqs = _enumerate_seqs(spec.source_alphabet.size, n)
    if spec.family == "fixed_rate":
        return _IndexCode(spec, n, rng, seqs)
    return _TableCode(spec, n, rng, seqs)


# ---------------------------------------------------------------------------
# decoders
# ---------------------------------------------------------------------------

def _bin_as_seq(code, binval, n: int):
    # a block index carries no per-symbol structure: treat it as the
    # constant sequence over a one-letter bin alphabet
    if code.bins_are_sequences:
        return np.asarray(binval, dtype=np.int64), code.spec.bin_alphabet.size
    return np.zeros(n, dtype=np.int64), 1


def _row_entropies(codes: np.ndarray, k: int) -> np.ndarray:
    """Entropy in bits of each row's histogram over symbols 0..k-1."""
    rows, n = codes.shape
    offset = codes + (np.arange(rows, dtype=np.int64)[:, None] * k)
    counts = np.bincount(offset.reshape(-1), minlength=rows * k)
    counts = counts.reshape(rows, k).astype(float) / n
    with np.errstate(divide="ignore", invalid="ignore"):
        lg = np.where(counts > 0, np.log2(np.where(counts > 0, counts, 1.0)), 0.0)
    return -(counts * lg).sum(axis=1)


def map_decode(code_f, code_g, u, v, p_xy: JointPmf):
    """Most probable source pair within the two preimages.

    Ties go to the lexicographically smallest (x, y) pair. Scores are
    computed from each candidate's joint type and candidates within
    _TIE_TOL are treated as tied, so summation-order float dust cannot
    override the lexicographic rule (equal-probability candidates of
    different types are common under symmetric sources).
    """
    A = code_f.preimage(u)
    B = code_g.preimage(v)
    p = np.asarray(p_xy.probs, dtype=float)
    nx, ny = p.shape
    with np.errstate(divide="ignore"):
        lp = np.where(p > 0, np.log2(np.where(p > 0, p, 1.0)), -np.inf).reshape(-1)
    ka, kb, n = len(A), len(B), A.shape[1]
    blocks = []
    block = max(1, (1 << 21) // max(1, kb * max(n, nx * ny)))
    for lo in range(0, ka, block):
        a_blk = A[lo:lo + block]
        rows = (a_blk[:, None, :] * ny + B[None, :, :]).reshape(-1, n)
        offset = rows + (np.arange(len(rows), dtype=np.int64)[:, None] * (nx * ny))
        counts = np.bincount(offset.reshape(-1),
                             minlength=len(rows) * nx * ny).reshape(-1, nx * ny)
        with np.errstate(invalid="ignore"):
            scores = np.where(counts > 0, counts * lp[None, :], 0.0).sum(axis=1)
        bmax = float(scores.max())
        bfirst = int(np.flatnonzero(scores >= bmax - _TIE_TOL)[0])
        blocks.append((bmax, lo, bfirst))
    gmax = max(b[0] for b in blocks)
    for bmax, lo, bfirst in blocks:
        if bmax >= gmax - _TIE_TOL:
            return A[lo + bfirst // kb].copy(), B[bfirst % kb].copy()
    raise AssertionError("unreachable")


def universal_decode(code_f, code_g, u, v, fcost, gcost):
    """Minimum empirical-entropy decoding.

    The metric of a candidate pair is the largest of three branch scores:
    joint conditional entropy minus both channel costs, and each stream's
    conditional entropy minus its own cost. Costs are callables
    (counts, n) -> bits evaluated on the realized bin/source joint type;
    see empirical_cost. Ties go to the lexicographically smallest pair,
    with the same _TIE_TOL grouping as map_decode (entropies of permuted
    type vectors are equal only up to summation order).
    """
    A = code_f.preimage(u)
    B = code_g.preimage(v)
    ka, kb, n = len(A), len(B), A.shape[1]
    useq, nu = _bin_as_seq(code_f, u, n)
    vseq, nv = _bin_as_seq(code_g, v, n)
    nx = code_f.spec.source_alphabet.size
    ny = code_g.spec.source_alphabet.size

    h_uv = _row_entropies((useq * nv + vseq)[None, :], nu * nv)[0]
    f_vals = np.array([fcost(_pair_counts(useq, A[a], nu, nx), n)
                       for a in range(ka)])
    g_vals = np.array([gcost(_pair_counts(vseq, B[b], nv, ny), n)
                       for b in range(kb)])
    h_vx = _row_entropies(vseq[None, :] * nx + A, nv * nx)
    h_uy = _row_entropies(useq[None, :] * ny + B, nu * ny)

    base_uv = (useq * nv + vseq) * (nx * ny)
    base_u = (useq * nx)[None, :]
    base_v = (vseq * ny)[None, :]
    blocks = []
    block = max(1, (1 << 21) // max(1, kb * n))
    for lo in range(0, ka, block):
        a_blk = A[lo:lo + block]
        ba = len(a_blk)
        ax = a_blk[:, None, :] * ny + B[None, :, :]          # (ba, kb, n)
        h_uvxy = _row_entropies((base_uv[None, None, :] + ax).reshape(-1, n),
                                nu * nv * nx * ny).reshape(ba, kb)
        h_uxy = _row_entropies(((base_u + a_blk) [:, None, :] * ny
                                + B[None, :, :]).reshape(-1, n),
                               nu * nx * ny).reshape(ba, kb)
        h_vxy = _row_entropies(((base_v + B)[None, :, :] * nx
                                + a_blk[:, None, :]).reshape(-1, n),
                               nv * nx * ny).reshape(ba, kb)
        m1 = h_uvxy - h_uv - f_vals[lo:lo + ba, None] - g_vals[None, :]
        m2 = h_uxy - h_uy[None, :] - f_vals[lo:lo + ba, None]
        m3 = h_vxy - h_vx[lo:lo + ba, None] - g_vals[None, :]
        m = np.maximum(m1, np.maximum(m2, m3)).reshape(-1)
        bmin = float(m.min())
        bfirst = int(np.flatnonzero(m <= bmin + _TIE_TOL)[0])
        blocks.append((bmin, lo, bfirst))
    gmin = min(b[0] for b in blocks)
    for bmin, lo, bfirst in blocks:
        if bmin <= gmin + _TIE_TOL:
            return A[lo + bfirst // kb].copy(), B[bfirst % kb].copy()
    raise AssertionError("unreachable")


def _pair_counts(u_seq: np.ndarray, x_seq: np.ndarray, nu: int, nx: int) -> np.ndarray:
    return np.bincount(u_seq * nx + x_seq, minlength=nu * nx).reshape(nu, nx)


def empirical_cost(spec: RbcSpec):
    """Per-family channel cost on realized (bin, source) joint types.

    Members of a realized preimage always carry the channel's designated
    structure, so the designated families reduce to plain empirical
    entropies; a general table is charged its own functional.
    """
    if spec.family == "fixed_rate":
        r = float(spec.rate)
        return lambda counts, n: r
    if spec.family == "star":
        def cost(counts, n):
            q = counts / n
            return entropy_bits(q.reshape(-1)) - entropy_bits(q.sum(axis=0))
        return cost
    if spec.family == "vrsw":
        return lambda counts, n: entropy_bits(counts.sum(axis=1) / n)

    def cost(counts, n):
        return eval_F(spec, counts / n)
    return cost


# ---------------------------------------------------------------------------
# excess length and trials
# ---------------------------------------------------------------------------

def excess_length_event(u_seq: np.ndarray, v_seq: np.ndarray,
                        r_tilde_x: float, r_tilde_y: float,
                        n_bins_u: int | None = None,
                        n_bins_v: int | None = None) -> bool:
    """Both per-symbol description lengths meet their thresholds.

    A bin sequence costs its empirical entropy per symbol under two-part
    coding, so the event is an empirical-entropy threshold pair.
    """
    u = np.asarray(u_seq, dtype=np.int64)
    v = np.asarray(v_seq, dtype=np.int64)
    hu = entropy_bits(np.bincount(u, minlength=n_bins_u or (u.max() + 1)) / len(u))
    hv = entropy_bits(np.bincount(v, minlength=n_bins_v or (v.max() + 1)) / len(v))
    return bool(hu >= r_tilde_x - 1e-12 and hv >= r_tilde_y - 1e-12)


def _decode_once(name, code_f, code_g, u, v, cfg, costs):
    if name == "map":
        return map_decode(code_f, code_g, u, v, cfg.p_xy)
    return universal_decode(code_f, code_g, u, v, costs[0], costs[1])


def _run_range(cfg: SimConfig, lo: int, hi: int, codes, decoders, costs):
    counts = {name: np.zeros(4, dtype=np.int64) for name in decoders}
    ecl = 0
    dist_sum = 0.0
    code_f, code_g = codes
    for t in range(lo, hi):
        x, y = generate_source(cfg.p_xy, cfg.n, _stream(cfg.seed, t, _ROLE_SOURCE))
        if cfg.drop_stream != "none":
            dist_sum += _drop_distortion(cfg, codes[0], x, y, t)
            continue
        if cfg.fresh_code_per_trial:
            code_f = _single_code(cfg.spec_f, cfg.n,
                                  _stream(cfg.seed, t, _ROLE_CODE_F),
                                  cfg.table_budget)
            code_g = _single_code(cfg.spec_g, cfg.n,
                                  _stream(cfg.seed, t, _ROLE_CODE_G),
                                  cfg.table_budget)
        u = code_f.encode(x)
        v = code_g.encode(y)
        if code_f.length_rate(u) >= cfg.r_tilde_x - 1e-12 and \
                code_g.length_rate(v) >= cfg.r_tilde_y - 1e-12:
            ecl += 1
        for name in decoders:
            xh, yh = _decode_once(name, code_f, code_g, u, v, cfg, costs)
            xw = not np.array_equal(xh, x)
            yw = not np.array_equal(yh, y)
            if xw or yw:
                c = counts[name]
                c[0] += 1
                c[1] += xw and not yw
                c[2] += yw and not xw
                c[3] += xw and yw
    return counts, ecl, dist_sum


def _drop_distortion(cfg, kept_code, x, y, trial: int) -> float:
    """Per-symbol distortion of reconstructing the surviving stream's
    source from its own bins; bin draws use per-trial streams."""
    if cfg.drop_stream == "y":
        spec, src, role = cfg.spec_f, x, _ROLE_CODE_F
    else:
        spec, src, role = cfg.spec_g, y, _ROLE_CODE_G
    table = np.asarray(cfg.dist.table, dtype=float)
    if spec.family == "fixed_rate":
        # bins carry no symbol structure; take the most probable preimage
        # member under the source marginal, ties lexicographic
        u = kept_code.encode(src)
        p_src = cfg.p_xy.probs.sum(axis=1 if cfg.drop_stream == "y" else 0)
        cand = kept_code.preimage(u)
        with np.errstate(divide="ignore"):
            lp = np.where(p_src > 0, np.log2(np.where(p_src > 0, p_src, 1.0)),
                          -np.inf)
        rec = cand[int(np.argmax(lp[cand].sum(axis=1)))]
        return float(table[src, rec].mean())
    if isinstance(kept_code, _SymbolCode):
        u = kept_code.encode(src)
    else:
        u = sample_bin(spec, src, _stream(cfg.seed, trial, role))
    return float(table[src, np.asarray(u, dtype=np.int64)].mean())


def run_trials(cfg: SimConfig) -> SimReport:
    """Monte Carlo over cfg.trials blocks; see SimReport for the tallies.

    Identical configurations (seed included) produce identical reports,
    regardless of threads. Drop-stream runs realize only the surviving
    stream (so large n is fine when its bins never need inverting), skip
    decoding, and leave ecl_count at zero.
    """
    decode_needed = cfg.drop_stream == "none"
    if not decode_needed and cfg.dist is None:
        raise ValueError("drop_stream runs need a DistortionSpec")
    decoders = ()
    if decode_needed:
        decoders = ("map", "universal") if cfg.decoder == "both" else (cfg.decoder,)
    costs = (empirical_cost(cfg.spec_f), empirical_cost(cfg.spec_g))

    codes = (None, None)
    if not decode_needed:
        kept = cfg.spec_f if cfg.drop_stream == "y" else cfg.spec_g
        role = _ROLE_CODE_F if cfg.drop_stream == "y" else _ROLE_CODE_G
        if kept.family == "fixed_rate" or \
                (kept.family == "star" and kept.is_deterministic_map()):
            codes = (_single_code(kept, cfg.n, _stream(cfg.seed, 0, role),
                                  cfg.table_budget), None)
        # other families draw bins with per-trial streams in _drop_distortion
    elif not cfg.fresh_code_per_trial:
        codes = (_single_code(cfg.spec_f, cfg.n,
                              _stream(cfg.seed, 0, _ROLE_CODE_F), cfg.table_budget),
                 _single_code(cfg.spec_g, cfg.n,
                              _stream(cfg.seed, 0, _ROLE_CODE_G), cfg.table_budget))

    if cfg.threads == 1 or cfg.trials < 2 * cfg.threads:
        parts = [_run_range(cfg, 0, cfg.trials, codes, decoders, costs)]
    else:
        bounds = np.linspace(0, cfg.trials, cfg.threads + 1).astype(int)
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            parts = list(pool.map(
                lambda ab: _run_range(cfg, ab[0], ab[1], codes, decoders, costs),
                zip(bounds[:-1], bounds[1:])))

    ecl = sum(p[1] for p in parts)
    dist_sum = sum(p[2] for p in parts)
    stats = []
    for name in decoders:
        tot = np.zeros(4, dtype=np.int64)
        for p in parts:
            tot += p[0][name]
        stats.append(DecoderStats(name, int(tot[0]), int(tot[1]), int(tot[2]),
                                  int(tot[3]), cfg.trials, cfg.n))
    mean_dist = None
    uncontrolled = False
    if not decode_needed:
        mean_dist = dist_sum / cfg.trials
        kept_spec = cfg.spec_f if cfg.drop_stream == "y" else cfg.spec_g
        uncontrolled = kept_spec.family == "fixed_rate"
    return SimReport(cfg.n, cfg.trials, tuple(stats), ecl, mean_dist,
                     uncontrolled)


def robustness_eval(cfg: SimConfig) -> SimReport:
    """Reconstruction quality when one bit-stream is lost.

    The surviving stream's bin sequence doubles as the reconstruction
    (designated-conditional channels couple it to the source symbol by
    symbol); fixed-rate channels have no such coupling and their report
    is flagged uncontrolled_distortion.
    """
    if cfg.drop_stream == "none":
        raise ValueError("robustness evaluation requires drop_stream x or y")
    if cfg.dist is None:
        raise ValueError("robustness evaluation requires a DistortionSpec")
    return run_trials(cfg)
