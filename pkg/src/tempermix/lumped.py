"""Exact finite transition matrices for the tempering/swapping chain family.

All builders return a LumpedChain: an explicit sparse row-stochastic matrix
over lumped states (color counts, (count, level) pairs, product tuples,
integer points, or trace bit-vectors) together with unnormalized stationary
log-weights.  Every chain is reversible; validate() checks it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq
from scipy.special import logsumexp

from .errors import (ChainConsistencyError, DivisibilityError, NoTraceError,
                     StateSpaceCapError, UnsupportedKindError, WindowError)
from .models import (DEFAULT_STATE_CAP, ExpModel, Ladder, LadderKind,
                     PottsModel, enumerate_sigma, log_multinomial, make_ladder,
                     potts_class_log_weight)

FOUR_LN2 = 4.0 * math.log(2.0)

#: Sub-cap for explicit product (swap) chains; they grow as K^(M+1).
DEFAULT_SWAP_CAP = 300_000

#: 2^(M+1) trace states; beyond this the hypercube itself is the problem.
MAX_TRACE_LEVELS = 20


class Restriction(Enum):
    NONE = "none"
    RGB = "rgb"


# ---------------------------------------------------------------------------
# chain container
# ---------------------------------------------------------------------------

@dataclass
class LumpedChain:
    """A reversible transition matrix with explicit states.

    states : ordered list of state descriptors
    transition : csr row-stochastic matrix (explicit diagonal)
    stationary_log : unnormalized stationary log-weights, one per state
    metadata : builder name and parameters
    """
    states: list
    transition: sp.csr_matrix
    stationary_log: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def n_states(self) -> int:
        return len(self.states)

    def stationary(self) -> np.ndarray:
        """Normalized stationary probabilities (no consistency check here;
        analysis.stationary() is the verified entry point)."""
        w = self.stationary_log
        return np.exp(w - logsumexp(w))

    def validate(self, row_tol: float = 1e-12, db_tol: float = 1e-10) -> None:
        """Check row sums, entry range, and detailed balance.

        Detailed balance is checked per nonzero entry in the log domain,
        |log flow(x,y) - log flow(y,x)| <= db_tol, wherever both directions
        are representable; an entry whose reverse underflowed to zero must
        itself carry numerically negligible flow (< 1e-250 of the max).
        """
        P = self.transition
        rows = np.asarray(P.sum(axis=1)).ravel()
        err = np.abs(rows - 1.0).max()
        if err > row_tol:
            raise ChainConsistencyError(f"row sums off by {err:.3e} (> {row_tol:.1e})")
        if P.data.size and (P.data.min() < -row_tol or P.data.max() > 1.0 + row_tol):
            raise ChainConsistencyError("transition entries outside [0, 1]")

        C = P.tocoo()
        off = C.row != C.col
        r, c, v = C.row[off], C.col[off], C.data[off]
        pil = self.stationary_log - logsumexp(self.stationary_log)
        with np.errstate(divide="ignore"):
            logflow = pil[r] + np.log(v)
        # pair each entry with its transpose via a keyed lookup
        n = self.n_states
        key_fwd = r.astype(np.int64) * n + c
        key_rev = c.astype(np.int64) * n + r
        order = np.argsort(key_fwd)
        pos = np.searchsorted(key_fwd[order], key_rev)
        pos_clip = np.clip(pos, 0, len(order) - 1)
        has_rev = key_fwd[order][pos_clip] == key_rev
        lf_rev = np.where(has_rev, logflow[order][pos_clip], -np.inf)
        both = has_rev & np.isfinite(logflow)
        if np.any(both):
            gap = np.abs(logflow[both] - lf_rev[both]).max()
            if gap > db_tol:
                raise ChainConsistencyError(
                    f"detailed balance violated by {gap:.3e} in log flow (> {db_tol:.1e})")
        lonely = ~has_rev & np.isfinite(logflow)
        if np.any(lonely):
            floor = logflow[np.isfinite(logflow)].max() - 250.0 * math.log(10.0)
            worst = logflow[lonely].max()
            if worst > floor:
                raise ChainConsistencyError(
                    f"one-sided edge with non-negligible flow (log flow {worst:.3e})")


@dataclass
class CutSet:
    """Membership flags over a chain's states plus a family tag."""
    mask: np.ndarray
    family: str = ""

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        k = int(self.mask.sum())
        if k == 0 or k == self.mask.size:
            raise ValueError("cut must be a non-empty proper subset")


@dataclass(frozen=True)
class TraceSpec:
    """Threshold defining the 0/1 trace bit: bit = 1 iff value >= threshold.

    For two-color models the value of a class is its count of color 0; for
    the exponential model it is the point x itself (threshold fixed at 0).
    """
    threshold: int
    family: str


# ---------------------------------------------------------------------------
# proposal structure shared by the per-level kernels
# ---------------------------------------------------------------------------

def _restricted_states(ladder: Ladder, restriction: Restriction):
    """State list (as global enumeration indices) under the restriction."""
    restriction = Restriction(restriction)
    if restriction is Restriction.NONE:
        return list(range(ladder.n_states))
    if not ladder.is_potts or ladder.model.q != 3:
        raise UnsupportedKindError("RGB restriction is defined for q = 3 only")
    return [k for k, s in enumerate(ladder.states)
            if s[0] >= s[1] >= s[2]]


def _space_edges(ladder: Ladder, restriction: Restriction):
    """Directed proposal edges of the single-level kernel.

    Returns (keep, src, dst, base) where keep maps local -> global state
    index and base is the proposal probability of each edge.  Proposals that
    leave the restricted set, propose the current color, or step outside the
    integer range are absent; their mass lands on the diagonal.
    """
    keep = _restricted_states(ladder, restriction)
    local = {g: j for j, g in enumerate(keep)}
    src, dst, base = [], [], []
    if ladder.is_potts:
        n, q = ladder.model.n, ladder.model.q
        index = ladder._index
        for j, g in enumerate(keep):
            s = ladder.states[g]
            for a in range(q):
                if s[a] == 0:
                    continue
                p = (s[a] / n) * (1.0 / q)
                for b in range(q):
                    if b == a:
                        continue
                    s2 = list(s)
                    s2[a] -= 1
                    s2[b] += 1
                    t = local.get(index[tuple(s2)])
                    if t is not None:
                        src.append(j)
                        dst.append(t)
                        base.append(p)
    else:
        K = ladder.n_states
        for j in range(K):
            for t in (j - 1, j + 1):
                if 0 <= t < K:
                    src.append(j)
                    dst.append(t)
                    base.append(0.5)
    return (keep, np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64),
            np.asarray(base, dtype=np.float64))


def _metropolis_data(src, dst, base, w):
    """base * min(1, e^{w[dst] - w[src]}) for every edge, vectorized."""
    delta = w[dst] - w[src]
    return base * np.exp(np.minimum(delta, 0.0))


def _assemble(states, src, dst, data, slog, metadata, validate):
    N = len(states)
    P = sp.coo_matrix((data, (src, dst)), shape=(N, N)).tocsr()
    P.sum_duplicates()
    diag = 1.0 - np.asarray(P.sum(axis=1)).ravel()
    P = (P + sp.diags(diag)).tocsr()
    chain = LumpedChain(states=states, transition=P,
                        stationary_log=np.asarray(slog, dtype=np.float64),
                        metadata=metadata)
    if validate:
        chain.validate()
    return chain


# ---------------------------------------------------------------------------
# chain builders
# ---------------------------------------------------------------------------

def build_level_chain(ladder: Ladder, level: int,
                      restriction: Restriction = Restriction.NONE,
                      validate: bool = True) -> LumpedChain:
    """Single-temperature Metropolis chain on the lumped space at `level`.

    The proposal picks a vertex uniformly and a new color uniformly (for the
    exponential model: a +-1 step with probability 1/2 each), and accepts
    with the per-configuration Metropolis ratio.  Same-color proposals,
    rejections, restriction violations, and out-of-range steps hold.
    """
    keep, src, dst, base = _space_edges(ladder, restriction)
    w = ladder.config_log_weights(level)[keep]
    data = _metropolis_data(src, dst, base, w)
    states = [ladder.states[g] for g in keep]
    slog = ladder.class_log_weights(level)[keep]
    meta = {"builder": "level", "level": level,
            "restriction": Restriction(restriction).value,
            "ladder_kind": ladder.kind.value, "model": ladder.model}
    return _assemble(states, src, dst, data, slog, meta, validate)


def build_tempering_chain(ladder: Ladder,
                          restriction: Restriction = Restriction.NONE,
                          validate: bool = True,
                          cap: int = DEFAULT_STATE_CAP) -> LumpedChain:
    """Simulated tempering chain on (state, level) pairs.

    Each step is a level move with probability 1/2 (the level kernel at the
    current level) or a temperature move with probability 1/2: propose
    j = i +- 1 with probability 1/2 each (out-of-range proposals hold) and
    accept with the ratio of normalized per-configuration weights, which
    uses the exact log partitions.  The stationary marginal over levels is
    uniform by construction.
    """
    keep, src, dst, base = _space_edges(ladder, restriction)
    K, M = len(keep), ladder.M
    if K * (M + 1) > cap:
        raise StateSpaceCapError(f"tempering space has {K * (M + 1)} states, cap {cap}")
    # partitions of the restricted space: under a restriction, the per-level
    # distributions (and hence the temperature-move partition ratios) are
    # the restricted ones
    logZ = np.array([logsumexp(ladder.class_log_weights(i)[keep])
                     for i in range(M + 1)])
    W = np.stack([ladder.config_log_weights(i)[keep] - logZ[i]
                  for i in range(M + 1)])
    rows, cols, vals = [], [], []
    for i in range(M + 1):
        w = ladder.config_log_weights(i)[keep]
        rows.append(i * K + src)
        cols.append(i * K + dst)
        vals.append(0.5 * _metropolis_data(src, dst, base, w))
        for j in (i - 1, i + 1):
            if not 0 <= j <= M:
                continue
            acc = np.exp(np.minimum(W[j] - W[i], 0.0))
            rows.append(i * K + np.arange(K))
            cols.append(j * K + np.arange(K))
            vals.append(0.25 * acc)
    states = [(ladder.states[g], i) for i in range(M + 1) for g in keep]
    slog = np.concatenate([ladder.class_log_weights(i)[keep] - logZ[i]
                           for i in range(M + 1)])
    meta = {"builder": "tempering", "M": M,
            "restriction": Restriction(restriction).value,
            "ladder_kind": ladder.kind.value, "model": ladder.model}
    return _assemble(states, np.concatenate(rows), np.concatenate(cols),
                     np.concatenate(vals), slog, meta, validate)


def build_swap_chain(ladder: Ladder,
                     restriction: Restriction = Restriction.NONE,
                     include_swaps: bool = True,
                     validate: bool = True,
                     cap: int = DEFAULT_SWAP_CAP) -> LumpedChain:
    """Swapping (parallel tempering) chain on the (M+1)-fold product space.

    With probability 1/2 a level move: pick i uniformly in 0..M and apply the
    level-i kernel to coordinate i (each concrete move has the displayed
    probability 1/(2(M+1)) * kernel).  With probability 1/2 a swap move: pick
    i uniformly in 0..M-1 and transpose coordinates i, i+1 with acceptance
    min(1, exp[(w_i(x_{i+1}) + w_{i+1}(x_i)) - (w_i(x_i) + w_{i+1}(x_{i+1}))]),
    w_i the per-configuration log weight at level i.  The stationary law is
    the product of the level distributions.

    include_swaps=False builds the bare product chain instead (a level move
    at a uniform level every step, no laziness): its gap is exactly
    min_i gap(level i) / (M+1).
    """
    keep, src, dst, base = _space_edges(ladder, restriction)
    K, M = len(keep), ladder.M
    S = K ** (M + 1)
    if S > cap:
        raise StateSpaceCapError(
            f"swap product space has {S} states (cap {cap}); use the trace "
            "projection or Monte Carlo instead")
    W = np.stack([ladder.config_log_weights(i)[keep] for i in range(M + 1)])
    logZ = np.array([logsumexp(ladder.class_log_weights(i)[keep])
                     for i in range(M + 1)])
    Wclass = np.stack([ladder.class_log_weights(i)[keep] - logZ[i]
                       for i in range(M + 1)])

    # digits[s, i] = coordinate of product state s at level i; level 0 is the
    # most significant digit so states sort lexicographically.
    digits = np.empty((S, M + 1), dtype=np.int64)
    ids = np.arange(S)
    for i in range(M + 1):
        stride = K ** (M - i)
        digits[:, i] = (ids // stride) % K

    level_prob = (0.5 if include_swaps else 1.0) / (M + 1)
    rows, cols, vals = [], [], []
    for i in range(M + 1):
        stride = K ** (M - i)
        acc = _metropolis_data(src, dst, base, W[i])
        for e in range(len(src)):
            sel = ids[digits[:, i] == src[e]]
            rows.append(sel)
            cols.append(sel + (dst[e] - src[e]) * stride)
            vals.append(np.full(sel.size, level_prob * acc[e]))
    if include_swaps and M >= 1:
        for i in range(M):
            stride_i = K ** (M - i)
            stride_j = K ** (M - i - 1)
            a = digits[:, i]
            b = digits[:, i + 1]
            swap_acc = np.exp(np.minimum(
                (W[i][b] + W[i + 1][a]) - (W[i][a] + W[i + 1][b]), 0.0))
            move = a != b
            sel = ids[move]
            rows.append(sel)
            cols.append(sel + (b[move] - a[move]) * stride_i
                        + (a[move] - b[move]) * stride_j)
            vals.append(swap_acc[move] / (2.0 * M))

    states = [tuple(ladder.states[keep[d]] for d in digits[s]) for s in ids]
    slog = Wclass[np.arange(M + 1)[None, :], digits].sum(axis=1)
    meta = {"builder": "swap", "M": M, "include_swaps": include_swaps,
            "restriction": Restriction(restriction).value,
            "ladder_kind": ladder.kind.value, "model": ladder.model}
    return _assemble(states, np.concatenate(rows), np.concatenate(cols),
                     np.concatenate(vals), slog, meta, validate)


def build_exp_level_chain(model: ExpModel, exponent: float,
                          validate: bool = True,
                          cap: int = DEFAULT_STATE_CAP) -> LumpedChain:
    """Metropolis chain on [-N, Nprime] for the weight exp(e |x| ln C).

    The proposal is the lazy simple walk: +-1 with probability 1/2 each,
    holding with probability 1/2 at both endpoints.
    """
    xs = model.points
    if len(xs) > cap:
        raise StateSpaceCapError(f"{len(xs)} states exceeds cap {cap}")
    w = exponent * np.abs(xs) * math.log(model.C)
    K = len(xs)
    j = np.arange(K)
    src = np.concatenate([j[:-1], j[1:]])
    dst = np.concatenate([j[1:], j[:-1]])
    base = np.full(2 * (K - 1), 0.5)
    data = _metropolis_data(src, dst, base, w)
    meta = {"builder": "exp_level", "exponent": exponent, "model": model}
    return _assemble([int(x) for x in xs], src, dst, data, w, meta, validate)


def build_exp_swap_chain(model: ExpModel, M: int, validate: bool = True,
                         cap: int = DEFAULT_SWAP_CAP) -> LumpedChain:
    """Swap chain for the exponential family with exponents i/M."""
    return build_swap_chain(make_ladder(model, M), validate=validate, cap=cap)


# ---------------------------------------------------------------------------
# trace machinery
# ---------------------------------------------------------------------------

def trace_values(ladder: Ladder) -> np.ndarray:
    """Per-state scalar whose threshold defines the trace bit."""
    if ladder.is_potts:
        if ladder.model.q != 2:
            raise UnsupportedKindError("traces are defined for two-color models")
        return np.asarray([s[0] for s in ladder.states])
    return np.asarray(ladder.states)


def _local_maxima(d: np.ndarray) -> list[int]:
    """Strict local maxima (rise then non-rise), endpoints included."""
    out = []
    K = len(d)
    for i in range(K):
        left_up = i == 0 or d[i] > d[i - 1]
        right_down = i == K - 1 or d[i] >= d[i + 1]
        strict = (i > 0 and d[i] > d[i - 1]) or (i < K - 1 and d[i] > d[i + 1])
        if left_up and right_down and strict:
            out.append(i)
    return out


def trace_threshold(ladder: Ladder, rel_tol: float = 1e-9) -> TraceSpec:
    """Threshold at which all levels split into a 0/1 trace.

    For the exponential model the threshold is fixed at 0.  For a two-color
    ladder: the argmin of the level-M class distribution strictly between
    its two largest modes, verified at every level that is itself bimodal
    (ties allowed); dampened ladders satisfy this exactly because all levels
    share one shape.  Raises NoTraceError when the top distribution is
    unimodal or some bimodal level has its between-modes minimum elsewhere.
    """
    if not ladder.is_potts:
        return TraceSpec(threshold=0, family="exp-point")
    if ladder.model.q != 2:
        raise UnsupportedKindError("traces are defined for two-color models")
    n = ladder.model.n
    values = trace_values(ladder)
    order = np.argsort(values)

    def dist_by_k(level):
        return ladder.class_distribution(level)[order]

    dM = dist_by_k(ladder.M)
    maxima = _local_maxima(dM)
    if len(maxima) < 2:
        raise NoTraceError("level-M class distribution is unimodal; no trace")
    maxima.sort(key=lambda i: dM[i], reverse=True)
    k_lo, k_hi = sorted(maxima[:2])
    interior = np.arange(k_lo + 1, k_hi)
    if interior.size == 0:
        raise NoTraceError("modes are adjacent; no interior minimum")
    t_min = int(interior[np.argmin(dM[interior])])

    for i in range(ladder.M + 1):
        d = dist_by_k(i)
        mx = _local_maxima(d)
        if len(mx) < 2:
            continue  # unimodal level: nothing to contradict
        mx.sort(key=lambda j: d[j], reverse=True)
        lo, hi = sorted(mx[:2])
        inner = np.arange(lo + 1, hi)
        if inner.size == 0 or not (lo < t_min < hi):
            raise NoTraceError(f"level {i} modes exclude the trace point {t_min}")
        dmin = d[inner].min()
        if d[t_min] > dmin * (1.0 + rel_tol) + 1e-300:
            raise NoTraceError(
                f"level {i} between-modes argmin differs from level-M (k={t_min})")
    return TraceSpec(threshold=t_min, family="ising-count")


def build_trace_projection(ladder: Ladder, trace: TraceSpec | None = None,
                           validate: bool = True) -> LumpedChain:
    """Exact projection of the swap chain onto trace bit-vectors {0,1}^(M+1).

    Because the swap stationary law is a product measure and each move
    touches one or two coordinates, all other coordinates integrate out
    exactly: a bit flip at level i carries the level-i kernel's boundary
    flow conditioned on the source side, and a transposition of adjacent
    differing bits carries the side-conditioned double sum of swap
    acceptances.  Entries depend only on the touched bits, so the hypercube
    assembles from 2(M+1) flip rates and 2M swap rates.
    """
    M = ladder.M
    if M + 1 > MAX_TRACE_LEVELS:
        raise StateSpaceCapError(f"2^{M + 1} trace states exceeds the cap")
    if trace is None:
        trace = trace_threshold(ladder)
    values = trace_values(ladder)
    side1 = values >= trace.threshold

    keep, src, dst, base = _space_edges(ladder, Restriction.NONE)
    pis = [np.exp(ladder.class_log_weights(i) - ladder.log_partitions[i])
           for i in range(M + 1)]
    side_mass = np.array([[pi[~side1].sum(), pi[side1].sum()] for pi in pis])
    if np.any(side_mass <= 0.0):
        raise NoTraceError("a trace side has zero mass at some level")

    # flip[i, b]: per-step probability of crossing the threshold from side b
    # during a level move at level i (prefactor 1/(2(M+1))).
    flip = np.zeros((M + 1, 2))
    crossing = side1[src] != side1[dst]
    for i in range(M + 1):
        w = ladder.config_log_weights(i)
        data = _metropolis_data(src, dst, base, w)
        flow_src = pis[i][src[crossing]] * data[crossing]
        from1 = side1[src[crossing]]
        flip[i, 0] = flow_src[~from1].sum() / side_mass[i, 0] / (2.0 * (M + 1))
        flip[i, 1] = flow_src[from1].sum() / side_mass[i, 1] / (2.0 * (M + 1))

    # swap_rate[i, b]: transposition of levels (i, i+1) from bits (b, 1-b),
    # conditioned on those sides (prefactor 1/(2M)).
    swap_rate = np.zeros((max(M, 1), 2))
    if M >= 1:
        Wc = [ladder.config_log_weights(i) for i in range(M + 1)]
        for i in range(M):
            dw = (Wc[i][None, :] + Wc[i + 1][:, None]
                  - Wc[i][:, None] - Wc[i + 1][None, :])
            acc = np.exp(np.minimum(dw, 0.0))  # acc[a, c]: level i at a, i+1 at c
            joint = pis[i][:, None] * pis[i + 1][None, :] * acc
            for b in (0, 1):
                si = side1 if b else ~side1
                sj = ~si
                num = joint[np.ix_(si, sj)].sum()
                swap_rate[i, b] = num / (side_mass[i, b] * side_mass[i + 1, 1 - b]) \
                    / (2.0 * M)

    S = 1 << (M + 1)
    bits = ((np.arange(S)[:, None] >> np.arange(M + 1)[None, :]) & 1)
    rows, cols, vals = [], [], []
    for i in range(M + 1):
        rows.append(np.arange(S))
        cols.append(np.arange(S) ^ (1 << i))
        vals.append(flip[i, bits[:, i]])
    for i in range(M):
        differ = bits[:, i] != bits[:, i + 1]
        sel = np.arange(S)[differ]
        rows.append(sel)
        cols.append(sel ^ (1 << i) ^ (1 << (i + 1)))
        vals.append(swap_rate[i, bits[differ, i]])
    states = [tuple(int(b) for b in bits[s]) for s in range(S)]
    slog = np.log(side_mass)[np.arange(M + 1)[None, :], bits].sum(axis=1)
    meta = {"builder": "trace_projection", "M": M, "trace": trace,
            "ladder_kind": ladder.kind.value, "model": ladder.model}
    return _assemble(states, np.concatenate(rows), np.concatenate(cols),
                     np.concatenate(vals), slog, meta, validate)


# ---------------------------------------------------------------------------
# the balanced-minority line and the flattened measure
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LambdaScan:
    """Valley/peak landmarks of the class-weight profile along the
    balanced-minority line sigma = (t, (n-t)/2, (n-t)/2).

    t_min/t_max are parity-correct line points (n - t even); lam_min/lam_max
    are the fractions t/n actually used.  discrete_min records whether the
    exact finite-n profile exhibited the interior minimum itself (it only
    does for large n; the valley is ~1e-4 per site deep), or whether the
    landmark came from the continuum rate-function root.
    """
    t_min: int
    t_max: int
    lam_min: float
    lam_max: float
    discrete_min: bool


def _gb_rate_derivative(lam: float, mu: float) -> float:
    return math.log((1.0 - lam) / (2.0 * lam)) + (mu / 2.0) * (3.0 * lam - 1.0)


def gb_line_points(n: int) -> np.ndarray:
    """Parity-correct t values on the balanced-minority line, n/3 <= t <= n."""
    ts = np.arange((n + 2) // 3, n + 1)
    return ts[(n - ts) % 2 == 0]


def gb_line_weights(model: PottsModel, level_beta: float | None = None) -> tuple:
    """(t values, exact log class weights) along the balanced-minority line."""
    beta = model.beta if level_beta is None else level_beta
    ts = gb_line_points(model.n)
    sig = np.stack([ts, (model.n - ts) // 2, (model.n - ts) // 2], axis=-1)
    return ts, potts_class_log_weight(sig, beta, model.fields)


def find_lambda_min(model: PottsModel) -> LambdaScan:
    """Locate the weight minimum between the disordered and ordered modes.

    Scans the exact discrete profile along the balanced-minority line first;
    when the finite-n profile is too shallow to show an interior minimum,
    falls back to the root of the continuum rate-function derivative (the
    valley exists for mu inside the coexistence window).  Raises WindowError
    when the continuum profile is monotone, naming the window (4 ln 2, 3).
    """
    if model.q != 3:
        raise UnsupportedKindError("the balanced-minority line needs q = 3")
    if model.n % 12 != 0:
        raise DivisibilityError(f"landmark classes need n divisible by 12, got {model.n}")
    mu = model.beta * model.n

    lam_grid = np.linspace(1.0 / 3.0 + 1e-9, 1.0 - 1e-9, 8193)
    g = np.array([_gb_rate_derivative(x, mu) for x in lam_grid])
    down_up = np.where((g[:-1] < 0) & (g[1:] >= 0))[0]
    up_down = np.where((g[:-1] > 0) & (g[1:] <= 0))[0]
    if len(down_up) == 0 or len(up_down) == 0 or g[0] >= 0:
        raise WindowError(
            f"no interior minimum on the balanced-minority line at mu={mu:.6g}; "
            f"the two-mode geometry needs mu in (4 ln 2, 3) ~ ({FOUR_LN2:.4f}, 3)")
    i0, i1 = down_up[0], up_down[up_down > down_up[0]][0]
    lam_min_c = brentq(_gb_rate_derivative, lam_grid[i0], lam_grid[i0 + 1], args=(mu,))
    lam_max_c = brentq(_gb_rate_derivative, lam_grid[i1], lam_grid[i1 + 1], args=(mu,))

    ts, w = gb_line_weights(model)
    mins = [i for i in range(1, len(w) - 1) if w[i] < w[i - 1] and w[i] <= w[i + 1]]
    if mins:
        i_min = min(mins, key=lambda i: w[i])
        t_min = int(ts[i_min])
        discrete = True
    else:
        t_raw = lam_min_c * model.n
        cands = [t for t in (int(math.floor(t_raw)), int(math.ceil(t_raw)),
                             int(math.floor(t_raw)) - 1, int(math.ceil(t_raw)) + 1)
                 if (model.n - t) % 2 == 0 and ts[0] < t < model.n]
        if not cands:
            raise WindowError("no interior line point near the continuum valley")
        t_min = min(cands, key=lambda t: abs(t - t_raw))
        i_min = int(np.where(ts == t_min)[0][0])
        discrete = False
    i_max = i_min + int(np.argmax(w[i_min:]))
    t_max = int(ts[i_max])
    return LambdaScan(t_min=t_min, t_max=t_max, lam_min=t_min / model.n,
                      lam_max=t_max / model.n, discrete_min=discrete)


def flattened_class_log_weights(model: PottsModel, scan: LambdaScan | None = None):
    """(RGB states, flattened log class weights, original weights, K mask).

    Classes in K = { sigma : sigma_1 < t_min and weight >= weight(valley
    point) } are clamped to the valley-point weight, removing the disordered
    mode's dominance; everything else keeps its exact weight.
    """
    if scan is None:
        scan = find_lambda_min(model)
    n = model.n
    states = [s for s in enumerate_sigma(n, 3) if s[0] >= s[1] >= s[2]]
    sig = np.array(states)
    w = potts_class_log_weight(sig, model.beta, model.fields)
    anchor = (scan.t_min, (n - scan.t_min) // 2, (n - scan.t_min) // 2)
    w_anchor = float(potts_class_log_weight(anchor, model.beta, model.fields))
    K = (sig[:, 0] < scan.t_min) & (w >= w_anchor)
    w_flat = np.where(K, w_anchor, w)
    return states, w_flat, w, K


def build_flattened_level_chain(model: PottsModel, beta_star: float | None = None,
                                scan: LambdaScan | None = None,
                                validate: bool = True) -> LumpedChain:
    """Metropolis chain on the color-ordered space for the flattened measure.

    beta_star defaults to the model's own inverse temperature (they are the
    same quantity); per-configuration weights divide each flattened class
    weight by its multinomial.
    """
    if beta_star is not None and not math.isclose(beta_star, model.beta,
                                                  rel_tol=1e-12, abs_tol=0.0):
        model = PottsModel(q=model.q, n=model.n, beta=beta_star, fields=model.fields)
    if scan is None:
        scan = find_lambda_min(model)
    states, w_flat, _, K = flattened_class_log_weights(model, scan)
    ladder = make_ladder(model, 0)
    keep, src, dst, base = _space_edges(ladder, Restriction.RGB)
    assert [ladder.states[g] for g in keep] == states
    w_cfg = w_flat - log_multinomial(np.array(states))
    data = _metropolis_data(src, dst, base, w_cfg)
    meta = {"builder": "flattened", "model": model, "scan": scan,
            "flattened_classes": int(K.sum()), "restriction": "rgb"}
    return _assemble(states, src, dst, data, w_flat, meta, validate)
