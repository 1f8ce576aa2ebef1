"""Spectral gaps, conductance, mixing times, decomposition checks, and
scaling fits for LumpedChains.

Everything here is a pure function of immutable chains; grid evaluations can
run in parallel without coordination.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import logsumexp

from .errors import (ChainConsistencyError, EigenConvergenceError,
                     StateSpaceCapError)
from .lumped import CutSet, LumpedChain, Restriction
from .models import Ladder, PottsModel, potts_class_log_weight

#: Below this many states, eigenproblems are solved densely.
DENSE_THRESHOLD = 4000

#: Mixing-time bound formulas as implemented (the lower bound follows the
#: source's printed (1/Gap - 1) form, not the 1/(2 Gap) variant).
GAP_LOWER_FORMULA = "(1/gap - 1) * log(1/(2*eps))"
GAP_UPPER_FORMULA = "(1/gap) * log(1/(pi_min*eps))"
COND_LOWER_FORMULA = "(1 - 2*phi)/(2*phi) * log(1/(2*eps))"
COND_UPPER_FORMULA = "(1/phi^2) * (log(1/(2*eps)) + 0.5*log((1-pi_min)/pi_min))"


# ---------------------------------------------------------------------------
# stationary vector
# ---------------------------------------------------------------------------

def stationary(chain: LumpedChain, check_tol: float = 1e-10) -> np.ndarray:
    """Normalized stationary distribution, verified to satisfy pi P = pi."""
    pi = chain.stationary()
    resid = np.abs(pi @ chain.transition - pi).max()
    if resid > check_tol:
        raise ChainConsistencyError(
            f"recorded weights are not stationary: |pi P - pi| = {resid:.3e}")
    return pi


# ---------------------------------------------------------------------------
# spectral gap
# ---------------------------------------------------------------------------

@dataclass
class SpectralReport:
    gap: float
    lambda1_abs: float
    method: str            # "dense" | "iterative"
    residual: float
    converged: bool


def _symmetrized(chain: LumpedChain) -> sp.csr_matrix:
    # sqrt(P o P^T) equals D^{1/2} P D^{-1/2} under detailed balance and
    # never over/underflows, unlike forming D^{+-1/2} when the stationary
    # weights span thousands of log-units.
    P = chain.transition.tocsr()
    S = P.multiply(P.T)
    S = S.sqrt()
    S = (S + S.T) * 0.5
    S = S + sp.diags(P.diagonal() - S.diagonal())
    return S.tocsr()


def spectral_gap(chain: LumpedChain, tol: float = 1e-10,
                 dense_threshold: int = DENSE_THRESHOLD,
                 maxiter: int = 200_000) -> SpectralReport:
    """Spectral gap 1 - |lambda_1| of a reversible chain.

    Dense symmetric eigensolve below `dense_threshold` states; above it, a
    Lanczos solve for the dominant eigenvalue of the symmetrized matrix with
    the exact top eigenvector sqrt(pi) deflated away.
    """
    S = _symmetrized(chain)
    N = chain.n_states
    if N <= dense_threshold:
        ev = sla.eigvalsh(S.toarray())
        ev_abs = np.sort(np.abs(ev))[::-1]
        lam1 = float(ev_abs[1]) if N > 1 else 0.0
        residual = abs(float(ev_abs[0]) - 1.0)
        return SpectralReport(gap=1.0 - lam1, lambda1_abs=lam1, method="dense",
                              residual=residual, converged=True)

    pil = chain.stationary_log - logsumexp(chain.stationary_log)
    v0 = np.exp(0.5 * (pil - pil.max()))
    v0 /= np.linalg.norm(v0)

    def matvec(x):
        return S @ x - v0 * (v0 @ x)

    L = spla.LinearOperator((N, N), matvec=matvec, dtype=np.float64)
    try:
        vals, vecs = spla.eigsh(L, k=1, which="LM", tol=tol, maxiter=maxiter)
    except spla.ArpackNoConvergence as exc:
        raise EigenConvergenceError(
            f"Lanczos failed to converge within {maxiter} iterations", residual=None
        ) from exc
    lam1 = float(abs(vals[0]))
    x = vecs[:, 0]
    residual = float(np.linalg.norm(matvec(x) - vals[0] * x))
    converged = residual <= max(tol * 100, 1e-8)
    if not converged:
        raise EigenConvergenceError(
            f"eigsh residual {residual:.3e} above tolerance", residual=residual)
    return SpectralReport(gap=1.0 - lam1, lambda1_abs=lam1, method="iterative",
                          residual=residual, converged=converged)


# ---------------------------------------------------------------------------
# conductance
# ---------------------------------------------------------------------------

@dataclass
class ConductanceReport:
    phi: float
    cut: CutSet | None
    flow: float
    capacity: float
    log_flow: float
    log_capacity: float


def conductance(chain: LumpedChain, cut: CutSet) -> ConductanceReport:
    """Phi_S = F_S / C_S with F_S = sum_{x in S, y not in S} pi(x) P(x,y).

    Sums run in the log domain so exponentially small boundary flows at
    large n stay accurate.
    """
    mask = cut.mask
    if mask.size != chain.n_states:
        raise ValueError("cut mask size does not match the chain")
    pil = chain.stationary_log - logsumexp(chain.stationary_log)
    C = chain.transition.tocoo()
    sel = mask[C.row] & ~mask[C.col] & (C.data > 0)
    if not np.any(sel):
        log_flow = -np.inf
    else:
        log_flow = float(logsumexp(pil[C.row[sel]] + np.log(C.data[sel])))
    log_cap = float(logsumexp(pil[mask]))
    phi = float(np.exp(log_flow - log_cap))
    return ConductanceReport(phi=phi, cut=cut, flow=float(np.exp(log_flow)),
                             capacity=float(np.exp(log_cap)),
                             log_flow=log_flow, log_capacity=log_cap)


def default_threshold_values(chain: LumpedChain) -> np.ndarray:
    """Scalar per state for nested threshold cuts: sigma_1 for count states,
    x for integer states, sigma_1 of the configuration part for (sigma, i)."""
    s0 = chain.states[0]
    if isinstance(s0, tuple) and isinstance(s0[0], tuple):
        return np.asarray([s[0][0] for s in chain.states], dtype=np.int64)
    if isinstance(s0, tuple):
        return np.asarray([s[0] for s in chain.states], dtype=np.int64)
    return np.asarray(chain.states, dtype=np.int64)


def min_threshold_conductance(chain: LumpedChain, values=None,
                              family: str = "threshold") -> ConductanceReport:
    """Minimum Phi over the nested family { value <= v } (NOT over all
    subsets; a one-parameter family only).

    Each cut is charged to its smaller side: Phi_v = F / min(pi(S), pi(S^c)),
    matching the pi(S) <= 1/2 convention of the global conductance.
    """
    if values is None:
        values = default_threshold_values(chain)
    values = np.asarray(values)
    thresholds = np.unique(values)[:-1]  # drop the full set
    if thresholds.size == 0:
        raise ValueError("threshold family is degenerate (single value)")
    best = None
    for v in thresholds:
        cut = CutSet(mask=values <= v, family=f"{family}<={v}")
        rep = conductance(chain, cut)
        cap_small = min(rep.capacity, 1.0 - rep.capacity)
        if cap_small <= 0.0:
            continue
        phi = rep.flow / cap_small
        if best is None or phi < best.phi:
            best = ConductanceReport(phi=phi, cut=cut, flow=rep.flow,
                                     capacity=cap_small,
                                     log_flow=rep.log_flow,
                                     log_capacity=math.log(cap_small))
    if best is None:
        raise ValueError("no usable cut in the threshold family")
    return best


def exhaustive_conductance(chain: LumpedChain, max_states: int = 18) -> ConductanceReport:
    """True conductance min_{pi(S) <= 1/2} Phi_S by searching all subsets.

    Exponential in the state count; refuses above `max_states`.
    """
    N = chain.n_states
    if N > max_states:
        raise StateSpaceCapError(f"{N} states: exhaustive subset search capped at {max_states}")
    pi = chain.stationary()
    P = chain.transition.toarray()
    F = pi[:, None] * P
    best_phi, best_mask = np.inf, None
    for code in range(1, (1 << N) - 1):
        mask = (code >> np.arange(N)) & 1
        mask = mask.astype(bool)
        capS = pi[mask].sum()
        if capS > 0.5:
            continue
        flow = F[np.ix_(mask, ~mask)].sum()
        phi = flow / capS
        if phi < best_phi:
            best_phi, best_mask = phi, mask
    cut = CutSet(mask=best_mask, family="exhaustive")
    rep = conductance(chain, cut)
    return ConductanceReport(phi=best_phi, cut=cut, flow=rep.flow,
                             capacity=rep.capacity, log_flow=rep.log_flow,
                             log_capacity=rep.log_capacity)


# ---------------------------------------------------------------------------
# mixing times and bounds
# ---------------------------------------------------------------------------

@dataclass
class MixingTimeReport:
    t: int
    tv: float
    capped: bool            # True: t is only a lower bound (iteration cap hit)
    heuristic_starts: bool  # True: worst-start restricted to the mode classes


def _mode_start_indices(chain: LumpedChain) -> np.ndarray:
    """Heuristic worst-start set: the states of (locally) maximal stationary
    weight -- for product/tempering states, the per-level top classes."""
    w = chain.stationary_log
    top = np.argsort(w)[-8:]
    return np.unique(top)


def tv_mixing_time(chain: LumpedChain, epsilon: float = 0.125,
                   max_steps: int = 1_000_000,
                   all_starts_bound: int = 600) -> MixingTimeReport:
    """Smallest t with max-start total variation distance <= epsilon.

    Iterates the start distributions through the dense transition matrix
    (TV from a fixed start is non-increasing in t, so the first hit is the
    mixing time).  Above `all_starts_bound` states the start set shrinks to
    the heuristic mode classes and the result is flagged.
    """
    N = chain.n_states
    P = chain.transition.toarray()
    pi = chain.stationary()
    heuristic = N > all_starts_bound
    starts = _mode_start_indices(chain) if heuristic else np.arange(N)
    D = np.zeros((len(starts), N))
    D[np.arange(len(starts)), starts] = 1.0
    t = 0
    tv = 0.5 * np.abs(D - pi).sum(axis=1).max()
    while tv > epsilon and t < max_steps:
        D = D @ P
        t += 1
        tv = 0.5 * np.abs(D - pi).sum(axis=1).max()
    return MixingTimeReport(t=t, tv=float(tv), capped=tv > epsilon,
                            heuristic_starts=heuristic)


def gap_mixing_bounds(gap: float, pi_min: float, epsilon: float) -> tuple:
    """(lower, upper) mixing-time bounds from the spectral gap."""
    if gap <= 0.0:
        return (math.inf, math.inf)
    lower = (1.0 / gap - 1.0) * math.log(1.0 / (2.0 * epsilon))
    upper = (1.0 / gap) * math.log(1.0 / (pi_min * epsilon))
    return (lower, upper)


def conductance_mixing_bounds(phi: float, pi_min: float, epsilon: float) -> tuple:
    """(lower, upper) mixing-time bounds from conductance.

    The lower bound (1-2*phi)/(2*phi) * log(1/(2*eps)) is the slow-mixing
    instrument: any cut's Phi_S upper-bounds the conductance, so plugging
    one in still yields a valid lower bound.
    """
    if phi <= 0.0:
        return (math.inf, math.inf)
    lower = max(0.0, (1.0 - 2.0 * phi) / (2.0 * phi)) * math.log(1.0 / (2.0 * epsilon))
    upper = (1.0 / phi ** 2) * (math.log(1.0 / (2.0 * epsilon))
                                + 0.5 * math.log((1.0 - pi_min) / pi_min))
    return (lower, upper)


# ---------------------------------------------------------------------------
# decomposition (projection / restriction) check
# ---------------------------------------------------------------------------

@dataclass
class DecompositionReport:
    gap: float
    projection_gap: float
    min_restriction_gap: float
    restriction_gaps: list
    holds: bool


def decomposition_check(chain: LumpedChain, labels) -> DecompositionReport:
    """Evaluate gap(P) >= 1/2 * gap(projection) * min_i gap(restriction_i).

    Restrictions fold off-part moves into the diagonal; the projection
    averages flows by stationary weight.  Singleton parts get gap 1 by
    convention so the inequality degenerates gracefully.
    """
    labels = np.asarray(labels)
    if labels.size != chain.n_states:
        raise ValueError("labels must assign a part to every state")
    parts = np.unique(labels)
    if parts.size < 2:
        raise ValueError("need at least two parts")
    pi = chain.stationary()
    P = chain.transition.toarray()
    g = spectral_gap(chain).gap

    rest_gaps = []
    for p in parts:
        idx = np.where(labels == p)[0]
        if idx.size == 1:
            rest_gaps.append(1.0)  # convention for singleton parts
            continue
        Pi = P[np.ix_(idx, idx)].copy()
        d = 1.0 - Pi.sum(axis=1)
        Pi[np.arange(idx.size), np.arange(idx.size)] += d
        sub = LumpedChain(states=[chain.states[i] for i in idx],
                          transition=sp.csr_matrix(Pi),
                          stationary_log=chain.stationary_log[idx],
                          metadata={"builder": "restriction", "part": p})
        rest_gaps.append(spectral_gap(sub).gap)

    F = pi[:, None] * P
    m = parts.size
    Pbar = np.zeros((m, m))
    bar_log = np.zeros(m)
    for a, pa in enumerate(parts):
        ia = labels == pa
        wa = pi[ia].sum()
        bar_log[a] = math.log(wa)
        for b, pb in enumerate(parts):
            Pbar[a, b] = F[np.ix_(ia, labels == pb)].sum() / wa
    proj = LumpedChain(states=[str(p) for p in parts],
                       transition=sp.csr_matrix(Pbar),
                       stationary_log=bar_log,
                       metadata={"builder": "projection"})
    pg = spectral_gap(proj).gap

    mrg = float(min(rest_gaps))
    holds = g >= 0.5 * pg * mrg - 1e-12
    return DecompositionReport(gap=g, projection_gap=pg, min_restriction_gap=mrg,
                               restriction_gaps=rest_gaps, holds=holds)


# ---------------------------------------------------------------------------
# scaling fits
# ---------------------------------------------------------------------------

class FitKind(Enum):
    EXP_IN_N = "exp"
    POLY_IN_N = "poly"


@dataclass
class ScalingFit:
    kind: FitKind
    slope: float
    intercept: float
    max_residual: float
    points: list


def fit_decay(points, kind: FitKind) -> ScalingFit:
    """Least squares of ln y against x (EXP_IN_N) or ln x (POLY_IN_N).

    Residuals are reported, never hidden; callers decide what is acceptable.
    """
    kind = FitKind(kind)
    pts = [(float(x), float(y)) for x, y in points]
    if len(pts) < 3:
        raise ValueError("need at least 3 points to fit")
    x = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    if np.any(y <= 0.0):
        raise ValueError("fit needs positive y values")
    xs = np.log(x) if kind is FitKind.POLY_IN_N else x
    if np.ptp(xs) == 0.0:
        raise ValueError("degenerate x grid")
    slope, intercept = np.polyfit(xs, np.log(y), 1)
    resid = np.log(y) - (slope * xs + intercept)
    return ScalingFit(kind=kind, slope=float(slope), intercept=float(intercept),
                      max_residual=float(np.abs(resid).max()), points=pts)


# ---------------------------------------------------------------------------
# large-n threshold conductance straight from the weights
# ---------------------------------------------------------------------------

class _LogAccumulator:
    """Streaming log-sum-exp over chunks, one slot per ladder level."""

    def __init__(self, levels: int):
        self.mx = np.full(levels, -np.inf)
        self.sm = np.zeros(levels)

    def add(self, chunk_logs: np.ndarray):
        # chunk_logs: (levels, k) log terms
        if chunk_logs.size == 0:
            return
        cm = chunk_logs.max(axis=1)
        cm_safe = np.where(np.isfinite(cm), cm, 0.0)
        cs = np.exp(chunk_logs - cm_safe[:, None]).sum(axis=1)
        cs = np.where(np.isfinite(cm), cs, 0.0)
        new_mx = np.maximum(self.mx, cm)
        scale_old = np.exp(np.where(np.isfinite(self.mx), self.mx - new_mx, -np.inf))
        scale_new = np.exp(np.where(np.isfinite(cm), cm - new_mx, -np.inf))
        self.sm = self.sm * np.where(np.isnan(scale_old), 0.0, scale_old) \
            + cs * np.where(np.isnan(scale_new), 0.0, scale_new)
        self.mx = new_mx

    def value(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return self.mx + np.log(self.sm)


def tempering_threshold_conductance(model: PottsModel, M: int, threshold: int,
                                    chain: str = "tempering",
                                    family: str = "maxcount",
                                    restriction: Restriction = Restriction.NONE,
                                    exponents=None,
                                    chunk_rows: int = 16) -> ConductanceReport:
    """Phi_S of a threshold cut, computed from class weights alone.

    No transition matrix or eigensystem is built, so this runs at n ~ 1e4
    with M ~ 1e2.  Families:

      "maxcount": S = { all sigma_m <= threshold } per level
      "sigma1":   S = { sigma_1 <= threshold }

    The flow sums outward Metropolis moves over the boundary classes only
    (level moves carry the 1/2 tempering prefactor; temperature moves never
    cross a level-uniform cut).  The capacity streams the region masses over
    fixed-sigma_1 rows through a log-sum-exp accumulator, computing the
    multinomial terms once per chunk and reusing them across all levels.
    chain="level" computes the same cut for the fixed-temperature chain.
    """
    if model.q != 3:
        raise NotImplementedError("threshold conductance is implemented for q = 3")
    n, q = model.n, model.q
    rgb = Restriction(restriction) is Restriction.RGB
    if family not in ("maxcount", "sigma1"):
        raise ValueError(f"unknown cut family {family!r}")
    if exponents is None:
        e = np.arange(M + 1) / M if M > 0 else np.ones(1)
    else:
        e = np.asarray(exponents, dtype=np.float64)
    betas = (e * model.beta) if chain == "tempering" else np.array([model.beta])
    level_prefactor = 0.5 if chain == "tempering" else 1.0
    h = np.asarray(model.fields)

    def rgb_ok(sig):
        return (sig[:, 0] >= sig[:, 1]) & (sig[:, 1] >= sig[:, 2])

    def in_region(sig):
        ok = rgb_ok(sig) if rgb else np.ones(sig.shape[0], dtype=bool)
        if family == "maxcount":
            return ok & (sig.max(axis=1) <= threshold)
        return ok & (sig[:, 0] <= threshold)

    def weights_all_levels(sig):
        """(levels, k) log class weights; gammaln computed once."""
        from .models import bar_hamiltonian, log_multinomial
        lm = log_multinomial(sig)
        bh = bar_hamiltonian(sig)
        fld = sig @ h
        return lm[None, :] + 0.5 * betas[:, None] * bh[None, :] \
            + betas[:, None] * fld[None, :]

    # ---- capacity: stream sigma_1 rows ----
    accZ = _LogAccumulator(len(betas))
    accA = _LogAccumulator(len(betas))
    for r0 in range(0, n + 1, chunk_rows):
        sigs = []
        for t in range(r0, min(r0 + chunk_rows, n + 1)):
            s2 = np.arange(0, n - t + 1)
            sigs.append(np.stack([np.full(s2.shape, t), s2, n - t - s2], axis=-1))
        sig = np.concatenate(sigs, axis=0)
        if rgb:
            sig = sig[rgb_ok(sig)]
        if sig.shape[0] == 0:
            continue
        w = weights_all_levels(sig)
        accZ.add(w)
        inA = in_region(sig)
        if np.any(inA):
            accA.add(w[:, inA])
    logZ = accZ.value()
    logA = accA.value()
    log_cap = float(logsumexp(logA - logZ) - math.log(len(betas)))

    # ---- flow: boundary classes only ----
    if family == "maxcount":
        pieces = []
        for axis in range(3):
            rest = np.arange(0, n - threshold + 1)
            sig = np.zeros((rest.size, 3), dtype=np.int64)
            sig[:, axis] = threshold
            other = [a for a in range(3) if a != axis]
            sig[:, other[0]] = rest
            sig[:, other[1]] = n - threshold - rest
            pieces.append(sig)
        bsig = np.unique(np.concatenate(pieces, axis=0), axis=0)
    else:
        s2 = np.arange(0, n - threshold + 1)
        bsig = np.stack([np.full(s2.shape, threshold), s2, n - threshold - s2], axis=-1)
    bsig = bsig[in_region(bsig)]

    from .models import log_multinomial
    wB = weights_all_levels(bsig)          # (levels, B)
    lmB = log_multinomial(bsig)
    per_level_flows = []
    flow_terms = [[] for _ in betas]       # log terms per level
    for a in range(3):
        for c in range(3):
            if a == c:
                continue
            movable = bsig[:, a] > 0
            sig2 = bsig.copy()
            sig2[:, a] -= 1
            sig2[:, c] += 1
            exits = movable & ~in_region(sig2)
            if rgb:
                # moves that leave the color-ordered space are rejections,
                # not flow
                exits &= rgb_ok(sig2)
            if not np.any(exits):
                continue
            base = (bsig[exits, a] / n) * (1.0 / q) * level_prefactor
            w2 = weights_all_levels(sig2[exits])
            lm2 = log_multinomial(sig2[exits])
            dcfg = (w2 - lm2[None, :]) - (wB[:, exits] - lmB[None, exits][0])
            logp = np.log(base)[None, :] + np.minimum(dcfg, 0.0)
            for li in range(len(betas)):
                flow_terms[li].append(wB[li, exits] - logZ[li] + logp[li])
    for li in range(len(betas)):
        if flow_terms[li]:
            per_level_flows.append(logsumexp(np.concatenate(flow_terms[li])))
        else:
            per_level_flows.append(-np.inf)
    log_flow = float(logsumexp(per_level_flows) - math.log(len(betas)))

    phi = math.exp(log_flow - log_cap)
    return ConductanceReport(phi=phi, cut=None, flow=math.exp(log_flow),
                             capacity=math.exp(log_cap),
                             log_flow=log_flow, log_capacity=log_cap)
