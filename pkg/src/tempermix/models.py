"""Mean-field spin models, tempering ladders, and exact log-weight arithmetic.

Everything operates on the lumped state space of color counts
sigma = (sigma_1, ..., sigma_q), sum sigma_m = n.  All weights are kept in the
log domain; probabilities are materialized only on demand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import StateSpaceCapError, UnsupportedKindError

#: Hard cap on enumerated lumped state spaces (overridable per call).
DEFAULT_STATE_CAP = 10_000_000


# ---------------------------------------------------------------------------
# color-count (sigma) plumbing
# ---------------------------------------------------------------------------

def sigma_space_size(n: int, q: int) -> int:
    """Number of compositions of n into q ordered non-negative parts."""
    return math.comb(n + q - 1, q - 1)


def enumerate_sigma(n: int, q: int, cap: int = DEFAULT_STATE_CAP) -> list[tuple]:
    """All color-count vectors for n vertices and q colors.

    The order is lexicographic descending, e.g. for (n=2, q=3):
    (2,0,0), (1,1,0), (1,0,1), (0,2,0), (0,1,1), (0,0,2).

    Raises StateSpaceCapError if the count exceeds `cap`.
    """
    if n < 1 or q < 2:
        raise ValueError(f"need n >= 1 and q >= 2, got n={n}, q={q}")
    size = sigma_space_size(n, q)
    if size > cap:
        raise StateSpaceCapError(
            f"sigma space for (n={n}, q={q}) has {size} states, cap is {cap}")
    out = []

    def rec(prefix, rem, parts_left):
        if parts_left == 1:
            out.append(prefix + (rem,))
            return
        for v in range(rem, -1, -1):
            rec(prefix + (v,), rem - v, parts_left - 1)

    rec((), n, q)
    return out


def validate_sigma(sigma, n: int | None = None, q: int | None = None) -> tuple:
    """Check a color-count vector and return it as a tuple of ints."""
    sig = tuple(int(v) for v in sigma)
    if any(v < 0 for v in sig):
        raise ValueError(f"negative count in {sig}")
    if q is not None and len(sig) != q:
        raise ValueError(f"expected {q} counts, got {len(sig)}")
    if len(sig) < 2:
        raise ValueError("need at least 2 colors")
    if n is not None and sum(sig) != n:
        raise ValueError(f"counts {sig} sum to {sum(sig)}, expected {n}")
    return sig


def log_multinomial(sigma) -> float | np.ndarray:
    """ln( n! / prod_m sigma_m! ) via log-gamma.

    Accepts a single count vector or an array with the counts on the last
    axis; stable for n up to at least 1e5.
    """
    sig = np.asarray(sigma, dtype=np.float64)
    return gammaln(sig.sum(axis=-1) + 1.0) - gammaln(sig + 1.0).sum(axis=-1)


def bar_hamiltonian(sigma) -> float | np.ndarray:
    """Quadratic form sum_m sigma_m^2 (the complete-graph energy, rescaled)."""
    sig = np.asarray(sigma, dtype=np.float64)
    return (sig * sig).sum(axis=-1)


def pair_hamiltonian(sigma, fields=None) -> float | np.ndarray:
    """Monochromatic-pair count plus field term on the complete graph.

    Returns sum_m sigma_m (sigma_m - 1)/2 + sum_m h_m sigma_m.  The value is
    shared by every configuration in the class of `sigma`.  The identity

        beta * pair_hamiltonian(sigma, h=0)
            = (beta/2) * bar_hamiltonian(sigma) - beta * n / 2

    holds exactly and either form may be used internally.
    """
    sig = np.asarray(sigma, dtype=np.float64)
    pairs = (sig * (sig - 1.0) / 2.0).sum(axis=-1)
    if fields is None:
        return pairs
    h = np.asarray(fields, dtype=np.float64)
    return pairs + (sig * h).sum(axis=-1)


def potts_class_log_weight(sigma, beta: float, fields=None) -> float | np.ndarray:
    """Unnormalized log weight of the class of `sigma` at inverse temperature beta.

    log multinomial + (beta/2) * sum sigma_m^2 + beta * sum h_m sigma_m.
    Works on arbitrary count vectors without enumerating the state space,
    which is what the large-n critical-point arithmetic needs.
    """
    w = log_multinomial(sigma) + 0.5 * beta * bar_hamiltonian(sigma)
    if fields is not None:
        sig = np.asarray(sigma, dtype=np.float64)
        h = np.asarray(fields, dtype=np.float64)
        w = w + beta * (sig * h).sum(axis=-1)
    return w


# ---------------------------------------------------------------------------
# model families
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PottsModel:
    """Ferromagnetic mean-field Potts model on n vertices with q colors.

    `beta` is the inverse temperature (>= 0); `fields` are per-color external
    fields h_m.  `mu` is the convenience parametrization beta = mu/n used by
    the fixed-temperature experiments; when given, it must be consistent.
    """
    q: int
    n: int
    beta: float
    fields: tuple = None
    mu: float = None

    def __post_init__(self):
        if self.q < 2:
            raise ValueError(f"q must be >= 2, got {self.q}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.beta < 0:
            raise ValueError("only the ferromagnetic regime beta >= 0 is supported")
        f = self.fields
        if f is None:
            f = (0.0,) * self.q
        f = tuple(float(x) for x in f)
        if len(f) != self.q:
            raise ValueError(f"need {self.q} fields, got {len(f)}")
        object.__setattr__(self, "fields", f)
        if self.mu is not None and not math.isclose(self.mu, self.beta * self.n,
                                                    rel_tol=1e-12, abs_tol=1e-12):
            raise ValueError(f"mu={self.mu} inconsistent with beta*n={self.beta * self.n}")

    @classmethod
    def from_mu(cls, q: int, n: int, mu: float, fields=None) -> "PottsModel":
        return cls(q=q, n=n, beta=mu / n, fields=fields, mu=mu)

    @classmethod
    def ising(cls, n: int, beta: float, h: float = 0.0) -> "PottsModel":
        """Two-color model; color 0 plays the role of spin +1 and carries h."""
        return cls(q=2, n=n, beta=beta, fields=(h, 0.0))

    @property
    def bar_beta(self) -> float:
        return self.beta / 2.0

    @property
    def has_field(self) -> bool:
        return any(h != 0.0 for h in self.fields)


@dataclass(frozen=True)
class ExpModel:
    """Bimodal exponential distribution C^{|x|}/Z on the integers [-N, Nprime]."""
    C: float
    N: int
    Nprime: int

    def __post_init__(self):
        if not self.C > 1.0:
            raise ValueError(f"C must be > 1, got {self.C}")
        if self.N < 1 or self.Nprime < 1:
            raise ValueError("N and Nprime must be positive")

    @property
    def points(self) -> np.ndarray:
        return np.arange(-self.N, self.Nprime + 1)


def exp_log_weight(model: ExpModel, exponent: float, x: int) -> float:
    """Unnormalized log weight exponent * |x| * ln C; x must lie in [-N, Nprime]."""
    if not (-model.N <= x <= model.Nprime):
        raise ValueError(f"x={x} outside [-{model.N}, {model.Nprime}]")
    return exponent * abs(x) * math.log(model.C)


# ---------------------------------------------------------------------------
# ladders
# ---------------------------------------------------------------------------

class LadderKind(Enum):
    TEMPERED = "tempered"
    DAMPENED = "dampened"


class Ladder:
    """An indexed family of M+1 distributions over one lumped state space.

    TEMPERED uses the model at inverse temperature exponents[i] * beta (the
    default schedule is i/M).  DAMPENED raises the level-M class weights to
    the power exponents[i], which flattens the class distribution uniformly
    while preserving its shape; it is defined only for Potts/Ising models
    because the construction divides out the multinomial factor.

    log_partitions holds the exact log normalizers, computed by log-sum-exp
    over the full lumped space.  Instances are immutable after construction.
    """

    def __init__(self, model, M: int, kind: LadderKind = LadderKind.TEMPERED,
                 exponents=None, cap: int = DEFAULT_STATE_CAP):
        if M < 0:
            raise ValueError(f"M must be >= 0, got {M}")
        kind = LadderKind(kind)
        if isinstance(model, ExpModel) and kind is LadderKind.DAMPENED:
            raise UnsupportedKindError(
                "dampened ladders need a count structure; ExpModel has none")
        if exponents is None:
            e = np.arange(M + 1) / M if M > 0 else np.ones(1)
        else:
            e = np.asarray(exponents, dtype=np.float64)
            if e.shape != (M + 1,):
                raise ValueError(f"need {M + 1} exponents, got shape {e.shape}")
            if np.any(np.diff(e) < 0):
                raise ValueError("exponents must be non-decreasing")
            if M > 0 and not (e[0] == 0.0 and e[-1] == 1.0):
                raise ValueError("exponents must start at 0 and end at 1")
        self.model = model
        self.M = M
        self.kind = kind
        self.exponents = e

        if isinstance(model, PottsModel):
            self.states = enumerate_sigma(model.n, model.q, cap=cap)
            self._sig = np.array(self.states, dtype=np.int64)
            self._index = {s: i for i, s in enumerate(self.states)}
            self._logmult = log_multinomial(self._sig)
            self._barh = bar_hamiltonian(self._sig)
            self._fieldterm = self._sig @ np.asarray(model.fields)
        else:
            xs = model.points
            if len(xs) > cap:
                raise StateSpaceCapError(
                    f"exponential state space has {len(xs)} points, cap is {cap}")
            self.states = [int(x) for x in xs]
            self._x = xs
            self._index = {x: i for i, x in enumerate(self.states)}

        self.log_partitions = np.array(
            [logsumexp(self.class_log_weights(i)) for i in range(M + 1)])

    # -- basic shape --------------------------------------------------------

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def is_potts(self) -> bool:
        return isinstance(self.model, PottsModel)

    def beta_at(self, level: int) -> float:
        """Effective inverse temperature of a tempered level."""
        self._check_level(level)
        return self.exponents[level] * self.model.beta

    def _check_level(self, level: int):
        if not 0 <= level <= self.M:
            raise ValueError(f"level {level} outside 0..{self.M}")

    # -- vectorized weights over the enumerated space ------------------------

    def class_log_weights(self, level: int) -> np.ndarray:
        """Unnormalized log class weights at `level`, in enumeration order."""
        self._check_level(level)
        if not self.is_potts:
            return self.exponents[level] * np.abs(self._x) * math.log(self.model.C)
        if self.kind is LadderKind.TEMPERED:
            b = self.beta_at(level)
            return self._logmult + 0.5 * b * self._barh + b * self._fieldterm
        bM = self.model.beta
        base = self._logmult + 0.5 * bM * self._barh + bM * self._fieldterm
        return self.exponents[level] * base

    def config_log_weights(self, level: int) -> np.ndarray:
        """Per-configuration log weights (class weight minus log multinomial).

        Their differences drive every Metropolis acceptance ratio: the chains
        move between configurations, not classes.
        """
        w = self.class_log_weights(level)
        return w - self._logmult if self.is_potts else w

    def class_distribution(self, level: int) -> np.ndarray:
        """Normalized class probabilities at `level` (sums to 1)."""
        w = self.class_log_weights(level)
        return np.exp(w - logsumexp(w))

    # -- scalar weights for arbitrary states --------------------------------

    def log_class_weight(self, level: int, sigma) -> float:
        self._check_level(level)
        if not self.is_potts:
            return exp_log_weight(self.model, self.exponents[level], int(sigma))
        sig = validate_sigma(sigma, n=self.model.n, q=self.model.q)
        if self.kind is LadderKind.TEMPERED:
            return float(potts_class_log_weight(sig, self.beta_at(level),
                                                self.model.fields))
        base = potts_class_log_weight(sig, self.model.beta, self.model.fields)
        return float(self.exponents[level] * base)

    def log_config_weight(self, level: int, sigma) -> float:
        w = self.log_class_weight(level, sigma)
        if self.is_potts:
            w -= float(log_multinomial(sigma))
        return w

    def config_delta(self, level: int, sigma, a: int, b: int) -> float:
        """log_config_weight(sigma with one vertex recolored a -> b) minus
        log_config_weight(sigma), in O(1).  Requires sigma[a] > 0 and a != b."""
        m = self.model
        d_barh = 2.0 * (sigma[b] - sigma[a] + 1.0)
        d_field = m.fields[b] - m.fields[a]
        if self.kind is LadderKind.TEMPERED:
            bi = self.beta_at(level)
            return 0.5 * bi * d_barh + bi * d_field
        d_logmult = math.log(sigma[a]) - math.log(sigma[b] + 1)
        bM = m.beta
        d_class = d_logmult + 0.5 * bM * d_barh + bM * d_field
        return self.exponents[level] * d_class - d_logmult


def make_ladder(model, M: int, kind: LadderKind = LadderKind.TEMPERED,
                exponents=None, cap: int = DEFAULT_STATE_CAP) -> Ladder:
    """Build a ladder with exact log partitions; see Ladder."""
    return Ladder(model, M, kind=kind, exponents=exponents, cap=cap)
