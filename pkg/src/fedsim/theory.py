"""Convergence-bound constants and the communication-round predictor.

Everything here is a plain function of a :class:`ProblemConstants`. The
gradient bound ``G`` is never known a priori for the problems we simulate,
so callers pass the largest gradient norm observed on a trajectory; bound
checks built on it are necessary-condition tests, not certificates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from fedsim.objectives import GlobalObjective, LogisticObjective, gamma_heterogeneity
from fedsim.sampling import Scheme

EXACT = "exact"
ESTIMATED = "estimated"


@dataclass(frozen=True, eq=False)
class ProblemConstants:
    L: float
    mu: float
    G: float
    sigma: np.ndarray  # per-device stochastic-gradient std, sigma_k
    Gamma: float
    p: np.ndarray
    E: int = 1
    K: int | None = None  # None: full participation
    tags: dict = field(default_factory=dict)

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=np.float64)
        p = np.asarray(self.p, dtype=np.float64)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "p", p)
        if not (self.mu > 0 and self.L >= self.mu):
            raise ValueError(f"need L >= mu > 0, got L={self.L}, mu={self.mu}")
        if self.G < 0 or self.Gamma < 0 or np.any(sigma < 0):
            raise ValueError("G, Gamma and sigma must be non-negative")
        if sigma.shape != p.shape:
            raise ValueError("need one sigma per device")
        if self.E < 1:
            raise ValueError("E must be >= 1")
        if self.K is not None and not 1 <= self.K:
            raise ValueError("K must be >= 1")

    @property
    def N(self) -> int:
        return self.p.size

    @property
    def kappa(self) -> float:
        return self.L / self.mu

    @property
    def weighted_noise(self) -> float:
        """``sum_k p_k^2 sigma_k^2``."""
        return float(np.sum(self.p**2 * self.sigma**2))

    def with_(self, **changes) -> "ProblemConstants":
        return replace(self, **changes)


def estimate_constants(problem: GlobalObjective, E: int = 1, K: int | None = None, G: float | None = None,
                       batch_size: int | None = None, probe_points=None) -> ProblemConstants:
    """Constants for a quadratic or logistic federated problem.

    Quadratics: ``L`` and ``mu`` are the extreme local Hessian eigenvalues and
    ``Gamma`` comes from exact solves (all exact); ``sigma_k`` is the injected
    noise level. Logistic: ``L`` is the softmax curvature bound, ``mu = 2 lam``,
    ``Gamma`` from numerical minimizers, and ``sigma_k^2`` is the largest
    minibatch-gradient variance seen at ``probe_points`` (default: the zero
    vector and the global minimizer).

    ``G`` should be the largest gradient norm observed on the trajectory being
    checked. When omitted it is the largest local gradient norm at the probe
    points, which is only a rough stand-in.
    """
    locals_ = problem.locals
    tags = {}
    gmin = problem.minimum()
    if problem.is_quadratic:
        L = max(obj.smoothness_bound() for obj in locals_)
        mu = min(obj.strong_convexity() for obj in locals_)
        sigma = np.array([obj.noise_sigma for obj in locals_])
        tags.update(L=EXACT, mu=EXACT, sigma=EXACT, Gamma=EXACT)
    elif all(isinstance(obj, LogisticObjective) for obj in locals_):
        L = max(obj.smoothness_bound() for obj in locals_)
        mu = min(obj.strong_convexity() for obj in locals_)
        points = [problem.shape.zeros(), gmin.w] if probe_points is None else list(probe_points)
        sig2 = np.zeros(problem.n_devices)
        if batch_size is not None:
            for k, obj in enumerate(locals_):
                sig2[k] = max(obj.per_sample_grad_variance(w) for w in points) / batch_size
        sigma = np.sqrt(np.maximum(sig2, 0.0))
        tags.update(L=ESTIMATED, mu=EXACT, sigma=EXACT if batch_size is None else ESTIMATED, Gamma=ESTIMATED)
    else:
        raise TypeError("estimate_constants handles quadratic or logistic problems")
    if not mu > 0:
        raise ValueError("local objectives are not strongly convex (mu = 0)")
    Gamma = gamma_heterogeneity(problem, gmin)
    if G is None:
        points = [problem.shape.zeros(), gmin.w] if probe_points is None else list(probe_points)
        G = max(float(np.linalg.norm(obj.grad(w))) for obj in locals_ for w in points)
    tags["G"] = ESTIMATED
    return ProblemConstants(L=float(L), mu=float(mu), G=float(G), sigma=sigma, Gamma=float(Gamma),
                            p=problem.weights.copy(), E=E, K=K, tags=tags)


def compute_B(c: ProblemConstants) -> float:
    """``sum p_k^2 sigma_k^2 + 6 L Gamma + 8 (E-1)^2 G^2``."""
    return c.weighted_noise + 6.0 * c.L * c.Gamma + 8.0 * (c.E - 1) ** 2 * c.G**2


def compute_C(scheme, c: ProblemConstants) -> float:
    """Sampling-variance constant; 0 under full participation."""
    scheme = Scheme(scheme)
    if scheme is Scheme.FULL or c.K is None:
        return 0.0
    base = 4.0 / c.K * c.E**2 * c.G**2
    if scheme is Scheme.SCHEME_I:
        return base
    if scheme in (Scheme.SCHEME_II, Scheme.SCHEME_II_TRANSFORMED):
        if c.N == 1:
            raise ValueError("scheme II needs N >= 2")
        if c.K > c.N:
            raise ValueError("K exceeds N")
        return (c.N - c.K) / (c.N - 1) * base
    raise ValueError(f"no bound is known for scheme {scheme}")


def gamma_offset(c: ProblemConstants, variant: str = "reduced") -> float:
    g = max(8.0 * c.kappa, c.E)
    if variant == "reduced":
        return g - 1.0
    if variant == "standard":
        return g
    raise ValueError("variant must be 'reduced' or 'standard'")


def theorem_rhs(t, c: ProblemConstants, C: float, delta1: float, variant: str = "reduced"):
    """Bound on ``E F(w_t) - F*`` at 1-based step ``t`` (scalar or array).

    ``delta1`` is ``E |w_1 - w*|^2``. The "reduced" variant writes the bound as
    ``kappa/(gamma+t) (2(B+C)/mu + mu (gamma+1) delta1 / 2)`` with the smaller
    ``gamma``; the "standard" variant writes it with ``gamma + 1`` and ``t - 1``, which
    is the same number.
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 1):
        raise ValueError("t is 1-based")
    gamma = gamma_offset(c, variant)
    B = compute_B(c)
    shift = 0.0 if variant == "reduced" else -1.0
    head = 2.0 * (B + C) / c.mu
    tail = c.mu * (gamma + 1.0 + shift) * delta1 / 2.0
    out = c.kappa / (gamma + t + shift) * (head + tail)
    return float(out) if out.ndim == 0 else out


def distance_rhs(t, c: ProblemConstants, C: float, delta1: float):
    """Bound ``v / (gamma + t)`` on ``E |w_t - w*|^2``, ``v = max(4(B+C)/mu^2, (gamma+1) delta1)``."""
    t = np.asarray(t, dtype=np.float64)
    gamma = gamma_offset(c, "reduced")
    v = max(4.0 * (compute_B(c) + C) / c.mu**2, (gamma + 1.0) * delta1)
    out = v / (gamma + t)
    return float(out) if out.ndim == 0 else out


def transformed_constants(c: ProblemConstants, nu: float, varsigma: float) -> ProblemConstants:
    """Constants of the rescaled problem: curvature bounds scale by ``nu`` and ``varsigma``, weights uniform."""
    return c.with_(L=nu * c.L, mu=varsigma * c.mu, p=np.full(c.N, 1.0 / c.N),
                   tags={**c.tags, "L": ESTIMATED, "mu": ESTIMATED})


def _bracket_coefficients(c: ProblemConstants, K):
    K = c.N if K is None else K
    if K < 1:
        raise ValueError("K must be >= 1")
    a = (1.0 + 1.0 / K) * c.G**2
    h = c.weighted_noise + c.L * c.Gamma + c.kappa * c.G**2
    return a, h, c.G**2


def predict_comm_rounds(c: ProblemConstants, K: int | None = None, E: float | None = None) -> float:
    """Round-count bracket ``(1+1/K) E G^2 + (sum p^2 sigma^2 + L Gamma + kappa G^2)/E + G^2``.

    Only meaningful for comparing choices of ``E`` and ``K`` at a fixed target.
    """
    E = c.E if E is None else E
    if E <= 0:
        raise ValueError("E must be positive")
    a, h, const = _bracket_coefficients(c, K if K is not None else c.K)
    return a * E + h / E + const


def optimal_local_steps(c: ProblemConstants, K: int | None = None) -> float:
    """Continuous minimiser of :func:`predict_comm_rounds` over ``E``."""
    a, h, _ = _bracket_coefficients(c, K if K is not None else c.K)
    if a == 0:
        return math.inf
    return math.sqrt(h / a)
