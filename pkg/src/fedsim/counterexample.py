"""Distributed ridge regression on which fixed-step FedAvg is biased.

``N`` devices share a ``(Np+1)``-dimensional tridiagonal system
``A = tridiag(-1, 2, -1)``. Device ``k`` owns the block of rows
``[(k-1)p, kp]`` (0-based), so neighbouring blocks overlap in a single
coordinate, and only device 0 sees the right-hand side ``b = e_1``.
Locals are ``F_k(w) = 0.5 * (w'A_k w - 2 b_k'w + mu |w|^2)`` and the global
objective is their plain average.

With a constant step ``eta`` and ``E > 1`` full-batch local steps, the
averaged iterate converges to a point ``w_tilde`` that differs from the
minimizer by at least ``(E-1) eta / 16 * |A_1 A_2 w*|`` (for ``mu = 0``).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from fedsim.errors import NumericError
from fedsim.objectives import GlobalObjective, QuadraticObjective


@dataclass(frozen=True, eq=False)
class CounterexampleProblem:
    N: int
    p: int
    mu: float
    A: np.ndarray
    A_parts: tuple
    b: np.ndarray
    b_parts: tuple

    @property
    def dim(self) -> int:
        return self.N * self.p + 1

    def shifted_parts(self):
        """``A_k + mu I`` for every device."""
        eye = np.eye(self.dim)
        return [Ak + self.mu * eye for Ak in self.A_parts]

    def objective(self) -> GlobalObjective:
        locals_ = [QuadraticObjective(Ak, bk, self.mu) for Ak, bk in zip(self.A_parts, self.b_parts)]
        return GlobalObjective(locals_, np.full(self.N, 1.0 / self.N))


def _block(N, p, k):
    """Block matrix B_k (k is 1-based): path-graph Laplacian on rows (k-1)p .. kp."""
    d = N * p + 1
    B = np.zeros((d, d))
    lo, hi = (k - 1) * p, k * p
    for i in range(lo, hi + 1):
        B[i, i] = 1.0 if i in (lo, hi) else 2.0
    for i in range(lo, hi):
        B[i, i + 1] = B[i + 1, i] = -1.0
    return B


def build(N: int, p: int, mu: float = 0.0) -> CounterexampleProblem:
    if N < 2:
        raise ValueError("need N >= 2 devices")
    if p < 1:
        raise ValueError("need block size p >= 1")
    if mu < 0:
        raise ValueError("mu must be non-negative")
    d = N * p + 1
    A = 2.0 * np.eye(d) - np.eye(d, k=1) - np.eye(d, k=-1)
    parts = [_block(N, p, k) for k in range(1, N + 1)]
    parts[0][0, 0] += 1.0
    parts[-1][d - 1, d - 1] += 1.0
    b = np.zeros(d)
    b[0] = 1.0
    b_parts = [b.copy()] + [np.zeros(d) for _ in range(N - 1)]
    for Ak in parts:
        Ak.setflags(write=False)
    return CounterexampleProblem(N, p, float(mu), A, tuple(parts), b, tuple(b_parts))


def optimum(prob: CounterexampleProblem) -> np.ndarray:
    """Global minimizer: closed form ``1 - i/(Np+2)`` when mu = 0, else solve ``(A + N mu I) w = b``."""
    d = prob.dim
    if prob.mu == 0.0:
        w = 1.0 - np.arange(1, d + 1) / (d + 1)
        resid = np.linalg.norm(prob.A @ w - prob.b)
        if resid > 1e-10:
            raise NumericError(f"closed-form optimum has residual {resid:.3g}")
        return w
    return np.linalg.solve(prob.A + prob.N * prob.mu * np.eye(d), prob.b)


def max_step_size(prob: CounterexampleProblem) -> float:
    """Largest admissible constant step, exclusive: ``1 / (4 + mu)``."""
    return 1.0 / (4.0 + prob.mu)


def _check_eta(prob, eta, E):
    if not 0.0 < eta < max_step_size(prob):
        raise ValueError(f"eta must lie in (0, {max_step_size(prob):.6g}), got {eta}")
    if E < 1:
        raise ValueError("E must be >= 1")


def round_map(prob: CounterexampleProblem, w, eta: float, E: int) -> np.ndarray:
    """One full-batch FedAvg round: E gradient steps per device from ``w``, then the mean."""
    _check_eta(prob, eta, E)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (prob.dim,):
        raise ValueError(f"expected vector of length {prob.dim}")
    total = np.zeros(prob.dim)
    for Hk, bk in zip(prob.shifted_parts(), prob.b_parts):
        wk = w.copy()
        for _ in range(E):
            wk = wk - eta * (Hk @ wk - bk)
        total += wk
    return total / prob.N


def round_affine(prob: CounterexampleProblem, eta: float, E: int):
    """``(M, c)`` with ``round_map(w) = M w + c``, built from matrix powers."""
    _check_eta(prob, eta, E)
    eye = np.eye(prob.dim)
    shifted = prob.shifted_parts()
    M = sum(np.linalg.matrix_power(eye - eta * Hk, E) for Hk in shifted) / prob.N
    step1 = eye - eta * shifted[0]
    acc = np.zeros(prob.dim)
    term = prob.b.copy()
    for _ in range(E):
        acc += term
        term = step1 @ term
    c = eta / prob.N * acc
    return M, c


def fedavg_fixed_point(prob: CounterexampleProblem, eta: float, E: int) -> np.ndarray:
    """Limit of fixed-step full-batch FedAvg.

    ``(I - (1/N) sum_i (I - eta A_i)^E)^{-1} (eta/N) sum_l (I - eta A_1)^l b``,
    with ``A_i`` replaced by ``A_i + mu I`` when ``mu > 0``.
    """
    M, c = round_affine(prob, eta, E)
    return np.linalg.solve(np.eye(prob.dim) - M, c)


def gap_lower_bound(prob: CounterexampleProblem, eta: float, E: int, w_star=None) -> float:
    """``(E-1) eta / 16 * |A_1 A_2 w*|``."""
    if w_star is None:
        w_star = optimum(prob)
    return (E - 1) * eta / 16.0 * float(np.linalg.norm(prob.A_parts[0] @ (prob.A_parts[1] @ w_star)))


class IterationResult(NamedTuple):
    w: np.ndarray
    rounds: int
    last_step: float


def iterate_fixed_point(prob: CounterexampleProblem, eta: float, E: int, tol: float = 1e-13,
                        w0=None, accelerate: bool = True, max_rounds: int = 10**7) -> IterationResult:
    """Run fixed-step FedAvg rounds until ``|w_{t+1} - w_t| <= tol``.

    With ``accelerate`` the affine round map is sampled from :func:`round_map`
    (its value at 0 and at the unit vectors) and then composed with itself by
    repeated squaring, so ``2^k`` rounds cost one matrix product. The stopping
    test always uses a plain :func:`round_map` call.
    """
    w = np.zeros(prob.dim) if w0 is None else np.array(w0, dtype=np.float64)
    rounds = 0
    if not accelerate:
        while rounds < max_rounds:
            nxt = round_map(prob, w, eta, E)
            step = float(np.linalg.norm(nxt - w))
            w = nxt
            rounds += 1
            if step <= tol:
                return IterationResult(w, rounds, step)
        raise NumericError(f"no convergence after {max_rounds} rounds (last step {step:.3g})")

    c = round_map(prob, np.zeros(prob.dim), eta, E)
    M = np.column_stack([round_map(prob, e, eta, E) - c for e in np.eye(prob.dim)])
    span = 1
    for _ in range(64):
        nxt = round_map(prob, w, eta, E)
        step = float(np.linalg.norm(nxt - w))
        if step <= tol:
            return IterationResult(nxt, rounds + 1, step)
        w = M @ w + c
        rounds += span
        M, c = M @ M, M @ c + c
        span *= 2
    raise NumericError(f"no convergence after 2^64 rounds (last step {step:.3g})")
