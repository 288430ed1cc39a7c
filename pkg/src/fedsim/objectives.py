"""Local and global objectives.

Two families are supported: L2-regularized multinomial logistic regression
and per-device quadratics ``0.5 * (w'Aw - 2b'w + mu |w|^2)``. Parameters are
plain 1-D float64 arrays; :class:`ParamShape` carries the layout (a flat
vector, or a row-major ``classes x features`` matrix followed by a length
``classes`` bias).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import optimize
from scipy.sparse import linalg as sparse_linalg
from scipy.special import logsumexp

from fedsim import _pykernels
from fedsim.errors import DimensionError, NumericError

WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class ParamShape:
    size: int
    n_classes: int | None = None
    n_features: int | None = None

    @classmethod
    def flat(cls, d: int) -> "ParamShape":
        return cls(size=int(d))

    @classmethod
    def logistic(cls, n_classes: int, n_features: int) -> "ParamShape":
        return cls(n_classes * n_features + n_classes, n_classes, n_features)

    @property
    def is_logistic(self) -> bool:
        return self.n_classes is not None

    def zeros(self) -> np.ndarray:
        return np.zeros(self.size)

    def check(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        if w.ndim != 1 or w.shape[0] != self.size:
            raise DimensionError(f"expected parameter vector of length {self.size}, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise NumericError("parameter vector has non-finite entries")
        return w

    def unpack(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Split a logistic parameter vector into (weight matrix, bias) views."""
        if not self.is_logistic:
            raise DimensionError("unpack() needs a logistic shape")
        c, f = self.n_classes, self.n_features
        return w[: c * f].reshape(c, f), w[c * f:]

    def pack(self, W: np.ndarray, bias: np.ndarray) -> np.ndarray:
        return np.concatenate([np.asarray(W, dtype=np.float64).ravel(), np.asarray(bias, dtype=np.float64)])


class Minimum(NamedTuple):
    w: np.ndarray
    value: float
    # True when the Hessian is singular and ``w`` is the minimum-norm minimizer
    rank_deficient: bool = False


def _finite(value: float, what: str) -> float:
    if not np.isfinite(value):
        raise NumericError(f"non-finite {what}")
    return float(value)


class LogisticObjective:
    """Mean softmax cross-entropy over one device's samples plus ``lam * |w|^2``.

    ``scale`` multiplies the whole objective (used for the rescaled locals
    ``p_k N F_k``). The regularizer covers the bias block as well.
    """

    def __init__(self, features, labels, n_classes: int, lam: float, scale: float = 1.0):
        X = np.ascontiguousarray(features, dtype=np.float64)
        y = np.ascontiguousarray(labels, dtype=np.int64)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise DimensionError("features must be (n, f) and labels (n,)")
        if X.shape[0] == 0:
            raise ValueError("device dataset is empty")
        if lam <= 0:
            raise ValueError("lam must be positive")
        if y.min() < 0 or y.max() >= n_classes:
            raise ValueError(f"labels must lie in [0, {n_classes})")
        self.X = X
        self.y = y
        self.n_classes = int(n_classes)
        self.lam = float(lam)
        self.scale = float(scale)
        self.shape = ParamShape.logistic(self.n_classes, X.shape[1])

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    def scaled(self, factor: float) -> "LogisticObjective":
        return LogisticObjective(self.X, self.y, self.n_classes, self.lam, self.scale * factor)

    def _probs(self, w):
        W, bias = self.shape.unpack(w)
        z = self.X @ W.T + bias
        return z, z - logsumexp(z, axis=1, keepdims=True)

    def loss(self, w) -> float:
        w = self.shape.check(w)
        _, logp = self._probs(w)
        ce = -logp[np.arange(self.n_samples), self.y].mean()
        return _finite(self.scale * (ce + self.lam * (w @ w)), "logistic loss")

    def grad(self, w) -> np.ndarray:
        w = self.shape.check(w)
        return self.batch_grad(w, np.arange(self.n_samples))

    def batch_grad(self, w, idx) -> np.ndarray:
        """Gradient of the mean loss over the samples ``idx`` plus the regularizer."""
        g = _pykernels.logistic_batch_grad(self.X, self.y, self.n_classes, self.lam, self.scale, w, np.asarray(idx))
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite logistic gradient")
        return g

    def draw_batches(self, rng: np.random.Generator, n_steps: int, batch_size: int | None) -> np.ndarray:
        """Index matrix for ``n_steps`` minibatches of ``min(batch_size, n)``; ``None`` means full batch."""
        if batch_size is None:
            return np.tile(np.arange(self.n_samples, dtype=np.int64), (n_steps, 1))
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        # uniform with replacement; devices smaller than the batch use their size
        b = min(batch_size, self.n_samples)
        return rng.integers(0, self.n_samples, size=(n_steps, b), dtype=np.int64)

    def stochastic_grad(self, w, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        w = self.shape.check(w)
        idx = self.draw_batches(rng, 1, batch_size)[0]
        return self.batch_grad(w, idx)

    def hessp(self, w, v) -> np.ndarray:
        W, bias = self.shape.unpack(w)
        V, vb = self.shape.unpack(v)
        _, logp = self._probs(w)
        P = np.exp(logp)
        u = self.X @ V.T + vb
        q = P * (u - (P * u).sum(axis=1, keepdims=True)) / self.n_samples
        hv = np.concatenate([(q.T @ self.X).ravel(), q.sum(axis=0)])
        return self.scale * (hv + 2.0 * self.lam * v)

    def per_sample_grad_variance(self, w) -> float:
        """Mean of |grad_j - grad|^2 over samples (single-sample SGD variance)."""
        W, bias = self.shape.unpack(w)
        _, logp = self._probs(w)
        R = np.exp(logp)
        R[np.arange(self.n_samples), self.y] -= 1.0
        # |r x'|^2 + |r|^2 for each sample's data-term gradient
        sq = (R * R).sum(axis=1) * ((self.X * self.X).sum(axis=1) + 1.0)
        mean_g = self.grad(w) - self.scale * 2.0 * self.lam * w
        return float(self.scale**2 * sq.mean() - mean_g @ mean_g)

    def smoothness_bound(self) -> float:
        # softmax Hessian block is <= I/2, so H <= 0.5 * cov(z) (x) I + 2 lam I
        Z = np.hstack([self.X, np.ones((self.n_samples, 1))])
        top = np.linalg.eigvalsh(Z.T @ Z / self.n_samples)[-1]
        return self.scale * (0.5 * top + 2.0 * self.lam)

    def strong_convexity(self) -> float:
        return self.scale * 2.0 * self.lam

    def local_minimum(self, gtol: float = 1e-9) -> Minimum:
        return _newton_minimize(self, self.shape.zeros(), gtol)


class QuadraticObjective:
    """``scale * 0.5 * (w'Aw - 2 b'w + mu |w|^2)`` with symmetric PSD ``A``.

    ``noise_sigma`` injects zero-mean Gaussian noise into stochastic
    gradients with ``E|noise|^2 = noise_sigma^2``; exact gradients otherwise.
    """

    def __init__(self, A, b, mu: float = 0.0, scale: float = 1.0, noise_sigma: float = 0.0, check_spectrum=None):
        A = np.ascontiguousarray(A, dtype=np.float64)
        b = np.ascontiguousarray(b, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or b.shape != (A.shape[0],):
            raise DimensionError("A must be square and b conformant")
        if not np.allclose(A, A.T, rtol=0, atol=1e-12):
            raise ValueError("A must be symmetric")
        if mu < 0:
            raise ValueError("mu must be non-negative")
        if check_spectrum is not None:
            lo, hi = check_spectrum
            ev = np.linalg.eigvalsh(A)
            if ev[0] < lo - 1e-10 or ev[-1] > hi + 1e-10:
                raise ValueError(f"eigenvalues of A must lie in [{lo}, {hi}]")
        self.A = A
        self.b = b
        self.mu = float(mu)
        self.scale = float(scale)
        self.noise_sigma = float(noise_sigma)
        self.H = A + self.mu * np.eye(A.shape[0])
        self.shape = ParamShape.flat(A.shape[0])

    def scaled(self, factor: float) -> "QuadraticObjective":
        return QuadraticObjective(self.A, self.b, self.mu, self.scale * factor, self.noise_sigma)

    def loss(self, w) -> float:
        w = self.shape.check(w)
        return _finite(self.scale * 0.5 * (w @ self.A @ w - 2.0 * self.b @ w + self.mu * (w @ w)), "quadratic loss")

    def grad(self, w) -> np.ndarray:
        w = self.shape.check(w)
        return self.scale * (self.H @ w - self.b)

    def stochastic_grad(self, w, batch_size: int = 1, rng: np.random.Generator | None = None) -> np.ndarray:
        g = self.grad(w)
        if self.noise_sigma > 0.0:
            if rng is None:
                raise ValueError("noisy quadratic needs an rng")
            g = g + rng.normal(0.0, self.noise_sigma / np.sqrt(self.shape.size), size=self.shape.size)
        return g

    def hessian(self) -> np.ndarray:
        return self.scale * self.H

    def smoothness_bound(self) -> float:
        return float(np.linalg.eigvalsh(self.hessian())[-1])

    def strong_convexity(self) -> float:
        return float(max(np.linalg.eigvalsh(self.hessian())[0], 0.0))

    def local_minimum(self) -> Minimum:
        H = self.hessian()
        rhs = self.scale * self.b
        w, rank_deficient = _solve_psd(H, rhs)
        return Minimum(w, self.loss(w), rank_deficient)


def _solve_psd(H, rhs, rtol=1e-10):
    """Solve ``H w = rhs`` for symmetric PSD ``H``; min-norm solution if singular."""
    ev, V = np.linalg.eigh(H)
    keep = ev > rtol * max(ev[-1], 1.0)
    if keep.all():
        return np.linalg.solve(H, rhs), False
    coef = V.T @ rhs
    if np.any(np.abs(coef[~keep]) > 1e-8 * max(1.0, np.abs(rhs).max())):
        raise NumericError("quadratic is unbounded below (b outside the range of A)")
    w = V[:, keep] @ (coef[keep] / ev[keep])
    return w, True


def _newton_minimize(obj, w0, gtol):
    res = optimize.minimize(
        obj.loss, w0, jac=obj.grad, hessp=obj.hessp, method="trust-ncg",
        options={"gtol": gtol, "maxiter": 1000},
    )
    w = res.x
    g = obj.grad(w)
    gnorm = np.linalg.norm(g)
    # trust-ncg can stall just above a tight gtol; finish with plain Newton steps
    for _ in range(10):
        if gnorm <= gtol:
            break
        H = sparse_linalg.LinearOperator((w.size, w.size), matvec=lambda v, w=w: obj.hessp(w, v))
        step, _ = sparse_linalg.cg(H, -g, rtol=1e-14, maxiter=10 * w.size)
        w = w + step
        g = obj.grad(w)
        gnorm = np.linalg.norm(g)
    if gnorm > gtol:
        raise NumericError(f"minimization stopped at |grad| = {gnorm:.3g} > {gtol:g}: {res.message}")
    return Minimum(w, obj.loss(w), False)


class _PooledLogistic:
    """All devices' samples stacked, each weighted by ``p_k scale_k / n_k``."""

    def __init__(self, locals_, p):
        self.shape = locals_[0].shape
        self.X = np.vstack([obj.X for obj in locals_])
        self.y = np.concatenate([obj.y for obj in locals_])
        self.sw = np.concatenate([np.full(obj.n_samples, pk * obj.scale / obj.n_samples)
                                  for pk, obj in zip(p, locals_)])
        self.reg = float(sum(pk * obj.scale * obj.lam for pk, obj in zip(p, locals_)))

    def _logp(self, w):
        W, bias = self.shape.unpack(w)
        z = self.X @ W.T + bias
        z -= z.max(axis=1, keepdims=True)
        z -= np.log(np.exp(z).sum(axis=1, keepdims=True))
        return z

    def loss(self, w) -> float:
        logp = self._logp(w)
        ce = -(self.sw * logp[np.arange(self.y.size), self.y]).sum()
        return _finite(ce + self.reg * (w @ w), "logistic loss")

    def grad(self, w) -> np.ndarray:
        R = np.exp(self._logp(w))
        R[np.arange(self.y.size), self.y] -= 1.0
        R *= self.sw[:, None]
        return np.concatenate([(R.T @ self.X).ravel(), R.sum(axis=0)]) + 2.0 * self.reg * w

    def hessp(self, w, v) -> np.ndarray:
        P = np.exp(self._logp(w))
        V, vb = self.shape.unpack(v)
        u = self.X @ V.T + vb
        q = self.sw[:, None] * P * (u - (P * u).sum(axis=1, keepdims=True))
        return np.concatenate([(q.T @ self.X).ravel(), q.sum(axis=0)]) + 2.0 * self.reg * v


class GlobalObjective:
    """``F(w) = sum_k p_k F_k(w)``."""

    def __init__(self, locals_: Sequence, weights):
        self.locals = list(locals_)
        p = np.asarray(weights, dtype=np.float64)
        if p.ndim != 1 or p.shape[0] != len(self.locals) or len(self.locals) == 0:
            raise DimensionError("need one weight per local objective")
        if np.any(p < 0) or abs(p.sum() - 1.0) > WEIGHT_TOL:
            raise ValueError("weights must be non-negative and sum to 1")
        shapes = {obj.shape for obj in self.locals}
        if len(shapes) != 1:
            raise DimensionError("local objectives disagree on parameter shape")
        self.weights = p
        self.shape = self.locals[0].shape
        self._quad = None
        self._pooled = None
        if all(isinstance(obj, LogisticObjective) for obj in self.locals):
            self._pooled = _PooledLogistic(self.locals, p)
        if self.is_quadratic:
            # pooled quadratic: F(w) = 0.5 w'Hw - c'w + const, const = 0
            H = sum(pk * obj.hessian() for pk, obj in zip(p, self.locals))
            c = sum(pk * obj.scale * obj.b for pk, obj in zip(p, self.locals))
            self._quad = (H, c)

    @property
    def n_devices(self) -> int:
        return len(self.locals)

    @property
    def is_quadratic(self) -> bool:
        return all(isinstance(obj, QuadraticObjective) for obj in self.locals)

    def loss(self, w) -> float:
        w = self.shape.check(w)
        if self._quad is not None:
            H, c = self._quad
            return _finite(0.5 * (w @ H @ w) - c @ w, "quadratic loss")
        if self._pooled is not None:
            return self._pooled.loss(w)
        return float(sum(pk * obj.loss(w) for pk, obj in zip(self.weights, self.locals)))

    def grad(self, w) -> np.ndarray:
        w = self.shape.check(w)
        if self._pooled is not None:
            return self._pooled.grad(w)
        g = np.zeros(self.shape.size)
        for pk, obj in zip(self.weights, self.locals):
            g += pk * obj.grad(w)
        return g

    def hessp(self, w, v) -> np.ndarray:
        if self._pooled is not None:
            return self._pooled.hessp(w, v)
        out = np.zeros(self.shape.size)
        for pk, obj in zip(self.weights, self.locals):
            out += pk * (obj.hessian() @ v if isinstance(obj, QuadraticObjective) else obj.hessp(w, v))
        return out

    def minimum(self, gtol: float = 1e-9) -> Minimum:
        if self._quad is not None:
            H, rhs = self._quad
            w, rank_deficient = _solve_psd(H, rhs)
            return Minimum(w, self.loss(w), rank_deficient)
        return _newton_minimize(self, self.shape.zeros(), gtol)


def gamma_heterogeneity(problem: GlobalObjective, global_min: Minimum | None = None,
                        local_mins: Sequence[Minimum] | None = None) -> float:
    """Heterogeneity ``F* - sum_k p_k F_k*``; tiny negative round-off is clamped to 0."""
    if global_min is None:
        global_min = problem.minimum()
    if local_mins is None:
        local_mins = [obj.local_minimum() for obj in problem.locals]
    gamma = global_min.value - float(sum(pk * m.value for pk, m in zip(problem.weights, local_mins)))
    if gamma < -1e-9:
        raise NumericError(f"heterogeneity came out negative ({gamma:.3g}); minimizers are inaccurate")
    return max(gamma, 0.0)
