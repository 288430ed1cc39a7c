"""Device selection and aggregation for partial participation.

Schemes:

* ``full``: every device, weights ``p_k``.
* ``scheme_i``: ``K`` iid draws from ``p`` (with replacement); plain average
  over the multiset, so a device drawn twice counts twice.
* ``scheme_ii``: uniform ``K``-subset; ``(N/K) * sum_{k in S} p_k w_k``.
  The coefficients only sum to one in expectation unless ``p`` is uniform.
* ``scheme_ii_transformed``: scheme II run on the rescaled problem whose
  weights are uniform (see :func:`fedsim.engine.transform_problem`).
* ``original``: uniform ``K``-subset; unsampled devices keep the previous
  global model, i.e. ``w_prev + sum_{k in S} p_k (w_k - w_prev)``. No
  convergence guarantee is known for it; provided for comparisons only.

Renormalised averaging with ``p_k / sum_{l in S} p_l`` is deliberately not
offered: it is biased.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, NamedTuple

import numpy as np

WEIGHT_TOL = 1e-12


class Scheme(str, Enum):
    FULL = "full"
    SCHEME_I = "scheme_i"
    SCHEME_II = "scheme_ii"
    SCHEME_II_TRANSFORMED = "scheme_ii_transformed"
    ORIGINAL = "original"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class SelectionResult:
    scheme: Scheme
    indices: tuple

    @property
    def multiplicity(self) -> dict:
        return dict(sorted(Counter(self.indices).items()))

    @property
    def distinct(self) -> list:
        return sorted(set(self.indices))


def _check_p(p):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0 or np.any(p < 0) or abs(p.sum() - 1.0) > WEIGHT_TOL:
        raise ValueError("p must be a probability vector")
    return p


def sample_with_replacement(p, K: int, rng: np.random.Generator) -> SelectionResult:
    p = _check_p(p)
    if K < 1:
        raise ValueError("K must be >= 1")
    idx = rng.choice(p.size, size=K, replace=True, p=p)
    return SelectionResult(Scheme.SCHEME_I, tuple(int(i) for i in idx))


def sample_without_replacement(N: int, K: int, rng: np.random.Generator, scheme=Scheme.SCHEME_II) -> SelectionResult:
    if not 1 <= K <= N:
        raise ValueError(f"need 1 <= K <= N, got K={K}, N={N}")
    idx = np.sort(rng.choice(N, size=K, replace=False))
    return SelectionResult(Scheme(scheme), tuple(int(i) for i in idx))


def select(scheme, p, K: int, rng: np.random.Generator) -> SelectionResult:
    scheme = Scheme(scheme)
    p = _check_p(p)
    if scheme is Scheme.FULL:
        return SelectionResult(scheme, tuple(range(p.size)))
    if scheme is Scheme.SCHEME_I:
        return sample_with_replacement(p, K, rng)
    return sample_without_replacement(p.size, K, rng, scheme)


def aggregation_coefficients(scheme, selection: SelectionResult, p) -> tuple[dict, float]:
    """``({device: coefficient}, coefficient_of_previous_global)``."""
    scheme = Scheme(scheme)
    p = _check_p(p)
    if selection.scheme is not scheme and not (
        scheme is Scheme.SCHEME_II_TRANSFORMED and selection.scheme is Scheme.SCHEME_II
    ):
        raise ValueError(f"selection made by {selection.scheme} cannot be aggregated with {scheme}")
    N, K = p.size, len(selection.indices)
    if scheme is Scheme.FULL:
        return {k: float(p[k]) for k in range(N)}, 0.0
    if scheme is Scheme.SCHEME_I:
        return {k: m / K for k, m in selection.multiplicity.items()}, 0.0
    if scheme in (Scheme.SCHEME_II, Scheme.SCHEME_II_TRANSFORMED):
        return {k: N / K * float(p[k]) for k in selection.distinct}, 0.0
    coef = {k: float(p[k]) for k in selection.distinct}
    return coef, 1.0 - sum(coef.values())


def aggregate(scheme, selection: SelectionResult, locals_: Mapping[int, np.ndarray], global_prev, p) -> np.ndarray:
    """Combine local models by the scheme's formula.

    ``locals_`` maps device index to its model; summation runs in device index
    order so results do not depend on completion order.
    """
    coef, prev_coef = aggregation_coefficients(scheme, selection, p)
    global_prev = np.asarray(global_prev, dtype=np.float64)
    out = prev_coef * global_prev if prev_coef != 0.0 else np.zeros_like(global_prev)
    for k in sorted(coef):
        wk = np.asarray(locals_[k], dtype=np.float64)
        if wk.shape != global_prev.shape:
            raise ValueError(f"local model of device {k} has shape {wk.shape}, expected {global_prev.shape}")
        out = out + coef[k] * wk
    return out


class VarianceCheck(NamedTuple):
    empirical: float
    closed_form: float
    stderr: float


def aggregation_variance_check(scheme, locals_, p, K: int, trials: int, rng: np.random.Generator) -> VarianceCheck:
    """Monte Carlo ``E|w_agg - v_bar|^2`` against its closed form, ``v_bar = sum_k p_k v_k``.

    Scheme I: ``(1/K) sum_k p_k |v_k - v_bar|^2``. Scheme II (any ``p``),
    with ``x_k = N p_k v_k``: ``(N-K) / (K (N-1)) * (1/N) sum_k |x_k - v_bar|^2``.
    """
    scheme = Scheme(scheme)
    if trials < 10_000:
        raise ValueError("use at least 10^4 trials")
    V = np.asarray(locals_, dtype=np.float64)
    p = _check_p(p)
    N = p.size
    v_bar = p @ V
    if scheme is Scheme.SCHEME_I:
        closed = float(p @ ((V - v_bar) ** 2).sum(axis=1)) / K
        idx = rng.choice(N, size=(trials, K), replace=True, p=p)
        agg = V[idx].mean(axis=1)
    elif scheme is Scheme.SCHEME_II:
        if not 1 <= K <= N or N < 2:
            raise ValueError("scheme II needs N >= 2 and 1 <= K <= N")
        X = N * p[:, None] * V
        closed = (N - K) / (K * (N - 1)) * float(((X - v_bar) ** 2).sum(axis=1).mean())
        idx = np.argsort(rng.random((trials, N)), axis=1)[:, :K]
        agg = X[idx].mean(axis=1)
    else:
        raise ValueError(f"no variance identity for {scheme}")
    sq = ((agg - v_bar) ** 2).sum(axis=1)
    return VarianceCheck(float(sq.mean()), closed, float(sq.std(ddof=1) / np.sqrt(trials)))
