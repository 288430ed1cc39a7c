"""FedAvg round loop.

Each round broadcasts the global model, runs ``E`` local steps on the
selected devices, and aggregates with the configured scheme. Only sampled
devices are computed. Analyses usually let every device update and keep
only the sampled ones, and the two are identical because unsampled work is
thrown away.

Step indices are 0-based: step ``s`` moves iterate ``w_{s+1}`` to
``w_{s+2}`` in the usual 1-based notation where ``w_1`` is the starting
point. Round ``r`` (1-based) covers steps ``(r-1)E .. rE-1``.

Randomness is keyed by ``(seed, round)`` for device selection and by
``(seed, round, device)`` for minibatch draws. Two runs of the same
configuration therefore select the same devices and draw the same samples,
whatever the scheme or the order in which devices execute.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from fedsim import kernels
from fedsim.errors import DivergenceError, NumericError, ScheduleError
from fedsim.objectives import GlobalObjective, LogisticObjective, QuadraticObjective
from fedsim.sampling import Scheme, aggregate, select

log = logging.getLogger(__name__)

TRAJECTORY_HEADER = ("round", "step", "eta", "loss", "dist_opt", "selected")


@dataclass(frozen=True)
class LrSchedule:
    """Learning-rate schedule evaluated at 0-based step indices.

    Build with the classmethods:

    * ``constant(eta)``
    * ``inverse(eta0, period=1)``: ``eta0 / (1 + s // period)``; ``period=E``
      decays once per round.
    * ``rational(num, den, a)``: ``num / (den + a s)``.
    * ``theoretical(mu, L, E)``: ``2 / (mu (gamma + t))`` at 1-based
      ``t = s + 1``, with ``gamma = max(8L/mu, E) - 1`` (``variant="reduced"``)
      or ``max(8L/mu, E)`` (``variant="standard"``).
    """

    kind: str
    eta0: float
    period: int = 1
    den: float = 1.0
    a: float = 0.0
    mu: float = 0.0
    L: float = 0.0
    E: int = 1
    variant: str = "reduced"

    @classmethod
    def constant(cls, eta: float) -> "LrSchedule":
        return cls("constant", float(eta))

    @classmethod
    def inverse(cls, eta0: float, period: int = 1) -> "LrSchedule":
        return cls("inverse", float(eta0), period=int(period))

    @classmethod
    def rational(cls, num: float, den: float, a: float) -> "LrSchedule":
        return cls("rational", float(num), den=float(den), a=float(a))

    @classmethod
    def theoretical(cls, mu: float, L: float, E: int, variant: str = "reduced") -> "LrSchedule":
        if not mu > 0:
            raise ScheduleError("theoretical schedule needs mu > 0")
        return cls("theoretical", 2.0 / mu, mu=float(mu), L=float(L), E=int(E), variant=variant)

    def __post_init__(self):
        if self.kind not in ("constant", "inverse", "rational", "theoretical"):
            raise ScheduleError(f"unknown schedule kind {self.kind!r}")
        if not self.eta0 > 0:
            raise ScheduleError("learning rate must be positive")
        if self.kind == "inverse" and self.period < 1:
            raise ScheduleError("period must be >= 1")
        if self.kind == "rational" and (self.den <= 0 or self.a < 0):
            raise ScheduleError("rational schedule needs den > 0 and a >= 0")
        if self.kind == "theoretical":
            if not (self.mu > 0 and self.L >= self.mu):
                raise ScheduleError("theoretical schedule needs L >= mu > 0")
            if self.variant not in ("reduced", "standard"):
                raise ScheduleError("variant must be 'reduced' or 'standard'")

    @property
    def gamma(self) -> float:
        if self.kind != "theoretical":
            raise ScheduleError("gamma is only defined for the theoretical schedule")
        g = max(8.0 * self.L / self.mu, self.E)
        return g - 1.0 if self.variant == "reduced" else g

    def etas(self, start: int, count: int) -> np.ndarray:
        s = np.arange(start, start + count, dtype=np.float64)
        if self.kind == "constant":
            return np.full(count, self.eta0)
        if self.kind == "inverse":
            return self.eta0 / (1.0 + np.floor(s / self.period))
        if self.kind == "rational":
            return self.eta0 / (self.den + self.a * s)
        return 2.0 / (self.mu * (self.gamma + s + 1.0))

    def eta(self, step: int) -> float:
        return float(self.etas(step, 1)[0])

    def to_dict(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "eta": self.eta0}
        if self.kind == "inverse":
            return {"kind": "inverse", "eta0": self.eta0, "period": self.period}
        if self.kind == "rational":
            return {"kind": "rational", "num": self.eta0, "den": self.den, "a": self.a}
        return {"kind": "theoretical", "mu": self.mu, "L": self.L, "E": self.E, "variant": self.variant}


@dataclass
class RunConfig:
    scheme: Scheme
    E: int
    T: int
    schedule: LrSchedule
    K: int | None = None
    batch_size: int | None = None  # None: full local batch
    seed: int = 0
    w0: np.ndarray | None = None
    record_divergence: bool = False

    def __post_init__(self):
        self.scheme = Scheme(self.scheme)
        if self.E < 1:
            raise ValueError("E must be >= 1")
        if self.T < self.E or self.T % self.E != 0:
            raise ValueError(f"T={self.T} must be a positive multiple of E={self.E}")
        if self.scheme is not Scheme.FULL and (self.K is None or self.K < 1):
            raise ValueError("partial participation needs K >= 1")
        if self.record_divergence and self.scheme is not Scheme.FULL:
            raise ValueError("divergence recording needs full participation")

    @property
    def rounds(self) -> int:
        return self.T // self.E


@dataclass
class RoundRecord:
    round: int
    step: int
    eta: float
    loss: float
    dist_opt: float | None
    selected: tuple
    wall_clock: float = 0.0


@dataclass
class DivergenceTrace:
    """Per-step ``sum_k p_k |w_bar - w^k|^2`` from a full-participation run."""

    steps: np.ndarray
    etas: np.ndarray
    stat: np.ndarray
    E: int
    G: float

    def bound(self, G: float | None = None) -> np.ndarray:
        G = self.G if G is None else G
        return 4.0 * self.etas**2 * (self.E - 1) ** 2 * G**2


@dataclass
class RunResult:
    records: list
    w: np.ndarray
    max_grad_norm: float
    divergence: DivergenceTrace | None = None
    meta: dict = field(default_factory=dict)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    @property
    def steps(self) -> np.ndarray:
        return np.array([r.step for r in self.records])


def _selection_rng(seed, rnd):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0, rnd)))


def _device_rng(seed, rnd, device):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, rnd, device)))


def _run_steps(obj, w, etas, batches=None, rng=None, batch_size=None):
    """E local steps; returns (w, max squared gradient norm)."""
    if isinstance(obj, QuadraticObjective) and obj.noise_sigma == 0.0:
        return kernels.quad_steps(obj.H, obj.b, obj.scale, w, etas)
    if isinstance(obj, LogisticObjective):
        return kernels.logistic_steps(obj.X, obj.y, obj.n_classes, obj.lam, obj.scale, w, etas, batches)
    max_gsq = 0.0
    w = np.array(w, dtype=np.float64)
    for eta in etas:
        g = obj.stochastic_grad(w, batch_size or 1, rng)
        max_gsq = max(max_gsq, float(g @ g))
        w = w - eta * g
    return w, max_gsq


def _first_bad_step(obj, w, etas, batches, rng_factory, batch_size):
    for j in range(1, len(etas) + 1):
        sub = None if batches is None else batches[:j]
        wj, gsq = _run_steps(obj, w, etas[:j], sub, rng_factory(), batch_size)
        if not (np.all(np.isfinite(wj)) and math.isfinite(gsq)):
            return j - 1
    return len(etas) - 1


def _local(obj, w_start, etas, batch_size, rng_factory, t0):
    rng = None if isinstance(obj, QuadraticObjective) and obj.noise_sigma == 0.0 else rng_factory()
    batches = obj.draw_batches(rng, len(etas), batch_size) if isinstance(obj, LogisticObjective) else None
    with np.errstate(over="ignore", invalid="ignore"):
        w, gsq = _run_steps(obj, w_start, etas, batches, rng, batch_size)
        if not (np.all(np.isfinite(w)) and math.isfinite(gsq)):
            bad = t0 + _first_bad_step(obj, w_start, etas, batches, rng_factory, batch_size)
            raise DivergenceError(f"non-finite parameters at step {bad}", step=bad)
    return w, gsq


def local_update(device, w_start, E: int, schedule: LrSchedule, t0: int = 0,
                 batch_size: int | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
    """``E`` sequential (stochastic) gradient steps from ``w_start`` at steps ``t0 .. t0+E-1``."""
    w_start = device.shape.check(w_start)
    etas = schedule.etas(t0, E)
    rng = np.random.default_rng() if rng is None else rng
    state = rng.bit_generator.state

    def factory():
        g = np.random.default_rng()
        g.bit_generator.state = state
        return g

    w, _ = _local(device, w_start, etas, batch_size, factory, t0)
    return w


def transform_problem(problem: GlobalObjective):
    """Rescale locals to ``p_k N F_k`` with uniform weights; returns ``(problem, nu, varsigma)``.

    ``nu = N max_k p_k`` and ``varsigma = N min_k p_k``.
    """
    N = problem.n_devices
    p = problem.weights
    scaled = [obj.scaled(pk * N) for pk, obj in zip(p, problem.locals)]
    return GlobalObjective(scaled, np.full(N, 1.0 / N)), float(N * p.max()), float(N * p.min())


def run_fedavg(problem: GlobalObjective, cfg: RunConfig, w_star=None) -> RunResult:
    """Run ``T/E`` rounds; one :class:`RoundRecord` per round.

    Raises :class:`DivergenceError` (with the rounds recorded so far) if the
    parameters become non-finite.
    """
    N = problem.n_devices
    scheme = cfg.scheme
    K = N if scheme is Scheme.FULL else cfg.K
    if K > N:
        raise ValueError(f"K={K} exceeds N={N}")
    work, weights = problem, problem.weights
    if scheme is Scheme.SCHEME_II_TRANSFORMED:
        work, _, _ = transform_problem(problem)
        weights = work.weights
    elif scheme is Scheme.SCHEME_II and np.ptp(weights) > 1e-12:
        log.warning("scheme II on unbalanced weights has no convergence guarantee")
    if cfg.record_divergence:
        return _run_lockstep(problem, cfg, w_star)

    w = problem.shape.zeros() if cfg.w0 is None else problem.shape.check(cfg.w0).copy()
    w_star = None if w_star is None else np.asarray(w_star, dtype=np.float64)
    records, max_gsq = [], 0.0
    E, seed = cfg.E, cfg.seed
    full_sel = select(Scheme.FULL, weights, N, None)
    for rnd in range(1, cfg.rounds + 1):
        t0 = (rnd - 1) * E
        etas = cfg.schedule.etas(t0, E)
        sel = full_sel if scheme is Scheme.FULL else select(scheme, weights, K, _selection_rng(seed, rnd))
        local_models = {}
        try:
            for k in sel.distinct:
                local_models[k], gsq = _local(work.locals[k], w, etas, cfg.batch_size,
                                              lambda k=k: _device_rng(seed, rnd, k), t0)
                max_gsq = max(max_gsq, gsq)
        except DivergenceError as exc:
            raise DivergenceError(str(exc), step=exc.step, records=records) from None
        w = aggregate(scheme, sel, local_models, w, weights)
        if not np.all(np.isfinite(w)):
            raise DivergenceError(f"aggregate non-finite after round {rnd}", step=rnd * E, records=records)
        records.append(_record(problem, w, rnd, E, etas[0], sel.indices, w_star))
    return RunResult(records, w, math.sqrt(max_gsq))


def _record(problem, w, rnd, E, eta, selected, w_star):
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            loss = problem.loss(w)
        except ArithmeticError:
            loss = math.inf
    dist = None if w_star is None else float(np.linalg.norm(w - w_star))
    return RoundRecord(rnd, rnd * E, float(eta), loss, dist, tuple(selected), time.perf_counter())


def _run_lockstep(problem, cfg, w_star):
    """Full participation with all devices advanced step by step, tracking their spread."""
    N, E, seed = problem.n_devices, cfg.E, cfg.seed
    p = problem.weights
    w = problem.shape.zeros() if cfg.w0 is None else problem.shape.check(cfg.w0).copy()
    stats = np.zeros(cfg.T + 1)
    records, max_gsq = [], 0.0
    for rnd in range(1, cfg.rounds + 1):
        t0 = (rnd - 1) * E
        etas = cfg.schedule.etas(t0, E)
        rngs = [_device_rng(seed, rnd, k) for k in range(N)]
        batches = [obj.draw_batches(rngs[k], E, cfg.batch_size) if isinstance(obj, LogisticObjective) else None
                   for k, obj in enumerate(problem.locals)]
        W = np.tile(w, (N, 1))
        for i, eta in enumerate(etas):
            for k, obj in enumerate(problem.locals):
                try:
                    if isinstance(obj, LogisticObjective):
                        g = obj.batch_grad(W[k], batches[k][i])
                    else:
                        g = obj.stochastic_grad(W[k], cfg.batch_size or 1, rngs[k])
                except NumericError:
                    raise DivergenceError(f"non-finite gradient at step {t0 + i}", step=t0 + i,
                                          records=records) from None
                max_gsq = max(max_gsq, float(g @ g))
                W[k] = W[k] - eta * g
            if not np.all(np.isfinite(W)):
                raise DivergenceError(f"non-finite parameters at step {t0 + i}", step=t0 + i, records=records)
            if i < E - 1:
                w_bar = p @ W
                stats[t0 + i + 1] = float(p @ ((W - w_bar) ** 2).sum(axis=1))
        w = p @ W  # synchronisation: every device restarts from the average, spread is 0
        records.append(_record(problem, w, rnd, E, etas[0], tuple(range(N)), w_star))
    steps = np.arange(cfg.T + 1)
    trace = DivergenceTrace(steps, cfg.schedule.etas(0, cfg.T + 1), stats, E, math.sqrt(max_gsq))
    return RunResult(records, w, math.sqrt(max_gsq), trace)


def divergence_stat(result: RunResult, G: float | None = None):
    """``(stat, bound)`` arrays over steps ``0 .. T`` from a run with divergence recording."""
    if result.divergence is None:
        raise ValueError("run was not executed with record_divergence=True")
    return result.divergence.stat, result.divergence.bound(G)


@dataclass
class ScheduleReport:
    non_increasing: bool
    doubling: bool  # eta_t <= 2 eta_{t+E}
    first_step: bool  # eta at the first step <= 1/(4L)
    first_eta: float
    doubling_violations: list
    increase_steps: list

    @property
    def passed(self) -> bool:
        return self.non_increasing and self.doubling and self.first_step

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "non_increasing": self.non_increasing,
            "doubling": self.doubling,
            "first_step": self.first_step,
            "first_eta": self.first_eta,
            "doubling_violations": self.doubling_violations[:20],
            "increase_steps": self.increase_steps[:20],
        }


def validate_schedule(schedule: LrSchedule, L: float, E: int, T: int) -> ScheduleReport:
    """Check the step-size conditions used by the convergence analysis over steps ``0 .. T-1``."""
    eta = schedule.etas(0, T + E)
    increase = np.flatnonzero(eta[1:T] > eta[: T - 1]).tolist()
    doubling_bad = np.flatnonzero(eta[:T] > 2.0 * eta[E: T + E]).tolist()
    first = float(eta[0])
    return ScheduleReport(
        non_increasing=not increase,
        doubling=not doubling_bad,
        first_step=first <= 1.0 / (4.0 * L),
        first_eta=first,
        doubling_violations=doubling_bad,
        increase_steps=increase,
    )


def _fmt(x):
    return "" if x is None else format(float(x), ".17g")


def write_trajectory(records: Sequence[RoundRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRAJECTORY_HEADER)
        for r in records:
            writer.writerow([r.round, r.step, _fmt(r.eta), _fmt(r.loss), _fmt(r.dist_opt),
                             ";".join(str(i) for i in r.selected)])


def read_trajectory(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        out.append({
            "round": int(row["round"]),
            "step": int(row["step"]),
            "eta": float(row["eta"]),
            "loss": float(row["loss"]),
            "dist_opt": float(row["dist_opt"]) if row["dist_opt"] else None,
            "selected": tuple(int(i) for i in row["selected"].split(";")) if row["selected"] else (),
        })
    return out
