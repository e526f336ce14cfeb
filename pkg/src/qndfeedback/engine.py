"""Trajectories, seeded Monte Carlo batches and success statistics."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Iterable, Sequence

import numpy as np

from .metrics import MetricsRecord, compute_metrics
from .kernels import KIND_NAMES, TrajectoryKernel
from .protocol import FeedbackMode, ProtocolConfig, protocol_step
from .state import QuantumState, StateHealthError, initial_state

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.99, 0.999, 0.9999)
MASK64 = (1 << 64) - 1
GOLDEN64 = 0x9E3779B97F4A7C15
# distinct odd constant for sweep grid points
GRID64 = 0xD1B54A32D192ED03
TRACE_AUDIT_TOL = 1e-6
BROKEN_PEAK = 0.9
BROKEN_DROP = 0.5


def splitmix64(x: int) -> int:
    """SplitMix64 finalizer on a 64-bit integer."""
    z = (x + GOLDEN64) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class SeedPlan:
    """Trajectory ``i`` gets ``splitmix64(master + i * GOLDEN64 mod 2**64)``."""

    master: int

    def __post_init__(self) -> None:
        if not 0 <= self.master <= MASK64:
            raise ValueError(f"master seed must be a 64-bit unsigned integer, got {self.master}")

    def trajectory_seed(self, index: int) -> int:
        return splitmix64((self.master + index * GOLDEN64) & MASK64)

    def grid_point(self, index: int) -> SeedPlan:
        """Master seed of sweep point ``index``; point 0 keeps this master."""
        return SeedPlan((self.master + index * GRID64) & MASK64)


def trajectory_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent generators for outcome draws and for feedback-angle noise."""
    outcome_ss, noise_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(outcome_ss), np.random.default_rng(noise_ss)


class TrajectoryError(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"state health failure at step {step}: {cause}")
        self.step = step
        self.cause = cause


@dataclass(frozen=True)
class StepRecord:
    """Metrics snapshot after photon ``metrics.n`` plus that photon's outcome."""

    outcome: str
    lambda_applied: float
    metrics: MetricsRecord

    @property
    def n(self) -> int:
        return self.metrics.n


@dataclass
class TrajectoryResult:
    config: ProtocolConfig
    seed: int
    final: MetricsRecord
    series: list[StepRecord]
    counts: dict[str, int]
    broken: bool
    degenerate_steps: int
    final_trace: float
    noise_level: float = 0.0


def _is_broken(series: Sequence[StepRecord]) -> bool:
    peaked = False
    prev = None
    for rec in series:
        ov = rec.metrics.overlap
        if peaked and prev is not None and prev - ov > BROKEN_DROP:
            return True
        if ov > BROKEN_PEAK:
            peaked = True
        prev = ov
    return False


def run_trajectory(
    config: ProtocolConfig,
    seed: int | None = None,
    noise_level: float = 0.0,
    check_health: bool = True,
    reference: bool = False,
) -> TrajectoryResult:
    """Send ``config.n_photons`` photons through the protocol from the initial state.

    Metrics are recorded after every ``record_stride``-th photon and after the
    last one (a single record at ``n = 0`` when no photons are sent).
    ``noise_level`` multiplies each applied feedback angle by ``1 + r*u`` with
    ``u`` uniform on ``[-1, 1]`` drawn from a stream independent of the outcomes.

    ``reference=True`` steps with :func:`protocol_step` instead of the fast
    kernels; both consume the random streams identically.
    """
    seed = config.seed if seed is None else seed
    outcome_rng, noise_rng = trajectory_streams(seed)
    state: QuantumState = initial_state(config.basis)
    if config.eta < 1.0 and not reference:
        state = state.to_mixed()
    kernel = None if reference else TrajectoryKernel(config)
    series: list[StepRecord] = []
    counts = np.zeros(3, dtype=np.int64)
    degenerate = 0
    perturb = noise_level != 0.0 and config.policy.mode is not FeedbackMode.NONE

    if config.n_photons == 0:
        series.append(StepRecord("", 0.0, compute_metrics(state, 0)))

    done = 0
    while done < config.n_photons:
        chunk = min(config.record_stride - done % config.record_stride, config.n_photons - done)
        draws = outcome_rng.random(chunk)
        if perturb:
            # one noise draw per photon keeps the stream aligned across noise levels
            scales = 1.0 + noise_level * (2.0 * noise_rng.random(chunk) - 1.0)
        else:
            scales = np.ones(chunk)
        if kernel is not None:
            data, stats = kernel.advance(state.data, done, draws, scales)
            state = QuantumState(data)
            counts += stats.counts
            degenerate += stats.degenerate
            kind, lam = KIND_NAMES[stats.last_kind], stats.last_lambda
        else:
            for i in range(chunk):
                state, outcome = protocol_step(state, config, done + i, draws[i], scales[i])
                counts[KIND_NAMES.index(outcome.kind.value)] += 1
                degenerate += outcome.degenerate
            kind, lam = outcome.kind.value, outcome.lambda_applied
        done += chunk
        if check_health:
            try:
                state.check_health(tol=TRACE_AUDIT_TOL)
            except StateHealthError as exc:
                raise TrajectoryError(done, exc) from exc
        series.append(StepRecord(kind, lam, compute_metrics(state, done)))

    return TrajectoryResult(
        config=config,
        seed=seed,
        final=series[-1].metrics,
        series=series,
        counts=dict(zip(KIND_NAMES, map(int, counts))),
        broken=_is_broken(series),
        degenerate_steps=degenerate,
        final_trace=state.trace(),
        noise_level=noise_level,
    )


@dataclass(frozen=True)
class RunOutcome:
    """What a batch keeps from one trajectory."""

    index: int
    seed: int
    final_overlap: float
    final_c_lur: float
    broken: bool
    checkpoints: dict[int, float] = field(default_factory=dict)
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


def _run_one(args) -> RunOutcome:
    config, index, seed, noise_level, checkpoints = args
    try:
        res = run_trajectory(config, seed, noise_level=noise_level)
    except (TrajectoryError, StateHealthError, ArithmeticError, ValueError) as exc:
        log.warning("trajectory %d (seed %d) failed: %s", index, seed, exc)
        return RunOutcome(index, seed, math.nan, math.nan, False, error=str(exc))
    by_n = {rec.n: rec.metrics.overlap for rec in res.series}
    missing = [c for c in checkpoints if c not in by_n]
    if missing:
        raise ValueError(f"checkpoints {missing} are not recorded photon counts")
    return RunOutcome(
        index=index,
        seed=seed,
        final_overlap=res.final.overlap,
        final_c_lur=res.final.c_lur,
        broken=res.broken,
        checkpoints={c: by_n[c] for c in checkpoints},
    )


def wilson_interval(successes: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n <= 0:
        raise ValueError("Wilson interval needs at least one trial")
    z = NormalDist().inv_cdf(0.5 + confidence / 2)
    p = successes / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    # the bounds at k = 0 and k = n are exactly 0 and 1
    lo = 0.0 if successes == 0 else max(0.0, centre - half)
    hi = 1.0 if successes == n else min(1.0, centre + half)
    return lo, hi


def success_fraction(finals: Iterable[float], threshold: float) -> tuple[float, tuple[float, float]]:
    """Fraction of overlaps strictly above ``threshold`` and its 95% Wilson interval."""
    values = np.asarray(list(finals), dtype=float)
    if values.size == 0:
        raise ValueError("success fraction of an empty batch")
    k = int(np.count_nonzero(values > threshold))
    return k / values.size, wilson_interval(k, values.size)


@dataclass
class BatchSummary:
    config: ProtocolConfig
    master_seed: int
    thresholds: tuple[float, ...]
    runs: list[RunOutcome]
    noise_level: float = 0.0

    @property
    def n_runs(self) -> int:
        return len(self.runs)

    @property
    def completed(self) -> list[RunOutcome]:
        return [r for r in self.runs if not r.failed]

    @property
    def failed_count(self) -> int:
        return self.n_runs - len(self.completed)

    def finals(self, at: int | None = None) -> np.ndarray:
        """Final overlaps of completed runs, or overlaps at checkpoint ``at``.

        Failed runs count as unsuccessful, so they enter as 0.
        """
        out = []
        for r in self.runs:
            if r.failed:
                out.append(0.0)
            else:
                out.append(r.final_overlap if at is None else r.checkpoints[at])
        return np.array(out)

    def fractions(self, at: int | None = None) -> list[float]:
        return [success_fraction(self.finals(at), t)[0] for t in self.thresholds]

    def wilson_ci(self, at: int | None = None) -> list[tuple[float, float]]:
        return [success_fraction(self.finals(at), t)[1] for t in self.thresholds]

    @property
    def mean_final_overlap(self) -> float:
        done = self.completed
        return float(np.mean([r.final_overlap for r in done])) if done else math.nan

    @property
    def mean_final_c_lur(self) -> float:
        done = self.completed
        return float(np.mean([r.final_c_lur for r in done])) if done else math.nan

    @property
    def broken_count(self) -> int:
        return sum(r.broken for r in self.runs)


def run_batch(
    config: ProtocolConfig,
    n_runs: int,
    seed_plan: SeedPlan | None = None,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    workers: int = 1,
    noise_level: float = 0.0,
    checkpoints: Sequence[int] = (),
) -> BatchSummary:
    """Run ``n_runs`` independent trajectories and aggregate success fractions.

    Trajectory ``i`` is seeded by ``seed_plan.trajectory_seed(i)``, so results do
    not depend on ``workers`` or on completion order. ``checkpoints`` lists
    recorded photon counts at which overlaps are also kept, letting one long
    batch report several photon budgets.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    if workers < 1:
        raise ValueError("workers must be at least 1")
    plan = seed_plan or SeedPlan(config.seed)
    jobs = [
        (config, i, plan.trajectory_seed(i), noise_level, tuple(checkpoints))
        for i in range(n_runs)
    ]
    if workers == 1:
        runs = [_run_one(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_run_one, jobs))
    runs.sort(key=lambda r: r.index)
    return BatchSummary(config, plan.master, tuple(thresholds), runs, noise_level)


@dataclass(frozen=True)
class PerturbationRow:
    noise_level: float
    fraction: float
    wilson_ci: tuple[float, float]
    within_reference_ci: bool


def lambda_perturbation_study(
    config: ProtocolConfig,
    levels: Sequence[float],
    n_runs: int,
    seed_plan: SeedPlan | None = None,
    threshold: float = DEFAULT_THRESHOLDS[0],
    workers: int = 1,
) -> tuple[BatchSummary, list[PerturbationRow]]:
    """Compare F at ``threshold`` with and without relative noise on every applied angle.

    All batches share outcome seeds, so only the feedback differs between them.
    """
    if config.policy.mode is FeedbackMode.NONE:
        raise ValueError("perturbation study needs a feedback policy")
    plan = seed_plan or SeedPlan(config.seed)
    ref = run_batch(config, n_runs, plan, (threshold,), workers)
    lo, hi = ref.wilson_ci()[0]
    rows = []
    for level in levels:
        if level < 0:
            raise ValueError("noise levels must be non-negative")
        b = run_batch(config, n_runs, plan, (threshold,), workers, noise_level=level)
        frac = b.fractions()[0]
        rows.append(PerturbationRow(level, frac, b.wilson_ci()[0], lo <= frac <= hi))
    return ref, rows
