"""Driver-model calibration.

IDM parameters are fitted with a real-coded genetic algorithm minimizing
the mean mixed-error objective over a car-following corpus. MOBIL
thresholds come from percentiles of observed lane-change accelerations.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import List, Mapping, Sequence, Tuple, Union

import numpy as np

from . import progress
from .driver_models import (
    GAP_FLOOR,
    IDM_RANGES,
    FollowingTrace,
    IdmParameters,
    MobilParameters,
    following_trace,
)
from .errors import CalibrationError
from .preprocess import CarFollowingSegment, LaneChangeEvent

logger = logging.getLogger(__name__)

BLEND_ALPHA = 0.5
MUTATION_SCALE = 0.05
THRESHOLD_FLOOR = 0.1


@dataclass(frozen=True)
class GaConfig:
    population: int = 64
    generations: int = 100
    crossover_rate: float = 0.9
    mutation_rate: float = 0.2
    tournament_k: int = 3
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.population < 4:
            raise CalibrationError(f"GA population must be at least 4, got {self.population}")
        if self.generations < 1:
            raise CalibrationError(f"GA generations must be at least 1, got {self.generations}")
        for name in ("crossover_rate", "mutation_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise CalibrationError(f"GA {name} must be a probability, got {getattr(self, name)}")
        if not 1 <= self.tournament_k <= self.population:
            raise CalibrationError(f"GA tournament_k must lie in [1, population], got {self.tournament_k}")
        if self.workers < 1:
            raise CalibrationError(f"GA workers must be at least 1, got {self.workers}")


@dataclass
class IdmCalibration:
    params: IdmParameters
    objective: float
    curve: List[float]
    corpus_size: int
    ga: GaConfig

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "objective": self.objective,
            "curve": list(self.curve),
            "corpus_size": self.corpus_size,
            "ranges": {k: list(v) for k, v in IDM_RANGES.items()},
            "ga": asdict(self.ga),
        }


@dataclass
class MobilCalibration:
    params: MobilParameters
    event_count: int
    gains: List[float] = field(default_factory=list)
    imposed_braking: List[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"params": self.params.to_dict(), "event_count": self.event_count}


class _TraceBatch:
    """Traces padded to a common length for vectorized simulation."""

    def __init__(self, traces: Sequence[FollowingTrace]):
        n = max(len(t) for t in traces)
        count = len(traces)
        self.dt = traces[0].dt
        self.lengths = np.array([len(t) for t in traces])
        self.leader_position = np.zeros((count, n))
        self.leader_speed = np.zeros((count, n))
        self.gap = np.ones((count, n))
        self.mask = np.zeros((count, n), dtype=bool)
        for i, t in enumerate(traces):
            k = len(t)
            self.leader_position[i, :k] = t.leader_position
            self.leader_position[i, k:] = t.leader_position[-1]
            self.leader_speed[i, :k] = t.leader_speed
            self.gap[i, :k] = t.gap
            self.mask[i, :k] = True
        self.gap0 = self.gap[:, 0].copy()
        self.v0 = np.array([t.follower_speed[0] for t in traces])
        self.mean_abs = np.array([np.mean(np.abs(t.gap)) for t in traces])


def _population_objective(population: np.ndarray, delta: float, batch: _TraceBatch) -> np.ndarray:
    """Mean mixed-error objective over the batch for each (P, 5) individual."""
    a_max, v0, s0, b, T = (population[:, i, None] for i in range(5))
    root = 2.0 * np.sqrt(a_max * b)
    x = np.zeros((len(population), len(batch.gap0)))
    v = np.broadcast_to(batch.v0, x.shape).copy()
    start = batch.leader_position[:, 0] - batch.gap0
    sq = np.zeros_like(x)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(batch.gap.shape[1]):
            gap = np.maximum(batch.leader_position[:, k] - start - x, GAP_FLOOR)
            data = batch.gap[:, k]
            sq += np.where(batch.mask[:, k], (data - gap) ** 2 / np.abs(data), 0.0)
            s_star = s0 + v * T + v * (v - batch.leader_speed[:, k]) / root
            accel = a_max * (1.0 - (v / v0) ** delta - (s_star / gap) ** 2)
            x = x + v * batch.dt
            v = np.maximum(v + accel * batch.dt, 0.0)
        per_trace = np.sqrt(sq / batch.lengths / batch.mean_abs)
    fitness = per_trace.mean(axis=1)
    return np.where(np.isfinite(fitness), fitness, np.inf)


def _chunk_objective(args: Tuple[np.ndarray, float, List[FollowingTrace]]) -> np.ndarray:
    population, delta, traces = args
    return _population_objective(population, delta, _TraceBatch(traces)) * len(traces)


class _Fitness:
    def __init__(self, traces: Sequence[FollowingTrace], delta: float, workers: int):
        self.delta = delta
        self.count = len(traces)
        self.workers = min(workers, len(traces))
        self.batch = _TraceBatch(traces) if self.workers == 1 else None
        self.chunks = [list(traces[i::self.workers]) for i in range(self.workers)]
        self.pool = ProcessPoolExecutor(self.workers) if self.workers > 1 else None

    def __call__(self, population: np.ndarray) -> np.ndarray:
        if self.pool is None:
            return _population_objective(population, self.delta, self.batch)
        parts = self.pool.map(_chunk_objective, [(population, self.delta, c) for c in self.chunks])
        return sum(parts) / self.count

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def _tournament(rng: np.random.Generator, fitness: np.ndarray, k: int) -> int:
    contenders = rng.choice(len(fitness), size=k, replace=False)
    return int(contenders[np.argmin(fitness[contenders])])


def calibrate_idm(
    corpus: Sequence[Union[CarFollowingSegment, FollowingTrace]],
    ga: GaConfig = GaConfig(),
    ranges: Mapping[str, Tuple[float, float]] = IDM_RANGES,
    delta: float = 4.0,
) -> IdmCalibration:
    """Fit IDM parameters to a car-following corpus.

    The initial population is generation 0, so the returned curve holds
    one best objective per generation. Elitism keeps the curve
    non-increasing. delta is fixed, not searched.

    Raises:
        CalibrationError: If the corpus is empty or a recorded gap is not positive.
    """
    if not corpus:
        raise CalibrationError(
            "IDM calibration needs at least one car-following segment. "
            "Check the screening report from `advscenario preprocess`."
        )
    traces = [c if isinstance(c, FollowingTrace) else following_trace(c) for c in corpus]
    bad = [i for i, t in enumerate(traces) if np.any(~(t.gap > 0))]
    if bad:
        raise CalibrationError(
            f"{len(bad)} car-following segment(s) have non-positive recorded gaps (first at index {bad[0]}). "
            "Re-run `advscenario preprocess` so they are screened out."
        )
    lo = np.array([ranges[name][0] for name in IDM_RANGES])
    hi = np.array([ranges[name][1] for name in IDM_RANGES])
    span = hi - lo
    rng = np.random.default_rng(ga.seed)

    fitness_fn = _Fitness(traces, delta, ga.workers)
    try:
        population = lo + rng.random((ga.population, len(lo))) * span
        fitness = fitness_fn(population)
        curve = [float(fitness.min())]
        with progress.track("IDM calibration", total=ga.generations) as bar:
            bar.update(1, best=curve[-1])
            for generation in range(1, ga.generations):
                elite = int(np.argmin(fitness))
                children = [population[elite].copy()]
                while len(children) < ga.population:
                    p1 = population[_tournament(rng, fitness, ga.tournament_k)]
                    p2 = population[_tournament(rng, fitness, ga.tournament_k)]
                    if rng.random() < ga.crossover_rate:
                        low = np.minimum(p1, p2)
                        d = np.abs(p1 - p2)
                        child = rng.uniform(low - BLEND_ALPHA * d, low + d + BLEND_ALPHA * d)
                    else:
                        child = p1.copy()
                    mutate = rng.random(len(child)) < ga.mutation_rate
                    child = child + mutate * rng.normal(0.0, MUTATION_SCALE * span)
                    children.append(np.clip(child, lo, hi))
                population = np.array(children)
                fitness = fitness_fn(population)
                curve.append(float(fitness.min()))
                bar.update(generation + 1, best=curve[-1])
                logger.debug("GA generation %d: best objective %.5f", generation, curve[-1])
    finally:
        fitness_fn.close()

    best = IdmParameters.from_vector(population[int(np.argmin(fitness))], delta=delta)
    logger.info("IDM calibration on %d segment(s): objective %.4f after %d generation(s)",
                len(traces), curve[-1], ga.generations)
    return IdmCalibration(best, curve[-1], curve, len(traces), ga)


def corpus_objective(params: IdmParameters, corpus: Sequence[Union[CarFollowingSegment, FollowingTrace]]) -> float:
    """Mean mixed-error objective of one parameter set over a corpus."""
    traces = [c if isinstance(c, FollowingTrace) else following_trace(c) for c in corpus]
    return float(_population_objective(params.to_vector()[None, :], params.delta, _TraceBatch(traces))[0])


def calibrate_mobil(events: Sequence[LaneChangeEvent], politeness: float = 0.5) -> MobilCalibration:
    """MOBIL thresholds from observed lane changes.

    delta_a_th is the 10th percentile of realized politeness-weighted gains;
    max_braking_imposed is the 90th percentile of the new followers'
    post-change deceleration. Both are floored at 0.1 m/s^2. Politeness is
    reported, not fitted.

    Raises:
        CalibrationError: If there are no events.
    """
    if not events:
        raise CalibrationError(
            "MOBIL calibration needs at least one lane-change event. "
            "Use the default thresholds (delta_a_th=0.2, max_braking_imposed=2.0) instead."
        )
    gains = np.array([e.context.gain(politeness) for e in events])
    braking = np.array([-e.context.a_n_tilde for e in events])
    delta_a_th = max(float(np.percentile(gains, 10)), THRESHOLD_FLOOR)
    max_braking = max(float(np.percentile(braking, 90)), THRESHOLD_FLOOR)
    params = MobilParameters(politeness, delta_a_th, max_braking)
    logger.info("MOBIL calibration on %d event(s): delta_a_th=%.3f, max_braking_imposed=%.3f (p=%.2f)",
                len(events), delta_a_th, max_braking, politeness)
    return MobilCalibration(params, len(events), gains.tolist(), braking.tolist())

