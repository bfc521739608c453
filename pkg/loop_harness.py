"""
Closed sampling loop with a simulated learner: draw triplets by weight, query
errors, feed them back, and compare online re-weighting with fixed uniform
weights across paired seeds.
"""
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import binomtest

from ccv_space import (CCVSpace, FeedbackRecord, TripletIndex, WeightMap, apply_epoch_feedback, build_space,
                       sample_triplets)
from errors import InvalidArgumentError

logger = logging.getLogger(__name__)

ONLINE = "online"
UNIFORM = "uniform"
CURVE_COLUMNS = ["seed", "scheme", "epoch", "mean_error"]


@dataclass(frozen=True)
class LoopConfig:
    """
    Settings for the sampling-loop experiment. With online=False only the
    uniform scheme runs (schemes == ("uniform",)) and no sign test is made.
    """

    epochs: int = 50
    samples: int = 256
    batch_size: int = 64
    ratio: float = 1.0
    online: bool = True
    n_objects: int = 4
    n_poses: int = 10
    viewpoint_grid: Tuple[int, int] = (4, 8)
    learn_rate: float = 0.05
    # None means noise_fraction x median base difficulty
    noise_sigma: Optional[float] = None
    noise_fraction: float = 0.1
    difficulty: str = "lognormal"
    difficulty_mu: float = math.log(0.02)
    difficulty_sigma: float = 0.75
    real_pool: int = 256
    # None means half the initial mean error
    target_error: Optional[float] = None
    threads: int = 1

    @property
    def schemes(self) -> Tuple[str, ...]:
        return (ONLINE, UNIFORM) if self.online else (UNIFORM,)


def draw_base_difficulty(size: int, config: LoopConfig, rng: np.random.Generator) -> np.ndarray:
    """Per-triplet base error: log-normal for a hard-example tail, or constant exp(mu)."""
    if config.difficulty == "lognormal":
        return rng.lognormal(config.difficulty_mu, config.difficulty_sigma, size)
    if config.difficulty == "uniform":
        return np.full(size, math.exp(config.difficulty_mu))
    raise InvalidArgumentError(f"Unknown difficulty model {config.difficulty!r}")


@dataclass(eq=False)
class SimulatedLearner:
    """
    Error model standing in for a trained network:
    error = base * exp(-k * exposures) + |N(0, noise_sigma)|.
    """

    dims: Tuple[int, int, int]
    base_difficulty: np.ndarray
    learn_rate: float
    noise_sigma: float
    exposures: np.ndarray = None
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        self.base_difficulty = np.asarray(self.base_difficulty, dtype=float).reshape(-1)
        if self.base_difficulty.size != int(np.prod(self.dims)):
            raise InvalidArgumentError("Base difficulty size does not match the space")
        if np.any(self.base_difficulty <= 0):
            raise InvalidArgumentError("Base difficulty must be positive")
        if self.learn_rate <= 0 or self.noise_sigma < 0:
            raise InvalidArgumentError("learn_rate must be > 0 and noise_sigma >= 0")
        if self.exposures is None:
            self.exposures = np.zeros(self.base_difficulty.size, dtype=np.int64)

    @classmethod
    def initialize(cls, dims: Tuple[int, int, int], config: LoopConfig, rng: np.random.Generator) -> "SimulatedLearner":
        base = draw_base_difficulty(int(np.prod(dims)), config, rng)
        noise = config.noise_sigma
        if noise is None:
            noise = config.noise_fraction * float(np.median(base))
        return cls(tuple(dims), base, config.learn_rate, noise)

    def fresh(self) -> "SimulatedLearner":
        """Same difficulties, zero exposures."""
        return SimulatedLearner(self.dims, self.base_difficulty.copy(), self.learn_rate, self.noise_sigma)

    def flat(self, triplet: TripletIndex) -> int:
        n_o, n_p, n_v = self.dims
        if not (0 <= triplet.object_id < n_o and 0 <= triplet.pose_id < n_p and 0 <= triplet.viewpoint_id < n_v):
            raise InvalidArgumentError(f"Triplet {triplet.as_tuple()} outside the learner's space {self.dims}")
        return (triplet.object_id * n_p + triplet.pose_id) * n_v + triplet.viewpoint_id

    def expected_errors(self) -> np.ndarray:
        return self.base_difficulty * np.exp(-self.learn_rate * self.exposures)

    def mean_expected_error(self) -> float:
        return float(self.expected_errors().mean())


def learner_error(learner: SimulatedLearner, triplet: TripletIndex, rng: np.random.Generator) -> float:
    """Error for one exposure of a triplet; the exposure counter is then incremented."""
    i = learner.flat(triplet)
    noise = abs(rng.normal(0.0, learner.noise_sigma)) if learner.noise_sigma > 0 else 0.0
    with learner._lock:
        error = learner.base_difficulty[i] * math.exp(-learner.learn_rate * learner.exposures[i]) + noise
        learner.exposures[i] += 1
    return float(error)


def synthetic_share(batch_size: int, ratio: float) -> int:
    """round(batch_size * ratio / (1 + ratio)), halves rounded up."""
    if batch_size < 0 or ratio < 0:
        raise InvalidArgumentError("batch_size and ratio must be non-negative")
    return int(math.floor(batch_size * ratio / (1.0 + ratio) + 0.5))


def mix_batches(real_pool: Sequence, synthetic: Sequence, batch_size: int, ratio: float,
                rng: np.random.Generator) -> List[Tuple[str, object]]:
    """
    One mixed batch: synthetic_share(batch_size, ratio) synthetic items and the
    remainder real, taken from the front of each pool and shuffled together.

    Returns:
        list: (source, item) pairs, source "real" or "syn".
    """
    n_syn = synthetic_share(batch_size, ratio)
    n_real = batch_size - n_syn
    if n_syn > len(synthetic) or n_real > len(real_pool):
        raise InvalidArgumentError(
            f"Batch needs {n_syn} synthetic and {n_real} real items, pools hold {len(synthetic)} and {len(real_pool)}")
    batch = [("syn", item) for item in synthetic[:n_syn]] + [("real", item) for item in real_pool[:n_real]]
    order = rng.permutation(len(batch))
    return [batch[i] for i in order]


@dataclass(frozen=True)
class EpochReport:
    epoch: int
    mean_error: float
    records: Tuple[FeedbackRecord, ...]
    samples_drawn: int
    mix_real: int
    mix_syn: int


def run_epoch(space: CCVSpace, weight_map: WeightMap, learner: SimulatedLearner,
              config: LoopConfig, rng: np.random.Generator, epoch: int = 0,
              real_ids: Optional[Sequence[int]] = None) -> EpochReport:
    """
    One exploration-training-feedback epoch.

    Draws config.samples triplets without replacement, queries the learner for
    each, packs them into mixed batches with real ids when ratio > 0, and
    re-weights the map when config.online is set.

    Args:
        space (CCVSpace): Space the triplets come from (only its size is used).
        weight_map (WeightMap): Sampling weights, updated in place when online.
        learner (SimulatedLearner): Learner being trained.
        config (LoopConfig): Loop settings.
        rng (np.random.Generator): Random source for sampling, noise and batch order.
        epoch (int): Epoch index.
        real_ids (Sequence[int], optional): Real sample pool, cycled across epochs.

    Returns:
        EpochReport: Feedback records, batch counts and the post-epoch mean error.
    """
    size = space.size
    if config.samples < 1 or config.samples > size:
        raise InvalidArgumentError(f"samples per epoch must be in [1, {size}], got {config.samples}")
    triplets = sample_triplets(weight_map, config.samples, rng)
    records = tuple(FeedbackRecord(t, learner_error(learner, t, rng)) for t in triplets)

    drawn = mix_real = mix_syn = 0
    if config.ratio > 0 and config.batch_size > 0:
        per_batch = synthetic_share(config.batch_size, config.ratio)
        if per_batch < 1:
            raise InvalidArgumentError(f"Batch size {config.batch_size} with ratio {config.ratio} holds no synthetic item")
        pool = list(real_ids) if real_ids is not None else list(range(config.real_pool))
        n_real = config.batch_size - per_batch
        if n_real and not pool:
            raise InvalidArgumentError("Real pool is empty")
        n_batches = math.ceil(len(triplets) / per_batch)
        cursor = epoch * n_batches * n_real
        for b in range(n_batches):
            chunk = triplets[b * per_batch:(b + 1) * per_batch]
            reals = [pool[(cursor + i) % len(pool)] for i in range(n_real)]
            cursor += n_real
            if len(chunk) == per_batch:
                batch = mix_batches(reals, chunk, config.batch_size, config.ratio, rng)
            else:
                # short last batch keeps its full real share
                batch = [("syn", t) for t in chunk] + [("real", r) for r in reals]
                batch = [batch[i] for i in rng.permutation(len(batch))]
            mix_real += sum(1 for source, _ in batch if source == "real")
            mix_syn += sum(1 for source, _ in batch if source == "syn")
            drawn += len(batch)
    else:
        drawn = mix_syn = len(records)
    if mix_syn != config.samples:
        raise InvalidArgumentError(f"Epoch fed {mix_syn} synthetic sample(s), expected {config.samples}")

    if config.online:
        apply_epoch_feedback(weight_map, records)
    return EpochReport(epoch, learner.mean_expected_error(), records, drawn, mix_real, mix_syn)


@dataclass(eq=False)
class ExperimentReport:
    curves: pd.DataFrame
    mean_curves: pd.DataFrame
    reach_epoch: Dict[str, Optional[int]]
    final_mean: Dict[str, float]
    wins: int
    ties: int
    p_value: float
    target_error: float
    final_maps: Dict[str, WeightMap]


def _run_scheme(seed: int, scheme: str, learner: SimulatedLearner, config: LoopConfig) -> Tuple[List[dict], WeightMap]:
    space = build_space(config.n_objects, config.n_poses, config.viewpoint_grid)
    weight_map = space.weight_map
    rng = np.random.default_rng([seed, 1])
    real_ids = list(np.random.default_rng([seed, 2]).permutation(config.real_pool)) if config.real_pool else []
    scheme_config = replace(config, online=scheme == ONLINE)
    rows = []
    for epoch in range(config.epochs):
        report = run_epoch(space, weight_map, learner, scheme_config, rng, epoch, real_ids or None)
        rows.append({"seed": seed, "scheme": scheme, "epoch": epoch, "mean_error": report.mean_error})
    logger.debug("seed %d %s: final mean error %.6f", seed, scheme, rows[-1]["mean_error"] if rows else float("nan"))
    return rows, weight_map


def run_experiment(config: LoopConfig, seeds: Sequence[int]) -> ExperimentReport:
    """
    Paired online-vs-uniform runs. For each seed both schemes start from the
    same learner difficulties (drawn from rng [seed, 0]) and the same sampling
    stream seed ([seed, 1]).

    Returns:
        ExperimentReport: Curves per (seed, scheme, epoch), across-seed mean
        curves, first epoch each scheme reaches the target error, and a one-sided
        sign test of online < uniform on the final-epoch errors.
    """
    if len(seeds) < 2:
        raise InvalidArgumentError(f"run_experiment needs at least 2 seeds, got {len(seeds)}")
    if len(set(int(s) for s in seeds)) != len(seeds):
        raise InvalidArgumentError(f"Seeds must be distinct, got {list(seeds)}")
    if config.epochs < 1:
        raise InvalidArgumentError(f"epochs must be >= 1, got {config.epochs}")
    dims = (config.n_objects, config.n_poses, config.viewpoint_grid[0] * config.viewpoint_grid[1])

    jobs = []
    initial_errors = []
    for seed in seeds:
        learner = SimulatedLearner.initialize(dims, config, np.random.default_rng([seed, 0]))
        initial_errors.append(learner.mean_expected_error())
        for scheme in config.schemes:
            jobs.append((int(seed), scheme, learner.fresh()))

    with ThreadPoolExecutor(max_workers=max(1, config.threads)) as pool:
        results = list(pool.map(lambda job: _run_scheme(job[0], job[1], job[2], config), jobs))

    rows = [row for scheme_rows, _ in results for row in scheme_rows]
    curves = pd.DataFrame(rows, columns=CURVE_COLUMNS)
    mean_curves = curves.groupby(["scheme", "epoch"], sort=True)["mean_error"].mean().reset_index()

    target = config.target_error if config.target_error is not None else 0.5 * float(np.mean(initial_errors))
    reach_epoch: Dict[str, Optional[int]] = {}
    final_mean: Dict[str, float] = {}
    for scheme in config.schemes:
        curve = mean_curves[mean_curves["scheme"] == scheme].sort_values("epoch")
        reached = curve[curve["mean_error"] <= target]
        reach_epoch[scheme] = int(reached["epoch"].iloc[0]) if len(reached) else None
        final_mean[scheme] = float(curve["mean_error"].iloc[-1])

    wins = ties = 0
    p_value = 1.0
    if ONLINE in config.schemes:
        last = curves[curves["epoch"] == config.epochs - 1].pivot(index="seed", columns="scheme", values="mean_error")
        diff = last[UNIFORM] - last[ONLINE]
        wins = int((diff > 0).sum())
        ties = int((diff == 0).sum())
        trials = len(diff) - ties
        if trials:
            p_value = float(binomtest(wins, trials, 0.5, alternative="greater").pvalue)

    final_maps = {}
    for (seed, scheme, _), (_, weight_map) in zip(jobs, results):
        if seed == int(seeds[0]):
            final_maps[scheme] = weight_map
    logger.info("Experiment over %d seeds: final mean %s, sign test p=%.4g", len(seeds), final_mean, p_value)
    return ExperimentReport(curves, mean_curves, reach_epoch, final_mean, wins, ties, p_value, target, final_maps)
