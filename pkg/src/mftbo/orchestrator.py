"""Continual optimization loop over a stream of network tasks.

One experiment is a sequence of tasks handled in order. Per task the loop
seeds the surrogate with a small random design, then alternates: fit each
particle's posterior, score the candidate grid, query the best affordable
(candidate, fidelity) pair, absorb the noisy observation, and refresh the
particles, until no fidelity fits in the remaining budget. Strategies
differ only in whether particles survive across tasks and in the weight
given to the transferable-knowledge term:

* ``gibbon``            fresh particles every task, weight 0
* ``continual-gibbon``  particles carried across tasks, weight 0
* ``mft-mes``           particles carried, weight beta > 0

Randomness is organized as named streams derived from one master seed via
``SeedSequence(master, spawn_key=(replicate, task, stream, ...))`` so any
component can be re-run in isolation and full sequences are reproducible
bit for bit.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import simulator as sim
from .acquisition import (AcquisitionConfig, BudgetExhausted, CostModel,
                          gumbel_sample_max_values, select_next)
from .gp import (FeatureMapConfig, ObservationRecord, TaskDataset,
                 fit_posterior)
from .grid import CandidateGrid, InputPoint
from .svgd import (ParticleEnsemble, PriorModel, SVGDConfig, advance_task,
                   init_ensemble, kde_prior_from, update_posterior_particles)

GIBBON = "gibbon"
CONTINUAL_GIBBON = "continual-gibbon"
MFT_MES = "mft-mes"
STRATEGY_NAMES = (GIBBON, CONTINUAL_GIBBON, MFT_MES)

# named sub-streams of the master seed
STREAM_TOPOLOGY = 0
STREAM_INIT = 1
STREAM_NOISE = 2
STREAM_GUMBEL = 3
STREAM_PARTICLES = 4


@dataclass(frozen=True)
class Strategy:
    variant: str
    beta: float = 0.0

    def __post_init__(self) -> None:
        if self.variant not in STRATEGY_NAMES:
            raise ValueError(f"unknown strategy {self.variant!r}")
        if self.variant in (GIBBON, CONTINUAL_GIBBON) and self.beta != 0.0:
            raise ValueError(f"{self.variant} forces beta = 0")
        if self.variant == MFT_MES and not self.beta > 0.0:
            raise ValueError("mft-mes requires beta > 0")

    @property
    def carries_ensemble(self) -> bool:
        return self.variant != GIBBON


@dataclass
class BudgetLedger:
    limit: float
    spent: float = 0.0
    rounds: int = 0

    @property
    def remaining(self) -> float:
        return self.limit - self.spent

    def charge(self, cost: float) -> None:
        if self.spent + cost > self.limit:
            raise BudgetExhausted(f"cost {cost:g} exceeds remaining {self.remaining:g}")
        self.spent += cost
        self.rounds += 1


@dataclass(frozen=True)
class RoundRecord:
    t: int
    x: InputPoint
    m: int
    cost: float
    y: float
    best_ratio_so_far: float


@dataclass
class TaskResult:
    per_round: list[RoundRecord]
    final_ratio: float
    oracle_value: float
    oracle_x: InputPoint
    init_ratio: float

    @property
    def rounds(self) -> int:
        return len(self.per_round)

    @property
    def spent(self) -> float:
        return sum(r.cost for r in self.per_round)


@dataclass(frozen=True)
class LoopConfig:
    init_observations: int = 10
    charge_init_to_budget: bool = False
    noise_variance: float = 0.83
    particle_init_std: float = 0.5
    n_max_value_samples: int = 10
    sqrt_variance_factor: bool = False


class Standardizer:
    """Affine map fitted on the initial-design values; the surrogate sees
    standardized observations, callers see raw ones."""

    def __init__(self, mean: float, scale: float):
        self.mean = mean
        self.scale = scale

    @classmethod
    def fit(cls, values) -> "Standardizer":
        v = np.asarray(values, dtype=float)
        return cls(float(v.mean()), float(max(v.std(), 1e-6)))

    def transform(self, y: float) -> float:
        return (y - self.mean) / self.scale

    def inverse(self, y_std: float) -> float:
        return y_std * self.scale + self.mean


def derived_seed(master_seed: int, *key: int) -> int:
    ss = np.random.SeedSequence(master_seed, spawn_key=tuple(key))
    return int(ss.generate_state(1, np.uint64)[0])


def stream_rng(master_seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(master_seed, spawn_key=tuple(key)))


@dataclass(frozen=True)
class TaskSeeds:
    """All randomness for one (replicate, task) pair, keyed by stream."""

    master_seed: int
    replicate: int
    task_index: int

    def topology_seed(self) -> int:
        return derived_seed(self.master_seed, self.replicate, self.task_index,
                            STREAM_TOPOLOGY)

    def init_rng(self) -> np.random.Generator:
        return stream_rng(self.master_seed, self.replicate, self.task_index,
                          STREAM_INIT)

    def noise_rng(self, round_index: int) -> np.random.Generator:
        return stream_rng(self.master_seed, self.replicate, self.task_index,
                          STREAM_NOISE, round_index)

    def gumbel_rng(self, round_index: int, particle: int) -> np.random.Generator:
        return stream_rng(self.master_seed, self.replicate, self.task_index,
                          STREAM_GUMBEL, round_index, particle)


def particle_base_seed(master_seed: int, replicate: int) -> int:
    return derived_seed(master_seed, replicate, 0, STREAM_PARTICLES)


# ---------------------------------------------------------------------------
# task / oracle caching


def _config_key(cfg: sim.TopologyConfig, s_max: int, grid: CandidateGrid) -> str:
    payload = {
        "topology": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
        "s_max": s_max,
        "grid": [(p.p0_dbm, p.alpha) for p in grid.points],
    }
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:24]


class SimulationCache:
    """Per-task objective tables and oracle optima, in memory and on disk.

    Disk entries are keyed by (task seed, topology-config hash, grid hash)
    so stale files can never be confused with a different setup. The table
    file regenerates everything the loop needs without redrawing the
    channel pool.
    """

    def __init__(self, disk_dir: str | Path | None = None):
        self.disk_dir = Path(disk_dir) if disk_dir is not None else None
        if self.disk_dir is not None:
            self.disk_dir.mkdir(parents=True, exist_ok=True)
        self._tasks: dict[tuple, sim.TaskInstance] = {}

    def task_for(self, seed: int, cfg: sim.TopologyConfig, s_max: int,
                 grid: CandidateGrid) -> sim.TaskInstance:
        key = (seed, _config_key(cfg, s_max, grid))
        task = self._tasks.get(key)
        if task is None:
            task = sim.generate_task(seed, cfg, s_max)
            self._attach_table(task, grid, key[1])
            self._tasks[key] = task
        return task

    def _attach_table(self, task: sim.TaskInstance, grid: CandidateGrid,
                      cfg_hash: str) -> None:
        path = None
        if self.disk_dir is not None:
            path = self.disk_dir / f"table_{task.seed}_{cfg_hash}.npz"
            if path.exists():
                with np.load(path) as payload:
                    table = payload["table"]
                if table.shape == (len(grid), task.pool_size):
                    task._sse_table = table
                    task._table_grid_id = id(grid)
                    return
        sim.per_sample_sse_table(task, grid)
        if path is not None:
            tmp = path.with_suffix(".tmp.npz")
            np.savez_compressed(tmp, table=task._sse_table)
            tmp.replace(path)

    def oracle_for(self, task: sim.TaskInstance, grid: CandidateGrid,
                   cost: CostModel) -> tuple[InputPoint, float]:
        return sim.oracle_optimum(task, grid, cost)


class OracleCache:
    """JSON sidecar of oracle optima keyed by (seed, config hash, grid hash)."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._entries: dict[str, dict] = {}
        if self.path.exists():
            self._entries = json.loads(self.path.read_text())

    def key(self, seed: int, cfg: sim.TopologyConfig, s_max: int,
            grid: CandidateGrid) -> str:
        return f"{seed}_{_config_key(cfg, s_max, grid)}"

    def get(self, key: str):
        entry = self._entries.get(key)
        if entry is None:
            return None
        return entry["p0_dbm"], entry["alpha"], entry["f_star"]

    def put(self, key: str, x: InputPoint, f_star: float) -> None:
        self._entries[key] = {"p0_dbm": x.p0_dbm, "alpha": x.alpha,
                              "f_star": f_star}
        self.path.write_text(json.dumps(self._entries, sort_keys=True, indent=1))


# ---------------------------------------------------------------------------
# per-task loop


def init_design(task: sim.TaskInstance, grid: CandidateGrid, count: int,
                cost: CostModel, noise_variance: float,
                rng: np.random.Generator) -> list[ObservationRecord]:
    """Random initial observations, fidelities cycling from the lowest level."""
    n_levels = cost.n_levels
    if count < n_levels:
        raise ValueError("initial design must cover every fidelity level")
    indices = rng.integers(len(grid), size=count)
    records = []
    for i, gi in enumerate(indices):
        m = (i % n_levels) + 1
        x = grid[int(gi)]
        y = sim.observe(task, x, m, cost, noise_variance, rng, grid)
        records.append(ObservationRecord(x, m, y))
    return records


def optimality_ratio(task: sim.TaskInstance, queried: list[InputPoint],
                     oracle_value: float, grid: CandidateGrid,
                     cost: CostModel) -> float:
    """Best queried candidate's top-fidelity value over the task optimum."""
    if oracle_value <= 0:
        raise ValueError("oracle value must be positive")
    m_top = cost.n_levels
    best = max(sim.evaluate_fidelity(task, x, m_top, cost, grid)
               for x in queried)
    return best / oracle_value


def _decay_scale(svgd_cfg: SVGDConfig, round_index: int, horizon: int,
                 cosine_decay: bool) -> float:
    if not cosine_decay:
        return 1.0
    frac = min(round_index, horizon) / max(horizon, 1)
    return 0.5 * (1.0 + np.cos(np.pi * frac))


def run_task(task: sim.TaskInstance, grid: CandidateGrid,
             ens: ParticleEnsemble, prior: PriorModel, strategy: Strategy,
             cost: CostModel, svgd_cfg: SVGDConfig, loop_cfg: LoopConfig,
             seeds: TaskSeeds, cosine_decay: bool = True,
             ) -> tuple[TaskResult, ParticleEnsemble, TaskDataset]:
    """Budgeted optimization of one task; returns the trajectory, the
    updated ensemble, and the raw observation history."""
    oracle_x, f_star = sim.oracle_optimum(task, grid, cost)
    ledger = BudgetLedger(limit=cost.budget)
    horizon = int(np.ceil(cost.budget / min(cost.costs)))

    init_records = init_design(task, grid, loop_cfg.init_observations, cost,
                               loop_cfg.noise_variance, seeds.init_rng())
    if loop_cfg.charge_init_to_budget:
        for rec in init_records:
            ledger.charge(cost.cost_of(rec.m))
        ledger.rounds = 0
    std = Standardizer.fit([r.y for r in init_records])
    raw_data = TaskDataset(noise_variance=loop_cfg.noise_variance)
    gp_data = TaskDataset(noise_variance=loop_cfg.noise_variance / std.scale ** 2)
    for rec in init_records:
        raw_data.append(rec)
        gp_data.append(ObservationRecord(rec.x, rec.m, std.transform(rec.y)))

    m_top = cost.n_levels
    table = sim.per_sample_sse_table(task, grid)
    s_top = int(cost.cost_of(m_top))
    f_top = table[:, :s_top].mean(axis=1)

    def ratio_of(point: InputPoint) -> float:
        return float(f_top[grid.index_of(point)]) / f_star

    # the ratio tracks the optimizer's own queries; the random initial
    # design only stands in when the budget affords no query at all
    init_ratio = max(ratio_of(rec.x) for rec in init_records)
    best_ratio = -np.inf

    # particles also absorb the initial design before the first query
    ens = update_posterior_particles(ens, gp_data, prior, svgd_cfg,
                                     _decay_scale(svgd_cfg, 0, horizon,
                                                  cosine_decay))

    fidelities = list(range(1, m_top + 1))
    per_round: list[RoundRecord] = []
    t = 0
    while True:
        t += 1
        posteriors = [fit_posterior(p, gp_data) for p in ens.particles]
        samples = [gumbel_sample_max_values(post, grid.normalized,
                                            loop_cfg.n_max_value_samples,
                                            seeds.gumbel_rng(t, v), m_top)
                   for v, post in enumerate(posteriors)]
        try:
            x, m, _ = select_next(posteriors, grid, fidelities, samples, cost,
                                  strategy.beta, ledger.remaining,
                                  loop_cfg.sqrt_variance_factor)
        except BudgetExhausted:
            break
        y = sim.observe(task, x, m, cost, loop_cfg.noise_variance,
                        seeds.noise_rng(t), grid)
        ledger.charge(cost.cost_of(m))
        raw_data.append(ObservationRecord(x, m, y))
        gp_data.append(ObservationRecord(x, m, std.transform(y)))
        best_ratio = max(best_ratio, ratio_of(x))
        per_round.append(RoundRecord(t, x, m, cost.cost_of(m), y, best_ratio))
        ens = update_posterior_particles(ens, gp_data, prior, svgd_cfg,
                                         _decay_scale(svgd_cfg, t, horizon,
                                                      cosine_decay))

    final_ratio = best_ratio if per_round else init_ratio
    result = TaskResult(per_round=per_round, final_ratio=final_ratio,
                        oracle_value=f_star, oracle_x=oracle_x,
                        init_ratio=init_ratio)
    return result, ens, raw_data


# ---------------------------------------------------------------------------
# sequences


def run_sequence(n_tasks: int, strategy: Strategy, topo_cfg: sim.TopologyConfig,
                 grid: CandidateGrid, cost: CostModel, arch: FeatureMapConfig,
                 n_particles: int, svgd_cfg: SVGDConfig, loop_cfg: LoopConfig,
                 master_seed: int, replicate: int = 0,
                 cache: SimulationCache | None = None,
                 cosine_decay: bool = True) -> list[TaskResult]:
    """Run one strategy over a task stream, carrying knowledge per strategy."""
    if n_tasks < 1:
        raise ValueError("need at least one task")
    if cache is None:
        cache = SimulationCache()
    s_max = int(cost.cost_of(cost.n_levels))
    pseed = particle_base_seed(master_seed, replicate)
    ens = init_ensemble(arch, n_particles, pseed, loop_cfg.particle_init_std)
    prior = PriorModel.standard_normal(arch.dim)
    results = []
    for n in range(1, n_tasks + 1):
        seeds = TaskSeeds(master_seed, replicate, n)
        task = cache.task_for(seeds.topology_seed(), topo_cfg, s_max, grid)
        if n > 1:
            if strategy.carries_ensemble:
                prior = kde_prior_from(ens)
            else:
                ens = init_ensemble(arch, n_particles, pseed,
                                    loop_cfg.particle_init_std)
                prior = PriorModel.standard_normal(arch.dim)
        ens = advance_task(ens, n)
        result, ens, _ = run_task(task, grid, ens, prior, strategy, cost,
                                  svgd_cfg, loop_cfg, seeds, cosine_decay)
        results.append(result)
    return results
