"""
Hardware-aware NSGA-II search over (b, batch size, lr, d_model).

Objectives are (validation loss, energy per inference), both minimised.
Trials whose resource estimate exceeds the platform budget are rejected
before any training and take no part in selection. Generation g is bred
from every completed trial of generations < g with ``default_rng([seed, g])``,
so a ledger can be replayed or resumed deterministically.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import hwmodel as hw
from .errors import ContractError, LedgerError, QforgeError
from .intrt import export_int
from .model import build
from .pipeline import TaskData, task_metrics
from .train import TrainSpec, fit

log = logging.getLogger(__name__)

COMPLETED = "completed"
REJECTED = "rejected-resources"
FAILED = "failed-training"

POPULATION = 20
MUTATION_P = 0.2
LR_SIGMA = 0.3


@dataclass(frozen=True)
class SearchSpace:
    bits: tuple = (4, 6, 8)
    batch_sizes: tuple = tuple(range(16, 257, 16))
    lr_range: tuple = (1e-5, 1e-2)
    d_models: tuple = tuple(range(8, 65, 8))

    def __post_init__(self):
        lo, hi = self.lr_range
        if not 0 < lo < hi:
            raise ContractError(f"lr range must satisfy 0 < lo < hi, got {self.lr_range}")
        if not (self.bits and self.batch_sizes and self.d_models):
            raise ContractError("every categorical gene needs at least one value")

    def sample(self, rng: np.random.Generator) -> dict:
        lo, hi = self.lr_range
        return {
            "bits": int(rng.choice(self.bits)),
            "batch_size": int(rng.choice(self.batch_sizes)),
            "lr": float(math.exp(rng.uniform(math.log(lo), math.log(hi)))),
            "d_model": int(rng.choice(self.d_models)),
        }

    def contains(self, cfg: dict) -> bool:
        lo, hi = self.lr_range
        return (cfg["bits"] in self.bits and cfg["batch_size"] in self.batch_sizes
                and cfg["d_model"] in self.d_models and lo <= cfg["lr"] <= hi)

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        return cls(**{k: tuple(v) for k, v in d.items()})


@dataclass
class Trial:
    index: int
    generation: int
    config: dict
    seed: int
    status: str
    val_loss: Optional[float] = None
    metrics: dict = field(default_factory=dict)
    hw: dict = field(default_factory=dict)
    reasons: list = field(default_factory=list)
    error: Optional[str] = None

    @property
    def energy(self) -> Optional[float]:
        return self.hw.get("energy_mj")

    @property
    def objectives(self) -> tuple:
        return (self.val_loss, self.energy)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Trial":
        return cls(**d)


# -- dominance -----------------------------------------------------------------
def dominates(a, b) -> bool:
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def non_dominated_sort(objs) -> list:
    """Fronts as lists of indices (front 0 first)."""
    objs = [tuple(o) for o in objs]
    n = len(objs)
    dominated_by = [[] for _ in range(n)]
    count = [0] * n
    for i in range(n):
        for j in range(i + 1, n):
            if dominates(objs[i], objs[j]):
                dominated_by[i].append(j)
                count[j] += 1
            elif dominates(objs[j], objs[i]):
                dominated_by[j].append(i)
                count[i] += 1
    fronts = [[i for i in range(n) if count[i] == 0]]
    while fronts[-1]:
        nxt = []
        for i in fronts[-1]:
            for j in dominated_by[i]:
                count[j] -= 1
                if count[j] == 0:
                    nxt.append(j)
        fronts.append(sorted(nxt))
    return fronts[:-1]


def crowding_distance(objs, front) -> dict:
    dist = {i: 0.0 for i in front}
    if len(front) <= 2:
        return {i: math.inf for i in front}
    objs = np.asarray(objs, dtype=np.float64)
    for k in range(objs.shape[1]):
        order = sorted(front, key=lambda i: (objs[i, k], i))
        lo, hi = objs[order[0], k], objs[order[-1], k]
        dist[order[0]] = dist[order[-1]] = math.inf
        if hi == lo:
            continue
        for a, i, c in zip(order, order[1:-1], order[2:]):
            dist[i] += (objs[c, k] - objs[a, k]) / (hi - lo)
    return dist


def rank_population(objs) -> list:
    """``(front rank, -crowding)`` sort key per individual."""
    keys = [None] * len(objs)
    for r, front in enumerate(non_dominated_sort(objs)):
        cd = crowding_distance(objs, front)
        for i in front:
            keys[i] = (r, -cd[i])
    return keys


def nsga2_step(population: list, space: SearchSpace, rng: np.random.Generator, n_offspring: int = POPULATION) -> list:
    """Offspring configurations from evaluated trials (binary tournament on
    rank and crowding, uniform crossover, per-gene mutation)."""
    pop = [t for t in population if t.status == COMPLETED]
    if not pop:
        return [space.sample(rng) for _ in range(n_offspring)]
    keys = rank_population([t.objectives for t in pop])
    # survivors: best POPULATION by (rank, crowding), index order breaks ties
    order = sorted(range(len(pop)), key=lambda i: (keys[i], i))[:POPULATION]
    parents = [pop[i] for i in order]
    pkeys = [keys[i] for i in order]

    def tournament():
        a, b = rng.integers(len(parents), size=2)
        return parents[a] if pkeys[a] <= pkeys[b] else parents[b]

    lo, hi = space.lr_range
    genes = {"bits": space.bits, "batch_size": space.batch_sizes, "d_model": space.d_models}
    children = []
    for _ in range(n_offspring):
        pa, pb = tournament().config, tournament().config
        child = {g: (pa[g] if rng.random() < 0.5 else pb[g]) for g in ("bits", "batch_size", "lr", "d_model")}
        for g, values in genes.items():
            if rng.random() < MUTATION_P:
                child[g] = int(rng.choice(values))
        if rng.random() < MUTATION_P:
            child["lr"] = float(min(hi, max(lo, child["lr"] * math.exp(rng.normal(0.0, LR_SIGMA)))))
        child = {"bits": int(child["bits"]), "batch_size": int(child["batch_size"]),
                 "lr": float(child["lr"]), "d_model": int(child["d_model"])}
        children.append(child)
    return children


# -- Pareto front ------------------------------------------------------------------
@dataclass
class ParetoFront:
    members: list
    empty: bool = False

    def __len__(self):
        return len(self.members)


def pareto_indices(points) -> list:
    """Indices of non-dominated points (minimisation, two objectives);
    exact duplicates of a non-dominated point are all kept."""
    pts = [(float(a), float(b)) for a, b in points]
    order = sorted(range(len(pts)), key=lambda i: (pts[i][0], pts[i][1], i))
    keep, best = [], math.inf
    i = 0
    while i < len(order):
        j = i
        loss = pts[order[i]][0]
        while j < len(order) and pts[order[j]][0] == loss:
            j += 1
        group = order[i:j]
        e_min = pts[group[0]][1]
        if e_min < best:
            keep.extend(g for g in group if pts[g][1] == e_min)
            best = e_min
        i = j
    return sorted(keep)


def pareto_front(ledger: list) -> ParetoFront:
    done = [t for t in ledger if t.status == COMPLETED]
    if not done:
        return ParetoFront([], empty=True)
    idx = pareto_indices([t.objectives for t in done])
    return ParetoFront([done[i] for i in idx])


# -- ledger ------------------------------------------------------------------
def read_ledger(path) -> list:
    path = Path(path)
    if not path.exists():
        return []
    trials = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            if line.strip():
                try:
                    trials.append(Trial.from_dict(json.loads(line)))
                except (json.JSONDecodeError, TypeError) as exc:
                    raise LedgerError(f"{path}:{ln}: malformed ledger line") from exc
    return trials


def trial_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


# -- evaluation ----------------------------------------------------------------
@dataclass
class SearchSettings:
    max_epochs: int = 100
    patience: int = 10


def evaluate_trial(data: TaskData, cfg: dict, index: int, generation: int, seed: int,
                   platform: hw.PlatformSpec, settings: SearchSettings) -> Trial:
    """Hardware filter, then QAT, integer export and metrics."""
    mcfg = data.model_config(cfg["d_model"], cfg["bits"])
    est = hw.estimate(mcfg, platform)
    trial = Trial(index, generation, dict(cfg), seed, REJECTED)
    if not est.deployable:
        trial.hw = {"luts": est.luts, "dsps": est.dsps, "brams": est.brams}
        trial.reasons = est.reasons
        return trial
    spec = TrainSpec(batch_size=cfg["batch_size"], lr=cfg["lr"], max_epochs=settings.max_epochs,
                     patience=settings.patience, loss=data.loss, seed=seed)
    try:
        fr = fit(build(mcfg, seed, mode="qat"), data.train, data.val, spec)
        im = export_int(fr.model)
        metrics = task_metrics(data, lambda X: _predict_int(im, X))
    except (QforgeError, FloatingPointError, ValueError) as exc:
        trial.status, trial.error = FAILED, f"{type(exc).__name__}: {exc}"
        return trial
    est = hw.estimate(im, platform)
    trial.status = COMPLETED
    trial.val_loss = float(fr.best_val_loss)
    trial.metrics = {"best_epoch": fr.best_epoch, "epochs": len(fr.history), **metrics}
    trial.hw = est.to_dict()
    return trial


def _predict_int(im, X):
    from .intrt import predict_int

    return predict_int(im, X)


def run_search(space: SearchSpace, data: TaskData, platform: hw.PlatformSpec, n_trials: int, seed: int = 0,
               ledger_path=None, settings: Optional[SearchSettings] = None,
               evaluate: Optional[Callable] = None, population: int = POPULATION) -> list:
    """Run (or resume) a search; returns the full ledger in trial order."""
    if n_trials < 1:
        raise ContractError(f"n_trials must be >= 1, got {n_trials}")
    settings = settings or SearchSettings()
    evaluate = evaluate or (lambda cfg, t, g, s: evaluate_trial(data, cfg, t, g, s, platform, settings))
    done = read_ledger(ledger_path) if ledger_path else []
    ledger = []
    t = 0
    gen = 0
    while t < n_trials:
        rng = np.random.default_rng([seed, gen])
        count = min(population, n_trials - t)
        configs = nsga2_step(ledger, space, rng, population) if gen else [space.sample(rng) for _ in range(population)]
        for cfg in configs[:count]:
            if t < len(done):
                prev = done[t]
                if prev.index != t or prev.config != cfg:
                    raise LedgerError(f"ledger trial {t} does not match this seed/space; refusing to resume")
                trial = prev
            else:
                trial = evaluate(cfg, t, gen, trial_seed(seed, t))
                if ledger_path:
                    with open(ledger_path, "a") as fh:
                        fh.write(trial.to_json() + "\n")
            log.info("trial %d gen %d %s %s", t, gen, trial.status, cfg)
            ledger.append(trial)
            t += 1
        gen += 1
    return ledger
