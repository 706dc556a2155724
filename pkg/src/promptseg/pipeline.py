"""End-to-end orchestration: phantom pools, dataset generation, budget sweeps."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .metrics import compute_case_metrics
from .refseg import RefModel, TrainConfig, predict, train
from .seeding import derive_seed
from .selection import MetricCurve, SelectionResult, select_budget
from .synthesis import LabeledSample, SynthesisConfig, generate_sample
from .volume import BinaryMask, PhantomSpec, Volume, make_phantom

WORKERS_ENV = "PROMPTSEG_WORKERS"


@dataclass(frozen=True, eq=False)
class Source:
    source_id: str
    image: Volume
    brain: BinaryMask


def default_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        n = int(env)
        if n < 1:
            raise ValueError(f"{WORKERS_ENV} must be >= 1")
        return n
    return os.cpu_count() or 1


def phantom_id(index: int) -> str:
    return f"phantom-{index:05d}"


def phantom_source(template: PhantomSpec, master_seed: int, index: int) -> Source:
    spec = replace(template, seed=derive_seed(master_seed, "phantom", index))
    image, brain = make_phantom(spec)
    return Source(phantom_id(index), image, brain)


def phantom_indices(task: str, count: int) -> list[int]:
    """Phantom pool per task: even indices for prompt, odd for validation."""
    offset = {"prompt": 0, "validation": 1}[task]
    return [2 * k + offset for k in range(count)]


def _one_sample(args) -> LabeledSample:
    task, source, cfg, seed, index = args
    return generate_sample(task, source.image, source.brain, cfg, seed, index, source.source_id)


def _pool_map(fn, items: list, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def synth_dataset(
    task: str,
    sources: Sequence[Source],
    count: int,
    cfg: SynthesisConfig,
    master_seed: int,
    workers: int = 1,
) -> list[LabeledSample]:
    """``count`` samples; sample ``k`` uses ``sources[k % len(sources)]``.

    Output does not depend on ``workers``: each sample owns its RNG stream.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if not sources:
        raise ValueError("no source volumes")
    jobs = [(task, sources[k % len(sources)], cfg, master_seed, k) for k in range(count)]
    return _pool_map(_one_sample, jobs, workers)


def mean_dice(model: RefModel, samples: Sequence[LabeledSample], prob_threshold: float = 0.5) -> float:
    scores = [
        compute_case_metrics(predict(model, s.image, s.brain, prob_threshold), s.mask).dice
        for s in samples
    ]
    return float(np.mean(scores))


@dataclass
class Sweep:
    curves: list[MetricCurve]
    checkpoints: dict[tuple[int, int], RefModel]
    selection: SelectionResult

    @property
    def selected_model(self) -> RefModel:
        return self.checkpoints[(self.selection.budget, self.selection.epoch)]


def sweep_budgets(
    train_samples: Sequence[LabeledSample],
    val_samples: Sequence[LabeledSample],
    budgets: Sequence[int],
    cfg: TrainConfig,
    on_checkpoint: Callable[[int, int, RefModel, float], None] | None = None,
    candidates: Sequence[int] | None = None,
) -> Sweep:
    """Train one model per budget (same seed), score every epoch, select.

    ``on_checkpoint(budget, epoch, model, val_dice)`` is called after each
    epoch, e.g. to write checkpoints.
    """
    curves, checkpoints = [], {}
    for budget in budgets:
        def hook(model, epoch, budget=budget):
            d = mean_dice(model, val_samples)
            checkpoints[(budget, epoch)] = model
            if on_checkpoint is not None:
                on_checkpoint(budget, epoch, model, d)
            return d

        result = train(train_samples, replace(cfg, budget=budget), hook)
        curves.append(result.curve)
    selection = select_budget(curves, candidates or tuple(budgets))
    return Sweep(curves, checkpoints, selection)
