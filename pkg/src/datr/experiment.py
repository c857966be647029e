"""Source-only vs self-training vs self-training + feature aggregation on the synthetic benchmark.

All three arms of one seed share the source-only warm-up; they then
continue from the same weights, optimiser moments and random stream:

* ``source``: more source-only epochs (same total step count);
* ``ss``: adaptation with ``lambda_f = 0``;
* ``cfa``: adaptation with both target terms.
"""

from __future__ import annotations

import copy
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .model import build_model, variant_config
from .numkit.rng import Rng
from .synthdata import DatasetConfig, in_memory_dataset
from .uda import Split, TrainConfig, Trainer, evaluate_miou

ARMS = ("source", "ss", "cfa")


@dataclass
class ToyConfig:
    data: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3))
    variant: str = "M"
    seeds: tuple = (0, 1, 2)


@dataclass
class ArmResult:
    arm: str
    seed: int
    miou: float
    log: list
    seed_seconds: float = 0.0     # wall time of the whole seed (warm-up and all arms)


def _arm_config(base: TrainConfig, arm: str) -> TrainConfig:
    if arm == "source":
        return replace(base, epochs_source=base.total_epochs, epochs_adapt=0)
    if arm == "ss":
        return replace(base, lambda_f=0.0)
    return base


def run_seed(cfg: ToyConfig, seed: int, data=None, arms=ARMS) -> list[ArmResult]:
    t0 = time.perf_counter()
    data = data if data is not None else in_memory_dataset(replace(cfg.data, seed=seed))
    src = Split(*data[("train", "source")])
    tgt = Split(data[("train", "target")][0])
    val = Split(*data[("val", "target")])
    tcfg = replace(cfg.train, seed=seed)
    model = build_model(variant_config(cfg.variant, cfg.data.num_classes), Rng(seed).spawn(7))

    warm = Trainer(model, src, tgt, tcfg)
    log = [warm.run_epoch() for _ in range(tcfg.epochs_source)]
    results = []
    for arm in arms:
        t = Trainer(copy.deepcopy(model), src, tgt, _arm_config(tcfg, arm))
        t.load_state(warm.state(), warm.optim.state_arrays(), None)
        arm_log = list(log) + list(t.run())
        results.append(ArmResult(arm, seed, evaluate_miou(t.model, val, tcfg.batch_size), arm_log))
    for r in results:
        r.seed_seconds = time.perf_counter() - t0
    return results


def _run_seed_job(args):
    cfg, seed = args
    return run_seed(cfg, seed)


def run_toy(cfg: ToyConfig, workers: int | None = None) -> list[ArmResult]:
    """Run every seed, in worker processes when more than one CPU is available."""
    workers = workers or min(len(cfg.seeds), os.cpu_count() or 1)
    if workers <= 1:
        out = [r for s in cfg.seeds for r in run_seed(cfg, s)]
    else:
        with ProcessPoolExecutor(workers) as pool:
            out = [r for rs in pool.map(_run_seed_job, [(cfg, s) for s in cfg.seeds]) for r in rs]
    return out


def summarize(results: list[ArmResult]) -> dict:
    """Mean target mIoU per arm and first/last adaptation-epoch centre distance of the CFA arm."""
    summary = {}
    for arm in ARMS:
        vals = [r.miou for r in results if r.arm == arm]
        if vals:
            summary[f"miou_{arm}"] = float(np.mean(vals))
    cfa = [r for r in results if r.arm == "cfa"]
    if cfa:
        dists = [[row["center_dist"] for row in r.log if row["phase"] == "adapt"] for r in cfa]
        summary["center_dist_first"] = float(np.mean([d[0] for d in dists]))
        summary["center_dist_last"] = float(np.mean([d[-1] for d in dists]))
    return summary
