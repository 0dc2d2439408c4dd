"""Seeded random search over head architectures and training hyperparameters.

Trials are short-budget fits ranked by final validation loss (ties broken
by higher validation top-1, then lower trial id). Failed trials are kept
for the record but never outrank a completed one.
"""

import csv
import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from . import backbones, training
from .backbones import (HEAD_DROPOUT_CHOICES, HEAD_UNIT_CHOICES, FreezePolicy,
                        HeadConfig, ModelAssembly)
from .training import TrainConfig, TrainingAbort

logger = logging.getLogger(__name__)

LEADERBOARD_COLUMNS = ("trial_id", "status", "blocks", "lr0", "freeze_mode",
                       "freeze_n", "val_loss", "val_top1")


@dataclass(frozen=True)
class SearchSpace:
    block_counts: tuple = (0, 1, 2, 3)
    units_choices: tuple = HEAD_UNIT_CHOICES
    dropout_choices: tuple = HEAD_DROPOUT_CHOICES
    lr0_choices: tuple = (0.01, 0.001, 0.0001)
    freeze_choices: tuple = (FreezePolicy("full_finetune"),)

    def __post_init__(self):
        for name in ("block_counts", "units_choices", "dropout_choices",
                     "lr0_choices", "freeze_choices"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be non-empty")

    def contains(self, head: HeadConfig, lr0, freeze: FreezePolicy) -> bool:
        if len(head.blocks) not in self.block_counts:
            return False
        for units, dropout in head.blocks:
            if units not in self.units_choices or dropout not in self.dropout_choices:
                return False
        return lr0 in self.lr0_choices and freeze in self.freeze_choices


@dataclass
class Trial:
    trial_id: int
    head: HeadConfig
    lr0: float
    freeze: FreezePolicy
    budget_epochs: int
    status: str = "pending"      # pending | completed | failed
    val_loss: float = float("inf")
    val_top1: float = 0.0
    history: training.RunHistory = None


def sample_config(space: SearchSpace, rng: np.random.Generator):
    """Draw each field independently and uniformly from its choice set."""
    n_blocks = int(rng.choice(space.block_counts))
    blocks = tuple(
        (int(rng.choice(space.units_choices)),
         float(rng.choice(space.dropout_choices)))
        for _ in range(n_blocks))
    head = HeadConfig(blocks=blocks)
    lr0 = float(rng.choice(space.lr0_choices))
    freeze = space.freeze_choices[int(rng.integers(len(space.freeze_choices)))]
    return head, lr0, freeze


def trial_patience(base_patience, budget_epochs) -> int:
    return max(1, min(base_patience, budget_epochs // 3))


def _rank_key(trial: Trial):
    failed = trial.status != "completed"
    return (failed, trial.val_loss, -trial.val_top1, trial.trial_id)


def random_search(space: SearchSpace, n_trials, budget_epochs, data,
                  backbone_spec, base_config: TrainConfig = None, seed=0):
    """Run n_trials short fits and return the leaderboard (best first)."""
    if n_trials < 1 or budget_epochs < 1:
        raise ValueError("n_trials and budget_epochs must be >= 1")
    base_config = base_config or TrainConfig()
    rng = np.random.default_rng(seed)
    trials = []
    for trial_id in range(n_trials):
        head, lr0, freeze = sample_config(space, rng)
        trial = Trial(trial_id=trial_id, head=head, lr0=lr0, freeze=freeze,
                      budget_epochs=budget_epochs)
        config = dataclasses.replace(
            base_config, max_epochs=budget_epochs, lr0=lr0,
            patience=trial_patience(base_config.patience, budget_epochs),
            seed=base_config.seed + trial_id)
        try:
            # seed before construction so head initialization is reproducible
            torch.manual_seed(config.seed)
            assembly = ModelAssembly(backbone_spec, freeze, head)
            history, _ = training.fit(assembly, data, config)
            last = history.records[-1]
            trial.status = "completed"
            trial.val_loss = last.val_loss
            trial.val_top1 = last.val_top1
            trial.history = history
        except TrainingAbort as exc:
            logger.warning("trial %d failed: %s", trial_id, exc)
            trial.status = "failed"
        trials.append(trial)
    trials.sort(key=_rank_key)
    return trials


def write_leaderboard(trials, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LEADERBOARD_COLUMNS)
        for t in trials:
            writer.writerow([t.trial_id, t.status,
                             ";".join(f"{u}:{d}" for u, d in t.head.blocks),
                             t.lr0, t.freeze.mode, t.freeze.n,
                             t.val_loss, t.val_top1])


def best_config_record(trials, base_config: TrainConfig) -> dict:
    """Flat key/value record of the winning trial, consumable by `train`."""
    completed = [t for t in trials if t.status == "completed"]
    if not completed:
        raise TrainingAbort("no trial completed; nothing to emit")
    best = completed[0]
    record = {
        "head_blocks": ";".join(f"{u}:{d}" for u, d in best.head.blocks),
        "lr0": best.lr0,
        "freeze_mode": best.freeze.mode,
        "freeze_n": best.freeze.n,
        "max_epochs": base_config.max_epochs,
        "batch_size": base_config.batch_size,
        "decay_gamma": base_config.decay_gamma,
        "patience": base_config.patience,
        "seed": base_config.seed,
    }
    return record


def write_best_config(record: dict, path):
    with open(path, "w") as fh:
        for key, value in record.items():
            fh.write(f"{key} = {value}\n")
