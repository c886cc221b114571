"""Per-round aggregation strategies.

Four strategies share one interface: given the epoch's weight table, produce
load instructions telling each user what to put where.

  baseline  no sharing at all (and no uploads happen either);
  fedavg    elementwise mean of every bundle, loaded into each STUDENT;
  fkd       the same mean, loaded into each TEACHER;
  efdls     nearest-neighbor weight matching, partner bundles into TEACHERS.

FedAvgM / FedGrad / FTL / FTLS variants are out of scope; this module is the
extension point for adding them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dbwm
from .extractor import WeightBundle

STRATEGY_TAGS = ("baseline", "fedavg", "fkd", "efdls")


@dataclass(frozen=True)
class StrategyKind:
    tag: str

    def __post_init__(self):
        if self.tag not in STRATEGY_TAGS:
            raise ValueError(f"unknown strategy '{self.tag}', expected one of {STRATEGY_TAGS}")

    @property
    def communicates(self) -> bool:
        return self.tag != "baseline"


@dataclass(frozen=True)
class LoadInstruction:
    """Tells one user to load a bundle into its student or teacher."""

    user_id: int
    target: str  # "student" | "teacher"
    bundle: WeightBundle


def fedavg_aggregate(table: dbwm.WeightTable) -> WeightBundle:
    """Elementwise arithmetic mean over every array in every bundle,
    running statistics included."""
    if len(table) == 0:
        raise ValueError("cannot average an empty weight table")
    bundles = table.bundles()
    keys = bundles[0].arrays.keys()
    mean_arrays = {}
    for key in keys:
        stacked = np.stack([b.arrays[key].astype(np.float64, copy=False) for b in bundles])
        mean_arrays[key] = stacked.mean(axis=0)
    return WeightBundle(arrays=mean_arrays, epoch_tag=table.epoch)


def apply_round(strategy: StrategyKind, table: dbwm.WeightTable) -> list:
    """Turn a complete epoch table into per-user load instructions."""
    if strategy.tag == "baseline":
        return []
    if strategy.tag in ("fedavg", "fkd"):
        mean = fedavg_aggregate(table)
        target = "student" if strategy.tag == "fedavg" else "teacher"
        return [LoadInstruction(uid, target, mean.copy()) for uid in table.user_ids()]
    # efdls: with a single connected user no partner exists and the user
    # simply trains supervised-only this round.
    if len(table) < 2:
        return []
    return [LoadInstruction(uid, "teacher", bundle)
            for uid, bundle in dbwm.match_table(table)]
