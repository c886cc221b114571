"""Server-side weight matching.

Every federated epoch the server collects one hidden-layer bundle per
connected user, computes all pairwise squared L2 distances over the learnable
parameters, gives each user the index of its nearest other user (lowest index
wins ties), and dispatches a copy of that partner's bundle back. Matching is
not forced symmetric and many users may share one partner.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .extractor import WeightBundle
from .nncore import ShapeError


class InsufficientUsersError(ValueError):
    """Matching needs at least two uploaded bundles; with one, no partner exists."""


@dataclass
class WeightTable:
    """Uploads of one epoch: ordered (user_id, bundle) pairs. Rebuilt from
    scratch every epoch."""

    entries: list
    epoch: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    def user_ids(self) -> list:
        return [uid for uid, _ in self.entries]

    def bundles(self) -> list:
        return [b for _, b in self.entries]


@dataclass
class DistanceMatrix:
    """Symmetric pairwise squared distances; the diagonal is undefined and
    stored as NaN."""

    values: np.ndarray


@dataclass
class MatchAssignment:
    """ids[i] is the table index of user i's partner (never i itself)."""

    ids: list


def bundle_distance(a: WeightBundle, b: WeightBundle) -> float:
    """Squared L2 distance over learnable parameters only; running statistics
    are carried in bundles but never measured. Accumulates in float64."""
    if not a.same_shapes(b):
        raise ShapeError("cannot measure distance between bundles of different shapes")
    total = 0.0
    for key, av in a.learnable_items():
        diff = av.astype(np.float64, copy=False) - b.arrays[key].astype(np.float64, copy=False)
        total += float(np.sum(diff * diff))
    return total


def pairwise_distances(table: WeightTable) -> DistanceMatrix:
    """All-pairs distances; each unordered pair computed once and mirrored."""
    n = len(table)
    if n < 2:
        raise InsufficientUsersError(
            f"pairwise matching needs at least 2 uploaded bundles, got {n}"
        )
    bundles = table.bundles()
    values = np.full((n, n), np.nan)
    for i in range(n):
        for j in range(i + 1, n):
            d = bundle_distance(bundles[i], bundles[j])
            values[i, j] = d
            values[j, i] = d
    return DistanceMatrix(values)


def match_partners(d: DistanceMatrix) -> MatchAssignment:
    """Row-wise argmin over the off-diagonal entries; ties break to the
    lowest index."""
    values = d.values
    n = values.shape[0]
    if n < 2:
        raise InsufficientUsersError("matching needs at least 2 users")
    ids = []
    for i in range(n):
        row = values[i].copy()
        row[i] = np.inf
        ids.append(int(np.argmin(row)))
    return MatchAssignment(ids)


def dispatch_matched(table: WeightTable, assignment: MatchAssignment) -> list:
    """Per user, an independent copy of the partner's bundle:
    returns [(user_id, partner_bundle_copy), ...] in table order."""
    if len(assignment.ids) != len(table):
        raise ValueError(
            f"assignment covers {len(assignment.ids)} users, table has {len(table)}"
        )
    out = []
    bundles = table.bundles()
    for i, (uid, _) in enumerate(table.entries):
        j = assignment.ids[i]
        out.append((uid, bundles[j].copy(epoch_tag=table.epoch)))
    return out


def match_table(table: WeightTable) -> list:
    """Full pipeline: distances -> argmin -> dispatched copies."""
    return dispatch_matched(table, match_partners(pairwise_distances(table)))
