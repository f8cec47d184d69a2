"""Aggregation of per-round, per-node records into reported quantities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class RoundRecord:
    replica: int
    round: int
    node_id: int
    accuracy: float
    test_ce_loss: float
    strategy: str
    gini_of_allocation: float
    comm_floats_sent: int

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy out of [0,1]")


def avg_accuracy(records) -> float:
    """Unweighted mean node accuracy over a record set."""
    records = list(records)
    if not records:
        raise ValueError("empty record set")
    return float(np.mean([r.accuracy for r in records]))


def confidence_interval(replica_means, level: float = 0.95) -> float:
    """Student-t half-width over per-replica means."""
    x = np.asarray(list(replica_means), dtype=np.float64)
    n = x.size
    if n < 2:
        raise ValueError("need >= 2 replicas for a confidence interval")
    t = stats.t.ppf(0.5 + level / 2.0, n - 1)
    return float(t * x.std(ddof=1) / np.sqrt(n))


def characteristic_time(avg_acc_series, centralized_acc: float, fraction: float):
    """Smallest round index whose average accuracy reaches
    fraction * centralized_acc; None if never reached."""
    if centralized_acc <= 0:
        raise ValueError("centralized accuracy must be positive")
    threshold = fraction * centralized_acc
    for t, acc in enumerate(avg_acc_series):
        if acc >= threshold:
            return t
    return None


def avg_characteristic_time(per_replica_series, centralized_acc: float, fraction: float):
    """Per-replica thresholds averaged afterward; None when any replica
    never crosses (the table's dash)."""
    times = [characteristic_time(s, centralized_acc, fraction) for s in per_replica_series]
    if any(t is None for t in times):
        return None
    return float(np.mean(times))


def node_quantiles(records) -> dict[str, float]:
    """{min, q1, median, q3, max} of node accuracies, linear-interpolated."""
    records = list(records)
    if not records:
        raise ValueError("empty record set")
    acc = np.array([r.accuracy for r in records])
    q = np.quantile(acc, [0.0, 0.25, 0.5, 0.75, 1.0])
    return {"min": float(q[0]), "q1": float(q[1]), "median": float(q[2]),
            "q3": float(q[3]), "max": float(q[4])}
