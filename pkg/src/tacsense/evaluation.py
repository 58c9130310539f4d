"""Experiment protocol and metrics: user clustering, grouped folds, scoring.

Users are clustered on a scalar TAC feature (mean of per-session TAC
maxima) with 1-D k-means, one test user per cluster is held out, and the
remaining users are assigned to fold validation sets that approximate the
global intoxicated-window fraction. Grouping is always by user: no user's
windows cross a train/validation boundary.

ROC-AUC follows the pairwise-comparison definition with half credit for
ties, computed from exact integer pair counts; PR-AUC integrates the
precision-recall step curve over all distinct thresholds.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

CLUSTER_NAMES_3 = ("low", "medium", "high")

METRIC_COLUMNS = (
    ("roc_auc", "ROC-AUC"),
    ("pr_auc", "PR-AUC"),
    ("accuracy", "Accuracy"),
    ("sober_accuracy", "Sober Accuracy"),
    ("drunk_accuracy", "Drunk Accuracy"),
    ("f1", "F1 Score"),
)


class EvalError(ValueError):
    """Base error for protocol/metric failures."""


class UndefinedMetricError(EvalError):
    """Metric is undefined for the given labels (e.g. one class missing)."""


class PlanError(EvalError):
    """Split plan construction or validation failed."""


@dataclass(frozen=True)
class UserSummary:
    """Per-user aggregates driving clustering and fold balancing."""

    user_id: str
    tac_feature: float  # mean of per-session max TAC, µg/L
    window_count: int
    intox_window_fraction: float

    def __post_init__(self):
        if self.tac_feature < 0:
            raise EvalError(f"tac_feature must be >= 0, got {self.tac_feature}")
        if not 0 <= self.intox_window_fraction <= 1:
            raise EvalError(
                f"intox_window_fraction must be in [0,1], got {self.intox_window_fraction}"
            )


@dataclass(frozen=True)
class ClusterResult:
    assignments: dict[str, str]  # user_id -> cluster name
    centroids: tuple[float, ...]  # ascending
    degenerate: bool  # an effective cluster came out empty


@dataclass(frozen=True)
class FoldSplit:
    train_users: frozenset[str]
    validation_users: frozenset[str]


@dataclass(frozen=True)
class SplitPlan:
    folds: tuple[FoldSplit, ...]
    test_users: frozenset[str]
    clusters: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        """Raise PlanError on any leakage or test-containment violation."""
        for i, fold in enumerate(self.folds):
            overlap = fold.train_users & fold.validation_users
            if overlap:
                raise PlanError(f"fold {i}: users in both train and validation: {sorted(overlap)}")
            leaked = self.test_users & (fold.train_users | fold.validation_users)
            if leaked:
                raise PlanError(f"fold {i}: test users leaked into fold: {sorted(leaked)}")
            if not fold.validation_users:
                raise PlanError(f"fold {i}: empty validation set")


def _kmeans_once(values: np.ndarray, k: int, rng: np.random.Generator):
    n = len(values)
    centers = np.empty(k)
    centers[0] = values[rng.integers(n)]
    d2 = (values - centers[0]) ** 2
    for j in range(1, k):
        total = d2.sum()
        if total == 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[j] = values[idx]
        d2 = np.minimum(d2, (values - centers[j]) ** 2)
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(100):
        new_assign = np.abs(values[:, None] - centers[None, :]).argmin(axis=1)
        for j in range(k):
            members = values[new_assign == j]
            if len(members):
                centers[j] = members.mean()
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    inertia = float(((values - centers[assign]) ** 2).sum())
    return assign, centers, inertia


def kmeans_cluster(
    summaries: Sequence[UserSummary],
    k: int = 3,
    seed: int = 0,
    restarts: int = 50,
) -> ClusterResult:
    """1-D k-means over tac_feature with k-means++ seeding and restarts.

    Runs on value-sorted data, so the partition is invariant to user order.
    Clusters are ordered by ascending centroid and named low/medium/high
    for k=3 (c0..c{k-1} otherwise). If fewer distinct values than clusters
    exist, empty clusters are allowed and the result is flagged degenerate.
    """
    if k < 1:
        raise EvalError(f"k must be positive, got {k}")
    if len(summaries) < k:
        raise EvalError(f"cannot form {k} clusters from {len(summaries)} users")
    values = np.array([s.tac_feature for s in summaries], dtype=np.float64)
    order = np.argsort(values, kind="stable")
    sorted_values = values[order]
    rng = np.random.Generator(np.random.PCG64(seed))
    best = None
    for _ in range(restarts):
        assign, centers, inertia = _kmeans_once(sorted_values, k, rng)
        if best is None or inertia < best[2]:
            best = (assign, centers, inertia)
    assign, centers, _ = best
    rank = np.argsort(centers, kind="stable")
    relabel = np.empty(k, dtype=np.int64)
    relabel[rank] = np.arange(k)
    assign = relabel[assign]
    names = CLUSTER_NAMES_3 if k == 3 else tuple(f"c{i}" for i in range(k))
    assignments: dict[str, str] = {}
    for pos, orig_idx in enumerate(order):
        assignments[summaries[orig_idx].user_id] = names[assign[pos]]
    occupied = {names[a] for a in assign}
    return ClusterResult(
        assignments=assignments,
        centroids=tuple(float(c) for c in np.sort(centers)),
        degenerate=len(occupied) < k,
    )


def build_split_plan(
    summaries: Sequence[UserSummary],
    clusters: ClusterResult,
    folds: int = 3,
    seed: int = 0,
) -> SplitPlan:
    """Hold out one test user per cluster and balance folds by prevalence.

    The test user is the highest-window-count user of each cluster (ties
    break to the smallest user_id). Remaining users are greedily assigned
    to fold validation sets so each fold's intoxicated-window fraction
    tracks the global fraction; train sets are the complements. Raises
    PlanError for empty clusters or too few remaining users.
    """
    by_id = {s.user_id: s for s in summaries}
    names = sorted(set(clusters.assignments.values()))
    cluster_members: dict[str, list[UserSummary]] = {n: [] for n in names}
    for user_id, name in clusters.assignments.items():
        cluster_members[name].append(by_id[user_id])
    empty = [n for n in names if not cluster_members[n]]
    if empty:
        raise PlanError(f"cluster(s) with zero users: {', '.join(empty)}")

    test_users = set()
    for name in names:
        chosen = min(cluster_members[name], key=lambda s: (-s.window_count, s.user_id))
        test_users.add(chosen.user_id)

    remaining = [s for s in summaries if s.user_id not in test_users]
    if len(remaining) < folds:
        raise PlanError(
            f"need at least {folds} non-test users, have {len(remaining)}"
        )
    total_windows = sum(s.window_count for s in remaining)
    global_intox = sum(s.intox_window_fraction * s.window_count for s in remaining)
    global_frac = global_intox / total_windows if total_windows else 0.0

    rng = np.random.Generator(np.random.PCG64(seed))
    shuffled = [remaining[i] for i in rng.permutation(len(remaining))]
    shuffled.sort(key=lambda s: -s.window_count)  # stable: seed breaks count ties

    val_sets: list[set[str]] = [set() for _ in range(folds)]
    val_windows = [0] * folds
    val_intox = [0.0] * folds
    for rank, user in enumerate(shuffled):
        if rank < folds:
            target = rank
        else:
            def cost(f: int):
                w = val_windows[f] + user.window_count
                x = val_intox[f] + user.intox_window_fraction * user.window_count
                return (abs(x / w - global_frac), w, f)

            target = min(range(folds), key=cost)
        val_sets[target].add(user.user_id)
        val_windows[target] += user.window_count
        val_intox[target] += user.intox_window_fraction * user.window_count

    non_test = {s.user_id for s in remaining}
    plan = SplitPlan(
        folds=tuple(
            FoldSplit(
                train_users=frozenset(non_test - vs),
                validation_users=frozenset(vs),
            )
            for vs in val_sets
        ),
        test_users=frozenset(test_users),
        clusters=dict(clusters.assignments),
    )
    plan.validate()
    return plan


def _check_binary(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise UndefinedMetricError("empty input")
    if not np.isin(labels, (0, 1)).all():
        raise EvalError("labels must be binary")
    return labels.astype(bool)


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Exact pairwise ranking probability P(s+ > s-) + 0.5 P(tie)."""
    y = _check_binary(labels)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(y.sum())
    n_neg = int(len(y) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC undefined with a single class")
    order = np.argsort(s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    # doubled pair credit u2 = 2*(wins) + ties, accumulated per distinct value
    u2 = 0
    neg_below = 0
    i = 0
    n = len(s_sorted)
    while i < n:
        j = i
        pos_here = 0
        neg_here = 0
        while j < n and s_sorted[j] == s_sorted[i]:
            if y_sorted[j]:
                pos_here += 1
            else:
                neg_here += 1
            j += 1
        u2 += 2 * pos_here * neg_below + pos_here * neg_here
        neg_below += neg_here
        i = j
    d2 = 2 * n_pos * n_neg
    # complement branch keeps roc_auc(s) + roc_auc(-s) == 1.0 exact in floats
    if 2 * u2 <= d2:
        return u2 / d2
    return 1.0 - (d2 - u2) / d2


def pr_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under precision-recall, stepwise over all distinct thresholds."""
    y = _check_binary(labels)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("PR-AUC undefined without positive samples")
    order = np.argsort(-s, kind="stable")
    s_desc = s[order]
    y_desc = y[order].astype(np.int64)
    cum_tp = np.cumsum(y_desc)
    cum_n = np.arange(1, len(s_desc) + 1)
    last_of_value = np.nonzero(np.append(s_desc[:-1] != s_desc[1:], True))[0]
    tp = cum_tp[last_of_value]
    total = cum_n[last_of_value]
    recall = tp / n_pos
    precision = tp / total
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev_recall) * precision).sum())


def classification_metrics(predictions: Sequence[int], labels: Sequence[int]) -> dict[str, float]:
    """Accuracy, per-class accuracy, and F1 on the intoxicated class.

    sober_accuracy is specificity, drunk_accuracy is recall. Requires both
    classes present among the labels.
    """
    y = _check_binary(labels)
    p = _check_binary(predictions)
    if len(y) != len(p):
        raise EvalError("predictions and labels must have equal length")
    if y.all() or not y.any():
        raise UndefinedMetricError("per-class accuracy undefined with a single class")
    tp = int((p & y).sum())
    tn = int((~p & ~y).sum())
    fp = int((p & ~y).sum())
    fn = int((~p & y).sum())
    return {
        "accuracy": (tp + tn) / len(y),
        "sober_accuracy": tn / (tn + fp),
        "drunk_accuracy": tp / (tp + fn),
        "f1": 2 * tp / (2 * tp + fp + fn),
    }


def _f1_at(scores: np.ndarray, y: np.ndarray, threshold: float) -> float:
    p = scores >= threshold
    tp = int((p & y).sum())
    fp = int((p & ~y).sum())
    fn = int((~p & y).sum())
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def select_threshold(
    scores: Sequence[float], labels: Sequence[int], step: float = 0.001
) -> float:
    """Grid-search the F1-maximizing decision threshold on validation data.

    Predictions are ``score >= threshold``. Ties in F1 resolve to the
    smallest threshold, making the result deterministic.
    """
    y = _check_binary(labels)
    if y.all() or not y.any():
        raise UndefinedMetricError("threshold selection needs both classes")
    s = np.asarray(scores, dtype=np.float64)
    lo, hi = float(s.min()), float(s.max())
    count = max(0, int(np.ceil((hi - lo) / step - 1e-9)))
    grid = lo + step * np.arange(count + 1)
    best_thr = grid[0]
    best_f1 = -1.0
    for thr in grid:
        f1 = _f1_at(s, y, float(thr))
        if f1 > best_f1:
            best_f1 = f1
            best_thr = float(thr)
    return best_thr


def score_metrics(
    scores: Sequence[float], labels: Sequence[int], threshold: float | None
) -> dict[str, float]:
    """Full metric row for a score vector at a decision threshold.

    ``threshold=None`` means the model decides by score sign (score > 0).
    """
    s = np.asarray(scores, dtype=np.float64)
    predictions = (s > 0).astype(int) if threshold is None else (s >= threshold).astype(int)
    out = classification_metrics(predictions, labels)
    out["roc_auc"] = roc_auc(s, labels)
    out["pr_auc"] = pr_auc(s, labels)
    return out


@dataclass
class FoldResult:
    index: int
    train_users: list[str]
    validation_users: list[str]
    threshold: float | None
    metrics: dict[str, float]


@dataclass
class TestResult:
    users: list[str]
    threshold: float | None
    metrics: dict[str, float]


@dataclass
class EvalReport:
    """Per-fold and test-set metrics plus full provenance."""

    model_kind: str
    library_version: str
    config: dict
    config_fingerprint: str
    seeds: dict
    prevalence: float
    clusters: dict[str, str]
    folds: list[FoldResult]
    test: TestResult

    def to_dict(self) -> dict:
        return {
            "model_kind": self.model_kind,
            "library_version": self.library_version,
            "config": self.config,
            "config_fingerprint": self.config_fingerprint,
            "seeds": self.seeds,
            "prevalence": self.prevalence,
            "clusters": self.clusters,
            "folds": [
                {
                    "index": f.index,
                    "train_users": sorted(f.train_users),
                    "validation_users": sorted(f.validation_users),
                    "threshold": f.threshold,
                    "metrics": f.metrics,
                }
                for f in self.folds
            ],
            "test": {
                "users": sorted(self.test.users),
                "threshold": self.test.threshold,
                "metrics": self.test.metrics,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            model_kind=d["model_kind"],
            library_version=d["library_version"],
            config=d["config"],
            config_fingerprint=d["config_fingerprint"],
            seeds=d["seeds"],
            prevalence=d["prevalence"],
            clusters=d["clusters"],
            folds=[
                FoldResult(
                    index=f["index"],
                    train_users=f["train_users"],
                    validation_users=f["validation_users"],
                    threshold=f["threshold"],
                    metrics=f["metrics"],
                )
                for f in d["folds"]
            ],
            test=TestResult(
                users=d["test"]["users"],
                threshold=d["test"]["threshold"],
                metrics=d["test"]["metrics"],
            ),
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))


def config_fingerprint(config: dict) -> str:
    """Stable sha256 over the canonical JSON form of a config."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def render_metrics_table(rows: list[tuple[str, dict[str, float], float | None]]) -> str:
    """Fixed-width table of metric rows: (name, metrics, threshold)."""
    headers = ["Model"] + [label for _, label in METRIC_COLUMNS] + ["Threshold"]
    table = [headers]
    for name, metrics, threshold in rows:
        row = [name]
        row += [f"{metrics[key]:.6f}" for key, _ in METRIC_COLUMNS]
        row.append("N/A" if threshold is None else f"{threshold:.6f}")
        table.append(row)
    widths = [max(len(r[i]) for r in table) for i in range(len(headers))]
    lines = []
    for i, row in enumerate(table):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)
