"""Leave-one-out ranking evaluation with Recall@K and NDCG@K."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, EvaluationError
from .model import pad_truncate
from .numerics.rng import derive_seed, make_rng

POLICIES = ("full", "sampled")
CSV_HEADER = ["phase", "policy", "K", "recall", "ndcg", "users"]


@dataclass
class MetricSpec:
    cutoffs: tuple[int, ...] = (5, 10, 20)
    policy: str = "sampled"
    num_candidates: int = 100
    seed: int = 0

    def __post_init__(self):
        self.cutoffs = tuple(sorted(int(k) for k in self.cutoffs))
        if not self.cutoffs or self.cutoffs[0] < 1:
            raise ConfigError(f"cutoffs must be >= 1, got {self.cutoffs}")
        if self.policy not in POLICIES:
            raise ConfigError(f"candidate policy must be one of {POLICIES}, got {self.policy!r}")
        if self.num_candidates < 1:
            raise ConfigError(f"num_candidates must be >= 1, got {self.num_candidates}")

    @property
    def label(self) -> str:
        return "full" if self.policy == "full" else f"sampled:{self.num_candidates}"

    @classmethod
    def parse_policy(cls, text: str) -> tuple[str, int]:
        """``"full"`` or ``"sampled:C"`` -> (policy, C)."""
        if text == "full":
            return "full", 100
        kind, _, count = text.partition(":")
        if kind != "sampled":
            raise ConfigError(f"bad candidate policy {text!r}; use 'full' or 'sampled:C'")
        return "sampled", int(count) if count else 100


@dataclass
class MetricReport:
    phase: str
    policy: str
    users: int
    recall: dict[int, float] = field(default_factory=dict)
    ndcg: dict[int, float] = field(default_factory=dict)

    def check(self) -> None:
        ks = sorted(self.recall)
        for k in ks:
            if not (0.0 <= self.recall[k] <= 1.0 and 0.0 <= self.ndcg[k] <= 1.0):
                raise EvaluationError(f"metric outside [0, 1] at K={k}")
        for a, b in zip(ks, ks[1:]):
            if self.recall[b] < self.recall[a] or self.ndcg[b] < self.ndcg[a]:
                raise EvaluationError(f"metrics decrease between K={a} and K={b}")

    def rows(self) -> list[list]:
        return [[self.phase, self.policy, k, repr(self.recall[k]), repr(self.ndcg[k]), self.users]
                for k in sorted(self.recall)]

    def write_csv(self, path, append: bool = False) -> None:
        path = Path(path)
        new = not (append and path.exists())
        with path.open("a" if append else "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(CSV_HEADER)
            w.writerows(self.rows())

    def summary(self) -> str:
        parts = [f"R@{k}={self.recall[k]:.4f} N@{k}={self.ndcg[k]:.4f}" for k in sorted(self.recall)]
        return f"{self.phase} [{self.policy}, {self.users} users] " + " ".join(parts)


def read_report_csv(path) -> list[MetricReport]:
    reports: dict[tuple[str, str], MetricReport] = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["phase"], row["policy"])
            rep = reports.setdefault(key, MetricReport(row["phase"], row["policy"], int(row["users"])))
            k = int(row["K"])
            rep.recall[k] = float(row["recall"])
            rep.ndcg[k] = float(row["ndcg"])
    return list(reports.values())


def average_reports(reports: Sequence[MetricReport]) -> MetricReport:
    first = reports[0]
    out = MetricReport(first.phase, first.policy, first.users)
    for k in first.recall:
        out.recall[k] = sum(r.recall[k] for r in reports) / len(reports)
        out.ndcg[k] = sum(r.ndcg[k] for r in reports) / len(reports)
    return out


# ---------------------------------------------------------------- per-user metrics

def rank_target(scores, target_index: int) -> int:
    """1-based rank; every other candidate tying the target ranks ahead of it."""
    scores = np.asarray(scores)
    if not np.all(np.isfinite(scores)):
        raise EvaluationError("non-finite candidate scores")
    t = scores[target_index]
    return int(1 + np.count_nonzero(scores > t) + np.count_nonzero(scores == t) - 1)


def recall_at_k(rank: int, k: int) -> int:
    return 1 if rank <= k else 0


def ndcg_at_k(rank: int, k: int) -> float:
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def sample_candidates(history, target: int, num: int, vocab_size: int, rng) -> np.ndarray:
    """``[target, c_1 .. c_num]`` with the ``c_i`` drawn without replacement
    from items the user never interacted with."""
    pool = np.setdiff1d(np.arange(1, vocab_size), np.asarray(history), assume_unique=False)
    if pool.size < num:
        raise ConfigError(
            f"cannot sample {num} negatives: only {pool.size} items outside the user's history"
        )
    picks = make_rng(rng).choice(pool, size=num, replace=False)
    return np.concatenate([[target], picks]).astype(np.int64)


# ---------------------------------------------------------------- protocol

def evaluate(model, split, spec: MetricSpec, phase: str = "test", batch_size: int = 256) -> MetricReport:
    """Rank each user's held-out item among the candidate set and average.

    ``model`` needs ``config.max_len``, ``config.vocab_size`` and
    ``score_histories(prefixes, candidates)``.
    """
    pairs = split.phase_pairs(phase)
    if not pairs:
        raise EvaluationError(f"no users in phase {phase!r}")
    L = model.config.max_len
    V = model.config.vocab_size
    rng = make_rng(derive_seed(spec.seed, "candidates", phase))
    histories = [s.items for s in split.sequences]
    recall_sum = {k: 0 for k in spec.cutoffs}
    ndcg_sum = {k: 0.0 for k in spec.cutoffs}
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        prefixes = np.stack([pad_truncate(p, L) for p, _ in chunk])
        targets = np.array([t for _, t in chunk])
        if spec.policy == "full":
            scores = model.score_histories(prefixes)
            tcol = targets - 1
        else:
            cands = np.stack([
                sample_candidates(histories[start + i], t, spec.num_candidates, V, rng)
                for i, (_, t) in enumerate(chunk)
            ])
            scores = model.score_histories(prefixes, cands)
            tcol = np.zeros(len(chunk), dtype=np.int64)
        for row, col in zip(scores, tcol):
            rank = rank_target(row, int(col))
            for k in spec.cutoffs:
                recall_sum[k] += recall_at_k(rank, k)
                ndcg_sum[k] += ndcg_at_k(rank, k)
    n = len(pairs)
    report = MetricReport(phase, spec.label, n,
                          recall={k: recall_sum[k] / n for k in spec.cutoffs},
                          ndcg={k: ndcg_sum[k] / n for k in spec.cutoffs})
    report.check()
    return report
