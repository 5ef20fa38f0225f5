"""Character error rate, bootstrap intervals and per-speaker reports."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class UttScore:
    utt_id: str
    S: int
    I: int
    D: int
    N: int
    speaker_id: str = ""

    @property
    def errors(self) -> int:
        return self.S + self.I + self.D


def edit_distance(ref: Sequence, hyp: Sequence) -> tuple[int, int, int]:
    """Substitutions, insertions and deletions of a minimal unit-cost alignment.

    Backtrace preference on ties: diagonal (match/substitution) first, then
    deletion, then insertion.
    """
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i, j] = min(sub, d[i - 1, j] + 1, d[i, j - 1] + 1)
    s = ins = dele = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(s), ins, dele


def score_utterance(utt_id: str, ref: Sequence, hyp: Sequence, speaker_id: str = "") -> UttScore:
    s, i, d = edit_distance(ref, hyp)
    return UttScore(utt_id, s, i, d, len(ref), speaker_id)


def cer(scores: Iterable[UttScore]) -> float:
    scores = list(scores)
    n = sum(x.N for x in scores)
    if n == 0:
        raise ValueError("total reference length is zero")
    return 100.0 * sum(x.errors for x in scores) / n


def bootstrap_ci(scores: Sequence[UttScore], B: int = 10000, level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile interval of the CER over utterance-level resamples."""
    if B < 1:
        raise ValueError("B must be >= 1")
    if not scores:
        raise ValueError("no scores to resample")
    err = np.array([x.errors for x in scores], dtype=np.float64)
    ref = np.array([x.N for x in scores], dtype=np.float64)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(scores), size=(B, len(scores)))
    den = ref[idx].sum(axis=1)
    stats = 100.0 * err[idx].sum(axis=1) / np.where(den > 0, den, np.nan)
    alpha = (1.0 - level) / 2.0
    low, high = np.nanpercentile(stats, [100 * alpha, 100 * (1 - alpha)])
    return float(low), float(high)


REPORT_COLUMNS = ["speaker_id", "num_utts", "N", "S", "I", "D", "CER", "ci_low", "ci_high"]


def speaker_report(scores: Sequence[UttScore], B: int = 10000, level: float = 0.95, seed: int = 0) -> list[dict]:
    """One row per speaker (sorted) plus a final ``ALL`` row."""
    groups: dict[str, list[UttScore]] = defaultdict(list)
    for x in scores:
        groups[x.speaker_id].append(x)
    rows = []
    for spk in sorted(groups) + ["ALL"]:
        g = list(scores) if spk == "ALL" else groups[spk]
        low, high = bootstrap_ci(g, B, level, seed)
        rows.append(
            {
                "speaker_id": spk,
                "num_utts": len(g),
                "N": sum(x.N for x in g),
                "S": sum(x.S for x in g),
                "I": sum(x.I for x in g),
                "D": sum(x.D for x in g),
                "CER": cer(g),
                "ci_low": low,
                "ci_high": high,
            }
        )
    return rows


def write_report(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in row.items()})
