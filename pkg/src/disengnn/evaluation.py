"""Ranking metrics, POP / Item-KNN baselines and parameter sweeps."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

# Reference numbers from the published full-scale runs; documentation only, never asserted.
PAPER_TABLE3 = {
    "Diginetica": {"Disen-GNN": (53.79, 18.99), "POP": (0.89, 0.20), "Item-KNN": (35.75, 11.57)},
}


@dataclass
class MetricsReport:
    k: int
    precision: float
    mrr: float
    n_evaluated: int
    sweep: list[dict] | None = None

    def to_dict(self) -> dict:
        d = {"k": self.k, f"P@{self.k}": self.precision, f"MRR@{self.k}": self.mrr,
             "n_evaluated": self.n_evaluated}
        if self.sweep is not None:
            d["sweep"] = self.sweep
        return d


def target_ranks(scores: np.ndarray, targets: Sequence[int]) -> np.ndarray:
    """1-based rank of each target; ties go to the lower item index."""
    scores = np.asarray(scores)
    targets = np.asarray(targets, dtype=np.int64)
    rows = np.arange(len(targets))
    t_score = scores[rows, targets][:, None]
    higher = (scores > t_score).sum(axis=1)
    earlier_tie = ((scores == t_score) & (np.arange(scores.shape[1])[None, :] < targets[:, None])).sum(axis=1)
    return 1 + higher + earlier_tie


def rank_metrics(scores, targets, k: int = 20) -> MetricsReport:
    scores = np.atleast_2d(np.asarray(scores))
    targets = np.asarray(targets)
    if len(targets) == 0:
        raise ValueError("cannot compute metrics on an empty evaluation set")
    if scores.shape[0] != len(targets):
        raise ValueError(f"{scores.shape[0]} score rows for {len(targets)} targets")
    ranks = target_ranks(scores, targets)
    hit = ranks <= k
    return MetricsReport(k, float(hit.mean()), float(np.where(hit, 1.0 / ranks, 0.0).mean()), len(targets))


# -- baselines ----------------------------------------------------------

class PopScorer:
    """Session-independent scores: training click counts per item."""

    def __init__(self, counts: np.ndarray):
        self.counts = counts

    def score(self, sequences: Sequence[Sequence[int]]) -> np.ndarray:
        return np.tile(self.counts.astype(np.float64), (len(sequences), 1))


def pop_baseline(train_pairs, n_items: int) -> PopScorer:
    """Click counts recovered from prefix pairs.

    Each session contributes its first click through its length-1 prefix and
    every later click as a label.
    """
    counts = np.zeros(n_items, dtype=np.int64)
    for seq, label in train_pairs:
        counts[label] += 1
        if len(seq) == 1:
            counts[seq[0]] += 1
    return PopScorer(counts)


class ItemKNNScorer:
    def __init__(self, similarity: np.ndarray, aggregation: str = "last"):
        if aggregation not in ("last", "mean"):
            raise ValueError("aggregation must be 'last' or 'mean'")
        self.similarity = similarity
        self.aggregation = aggregation

    def score(self, sequences: Sequence[Sequence[int]]) -> np.ndarray:
        out = np.empty((len(sequences), self.similarity.shape[0]))
        for row, seq in enumerate(sequences):
            last = seq[-1]
            if self.aggregation == "last":
                out[row] = self.similarity[last]
            else:
                out[row] = self.similarity[list(seq)].mean(axis=0)
            out[row, last] = -np.inf
        return out


def cooccurrence_cosine(sessions: Sequence[Sequence[int]], n_items: int, top_n: int | None = None) -> np.ndarray:
    """Cosine similarity between binary item-by-session incidence vectors; zero diagonal."""
    incidence = np.zeros((n_items, len(sessions)))
    for s, items in enumerate(sessions):
        incidence[list(set(items)), s] = 1.0
    co = incidence @ incidence.T
    norms = np.sqrt(np.diag(co))
    denom = np.outer(norms, norms)
    sim = np.divide(co, denom, out=np.zeros_like(co), where=denom > 0)
    np.fill_diagonal(sim, 0.0)
    if top_n is not None and top_n < n_items:
        cutoff = -np.sort(-sim, axis=1)[:, top_n - 1:top_n]
        sim = np.where(sim >= cutoff, sim, 0.0)
    return sim


def itemknn_baseline(train_pairs, n_items: int, aggregation: str = "last", top_n: int | None = None) -> ItemKNNScorer:
    """Item-KNN over co-occurrence in training sessions (each pair's prefix plus label)."""
    sessions = [list(seq) + [label] for seq, label in train_pairs]
    return ItemKNNScorer(cooccurrence_cosine(sessions, n_items, top_n), aggregation)


def evaluate_scorer(scorer, pairs, k: int = 20) -> MetricsReport:
    seqs = [seq for seq, _ in pairs]
    return rank_metrics(scorer.score(seqs), [label for _, label in pairs], k)


def evaluate_model(config, params, pairs, k: int = 20, batch_size: int = 100) -> MetricsReport:
    from .model import score_sequences

    seqs = [seq for seq, _ in pairs]
    return rank_metrics(score_sequences(config, params, seqs, batch_size), [label for _, label in pairs], k)


# -- sweeps -------------------------------------------------------------

SWEEP_AXES = {"K": "K", "lambda": "lam", "T": "T", "L": "L"}


@dataclass
class SweepResult:
    axis: str
    rows: list[dict] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)

    def best(self, metric: str = "P@20") -> dict:
        return max(self.rows, key=lambda r: r[metric])

    def to_dict(self) -> dict:
        return {"axis": self.axis, "rows": self.rows, "skipped": self.skipped}

    def to_tsv(self) -> str:
        lines = [f"{self.axis}\tP@20\tMRR@20\tn_seeds"]
        for r in self.rows:
            lines.append(f"{r['value']}\t{r['P@20']:.6f}\t{r['MRR@20']:.6f}\t{len(r['seeds'])}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        lines = [f"{self.axis:>8}  {'P@20':>8}  {'MRR@20':>8}"]
        for r in self.rows:
            lines.append(f"{r['value']!s:>8}  {100 * r['P@20']:8.2f}  {100 * r['MRR@20']:8.2f}")
        for s in self.skipped:
            lines.append(f"{s['value']!s:>8}  skipped: {s['reason']}")
        return "\n".join(lines) + "\n"


def sweep(model_config, train_config, axis: str, values, dataset, seeds: Sequence[int] = (0,),
          split: str = "test", out_dir=None) -> SweepResult:
    """Train and evaluate once per (value, seed); rows hold seed-averaged metrics."""
    from .train import train

    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    result = SweepResult(axis)
    for value in values:
        cfg = replace(model_config, **{SWEEP_AXES[axis]: type(getattr(model_config, SWEEP_AXES[axis]))(value)})
        try:
            cfg.validate()
        except ValueError as exc:
            log.warning("sweep %s=%s skipped: %s", axis, value, exc)
            result.skipped.append({"value": value, "reason": str(exc)})
            continue
        per_seed = []
        for seed in seeds:
            tcfg = replace(train_config, seed=seed, checkpoint_dir=None)
            run = train(cfg, tcfg, dataset)
            rep = evaluate_model(cfg, run.best.params, dataset.split(split), k=20)
            per_seed.append({"seed": seed, "P@20": rep.precision, "MRR@20": rep.mrr})
            log.info("sweep %s=%s seed=%d P@20=%.4f MRR@20=%.4f", axis, value, seed, rep.precision, rep.mrr)
        result.rows.append({
            "value": value,
            "P@20": float(np.mean([r["P@20"] for r in per_seed])),
            "MRR@20": float(np.mean([r["MRR@20"] for r in per_seed])),
            "seeds": per_seed,
        })
    if out_dir is not None:
        write_sweep(result, out_dir)
    return result


def write_sweep(result: SweepResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.json").write_text(json.dumps(result.to_dict(), indent=2) + "\n")
    (out / "sweep.tsv").write_text(result.to_tsv())
    (out / "sweep.txt").write_text(result.to_text())


def write_report(report: MetricsReport, out_dir, extra: dict | None = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {**report.to_dict(), **(extra or {})}
    (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    (out / "report.txt").write_text(format_report(report))
    return payload


def format_report(report: MetricsReport) -> str:
    k = report.k
    return (f"{'metric':<10}{'value':>10}\n"
            f"{f'P@{k}':<10}{100 * report.precision:>10.2f}\n"
            f"{f'MRR@{k}':<10}{100 * report.mrr:>10.2f}\n"
            f"{'n':<10}{report.n_evaluated:>10d}\n")
