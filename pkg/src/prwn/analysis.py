"""Diagnostics: landing probabilities, visit splits, accuracy with confidence intervals.

Per-episode metrics CSV columns::

    episode, accuracy, landing_tau0 .. landing_tau<K>, p_clean, p_dist,
    filter_precision, filter_recall

Empty cells mean "not applicable" (e.g. no unlabeled points, no distractors).
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import protonet as pn
from .autodiff import Tensor
from .episodes import DatasetSplit, Episode, EpisodeSpec, episode_stream
from .errors import ContractError, StorageError
from .inference import filter_distractors, predict_episode
from .prw import WalkGraph, build_walk_graph, visit_distribution

log = logging.getLogger(__name__)


def landing_probability(graph: WalkGraph, tau: int) -> float:
    """Mean return probability ``trace(T[tau]) / N_c``."""
    if not 0 <= tau <= graph.tau:
        raise ContractError(f"tau={tau} outside the graph's range 0..{graph.tau}")
    T = graph.T[tau].data
    return float(np.trace(T)) / T.shape[0]


def visit_split(p2x, distractor_flags) -> tuple[float, float]:
    """Visit mass landing on clean vs distractor points."""
    p2x = p2x.data if isinstance(p2x, Tensor) else np.asarray(p2x)
    flags = np.asarray(distractor_flags, dtype=bool)
    if flags.size != p2x.shape[1]:
        raise ContractError(f"{flags.size} flags for {p2x.shape[1]} unlabeled points")
    P = p2x.mean(axis=0)
    return float(P[~flags].sum()), float(P[flags].sum())


@dataclass
class EvalResult:
    mean: float
    ci95: float
    accuracies: list[float] = field(repr=False)

    @property
    def n(self) -> int:
        return len(self.accuracies)


def mean_ci(values: Sequence[float]) -> tuple[float, float]:
    """Mean and 1.96 * sample std / sqrt(n); sums are exact so order does not matter."""
    n = len(values)
    if n == 0:
        raise ContractError("need at least one value")
    m = math.fsum(values) / n
    if n == 1:
        return m, 0.0
    var = math.fsum((v - m) ** 2 for v in values) / (n - 1)
    return m, 1.96 * math.sqrt(var) / math.sqrt(n)


def episode_accuracy(net: pn.EmbeddingNet, episode: Episode, mode: str = "plain") -> float:
    pred, _ = predict_episode(net, episode, mode)
    return float(np.mean(pred == episode.query_y))


def evaluate(net: pn.EmbeddingNet, episodes: Iterable[Episode], n_episodes: int | None = None,
             mode: str = "plain") -> EvalResult:
    accs = []
    for k, ep in enumerate(episodes):
        if n_episodes is not None and k >= n_episodes:
            break
        accs.append(episode_accuracy(net, ep, mode))
    if not accs:
        raise ContractError("evaluate needs at least one episode")
    m, ci = mean_ci(accs)
    return EvalResult(m, ci, accs)


def evaluate_split(net: pn.EmbeddingNet, split: DatasetSplit, spec: EpisodeSpec, n_episodes: int,
                   seed: int | None = None, mode: str = "plain") -> EvalResult:
    return evaluate(net, episode_stream(split, spec, n_episodes, seed), n_episodes, mode)


@dataclass
class MetricsRecord:
    episode: int
    accuracy: float
    landing: list[float]
    p_clean: float | None = None
    p_dist: float | None = None
    filter_precision: float | None = None
    filter_recall: float | None = None


def episode_graph(net: pn.EmbeddingNet, episode: Episode, tau: int) -> WalkGraph | None:
    if episode.unlabeled_x.shape[0] == 0:
        return None
    support = pn.embed(net, episode.support_x)
    protos = pn.compute_prototypes(support, episode.support_y, episode.n_classes)
    unl = pn.embed(net, episode.unlabeled_x)
    return build_walk_graph(protos, unl, tau if unl.shape[0] > 1 else 0)


def diagnose_episode(net: pn.EmbeddingNet, episode: Episode, index: int, tau_max: int = 5,
                     mode: str = "plain") -> MetricsRecord:
    rec = MetricsRecord(index, episode_accuracy(net, episode, mode), [])
    graph = episode_graph(net, episode, tau_max)
    if graph is None:
        return rec
    rec.landing = [landing_probability(graph, t) for t in range(graph.tau + 1)]
    flags = episode.unlabeled_distractor
    if flags.any():
        rec.p_clean, rec.p_dist = visit_split(graph.p2x, flags)
        dropped = filter_distractors(graph).discarded
        hit = int(flags[dropped].sum())
        rec.filter_precision = hit / dropped.size if dropped.size else 1.0
        rec.filter_recall = hit / int(flags.sum())
    return rec


def diagnose_split(net: pn.EmbeddingNet, split: DatasetSplit, spec: EpisodeSpec, n_episodes: int,
                   seed: int | None = None, tau_max: int = 5, mode: str = "plain"
                   ) -> list[MetricsRecord]:
    return [diagnose_episode(net, ep, k, tau_max, mode)
            for k, ep in enumerate(episode_stream(split, spec, n_episodes, seed))]


def landing_curve(records: Sequence[MetricsRecord]) -> list[float]:
    rows = [r.landing for r in records if r.landing]
    if not rows:
        return []
    width = min(len(r) for r in rows)
    return [math.fsum(r[t] for r in rows) / len(rows) for t in range(width)]


def mean_p_clean(records: Sequence[MetricsRecord]) -> float | None:
    vals = [r.p_clean for r in records if r.p_clean is not None]
    return math.fsum(vals) / len(vals) if vals else None


def higher_way_sweep(net: pn.EmbeddingNet, split: DatasetSplit, ways: Sequence[int],
                     template: EpisodeSpec, n_episodes: int, seed: int | None = None,
                     mode: str = "plain", baseline: pn.EmbeddingNet | None = None) -> list[dict]:
    """Accuracy as the number of classes grows; N_s, N_q, N_u stay fixed."""
    rows = []
    for way in ways:
        spec = template.replace(n_classes=int(way))
        res = evaluate_split(net, split, spec, n_episodes, seed, mode)
        row = {"way": int(way), "accuracy": res.mean, "ci95": res.ci95}
        if baseline is not None:
            base = evaluate_split(baseline, split, spec, n_episodes, seed, mode)
            row["baseline_accuracy"] = base.mean
            row["relative_improvement"] = relative_improvement(res.mean, base.mean)
        rows.append(row)
    accs = [r["accuracy"] for r in rows]
    if any(b > a for a, b in zip(accs, accs[1:])):
        log.warning("accuracy is not monotone non-increasing in the number of ways: %s", accs)
    return rows


def relative_improvement(acc_model: float, acc_base: float) -> float:
    return (acc_model - acc_base) / acc_base if acc_base else math.inf


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_records_csv(records: Sequence[MetricsRecord], path: str | Path) -> Path:
    width = max((len(r.landing) for r in records), default=0)
    header = (["episode", "accuracy"] + [f"landing_tau{t}" for t in range(width)]
              + ["p_clean", "p_dist", "filter_precision", "filter_recall"])
    rows = []
    for r in records:
        landing = list(r.landing) + [None] * (width - len(r.landing))
        rows.append([r.episode, r.accuracy, *landing, r.p_clean, r.p_dist,
                     r.filter_precision, r.filter_recall])
    return write_csv(path, header, rows)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_cell(v) for v in row])
    except OSError as e:
        raise StorageError(str(e)) from e
    return path


def write_json(path: str | Path, payload: dict) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise StorageError(str(e)) from e
    return path
