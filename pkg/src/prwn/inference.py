"""Test-time adaptation: soft k-means refinement and the random-walk distractor filter."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import protonet as pn
from .autodiff import Tensor
from .episodes import Episode
from .errors import ConfigError
from .prw import WalkGraph, build_walk_graph

MODES = ("plain", "ssinfer", "ssinfer-filter")


@dataclass
class FilterScores:
    scores: np.ndarray  # [M], probability that point j lies on a walk returning to its start
    kept: np.ndarray    # indices into the unlabeled points

    @property
    def discarded(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.scores.size), self.kept)


def return_scores(p2x: np.ndarray, x2p: np.ndarray) -> np.ndarray:
    # sum over prototypes c of p2x[c, j] * x2p[j, c]
    return (p2x * x2p.T).sum(axis=0)


def median_keep(scores: np.ndarray) -> np.ndarray:
    """Indices with score >= median (even counts use the mean of the middle pair)."""
    if scores.size == 0:
        return np.zeros(0, np.int64)
    return np.flatnonzero(scores >= np.median(scores))


def filter_distractors(graph: WalkGraph | None) -> FilterScores:
    if graph is None or graph.n_points == 0:
        return FilterScores(np.zeros(0), np.zeros(0, np.int64))
    s = return_scores(graph.p2x.data, graph.x2p.data)
    return FilterScores(s, median_keep(s))


def semi_supervised_predict(episode: Episode, net: pn.EmbeddingNet, use_filter: bool = False,
                            refine: bool = True) -> tuple[np.ndarray, Tensor]:
    """Embed, build prototypes, optionally filter and refine, then classify the queries.

    Returns ``(predicted labels, class probabilities)`` for the query set.
    """
    n_c = episode.n_classes
    support = pn.embed(net, episode.support_x)
    protos = pn.compute_prototypes(support, episode.support_y, n_c)
    if refine and episode.unlabeled_x.shape[0] > 0:
        unl = pn.embed(net, episode.unlabeled_x)
        if use_filter:
            kept = filter_distractors(build_walk_graph(protos, unl, tau=0)).kept
            unl = Tensor(unl.data[kept])
        protos = pn.refine_prototypes(protos, support, episode.support_y, unl)
    probs = pn.classify(pn.embed(net, episode.query_x), protos)
    return pn.predict(probs), probs


def predict_episode(net: pn.EmbeddingNet, episode: Episode, mode: str = "plain"
                    ) -> tuple[np.ndarray, Tensor]:
    if mode not in MODES:
        raise ConfigError(f"unknown inference mode {mode!r}; expected one of {MODES}")
    return semi_supervised_predict(episode, net, use_filter=(mode == "ssinfer-filter"),
                                   refine=(mode != "plain"))
