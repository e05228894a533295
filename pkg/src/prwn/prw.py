"""Prototypical random-walk loss.

A walker starts at a class prototype, steps to an unlabeled embedding, takes
``tau`` further steps among unlabeled embeddings (never staying put), and
steps back to a prototype. The walker loss rewards landing on the prototype
it started from; the visit loss keeps the first step spread over all
unlabeled points.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DegenerateError, DimensionError

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class PRWConfig:
    tau: int = 3
    alpha: float = 0.7
    lam: float = 0.5

    def __post_init__(self):
        if int(self.tau) != self.tau or self.tau < 0:
            raise ConfigError(f"tau must be a non-negative integer, got {self.tau}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")


@dataclass
class WalkGraph:
    """Similarities, transition matrices and walker matrices of one episode.

    ``A`` is [M x N_c], ``B`` is [M x M] (its diagonal is excluded from
    ``x2x``), ``p2x`` is [N_c x M], ``x2x`` is [M x M] (None when tau = 0),
    ``x2p`` is [M x N_c] and ``T[i]`` is the [N_c x N_c] walker matrix with
    ``i`` steps among unlabeled points.
    """

    A: Tensor | None
    B: Tensor | None
    p2x: Tensor
    x2x: Tensor | None
    x2p: Tensor
    T: list[Tensor]

    @property
    def n_classes(self) -> int:
        return self.p2x.shape[0]

    @property
    def n_points(self) -> int:
        return self.p2x.shape[1]

    @property
    def tau(self) -> int:
        return len(self.T) - 1


@dataclass
class LossBreakdown:
    l_supervised: float
    l_walker: float
    l_visit: float
    l_rw: float
    total: float
    lam: float
    alpha: float
    n_clamped: int = 0
    objective: Tensor | None = field(default=None, repr=False, compare=False)

    def as_row(self) -> dict:
        return {k: getattr(self, k) for k in
                ("l_supervised", "l_walker", "l_visit", "l_rw", "total", "n_clamped")}


def walker_matrices(p2x: Tensor, x2x: Tensor | None, x2p: Tensor, tau: int) -> list[Tensor]:
    """``T[i] = p2x @ x2x**i @ x2p`` for i = 0..tau (T[0] skips x2x entirely)."""
    if p2x.shape[1] != x2p.shape[0]:
        raise DimensionError(f"p2x {p2x.shape} and x2p {x2p.shape} do not chain")
    if tau > 0 and (x2x is None or x2x.shape != (p2x.shape[1], p2x.shape[1])):
        raise DimensionError("x2x must be [M x M] when tau > 0")
    left = p2x
    out = [ad.matmul(left, x2p)]
    for _ in range(tau):
        left = ad.matmul(left, x2x)
        out.append(ad.matmul(left, x2p))
    return out


def build_walk_graph(protos: Tensor, unlabeled_emb: Tensor, tau: int) -> WalkGraph:
    n_classes, m = protos.shape[0], unlabeled_emb.shape[0]
    if m < 1:
        raise ContractError("walk graph needs at least one unlabeled point")
    if n_classes < 2:
        raise ContractError("walk graph needs at least two prototypes")
    if m == 1 and tau >= 1:
        raise DegenerateError(
            "a single unlabeled point has no admissible point-to-point step; use tau = 0")
    A = ad.neg(ad.pairwise_sq_dist(unlabeled_emb, protos))
    p2x = ad.softmax_rows(ad.transpose(A))
    x2p = ad.softmax_rows(A)
    B = x2x = None
    if tau > 0:
        B = ad.neg(ad.pairwise_sq_dist(unlabeled_emb, unlabeled_emb))
        x2x = ad.softmax_rows(B, mask=np.eye(m, dtype=bool))
    return WalkGraph(A, B, p2x, x2x, x2p, walker_matrices(p2x, x2x, x2p, tau))


def landing_entropy(T: Tensor, counter: Counter | None = None) -> Tensor:
    """Mean cross-entropy between rows of the identity and rows of ``T``."""
    d = ad.clamp_min(ad.diag(T), LOG_FLOOR, counter, "walker")
    return ad.neg(ad.mean(ad.log(d)))


def walker_loss(T_seq: list[Tensor], alpha: float, counter: Counter | None = None) -> Tensor:
    if not T_seq:
        raise ContractError("walker_loss needs at least T[0]")
    total = None
    for i, T in enumerate(T_seq):
        weight = 1.0 if i == 0 else alpha ** i
        if weight == 0.0:
            continue
        term = landing_entropy(T, counter)
        if weight != 1.0:
            term = ad.mul(term, weight)
        total = term if total is None else ad.add(total, term)
    return total


def visit_distribution(p2x: Tensor) -> Tensor:
    """First-step visit probabilities [1 x M], averaging over starting prototypes."""
    return ad.mean(p2x, axis=0)


def visit_loss(p2x: Tensor, counter: Counter | None = None) -> Tensor:
    """Cross-entropy of the visit distribution against the uniform target."""
    P = ad.clamp_min(visit_distribution(p2x), LOG_FLOOR, counter, "visit")
    return ad.neg(ad.mean(ad.log(P)))


def total_loss(l_s, graph: WalkGraph | None, config: PRWConfig,
               counter: Counter | None = None) -> LossBreakdown:
    """Combine the supervised loss with ``lam * (walker + visit)``.

    ``graph`` may be None for episodes without unlabeled points, in which
    case the random-walk terms are zero. The ``objective`` tensor is the
    differentiable counterpart of ``total``; when ``lam == 0`` it is the
    supervised loss alone.
    """
    counter = Counter() if counter is None else counter
    before = sum(counter.values())
    ls_t = l_s if isinstance(l_s, Tensor) else Tensor(np.float64(l_s))
    if graph is None:
        lw = lv = 0.0
        objective = ls_t
    else:
        lw_t = walker_loss(graph.T, config.alpha, counter)
        lv_t = visit_loss(graph.p2x, counter)
        lw, lv = lw_t.item(), lv_t.item()
        if config.lam == 0:
            objective = ls_t
        else:
            objective = ad.add(ls_t, ad.mul(ad.add(lw_t, lv_t), config.lam))
    ls = ls_t.item()
    l_rw = lw + lv
    return LossBreakdown(
        l_supervised=ls, l_walker=lw, l_visit=lv, l_rw=l_rw, total=ls + config.lam * l_rw,
        lam=config.lam, alpha=config.alpha, n_clamped=sum(counter.values()) - before,
        objective=objective,
    )
