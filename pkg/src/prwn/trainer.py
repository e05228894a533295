"""Episodic meta-training of the embedding network with Adam."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import protonet as pn
from .analysis import evaluate_split, write_csv
from .autodiff import Tensor
from .episodes import DatasetSplit, Episode, EpisodeSpec, sample_episode
from .errors import ConfigError, NumericError
from .prw import LossBreakdown, PRWConfig, build_walk_graph, total_loss

log = logging.getLogger(__name__)

METRICS_HEADER = ["episode", "lr", "l_supervised", "l_walker", "l_visit", "l_rw", "total",
                  "accuracy", "n_clamped", "val_accuracy"]


@dataclass
class TrainConfig:
    episode: EpisodeSpec = field(default_factory=EpisodeSpec)
    prw: PRWConfig = field(default_factory=PRWConfig)
    hidden: tuple[int, ...] = (64, 64)
    embed_dim: int = 32
    lr: float = 1e-3
    halve_every: int = 1000
    episodes: int = 4000
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    val_every: int = 500
    val_episodes: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.halve_every < 1:
            raise ConfigError("halve_every must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.episodes < 0 or self.val_every < 0 or self.val_episodes < 0:
            raise ConfigError("episode counts must be >= 0")
        self.hidden = tuple(int(h) for h in self.hidden)

    def layer_sizes(self, in_dim: int) -> list[int]:
        return [in_dim, *self.hidden, self.embed_dim]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> AdamState:
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params: list[np.ndarray], grads: Sequence[np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8,
              episode: int | None = None) -> list[np.ndarray]:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if len(grads) != len(params):
        raise ConfigError(f"{len(grads)} gradients for {len(params)} parameters")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient at episode {episode}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g.astype(p.dtype, copy=False)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)
    return params


def lr_schedule(step: int, lr0: float, interval: int) -> float:
    """Halve the learning rate every ``interval`` steps."""
    if step < 0:
        raise ConfigError("step must be >= 0")
    return lr0 * 0.5 ** (step // interval)


def episode_objective(net: pn.EmbeddingNet, params: Sequence[Tensor], episode: Episode,
                      prw: PRWConfig, counter: Counter | None = None
                      ) -> tuple[LossBreakdown, float]:
    """Loss breakdown (with a differentiable ``objective``) and query accuracy for one episode."""
    counter = Counter() if counter is None else counter
    n_s, n_q, m = len(episode.support_y), len(episode.query_y), episode.unlabeled_x.shape[0]
    x = np.concatenate([episode.support_x, episode.query_x, episode.unlabeled_x]).astype(
        net.dtype, copy=False)
    h = pn.embed(net, x, params)
    support = ad.take_rows(h, np.arange(n_s))
    query = ad.take_rows(h, np.arange(n_s, n_s + n_q))
    protos = pn.compute_prototypes(support, episode.support_y, episode.n_classes)
    probs = pn.classify(query, protos)
    l_s = pn.supervised_loss(probs, episode.query_y, counter)
    graph = None
    if m > 0:
        unl = ad.take_rows(h, np.arange(n_s + n_q, n_s + n_q + m))
        graph = build_walk_graph(protos, unl, prw.tau if m > 1 else 0)
    losses = total_loss(l_s, graph, prw, counter)
    acc = float(np.mean(pn.predict(probs) == episode.query_y))
    return losses, acc


def episode_gradient(net: pn.EmbeddingNet, episode: Episode, prw: PRWConfig,
                     counter: Counter | None = None
                     ) -> tuple[LossBreakdown, float, list[np.ndarray]]:
    leaves = [Tensor(p, requires_grad=True) for p in net.params]
    losses, acc = episode_objective(net, leaves, episode, prw, counter)
    losses.objective.backward()
    grads = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]
    return losses, acc, grads


@dataclass
class TrainResult:
    net: pn.EmbeddingNet           # best-by-validation (or final, without validation)
    final_net: pn.EmbeddingNet
    checkpoint: bytes
    history: list[dict] = field(repr=False)
    best_val: float | None = None
    best_episode: int | None = None


def _seeds(seed: int) -> tuple[int, int, int]:
    init, train, val = np.random.SeedSequence(seed).generate_state(3)
    return int(init), int(train), int(val)


def train(config: TrainConfig, train_split: DatasetSplit, val_split: DatasetSplit | None = None,
          metrics_path: str | Path | None = None, checkpoint_path: str | Path | None = None,
          log_every: int = 500, meta: dict | None = None) -> TrainResult:
    """Meta-train on episodes sampled from ``train_split``.

    One episode per Adam step. When ``val_split`` is given, validation
    accuracy is measured every ``val_every`` episodes (and after the last one)
    on a fixed set of ``val_episodes`` episodes, and the best network is kept.
    """
    init_seed, train_seed, val_seed = _seeds(config.seed)
    net = pn.EmbeddingNet(config.layer_sizes(train_split.dataset.dim), seed=init_seed)
    state = AdamState.zeros_like(net.params)
    rng = np.random.default_rng(train_seed)
    history: list[dict] = []
    best = (None, None, net.copy())

    def validate(episode_no: int):
        nonlocal best
        res = evaluate_split(net, val_split, config.episode, config.val_episodes, val_seed)
        if best[0] is None or res.mean > best[0]:
            best = (res.mean, episode_no, net.copy())
        return res.mean

    do_val = val_split is not None and config.val_every > 0 and config.val_episodes > 0
    for k in range(config.episodes):
        lr = lr_schedule(k, config.lr, config.halve_every)
        episode = sample_episode(train_split, config.episode, rng)
        try:
            losses, acc, grads = episode_gradient(net, episode, config.prw)
        except NumericError as e:
            raise NumericError(f"episode {k}: {e}") from e
        adam_step(state, net.params, grads, lr, config.beta1, config.beta2, config.eps, episode=k)
        row = {"episode": k, "lr": lr, **losses.as_row(), "accuracy": acc, "val_accuracy": None}
        last = k == config.episodes - 1
        if do_val and ((k + 1) % config.val_every == 0 or last):
            row["val_accuracy"] = validate(k + 1)
        history.append(row)
        if log_every and ((k + 1) % log_every == 0 or last):
            log.info("episode %d lr %.3g L_S %.4f L_RW %.4f total %.4f val %s", k + 1, lr,
                     losses.l_supervised, losses.l_rw, losses.total, row["val_accuracy"])

    best_val, best_ep, best_net = best if do_val else (None, None, net.copy())
    info = {"seed": config.seed, "episodes": config.episodes, "best_episode": best_ep,
            "best_val_accuracy": best_val,
            "model": "pn-baseline" if config.prw.lam == 0 else "prwn", **(meta or {})}
    blob = pn.checkpoint_bytes(best_net, config.to_dict(), info)
    if checkpoint_path is not None:
        Path(checkpoint_path).parent.mkdir(parents=True, exist_ok=True)
        Path(checkpoint_path).write_bytes(blob)
    if metrics_path is not None:
        write_csv(metrics_path, METRICS_HEADER, ([r[h] for h in METRICS_HEADER] for r in history))
    return TrainResult(best_net, net, blob, history, best_val, best_ep)
