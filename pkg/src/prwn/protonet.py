"""Prototypical-network pieces: embedding MLP, prototypes, classification, refinement.

Prototype matrices are ``Tensor``s of shape [N_c x E] whose row ``c`` belongs
to the episode's ``c``-th class; class probabilities are [n x N_c] tensors.
Everything here is differentiable w.r.t. the embedding parameters.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import Counter
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DataError, DimensionError, StorageError

PROB_FLOOR = 1e-12


class EmbeddingNet:
    """Feedforward embedding ``[d, h1, ..., E]`` with ReLU between layers.

    Parameters are stored as ``[W0, b0, W1, b1, ...]`` with ``W`` of shape
    (fan_in, fan_out) and ``b`` of shape (1, fan_out).
    """

    def __init__(self, sizes: Sequence[int], params: Sequence[np.ndarray] | None = None,
                 seed: int = 0, dtype=np.float32):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ConfigError(f"invalid layer sizes {sizes}")
        if sizes[-1] < 2:
            raise ConfigError(f"embedding dimension must be >= 2, got {sizes[-1]}")
        self.sizes = sizes
        if params is None:
            params = glorot_init(sizes, seed, dtype)
        params = [np.asarray(p) for p in params]
        expected = self.param_shapes()
        if [p.shape for p in params] != expected:
            raise DimensionError(f"parameter shapes {[p.shape for p in params]} != {expected}")
        if not all(np.all(np.isfinite(p)) for p in params):
            raise ContractError("embedding parameters must be finite")
        self.params = params

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    @property
    def dtype(self):
        return self.params[0].dtype

    def param_shapes(self) -> list[tuple[int, int]]:
        shapes = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            shapes += [(fan_in, fan_out), (1, fan_out)]
        return shapes

    @property
    def n_params(self) -> int:
        return sum(a * b for a, b in self.param_shapes())

    def copy(self) -> EmbeddingNet:
        return EmbeddingNet(self.sizes, [p.copy() for p in self.params])

    def astype(self, dtype) -> EmbeddingNet:
        return EmbeddingNet(self.sizes, [p.astype(dtype) for p in self.params])


def glorot_init(sizes: Sequence[int], seed: int, dtype=np.float32) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params.append(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype))
        params.append(np.zeros((1, fan_out), dtype))
    return params


def embed(net: EmbeddingNet, batch, params: Sequence[Tensor] | None = None) -> Tensor:
    """Map inputs [n x d] to embeddings [n x E].

    Pass ``params`` (tensors aligned with ``net.params``) to differentiate
    through the network; otherwise the stored parameters act as constants.
    """
    x = ad.as_tensor(np.asarray(batch, dtype=net.dtype) if not isinstance(batch, Tensor) else batch)
    if x.shape[1] != net.in_dim:
        raise DimensionError(f"embed: input has {x.shape[1]} features, network expects {net.in_dim}")
    ps = params if params is not None else [Tensor(p) for p in net.params]
    n_layers = len(net.sizes) - 1
    for k in range(n_layers):
        x = ad.add(ad.matmul(x, ps[2 * k]), ps[2 * k + 1])
        if k < n_layers - 1:
            x = ad.relu(x)
    return x


def one_hot(labels, n_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ContractError(f"labels outside the class roster 0..{n_classes - 1}")
    out = np.zeros((labels.size, n_classes), dtype)
    out[np.arange(labels.size), labels] = 1.0
    return out


def compute_prototypes(emb: Tensor, labels, n_classes: int | None = None) -> Tensor:
    """Per-class mean of the labeled embeddings; row c is class c."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size != emb.shape[0]:
        raise DimensionError(f"{labels.size} labels for {emb.shape[0]} embeddings")
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    assign = one_hot(labels, n_classes, emb.dtype)
    counts = assign.sum(axis=0)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise ContractError(f"classes {missing} have no labeled support point")
    return ad.div(ad.matmul(Tensor(assign.T.copy()), emb), Tensor(counts.reshape(-1, 1)))


def neg_sq_dist(emb: Tensor, protos: Tensor) -> Tensor:
    return ad.neg(ad.pairwise_sq_dist(emb, protos))


def classify(emb: Tensor, protos: Tensor) -> Tensor:
    """Class probabilities: softmax over negative squared distances to each prototype."""
    return ad.softmax_rows(neg_sq_dist(emb, protos))


def supervised_loss(probs: Tensor, labels, counter: Counter | None = None) -> Tensor:
    """Mean negative log-probability of the true class (probabilities floored at 1e-12)."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size != probs.shape[0]:
        raise DimensionError(f"{labels.size} labels for {probs.shape[0]} probability rows")
    target = Tensor(one_hot(labels, probs.shape[1], probs.dtype))
    p_true = ad.reduce_sum(ad.mul(probs, target), axis=1)
    p_true = ad.clamp_min(p_true, PROB_FLOOR, counter, "supervised")
    return ad.neg(ad.mean(ad.log(p_true)))


def refine_prototypes(protos: Tensor, labeled_emb: Tensor, labels, unlabeled_emb: Tensor
                      ) -> Tensor:
    """One soft k-means step over labeled (hard assignment) and unlabeled points.

    Unlabeled points are softly assigned with :func:`classify` against the
    original prototypes. With no unlabeled points the input prototypes are
    returned unchanged.
    """
    if unlabeled_emb.shape[0] == 0:
        return protos
    if unlabeled_emb.shape[1] != protos.shape[1] or labeled_emb.shape[1] != protos.shape[1]:
        raise DimensionError("refine_prototypes: embedding dimensions disagree")
    n_classes = protos.shape[0]
    hard = Tensor(one_hot(labels, n_classes, labeled_emb.dtype))
    soft = classify(unlabeled_emb, protos)
    weighted = ad.add(ad.matmul(ad.transpose(hard), labeled_emb),
                      ad.matmul(ad.transpose(soft), unlabeled_emb))
    mass = ad.add(ad.transpose(ad.reduce_sum(hard, axis=0)),
                  ad.transpose(ad.reduce_sum(soft, axis=0)))
    return ad.div(weighted, mass)


def predict(probs: Tensor) -> np.ndarray:
    return probs.data.argmax(axis=1)


# --- checkpoint container -------------------------------------------------

CHECKPOINT_MAGIC = b"PRWNCKPT"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sII")


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def checkpoint_bytes(net: EmbeddingNet, config: dict | None = None, meta: dict | None = None
                     ) -> bytes:
    """Serialize ``net``: magic, version, JSON header length, JSON header, fp32 LE payload."""
    header = {
        "architecture": {"type": "mlp-relu", "sizes": net.sizes},
        "params": [{"name": f"{'W' if i % 2 == 0 else 'b'}{i // 2}", "shape": list(p.shape)}
                   for i, p in enumerate(net.params)],
        "dtype": "<f4",
        "config_digest": config_digest(config or {}),
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in net.params)
    return _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(head)) + head + payload


def parse_checkpoint(blob: bytes) -> tuple[EmbeddingNet, dict]:
    if len(blob) < _HEADER.size:
        raise DataError("checkpoint truncated")
    magic, version, head_len = _HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise DataError("not a PRWN checkpoint")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    start = _HEADER.size
    header = json.loads(blob[start:start + head_len].decode())
    offset = start + head_len
    params = []
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        chunk = blob[offset:offset + 4 * n]
        if len(chunk) != 4 * n:
            raise DataError(f"checkpoint payload truncated at {entry['name']}")
        params.append(np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(shape))
        offset += 4 * n
    if offset != len(blob):
        raise DataError("trailing bytes after checkpoint payload")
    return EmbeddingNet(header["architecture"]["sizes"], params), header


def save_checkpoint(net: EmbeddingNet, path: str | Path, config: dict | None = None,
                    meta: dict | None = None) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(checkpoint_bytes(net, config, meta))
    except OSError as e:
        raise StorageError(str(e)) from e
    return path


def load_checkpoint(path: str | Path) -> tuple[EmbeddingNet, dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise StorageError(f"cannot read checkpoint {path}: {e}") from e
    return parse_checkpoint(blob)
