"""ID-based sequential retriever: a diagonal linear recurrence over tied item embeddings.

    h_0 = 0,  h_t = a * h_{t-1} + B @ E[x_t],  logits_j = <h_l, E[j]>

with ``a = sigmoid(raw_decay)`` so every decay stays in (0, 1). Gradients are
written out by hand (backpropagation through time), and the whole batch is
processed at once by left-padding histories: a zero input keeps ``h`` at zero,
so padding steps contribute nothing to the forward pass or the gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import Catalog, UserSequence
from .errors import ConfigError, TrainingDivergedError
from .optim import make_optimizer


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(eq=False)
class IdRetrieverParams:
    item_embeddings: np.ndarray  # (n_items, d), shared by input lookup and output scoring
    raw_decay: np.ndarray  # (d,)
    input_map: np.ndarray  # (d, d)

    def __post_init__(self):
        n, d = self.item_embeddings.shape
        if self.raw_decay.shape != (d,) or self.input_map.shape != (d, d):
            raise ValueError(f"inconsistent shapes for d={d}")
        for arr in (self.item_embeddings, self.raw_decay, self.input_map):
            arr.setflags(write=False)

    @property
    def d(self) -> int:
        return self.item_embeddings.shape[1]

    @property
    def n_items(self) -> int:
        return self.item_embeddings.shape[0]

    @property
    def decay(self) -> np.ndarray:
        return _sigmoid(self.raw_decay)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "item_embeddings": self.item_embeddings.shape,
            "raw_decay": self.raw_decay.shape,
            "input_map": self.input_map.shape,
        }

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.item_embeddings.ravel(), self.raw_decay, self.input_map.ravel()])

    @classmethod
    def from_flat(cls, flat: np.ndarray, n_items: int, d: int) -> "IdRetrieverParams":
        flat = np.asarray(flat, dtype=np.float64)
        expected = n_items * d + d + d * d
        if flat.shape != (expected,):
            raise ValueError(f"flat vector has {flat.size} entries, expected {expected}")
        e_end = n_items * d
        return cls(
            flat[:e_end].reshape(n_items, d).copy(),
            flat[e_end : e_end + d].copy(),
            flat[e_end + d :].reshape(d, d).copy(),
        )


def init_id_params(n_items: int, d: int = 32, seed: int = 0) -> IdRetrieverParams:
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(d)
    return IdRetrieverParams(
        rng.uniform(-bound, bound, size=(n_items, d)),
        np.zeros(d),
        rng.uniform(-bound, bound, size=(d, d)),
    )


@dataclass(frozen=True)
class IdTrainConfig:
    learning_rate: float = 1e-3
    local_epochs: int = 80
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "sgd"
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigError("local_epochs and batch_size must be >= 1")


# ---------------------------------------------------------------- batching


def pad_histories(histories: Sequence[Sequence[str]], catalog: Catalog) -> tuple[np.ndarray, np.ndarray]:
    """Left-pad item-id histories into an index matrix and a {0,1} mask."""
    if not histories:
        raise ValueError("empty batch")
    length = max(len(h) for h in histories)
    idx = np.zeros((len(histories), length), dtype=np.int64)
    mask = np.zeros((len(histories), length))
    for b, hist in enumerate(histories):
        if not hist:
            raise ValueError("empty history: the recurrence needs at least one item")
        idx[b, length - len(hist) :] = catalog.indices(hist)
        mask[b, length - len(hist) :] = 1.0
    return idx, mask


def _forward(params: IdRetrieverParams, idx: np.ndarray, mask: np.ndarray):
    E, B, a = params.item_embeddings, params.input_map, params.decay
    n_batch, length = idx.shape
    hs = np.zeros((length + 1, n_batch, params.d))
    for t in range(length):
        u = (E[idx[:, t]] @ B.T) * mask[:, t, None]
        hs[t + 1] = a * hs[t] + u
    logits = hs[-1] @ E.T
    return logits, hs


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def id_logits(params: IdRetrieverParams, idx: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return _forward(params, idx, mask)[0]


def id_forward(params: IdRetrieverParams, history: Sequence[str], catalog: Catalog) -> np.ndarray:
    """Score every catalog item for one history; returns logits of length ``len(catalog)``."""
    if len(history) == 0:
        raise ValueError("empty history: the recurrence needs at least one item")
    idx, mask = pad_histories([history], catalog)
    return id_logits(params, idx, mask)[0]


def id_loss_and_grad(params: IdRetrieverParams, idx: np.ndarray, mask: np.ndarray, targets: np.ndarray,
                     need_grad: bool = True):
    """Mean cross-entropy of the targets under full-catalog softmax, and its gradient.

    The gradient is returned as a flat vector in ``params.flatten()`` layout.
    """
    E, B, a = params.item_embeddings, params.input_map, params.decay
    logits, hs = _forward(params, idx, mask)
    n_batch, length = idx.shape
    logp = _log_softmax(logits)
    loss = -logp[np.arange(n_batch), targets].mean()
    if not need_grad:
        return loss, None

    g = np.exp(logp)
    g[np.arange(n_batch), targets] -= 1.0
    g /= n_batch

    dE = g.T @ hs[-1]
    dB = np.zeros_like(B)
    da = np.zeros_like(a)
    dh = g @ E
    for t in range(length - 1, -1, -1):
        da += (dh * hs[t]).sum(axis=0)
        du = dh * mask[:, t, None]
        x_emb = E[idx[:, t]]
        dB += du.T @ x_emb
        np.add.at(dE, idx[:, t], du @ B)
        dh = dh * a
    d_raw = da * a * (1.0 - a)
    return loss, np.concatenate([dE.ravel(), d_raw, dB.ravel()])


def _encode_batch(batch: Sequence[UserSequence], catalog: Catalog):
    idx, mask = pad_histories([s.history for s in batch], catalog)
    return idx, mask, catalog.indices([s.target for s in batch])


def id_ce_loss(params: IdRetrieverParams, batch: Sequence[UserSequence], catalog: Catalog) -> float:
    if not batch:
        raise ValueError("id_ce_loss needs a nonempty batch")
    idx, mask, targets = _encode_batch(batch, catalog)
    return float(id_loss_and_grad(params, idx, mask, targets, need_grad=False)[0])


def id_train_local(
    params: IdRetrieverParams,
    client_data: Sequence[UserSequence],
    catalog: Catalog,
    cfg: IdTrainConfig,
    on_epoch: Callable[[int, float], None] | None = None,
) -> IdRetrieverParams:
    """Minibatch training on one client's sequences; returns new parameters."""
    if not client_data:
        raise ConfigError("client_data is empty")
    n_items, d = params.n_items, params.d
    theta = params.flatten()
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    data = list(client_data)
    for epoch in range(cfg.local_epochs):
        order = rng.permutation(len(data))
        losses = []
        for b, start in enumerate(range(0, len(data), cfg.batch_size)):
            batch = [data[i] for i in order[start : start + cfg.batch_size]]
            idx, mask, targets = _encode_batch(batch, catalog)
            current = IdRetrieverParams.from_flat(theta, n_items, d)
            loss, grad = id_loss_and_grad(current, idx, mask, targets)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingDivergedError(f"id retriever diverged at epoch {epoch}, batch {b}", epoch, b)
            theta = opt.step(theta, grad)
            losses.append(loss * len(batch))
        if on_epoch is not None:
            on_epoch(epoch, float(np.sum(losses) / len(data)))
    return IdRetrieverParams.from_flat(theta, n_items, d)
