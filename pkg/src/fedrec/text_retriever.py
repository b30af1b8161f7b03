"""Text-based retriever: item templates, a hashed bag-of-tokens encoder and InfoNCE training.

The encoder maps text to a unit vector:

    tokens -> FNV-1a 64 hash mod vocab_size -> mean of token embeddings -> W @ m -> L2 normalize

Queries and passages share the encoder. Two encodings are compared by
cosine similarity divided by the temperature.
"""

from __future__ import annotations

import re
import weakref
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

from .data import Catalog, ItemMeta, UserSequence
from .errors import ConfigError, EncodingError, TrainingDivergedError
from .optim import make_optimizer

QUERY_PREFIX = "query: "
PASSAGE_PREFIX = "passage: "

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1
_TOKEN_RE = re.compile(r"[^\W_]+")


@dataclass(frozen=True)
class TemplateConfig:
    include_attributes: bool = True
    last_n: int | None = 10
    noun_phrase: str = "an item"

    def __post_init__(self):
        if self.last_n is not None and self.last_n < 1:
            raise ConfigError("last_n must be >= 1 or None")


def describe_item(meta: ItemMeta, include_attributes: bool = True, noun_phrase: str = "an item") -> str:
    if include_attributes and meta.attributes:
        return f"{meta.title}, {noun_phrase} about {', '.join(meta.attributes)}"
    return meta.title


def render_query(
    history: Sequence[str],
    catalog: Catalog,
    include_attributes: bool = True,
    last_n: int | None = None,
    noun_phrase: str = "an item",
) -> str:
    if not history:
        raise ValueError("cannot render a query from an empty history")
    if last_n is not None:
        history = history[-last_n:]
    parts = [describe_item(catalog[i], include_attributes, noun_phrase) for i in history]
    return QUERY_PREFIX + "; ".join(parts)


def render_passage(item_id: str, catalog: Catalog, include_attributes: bool = True, noun_phrase: str = "an item") -> str:
    return PASSAGE_PREFIX + describe_item(catalog[item_id], include_attributes, noun_phrase)


def query_for(history: Sequence[str], catalog: Catalog, template: TemplateConfig) -> str:
    return render_query(history, catalog, template.include_attributes, template.last_n, template.noun_phrase)


def passage_for(item_id: str, catalog: Catalog, template: TemplateConfig) -> str:
    return render_passage(item_id, catalog, template.include_attributes, template.noun_phrase)


# ---------------------------------------------------------------- tokens


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def fnv1a_64(token: str) -> int:
    h = _FNV_OFFSET
    for byte in token.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def token_ids(text: str, vocab_size: int) -> list[int]:
    return [fnv1a_64(tok) % vocab_size for tok in tokenize(text)]


def pooling_matrix(texts: Sequence[str], vocab_size: int) -> sparse.csr_matrix:
    """Sparse (len(texts), vocab_size) matrix whose row-product with the embeddings is mean pooling."""
    rows, cols, vals = [], [], []
    for r, text in enumerate(texts):
        ids = token_ids(text, vocab_size)
        if not ids:
            raise EncodingError(f"text has no tokens: {text!r}")
        w = 1.0 / len(ids)
        rows.extend([r] * len(ids))
        cols.extend(ids)
        vals.extend([w] * len(ids))
    return sparse.csr_matrix((vals, (rows, cols)), shape=(len(texts), vocab_size))


# ---------------------------------------------------------------- parameters


@dataclass(eq=False)
class TextEncoderParams:
    token_embeddings: np.ndarray  # (vocab_size, dim)
    projection: np.ndarray  # (dim, dim)
    temperature: float = 0.05

    def __post_init__(self):
        v, d = self.token_embeddings.shape
        if self.projection.shape != (d, d):
            raise ValueError(f"projection must be {d}x{d}")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        for arr in (self.token_embeddings, self.projection):
            arr.setflags(write=False)

    @property
    def vocab_size(self) -> int:
        return self.token_embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.token_embeddings.shape[1]

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {"token_embeddings": self.token_embeddings.shape, "projection": self.projection.shape}

    def flatten(self) -> np.ndarray:
        """Trainable entries only; the temperature is fixed and travels separately."""
        return np.concatenate([self.token_embeddings.ravel(), self.projection.ravel()])

    @classmethod
    def from_flat(cls, flat: np.ndarray, vocab_size: int, dim: int, temperature: float) -> "TextEncoderParams":
        flat = np.asarray(flat, dtype=np.float64)
        split = vocab_size * dim
        if flat.shape != (split + dim * dim,):
            raise ValueError(f"flat vector has {flat.size} entries, expected {split + dim * dim}")
        return cls(flat[:split].reshape(vocab_size, dim).copy(), flat[split:].reshape(dim, dim).copy(), temperature)


def init_text_params(vocab_size: int = 2**15, dim: int = 64, temperature: float = 0.05, seed: int = 0) -> TextEncoderParams:
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(dim)
    return TextEncoderParams(rng.uniform(-bound, bound, size=(vocab_size, dim)), np.eye(dim), temperature)


# ---------------------------------------------------------------- encoding


def _encode_pooled(params: TextEncoderParams, pool: sparse.csr_matrix):
    pooled = pool @ params.token_embeddings
    z = pooled @ params.projection.T
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms == 0.0) or not np.all(np.isfinite(norms)):
        raise EncodingError("encoder produced a zero or non-finite vector; parameters are degenerate")
    return z / norms[:, None], pooled, norms


def encode_many(params: TextEncoderParams, texts: Sequence[str]) -> np.ndarray:
    return _encode_pooled(params, pooling_matrix(texts, params.vocab_size))[0]


def encode(params: TextEncoderParams, text: str) -> np.ndarray:
    return encode_many(params, [text])[0]


def pair_score(q: np.ndarray, p: np.ndarray, tau: float) -> float:
    return float(np.dot(q, p) / tau)


@lru_cache(maxsize=32)
def _passage_pool(catalog: Catalog, template: TemplateConfig, vocab_size: int) -> sparse.csr_matrix:
    return pooling_matrix([passage_for(i, catalog, template) for i in catalog.item_ids], vocab_size)


# Keyed weakly on the parameter object: new parameters mean a new object, so a
# stale passage matrix can never be served after an update.
_passage_cache: "weakref.WeakKeyDictionary[TextEncoderParams, dict]" = weakref.WeakKeyDictionary()


def passage_matrix(params: TextEncoderParams, catalog: Catalog, template: TemplateConfig = TemplateConfig()) -> np.ndarray:
    per_params = _passage_cache.setdefault(params, {})
    key = (catalog, template)
    if key not in per_params:
        mat = _encode_pooled(params, _passage_pool(catalog, template, params.vocab_size))[0]
        mat.setflags(write=False)
        per_params[key] = mat
    return per_params[key]


def text_score_catalog(
    params: TextEncoderParams, query_text: str, catalog: Catalog, template: TemplateConfig = TemplateConfig()
) -> np.ndarray:
    """Temperature-scaled cosine between the query and every catalog passage."""
    if len(catalog) == 0:
        raise ValueError("catalog is empty")
    q = encode(params, query_text)
    return passage_matrix(params, catalog, template) @ q / params.temperature


# ---------------------------------------------------------------- InfoNCE


def infonce_from_scores(scores: np.ndarray) -> float:
    """Mean InfoNCE loss for a (batch, 1 + n_negatives) score matrix with the positive in column 0."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    top = scores.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(scores - top).sum(axis=1))
    return float(np.mean(lse - scores[:, 0]))


def sample_negatives(rng: np.random.Generator, n_items: int, positive: int, n_negatives: int) -> np.ndarray:
    """Uniform draw without replacement from every index except ``positive``."""
    if n_negatives > n_items - 1:
        raise ConfigError(f"cannot draw {n_negatives} negatives from a catalog of {n_items} items")
    draw = rng.choice(n_items - 1, size=n_negatives, replace=False)
    return draw + (draw >= positive)


def infonce_loss_and_grad(
    params: TextEncoderParams,
    queries: Sequence[str],
    positives: np.ndarray,
    negatives: np.ndarray,
    catalog: Catalog,
    template: TemplateConfig = TemplateConfig(),
    need_grad: bool = True,
):
    """Loss and flat gradient for fixed negatives.

    ``positives`` has shape (batch,) and ``negatives`` (batch, n_negatives),
    both holding catalog indices.
    """
    tau = params.temperature
    cols = np.concatenate([np.asarray(positives)[:, None], np.asarray(negatives)], axis=1)
    needed, inverse = np.unique(cols, return_inverse=True)
    inverse = inverse.reshape(cols.shape)
    q_pool = pooling_matrix(list(queries), params.vocab_size)
    p_pool = _passage_pool(catalog, template, params.vocab_size)[needed]

    Q, q_pooled, q_norm = _encode_pooled(params, q_pool)
    P, p_pooled, p_norm = _encode_pooled(params, p_pool)
    scores = np.einsum("bd,bjd->bj", Q, P[inverse]) / tau
    top = scores.max(axis=1, keepdims=True)
    expd = np.exp(scores - top)
    denom = expd.sum(axis=1, keepdims=True)
    loss = float(np.mean(top[:, 0] + np.log(denom[:, 0]) - scores[:, 0]))
    if not need_grad:
        return loss, None

    n_batch = scores.shape[0]
    d_scores = expd / denom
    d_scores[:, 0] -= 1.0
    d_scores /= n_batch * tau
    dQ = np.einsum("bj,bjd->bd", d_scores, P[inverse])
    dP = np.zeros_like(P)
    np.add.at(dP, inverse.ravel(), (d_scores[:, :, None] * Q[:, None, :]).reshape(-1, Q.shape[1]))

    W = params.projection
    d_emb = np.zeros_like(params.token_embeddings)
    dW = np.zeros_like(W)
    for unit, pooled, norms, d_unit, pool in ((Q, q_pooled, q_norm, dQ, q_pool), (P, p_pooled, p_norm, dP, p_pool)):
        d_z = (d_unit - unit * np.sum(unit * d_unit, axis=1, keepdims=True)) / norms[:, None]
        dW += d_z.T @ pooled
        d_emb += pool.T @ (d_z @ W)
    return loss, np.concatenate([d_emb.ravel(), dW.ravel()])


def infonce_loss(
    params: TextEncoderParams,
    batch: Sequence[tuple[str, str]],
    catalog: Catalog,
    n_negatives: int,
    seed: int,
    template: TemplateConfig = TemplateConfig(),
) -> float:
    """InfoNCE over (query text, positive item id) pairs with seeded per-example negatives."""
    if n_negatives < 1:
        raise ConfigError("n_negatives must be >= 1")
    rng = np.random.default_rng(seed)
    positives = catalog.indices([item for _, item in batch])
    negatives = np.stack([sample_negatives(rng, len(catalog), int(p), n_negatives) for p in positives])
    return infonce_loss_and_grad(params, [q for q, _ in batch], positives, negatives, catalog, template, False)[0]


@dataclass(frozen=True)
class TextTrainConfig:
    learning_rate: float = 1e-6
    local_epochs: int = 2
    batch_size: int = 32
    n_negatives: int = 32
    seed: int = 0
    optimizer: str = "sgd"
    weight_decay: float = 0.0
    template: TemplateConfig = field(default_factory=TemplateConfig)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.local_epochs < 1 or self.batch_size < 1 or self.n_negatives < 1:
            raise ConfigError("local_epochs, batch_size and n_negatives must be >= 1")


def text_train_local(
    params: TextEncoderParams,
    client_data: Sequence[UserSequence],
    catalog: Catalog,
    cfg: TextTrainConfig,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TextEncoderParams:
    """Fine-tune the encoder on one client: queries from histories, passages from targets."""
    if not client_data:
        raise ConfigError("client_data is empty")
    if cfg.n_negatives > len(catalog) - 1:
        raise ConfigError(f"cannot draw {cfg.n_negatives} negatives from a catalog of {len(catalog)} items")
    queries = [query_for(s.history, catalog, cfg.template) for s in client_data]
    targets = catalog.indices([s.target for s in client_data])
    vocab, dim, tau = params.vocab_size, params.dim, params.temperature
    theta = params.flatten()
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(cfg.local_epochs):
        order = rng.permutation(len(queries))
        total = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            chunk = order[start : start + cfg.batch_size]
            pos = targets[chunk]
            neg = np.stack([sample_negatives(rng, len(catalog), int(p), cfg.n_negatives) for p in pos])
            current = TextEncoderParams.from_flat(theta, vocab, dim, tau)
            loss, grad = infonce_loss_and_grad(current, [queries[i] for i in chunk], pos, neg, catalog, cfg.template)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingDivergedError(f"text retriever diverged at epoch {epoch}, batch {b}", epoch, b)
            theta = opt.step(theta, grad)
            total += loss * len(chunk)
        if on_epoch is not None:
            on_epoch(epoch, total / len(queries))
    return TextEncoderParams.from_flat(theta, vocab, dim, tau)
