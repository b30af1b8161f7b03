"""Size-weighted FedAvg over both retriever families and the round loop that drives it."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import checksum, load_checkpoint, save_checkpoint
from .data import Catalog, FederatedSplit
from .errors import ConfigError, TrainingDivergedError
from .id_retriever import IdRetrieverParams, IdTrainConfig, id_train_local, init_id_params
from .text_retriever import TextEncoderParams, TextTrainConfig, init_text_params, text_train_local

log = logging.getLogger(__name__)


def fedavg(param_list: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Coordinatewise weighted mean, weights normalized by their sum.

    Normalized weights are computed in exact rational arithmetic and the sum
    runs left to right, so rescaling every weight by the same factor gives a
    bit-identical result whenever the rescaled weights are exact floats. The
    final clip only removes rounding overshoot; the exact mean always lies in
    the coordinatewise [min, max] of the inputs.
    """
    if len(param_list) == 0 or len(param_list) != len(weights):
        raise ValueError("need one weight per parameter vector and at least one vector")
    vectors = [np.asarray(v, dtype=np.float64) for v in param_list]
    shape = vectors[0].shape
    for k, v in enumerate(vectors):
        if v.shape != shape:
            raise ValueError(f"shape mismatch: vector {k} has shape {v.shape}, expected {shape}")
    exact = [Fraction(float(w)) for w in weights]
    if any(w <= 0 for w in exact):
        raise ValueError("fedavg weights must be strictly positive")
    total = sum(exact)
    normalized = [float(w / total) for w in exact]

    acc = normalized[0] * vectors[0]
    for w, v in zip(normalized[1:], vectors[1:]):
        acc = acc + w * v
    if len(vectors) == 1:
        return acc
    stacked = np.stack(vectors)
    return np.clip(acc, stacked.min(axis=0), stacked.max(axis=0))


@dataclass(eq=False)
class GlobalModel:
    id_params: IdRetrieverParams
    text_params: TextEncoderParams
    round: int = 0

    def checksum(self) -> str:
        return checksum(self.id_params.flatten(), self.text_params.flatten())


@dataclass(frozen=True)
class RoundConfig:
    global_epochs: int = 5
    id_cfg: IdTrainConfig = field(default_factory=IdTrainConfig)
    text_cfg: TextTrainConfig = field(default_factory=TextTrainConfig)
    client_parallelism: int = 1
    id_dim: int = 32
    text_vocab_size: int = 2**15
    text_dim: int = 64
    temperature: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.global_epochs < 1:
            raise ConfigError("global_epochs must be >= 1")
        if self.client_parallelism < 1:
            raise ConfigError("client_parallelism must be >= 1")


def client_seed(seed: int, client: int, round_: int) -> int:
    """Independent RNG stream per (seed, client, round); parallel and serial runs agree."""
    return int(np.random.SeedSequence([seed, client, round_]).generate_state(1)[0])


def init_global_model(n_items: int, cfg: RoundConfig) -> GlobalModel:
    return GlobalModel(
        init_id_params(n_items, cfg.id_dim, seed=cfg.seed),
        init_text_params(cfg.text_vocab_size, cfg.text_dim, cfg.temperature, seed=cfg.seed + 1),
        0,
    )


@dataclass
class ClientResult:
    client: int
    id_params: IdRetrieverParams
    text_params: TextEncoderParams
    loss_id: float
    loss_text: float
    wall_ms: float


def _train_client(model: GlobalModel, k: int, data, catalog: Catalog, cfg: RoundConfig, round_: int) -> ClientResult:
    start = time.perf_counter()
    seed = client_seed(cfg.seed, k, round_)
    id_losses: list[float] = []
    text_losses: list[float] = []
    try:
        id_params = id_train_local(
            model.id_params, data, catalog, replace(cfg.id_cfg, seed=seed), lambda e, l: id_losses.append(l)
        )
        text_params = text_train_local(
            model.text_params, data, catalog, replace(cfg.text_cfg, seed=seed), lambda e, l: text_losses.append(l)
        )
    except TrainingDivergedError as exc:
        raise TrainingDivergedError(
            f"client {k}, round {round_}: {exc}", exc.epoch, exc.batch, client=k, round=round_
        ) from exc
    return ClientResult(k, id_params, text_params, id_losses[-1], text_losses[-1], (time.perf_counter() - start) * 1e3)


Aggregator = Callable[[Sequence[np.ndarray], Sequence[float]], np.ndarray]


def aggregate(results: Sequence[ClientResult], weights: Sequence[float], aggregator: Aggregator = fedavg):
    """Average each family on its own; the two never share a call."""
    first = results[0]
    id_flat = aggregator([r.id_params.flatten() for r in results], weights)
    text_flat = aggregator([r.text_params.flatten() for r in results], weights)
    id_params = IdRetrieverParams.from_flat(id_flat, first.id_params.n_items, first.id_params.d)
    text_params = TextEncoderParams.from_flat(
        text_flat, first.text_params.vocab_size, first.text_params.dim, first.text_params.temperature
    )
    return id_params, text_params


def run_federated_training(
    split: FederatedSplit,
    catalog: Catalog,
    cfg: RoundConfig,
    initial: GlobalModel | None = None,
    metrics_log: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    aggregator: Aggregator = fedavg,
) -> GlobalModel:
    """Broadcast, train every client locally, aggregate; repeat for ``global_epochs`` rounds.

    ``aggregator`` is the injection point for alternative server-side
    aggregation (e.g. secure aggregation); it receives flat vectors and
    client dataset sizes.
    """
    for k, client in enumerate(split.clients):
        if not client:
            raise ConfigError(f"client {k} has no data")
    model = initial if initial is not None else init_global_model(len(catalog), cfg)
    if model.id_params.n_items != len(catalog):
        raise ConfigError(f"id retriever covers {model.id_params.n_items} items, catalog has {len(catalog)}")
    weights = [float(len(c)) for c in split.clients]
    log_fh = open(metrics_log, "a", encoding="utf-8") if metrics_log else None
    try:
        for round_ in range(model.round, model.round + cfg.global_epochs):
            jobs = [(k, data) for k, data in enumerate(split.clients)]
            if cfg.client_parallelism > 1 and len(jobs) > 1:
                with ThreadPoolExecutor(max_workers=cfg.client_parallelism) as pool:
                    futures = [pool.submit(_train_client, model, k, d, catalog, cfg, round_) for k, d in jobs]
                    results = [f.result() for f in futures]
            else:
                results = [_train_client(model, k, d, catalog, cfg, round_) for k, d in jobs]

            id_params, text_params = aggregate(results, weights, aggregator)
            model = GlobalModel(id_params, text_params, round_ + 1)
            for r in results:
                log.info("round %d client %d: loss_id=%.4f loss_text=%.4f", round_, r.client, r.loss_id, r.loss_text)
                if log_fh:
                    row = {"round": round_, "client": r.client, "loss_id": r.loss_id,
                           "loss_text": r.loss_text, "wall_ms": round(r.wall_ms, 3)}
                    log_fh.write(json.dumps(row) + "\n")
            if checkpoint_dir is not None:
                save_global_model(model, Path(checkpoint_dir) / f"round_{model.round:03d}")
    finally:
        if log_fh:
            log_fh.close()
    return model


def save_global_model(model: GlobalModel, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_checkpoint(directory / "id_retriever", model.id_params.flatten(), model.id_params.shapes(),
                    {"family": "id", "d": model.id_params.d, "n_items": model.id_params.n_items, "round": model.round})
    save_checkpoint(directory / "text_retriever", model.text_params.flatten(), model.text_params.shapes(),
                    {"family": "text", "d": model.text_params.dim, "vocab_size": model.text_params.vocab_size,
                     "temperature": model.text_params.temperature, "round": model.round})


def load_global_model(directory: str | Path) -> GlobalModel:
    directory = Path(directory)
    id_flat, id_meta = load_checkpoint(directory / "id_retriever")
    text_flat, text_meta = load_checkpoint(directory / "text_retriever")
    id_params = IdRetrieverParams.from_flat(id_flat, id_meta["n_items"], id_meta["d"])
    text_params = TextEncoderParams.from_flat(text_flat, text_meta["vocab_size"], text_meta["d"], text_meta["temperature"])
    return GlobalModel(id_params, text_params, id_meta["round"])
