"""End-to-end experiments: data preparation, federated training, two-stage evaluation,
lambda sweeps and the component ablation."""

from __future__ import annotations

import hashlib
import json
import logging
import platform
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy

from . import __version__
from .data import (
    Catalog,
    FederatedSplit,
    SplitConfig,
    SyntheticConfig,
    UserSequence,
    build_sequences,
    five_core_filter,
    load_catalog,
    load_interactions,
    partition_federated,
    read_sequences,
    synth_heterogeneous,
    write_sequences,
)
from .errors import ConfigError, IntegrityError, ParseError, StageError
from .federation import GlobalModel, RoundConfig, run_federated_training, save_global_model
from .hybrid import CandidateSet, HybridConfig, hybrid_scores, rank_indices, write_candidates
from .id_retriever import IdTrainConfig, id_logits, pad_histories
from .metrics import MetricReport, mean_report, user_metrics
from .rerank import (
    MOVIE_PROFILE,
    ChatLimits,
    DomainProfile,
    RequestBudget,
    RerankConfig,
    RerankJob,
    RerankOutcome,
    make_client,
    rerank_batch,
)
from .text_retriever import TemplateConfig, TextTrainConfig, encode_many, passage_matrix, query_for

log = logging.getLogger(__name__)

PROFILES = {"generic": DomainProfile(), "movies": MOVIE_PROFILE}
DEFAULT_LAMBDA_GRID = tuple(round(0.1 * i, 1) for i in range(11))
ABLATION_ROWS = ("full", "w/o ID", "w/o text", "w/o rerank")
METRIC_COLUMNS = ("R@5", "N@5", "R@10", "N@10")


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class DataConfig:
    interactions: str | None = None
    items: str | None = None
    sequences: str | None = None
    catalog: str | None = None
    split_manifest: str | None = None
    five_core: bool = True
    max_len: int = 50


@dataclass(frozen=True)
class RerankSettings:
    client: str = "identity"
    budget: int | None = None
    threshold: float = 0.8
    transcript: str | None = None
    base_url: str | None = None
    model: str = "gpt-3.5-turbo"
    max_in_flight: int = 4
    profile: str = "generic"
    timeout: float = 30.0
    max_retries: int = 3


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    synthetic: SyntheticConfig | None = None
    split: SplitConfig = field(default_factory=SplitConfig)
    rounds: RoundConfig = field(default_factory=RoundConfig)
    hybrid: HybridConfig = field(default_factory=HybridConfig)
    rerank: RerankSettings = field(default_factory=RerankSettings)
    lambda_grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID
    use_id: bool = True
    use_text: bool = True
    use_rerank: bool = True
    run_sweep: bool = True
    run_ablation: bool = True
    seed: int = 0

    def __post_init__(self):
        if not (self.use_id or self.use_text):
            raise ConfigError("at least one of use_id / use_text must be enabled")
        if not self.lambda_grid or any(not 0.0 <= x <= 1.0 for x in self.lambda_grid):
            raise ConfigError("lambda_grid must be a nonempty subset of [0, 1]")
        if self.rerank.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.rerank.profile!r}; choose from {sorted(PROFILES)}")

    @property
    def effective_lambda(self) -> float:
        if not self.use_text:
            return 1.0
        if not self.use_id:
            return 0.0
        return self.hybrid.lam

    @property
    def template(self) -> TemplateConfig:
        return self.rounds.text_cfg.template

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        try:
            rounds_raw = dict(raw.pop("rounds", {}))
            text_raw = dict(rounds_raw.pop("text_cfg", {}))
            template = TemplateConfig(**text_raw.pop("template", {}))
            rounds = RoundConfig(
                id_cfg=IdTrainConfig(**rounds_raw.pop("id_cfg", {})),
                text_cfg=TextTrainConfig(template=template, **text_raw),
                **rounds_raw,
            )
            synthetic = raw.pop("synthetic", None)
            return cls(
                data=DataConfig(**raw.pop("data", {})),
                synthetic=SyntheticConfig(**synthetic) if synthetic is not None else None,
                split=SplitConfig(**raw.pop("split", {})),
                rounds=rounds,
                hybrid=HybridConfig(**raw.pop("hybrid", {})),
                rerank=RerankSettings(**raw.pop("rerank", {})),
                lambda_grid=tuple(float(x) for x in raw.pop("lambda_grid", DEFAULT_LAMBDA_GRID)),
                **raw,
            )
        except TypeError as exc:
            raise ConfigError(f"bad experiment config: {exc}") from None


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return ExperimentConfig.from_dict(raw)


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Propagate one seed into every seeded sub-config."""
    synthetic = replace(cfg.synthetic, seed=seed) if cfg.synthetic is not None else None
    return replace(
        cfg,
        seed=seed,
        synthetic=synthetic,
        split=replace(cfg.split, seed=seed),
        rounds=replace(cfg.rounds, seed=seed),
    )


# ---------------------------------------------------------------- data


def prepare_data(cfg: ExperimentConfig) -> tuple[Catalog, FederatedSplit]:
    if cfg.synthetic is not None:
        s = cfg.synthetic
        extra = {k: v for k, v in asdict(s).items()
                 if k not in ("n_clients", "items_per_client", "users_per_client", "n_attributes", "seed", "n_test_users")}
        return synth_heterogeneous(s.n_clients, s.items_per_client, s.users_per_client, s.n_attributes, s.seed,
                                   n_test_users=s.n_test_users, **extra)
    d = cfg.data
    if d.sequences and d.catalog:
        catalog = load_catalog(d.catalog)
        sequences = read_sequences(d.sequences)
    elif d.interactions and d.items:
        interactions, catalog = load_interactions(d.interactions, d.items)
        if d.five_core:
            interactions = five_core_filter(interactions)
            catalog = catalog.restrict(it.item_id for it in interactions)
        sequences = build_sequences(interactions, d.max_len)
    else:
        raise ConfigError("config needs either a synthetic section or data paths")
    if d.split_manifest:
        split = FederatedSplit.from_manifest(json.loads(Path(d.split_manifest).read_text()), sequences)
    else:
        split = partition_federated(sequences, cfg.split)
    return catalog, split


# ---------------------------------------------------------------- scoring


@dataclass(frozen=True)
class ScoreTable:
    """Raw per-user logits of both retrievers, computed once and reused across lambdas."""

    users: tuple[UserSequence, ...]
    id_logits: np.ndarray
    text_logits: np.ndarray


def compute_scores(model: GlobalModel, users: Sequence[UserSequence], catalog: Catalog,
                   template: TemplateConfig, chunk: int = 256) -> ScoreTable:
    users = tuple(sorted(users, key=lambda u: u.user_id))
    n = len(users)
    ids = np.zeros((n, len(catalog)))
    texts = np.zeros((n, len(catalog)))
    if n:
        passages = passage_matrix(model.text_params, catalog, template)
        for start in range(0, n, chunk):
            part = users[start : start + chunk]
            idx, mask = pad_histories([u.history for u in part], catalog)
            ids[start : start + len(part)] = id_logits(model.id_params, idx, mask)
            q = encode_many(model.text_params, [query_for(u.history, catalog, template) for u in part])
            texts[start : start + len(part)] = q @ passages.T / model.text_params.temperature
    return ScoreTable(users, ids, texts)


# ---------------------------------------------------------------- evaluation


@dataclass
class PipelineReport:
    lam: float
    stage1: MetricReport
    stage2: MetricReport
    stage2_filtered: MetricReport
    sources: dict[str, int]
    candidates: list[CandidateSet] = field(default_factory=list, repr=False)
    outcomes: list[RerankOutcome] = field(default_factory=list, repr=False)
    stage1_per_user: list[dict] = field(default_factory=list, repr=False)
    stage2_per_user: list[dict] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "stage1": self.stage1.to_dict(),
            "stage2": {"fallback-inclusive": self.stage2.to_dict(), "fallback-excluded": self.stage2_filtered.to_dict()},
            "sources": dict(self.sources),
        }


def stage1_rankings(scores: ScoreTable, catalog: Catalog, lam: float, hybrid_cfg: HybridConfig):
    """Full-catalog orderings under the fused score, plus the top-N candidate sets."""
    fused = hybrid_scores(scores.id_logits, scores.text_logits, lam) if len(scores.users) else scores.id_logits
    depth = max(hybrid_cfg.n_candidates, 10)
    rankings, candidates = [], []
    for row, user in zip(fused, scores.users):
        exclude = catalog.indices(list(user.history)) if hybrid_cfg.mask_history else ()
        order = rank_indices(row, exclude)[:depth]
        items = [catalog.item_ids[i] for i in order]
        rankings.append(items)
        top = order[: hybrid_cfg.n_candidates]
        candidates.append(CandidateSet(user.user_id, tuple(items[: len(top)]), tuple(float(row[i]) for i in top)))
    return rankings, candidates


def evaluate_scores(
    scores: ScoreTable,
    catalog: Catalog,
    lam: float,
    hybrid_cfg: HybridConfig,
    client=None,
    rerank_cfg: RerankConfig | None = None,
    max_in_flight: int = 4,
) -> PipelineReport:
    """Stage-1 metrics from the full fused ranking; stage-2 metrics from the re-ranked candidates.

    ``client=None`` disables re-ranking, so stage 2 mirrors stage 1.
    """
    rankings, candidates = stage1_rankings(scores, catalog, lam, hybrid_cfg)
    s1 = [user_metrics(r, u.target) for r, u in zip(rankings, scores.users)]
    if client is None:
        outcomes = [RerankOutcome(c.user_id, "skipped", c.ranked_items) for c in candidates]
        s2 = list(s1)
    else:
        jobs = [RerankJob(c, u.history, u.target) for c, u in zip(candidates, scores.users)]
        outcomes = rerank_batch(jobs, client, rerank_cfg or RerankConfig(), catalog, max_in_flight)
        s2 = [user_metrics(o.ranked_items, u.target) for o, u in zip(outcomes, scores.users)]
    kept = [m for m, o in zip(s2, outcomes) if o.source != "stage1-fallback"]
    sources = {src: sum(o.source == src for o in outcomes) for src in ("reranked", "stage1-fallback", "skipped")}
    return PipelineReport(
        lam,
        mean_report(s1),
        mean_report(s2, "fallback-inclusive"),
        mean_report(kept, "fallback-excluded"),
        sources,
        candidates,
        outcomes,
        s1,
        s2,
    )


def evaluate_pipeline(
    model: GlobalModel,
    split: FederatedSplit,
    catalog: Catalog,
    hybrid_cfg: HybridConfig,
    rerank_cfg: RerankConfig | None = None,
    client=None,
    template: TemplateConfig = TemplateConfig(),
) -> PipelineReport:
    """Evaluate the cold-start test users only; training clients are never scored here."""
    scores = compute_scores(model, split.test_users, catalog, template)
    return evaluate_scores(scores, catalog, hybrid_cfg.lam, hybrid_cfg, client, rerank_cfg)


def sensitivity_sweep(scores: ScoreTable, catalog: Catalog, hybrid_cfg: HybridConfig,
                      lambda_grid: Sequence[float]) -> list[tuple[float, MetricReport]]:
    """Stage-1 metrics per lambda from cached logits; nothing is retrained."""
    if not lambda_grid:
        raise ConfigError("lambda grid is empty")
    rows = []
    for lam in lambda_grid:
        if not 0.0 <= lam <= 1.0:
            raise ConfigError(f"lambda {lam} outside [0, 1]")
        rows.append((float(lam), evaluate_scores(scores, catalog, lam, hybrid_cfg).stage1))
    return rows


def best_lambda(rows: Sequence[tuple[float, MetricReport]], metric: str = "recall_at_10") -> tuple[list[float], float]:
    values = [getattr(r, metric) for _, r in rows]
    top = max(values)
    return [lam for (lam, _), v in zip(rows, values) if v == top], top


@dataclass
class AblationTable:
    rows: dict[str, PipelineReport]

    def table_values(self) -> dict[str, tuple]:
        """The reported block per variant: stage 2 where re-ranking runs, stage 1 for "w/o rerank"."""
        out = {}
        for name in ABLATION_ROWS:
            rep = self.rows[name]
            out[name] = rep.stage1.row() if name == "w/o rerank" else rep.stage2.row()
        return out

    def to_dict(self) -> dict:
        return {
            "columns": list(METRIC_COLUMNS),
            "rows": list(ABLATION_ROWS),
            "table": {k: list(v) for k, v in self.table_values().items()},
            "variants": {k: v.to_dict() for k, v in self.rows.items()},
        }

    def format(self) -> str:
        return format_table("Variant", [(k, v) for k, v in self.table_values().items()])


def ablation(scores: ScoreTable, catalog: Catalog, hybrid_cfg: HybridConfig, client, rerank_cfg: RerankConfig,
             max_in_flight: int = 4) -> AblationTable:
    """The four component-masking variants, all sharing one trained model and one score table."""
    full = evaluate_scores(scores, catalog, hybrid_cfg.lam, hybrid_cfg, client, rerank_cfg, max_in_flight)
    rows = {
        "full": full,
        "w/o ID": evaluate_scores(scores, catalog, 0.0, hybrid_cfg, client, rerank_cfg, max_in_flight),
        "w/o text": evaluate_scores(scores, catalog, 1.0, hybrid_cfg, client, rerank_cfg, max_in_flight),
        "w/o rerank": evaluate_scores(scores, catalog, hybrid_cfg.lam, hybrid_cfg),
    }
    return AblationTable(rows)


def _fmt(v) -> str:
    return "   -  " if v is None else f"{v:.4f}"


def format_table(label: str, rows: Sequence[tuple[str, tuple]]) -> str:
    width = max([len(label)] + [len(str(name)) for name, _ in rows])
    lines = [f"{label:<{width}}  " + "  ".join(f"{c:>6}" for c in METRIC_COLUMNS)]
    lines.append("-" * len(lines[0]))
    for name, vals in rows:
        lines.append(f"{str(name):<{width}}  " + "  ".join(f"{_fmt(v):>6}" for v in vals))
    return "\n".join(lines)


def format_report(rep: PipelineReport) -> str:
    rows = [
        ("stage 1 (hybrid retrieval)", rep.stage1.row()),
        ("stage 2 (fallback-inclusive)", rep.stage2.row()),
        ("stage 2 (fallback-excluded)", rep.stage2_filtered.row()),
    ]
    src = ", ".join(f"{k}={v}" for k, v in rep.sources.items())
    head = f"lambda={rep.lam}  users={rep.stage1.n_users}  filtered users={rep.stage2_filtered.n_users}  [{src}]"
    return head + "\n" + format_table("Stage", rows)


def format_sweep(rows: Sequence[tuple[float, MetricReport]]) -> str:
    return format_table("lambda", [(f"{lam:.2f}", r.row()) for lam, r in rows])


# ---------------------------------------------------------------- full runs


def build_rerank(cfg: ExperimentConfig, catalog: Catalog, split: FederatedSplit):
    """Client plus policy config; the harness owns the request budget."""
    if not cfg.use_rerank:
        return None, RerankConfig(cfg.rerank.threshold, PROFILES[cfg.rerank.profile])
    s = cfg.rerank
    truth = {u.user_id: u.target for u in split.test_users}
    client = make_client(s.client, catalog=catalog, truth=truth, transcript=s.transcript,
                         base_url=s.base_url, model=s.model, seed=cfg.seed)
    limits = ChatLimits(timeout=s.timeout, max_retries=s.max_retries, budget=RequestBudget(s.budget))
    return client, RerankConfig(s.threshold, PROFILES[s.profile], limits)


@dataclass
class RunArtifact:
    out_dir: Path
    model: GlobalModel
    report: PipelineReport
    sweep: list[tuple[float, MetricReport]] | None
    ablation: AblationTable | None
    timings: dict[str, float]

    @property
    def report_path(self) -> Path:
        return self.out_dir / "report.json"


def write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


@contextmanager
def stage(name: str):
    """Tag any failure with the pipeline stage it came from."""
    try:
        yield
    except (ConfigError, ParseError, IntegrityError) as exc:
        raise ConfigError(f"[{name}] {exc}") from exc
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path, model: GlobalModel | None = None) -> RunArtifact:
    """ingest -> split -> federated training -> evaluation -> sweep / ablation, all written to ``out_dir``.

    ``report.json`` holds only deterministic content; wall-clock numbers go to
    ``timings.json`` and ``rounds.jsonl``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}

    with stage("ingest"):
        catalog, split = prepare_data(cfg)
        split.write_manifest(out / "split.json")
        catalog.to_jsonl(out / "catalog.jsonl")
        write_sequences(out / "sequences.jsonl", [s for c in split.clients for s in c] + list(split.test_users))

    with stage("train"):
        if model is None:
            rounds_log = out / "rounds.jsonl"
            rounds_log.unlink(missing_ok=True)
            t0 = time.perf_counter()
            model = run_federated_training(split, catalog, cfg.rounds, metrics_log=rounds_log,
                                           checkpoint_dir=out / "checkpoints")
            timings["train_s"] = time.perf_counter() - t0
        save_global_model(model, out / "checkpoints" / "global")

    with stage("evaluate"):
        t0 = time.perf_counter()
        scores = compute_scores(model, split.test_users, catalog, cfg.template)
        timings["score_s"] = time.perf_counter() - t0

        hybrid_cfg = replace(cfg.hybrid, lam=cfg.effective_lambda)
        client, rerank_cfg = build_rerank(cfg, catalog, split)
        t0 = time.perf_counter()
        report = evaluate_scores(scores, catalog, hybrid_cfg.lam, hybrid_cfg, client, rerank_cfg,
                                 cfg.rerank.max_in_flight)
        timings["evaluate_s"] = time.perf_counter() - t0
    write_candidates(out / "candidates.jsonl", report.candidates)
    with open(out / "rerank.jsonl", "w", encoding="utf-8") as fh:
        for o in report.outcomes:
            fh.write(json.dumps(o.to_dict()) + "\n")

    payload = {"config_hash": cfg.config_hash(), "model_checksum": model.checksum(), "evaluation": report.to_dict()}
    text = [format_report(report)]

    sweep = None
    if cfg.run_sweep:
        t0 = time.perf_counter()
        with stage("sweep"):
            sweep = sensitivity_sweep(scores, catalog, hybrid_cfg, cfg.lambda_grid)
        timings["sweep_s"] = time.perf_counter() - t0
        lams, top = best_lambda(sweep)
        payload["sweep"] = {"rows": [{"lambda": lam, **r.to_dict()} for lam, r in sweep],
                            "best_recall_at_10": top, "argmax_lambdas": lams}
        text.append(format_sweep(sweep))

    table = None
    if cfg.run_ablation:
        if client is None:
            client, rerank_cfg = build_rerank(replace(cfg, use_rerank=True), catalog, split)
        t0 = time.perf_counter()
        with stage("ablate"):
            table = ablation(scores, catalog, cfg.hybrid, client, rerank_cfg, cfg.rerank.max_in_flight)
        timings["ablation_s"] = time.perf_counter() - t0
        payload["ablation"] = table.to_dict()
        write_json(out / "ablation.json", table.to_dict())
        (out / "ablation.txt").write_text(table.format() + "\n")
        text.append(table.format())

    write_json(out / "report.json", payload)
    (out / "report.txt").write_text("\n\n".join(text) + "\n")
    write_json(out / "timings.json", timings)
    write_json(out / "manifest.json", {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seeds": {"experiment": cfg.seed, "split": cfg.split.seed, "rounds": cfg.rounds.seed,
                  "synthetic": cfg.synthetic.seed if cfg.synthetic else None},
        "versions": {"fedrec": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
    })
    return RunArtifact(out, model, report, sweep, table, timings)
