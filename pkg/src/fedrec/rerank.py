"""Second-stage re-ranking with a chat model, constrained to the stage-one candidate pool.

The model's answer is free text. Each answer line is resolved against the
candidate titles only, so nothing outside the pool can ever reach the output.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import httpx
import numpy as np

from .data import Catalog
from .errors import BudgetExhaustedError, ChatError, ConfigError, ProtocolError, TransportError
from .hybrid import CandidateSet
from .text_retriever import describe_item

log = logging.getLogger(__name__)

API_KEY_ENV = "FEDREC_CHAT_API_KEY"
RETRYABLE_STATUS = frozenset({408, 409, 429, 500, 502, 503, 504})
POOL_HEADER = "There is also candidate pool:"


# ---------------------------------------------------------------- prompts


@dataclass(frozen=True)
class DomainProfile:
    role: str = "shopping assistant"
    role_description: str = "recommending products for customers"
    plural_noun: str = "items"
    noun_phrase: str = "an item"
    include_attributes: bool = True
    history_last_n: int | None = None


MOVIE_PROFILE = DomainProfile(
    role="movie fan and movie reviewer",
    role_description="recommending movies for people",
    plural_noun="movies",
    noun_phrase="a movie",
)


@dataclass(frozen=True)
class ChatMessagePair:
    system: str
    user: str
    user_id: str = field(default="", compare=False)

    def __post_init__(self):
        if not self.system or not self.user:
            raise ValueError("system and user messages must be nonempty")


def task_instruction(profile: DomainProfile) -> str:
    noun = profile.plural_noun
    return (
        f"Please rank these {noun} by how likely I am to choose each one next, given my history. "
        f"Show your ranking with order numbers and put each entry on its own line. "
        f"You MUST rank the given candidate {noun}. "
        f"Do not output any {noun} that are not in the candidate pool."
    )


def build_prompt(history: Sequence[str], candidates: CandidateSet, catalog: Catalog,
                 profile: DomainProfile = DomainProfile()) -> ChatMessagePair:
    if not candidates.ranked_items:
        raise ValueError("cannot build a prompt for an empty candidate set")
    if profile.history_last_n is not None:
        history = history[-profile.history_last_n :]
    described = [describe_item(catalog[i], profile.include_attributes, profile.noun_phrase) for i in history]
    pool = [f"{n}. {catalog[item].title}" for n, item in enumerate(candidates.ranked_items, 1)]
    system = f"You are a helpful {profile.role}, {profile.role_description}."
    user = (
        "I've browsed the following items in the past in order:\n"
        + ";\n".join(described)
        + ".\n\n"
        + POOL_HEADER
        + "\n"
        + "\n".join(pool)
        + "\n\n"
        + task_instruction(profile)
    )
    return ChatMessagePair(system, user, candidates.user_id)


_POOL_LINE = re.compile(r"^(\d+)\. (.*)$")


def pool_titles(messages: ChatMessagePair) -> list[str]:
    """Recover the numbered candidate titles from a prompt built by ``build_prompt``."""
    _, _, tail = messages.user.partition(POOL_HEADER + "\n")
    titles = []
    for line in tail.split("\n"):
        m = _POOL_LINE.match(line)
        if not m:
            break
        titles.append(m.group(2))
    return titles


# ---------------------------------------------------------------- fuzzy matching


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        row = [i]
        for j, cb in enumerate(b, 1):
            row.append(min(row[-1] + 1, prev[j] + 1, prev[j - 1] + (ca != cb)))
        prev = row
    return prev[-1]


_YEAR_SUFFIX = re.compile(r"\s*\(\s*\d{4}\s*\)\s*$")
_NON_WORD = re.compile(r"[^\w]+|_")
_ARTICLE_HEAD = re.compile(r"^(the|a|an) ")
_ARTICLE_TAIL = re.compile(r" (the|a|an)$")
_ENUM_MARKER = re.compile(r"^\s*(?:\d+\s*[.):\]]|[-*•])\s*")


def normalize_title(text: str) -> str:
    text = _YEAR_SUFFIX.sub("", text.strip().lower())
    text = " ".join(_NON_WORD.sub(" ", text).split())
    text = _ARTICLE_HEAD.sub("", text)
    return _ARTICLE_TAIL.sub("", text)


def similarity(a: str, b: str) -> float:
    """1 - edit distance / longer length, on already-normalized strings."""
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(a, b) / longest


def parse_and_match(raw: str, candidates: CandidateSet, catalog: Catalog, threshold: float = 0.8) -> list[str]:
    """Resolve answer lines to candidate item ids, in line order.

    A line maps to its most similar candidate title; the match is kept when it
    clears ``threshold`` and that candidate has not already been claimed.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must lie in (0, 1]")
    keys = [normalize_title(catalog[i].title) for i in candidates.ranked_items]
    exact: dict[str, int] = {}
    for pos, key in enumerate(keys):
        exact.setdefault(key, pos)
    matched: list[str] = []
    claimed: set[str] = set()
    for line in raw.splitlines():
        text = normalize_title(_ENUM_MARKER.sub("", line))
        if not text:
            continue
        if text in exact:
            best, best_sim = exact[text], 1.0
        else:
            best, best_sim = 0, -1.0
            for pos, key in enumerate(keys):
                # a length gap alone can push similarity under the threshold; skip the DP then
                longest = max(len(text), len(key))
                if abs(len(text) - len(key)) > (1.0 - threshold) * longest:
                    continue
                sim = similarity(text, key)
                if sim > best_sim:
                    best, best_sim = pos, sim
        item = candidates.ranked_items[best]
        if best_sim >= threshold and item not in claimed:
            matched.append(item)
            claimed.add(item)
    return matched


# ---------------------------------------------------------------- clients


class ChatClient(Protocol):
    def complete(self, messages: ChatMessagePair, timeout: float | None = None) -> str: ...


def request_body(messages: ChatMessagePair, model: str, temperature: float = 0.0) -> dict:
    return {
        "model": model,
        "messages": [
            {"role": "system", "content": messages.system},
            {"role": "user", "content": messages.user},
        ],
        "temperature": temperature,
    }


def request_hash(body: Mapping) -> str:
    canonical = json.dumps(body, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class IdentityClient:
    """Echoes the candidate pool unchanged."""

    def complete(self, messages, timeout=None):
        return "\n".join(f"{n}. {t}" for n, t in enumerate(pool_titles(messages), 1))


class OracleClient:
    """Test-only: moves the user's ground-truth title to the top, keeps the rest in order."""

    def __init__(self, catalog: Catalog, truth: Mapping[str, str]):
        self.catalog = catalog
        self.truth = dict(truth)

    def complete(self, messages, timeout=None):
        titles = pool_titles(messages)
        gt = self.truth.get(messages.user_id)
        if gt is not None:
            gt_title = self.catalog[gt].title
            if gt_title in titles:
                titles.remove(gt_title)
                titles.insert(0, gt_title)
        return "\n".join(f"{n}. {t}" for n, t in enumerate(titles, 1))


class AdversarialClient:
    """Emits invented titles, near-miss spellings, duplicates and prose around a shuffled pool.

    The output for a prompt depends only on ``seed`` and the prompt text.
    """

    _FAKE_WORDS = ("Phantom", "Galaxy", "Midnight", "Return", "Legend", "Empire", "Shadow", "Crystal", "Pro", "Deluxe")

    def __init__(self, seed: int = 0, keep_fraction: float = 0.5):
        self.seed = seed
        self.keep_fraction = keep_fraction

    def complete(self, messages, timeout=None):
        digest = hashlib.sha256(messages.user.encode("utf-8")).digest()
        rng = np.random.default_rng([self.seed, int.from_bytes(digest[:8], "little")])
        titles = pool_titles(messages)
        lines = ["Sure! Here is my ranking, thinking step by step:"]
        for t in rng.permutation(titles).tolist():
            roll = rng.random()
            if roll < self.keep_fraction:
                lines.append(t)
            elif roll < self.keep_fraction + 0.15 and len(t) > 3:
                cut = int(rng.integers(len(t)))
                lines.append(t[:cut] + t[cut + 1 :])
            if rng.random() < 0.3:
                words = rng.choice(self._FAKE_WORDS, size=int(rng.integers(2, 4)), replace=False)
                lines.append(" ".join(words) + f" {int(rng.integers(1, 99))}")
            if rng.random() < 0.1:
                lines.append(t)
        lines.append("I hope you enjoy these recommendations.")
        return "\n".join(f"{n}. {line}" for n, line in enumerate(lines, 1))


class TranscriptClient:
    """Replays recorded responses keyed by request hash."""

    def __init__(self, path: str | Path, model: str = "gpt-3.5-turbo", temperature: float = 0.0):
        self.model = model
        self.temperature = temperature
        self.responses: dict[str, dict] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    row = json.loads(line)
                    self.responses[row["request_hash"]] = row["response"]

    def complete(self, messages, timeout=None):
        key = request_hash(request_body(messages, self.model, self.temperature))
        if key not in self.responses:
            raise ChatError(f"no recorded response for request {key[:12]}")
        return response_text(self.responses[key])


def response_text(payload: Mapping) -> str:
    try:
        return payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise ProtocolError("response has no choices[0].message.content", 200) from None


class HttpChatClient:
    """OpenAI-compatible ``/v1/chat/completions`` client.

    The bearer token is read from ``api_key_env`` at call time. When
    ``record_to`` is set, every successful exchange is appended to that
    transcript file for offline replay.
    """

    def __init__(
        self,
        base_url: str,
        model: str = "gpt-3.5-turbo",
        temperature: float = 0.0,
        api_key_env: str = API_KEY_ENV,
        transport: httpx.BaseTransport | None = None,
        record_to: str | Path | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.temperature = temperature
        self.api_key_env = api_key_env
        self.record_to = Path(record_to) if record_to else None
        self._http = httpx.Client(transport=transport)
        self._record_lock = threading.Lock()

    def complete(self, messages, timeout=None):
        body = request_body(messages, self.model, self.temperature)
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.api_key_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        try:
            resp = self._http.post(f"{self.base_url}/v1/chat/completions", json=body, headers=headers, timeout=timeout)
        except httpx.TimeoutException as exc:
            raise TransportError(f"request timed out: {exc}") from exc
        except httpx.TransportError as exc:
            raise TransportError(f"transport failure: {exc}") from exc
        if not 200 <= resp.status_code < 300:
            raise ProtocolError(f"chat endpoint returned HTTP {resp.status_code}", resp.status_code)
        try:
            payload = resp.json()
        except ValueError:
            raise ProtocolError("response body is not JSON", resp.status_code) from None
        text = response_text(payload)
        if self.record_to is not None:
            with self._record_lock, open(self.record_to, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"request_hash": request_hash(body), "response": payload}, ensure_ascii=False) + "\n")
        return text

    def close(self):
        self._http.close()


# ---------------------------------------------------------------- calling


class RequestBudget:
    """Shared counter of remaining requests; safe across threads."""

    def __init__(self, limit: int | None):
        self._remaining = limit
        self._lock = threading.Lock()

    @property
    def remaining(self) -> int | None:
        return self._remaining

    def take(self) -> None:
        with self._lock:
            if self._remaining is None:
                return
            if self._remaining <= 0:
                raise BudgetExhaustedError("request budget exhausted")
            self._remaining -= 1


@dataclass
class ChatLimits:
    timeout: float = 30.0
    max_retries: int = 3
    backoff_base: float = 0.5
    budget: RequestBudget = field(default_factory=lambda: RequestBudget(None))


def chat_complete(client: ChatClient, messages: ChatMessagePair, limits: ChatLimits | None = None,
                  sleep: Callable[[float], None] = time.sleep) -> str:
    """One logical request: charges the budget once, retries transient failures with exponential backoff."""
    limits = limits or ChatLimits()
    limits.budget.take()
    for attempt in range(limits.max_retries + 1):
        try:
            return client.complete(messages, timeout=limits.timeout)
        except (TransportError, ProtocolError) as exc:
            transient = isinstance(exc, TransportError) or exc.status in RETRYABLE_STATUS
            if not transient or attempt == limits.max_retries:
                raise
            delay = limits.backoff_base * 2**attempt
            log.warning("chat request failed (%s); retry %d in %.2fs", exc, attempt + 1, delay)
            sleep(delay)
    raise AssertionError("unreachable")


# ---------------------------------------------------------------- policy

SOURCES = ("reranked", "stage1-fallback", "skipped")


@dataclass(frozen=True)
class RerankOutcome:
    user_id: str
    source: str
    ranked_items: tuple[str, ...]
    raw_response: str | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return {"user_id": self.user_id, "source": self.source, "items": list(self.ranked_items),
                "raw_response": self.raw_response, "error": self.error}


@dataclass
class RerankConfig:
    threshold: float = 0.8
    profile: DomainProfile = field(default_factory=DomainProfile)
    limits: ChatLimits = field(default_factory=ChatLimits)

    def __post_init__(self):
        if not 0.0 < self.threshold <= 1.0:
            raise ConfigError("threshold must lie in (0, 1]")


def _complete_ranking(parsed: Sequence[str], stage1: CandidateSet) -> tuple[str, ...]:
    seen = set(parsed)
    return tuple(parsed) + tuple(i for i in stage1.ranked_items if i not in seen)


def apply_rerank_policy(
    stage1: CandidateSet,
    ground_truth: str | None,
    client: ChatClient,
    cfg: RerankConfig,
    history: Sequence[str],
    catalog: Catalog,
) -> RerankOutcome:
    """Gate, prompt, parse, and fall back.

    With a ground truth this is evaluation-protocol logic, not a serving path:
    users whose target is outside the candidates are skipped (re-ranking cannot
    move it into the top N), and answers that lose the target fall back to the
    stage-one order. With ``ground_truth=None`` every user is re-ranked and
    only an empty parse falls back.
    """
    original = tuple(stage1.ranked_items)
    if ground_truth is not None and ground_truth not in original:
        return RerankOutcome(stage1.user_id, "skipped", original)
    try:
        raw = chat_complete(client, build_prompt(history, stage1, catalog, cfg.profile), cfg.limits)
    except ChatError as exc:
        return RerankOutcome(stage1.user_id, "stage1-fallback", original, None, f"{type(exc).__name__}: {exc}")
    parsed = parse_and_match(raw, stage1, catalog, cfg.threshold)
    keep = ground_truth in parsed if ground_truth is not None else bool(parsed)
    if not keep:
        return RerankOutcome(stage1.user_id, "stage1-fallback", original, raw)
    return RerankOutcome(stage1.user_id, "reranked", _complete_ranking(parsed, stage1), raw)


@dataclass(frozen=True)
class RerankJob:
    candidates: CandidateSet
    history: tuple[str, ...]
    ground_truth: str | None = None


def rerank_batch(jobs: Sequence[RerankJob], client: ChatClient, cfg: RerankConfig, catalog: Catalog,
                 max_in_flight: int = 4) -> list[RerankOutcome]:
    """Run the policy for many users with bounded concurrency; results come back sorted by user id."""
    def run(job: RerankJob) -> RerankOutcome:
        return apply_rerank_policy(job.candidates, job.ground_truth, client, cfg, job.history, catalog)

    if max_in_flight > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            outcomes = list(pool.map(run, jobs))
    else:
        outcomes = [run(j) for j in jobs]
    return sorted(outcomes, key=lambda o: o.user_id)


def make_client(kind: str, *, catalog: Catalog | None = None, truth: Mapping[str, str] | None = None,
                transcript: str | Path | None = None, base_url: str | None = None, model: str = "gpt-3.5-turbo",
                seed: int = 0, record_to: str | Path | None = None) -> ChatClient:
    if kind == "identity":
        return IdentityClient()
    if kind == "oracle":
        if catalog is None or truth is None:
            raise ConfigError("the oracle client needs the catalog and ground truth")
        return OracleClient(catalog, truth)
    if kind == "adversarial":
        return AdversarialClient(seed)
    if kind == "transcript":
        if transcript is None:
            raise ConfigError("the transcript client needs a transcript path")
        return TranscriptClient(transcript, model)
    if kind == "http":
        if not base_url:
            raise ConfigError("the http client needs base_url")
        return HttpChatClient(base_url, model, record_to=record_to)
    raise ConfigError(f"unknown client {kind!r}")
