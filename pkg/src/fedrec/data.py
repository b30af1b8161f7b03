"""Interaction ingestion, 5-core filtering, sequence construction and federated splits."""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, IntegrityError, ParseError

log = logging.getLogger(__name__)

DEFAULT_MAX_LEN = 50
SPLIT_MODES = ("uniform-random", "item-disjoint-heterogeneous")


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise ValueError("user_id and item_id must be nonempty")
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")


@dataclass(frozen=True)
class ItemMeta:
    item_id: str
    title: str
    attributes: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.title:
            raise ValueError(f"item {self.item_id!r} has an empty title")
        object.__setattr__(self, "attributes", tuple(self.attributes))


class Catalog:
    """Item scope. Items are indexed in ascending item-id order.

    The index order doubles as the tie-break order for every ranking in the
    package, so ``index(a) < index(b)`` iff ``a < b`` lexically.
    """

    def __init__(self, items: Iterable[ItemMeta]):
        by_id: dict[str, ItemMeta] = {}
        for meta in items:
            if meta.item_id in by_id:
                raise IntegrityError(f"duplicate item_id {meta.item_id!r} in catalog")
            by_id[meta.item_id] = meta
        self.item_ids: tuple[str, ...] = tuple(sorted(by_id))
        self._items = by_id
        self._index = {item_id: i for i, item_id in enumerate(self.item_ids)}
        self._hash = hash(tuple(by_id[i] for i in self.item_ids))

    def __len__(self) -> int:
        return len(self.item_ids)

    def __contains__(self, item_id) -> bool:
        return item_id in self._items

    def __iter__(self):
        return (self._items[i] for i in self.item_ids)

    def __getitem__(self, item_id: str) -> ItemMeta:
        try:
            return self._items[item_id]
        except KeyError:
            raise KeyError(f"unknown item_id {item_id!r}") from None

    def __eq__(self, other) -> bool:
        return isinstance(other, Catalog) and self._items == other._items

    def __hash__(self) -> int:
        return self._hash

    def index(self, item_id: str) -> int:
        try:
            return self._index[item_id]
        except KeyError:
            raise KeyError(f"unknown item_id {item_id!r}") from None

    def indices(self, item_ids: Sequence[str]) -> np.ndarray:
        return np.array([self.index(i) for i in item_ids], dtype=np.int64)

    def restrict(self, item_ids: Iterable[str]) -> "Catalog":
        keep = set(item_ids)
        return Catalog(m for m in self if m.item_id in keep)

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for meta in self:
                row = {"item_id": meta.item_id, "title": meta.title, "attributes": list(meta.attributes)}
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")


@dataclass(frozen=True)
class UserSequence:
    user_id: str
    history: tuple[str, ...]
    target: str

    def __post_init__(self):
        object.__setattr__(self, "history", tuple(self.history))
        if len(self.history) < 1:
            raise ValueError(f"user {self.user_id!r} has an empty history")

    def to_dict(self) -> dict:
        return {"user_id": self.user_id, "history": list(self.history), "target": self.target}

    @classmethod
    def from_dict(cls, row: Mapping) -> "UserSequence":
        return cls(str(row["user_id"]), tuple(row["history"]), str(row["target"]))


@dataclass(frozen=True)
class SplitConfig:
    n_clients: int = 5
    users_per_client: int = 1000
    seed: int = 0
    mode: str = "uniform-random"

    def __post_init__(self):
        if self.n_clients < 1:
            raise ConfigError("n_clients must be >= 1")
        if self.users_per_client < 1:
            raise ConfigError("users_per_client must be >= 1")
        if self.mode not in SPLIT_MODES:
            raise ConfigError(f"unknown split mode {self.mode!r}; expected one of {SPLIT_MODES}")


@dataclass(frozen=True)
class FederatedSplit:
    clients: tuple[tuple[UserSequence, ...], ...]
    test_users: tuple[UserSequence, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "clients", tuple(tuple(c) for c in self.clients))
        object.__setattr__(self, "test_users", tuple(self.test_users))
        if len(self.clients) < 1:
            raise ConfigError("a federated split needs at least one client")
        seen: set[str] = set()
        for k, client in enumerate(self.clients):
            if not client:
                raise ConfigError(f"client {k} is empty")
            for seq in client:
                if seq.user_id in seen:
                    raise IntegrityError(f"user {seq.user_id!r} appears in more than one partition")
                seen.add(seq.user_id)
        for seq in self.test_users:
            if seq.user_id in seen:
                raise IntegrityError(f"test user {seq.user_id!r} also appears in a training client")
            seen.add(seq.user_id)

    @property
    def n_clients(self) -> int:
        return len(self.clients)

    def client_items(self, k: int) -> set[str]:
        """Local item scope of client ``k``: every item seen in its histories or targets."""
        items: set[str] = set()
        for seq in self.clients[k]:
            items.update(seq.history)
            items.add(seq.target)
        return items

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "clients": [[s.user_id for s in c] for c in self.clients],
            "test_users": [s.user_id for s in self.test_users],
        }

    def write_manifest(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.manifest(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_manifest(cls, manifest: Mapping, sequences: Sequence[UserSequence]) -> "FederatedSplit":
        by_user = {s.user_id: s for s in sequences}
        try:
            clients = [[by_user[u] for u in users] for users in manifest["clients"]]
            test = [by_user[u] for u in manifest["test_users"]]
        except KeyError as exc:
            raise IntegrityError(f"manifest references unknown user {exc.args[0]!r}") from None
        return cls(clients, test, int(manifest.get("seed", 0)))


# ---------------------------------------------------------------- ingestion


def load_catalog(path: str | Path) -> Catalog:
    items = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                items.append(ItemMeta(str(row["item_id"]), str(row["title"]), tuple(row.get("attributes", ()))))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: bad item metadata row ({exc})", lineno) from None
    return Catalog(items)


def load_interactions(path: str | Path, items_path: str | Path) -> tuple[list[Interaction], Catalog]:
    """Read the interactions TSV and the item metadata JSON-lines file.

    Returns the interactions in file order and a catalog restricted to the
    items the interactions reference.
    """
    interactions: list[Interaction] = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is not None and [h.strip() for h in header] != ["user_id", "item_id", "timestamp"]:
            raise ParseError(f"{path}:1: expected header user_id<TAB>item_id<TAB>timestamp", 1)
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 columns, got {len(row)}", lineno)
            user, item, ts = (c.strip() for c in row)
            try:
                stamp = int(ts)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: timestamp {ts!r} is not an integer", lineno) from None
            try:
                interactions.append(Interaction(user, item, stamp))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}", lineno) from None

    full = load_catalog(items_path)
    referenced = {it.item_id for it in interactions}
    missing = sorted(i for i in referenced if i not in full)
    if missing:
        raise IntegrityError(f"{len(missing)} item(s) lack metadata, e.g. {missing[:3]}")
    return interactions, full.restrict(referenced)


def write_interactions(path: str | Path, interactions: Iterable[Interaction]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("user_id\titem_id\ttimestamp\n")
        for it in interactions:
            fh.write(f"{it.user_id}\t{it.item_id}\t{it.timestamp}\n")


# ---------------------------------------------------------------- preprocessing


def five_core_filter(interactions: Sequence[Interaction], k: int = 5) -> list[Interaction]:
    """Drop users and items with fewer than ``k`` interactions until nothing changes.

    Degrees are maintained incrementally, so each interaction is removed at most
    once. Input order is preserved in the output.
    """
    alive = [True] * len(interactions)
    by_user: dict[str, list[int]] = defaultdict(list)
    by_item: dict[str, list[int]] = defaultdict(list)
    for idx, it in enumerate(interactions):
        by_user[it.user_id].append(idx)
        by_item[it.item_id].append(idx)
    user_deg = {u: len(v) for u, v in by_user.items()}
    item_deg = {i: len(v) for i, v in by_item.items()}

    stack = [("u", u) for u, d in user_deg.items() if d < k] + [("i", i) for i, d in item_deg.items() if d < k]
    dead_users: set[str] = set()
    dead_items: set[str] = set()
    while stack:
        kind, key = stack.pop()
        if kind == "u":
            if key in dead_users:
                continue
            dead_users.add(key)
            rows = by_user[key]
        else:
            if key in dead_items:
                continue
            dead_items.add(key)
            rows = by_item[key]
        for idx in rows:
            if not alive[idx]:
                continue
            alive[idx] = False
            it = interactions[idx]
            user_deg[it.user_id] -= 1
            item_deg[it.item_id] -= 1
            if user_deg[it.user_id] < k and it.user_id not in dead_users:
                stack.append(("u", it.user_id))
            if item_deg[it.item_id] < k and it.item_id not in dead_items:
                stack.append(("i", it.item_id))
    return [it for it, keep in zip(interactions, alive) if keep]


def build_sequences(interactions: Sequence[Interaction], max_len: int = DEFAULT_MAX_LEN) -> list[UserSequence]:
    """One (history, target) pair per user, ordered by first appearance of the user.

    Ties in timestamp keep file order. Users with a single interaction are
    skipped and counted in the log.
    """
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    rows: dict[str, list[tuple[int, int, str]]] = {}
    for pos, it in enumerate(interactions):
        rows.setdefault(it.user_id, []).append((it.timestamp, pos, it.item_id))

    out: list[UserSequence] = []
    skipped = 0
    for user, events in rows.items():
        if len(events) < 2:
            skipped += 1
            continue
        events.sort()
        items = [e[2] for e in events]
        out.append(UserSequence(user, tuple(items[:-1][-max_len:]), items[-1]))
    if skipped:
        log.info("build_sequences skipped %d user(s) with fewer than 2 interactions", skipped)
    return out


def partition_federated(sequences: Sequence[UserSequence], config: SplitConfig) -> FederatedSplit:
    """Sample ``n_clients`` disjoint groups of users; everyone left over is a cold-start test user."""
    n_needed = config.n_clients * config.users_per_client
    if n_needed > len(sequences):
        raise ConfigError(
            f"need {n_needed} users for {config.n_clients} x {config.users_per_client}, have {len(sequences)}"
        )
    rng = np.random.default_rng(config.seed)
    if config.mode == "uniform-random":
        order = rng.permutation(len(sequences))
        groups = [
            [sequences[i] for i in order[k * config.users_per_client : (k + 1) * config.users_per_client]]
            for k in range(config.n_clients)
        ]
        taken = set(order[:n_needed].tolist())
    else:
        groups, taken = _heterogeneous_groups(sequences, config, rng)
    test = [s for i, s in enumerate(sequences) if i not in taken]
    return FederatedSplit(groups, test, config.seed)


def _heterogeneous_groups(sequences, config: SplitConfig, rng: np.random.Generator):
    # Items are shuffled into n_clients blocks; a user's home block is the one
    # holding most of their items. Clients draw from their home pool first and
    # top up from the shared leftover pool only when it runs dry.
    items = sorted({i for s in sequences for i in (*s.history, s.target)})
    perm = rng.permutation(len(items))
    block_of = {items[j]: int(b * config.n_clients // len(items)) for b, j in enumerate(perm)}
    pools: list[list[int]] = [[] for _ in range(config.n_clients)]
    for idx, seq in enumerate(sequences):
        votes = Counter(block_of[i] for i in (*seq.history, seq.target))
        home = min(votes, key=lambda b: (-votes[b], b))
        pools[home].append(idx)
    for pool in pools:
        rng.shuffle(pool)

    taken: set[int] = set()
    groups = []
    for k in range(config.n_clients):
        chosen = [i for i in pools[k] if i not in taken][: config.users_per_client]
        taken.update(chosen)
        groups.append(chosen)
    leftovers = [i for i in rng.permutation(len(sequences)).tolist() if i not in taken]
    for group in groups:
        while len(group) < config.users_per_client:
            i = leftovers.pop(0)
            group.append(i)
            taken.add(i)
    return [[sequences[i] for i in g] for g in groups], taken


# ---------------------------------------------------------------- synthetic data

_ATTRIBUTE_WORDS = (
    "war", "action", "scifi", "drama", "comedy", "horror", "romance", "western",
    "mystery", "fantasy", "thriller", "musical", "crime", "sports", "history",
    "nature", "travel", "cooking", "poetry", "noir", "satire", "heist",
    "espionage", "pirate",
)
_SYLLABLES = ("ka", "lo", "mi", "ra", "ven", "tor", "sel", "dun", "pha", "qui", "zor", "bel", "nyx", "ori", "tal", "wes")


def _attribute_vocab(n: int) -> list[str]:
    base = len(_ATTRIBUTE_WORDS)
    return [_ATTRIBUTE_WORDS[i % base] + (str(i // base) if i >= base else "") for i in range(n)]


def _pseudo_word(rng: np.random.Generator) -> str:
    parts = rng.choice(len(_SYLLABLES), size=int(rng.integers(2, 4)))
    return "".join(_SYLLABLES[p] for p in parts).capitalize()


@dataclass(frozen=True)
class SyntheticConfig:
    n_clients: int = 5
    items_per_client: int = 40
    users_per_client: int = 200
    n_attributes: int = 10
    n_test_users: int = 50
    attrs_per_item: int = 2
    min_history: int = 3
    max_history: int = 8
    on_taste: float = 0.8
    seed: int = 0


def synth_heterogeneous(
    n_clients: int,
    items_per_client: int,
    users_per_client: int,
    n_attributes: int,
    seed: int,
    n_test_users: int = 50,
    **kwargs,
) -> tuple[Catalog, FederatedSplit]:
    """Generate clients with disjoint item IDs but a shared attribute vocabulary.

    Each client, and the held-out test population, owns its own block of
    ``items_per_client`` items. A user has a "taste" attribute; the target and
    most of the history carry it, and at least one history item always does.
    Test users live entirely on the held-out block, so their items are unseen
    by every training client.
    """
    cfg = SyntheticConfig(n_clients, items_per_client, users_per_client, n_attributes, n_test_users, seed=seed, **kwargs)
    if min(cfg.n_clients, cfg.items_per_client, cfg.users_per_client, cfg.n_attributes) < 1:
        raise ConfigError("all synthetic counts must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    vocab = _attribute_vocab(cfg.n_attributes)
    per_item = min(cfg.attrs_per_item, cfg.n_attributes)
    width = len(str(cfg.items_per_client - 1))

    blocks: list[list[ItemMeta]] = []
    for b in range(cfg.n_clients + 1):
        prefix = f"c{b}" if b < cfg.n_clients else "t"
        block = []
        for j in range(cfg.items_per_client):
            # round-robin primary attribute keeps every taste represented in every block
            primary = j % cfg.n_attributes
            others = [a for a in rng.permutation(cfg.n_attributes).tolist() if a != primary][: per_item - 1]
            attrs = tuple(vocab[a] for a in [primary, *others])
            title = f"{_pseudo_word(rng)} {prefix}{j:0{width}d} {' '.join(attrs)}"
            block.append(ItemMeta(f"{prefix}-{j:0{width}d}", title, attrs))
        blocks.append(block)
    catalog = Catalog(m for block in blocks for m in block)

    def make_user(user_id: str, block: list[ItemMeta]) -> UserSequence:
        taste = block[int(rng.integers(len(block)))].attributes[0]
        liked = [m.item_id for m in block if taste in m.attributes]
        every = [m.item_id for m in block]
        length = int(rng.integers(cfg.min_history, cfg.max_history + 1))
        history = [liked[int(rng.integers(len(liked)))]]
        for _ in range(length - 1):
            pool = liked if rng.random() < cfg.on_taste else every
            history.append(pool[int(rng.integers(len(pool)))])
        order = rng.permutation(length)
        history = [history[i] for i in order]
        target = liked[int(rng.integers(len(liked)))]
        return UserSequence(user_id, tuple(history), target)

    clients = [
        [make_user(f"u{k}-{u:04d}", blocks[k]) for u in range(cfg.users_per_client)]
        for k in range(cfg.n_clients)
    ]
    test = [make_user(f"t-{u:04d}", blocks[-1]) for u in range(cfg.n_test_users)]
    return catalog, FederatedSplit(clients, test, cfg.seed)


def write_sequences(path: str | Path, sequences: Iterable[UserSequence]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sequences:
            fh.write(json.dumps(s.to_dict()) + "\n")


def read_sequences(path: str | Path) -> list[UserSequence]:
    with open(path, encoding="utf-8") as fh:
        return [UserSequence.from_dict(json.loads(line)) for line in fh if line.strip()]
