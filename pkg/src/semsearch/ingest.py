"""Dataset ingestion: TSV records, the interaction join, and synthetic corpora.

Users, items, and interactions live in separate header-declared TSV files and
are joined on demand, which keeps the interaction log at a fraction of the
size a fully denormalized log would take.  Joined examples feed training pair
assembly; editorial supervision rows add positives and random-pool negatives
on top of the click log.

The synthetic generator builds a clustered corpus with tunable label noise
and a power-law popularity skew, plus the ground-truth cluster map needed to
score retrieval quality.  Everything is seeded and byte-reproducible.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .tokenizer import Vocabulary, encode, tokenize
from .training import PoolItem, TrainingPair

USERS_HEADER = ["user_id", "gender", "power", "locale", "history"]
ITEMS_HEADER = ["item_id", "title", "category", "popularity"]
INTERACTIONS_HEADER = ["query", "user_id", "item_id", "label"]
GROUND_TRUTH_HEADER = ["id", "cluster"]

INTERACTION_LABELS = frozenset({"click", "skip", "human_pos", "human_neg"})
SUPERVISION_LABELS = frozenset({"human_pos", "human_neg"})
POSITIVE_LABELS = frozenset({"click", "human_pos"})


@dataclass(frozen=True)
class UserRecord:
    user_id: str
    gender: str
    power: str
    locale: str
    history: tuple[str, ...]


@dataclass(frozen=True)
class ItemRecord:
    item_id: str
    title: str
    category: str
    popularity: int


@dataclass(frozen=True)
class Interaction:
    query: str
    user_id: str
    item_id: str
    label: str


@dataclass
class JoinedExample:
    query: str
    user: UserRecord | None
    item: ItemRecord
    label: str


@dataclass
class JoinStats:
    """Counts kept while streaming a join."""

    total: int = 0
    joined: int = 0
    missing_user: int = 0
    missing_item: int = 0


def _check_cell(value: str, what: str) -> str:
    if "\t" in value or "\n" in value or "\r" in value:
        raise ValueError(f"{what} contains a tab or newline: {value!r}")
    return value


def write_tsv(path: str, header: Sequence[str], rows: Iterable[Sequence[str]]) -> None:
    """Write a header-declared TSV, rejecting cells with tabs or newlines."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            if len(row) != len(header):
                raise ValueError(f"row has {len(row)} cells, header has {len(header)}")
            fh.write("\t".join(_check_cell(c, "cell") for c in row) + "\n")


def read_tsv(path: str, header: Sequence[str]) -> Iterator[list[str]]:
    """Stream rows of a TSV, validating the header and column counts."""
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
        if first.split("\t") != list(header):
            raise ValueError(
                f"{path}: header mismatch, expected {list(header)}, got {first.split(chr(9))}"
            )
        for lineno, raw in enumerate(fh, start=2):
            line = raw.rstrip("\n")
            if not line:
                continue
            cells = line.split("\t")
            if len(cells) != len(header):
                raise ValueError(
                    f"{path}:{lineno}: expected {len(header)} columns, got {len(cells)}"
                )
            yield cells


def load_users(path: str) -> dict[str, UserRecord]:
    """Load the user table keyed by id; duplicate ids fault."""
    users: dict[str, UserRecord] = {}
    for cells in read_tsv(path, USERS_HEADER):
        user_id, gender, power, locale, history = cells
        if not user_id:
            raise ValueError(f"{path}: empty user_id")
        if user_id in users:
            raise ValueError(f"{path}: duplicate user_id {user_id!r}")
        items = tuple(h for h in history.split(",") if h) if history else ()
        users[user_id] = UserRecord(user_id, gender, power, locale, items)
    return users


def load_items(path: str) -> dict[str, ItemRecord]:
    """Load the item table keyed by id, preserving file order; duplicates fault."""
    items: dict[str, ItemRecord] = {}
    for cells in read_tsv(path, ITEMS_HEADER):
        item_id, title, category, pop_str = cells
        if not item_id:
            raise ValueError(f"{path}: empty item_id")
        if item_id in items:
            raise ValueError(f"{path}: duplicate item_id {item_id!r}")
        try:
            popularity = int(pop_str)
        except ValueError as exc:
            raise ValueError(f"{path}: popularity must be an integer, got {pop_str!r}") from exc
        if popularity < 0:
            raise ValueError(f"{path}: popularity must be >= 0, got {popularity}")
        items[item_id] = ItemRecord(item_id, title, category, popularity)
    return items


def iter_interactions(path: str, allowed: frozenset[str] = INTERACTION_LABELS) -> Iterator[Interaction]:
    """Stream the interaction log; unknown labels fault."""
    for cells in read_tsv(path, INTERACTIONS_HEADER):
        query, user_id, item_id, label = cells
        if label not in allowed:
            raise ValueError(f"{path}: unknown label {label!r} (allowed: {sorted(allowed)})")
        yield Interaction(query, user_id, item_id, label)


def join_interactions(
    interactions: Iterable[Interaction],
    users: Mapping[str, UserRecord] | None,
    items: Mapping[str, ItemRecord],
    strict: bool = False,
    stats: JoinStats | None = None,
) -> Iterator[JoinedExample]:
    """Attach user and item records to each interaction.

    Rows referencing an unknown user or item are skipped and counted in
    ``stats`` (or fault when ``strict``).  A ``users`` table of None means
    no user data is available: examples join with ``user=None`` instead of
    being dropped.
    """
    for inter in interactions:
        if stats is not None:
            stats.total += 1
        user = users.get(inter.user_id) if users is not None else None
        item = items.get(inter.item_id)
        if users is not None and user is None:
            if strict:
                raise ValueError(f"interaction references unknown user {inter.user_id!r}")
            if stats is not None:
                stats.missing_user += 1
            continue
        if item is None:
            if strict:
                raise ValueError(f"interaction references unknown item {inter.item_id!r}")
            if stats is not None:
                stats.missing_item += 1
            continue
        if stats is not None:
            stats.joined += 1
        yield JoinedExample(inter.query, user, item, inter.label)


@dataclass
class SupervisionData:
    """Editorial relevance judgments split by polarity."""

    positives: list[Interaction]
    negatives: list[Interaction]
    duplicates_dropped: int = 0


def load_supervision(path: str) -> SupervisionData:
    """Load human judgments; duplicate positive rows are dropped with a count."""
    positives: list[Interaction] = []
    negatives: list[Interaction] = []
    seen_pos: set[tuple[str, str, str]] = set()
    dups = 0
    for inter in iter_interactions(path, allowed=SUPERVISION_LABELS):
        if inter.label == "human_pos":
            key = (inter.query, inter.user_id, inter.item_id)
            if key in seen_pos:
                dups += 1
                continue
            seen_pos.add(key)
            positives.append(inter)
        else:
            negatives.append(inter)
    return SupervisionData(positives, negatives, dups)


def item_text(item: ItemRecord) -> str:
    """The text the item tower sees: title plus the category token."""
    return f"{item.title} {item.category}" if item.category else item.title


def profile_text(user: UserRecord) -> str:
    """Categorical user features rendered as dedicated profile tokens."""
    return f"g:{user.gender} p:{user.power} l:{user.locale}"


def _encode_optional(vocab: Vocabulary, text: str) -> list[int]:
    """Encode without the unknown-id fallback; may be empty."""
    ids = []
    for tok in tokenize(text):
        token_id = vocab.id_of(tok.text)
        if token_id is not None:
            ids.append(token_id)
    return ids


def vocabulary_corpus(
    items: Mapping[str, ItemRecord],
    interactions_path: str,
    users: Mapping[str, UserRecord] | None = None,
) -> Iterator[str]:
    """Every line of text the towers may see, for vocabulary counting."""
    for item in items.values():
        yield item_text(item)
    for inter in iter_interactions(interactions_path):
        yield inter.query
    if users:
        for user in users.values():
            yield profile_text(user)


@dataclass
class AssembledData:
    """Training inputs derived from logs plus optional supervision."""

    pairs: list[TrainingPair]
    pool: list[PoolItem]
    stats: JoinStats


def assemble_training_data(
    users: Mapping[str, UserRecord] | None,
    items: Mapping[str, ItemRecord],
    interactions: Iterable[Interaction],
    vocab: Vocabulary,
    supervision: SupervisionData | None = None,
    personalize: bool = False,
    strict: bool = False,
) -> AssembledData:
    """Turn joined interactions into training pairs and a negatives pool.

    Clicks and human positives become positive pairs.  The pool holds every
    item once; items under skip or human-negative rows are appended again,
    raising their draw frequency among random negatives.

    Args:
        users: User table, or None when no user data exists.
        items: Item table.
        interactions: Interaction stream (clicks, skips).
        vocab: Vocabulary for token encoding.
        supervision: Optional editorial judgments.
        personalize: Append user profile token ids to query sequences.
        strict: Fault on dangling references instead of skipping.

    Returns:
        Pairs, pool, and join statistics.
    """
    pool: list[PoolItem] = []
    item_ids_cache: dict[str, tuple[int, ...]] = {}
    for item in items.values():
        ids = tuple(encode(vocab, item_text(item)))
        item_ids_cache[item.item_id] = ids
        pool.append(PoolItem(item.item_id, ids))

    profile_cache: dict[str, list[int]] = {}

    def query_ids(query: str, user: UserRecord | None) -> tuple[int, ...]:
        ids = list(encode(vocab, query))
        if personalize and user is not None:
            if user.user_id not in profile_cache:
                profile_cache[user.user_id] = _encode_optional(vocab, profile_text(user))
            ids.extend(profile_cache[user.user_id])
        return tuple(ids)

    pairs: list[TrainingPair] = []
    stats = JoinStats()
    for ex in join_interactions(interactions, users, items, strict=strict, stats=stats):
        if ex.label in POSITIVE_LABELS:
            pairs.append(TrainingPair(
                query_ids(ex.query, ex.user), ex.item.item_id,
                item_ids_cache[ex.item.item_id],
            ))
        else:
            # Skips and human negatives boost the item's pool frequency.
            pool.append(PoolItem(ex.item.item_id, item_ids_cache[ex.item.item_id]))

    if supervision is not None:
        for inter in supervision.positives:
            item = items.get(inter.item_id)
            if item is None:
                if strict:
                    raise ValueError(f"supervision references unknown item {inter.item_id!r}")
                stats.missing_item += 1
                continue
            user = users.get(inter.user_id) if users is not None else None
            pairs.append(TrainingPair(
                query_ids(inter.query, user), item.item_id,
                item_ids_cache[item.item_id],
            ))
        for inter in supervision.negatives:
            item = items.get(inter.item_id)
            if item is None:
                if strict:
                    raise ValueError(f"supervision references unknown item {inter.item_id!r}")
                stats.missing_item += 1
                continue
            pool.append(PoolItem(item.item_id, item_ids_cache[item.item_id]))
    return AssembledData(pairs, pool, stats)


@dataclass
class SyntheticSpec:
    """Parameters of the generated clustered corpus.

    Attributes:
        clusters: Number of semantic clusters (>= 2).
        items_per_cluster: Items generated per cluster.
        queries_per_cluster: Distinct query strings per cluster.
        clicks: Total click interactions.
        users: Number of users.
        noise: Probability that a generated token is drawn from the noise
            pool instead of the cluster pool.
        skew: Popularity skew; within a cluster item j is clicked with
            probability proportional to (j + 1) ** -skew.  Zero is uniform.
        polysemous_queries: Queries whose clicks split between two clusters.
        seed: RNG seed; fixed seed means byte-identical output files.
    """

    clusters: int = 50
    items_per_cluster: int = 40
    queries_per_cluster: int = 20
    clicks: int = 100_000
    users: int = 500
    noise: float = 0.1
    skew: float = 0.0
    polysemous_queries: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.clusters < 2:
            raise ValueError(f"clusters must be >= 2, got {self.clusters}")
        if self.items_per_cluster < 1 or self.queries_per_cluster < 1:
            raise ValueError("items_per_cluster and queries_per_cluster must be >= 1")
        if self.clicks < 1:
            raise ValueError(f"clicks must be >= 1, got {self.clicks}")
        if self.users < 1:
            raise ValueError(f"users must be >= 1, got {self.users}")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError(f"noise must be in [0, 1], got {self.noise}")
        if self.skew < 0.0:
            raise ValueError(f"skew must be >= 0, got {self.skew}")
        if self.polysemous_queries < 0:
            raise ValueError("polysemous_queries must be >= 0")


@dataclass
class SyntheticCorpus:
    """Paths of the generated files plus the ground-truth cluster map."""

    users_path: str
    items_path: str
    interactions_path: str
    ground_truth_path: str
    clusters_by_id: dict[str, tuple[str, ...]]


_CLUSTER_POOL = 8
_NOISE_POOL = 50
_GENDERS = ("f", "m", "na")
_LOCALES = tuple(f"loc{i}" for i in range(5))


def generate_synthetic(spec: SyntheticSpec, out_dir: str) -> SyntheticCorpus:
    """Write a clustered corpus under ``out_dir``.

    Item titles and query strings draw tokens from their cluster's pool,
    with ``spec.noise`` probability of a shared noise token instead.  Each
    click picks a query uniformly, then an item from the query's cluster
    with popularity weights ``(j + 1) ** -skew``.  Polysemous queries have
    a single dedicated token and alternate between two clusters.  Item
    popularity columns record realized click counts.

    Returns:
        File paths and the id -> clusters ground-truth map (queries that
        span two clusters map to both).
    """
    rng = np.random.default_rng(spec.seed)
    os.makedirs(out_dir, exist_ok=True)

    cluster_tokens = [
        [f"c{c}w{k}" for k in range(_CLUSTER_POOL)] for c in range(spec.clusters)
    ]
    noise_tokens = [f"nz{k}" for k in range(_NOISE_POOL)]

    def draw_tokens(cluster: int, n: int) -> str:
        out = []
        for _ in range(n):
            if rng.random() < spec.noise:
                out.append(noise_tokens[int(rng.integers(0, _NOISE_POOL))])
            else:
                out.append(cluster_tokens[cluster][int(rng.integers(0, _CLUSTER_POOL))])
        return " ".join(out)

    item_ids: list[list[str]] = []
    item_titles: dict[str, str] = {}
    clusters_by_id: dict[str, tuple[str, ...]] = {}
    for c in range(spec.clusters):
        ids_c = []
        for j in range(spec.items_per_cluster):
            item_id = f"i{c}x{j}"
            ids_c.append(item_id)
            item_titles[item_id] = draw_tokens(c, 4)
            clusters_by_id[item_id] = (f"c{c}",)
        item_ids.append(ids_c)

    queries: list[tuple[str, tuple[int, ...]]] = []
    for c in range(spec.clusters):
        for qn in range(spec.queries_per_cluster):
            text = draw_tokens(c, 2)
            queries.append((text, (c,)))
            clusters_by_id.setdefault(text, ())
            clusters_by_id[text] = tuple(
                sorted(set(clusters_by_id[text]) | {f"c{c}"})
            )
    for p in range(spec.polysemous_queries):
        a = (2 * p) % spec.clusters
        b = (2 * p + 1) % spec.clusters
        text = f"pq{p}"
        queries.append((text, (a, b)))
        clusters_by_id[text] = tuple(sorted({f"c{a}", f"c{b}"}))

    user_ids = [f"u{n}" for n in range(spec.users)]

    # Popularity weights shared by all clusters: item j gets (j + 1) ** -skew.
    ranks = np.arange(1, spec.items_per_cluster + 1, dtype=np.float64)
    weights = ranks ** -spec.skew
    weights /= weights.sum()

    click_counts = {item_id: 0 for ids_c in item_ids for item_id in ids_c}
    interaction_rows: list[tuple[str, str, str, str]] = []
    n_queries = len(queries)
    for _ in range(spec.clicks):
        q_idx = int(rng.integers(0, n_queries))
        text, clusters = queries[q_idx]
        cluster = clusters[int(rng.integers(0, len(clusters)))]
        j = int(rng.choice(spec.items_per_cluster, p=weights))
        item_id = item_ids[cluster][j]
        user_id = user_ids[int(rng.integers(0, spec.users))]
        click_counts[item_id] += 1
        interaction_rows.append((text, user_id, item_id, "click"))

    users_path = os.path.join(out_dir, "users.tsv")
    items_path = os.path.join(out_dir, "items.tsv")
    interactions_path = os.path.join(out_dir, "interactions.tsv")
    ground_truth_path = os.path.join(out_dir, "ground_truth.tsv")

    all_item_ids = [item_id for ids_c in item_ids for item_id in ids_c]
    user_rows = []
    for user_id in user_ids:
        gender = _GENDERS[int(rng.integers(0, len(_GENDERS)))]
        power = str(int(rng.integers(1, 6)))
        locale = _LOCALES[int(rng.integers(0, len(_LOCALES)))]
        n_hist = int(rng.integers(0, 4))
        history = ",".join(
            all_item_ids[int(rng.integers(0, len(all_item_ids)))] for _ in range(n_hist)
        )
        user_rows.append((user_id, gender, power, locale, history))
    write_tsv(users_path, USERS_HEADER, user_rows)

    item_rows = []
    for c in range(spec.clusters):
        for item_id in item_ids[c]:
            item_rows.append(
                (item_id, item_titles[item_id], f"cat{c}", str(click_counts[item_id]))
            )
    write_tsv(items_path, ITEMS_HEADER, item_rows)
    write_tsv(interactions_path, INTERACTIONS_HEADER, interaction_rows)

    gt_rows = []
    for key in sorted(clusters_by_id):
        for cluster_name in clusters_by_id[key]:
            gt_rows.append((key, cluster_name))
    write_tsv(ground_truth_path, GROUND_TRUTH_HEADER, gt_rows)

    return SyntheticCorpus(
        users_path, items_path, interactions_path, ground_truth_path, clusters_by_id
    )


def load_ground_truth(path: str) -> dict[str, set[str]]:
    """Read the id -> clusters map written by :func:`generate_synthetic`."""
    out: dict[str, set[str]] = {}
    for key, cluster in read_tsv(path, GROUND_TRUTH_HEADER):
        out.setdefault(key, set()).add(cluster)
    return out
