"""Deterministic text tokenization shared by vocabulary building, training, and serving.

Every stage of the pipeline must map the same text to the same token id
stream, otherwise embeddings trained offline are useless online.  All the
logic here is therefore pure and dependency-free: NFKC normalization,
lowercasing, whitespace splitting, per-character handling of CJK ideographs,
and letter trigrams wrapped in ``#`` boundary markers.
"""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Iterator

UNIGRAM = "unigram"
TRIGRAM = "trigram"

UNK_TOKEN = "<UNK>"
UNK_ID = 0

# Code point ranges treated as CJK: each such character becomes its own
# unigram because whitespace does not delimit words in these scripts.
_CJK_RANGES = (
    (0x1100, 0x11FF),    # Hangul Jamo
    (0x2E80, 0x2EFF),    # CJK radicals supplement
    (0x3000, 0x303F),    # CJK symbols and punctuation
    (0x3040, 0x30FF),    # Hiragana, Katakana
    (0x3400, 0x4DBF),    # CJK unified ideographs extension A
    (0x4E00, 0x9FFF),    # CJK unified ideographs
    (0xAC00, 0xD7AF),    # Hangul syllables
    (0xF900, 0xFAFF),    # CJK compatibility ideographs
    (0x20000, 0x2A6DF),  # CJK unified ideographs extension B
    (0x2A700, 0x2EBEF),  # CJK unified ideographs extensions C-F
)


def _is_cjk(ch: str) -> bool:
    cp = ord(ch)
    for lo, hi in _CJK_RANGES:
        if lo <= cp <= hi:
            return True
    return False


@dataclass(frozen=True)
class Token:
    """A surface token with its kind, either ``unigram`` or ``trigram``."""

    text: str
    kind: str


def _split_words(chunk: str) -> Iterator[str]:
    """Split a whitespace-delimited chunk into words.

    Runs of non-CJK characters stay together; every CJK character is
    emitted on its own.
    """
    buf: list[str] = []
    for ch in chunk:
        if _is_cjk(ch):
            if buf:
                yield "".join(buf)
                buf = []
            yield ch
        else:
            buf.append(ch)
    if buf:
        yield "".join(buf)


def tokenize(text: str) -> list[Token]:
    """Tokenize ``text`` into unigrams followed by letter trigrams.

    The text is NFKC-normalized, lowercased, and split on whitespace.  CJK
    characters become single-character unigrams.  Each alphanumeric unigram
    of length >= 2 additionally produces the trigrams of ``#word#``, where
    ``#`` marks the word boundary.  All unigrams precede all trigrams in
    the output, each group in text order.

    Args:
        text: Raw query or item text.

    Returns:
        List of tokens; empty when the text contains no word characters.
    """
    normalized = unicodedata.normalize("NFKC", text).lower()
    words: list[str] = []
    for chunk in normalized.split():
        words.extend(_split_words(chunk))

    tokens = [Token(w, UNIGRAM) for w in words]
    for w in words:
        if len(w) >= 2 and w.isalnum():
            padded = f"#{w}#"
            tokens.extend(
                Token(padded[i : i + 3], TRIGRAM) for i in range(len(padded) - 2)
            )
    return tokens


class Vocabulary:
    """Immutable token-to-id mapping with dense ids and a reserved unknown id.

    Id 0 is always the unknown token.  Real tokens get ids 1..size-1
    assigned by descending corpus count, ties broken by lexicographic
    token order, so a rebuild over the same corpus is bit-identical.
    """

    def __init__(self, entries: list[tuple[str, int]]):
        """Build from ``(token, count)`` pairs already in id order (id 1 first).

        Args:
            entries: Token texts with their corpus counts, ordered by id.

        Raises:
            ValueError: On duplicate or malformed tokens.
        """
        self._id_by_token: dict[str, int] = {}
        self._entries: list[tuple[str, int]] = []
        for token, count in entries:
            if token in self._id_by_token:
                raise ValueError(f"duplicate token in vocabulary: {token!r}")
            if not token or token == UNK_TOKEN:
                raise ValueError(f"invalid vocabulary token: {token!r}")
            if "\t" in token or "\n" in token:
                raise ValueError(f"vocabulary token contains tab or newline: {token!r}")
            self._id_by_token[token] = len(self._entries) + 1
            self._entries.append((token, count))

    @property
    def size(self) -> int:
        """Number of ids including the unknown id."""
        return len(self._entries) + 1

    def id_of(self, token: str) -> int | None:
        """Return the id for ``token`` or None when out of vocabulary."""
        return self._id_by_token.get(token)

    def token_of(self, token_id: int) -> str:
        """Return the token text for ``token_id``."""
        if token_id == UNK_ID:
            return UNK_TOKEN
        if not 1 <= token_id < self.size:
            raise ValueError(f"token id out of range: {token_id}")
        return self._entries[token_id - 1][0]

    def count_of(self, token_id: int) -> int:
        """Return the recorded corpus count for ``token_id``."""
        if token_id == UNK_ID:
            return 0
        if not 1 <= token_id < self.size:
            raise ValueError(f"token id out of range: {token_id}")
        return self._entries[token_id - 1][1]

    def __contains__(self, token: str) -> bool:
        return token in self._id_by_token

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Vocabulary):
            return NotImplemented
        return self._entries == other._entries

    @classmethod
    def build(cls, corpus: Iterable[str], min_count: int = 1) -> "Vocabulary":
        """Count tokens over ``corpus`` and assign dense ids.

        Args:
            corpus: Iterable of text lines; each is tokenized independently.
            min_count: Keep tokens seen at least this many times; must be >= 1.

        Returns:
            The built vocabulary.

        Raises:
            ValueError: If ``min_count`` < 1.
        """
        if min_count < 1:
            raise ValueError(f"min_count must be >= 1, got {min_count}")
        counts: Counter[str] = Counter()
        for line in corpus:
            counts.update(tok.text for tok in tokenize(line))
        kept = [(t, c) for t, c in counts.items() if c >= min_count]
        # Descending count, lexicographic tie-break: stable across rebuilds.
        kept.sort(key=lambda tc: (-tc[1], tc[0]))
        return cls(kept)

    def save(self, path: str) -> None:
        """Write the vocabulary as ``token<TAB>id<TAB>count`` lines, id order.

        Line 0 is always the unknown token with id 0 and count 0.
        """
        lines = [f"{UNK_TOKEN}\t{UNK_ID}\t0"]
        lines.extend(
            f"{token}\t{i + 1}\t{count}" for i, (token, count) in enumerate(self._entries)
        )
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        """Read a vocabulary written by :meth:`save`.

        Raises:
            ValueError: On malformed lines, non-dense ids, or a bad header row.
        """
        entries: list[tuple[str, int]] = []
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh):
                line = raw.rstrip("\n")
                if not line and lineno > 0:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise ValueError(f"{path}:{lineno + 1}: expected 3 fields, got {len(parts)}")
                token, id_str, count_str = parts
                try:
                    token_id = int(id_str)
                    count = int(count_str)
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno + 1}: non-integer id or count") from exc
                if lineno == 0:
                    if token != UNK_TOKEN or token_id != UNK_ID or count != 0:
                        raise ValueError(
                            f"{path}: first line must be '{UNK_TOKEN}\\t0\\t0', got {line!r}"
                        )
                    continue
                if token_id != lineno:
                    raise ValueError(
                        f"{path}:{lineno + 1}: ids must be dense, expected {lineno} got {token_id}"
                    )
                if count < 1:
                    raise ValueError(f"{path}:{lineno + 1}: count must be >= 1, got {count}")
                entries.append((token, count))
        return cls(entries)


def encode(vocab: Vocabulary, text: str) -> list[int]:
    """Map text to token ids, dropping out-of-vocabulary tokens.

    Args:
        vocab: Vocabulary to encode against.
        text: Raw text.

    Returns:
        Non-empty list of ids; ``[0]`` (the unknown id) when no token of the
        text is in the vocabulary, so downstream embedding lookups always
        have at least one row to aggregate.
    """
    ids = []
    for tok in tokenize(text):
        token_id = vocab.id_of(tok.text)
        if token_id is not None:
            ids.append(token_id)
    return ids if ids else [UNK_ID]
