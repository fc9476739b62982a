"""Text normalization, CJK-aware pre-tokenization, WordPiece, and vocabulary.

The pipeline is: raw text -> normalize (case folding + traditional-to-simplified
mapping) -> cjk_pretokenize (one unit per CJK character, whole words otherwise)
-> wordpiece (greedy longest-prefix match against the vocabulary).
All functions are pure; Vocabulary is immutable once built.
"""

from __future__ import annotations

import collections
from dataclasses import dataclass, field
from typing import Iterable

from .errors import ConfigError, DataError

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)

# CJK Unified Ideographs plus Extension A.
_CJK_RANGES = ((0x4E00, 0x9FFF), (0x3400, 0x4DBF))

DEFAULT_MAX_PIECE_CHARS = 100


def is_cjk(ch: str) -> bool:
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in _CJK_RANGES)


@dataclass(frozen=True)
class NormalizedText:
    """Normalized text plus, per output character, the input index it came from."""

    text: str
    charmap: tuple[int, ...]

    def __post_init__(self):
        if len(self.text) != len(self.charmap):
            raise DataError(
                f"charmap length {len(self.charmap)} != text length {len(self.text)}"
            )


class Vocabulary:
    """Token <-> id bijection with the five reserved specials at ids 0..4."""

    def __init__(self, tokens: Iterable[str]):
        self.tokens: list[str] = list(tokens)
        if tuple(self.tokens[:5]) != SPECIALS:
            raise DataError(
                f"vocabulary must start with {SPECIALS}, got {self.tokens[:5]}"
            )
        self._ids: dict[str, int] = {}
        for i, tok in enumerate(self.tokens):
            if tok in self._ids:
                raise DataError(f"duplicate vocabulary token {tok!r} at id {i}")
            self._ids[tok] = i

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id_of(self, token: str) -> int:
        return self._ids[token]

    def token_of(self, idx: int) -> str:
        return self.tokens[idx]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.tokens:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "rb") as f:
            raw = f.read()
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise DataError(f"vocab file {path}: invalid UTF-8 at byte {e.start}") from e
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def decode_utf8(raw: bytes) -> str:
    """Decode bytes as UTF-8; on failure, report the offending byte offset."""
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise DataError(f"invalid UTF-8 at byte offset {e.start}") from e


def load_trad_map(path) -> dict[str, str]:
    """Load a traditional-to-simplified table: one "from to" pair per line.

    Chains (a->b, b->c) are resolved to their fixpoint so a single application
    of the map is idempotent; cycles are rejected.
    """
    mapping: dict[str, str] = {}
    with open(path, "rb") as f:
        raw = f.read()
    text = decode_utf8(raw)
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2 or len(parts[0]) != 1 or len(parts[1]) != 1:
            raise DataError(
                f"trad map {path} line {lineno}: expected 'FROM TO' single chars, got {line!r}"
            )
        src, dst = parts
        if src in mapping and mapping[src] != dst:
            raise DataError(f"trad map {path} line {lineno}: {src!r} mapped twice")
        mapping[src] = dst
    return _resolve_chains(mapping)


def _resolve_chains(mapping: dict[str, str]) -> dict[str, str]:
    resolved = {}
    for src in mapping:
        seen = {src}
        dst = mapping[src]
        while dst in mapping:
            if dst in seen:
                raise DataError(f"trad map contains a cycle through {src!r}")
            seen.add(dst)
            dst = mapping[dst]
        resolved[src] = dst
    return resolved


def normalize(raw: str, trad_map: dict[str, str] | None = None) -> NormalizedText:
    """Lowercase ASCII letters and apply the traditional-to-simplified map.

    Both transforms are one character to one character, so the charmap is the
    identity over the input. Mapping happens after case folding, and any ASCII
    uppercase the map itself produces is folded too.
    """
    trad_map = trad_map or {}
    out: list[str] = []
    charmap: list[int] = []
    for i, ch in enumerate(raw):
        if "A" <= ch <= "Z":
            ch = ch.lower()
        ch = trad_map.get(ch, ch)
        if "A" <= ch <= "Z":
            ch = ch.lower()
        out.append(ch)
        charmap.append(i)
    return NormalizedText("".join(out), tuple(charmap))


@dataclass(frozen=True)
class Unit:
    """One pre-tokenization unit: a CJK character or a run of non-CJK text."""

    text: str
    start: int  # char offsets into the normalized text, end-exclusive
    end: int


def cjk_pretokenize(t: NormalizedText) -> list[Unit]:
    """Split into units: each CJK character alone, maximal non-CJK runs as words.

    Whitespace separates units and never appears in one.
    """
    units: list[Unit] = []
    run_start = -1
    for i, ch in enumerate(t.text):
        if ch.isspace():
            if run_start >= 0:
                units.append(Unit(t.text[run_start:i], run_start, i))
                run_start = -1
        elif is_cjk(ch):
            if run_start >= 0:
                units.append(Unit(t.text[run_start:i], run_start, i))
                run_start = -1
            units.append(Unit(ch, i, i + 1))
        else:
            if run_start < 0:
                run_start = i
    if run_start >= 0:
        units.append(Unit(t.text[run_start:], run_start, len(t.text)))
    return units


def wordpiece_pieces(
    unit: str, v: Vocabulary, max_piece_chars: int = DEFAULT_MAX_PIECE_CHARS
) -> list[str]:
    """Greedy longest-match segmentation into vocabulary pieces.

    Non-initial pieces carry the "##" prefix. If the unit is too long or no
    prefix matches at some point, the whole unit becomes [UNK].
    """
    if not unit:
        return []
    if len(unit) > max_piece_chars:
        return [UNK]
    pieces: list[str] = []
    start = 0
    while start < len(unit):
        end = len(unit)
        match = None
        while start < end:
            piece = unit[start:end]
            if start > 0:
                piece = "##" + piece
            if piece in v:
                match = piece
                break
            end -= 1
        if match is None:
            return [UNK]
        pieces.append(match)
        start = end
    return pieces


def wordpiece(
    unit: str, v: Vocabulary, max_piece_chars: int = DEFAULT_MAX_PIECE_CHARS
) -> list[int]:
    """Token ids of the greedy segmentation (see wordpiece_pieces)."""
    return [v.id_of(p) for p in wordpiece_pieces(unit, v, max_piece_chars)]


@dataclass(frozen=True)
class TokenizedText:
    """Token ids with per-token character spans into the normalized text."""

    ids: tuple[int, ...]
    spans: tuple[tuple[int, int], ...]  # [start, end) char offsets

    def __len__(self) -> int:
        return len(self.ids)


def tokenize_sentence(
    t: NormalizedText, v: Vocabulary, max_piece_chars: int = DEFAULT_MAX_PIECE_CHARS
) -> TokenizedText:
    """Compose cjk_pretokenize and wordpiece; no CLS/SEP is added here.

    Pieces of a unit share the unit's span, subdivided by character counts;
    a unit that maps to [UNK] keeps its whole span.
    """
    ids: list[int] = []
    spans: list[tuple[int, int]] = []
    for unit in cjk_pretokenize(t):
        pieces = wordpiece_pieces(unit.text, v, max_piece_chars)
        if pieces == [UNK]:
            ids.append(UNK_ID)
            spans.append((unit.start, unit.end))
            continue
        pos = unit.start
        for piece in pieces:
            n = len(piece) - 2 if piece.startswith("##") else len(piece)
            ids.append(v.id_of(piece))
            spans.append((pos, pos + n))
            pos += n
    return TokenizedText(tuple(ids), tuple(spans))


def detokenize(t: NormalizedText, tok: TokenizedText, v: Vocabulary) -> str:
    """Rebuild the normalized text from pieces, re-inserting original spacing."""
    out = []
    prev_end = 0
    for idx, (start, end) in zip(tok.ids, tok.spans):
        out.append(t.text[prev_end:start])
        piece = v.token_of(idx)
        out.append(piece[2:] if piece.startswith("##") else piece)
        prev_end = end
    out.append(t.text[prev_end:])
    return "".join(out)


def build_vocab(
    corpus: Iterable[NormalizedText], min_count: int = 1, max_size: int = 30000
) -> Vocabulary:
    """Character-level vocabulary: specials, then word-initial characters, then
    "##" continuation characters, each group by descending frequency with a
    lexicographic tie-break. Deterministic for a fixed corpus.
    """
    if max_size < len(SPECIALS):
        raise ConfigError(f"max_size {max_size} cannot hold the {len(SPECIALS)} specials")
    initial: collections.Counter[str] = collections.Counter()
    cont: collections.Counter[str] = collections.Counter()
    empty = True
    for t in corpus:
        empty = False
        for unit in cjk_pretokenize(t):
            initial[unit.text[0]] += 1
            for ch in unit.text[1:]:
                cont[ch] += 1
    if empty:
        raise DataError("build_vocab: empty corpus")

    def ranked(counter: collections.Counter[str]) -> list[str]:
        kept = [(tok, n) for tok, n in counter.items() if n >= min_count]
        kept.sort(key=lambda kv: (-kv[1], kv[0]))
        return [tok for tok, _ in kept]

    tokens = list(SPECIALS)
    tokens += ranked(initial)
    tokens += ["##" + ch for ch in ranked(cont)]
    return Vocabulary(tokens[:max_size])
