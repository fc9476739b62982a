"""Annotated-corpus data model and ingestion.

Corpus files carry phrase/entity annotations as character offsets into the
normalized text; this module aligns them to token positions and enforces the
span invariants (sorted, non-overlapping, entities never split by a phrase
boundary).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from .errors import DataError
from .textnorm import NormalizedText, TokenizedText, Vocabulary, normalize, tokenize_sentence

Span = tuple[int, int]  # [start, end), token indices unless stated otherwise

DIALOGUE_PATTERNS = ("QR", "QRQ", "QRR", "QQR")


@dataclass(frozen=True)
class AnnotatedSentence:
    """Normalized text, its tokens, and phrase/entity token-index spans."""

    text: NormalizedText
    tokens: TokenizedText
    phrase_spans: tuple[Span, ...] = ()
    entity_spans: tuple[Span, ...] = ()

    def __post_init__(self):
        n = len(self.tokens)
        for kind, spans in (("phrase", self.phrase_spans), ("entity", self.entity_spans)):
            prev_end = 0
            for s, e in spans:
                if not (0 <= s < e <= n):
                    raise DataError(f"{kind} span [{s},{e}) out of bounds for {n} tokens")
                if s < prev_end:
                    raise DataError(f"{kind} spans overlap at [{s},{e})")
                prev_end = e


def make_annotated(
    text: NormalizedText,
    tokens: TokenizedText,
    phrase_spans: Iterable[Span] = (),
    entity_spans: Iterable[Span] = (),
) -> AnnotatedSentence:
    """Build an AnnotatedSentence, enforcing entity priority.

    Phrase spans with a boundary strictly inside an entity span are dropped,
    so an entity is never split by a phrase edge. Each list is sorted and
    overlap-merged first.
    """
    entities = _merge_sorted(entity_spans)
    phrases = []
    for p in _merge_sorted(phrase_spans):
        if not any(e[0] < p[0] < e[1] or e[0] < p[1] < e[1] for e in entities):
            phrases.append(p)
    return AnnotatedSentence(text, tokens, tuple(phrases), tuple(entities))


def _merge_sorted(spans: Iterable[Span]) -> list[Span]:
    merged: list[Span] = []
    for s, e in sorted(spans):
        if merged and s < merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], e))
        else:
            merged.append((s, e))
    return merged


def align_spans(char_spans: Iterable[Span], tokens: TokenizedText) -> list[Span]:
    """Map character ranges to the minimal covering token ranges.

    A token is covered when its char span overlaps the input range (boundary
    expansion). Ranges overlapping no token are dropped; the result is sorted
    and overlap-merged. Reversed ranges are an error.
    """
    out: list[Span] = []
    for cs, ce in char_spans:
        if cs >= ce:
            raise DataError(f"reversed span [{cs},{ce})")
        first = last = None
        for i, (ts, te) in enumerate(tokens.spans):
            if ts < ce and cs < te:  # char overlap
                if first is None:
                    first = i
                last = i
        if first is not None:
            out.append((first, last + 1))
    return _merge_sorted(out)


def annotate_sentence(
    raw: str,
    v: Vocabulary,
    phrases: Iterable[Span] = (),
    entities: Iterable[Span] = (),
    trad_map: dict[str, str] | None = None,
) -> AnnotatedSentence:
    """Normalize, tokenize, and align char-offset annotations in one step."""
    text = normalize(raw, trad_map)
    tokens = tokenize_sentence(text, v)
    return make_annotated(
        text,
        tokens,
        align_spans(phrases, tokens),
        align_spans(entities, tokens),
    )


@dataclass(frozen=True)
class DialogueThread:
    """2-3 turns of (role, sentence); pattern is the concatenated role letters."""

    turns: tuple[tuple[str, AnnotatedSentence], ...]

    def __post_init__(self):
        pat = self.pattern
        if pat not in DIALOGUE_PATTERNS:
            raise DataError(f"dialogue pattern {pat!r} not in {DIALOGUE_PATTERNS}")

    @property
    def pattern(self) -> str:
        return "".join(role for role, _ in self.turns)


def pattern_of(thread: DialogueThread) -> str:
    """The thread's role pattern; DialogueThread construction already validates it."""
    return thread.pattern


# --- dictionary-based annotation (desk-scale stand-in for external taggers) ---


def dictionary_annotate(
    sentence_text: NormalizedText,
    tokens: TokenizedText,
    lexicon: Iterable[tuple[str, str]],
) -> tuple[list[Span], list[Span]]:
    """Greedy leftmost-longest lexicon matching; returns (phrase, entity) token spans.

    All candidate matches across both kinds compete in one pool: earlier start
    wins, then longer match, then entity over phrase. Selected character
    matches are converted to token ranges via align_spans.
    """
    text = sentence_text.text
    candidates: list[tuple[int, int, int, Span]] = []  # sort key + char span
    for surface, kind in lexicon:
        if kind not in ("phrase", "entity"):
            raise DataError(f"lexicon kind {kind!r} must be 'phrase' or 'entity'")
        if not surface:
            continue
        start = text.find(surface)
        while start >= 0:
            rank = 0 if kind == "entity" else 1
            candidates.append((start, -len(surface), rank, (start, start + len(surface))))
            start = text.find(surface, start + 1)
    candidates.sort()
    taken: list[Span] = []
    phrase_chars: list[Span] = []
    entity_chars: list[Span] = []
    for start, neglen, rank, span in candidates:
        if any(span[0] < e and s < span[1] for s, e in taken):
            continue
        taken.append(span)
        (entity_chars if rank == 0 else phrase_chars).append(span)
    return (
        align_spans(sorted(phrase_chars), tokens),
        align_spans(sorted(entity_chars), tokens),
    )


def load_lexicon(path) -> list[tuple[str, str]]:
    """TSV lexicon: surface<TAB>phrase|entity, one entry per line."""
    entries = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path} line {lineno}: expected surface<TAB>kind")
            surface, kind = parts
            if kind not in ("phrase", "entity"):
                raise DataError(f"{path} line {lineno}: bad kind {kind!r}")
            entries.append((surface, kind))
    return entries


# --- JSONL corpus readers ---


def _parse_char_spans(value, what: str, lineno: int) -> list[Span]:
    spans = []
    if not isinstance(value, list):
        raise DataError(f"line {lineno}: {what} must be a list of [start, end] pairs")
    for item in value:
        if not (isinstance(item, list) and len(item) == 2 and all(isinstance(x, int) for x in item)):
            raise DataError(f"line {lineno}: bad {what} span {item!r}")
        s, e = item
        if s >= e:
            raise DataError(f"reversed span at line {lineno}: [{s},{e}) in {what}")
        spans.append((s, e))
    return spans


def read_corpus(
    path, v: Vocabulary, trad_map: dict[str, str] | None = None
) -> Iterator[AnnotatedSentence]:
    """Stream AnnotatedSentence records from a JSONL file.

    Each line: {"text": str, "phrases": [[c0,c1],...], "entities": [[c0,c1],...]}
    with char offsets into the normalized text. Errors carry the line number.
    """
    with open(path, "rb") as f:
        for lineno, raw_line in enumerate(f, start=1):
            line = raw_line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except (UnicodeDecodeError, json.JSONDecodeError) as e:
                raise DataError(f"{path} line {lineno}: invalid JSON ({e})") from e
            if not isinstance(rec, dict) or "text" not in rec:
                raise DataError(f"{path} line {lineno}: record must have a 'text' field")
            if not isinstance(rec["text"], str):
                raise DataError(f"{path} line {lineno}: 'text' must be a string")
            phrases = _parse_char_spans(rec.get("phrases", []), "phrases", lineno)
            entities = _parse_char_spans(rec.get("entities", []), "entities", lineno)
            try:
                yield annotate_sentence(rec["text"], v, phrases, entities, trad_map)
            except DataError as e:
                raise DataError(f"{path} line {lineno}: {e}") from e


def read_dialogues(
    path, v: Vocabulary, trad_map: dict[str, str] | None = None
) -> Iterator[DialogueThread]:
    """Stream DialogueThread records from a JSONL file.

    Each line: {"turns": [{"role": "Q"|"R", "text": str}, ...]}. Threads longer
    than 3 turns are windowed into consecutive 3-turn slices; windows whose
    role pattern is not admissible are skipped.
    """
    with open(path, "rb") as f:
        for lineno, raw_line in enumerate(f, start=1):
            line = raw_line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except (UnicodeDecodeError, json.JSONDecodeError) as e:
                raise DataError(f"{path} line {lineno}: invalid JSON ({e})") from e
            turns_raw = rec.get("turns") if isinstance(rec, dict) else None
            if not isinstance(turns_raw, list) or len(turns_raw) < 2:
                raise DataError(f"{path} line {lineno}: need a 'turns' list with >= 2 turns")
            turns = []
            for t in turns_raw:
                if not (isinstance(t, dict) and isinstance(t.get("text"), str)):
                    raise DataError(f"{path} line {lineno}: each turn needs a 'text' string")
                role = t.get("role")
                if role not in ("Q", "R"):
                    raise DataError(f"{path} line {lineno}: bad role {role!r} (want Q or R)")
                turns.append((role, annotate_sentence(t["text"], v, trad_map=trad_map)))
            if len(turns) <= 3:
                try:
                    yield DialogueThread(tuple(turns))
                except DataError as e:
                    raise DataError(f"{path} line {lineno}: {e}") from e
            else:
                for i in range(len(turns) - 2):
                    window = tuple(turns[i : i + 3])
                    if "".join(r for r, _ in window) in DIALOGUE_PATTERNS:
                        yield DialogueThread(window)
