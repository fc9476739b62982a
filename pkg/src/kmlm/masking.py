"""Multi-stage masking planner: basic, phrase, and entity stages.

The basic stage masks single tokens chosen uniformly; the span stages mask
whole phrase/entity spans so that collocations inside a span cannot shortcut
prediction. All selection is driven by a caller-supplied Generator, so one
(sentence, stage, seed) triple always yields the same example.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .annotate import AnnotatedSentence, Span
from .errors import ConfigError
from .textnorm import CLS_ID, MASK_ID, PAD_ID, SEP_ID, TokenizedText, Vocabulary

STAGES = ("basic", "phrase", "entity")

# Replacement actions at a masked position.
REPLACE_MASK = "mask"
REPLACE_RANDOM = "random"
REPLACE_KEEP = "keep"

N_SPECIALS = 5


@dataclass(frozen=True)
class MaskingConfig:
    mask_ratio: float = 0.15
    replace_probs: tuple[float, float, float] = (0.8, 0.1, 0.1)  # mask, random, keep
    max_len: int = 128

    def validate(self) -> None:
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio {self.mask_ratio} must be in (0,1)")
        if abs(sum(self.replace_probs) - 1.0) > 1e-9:
            raise ConfigError(f"replace_probs {self.replace_probs} must sum to 1")
        if any(p < 0 for p in self.replace_probs):
            raise ConfigError(f"replace_probs {self.replace_probs} must be nonnegative")
        if self.max_len < 4:
            raise ConfigError(f"max_len {self.max_len} must be >= 4")


@dataclass(frozen=True)
class Replacement:
    """What goes into the input at one masked position."""

    action: str  # REPLACE_MASK | REPLACE_RANDOM | REPLACE_KEEP
    token_id: int  # id actually placed in the input


@dataclass(frozen=True)
class MaskingPlan:
    stage: str
    mask_positions: tuple[int, ...]  # strictly increasing sentence-token indices
    replacements: tuple[Replacement, ...]
    labels: tuple[int, ...]  # original token id per masked position


@dataclass(frozen=True)
class MaskedExample:
    """One padded training instance: the three embedding index rows plus targets."""

    input_ids: tuple[int, ...]
    type_ids: tuple[int, ...]
    position_ids: tuple[int, ...]
    mask_positions: tuple[int, ...]  # indices into the padded layout
    labels: tuple[int, ...]
    max_len: int


def mask_budget(n_maskable: int, ratio: float) -> int:
    """max(1, round-half-up(ratio * n)) when anything is maskable, else 0."""
    if n_maskable <= 0:
        return 0
    return max(1, int(n_maskable * ratio + 0.5))


def select_spans(
    s: AnnotatedSentence, stage: str, mask_ratio: float, rng: np.random.Generator
) -> list[Span]:
    """Choose the token ranges to mask for one sentence at one stage.

    basic: single-token ranges, uniform without replacement up to the budget.
    phrase/entity: candidate spans in shuffled order, accepted while they fit
    the token budget; the first candidate is always accepted. Sentences with
    no candidate spans fall back to basic selection.
    """
    if stage not in STAGES:
        raise ConfigError(f"unknown masking stage {stage!r}")
    n = len(s.tokens)
    budget = mask_budget(n, mask_ratio)
    if budget == 0:
        return []
    if stage == "basic":
        picks = rng.choice(n, size=min(budget, n), replace=False)
        return [(int(i), int(i) + 1) for i in sorted(picks)]

    candidates = list(s.phrase_spans if stage == "phrase" else s.entity_spans)
    if not candidates:
        return select_spans(s, "basic", mask_ratio, rng)
    order = rng.permutation(len(candidates))
    chosen: list[Span] = []
    total = 0
    for idx in order:
        span = candidates[int(idx)]
        size = span[1] - span[0]
        if not chosen or total + size <= budget:
            chosen.append(span)
            total += size
    chosen.sort()
    return chosen


def apply_replacements(
    positions: list[int],
    labels: list[int],
    rng: np.random.Generator,
    v: Vocabulary,
    probs: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> list[Replacement]:
    """Independently per position: MASK / random non-special token / keep."""
    if abs(sum(probs) - 1.0) > 1e-9:
        raise ConfigError(f"replacement probs {probs} must sum to 1")
    if v.size <= N_SPECIALS:
        raise ConfigError("vocabulary has no non-special tokens to sample from")
    out: list[Replacement] = []
    for pos, original in zip(positions, labels):
        u = rng.random()
        if u < probs[0]:
            out.append(Replacement(REPLACE_MASK, MASK_ID))
        elif u < probs[0] + probs[1]:
            rand_id = int(rng.integers(N_SPECIALS, v.size))
            out.append(Replacement(REPLACE_RANDOM, rand_id))
        else:
            out.append(Replacement(REPLACE_KEEP, original))
    return out


def plan_masking(
    s: AnnotatedSentence,
    stage: str,
    cfg: MaskingConfig,
    rng: np.random.Generator,
    v: Vocabulary,
) -> MaskingPlan:
    """Select spans and the per-position replacement for one sentence."""
    spans = select_spans(s, stage, cfg.mask_ratio, rng)
    positions = [i for start, end in spans for i in range(start, end)]
    labels = [s.tokens.ids[i] for i in positions]
    replacements = apply_replacements(positions, labels, rng, v, cfg.replace_probs)
    return MaskingPlan(stage, tuple(positions), tuple(replacements), tuple(labels))


def truncate_sentence(s: AnnotatedSentence, keep: int) -> AnnotatedSentence:
    """Drop tokens past `keep` and any span that no longer fits entirely."""
    if keep >= len(s.tokens):
        return s
    tokens = TokenizedText(s.tokens.ids[:keep], s.tokens.spans[:keep])
    return AnnotatedSentence(
        s.text,
        tokens,
        tuple(sp for sp in s.phrase_spans if sp[1] <= keep),
        tuple(sp for sp in s.entity_spans if sp[1] <= keep),
    )


def _fit_pair(len_a: int, len_b: int, available: int) -> tuple[int, int]:
    # Trim from the longer segment's tail first; ties trim the second segment.
    while len_a + len_b > available:
        if len_a > len_b:
            len_a -= 1
        else:
            len_b -= 1
    return len_a, len_b


def build_mlm_example(
    a: AnnotatedSentence,
    b: AnnotatedSentence | None,
    stage: str,
    cfg: MaskingConfig,
    rng: np.random.Generator,
    v: Vocabulary,
) -> MaskedExample:
    """Lay out [CLS] A [SEP] (B [SEP]) padded to max_len, mask, and replace.

    Masking is planned per segment on the truncated sentences, then merged
    into layout positions (offset past CLS and the first SEP).
    """
    cfg.validate()
    n_special = 3 if b is not None else 2
    available = cfg.max_len - n_special
    if b is None:
        a = truncate_sentence(a, available)
        segments = [(a, 0)]
    else:
        keep_a, keep_b = _fit_pair(len(a.tokens), len(b.tokens), available)
        a, b = truncate_sentence(a, keep_a), truncate_sentence(b, keep_b)
        segments = [(a, 0), (b, 1)]

    input_ids: list[int] = [CLS_ID]
    type_ids: list[int] = [0]
    mask_positions: list[int] = []
    labels: list[int] = []
    replacements: list[Replacement] = []
    for seg, seg_type in segments:
        offset = len(input_ids)
        plan = plan_masking(seg, stage, cfg, rng, v)
        input_ids.extend(seg.tokens.ids)
        type_ids.extend([seg_type] * len(seg.tokens))
        input_ids.append(SEP_ID)
        type_ids.append(seg_type)
        mask_positions.extend(offset + p for p in plan.mask_positions)
        labels.extend(plan.labels)
        replacements.extend(plan.replacements)

    for pos, rep in zip(mask_positions, replacements):
        input_ids[pos] = rep.token_id

    pad = cfg.max_len - len(input_ids)
    input_ids.extend([PAD_ID] * pad)
    type_ids.extend([0] * pad)
    return MaskedExample(
        input_ids=tuple(input_ids),
        type_ids=tuple(type_ids),
        position_ids=tuple(range(cfg.max_len)),
        mask_positions=tuple(mask_positions),
        labels=tuple(labels),
        max_len=cfg.max_len,
    )
