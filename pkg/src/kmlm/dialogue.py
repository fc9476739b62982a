"""Dialogue LM example construction: multi-turn layout, role embeddings,
masked-token targets, and real/fake negative sampling.

A DlmExample feeds the same encoder as a MaskedExample; only the type-embedding
rows differ. The shared 4-row type table is laid out as
{0: segment A, 1: segment B, 2: role Q, 3: role R}.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .annotate import AnnotatedSentence, DialogueThread
from .errors import ConfigError, DataError
from .masking import (
    MaskingConfig,
    Replacement,
    apply_replacements,
    mask_budget,
    truncate_sentence,
)
from .textnorm import CLS_ID, PAD_ID, SEP_ID, Vocabulary

ROLE_Q, ROLE_R = 0, 1
# Rows of the shared type-embedding table used for roles.
TYPE_ROW_Q, TYPE_ROW_R = 2, 3


@dataclass(frozen=True)
class DlmExample:
    """A MaskedExample-shaped instance plus role ids and the real/fake label."""

    input_ids: tuple[int, ...]
    type_ids: tuple[int, ...]
    position_ids: tuple[int, ...]
    mask_positions: tuple[int, ...]
    labels: tuple[int, ...]
    max_len: int
    role_ids: tuple[int, ...]  # ROLE_Q / ROLE_R per position (PAD keeps last role)
    is_real: bool
    replaced_turn: int | None  # provenance: which turn was substituted, if any


class SentencePool:
    """Uniform sampler over a fixed list of sentences, for fake substitution."""

    def __init__(self, sentences: Sequence[AnnotatedSentence]):
        if not sentences:
            raise DataError("sentence pool is empty")
        self.sentences = list(sentences)

    def sample_different(
        self, other: AnnotatedSentence, rng: np.random.Generator
    ) -> AnnotatedSentence:
        """Draw a sentence whose token ids differ from `other`.

        Raises DataError when the pool has no such sentence.
        """
        if all(s.tokens.ids == other.tokens.ids for s in self.sentences):
            raise DataError("pool exhausted: every pool sentence equals the replaced turn")
        while True:
            cand = self.sentences[int(rng.integers(len(self.sentences)))]
            if cand.tokens.ids != other.tokens.ids:
                return cand


@dataclass(frozen=True)
class DlmConfig:
    fake_prob: float = 0.5
    masking: MaskingConfig = MaskingConfig()

    def validate(self) -> None:
        if not 0.0 <= self.fake_prob <= 1.0:
            raise ConfigError(f"fake_prob {self.fake_prob} must be in [0,1]")
        self.masking.validate()


def _fit_turns(lengths: list[int], available: int) -> list[int]:
    # Trim the longest turn's tail first; ties trim the later turn.
    lengths = list(lengths)
    while sum(lengths) > available:
        longest = max(range(len(lengths)), key=lambda i: (lengths[i], i))
        lengths[longest] -= 1
    return lengths


def build_dlm_example(
    thread: DialogueThread,
    pool: SentencePool,
    cfg: DlmConfig,
    rng: np.random.Generator,
    v: Vocabulary,
) -> DlmExample:
    """Lay out [CLS] turn1 [SEP] turn2 [SEP] (turn3 [SEP]) with role type rows.

    With probability fake_prob one turn, chosen uniformly, is substituted by a
    pool sentence and the example is labeled fake. Masking uses the basic-stage
    planner jointly over all turns, so prediction is conditioned on query and
    response together; masked positions in a substituted turn are labeled
    against the substituted text.
    """
    cfg.validate()
    if not thread.turns:
        raise DataError("empty dialogue thread")
    turns = [(role, sent) for role, sent in thread.turns]

    replaced_turn: int | None = None
    if cfg.fake_prob > 0 and rng.random() < cfg.fake_prob:
        replaced_turn = int(rng.integers(len(turns)))
        role, original = turns[replaced_turn]
        turns[replaced_turn] = (role, pool.sample_different(original, rng))

    mcfg = cfg.masking
    n_special = 1 + len(turns)  # CLS plus one SEP per turn
    available = mcfg.max_len - n_special
    lengths = _fit_turns([len(s.tokens) for _, s in turns], available)
    turns = [(role, truncate_sentence(s, keep)) for (role, s), keep in zip(turns, lengths)]

    first_role = ROLE_Q if turns[0][0] == "Q" else ROLE_R
    input_ids: list[int] = [CLS_ID]
    role_ids: list[int] = [first_role]
    sentence_positions: list[int] = []  # layout index of every maskable token
    for role, sent in turns:
        rid = ROLE_Q if role == "Q" else ROLE_R
        offset = len(input_ids)
        input_ids.extend(sent.tokens.ids)
        input_ids.append(SEP_ID)
        role_ids.extend([rid] * (len(sent.tokens) + 1))
        sentence_positions.extend(range(offset, offset + len(sent.tokens)))

    budget = mask_budget(len(sentence_positions), mcfg.mask_ratio)
    if budget:
        picks = rng.choice(len(sentence_positions), size=budget, replace=False)
        mask_positions = sorted(sentence_positions[int(i)] for i in picks)
    else:
        mask_positions = []
    labels = [input_ids[p] for p in mask_positions]
    replacements = apply_replacements(mask_positions, labels, rng, v, mcfg.replace_probs)
    for pos, rep in zip(mask_positions, replacements):
        input_ids[pos] = rep.token_id

    pad = mcfg.max_len - len(input_ids)
    type_ids = [TYPE_ROW_Q if r == ROLE_Q else TYPE_ROW_R for r in role_ids] + [0] * pad
    role_ids.extend([role_ids[-1]] * pad)
    input_ids.extend([PAD_ID] * pad)
    return DlmExample(
        input_ids=tuple(input_ids),
        type_ids=tuple(type_ids),
        position_ids=tuple(range(mcfg.max_len)),
        mask_positions=tuple(mask_positions),
        labels=tuple(labels),
        max_len=mcfg.max_len,
        role_ids=tuple(role_ids),
        is_real=replaced_turn is None,
        replaced_turn=replaced_turn,
    )
