"""Cloze entity-ranking harness and the generic fine-tuning harness with
accuracy / span-F1 / MRR metrics.

Evaluation is read-only over a frozen model; fine-tuning clones nothing and
trains all parameters plus a fresh task head.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import seeding
from .annotate import AnnotatedSentence, Span, align_spans, annotate_sentence
from .encoder import Encoder, make_head
from .errors import ConfigError, DataError
from .masking import truncate_sentence
from .tensor import Adam, Tensor, add, cross_entropy, reshape
from .textnorm import CLS_ID, MASK_ID, PAD_ID, SEP_ID, Vocabulary, normalize, tokenize_sentence

IGNORE_INDEX = -100

KINDS = ("sequence_classification", "token_tagging", "pairwise_ranking")
METRICS = {"sequence_classification": "accuracy", "token_tagging": "span_f1", "pairwise_ranking": "mrr_f1"}


# --- cloze ---


@dataclass(frozen=True)
class ClozeItem:
    sentence: AnnotatedSentence
    span: Span  # token range holding the entity to remove
    candidates: tuple[str, ...]
    gold: int

    def __post_init__(self):
        n = len(self.sentence.tokens)
        s, e = self.span
        if not (0 <= s < e <= n):
            raise DataError(f"cloze span [{s},{e}) out of bounds for {n} tokens")
        if not self.candidates:
            raise DataError("cloze item has no candidates")
        if len(set(self.candidates)) != len(self.candidates):
            raise DataError("cloze candidates must be distinct")
        if not 0 <= self.gold < len(self.candidates):
            raise DataError(f"cloze gold {self.gold} out of range")


def load_cloze_items(path, v: Vocabulary, trad_map=None) -> list[ClozeItem]:
    """JSONL: {"text": str, "span": [c0,c1], "candidates": [str,...], "gold": int}."""
    items = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path} line {lineno}: invalid JSON ({e})") from e
            try:
                sent = annotate_sentence(rec["text"], v, trad_map=trad_map)
                token_spans = align_spans([tuple(rec["span"])], sent.tokens)
                if not token_spans:
                    raise DataError(f"span {rec['span']} covers no tokens")
                items.append(
                    ClozeItem(sent, token_spans[0], tuple(rec["candidates"]), int(rec["gold"]))
                )
            except (KeyError, TypeError, DataError) as e:
                raise DataError(f"{path} line {lineno}: {e}") from e
    return items


def _candidate_ids(cand: str, v: Vocabulary, trad_map=None) -> tuple[int, ...]:
    ids = tokenize_sentence(normalize(cand, trad_map), v).ids
    if not ids:
        raise DataError(f"candidate {cand!r} tokenizes to zero pieces")
    return ids


def cloze_score(
    model: Encoder, v: Vocabulary, item: ClozeItem, trad_map=None
) -> list[tuple[str, float]]:
    """Rank candidates by mean log-probability of their tokens in the masked slot.

    Every candidate's tokens are masked simultaneously and scored in one
    forward pass; ties break lexicographically. Candidates that cannot fit in
    max_len score -inf (with a warning).
    """
    max_len = model.cfg.max_len
    ids = item.sentence.tokens.ids
    before, after = list(ids[: item.span[0]]), list(ids[item.span[1] :])

    rows, metas = [], []  # metas: (candidate, positions, cand_ids) or None when oversize
    for cand in item.candidates:
        cand_ids = _candidate_ids(cand, v, trad_map)
        total = 2 + len(before) + len(cand_ids) + len(after)
        if total > max_len:
            warnings.warn(f"cloze candidate {cand!r} needs {total} > max_len {max_len}; scored -inf")
            metas.append((cand, None, None))
            continue
        input_ids = [CLS_ID] + before + [MASK_ID] * len(cand_ids) + after + [SEP_ID]
        positions = list(range(1 + len(before), 1 + len(before) + len(cand_ids)))
        input_ids += [PAD_ID] * (max_len - len(input_ids))
        rows.append(input_ids)
        metas.append((cand, positions, cand_ids))

    scores: dict[str, float] = {}
    if rows:
        input_ids = np.array(rows, dtype=np.int64)
        type_ids = np.zeros_like(input_ids)
        h = model.forward(input_ids, type_ids, train=False)
        logits = model.mlm_logits(h).data
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        row = 0
        for cand, positions, cand_ids in metas:
            if positions is None:
                continue
            picked = [logp[row, pos, tok] for pos, tok in zip(positions, cand_ids)]
            scores[cand] = float(np.mean(picked))
            row += 1
    for cand, positions, _ in metas:
        if positions is None:
            scores[cand] = -math.inf

    ranked = sorted(item.candidates, key=lambda c: (-scores[c], c))
    return [(c, scores[c]) for c in ranked]


def cloze_report(model: Encoder, v: Vocabulary, items: Sequence[ClozeItem], trad_map=None) -> dict:
    """Accuracy (gold ranked first) and mean gold NLL over a set of items."""
    hits, nlls = 0, []
    for item in items:
        ranked = cloze_score(model, v, item, trad_map)
        gold = item.candidates[item.gold]
        if ranked[0][0] == gold:
            hits += 1
        score = dict(ranked)[gold]
        nlls.append(-score)
    return {
        "n": len(items),
        "accuracy": hits / len(items) if items else 0.0,
        "gold_nll": float(np.mean(nlls)) if nlls else float("nan"),
    }


# --- metrics ---


def decode_bio(tags: Sequence[str]) -> list[tuple[int, int, str]]:
    """BIO tags -> (start, end, type) spans. Caller guarantees validity."""
    spans = []
    start, typ = None, None
    for i, tag in enumerate(tags):
        if tag.startswith("B-"):
            if start is not None:
                spans.append((start, i, typ))
            start, typ = i, tag[2:]
        elif tag.startswith("I-"):
            pass
        else:  # "O"
            if start is not None:
                spans.append((start, i, typ))
                start, typ = None, None
    if start is not None:
        spans.append((start, len(tags), typ))
    return spans


def check_bio(tags: Sequence[str], what: str = "gold") -> None:
    prev = "O"
    for i, tag in enumerate(tags):
        if tag == "O" or tag.startswith("B-"):
            pass
        elif tag.startswith("I-"):
            if prev == "O" or prev[2:] != tag[2:]:
                raise DataError(f"invalid BIO transition {prev} -> {tag} at position {i} in {what}")
        else:
            raise DataError(f"invalid BIO tag {tag!r} at position {i} in {what}")
        prev = tag


def repair_bio(tags: Sequence[str]) -> tuple[list[str], int]:
    """Turn stray I- tags into B-; returns the repaired tags and repair count."""
    out, repaired = [], 0
    prev = "O"
    for tag in tags:
        if tag.startswith("I-") and (prev == "O" or (prev != "O" and prev[2:] != tag[2:])):
            tag = "B-" + tag[2:]
            repaired += 1
        out.append(tag)
        prev = tag
    return out, repaired


def span_f1(pred_tags: Sequence[str], gold_tags: Sequence[str]) -> float:
    """Exact-match entity-span F1 over decoded BIO spans of one sequence."""
    if len(pred_tags) != len(gold_tags):
        raise DataError(f"span_f1: length mismatch {len(pred_tags)} vs {len(gold_tags)}")
    check_bio(gold_tags)
    pred_fixed, _ = repair_bio(pred_tags)
    pred = set(decode_bio(pred_fixed))
    gold = set(decode_bio(gold_tags))
    if not pred and not gold:
        return 0.0
    tp = len(pred & gold)
    precision = tp / len(pred) if pred else 0.0
    recall = tp / len(gold) if gold else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def span_f1_micro(pairs: Sequence[tuple[Sequence[str], Sequence[str]]]) -> tuple[float, bool]:
    """Micro-averaged span F1 over (pred, gold) sequences.

    Returns (f1, degenerate) where degenerate marks an all-O gold set, for
    which F1 is undefined and reported as 0.
    """
    tp = n_pred = n_gold = 0
    for i, (pred_tags, gold_tags) in enumerate(pairs):
        if len(pred_tags) != len(gold_tags):
            raise DataError(f"span_f1: length mismatch in pair {i}")
        check_bio(gold_tags, what=f"gold pair {i}")
        pred_fixed, _ = repair_bio(pred_tags)
        pred = set(decode_bio(pred_fixed))
        gold = set(decode_bio(gold_tags))
        tp += len(pred & gold)
        n_pred += len(pred)
        n_gold += len(gold)
    if n_gold == 0:
        return 0.0, True
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold
    if precision + recall == 0:
        return 0.0, False
    return 2 * precision * recall / (precision + recall), False


def mrr(ranked_relevance: Sequence[Sequence[bool]]) -> float:
    """Mean over queries of 1/rank of the first relevant candidate (0 if none)."""
    if not ranked_relevance:
        raise DataError("mrr: no queries")
    total = 0.0
    for ranking in ranked_relevance:
        for rank, rel in enumerate(ranking, start=1):
            if rel:
                total += 1.0 / rank
                break
    return total / len(ranked_relevance)


# --- fine-tuning harness ---


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    n_classes: int = 2  # sequence_classification only
    tag_types: tuple[str, ...] = ()  # token_tagging only
    metric: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"task kind {self.kind!r} not in {KINDS}")
        expected = METRICS[self.kind]
        metric = self.metric or expected
        object.__setattr__(self, "metric", metric)
        if metric != expected:
            raise ConfigError(f"metric {metric!r} incompatible with kind {self.kind!r}")
        if self.kind == "sequence_classification" and self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.kind == "token_tagging" and not self.tag_types:
            raise ConfigError("token_tagging needs tag_types")

    @property
    def tags(self) -> list[str]:
        out = ["O"]
        for t in self.tag_types:
            out += [f"B-{t}", f"I-{t}"]
        return out


@dataclass(frozen=True)
class ClsRecord:
    a: AnnotatedSentence
    b: AnnotatedSentence | None
    label: int


@dataclass(frozen=True)
class TagRecord:
    sentence: AnnotatedSentence
    tags: tuple[str, ...]  # one per token


@dataclass(frozen=True)
class RankRecord:
    query: AnnotatedSentence
    candidates: tuple[AnnotatedSentence, ...]
    gold: int


def load_task_data(path, spec: TaskSpec, v: Vocabulary, trad_map=None) -> list:
    """JSONL per kind:
    cls:  {"text_a": str, "text_b": str|null, "label": int}
    tag:  {"text": str, "spans": [[c0, c1, type], ...]}
    rank: {"query": str, "candidates": [str,...], "gold": int}
    """
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path} record {lineno}: invalid JSON ({e})") from e
            try:
                records.append(_parse_record(rec, spec, v, trad_map))
            except (KeyError, TypeError, ValueError, DataError) as e:
                raise DataError(f"{path} record {lineno}: {e}") from e
    return records


def _parse_record(rec: dict, spec: TaskSpec, v: Vocabulary, trad_map):
    if spec.kind == "sequence_classification":
        label = int(rec["label"])
        if not 0 <= label < spec.n_classes:
            raise DataError(f"label {label} outside declared set 0..{spec.n_classes - 1}")
        a = annotate_sentence(rec["text_a"], v, trad_map=trad_map)
        b_text = rec.get("text_b")
        b = annotate_sentence(b_text, v, trad_map=trad_map) if b_text else None
        return ClsRecord(a, b, label)
    if spec.kind == "token_tagging":
        sent = annotate_sentence(rec["text"], v, trad_map=trad_map)
        tags = ["O"] * len(sent.tokens)
        for c0, c1, typ in rec.get("spans", []):
            if typ not in spec.tag_types:
                raise DataError(f"span type {typ!r} outside declared set {spec.tag_types}")
            for s, e in align_spans([(c0, c1)], sent.tokens):
                tags[s] = f"B-{typ}"
                for i in range(s + 1, e):
                    tags[i] = f"I-{typ}"
        return TagRecord(sent, tuple(tags))
    gold = int(rec["gold"])
    cands = [annotate_sentence(c, v, trad_map=trad_map) for c in rec["candidates"]]
    if not cands:
        raise DataError("ranking record has no candidates")
    if not 0 <= gold < len(cands):
        raise DataError(f"gold {gold} outside candidate list of {len(cands)}")
    return RankRecord(annotate_sentence(rec["query"], v, trad_map=trad_map), tuple(cands), gold)


def _layout(a: AnnotatedSentence, b: AnnotatedSentence | None, max_len: int):
    """[CLS] A [SEP] (B [SEP]) without masking; returns (input_ids, type_ids)."""
    if b is None:
        a = truncate_sentence(a, max_len - 2)
        ids = [CLS_ID] + list(a.tokens.ids) + [SEP_ID]
        types = [0] * len(ids)
    else:
        len_a, len_b = len(a.tokens), len(b.tokens)
        while len_a + len_b > max_len - 3:
            if len_a > len_b:
                len_a -= 1
            else:
                len_b -= 1
        a, b = truncate_sentence(a, len_a), truncate_sentence(b, len_b)
        ids = [CLS_ID] + list(a.tokens.ids) + [SEP_ID] + list(b.tokens.ids) + [SEP_ID]
        types = [0] * (len_a + 2) + [1] * (len_b + 1)
    pad = max_len - len(ids)
    return ids + [PAD_ID] * pad, types + [0] * pad


@dataclass
class FinetuneReport:
    task: str
    metric: str
    per_epoch: list[dict]
    best: dict
    flags: dict = field(default_factory=dict)


def finetune(
    model: Encoder,
    spec: TaskSpec,
    train_records: list,
    dev_records: list,
    epochs: int = 5,
    lr: float = 1e-3,
    batch_size: int = 8,
    seed: int = 0,
) -> FinetuneReport:
    """Attach the matching head and train end-to-end; report the dev metric per
    epoch and the best epoch."""
    if not train_records or not dev_records:
        raise DataError("finetune needs non-empty train and dev data")
    n_out = {"sequence_classification": spec.n_classes, "token_tagging": len(spec.tags), "pairwise_ranking": 2}[spec.kind]
    head = make_head(model.cfg, n_out, seeding.substream(seed, "head"))
    params = dict(model.params)
    params["head.w"], params["head.b"] = head["w"], head["b"]
    optimizer = Adam(params, lr=lr)

    pairs = _as_pairs(train_records, spec, model.cfg.max_len)
    per_epoch = []
    flags: dict = {}
    for epoch in range(epochs):
        order = seeding.substream(seed, "finetune", epoch).permutation(len(pairs))
        for start in range(0, len(order), batch_size):
            chunk = [pairs[int(i)] for i in order[start : start + batch_size]]
            _finetune_step(chunk, model, head, spec, optimizer)
        result = evaluate_task(model, head, spec, dev_records)
        flags.update(result.pop("flags", {}))
        per_epoch.append({"epoch": epoch, **result})
    key = {"accuracy": "accuracy", "span_f1": "span_f1", "mrr_f1": "mrr"}[spec.metric]
    best = max(per_epoch, key=lambda r: r[key])
    return FinetuneReport(spec.kind, spec.metric, per_epoch, best, flags)


def _as_pairs(records: list, spec: TaskSpec, max_len: int) -> list[tuple]:
    """Flatten records to (input_ids, type_ids, target) training units."""
    pairs = []
    for rec in records:
        if spec.kind == "sequence_classification":
            ids, types = _layout(rec.a, rec.b, max_len)
            pairs.append((ids, types, rec.label))
        elif spec.kind == "token_tagging":
            ids, types = _layout(rec.sentence, None, max_len)
            tag_ids = [IGNORE_INDEX] * max_len
            index = spec.tags
            n = min(len(rec.tags), max_len - 2)
            for i in range(n):
                tag_ids[1 + i] = index.index(rec.tags[i])
            pairs.append((ids, types, tag_ids))
        else:
            for j, cand in enumerate(rec.candidates):
                ids, types = _layout(rec.query, cand, max_len)
                pairs.append((ids, types, 1 if j == rec.gold else 0))
    return pairs


def _finetune_step(chunk, model: Encoder, head, spec: TaskSpec, optimizer: Adam) -> None:
    input_ids = np.array([c[0] for c in chunk], dtype=np.int64)
    type_ids = np.array([c[1] for c in chunk], dtype=np.int64)
    h = model.forward(input_ids, type_ids, train=False)
    if spec.kind == "token_tagging":
        logits = model.tag_logits(h, head)
        b, length, n = logits.shape
        targets = np.array([c[2] for c in chunk], dtype=np.int64).reshape(-1)
        loss = cross_entropy(reshape(logits, (b * length, n)), targets, IGNORE_INDEX)
    else:
        logits = model.cls_logits(h, head)
        targets = np.array([c[2] for c in chunk], dtype=np.int64)
        loss = cross_entropy(logits, targets)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()


def evaluate_task(model: Encoder, head, spec: TaskSpec, records: list) -> dict:
    """Dev-set metric for one task; pure inference."""
    max_len = model.cfg.max_len
    if spec.kind == "sequence_classification":
        ids, types, labels = [], [], []
        for rec in records:
            i, t = _layout(rec.a, rec.b, max_len)
            ids.append(i)
            types.append(t)
            labels.append(rec.label)
        pred = _predict_cls(model, head, ids, types)
        acc = float(np.mean(pred == np.array(labels)))
        return {"accuracy": acc, "flags": {}}
    if spec.kind == "token_tagging":
        pairs = []
        for rec in records:
            i, t = _layout(rec.sentence, None, max_len)
            h = model.forward(np.array([i]), np.array([t]), train=False)
            logits = model.tag_logits(h, head).data[0]
            n = min(len(rec.tags), max_len - 2)
            pred_tags = [spec.tags[int(np.argmax(logits[1 + k]))] for k in range(n)]
            pairs.append((pred_tags, list(rec.tags[:n])))
        f1, degenerate = span_f1_micro(pairs)
        return {"span_f1": f1, "flags": {"span_f1_undefined": degenerate} if degenerate else {}}
    # pairwise ranking: per-query MRR plus positive-class F1 over all pairs
    rankings = []
    tp = fp = fn = 0
    for rec in records:
        ids, types = zip(*[_layout(rec.query, c, max_len) for c in rec.candidates])
        h = model.forward(np.array(ids, dtype=np.int64), np.array(types, dtype=np.int64), train=False)
        logits = model.cls_logits(h, head).data
        score = logits[:, 1] - logits[:, 0]
        order = sorted(range(len(score)), key=lambda j: (-score[j], j))
        rankings.append([j == rec.gold for j in order])
        for j in range(len(score)):
            pred_pos = score[j] > 0
            gold_pos = j == rec.gold
            tp += pred_pos and gold_pos
            fp += pred_pos and not gold_pos
            fn += gold_pos and not pred_pos
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"mrr": mrr(rankings), "f1": f1, "flags": {}}


def _predict_cls(model, head, ids, types) -> np.ndarray:
    h = model.forward(np.array(ids, dtype=np.int64), np.array(types, dtype=np.int64), train=False)
    return np.argmax(model.cls_logits(h, head).data, axis=-1)
