"""Metric suite: BLEU, state-tracking accuracy, entity match rate,
embedding-based similarity, and the predicted-keyword proportion.

All metrics are pure functions over decoded outputs and gold data.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from .corpus import (DialogueSession, KnowledgeBase, SlotSchema,
                     StateAnnotation, kb_search)
from .decoding import DecodeConfig, SessionPrediction, decode_sessions
from .model import CopyFlowModel
from .vocab import RESERVED, Vocabulary

Array = np.ndarray

DEFAULT_STOP_TOKENS = frozenset(
    "a an the i you it is are was be to of in on at for and or do does did "
    "what which that this there please could would have has am not no yes "
    "me my your with".split())


# -- BLEU ------------------------------------------------------------------

def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[Sequence[str]],
         references: Sequence[Sequence[str]]) -> float:
    """Corpus BLEU-4: uniform weights, clipped counts, brevity penalty.

    Higher-order (n >= 2) precisions with a zero numerator or denominator
    get add-one smoothing; unigram precision is never smoothed, so disjoint
    corpora score exactly 0.
    """
    if len(candidates) != len(references):
        raise ValueError("candidate/reference count mismatch")
    if not candidates:
        raise ValueError("BLEU of an empty corpus")
    cand_len = sum(len(c) for c in candidates)
    ref_len = sum(len(r) for r in references)
    log_prec = 0.0
    for n in range(1, 5):
        match = 0
        total = 0
        for cand, ref in zip(candidates, references):
            cg = _ngrams(cand, n)
            rg = _ngrams(ref, n)
            total += sum(cg.values())
            match += sum(min(c, rg[g]) for g, c in cg.items())
        if n == 1:
            if match == 0:
                return 0.0
            p = match / total
        elif match == 0 or total == 0:
            p = (match + 1) / (total + 1)
        else:
            p = match / total
        log_prec += 0.25 * math.log(p)
    if cand_len == 0:
        return 0.0
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_prec)


# -- state-tracking metrics ------------------------------------------------

def joint_goal_accuracy(predicted: Sequence[StateAnnotation],
                        gold: Sequence[StateAnnotation],
                        exclusions: Sequence[bool]) -> Tuple[float, int, int]:
    """Proportion of evaluable turns whose informable constraint set matches
    gold exactly; turns flagged as thanks-only are excluded.

    Returns (accuracy, evaluated count, excluded count)."""
    if not (len(predicted) == len(gold) == len(exclusions)):
        raise ValueError("misaligned turn lists")
    correct = 0
    evaluated = 0
    excluded = 0
    for p, g, skip in zip(predicted, gold, exclusions):
        if skip:
            excluded += 1
            continue
        evaluated += 1
        if p.inf == g.inf:
            correct += 1
    return (correct / evaluated if evaluated else 0.0), evaluated, excluded


def _has_placeholder(tokens: Iterable[str], schema: SlotSchema) -> bool:
    ph = set(schema.placeholders())
    return any(t in ph for t in tokens)


def entity_match_rate(predictions: Sequence[SessionPrediction],
                      gold: Sequence[DialogueSession], kb: KnowledgeBase
                      ) -> Tuple[float, int, bool]:
    """Per-dialogue success of constraint tracking at the final
    placeholder-bearing turn.

    Dialogues whose gold responses carry no placeholder are skipped;
    dialogues where the model never decodes a placeholder are failures.
    Returns (rate, skipped count, undefined flag)."""
    schema = kb.schema
    evaluated = 0
    matched = 0
    skipped = 0
    for pred, sess in zip(predictions, gold):
        last_ph = None
        for i, turn in enumerate(sess.turns):
            if _has_placeholder(turn.resp_delex, schema):
                last_ph = i
        if last_ph is None:
            skipped += 1
            continue
        evaluated += 1
        if not any(_has_placeholder(r, schema) for r in pred.responses):
            continue
        hits = kb_search(kb, pred.states[last_ph].inf)
        if hits and sess.target_entity is not None \
                and hits[0].id == sess.target_entity:
            matched += 1
    if evaluated == 0:
        return 0.0, skipped, True
    return matched / evaluated, skipped, False


# -- embedding-based metrics -----------------------------------------------

def load_embeddings(path: str) -> Dict[str, Array]:
    """Text format: one `token v1 v2 ...` per line."""
    out: Dict[str, Array] = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if len(parts) < 2:
                continue
            out[parts[0]] = np.array([float(x) for x in parts[1:]])
    return out


def save_embeddings(path: str, emb: Dict[str, Array]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for tok, vec in emb.items():
            f.write(tok + " " + " ".join(f"{x:.6f}" for x in vec) + "\n")


def synthesize_embeddings(tokens: Iterable[str], dim: int = 16,
                          seed: int = 1234) -> Dict[str, Array]:
    """Deterministic random unit vectors, a stand-in for pretrained ones."""
    rng = np.random.default_rng(seed)
    out = {}
    for tok in sorted(set(tokens)):
        v = rng.standard_normal(dim)
        out[tok] = v / np.linalg.norm(v)
    return out


def _cosine(a: Array, b: Array) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def _extrema(vectors: List[Array]) -> Array:
    m = np.stack(vectors)
    vmax = m.max(axis=0)
    vmin = m.min(axis=0)
    return np.where(np.abs(vmax) >= np.abs(vmin), vmax, vmin)


def embedding_metric(variant: str, candidates: Sequence[Sequence[str]],
                     references: Sequence[Sequence[str]],
                     embeddings: Dict[str, Array]) -> Tuple[float, int]:
    """Corpus-mean sentence similarity; returns (score, skipped pairs).

    average: cosine of mean vectors; greedy: symmetric greedy token
    alignment; extrema: cosine of per-dimension extrema vectors."""
    if variant not in ("average", "greedy", "extrema"):
        raise ValueError(f"unknown embedding metric variant {variant!r}")
    scores: List[float] = []
    skipped = 0
    for cand, ref in zip(candidates, references):
        cv = [embeddings[t] for t in cand if t in embeddings]
        rv = [embeddings[t] for t in ref if t in embeddings]
        if not cv or not rv:
            skipped += 1
            continue
        if variant == "average":
            scores.append(_cosine(np.mean(cv, axis=0), np.mean(rv, axis=0)))
        elif variant == "extrema":
            scores.append(_cosine(_extrema(cv), _extrema(rv)))
        else:
            fwd = np.mean([max(_cosine(c, r) for r in rv) for c in cv])
            bwd = np.mean([max(_cosine(r, c) for c in cv) for r in rv])
            scores.append(float((fwd + bwd) / 2.0))
    return (float(np.mean(scores)) if scores else 0.0), skipped


# -- predicted keywords ----------------------------------------------------

def predicted_keyword_proportion(spans: Sequence[Sequence[str]],
                                 contexts: Sequence[Set[str]],
                                 gold_responses: Sequence[Sequence[str]],
                                 stop_tokens: frozenset = DEFAULT_STOP_TOKENS
                                 ) -> Tuple[float, bool]:
    """Of span tokens not found in the dialogue context, the fraction that
    appear in the gold response (stop words and reserved tokens ignored).

    Returns (proportion, undefined flag when no span token is novel)."""
    if not (len(spans) == len(contexts) == len(gold_responses)):
        raise ValueError("misaligned turn lists")
    reserved = set(RESERVED)
    numer = 0
    denom = 0
    for span, ctx, gold in zip(spans, contexts, gold_responses):
        gold_set = set(gold)
        for tok in set(span):
            if tok in stop_tokens or tok in reserved or tok in ctx:
                continue
            denom += 1
            if tok in gold_set:
                numer += 1
    if denom == 0:
        return 0.0, True
    return numer / denom, False


# -- report ----------------------------------------------------------------

@dataclass
class EvalReport:
    bleu: float = 0.0
    joint_goal_accuracy: float = 0.0
    entity_match_rate: float = 0.0
    emb_average: float = 0.0
    emb_greedy: float = 0.0
    emb_extrema: float = 0.0
    predicted_keyword_proportion: float = 0.0
    counts: Dict[str, int] = field(default_factory=dict)
    flags: Dict[str, bool] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, indent=2)

    def render_table(self) -> str:
        rows = [
            ("bleu", self.bleu),
            ("joint goal accuracy", self.joint_goal_accuracy),
            ("entity match rate", self.entity_match_rate),
            ("embedding average", self.emb_average),
            ("embedding greedy", self.emb_greedy),
            ("embedding extrema", self.emb_extrema),
            ("predicted keyword proportion", self.predicted_keyword_proportion),
        ]
        width = max(len(r[0]) for r in rows)
        lines = [f"{name:<{width}}  {value:8.4f}" for name, value in rows]
        for k in sorted(self.counts):
            lines.append(f"{k:<{width}}  {self.counts[k]:8d}")
        return "\n".join(lines)


def evaluate_sessions(model: CopyFlowModel, vocab: Vocabulary,
                      sessions: Sequence[DialogueSession], schema: SlotSchema,
                      kb: Optional[KnowledgeBase], config: DecodeConfig,
                      embeddings: Optional[Dict[str, Array]] = None
                      ) -> Tuple[EvalReport, List[SessionPrediction]]:
    """Decode a test split and compute the whole metric suite against gold."""
    preds = decode_sessions(model, vocab, sessions, schema, config)

    cand: List[List[str]] = []
    ref: List[List[str]] = []
    pred_states: List[StateAnnotation] = []
    gold_states: List[StateAnnotation] = []
    exclusions: List[bool] = []
    spans: List[List[str]] = []
    contexts: List[Set[str]] = []
    for pred, sess in zip(preds, sessions):
        history: Set[str] = set()
        for t, turn in enumerate(sess.turns):
            cand.append(pred.responses[t])
            ref.append(list(turn.resp_delex))
            if turn.state is not None:
                pred_states.append(pred.states[t])
                gold_states.append(turn.state)
                exclusions.append(turn.thanks_only)
            history |= set(turn.user)
            spans.append(pred.spans[t])
            contexts.append(set(history))
            history |= set(turn.resp_delex)

    report = EvalReport()
    report.bleu = bleu(cand, ref)
    jga, evaluated, excluded = joint_goal_accuracy(pred_states, gold_states,
                                                   exclusions)
    report.joint_goal_accuracy = jga
    report.counts["turns_evaluated"] = evaluated
    report.counts["turns_excluded"] = excluded
    if kb is not None:
        emr, skipped, undefined = entity_match_rate(preds, sessions, kb)
        report.entity_match_rate = emr
        report.counts["dialogues_skipped"] = skipped
        report.flags["entity_match_rate_undefined"] = undefined
    if embeddings is None:
        embeddings = synthesize_embeddings(vocab.tokens)
    for variant, attr in (("average", "emb_average"), ("greedy", "emb_greedy"),
                          ("extrema", "emb_extrema")):
        score, skipped = embedding_metric(variant, cand, ref, embeddings)
        setattr(report, attr, score)
        report.counts[f"emb_{variant}_pairs_skipped"] = skipped
    pkp, undefined = predicted_keyword_proportion(spans, contexts, ref)
    report.predicted_keyword_proportion = pkp
    report.flags["predicted_keyword_undefined"] = undefined
    return report, preds
