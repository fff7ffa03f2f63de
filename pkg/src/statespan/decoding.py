"""Inference-time generation: span decoding, beam search, and the two-stage
turn pipeline (span first, then KB lookup, then response).

Decoding is read-only over model parameters and fully deterministic: all
ties are broken by earlier finish and then lexicographic token order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import (DialogueSession, Entity, KnowledgeBase, SlotSchema,
                     StateAnnotation, kb_search, lexicalize)
from .model import CopyFlowModel, DecoderRun, EncodedSequence, one_hot
from .vocab import (EOS_SPAN, EOS_SPAN_ID, EOS_UTT, EOS_UTT_ID, PAD_ID,
                    RESERVED, SPAN_DELIM, Vocabulary)

Array = np.ndarray

RESERVED_IDS = tuple(range(len(RESERVED)))


@dataclass
class SpanDecodeConfig:
    mode: str = "eos"          # "eos" | "fixed"
    t_s: int = 8
    no_repeat: bool = True     # only consulted in fixed-length mode


@dataclass
class DecodeConfig:
    span: SpanDecodeConfig = field(default_factory=SpanDecodeConfig)
    beam_size: int = 5
    max_resp_len: int = 28
    intersect_slot_values: bool = False


@dataclass
class BeamHypothesis:
    tokens: Tuple[int, ...]
    logp: float
    state: object
    finished: bool
    finish_len: int


@dataclass
class SpanResult:
    tokens: List[int]
    dists: List[Array]                 # per-step probability vectors
    components: List[Dict[str, float]]  # per-step unnormalized masses
    seq: EncodedSequence               # copy/attention source for the response


def decode_span(model: CopyFlowModel, run: DecoderRun,
                config: SpanDecodeConfig) -> SpanResult:
    """Greedy max-sampling of a state span.

    eos mode stops at the span terminator (hard cap 2*t_s); fixed mode emits
    exactly t_s steps, optionally forbidding repeats, with reserved tokens
    always excluded.
    """
    V = len(model.vocab)
    if config.mode == "fixed" and config.no_repeat \
            and config.t_s > V - len(RESERVED_IDS):
        raise ValueError("t_s exceeds the number of distinct emittable tokens")
    with ad.no_grad():
        h = run.h_init
        prev = np.array([EOS_SPAN_ID], dtype=np.int64)
        tokens: List[int] = []
        dists: List[Array] = []
        comps: List[Dict[str, float]] = []
        hiddens: List[Tensor] = []
        max_steps = config.t_s if config.mode == "fixed" else 2 * config.t_s
        for _ in range(max_steps):
            dist, h = run.step(model.embed(prev, run.emb_net), h)
            p = dist.probs.data[0].copy()
            if config.mode == "fixed":
                p[list(RESERVED_IDS)] = -1.0
                if config.no_repeat:
                    p[tokens] = -1.0
            tok = int(p.argmax())
            tokens.append(tok)
            dists.append(dist.probs.data[0].copy())
            comps.append({k: float(v.data[0]) for k, v in dist.components.items()})
            hiddens.append(h)
            prev = np.array([tok], dtype=np.int64)
            if config.mode == "eos" and tok == EOS_SPAN_ID:
                break
        # the carried source keeps the saved step distributions, not the
        # sampled tokens, so downstream copying stays distribution-aware
        seq = EncodedSequence(tokens=np.array([tokens]),
                              hiddens=ad.stack(hiddens, axis=1),
                              mask=np.ones((1, len(tokens)), dtype=bool),
                              final=h,
                              dists=Tensor(np.stack(dists)[None, :, :]))
    return SpanResult(tokens=tokens, dists=dists, components=comps, seq=seq)


StepFn = Callable[[object, int], Tuple[Array, object]]


def beam_search(step_fn: StepFn, init_state: object, start_id: int,
                eos_id: int, beam_size: int, max_len: int
                ) -> Tuple[List[int], float, bool]:
    """Generic beam search over per-step log-probability vectors.

    `step_fn(state, prev_token) -> (log_probs, new_state)`.  Returns
    (tokens, total log probability, truncated).  Finished hypotheses are
    never extended; ties break by earlier finish then lexicographic order.
    """
    beams = [BeamHypothesis(tokens=(), logp=0.0, state=init_state,
                            finished=False, finish_len=max_len + 1)]
    for _ in range(max_len):
        if all(b.finished for b in beams):
            break
        candidates: List[BeamHypothesis] = []
        for b in beams:
            if b.finished:
                candidates.append(b)
                continue
            prev = b.tokens[-1] if b.tokens else start_id
            logp, state = step_fn(b.state, prev)
            k = min(beam_size, logp.shape[0])
            top = np.argpartition(-logp, k - 1)[:k]
            for tok in top:
                tok = int(tok)
                toks = b.tokens + (tok,)
                fin = tok == eos_id
                candidates.append(BeamHypothesis(
                    tokens=toks, logp=b.logp + float(logp[tok]), state=state,
                    finished=fin, finish_len=len(toks) if fin else max_len + 1))
        candidates.sort(key=lambda c: (-c.logp, c.finish_len, c.tokens))
        beams = candidates[:beam_size]
    best = min(beams, key=lambda c: (-c.logp, c.finish_len, c.tokens))
    return list(best.tokens), best.logp, not best.finished


def response_step_fn(model: CopyFlowModel, run: DecoderRun) -> StepFn:
    def step(state, prev_token: int):
        with ad.no_grad():
            prev = np.array([prev_token], dtype=np.int64)
            dist, h = run.step(model.embed(prev, run.emb_net), state)
            logp = np.log(np.maximum(dist.probs.data[0], 1e-300))
        return logp, h
    return step


def decode_response(model: CopyFlowModel, enc: EncodedSequence,
                    span_seq: EncodedSequence, beam_size: int,
                    max_len: int) -> Tuple[List[int], bool]:
    with ad.no_grad():
        run = model.response_run(enc, span_seq)
        tokens, _, truncated = beam_search(
            response_step_fn(model, run), run.h_init, EOS_UTT_ID, EOS_UTT_ID,
            beam_size, max_len)
    return tokens, truncated


# -- state extraction ------------------------------------------------------

def extract_state(span_tokens: Sequence[str], schema: SlotSchema,
                  intersect_slot_values: bool) -> StateAnnotation:
    """Read constraints and requests off a decoded span.

    Delimiter mode trusts the span layout (values before the delimiter,
    requestables after); intersection mode matches every span token against
    the known slot-value list, for spans decoded without annotation.
    """
    values = schema.all_values()
    state = StateAnnotation()
    if intersect_slot_values or SPAN_DELIM not in span_tokens:
        region_inf = list(span_tokens)
        region_req = list(span_tokens)
    else:
        cut = list(span_tokens).index(SPAN_DELIM)
        region_inf = list(span_tokens)[:cut]
        region_req = list(span_tokens)[cut + 1:]
    for tok in region_inf:
        slot = values.get(tok)
        if slot is not None and slot not in state.inf:
            state.inf[slot] = tok
    for tok in region_req:
        if tok in schema.requestable and tok not in state.req:
            state.req.append(tok)
    return state


# -- dialogue-level decoding ----------------------------------------------

@dataclass
class TurnResult:
    span_tokens: List[str]
    span_components: List[Dict[str, float]]
    state: StateAnnotation
    resp_delex: List[str]
    resp_surface: List[str]
    matched_entities: int
    truncated: bool


def decode_turn(model: CopyFlowModel, prev_resp_ids: Array, user_ids: Array,
                prev_span: Optional[EncodedSequence],
                config: DecodeConfig) -> Tuple[SpanResult, List[int], bool]:
    with ad.no_grad():
        enc = model.encode_context(prev_resp_ids, user_ids, "prior")
        span = decode_span(model, model.span_run("prior", enc, prev_span),
                           config.span)
        resp, truncated = decode_response(model, enc, span.seq,
                                          config.beam_size, config.max_resp_len)
    return span, resp, truncated


def _utt_to_ids(tokens: Sequence[str], vocab: Vocabulary, n: int) -> Array:
    ids = vocab.encode_seq(list(tokens) + [EOS_UTT])[:n]
    ids = ids + [PAD_ID] * (n - len(ids))
    return np.array([ids], dtype=np.int64)


def run_dialogue(model: CopyFlowModel, vocab: Vocabulary,
                 user_turns: Sequence[Sequence[str]],
                 kb: Optional[KnowledgeBase], schema: SlotSchema,
                 config: DecodeConfig) -> List[TurnResult]:
    """Two-stage decoding over a whole session, feeding the model's own
    responses back as context.  With a KB, informable constraints from the
    span drive entity lookup and placeholder lexicalization."""
    n = model.config.n_ctx
    results: List[TurnResult] = []
    prev_resp_tokens: List[str] = []
    prev_span: Optional[EncodedSequence] = None
    for user in user_turns:
        prev_ids = (_utt_to_ids(prev_resp_tokens, vocab, n)
                    if prev_resp_tokens else np.zeros((1, n), dtype=np.int64))
        user_ids = _utt_to_ids(user, vocab, n)
        span, resp_ids, truncated = decode_turn(model, prev_ids, user_ids,
                                                prev_span, config)
        span_tokens = vocab.decode_seq(span.tokens)
        state = extract_state(span_tokens, schema,
                              config.intersect_slot_values)
        resp_delex = [vocab.decode(i) for i in resp_ids if i != EOS_UTT_ID]
        matched = 0
        resp_surface = list(resp_delex)
        if kb is not None:
            hits = kb_search(kb, state.inf)
            matched = len(hits)
            if hits:
                resp_surface = lexicalize(resp_delex, hits[0], schema)
        results.append(TurnResult(span_tokens=span_tokens,
                                  span_components=span.components,
                                  state=state, resp_delex=resp_delex,
                                  resp_surface=resp_surface,
                                  matched_entities=matched,
                                  truncated=truncated))
        prev_resp_tokens = resp_delex
        prev_span = span.seq
    return results


@dataclass
class SessionPrediction:
    session_id: str
    states: List[StateAnnotation]
    spans: List[List[str]]
    responses: List[List[str]]     # delexicalized, placeholders kept


def decode_sessions(model: CopyFlowModel, vocab: Vocabulary,
                    sessions: Sequence[DialogueSession], schema: SlotSchema,
                    config: DecodeConfig) -> List[SessionPrediction]:
    """Corpus-style decoding: context turns use the gold previous response,
    spans carry the model's own distributions across turns."""
    n = model.config.n_ctx
    out: List[SessionPrediction] = []
    for s in sessions:
        states: List[StateAnnotation] = []
        spans: List[List[str]] = []
        responses: List[List[str]] = []
        prev_span: Optional[EncodedSequence] = None
        for t, turn in enumerate(s.turns):
            prev_ids = (_utt_to_ids(s.turns[t - 1].resp_delex, vocab, n)
                        if t > 0 else np.zeros((1, n), dtype=np.int64))
            user_ids = _utt_to_ids(turn.user, vocab, n)
            span, resp_ids, _ = decode_turn(model, prev_ids, user_ids,
                                            prev_span, config)
            span_tokens = vocab.decode_seq(span.tokens)
            states.append(extract_state(span_tokens, schema,
                                        config.intersect_slot_values))
            spans.append(span_tokens)
            responses.append([vocab.decode(i) for i in resp_ids
                              if i != EOS_UTT_ID])
            prev_span = span.seq
        out.append(SessionPrediction(session_id=s.id, states=states,
                                     spans=spans, responses=responses))
    return out
