"""Loss assembly, the KL regularizer, schedules, and the training loop.

Two objectives: the joint likelihood loss for supervised/semi-supervised
training (span and response NLL on annotated sessions, response NLL plus a
stepwise KL term pulling the prior span distribution toward the posterior's
on unannotated ones), and the fully unsupervised loss where the posterior
is trained as an auto-encoder reconstructing its own encoder input.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Set, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import DialogueSession, SlotSchema
from .model import (CopyFlowModel, EncodedSequence, ModelConfig, TurnState,
                    pad_to, sequence_nll)
from .vocab import EOS_SPAN_ID, EOS_UTT, EOS_UTT_ID, Vocabulary

Array = np.ndarray


# -- KL and identities -----------------------------------------------------

def kl_rows(q: Tensor, p: Tensor, floor: float = 1e-10) -> Tensor:
    """Row-wise KL(q||p) for (B, V) distributions; p is floored inside the
    log so an unwarmed prior cannot produce infinities."""
    q_safe = ad.clamp_min(q, 1e-300)
    p_safe = ad.clamp_min(p, floor)
    return ad.tsum(q * (ad.log(q_safe) - ad.log(p_safe)), axis=-1)


def kl_divergence(q, p, floor: float = 1e-10) -> Tensor:
    """KL(q||p) for a single pair of probability vectors."""
    q, p = ad.as_tensor(q), ad.as_tensor(p)
    if np.any(q.data < 0) or np.any(p.data < 0):
        raise ValueError("KL divergence requires nonnegative entries")
    qr = ad.reshape(q, (1, q.data.size))
    pr = ad.reshape(p, (1, p.data.size))
    return ad.reshape(kl_rows(qr, pr, floor), ())


def dawnet_equivalence_check(p: Array, i: int) -> Tuple[float, float]:
    """(log p_i, -KL(one_hot(i) || p)): the two sides of the identity that
    reduces one-hot posterior regularization to maximum likelihood."""
    p = np.asarray(p, dtype=np.float64)
    if p[i] == 0.0:
        return (-np.inf, -np.inf)
    lhs = float(np.log(p[i]))
    q = np.zeros_like(p)
    q[i] = 1.0
    rhs = -float(kl_divergence(q, p, floor=1e-300).data)
    return lhs, rhs


@dataclass
class LambdaSchedule:
    lam0: float = 0.1
    lam1: Optional[float] = None      # None = constant
    epoch_steps: int = 1


def lambda_at(step: int, schedule: LambdaSchedule) -> float:
    if schedule.lam1 is None:
        return schedule.lam0
    if step >= schedule.epoch_steps:
        return schedule.lam1
    frac = step / schedule.epoch_steps
    return schedule.lam0 + (schedule.lam1 - schedule.lam0) * frac


# -- configuration ---------------------------------------------------------

@dataclass
class TrainingConfig:
    learning_rate: float = 0.003
    batch_size: int = 32
    hidden_size: int = 50
    emb_size: int = 50
    n_ctx: int = 14
    t_span: int = 8
    lambda0: float = 0.1
    lambda1: Optional[float] = None   # set for the linear first-epoch decay
    supervision: float = 1.0          # proportion of sessions annotated
    mode: str = "auto"                # supervised | semi-supervised | unsupervised
    seed: int = 0
    patience: int = 3
    max_epochs: int = 30
    use_unlabeled: bool = True        # False: drop unannotated sessions
    kl_floor: float = 1e-10

    def resolved_mode(self) -> str:
        if self.mode != "auto":
            return self.mode
        if self.supervision <= 0.0:
            return "unsupervised"
        if self.supervision >= 1.0:
            return "supervised"
        return "semi-supervised"

    def model_config(self) -> ModelConfig:
        return ModelConfig(emb_size=self.emb_size, hidden_size=self.hidden_size,
                           n_ctx=self.n_ctx, t_span=self.t_span)


@dataclass
class LossBreakdown:
    response_nll: float = 0.0
    span_prior_nll: float = 0.0
    span_posterior_nll: float = 0.0
    reconstruction_nll: float = 0.0
    kl_term: float = 0.0
    total: float = 0.0

    def add(self, other: "LossBreakdown") -> None:
        self.response_nll += other.response_nll
        self.span_prior_nll += other.span_prior_nll
        self.span_posterior_nll += other.span_posterior_nll
        self.reconstruction_nll += other.reconstruction_nll
        self.kl_term += other.kl_term
        self.total += other.total


class EmptyBatchError(Exception):
    pass


# -- batch preparation -----------------------------------------------------

def build_vocabulary(sessions: Sequence[DialogueSession],
                     schema: SlotSchema) -> Vocabulary:
    tokens: List[str] = []
    for slot in schema.informable:
        tokens.extend(schema.informable[slot])
    tokens.extend(schema.requestable)
    tokens.extend(schema.placeholders())
    for s in sessions:
        for t in s.turns:
            tokens.extend(t.user)
            tokens.extend(t.resp_delex)
    return Vocabulary(tokens)


def _utt_ids(tokens: Sequence[str], vocab: Vocabulary, n: int) -> List[int]:
    return pad_to(vocab.encode_seq(list(tokens) + [EOS_UTT]), n)


@dataclass
class PreparedTurn:
    prev_resp: Array              # (B, N)
    user: Array                   # (B, N)
    gold_resp: Array              # (B, N), PAD rows for finished dialogues
    gold_span: Optional[Array]    # (B, Ls) or None when unannotated
    active: Array                 # (B,) float


def prepare_turns(sessions: Sequence[DialogueSession], vocab: Vocabulary,
                  schema: SlotSchema, n_ctx: int,
                  annotated: bool) -> List[PreparedTurn]:
    """Lockstep turn arrays for a sub-batch; sessions shorter than the
    longest one are padded with inactive all-PAD turns."""
    B = len(sessions)
    T = max(len(s.turns) for s in sessions)
    out: List[PreparedTurn] = []
    for t in range(T):
        prev_resp = np.zeros((B, n_ctx), dtype=np.int64)
        user = np.zeros((B, n_ctx), dtype=np.int64)
        gold_resp = np.zeros((B, n_ctx), dtype=np.int64)
        active = np.zeros(B)
        spans: List[List[int]] = []
        for b, s in enumerate(sessions):
            if t < len(s.turns):
                turn = s.turns[t]
                active[b] = 1.0
                user[b] = _utt_ids(turn.user, vocab, n_ctx)
                gold_resp[b] = _utt_ids(turn.resp_delex, vocab, n_ctx)
                if t > 0:
                    prev_resp[b] = _utt_ids(s.turns[t - 1].resp_delex, vocab, n_ctx)
                if annotated and turn.state is not None:
                    spans.append(vocab.encode_seq(turn.state.span_tokens(schema)))
                else:
                    spans.append([])
            else:
                # keep one real token so attention has something to look at
                user[b, 0] = EOS_UTT_ID
                spans.append([])
        gold_span = None
        if annotated:
            ls = max(len(sp) for sp in spans)
            gold_span = np.array([pad_to(sp, ls) for sp in spans], dtype=np.int64)
        out.append(PreparedTurn(prev_resp=prev_resp, user=user,
                                gold_resp=gold_resp, gold_span=gold_span,
                                active=active))
    return out


# -- loss assembly ---------------------------------------------------------

def _annotated_loss(model: CopyFlowModel, turns: List[PreparedTurn]
                    ) -> Tuple[Tensor, LossBreakdown]:
    """Teacher-forced joint NLL: response + prior span + posterior span."""
    zero = Tensor(0.0)
    resp_nll = span_p_nll = span_q_nll = zero
    prev_span_p: Optional[EncodedSequence] = None
    prev_span_q: Optional[EncodedSequence] = None
    for t, pt in enumerate(turns):
        enc = model.encode_context(pt.prev_resp, pt.user, "prior")
        run_p = model.span_run("prior", enc, prev_span_p)
        dists_p, span_p = model.run_teacher_forced(run_p, EOS_SPAN_ID,
                                                   pt.gold_span)
        span_p_nll = span_p_nll + sequence_nll(dists_p, pt.gold_span)

        state = TurnState(t=t, prev_resp=pt.prev_resp, user=pt.user)
        dists_q, span_q = model.posterior_span_distributions(
            state, pt.gold_resp, mode="teacher", teacher_tokens=pt.gold_span,
            prev_span=prev_span_q)
        span_q_nll = span_q_nll + sequence_nll(dists_q, pt.gold_span)

        resp_dists = model.response_distributions(enc, span_p, pt.gold_resp)
        resp_nll = resp_nll + sequence_nll(resp_dists, pt.gold_resp)

        prev_span_p, prev_span_q = span_p, span_q
    total = resp_nll + span_p_nll + span_q_nll
    return total, LossBreakdown(response_nll=float(resp_nll.data),
                                span_prior_nll=float(span_p_nll.data),
                                span_posterior_nll=float(span_q_nll.data),
                                total=float(total.data))


def _unannotated_loss(model: CopyFlowModel, turns: List[PreparedTurn],
                      lam: float, reconstruct: bool,
                      kl_floor: float) -> Tuple[Tensor, LossBreakdown]:
    """Free-running span loss: response NLL through the prior's span, KL
    from posterior to prior per span step, optional posterior
    reconstruction of its encoder input."""
    zero = Tensor(0.0)
    resp_nll = recon_nll = kl_total = zero
    t_span = model.config.t_span
    prev_span_p: Optional[EncodedSequence] = None
    prev_span_q: Optional[EncodedSequence] = None
    for t, pt in enumerate(turns):
        enc = model.encode_context(pt.prev_resp, pt.user, "prior")
        run_p = model.span_run("prior", enc, prev_span_p)
        dists_p, span_p = model.run_free(run_p, EOS_SPAN_ID, t_span)

        state = TurnState(t=t, prev_resp=pt.prev_resp, user=pt.user)
        dists_q, span_q = model.posterior_span_distributions(
            state, pt.gold_resp, mode="free", steps=t_span,
            prev_span=prev_span_q)

        resp_dists = model.response_distributions(enc, span_p, pt.gold_resp)
        resp_nll = resp_nll + sequence_nll(resp_dists, pt.gold_resp)

        active = Tensor(pt.active)
        for dq, dp in zip(dists_q, dists_p):
            kl_total = kl_total + ad.tsum(
                kl_rows(dq.probs, dp.probs, kl_floor) * active)

        if reconstruct:
            target = np.concatenate([pt.prev_resp, pt.user, pt.gold_resp],
                                    axis=1)
            recon_dists = model.reconstruction_distributions(span_q, target)
            recon_nll = recon_nll + sequence_nll(recon_dists, target)

        prev_span_p, prev_span_q = span_p, span_q
    total = resp_nll + recon_nll + lam * kl_total
    return total, LossBreakdown(response_nll=float(resp_nll.data),
                                reconstruction_nll=float(recon_nll.data),
                                kl_term=float(kl_total.data),
                                total=float(total.data))


def loss_semi_supervised(ann_turns: Optional[List[PreparedTurn]],
                         unann_turns: Optional[List[PreparedTurn]],
                         model: CopyFlowModel, lam: float,
                         kl_floor: float = 1e-10
                         ) -> Tuple[Tensor, LossBreakdown]:
    """Joint objective over a mixed batch (annotated and unannotated
    sub-batches are forwarded separately and summed)."""
    if ann_turns is None and unann_turns is None:
        raise EmptyBatchError("batch has neither annotated nor unannotated "
                              "instances")
    breakdown = LossBreakdown()
    total = Tensor(0.0)
    if ann_turns is not None:
        t, b = _annotated_loss(model, ann_turns)
        total = total + t
        breakdown.add(b)
    if unann_turns is not None:
        t, b = _unannotated_loss(model, unann_turns, lam, reconstruct=False,
                                 kl_floor=kl_floor)
        total = total + t
        breakdown.add(b)
    return total, breakdown


def loss_unsupervised(unann_turns: List[PreparedTurn], model: CopyFlowModel,
                      lam: float, kl_floor: float = 1e-10
                      ) -> Tuple[Tensor, LossBreakdown]:
    """Response generation + posterior auto-encoder reconstruction + KL."""
    if not unann_turns:
        raise EmptyBatchError("empty unsupervised batch")
    return _unannotated_loss(model, unann_turns, lam, reconstruct=True,
                             kl_floor=kl_floor)


# -- training loop ---------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    train: LossBreakdown
    valid: LossBreakdown
    lam: float
    seconds: float


@dataclass
class TrainResult:
    model: CopyFlowModel
    vocab: Vocabulary
    log: List[EpochLog]
    annotated_ids: Set[str]
    stopped_early: bool
    diverged: bool = False


def select_annotated(sessions: Sequence[DialogueSession], proportion: float,
                     seed: int) -> Set[str]:
    """Seeded random subset of session ids treated as annotated."""
    ids = [s.id for s in sessions]
    k = int(round(proportion * len(ids)))
    rng = np.random.default_rng(seed + 7919)
    chosen = rng.choice(len(ids), size=k, replace=False)
    return {ids[i] for i in sorted(chosen)}


def _batch_loss(model: CopyFlowModel, batch: List[DialogueSession],
                annotated_ids: Set[str], vocab: Vocabulary,
                schema: SlotSchema, config: TrainingConfig,
                lam: float) -> Tuple[Tensor, LossBreakdown]:
    mode = config.resolved_mode()
    ann = [s for s in batch if s.id in annotated_ids]
    unann = [s for s in batch if s.id not in annotated_ids]
    if not config.use_unlabeled:
        unann = []
    n = model.config.n_ctx
    ann_turns = prepare_turns(ann, vocab, schema, n, annotated=True) if ann else None
    unann_turns = (prepare_turns(unann, vocab, schema, n, annotated=False)
                   if unann else None)
    if mode == "unsupervised":
        if unann_turns is None:
            raise EmptyBatchError("unsupervised mode but no unannotated data")
        return loss_unsupervised(unann_turns, model, lam, config.kl_floor)
    return loss_semi_supervised(ann_turns, unann_turns, model, lam,
                                config.kl_floor)


def fit(train: Sequence[DialogueSession], valid: Sequence[DialogueSession],
        schema: SlotSchema, config: TrainingConfig,
        vocab: Optional[Vocabulary] = None,
        on_epoch: Optional[Callable[[EpochLog, CopyFlowModel], None]] = None
        ) -> TrainResult:
    """Minibatch Adam on the mode-appropriate loss with early stopping on
    validation total loss; returns the best-validation parameters.
    `on_epoch`, if given, is called with each completed EpochLog and the
    live model (for progress reporting or mid-training snapshots)."""
    if vocab is None:
        vocab = build_vocabulary(train, schema)
    model = CopyFlowModel(vocab, config.model_config(), seed=config.seed)
    annotated_ids = select_annotated(train, config.supervision, config.seed)
    # validation always scores against its own gold annotations, except in
    # fully unsupervised mode where none are assumed to exist
    valid_annotated: Set[str] = (set() if config.resolved_mode() == "unsupervised"
                                 else {s.id for s in valid})
    train_sessions = list(train)
    if not config.use_unlabeled:
        train_sessions = [s for s in train_sessions if s.id in annotated_ids]
    if not train_sessions:
        raise EmptyBatchError("no training sessions after supervision filter")

    steps_per_epoch = max(1, (len(train_sessions) + config.batch_size - 1)
                          // config.batch_size)
    schedule = LambdaSchedule(config.lambda0, config.lambda1, steps_per_epoch)
    rng = np.random.default_rng(config.seed)

    log: List[EpochLog] = []
    best_total = np.inf
    best_values = model.store.copy_values()
    no_improve = 0
    step = 0
    diverged = False
    stopped_early = False

    for epoch in range(config.max_epochs):
        t0 = time.monotonic()
        order = rng.permutation(len(train_sessions))
        train_break = LossBreakdown()
        lam = lambda_at(step, schedule)
        try:
            for start in range(0, len(order), config.batch_size):
                batch = [train_sessions[i] for i in order[start:start + config.batch_size]]
                lam = lambda_at(step, schedule)
                model.store.zero_grad()
                total, breakdown = _batch_loss(model, batch, annotated_ids,
                                               vocab, schema, config, lam)
                if not np.isfinite(total.data):
                    raise FloatingPointError("non-finite training loss")
                grads = ad.backward(total, model.store)
                ad.adam_step(model.store, grads, config.learning_rate)
                train_break.add(breakdown)
                step += 1
        except FloatingPointError:
            diverged = True
            break

        valid_break = LossBreakdown()
        for start in range(0, len(valid), config.batch_size):
            batch = list(valid[start:start + config.batch_size])
            _, breakdown = _batch_loss(model, batch, valid_annotated, vocab,
                                       schema, config, lam)
            valid_break.add(breakdown)

        log.append(EpochLog(epoch=epoch, train=train_break, valid=valid_break,
                            lam=lam, seconds=time.monotonic() - t0))
        if on_epoch is not None:
            on_epoch(log[-1], model)

        if valid_break.total < best_total:
            best_total = valid_break.total
            best_values = model.store.copy_values()
            no_improve = 0
        else:
            no_improve += 1
        if no_improve >= config.patience:
            stopped_early = True
            break

    model.store.load_values(best_values)
    return TrainResult(model=model, vocab=vocab, log=log,
                       annotated_ids=annotated_ids,
                       stopped_early=stopped_early, diverged=diverged)
