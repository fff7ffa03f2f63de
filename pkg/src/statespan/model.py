"""Encoder-decoder with cross-turn copy flows and a prior/posterior pair.

Every decode step produces a mixture distribution over the vocabulary whose
components (direct generation plus one term per copy source) share a single
normalizer.  Copy sources may be deterministic token sequences (one-hot per
position) or nondeterministic per-position distributions produced by an
earlier decoder; the two paths coincide exactly when the distributions are
one-hot.

All tensors carry a leading batch dimension.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .vocab import EOS_SPAN_ID, EOS_UTT_ID, PAD_ID, Vocabulary

Array = np.ndarray


@dataclass
class ModelConfig:
    emb_size: int = 50
    hidden_size: int = 50
    n_ctx: int = 14        # pad/truncate length N for each of U_t and R_{t-1}
    t_span: int = 8        # fixed span decode budget T_s


@dataclass
class EncodedSequence:
    """A copy/attention source: hidden vectors plus, when the source is a
    nondeterministic span, per-position distributions over the vocabulary."""
    tokens: Optional[Array]           # (B, L) int, None for free-run spans
    hiddens: Tensor                   # (B, L, H)
    mask: Array                       # (B, L) bool, True = real position
    final: Tensor                     # (B, H) hidden at last real position
    dists: Optional[Tensor] = None    # (B, L, V); one-hot when deterministic

    @property
    def length(self) -> int:
        return self.hiddens.shape[1]


@dataclass
class MixtureDistribution:
    """Per-step output distribution with component bookkeeping.

    `components` records each source's unnormalized mass; the masses sum to
    the shared normalizer."""
    probs: Tensor                     # (B, V), rows sum to 1
    components: Dict[str, Tensor]     # name -> (B,) unnormalized mass
    normalizer: Tensor                # (B,)


@dataclass
class TurnState:
    t: int
    prev_resp: Array                  # (B, N) int
    user: Array                       # (B, N) int
    prev_span: Optional[EncodedSequence] = None
    span: Optional[EncodedSequence] = None
    response: Optional[Array] = None


class DegenerateDistributionError(Exception):
    pass


def one_hot(tokens: Array, vocab_size: int) -> Tensor:
    tokens = np.asarray(tokens)
    out = np.zeros(tokens.shape + (vocab_size,), dtype=np.float64)
    np.put_along_axis(out, tokens[..., None], 1.0, axis=-1)
    return Tensor(out)


def pad_to(tokens: Sequence[int], length: int) -> List[int]:
    toks = list(tokens)[:length]
    return toks + [PAD_ID] * (length - len(toks))


class CopyFlowModel:
    """Parameter owner and forward passes for both networks.

    The prior network ("prior.*" parameters) sees R_{t-1} U_t; the posterior
    network ("post.*") additionally consumes the gold response.  The response
    decoder ("resp.*") is shared.  The posterior also owns a reconstruction
    decoder used only by the unsupervised objective.
    """

    def __init__(self, vocab: Vocabulary, config: ModelConfig, seed: int = 0):
        self.vocab = vocab
        self.config = config
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        V, E, H = len(vocab), config.emb_size, config.hidden_size
        for net in ("prior", "post"):
            ad.init_weight(self.store, f"{net}.emb", (V, E), rng)
            ad.init_gru(self.store, f"{net}.enc.gru", E, H, rng)
            self._init_decoder(f"{net}.span_dec", rng,
                               copy_sources=("copy_ctx", "copy_prev"))
        self._init_decoder("resp.dec", rng, copy_sources=("copy_span",))
        self._init_decoder("post.recon_dec", rng, copy_sources=("copy_span",))

    def _init_decoder(self, prefix: str, rng: np.random.Generator,
                      copy_sources: Tuple[str, ...]) -> None:
        V, E, H = len(self.vocab), self.config.emb_size, self.config.hidden_size
        ad.init_gru(self.store, f"{prefix}.gru", E + H, H, rng)
        ad.init_weight(self.store, f"{prefix}.attn.W1", (H, H), rng)
        ad.init_weight(self.store, f"{prefix}.attn.W2", (H, H), rng)
        ad.init_weight(self.store, f"{prefix}.attn.v1", (H, 1), rng)
        ad.init_weight(self.store, f"{prefix}.W3", (H, V), rng)
        for src in copy_sources:
            ad.init_weight(self.store, f"{prefix}.{src}.W4", (H, H), rng)
            ad.init_weight(self.store, f"{prefix}.{src}.W5", (H, H), rng)
            ad.init_weight(self.store, f"{prefix}.{src}.v2", (H, 1), rng)

    # -- encoder -----------------------------------------------------------

    def embed(self, tokens: Array, net: str = "prior") -> Tensor:
        tokens = np.asarray(tokens)
        if tokens.max(initial=0) >= len(self.vocab) or tokens.min(initial=0) < 0:
            raise IndexError("token index outside vocabulary range")
        return ad.gather_rows(self.store[f"{net}.emb"], tokens)

    def encode_tokens(self, tokens: Array, net: str) -> EncodedSequence:
        """Forward GRU over embedded tokens; PAD positions carry the hidden
        state through unchanged and are masked out of attention and copying."""
        tokens = np.asarray(tokens)
        B, L = tokens.shape
        H = self.config.hidden_size
        h = Tensor(np.zeros((B, H)))
        hiddens: List[Tensor] = []
        mask = tokens != PAD_ID
        for i in range(L):
            x = self.embed(tokens[:, i], net)
            m = Tensor(mask[:, i].astype(np.float64)[:, None])
            h_new = ad.gru_cell(x, h, self.store, f"{net}.enc.gru")
            h = m * h_new + (1.0 - m) * h
            hiddens.append(h)
        seq = ad.stack(hiddens, axis=1)
        return EncodedSequence(tokens=tokens, hiddens=seq, mask=mask, final=h,
                               dists=one_hot(tokens, len(self.vocab)))

    def encode_context(self, prev_resp: Array, user: Array,
                       net: str = "prior") -> EncodedSequence:
        """Encode the 2N concatenation R_{t-1} U_t."""
        return self.encode_tokens(np.concatenate([prev_resp, user], axis=1), net)

    def encode_posterior_context(self, prev_resp: Array, user: Array,
                                 gold_resp: Array) -> EncodedSequence:
        """Encode the 3N concatenation R_{t-1} U_t R_t for the posterior."""
        cat = np.concatenate([prev_resp, user, gold_resp], axis=1)
        return self.encode_tokens(cat, "post")

    # -- decoder primitives --------------------------------------------------

    def attend(self, memory: Tensor, mask: Array, h_dec: Tensor,
               prefix: str, mem_proj: Optional[Tensor] = None
               ) -> Tuple[Tensor, Tensor]:
        """Additive attention: weights over memory positions and the
        weighted-sum context vector.  `mem_proj` optionally supplies the
        step-independent memory projection so repeated decode steps can
        share it."""
        W1 = self.store[f"{prefix}.attn.W1"]
        W2 = self.store[f"{prefix}.attn.W2"]
        v1 = self.store[f"{prefix}.attn.v1"]
        B, L, H = memory.shape
        if mem_proj is None:
            mem_proj = ad.matmul(memory, W1)
        mixed = ad.tanh(mem_proj +
                        ad.reshape(ad.matmul(h_dec, W2), (B, 1, H)))
        scores = ad.reshape(ad.matmul(mixed, v1), (B, L))
        weights = ad.softmax(scores, mask=mask)
        context = ad.weighted_sum(weights, memory)
        return weights, context

    def decode_step(self, prev_emb: Tensor, h_prev: Tensor, context: Tensor,
                    prefix: str) -> Tensor:
        """GRU over the concatenation of previous-token embedding and the
        attention context vector."""
        x = ad.concat([prev_emb, context], axis=-1)
        return ad.gru_cell(x, h_prev, self.store, f"{prefix}.gru")

    def generation_scores(self, h_dec: Tensor, prefix: str) -> Tensor:
        return ad.matmul(h_dec, self.store[f"{prefix}.W3"])

    def copy_scores(self, source: EncodedSequence, h_dec: Tensor,
                    prefix: str, src_proj: Optional[Tensor] = None) -> Tensor:
        """Per-position unnormalized copy weights psi (PAD handled at
        projection time via the source mask).  `src_proj` optionally supplies
        the step-independent source projection."""
        W4 = self.store[f"{prefix}.W4"]
        W5 = self.store[f"{prefix}.W5"]
        v2 = self.store[f"{prefix}.v2"]
        B, L, H = source.hiddens.shape
        if src_proj is None:
            src_proj = ad.matmul(source.hiddens, W4)
        mixed = ad.tanh(src_proj +
                        ad.reshape(ad.matmul(h_dec, W5), (B, 1, H)))
        return ad.reshape(ad.matmul(mixed, v2), (B, L))

    @staticmethod
    def project_copy_mass(source: EncodedSequence, psi: Tensor,
                          shift: Array) -> Tensor:
        """Unnormalized vocabulary-space copy mass:
        mass(v) = sum_i p_i(w_i = v) * exp(psi_i - shift), PAD excluded."""
        mask_f = Tensor(source.mask.astype(np.float64))
        exp_psi = ad.exp(psi - Tensor(shift[:, None])) * mask_f
        return ad.weighted_sum(exp_psi, source.dists)

    def mix_distribution(self, gen_scores: Tensor,
                         copy_terms: Sequence[Tuple[str, EncodedSequence, Tensor]]
                         ) -> MixtureDistribution:
        """Join generation scores and copy masses under one shared normalizer.

        `copy_terms` is a list of (component name, source, psi).  A single
        max-shift (constant, shared by every component) keeps the
        exponentials in range without changing the distribution.
        """
        shift = gen_scores.data.max(axis=1)
        for _, source, psi in copy_terms:
            masked = np.where(source.mask, psi.data, -np.inf)
            shift = np.maximum(shift, masked.max(axis=1))
        shift = np.where(np.isfinite(shift), shift, 0.0)

        gen_exp = ad.exp(gen_scores - Tensor(shift[:, None]))
        components: Dict[str, Tensor] = {"generation": ad.tsum(gen_exp, axis=1)}
        total = gen_exp
        for name, source, psi in copy_terms:
            mass = self.project_copy_mass(source, psi, shift)
            components[name] = ad.tsum(mass, axis=1)
            total = total + mass
        normalizer = ad.tsum(total, axis=1)
        if np.any(normalizer.data <= 0.0):
            raise DegenerateDistributionError("all mixture components masked")
        B = total.shape[0]
        probs = total / ad.reshape(normalizer, (B, 1))
        return MixtureDistribution(probs=probs, components=components,
                                   normalizer=normalizer)

    # -- full decoders -------------------------------------------------------

    def _decoder_run(self, prefix: str, emb_net: str, memory: Tensor,
                     memory_mask: Array,
                     copy_sources: Sequence[Tuple[str, str, EncodedSequence]],
                     h_init: Tensor) -> "DecoderRun":
        return DecoderRun(self, prefix, emb_net, memory, memory_mask,
                          list(copy_sources), h_init)

    def span_run(self, net: str, enc: EncodedSequence,
                 prev_span: Optional[EncodedSequence]) -> "DecoderRun":
        sources = [(f"{net}.span_dec.copy_ctx", "copy_context", enc)]
        if prev_span is not None:
            sources.append((f"{net}.span_dec.copy_prev", "copy_prev_span",
                            prev_span))
        return self._decoder_run(f"{net}.span_dec", net, enc.hiddens, enc.mask,
                                 sources, enc.final)

    def response_run(self, enc: EncodedSequence,
                     span: EncodedSequence) -> "DecoderRun":
        memory = ad.concat([enc.hiddens, span.hiddens], axis=1)
        mask = np.concatenate([enc.mask, span.mask], axis=1)
        sources = [("resp.dec.copy_span", "copy_span", span)]
        return self._decoder_run("resp.dec", "prior", memory, mask, sources,
                                 enc.final)

    def reconstruction_run(self, span: EncodedSequence) -> "DecoderRun":
        sources = [("post.recon_dec.copy_span", "copy_span", span)]
        return self._decoder_run("post.recon_dec", "post", span.hiddens,
                                 span.mask, sources, span.final)

    def run_teacher_forced(self, run: "DecoderRun", start_id: int,
                           teacher: Array) -> Tuple[List[MixtureDistribution],
                                                    EncodedSequence]:
        """Decode with gold previous tokens; returns per-step distributions
        and the decoded sequence as a deterministic copy source."""
        teacher = np.asarray(teacher)
        B, T = teacher.shape
        h = run.h_init
        prev = np.full(B, start_id, dtype=np.int64)
        dists: List[MixtureDistribution] = []
        hiddens: List[Tensor] = []
        for j in range(T):
            dist, h = run.step(self.embed(prev, run.emb_net), h)
            dists.append(dist)
            hiddens.append(h)
            prev = teacher[:, j]
        seq = EncodedSequence(tokens=teacher, hiddens=ad.stack(hiddens, axis=1),
                              mask=teacher != PAD_ID, final=h,
                              dists=one_hot(teacher, len(self.vocab)))
        return dists, seq

    def run_free(self, run: "DecoderRun", start_id: int,
                 steps: int) -> Tuple[List[MixtureDistribution], EncodedSequence]:
        """Decode without gold tokens, feeding each step the probability-
        weighted embedding of its own output; fully differentiable."""
        emb_table = self.store[f"{run.emb_net}.emb"]
        B = run.h_init.shape[0]
        h = run.h_init
        prev_emb = self.embed(np.full(B, start_id, dtype=np.int64), run.emb_net)
        dists: List[MixtureDistribution] = []
        hiddens: List[Tensor] = []
        for j in range(steps):
            dist, h = run.step(prev_emb, h)
            dists.append(dist)
            hiddens.append(h)
            prev_emb = ad.matmul(dist.probs, emb_table)
        probs = ad.stack([d.probs for d in dists], axis=1)
        tokens = probs.data.argmax(axis=2)
        seq = EncodedSequence(tokens=tokens, hiddens=ad.stack(hiddens, axis=1),
                              mask=np.ones((B, steps), dtype=bool), final=h,
                              dists=probs)
        return dists, seq

    # -- spec-level entry points --------------------------------------------

    def prior_span_distributions(self, turn: TurnState, mode: str = "teacher",
                                 teacher_tokens: Optional[Array] = None,
                                 steps: Optional[int] = None
                                 ) -> Tuple[List[MixtureDistribution],
                                            EncodedSequence]:
        """Span distributions from the prior network.  `mode` is "teacher"
        (gold tokens required) or "free" (fixed number of steps)."""
        enc = self.encode_context(turn.prev_resp, turn.user, "prior")
        run = self.span_run("prior", enc, turn.prev_span)
        if mode == "teacher":
            return self.run_teacher_forced(run, EOS_SPAN_ID, teacher_tokens)
        return self.run_free(run, EOS_SPAN_ID, steps or self.config.t_span)

    def posterior_span_distributions(self, turn: TurnState, gold_resp: Array,
                                     mode: str = "teacher",
                                     teacher_tokens: Optional[Array] = None,
                                     steps: Optional[int] = None,
                                     prev_span: Optional[EncodedSequence] = None
                                     ) -> Tuple[List[MixtureDistribution],
                                                EncodedSequence]:
        """Span distributions from the posterior network, whose encoder also
        consumes the gold response.  Training-time only."""
        if not ad._GRAD_ENABLED:
            raise RuntimeError("the posterior network is a training-time "
                               "device; only the prior runs at inference")
        enc = self.encode_posterior_context(turn.prev_resp, turn.user, gold_resp)
        run = self.span_run("post", enc, prev_span)
        if mode == "teacher":
            return self.run_teacher_forced(run, EOS_SPAN_ID, teacher_tokens)
        return self.run_free(run, EOS_SPAN_ID, steps or self.config.t_span)

    def response_distributions(self, enc: EncodedSequence,
                               span: EncodedSequence,
                               teacher_tokens: Array
                               ) -> List[MixtureDistribution]:
        run = self.response_run(enc, span)
        dists, _ = self.run_teacher_forced(run, EOS_UTT_ID, teacher_tokens)
        return dists

    def reconstruction_distributions(self, span: EncodedSequence,
                                     teacher_tokens: Array
                                     ) -> List[MixtureDistribution]:
        run = self.reconstruction_run(span)
        dists, _ = self.run_teacher_forced(run, EOS_UTT_ID, teacher_tokens)
        return dists


class DecoderRun:
    """One decoder invocation: fixed attention memory and copy sources,
    stepped with (previous embedding, previous hidden)."""

    def __init__(self, model: CopyFlowModel, prefix: str, emb_net: str,
                 memory: Tensor, memory_mask: Array,
                 sources: List[Tuple[str, str, EncodedSequence]],
                 h_init: Tensor):
        self.model = model
        self.prefix = prefix
        self.emb_net = emb_net
        self.memory = memory
        self.memory_mask = memory_mask
        self.sources = sources
        self.h_init = h_init
        # step-independent projections, shared by every decode step
        self._mem_proj = ad.matmul(memory,
                                   model.store[f"{prefix}.attn.W1"])
        self._src_projs = [ad.matmul(src.hiddens, model.store[f"{p}.W4"])
                           for p, _, src in sources]

    def step(self, prev_emb: Tensor,
             h_prev: Tensor) -> Tuple[MixtureDistribution, Tensor]:
        _, context = self.model.attend(self.memory, self.memory_mask, h_prev,
                                       self.prefix, mem_proj=self._mem_proj)
        h = self.model.decode_step(prev_emb, h_prev, context, self.prefix)
        gen = self.model.generation_scores(h, self.prefix)
        copy_terms = [(name, src,
                       self.model.copy_scores(src, h, p, src_proj=proj))
                      for (p, name, src), proj in zip(self.sources,
                                                      self._src_projs)]
        return self.model.mix_distribution(gen, copy_terms), h


def sequence_nll(dists: Sequence[MixtureDistribution], targets: Array,
                 floor: float = 1e-12) -> Tensor:
    """Summed negative log-likelihood of target tokens, PAD excluded."""
    targets = np.asarray(targets)
    total = Tensor(0.0)
    for j, dist in enumerate(dists):
        tgt = targets[:, j]
        mask = Tensor((tgt != PAD_ID).astype(np.float64))
        p = ad.clamp_min(ad.take_probs(dist.probs, tgt), floor)
        total = total + ad.tsum(-ad.log(p) * mask)
    return total
