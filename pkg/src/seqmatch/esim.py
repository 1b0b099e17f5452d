"""Cross-attention sequential matching model.

Pipeline per (context, response) pair, all batched over B:

  input encoding      embeddings -> ReLU projection -> shared BiLSTM
  local matching      dot-product attention, soft alignment, then
                      F([a; b; a-b; a*b]) per position
  composition         second BiLSTM over the matching vectors, masked
                      max+mean pooling, tanh MLP, 2-way softmax

The ctxdec_off variant skips the context side of local matching and
composition; only the response's pooled vectors feed the classifier.
Attention is still computed, since the response alignment needs it.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .datapipe import concat_context, encode_pair_batch, encode_sentences
from .embeddings import Projection, init_projection, project
from .errors import ContractError, DimensionError
from .rnn import LstmCellParams, bilstm, glorot, init_lstm_params
from .tensor import Tensor

VARIANTS = ("full", "ctxdec_off")


@dataclass
class ESIMParams:
    """All learnable tensors; BiLSTM1 is shared by context and response."""

    embed: Tensor  # (|V|, E)
    proj: Projection
    lstm1_fwd: LstmCellParams
    lstm1_bwd: LstmCellParams
    f_weight: Tensor  # (8h, h)
    f_bias: Tensor  # (h,)
    lstm2_fwd: LstmCellParams
    lstm2_bwd: LstmCellParams
    mlp_w1: Tensor  # (8h or 4h, h)
    mlp_b1: Tensor
    mlp_w2: Tensor  # (h, 2)
    mlp_b2: Tensor
    variant: str = "full"

    @property
    def hidden(self):
        return self.lstm1_fwd.hidden_size

    def named_parameters(self):
        out = [("embed", self.embed)] if self.embed.requires_grad else []
        out += [
            ("proj.weight", self.proj.weight),
            ("proj.bias", self.proj.bias),
            ("lstm1_fwd.w_ih", self.lstm1_fwd.w_ih),
            ("lstm1_fwd.w_hh", self.lstm1_fwd.w_hh),
            ("lstm1_fwd.bias", self.lstm1_fwd.bias),
            ("lstm1_bwd.w_ih", self.lstm1_bwd.w_ih),
            ("lstm1_bwd.w_hh", self.lstm1_bwd.w_hh),
            ("lstm1_bwd.bias", self.lstm1_bwd.bias),
            ("f.weight", self.f_weight),
            ("f.bias", self.f_bias),
            ("lstm2_fwd.w_ih", self.lstm2_fwd.w_ih),
            ("lstm2_fwd.w_hh", self.lstm2_fwd.w_hh),
            ("lstm2_fwd.bias", self.lstm2_fwd.bias),
            ("lstm2_bwd.w_ih", self.lstm2_bwd.w_ih),
            ("lstm2_bwd.w_hh", self.lstm2_bwd.w_hh),
            ("lstm2_bwd.bias", self.lstm2_bwd.bias),
            ("mlp.w1", self.mlp_w1),
            ("mlp.b1", self.mlp_b1),
            ("mlp.w2", self.mlp_w2),
            ("mlp.b2", self.mlp_b2),
        ]
        return out

    def all_tensors(self):
        named = dict(self.named_parameters())
        named.setdefault("embed", self.embed)
        return named


def init_esim_params(rng, embed_matrix, hidden, variant="full", embed_trainable=True, dtype=None):
    if variant not in VARIANTS:
        raise ContractError(f"unknown ESIM variant {variant!r}")
    embed = Tensor(embed_matrix, requires_grad=embed_trainable, dtype=dtype)
    embed_dim = embed.shape[1]
    pooled = 8 * hidden if variant == "full" else 4 * hidden
    return ESIMParams(
        embed=embed,
        proj=init_projection(rng, embed_dim, hidden, dtype),
        lstm1_fwd=init_lstm_params(rng, hidden, hidden, dtype),
        lstm1_bwd=init_lstm_params(rng, hidden, hidden, dtype),
        f_weight=_linear(rng, 8 * hidden, hidden, dtype),
        f_bias=Tensor(np.zeros(hidden), requires_grad=True, dtype=dtype),
        lstm2_fwd=init_lstm_params(rng, hidden, hidden, dtype),
        lstm2_bwd=init_lstm_params(rng, hidden, hidden, dtype),
        mlp_w1=_linear(rng, pooled, hidden, dtype),
        mlp_b1=Tensor(np.zeros(hidden), requires_grad=True, dtype=dtype),
        mlp_w2=_linear(rng, hidden, 2, dtype),
        mlp_b2=Tensor(np.zeros(2), requires_grad=True, dtype=dtype),
        variant=variant,
    )


def _linear(rng, fan_in, fan_out, dtype):
    w = glorot(rng, fan_out, fan_in, dtype)
    return Tensor(w.data.T.copy(), requires_grad=True, dtype=dtype)


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------


def encode_inputs(params, ctx_ids, ctx_mask, rsp_ids, rsp_mask):
    """Shared-weights first-pass encoding: (B, m, 2h) and (B, n, 2h)."""
    c_in = project(params.proj, T.gather_rows(params.embed, ctx_ids))
    r_in = project(params.proj, T.gather_rows(params.embed, rsp_ids))
    c_s = bilstm(params.lstm1_fwd, params.lstm1_bwd, c_in, ctx_mask)
    r_s = bilstm(params.lstm1_fwd, params.lstm1_bwd, r_in, rsp_mask)
    return c_s, r_s


def attention_scores(c_s, r_s):
    """Token-pair dot products: (B, m, 2h) x (B, n, 2h) -> (B, m, n)."""
    if c_s.shape[-1] != r_s.shape[-1]:
        raise DimensionError(
            f"attention_scores: state widths differ, {c_s.shape} vs {r_s.shape}"
        )
    return T.matmul(c_s, T.swapaxes(r_s, -1, -2))


def align_dual(e, c_s, r_s, ctx_mask, rsp_mask):
    """Soft alignment: each side gets the other side's weighted states.

    Rows of the context->response weights are a softmax over unmasked
    response positions; columns of the reverse weights over unmasked
    context positions.
    """
    ctx_mask = np.asarray(ctx_mask)
    rsp_mask = np.asarray(rsp_mask)
    alpha = T.masked_softmax(e, rsp_mask[:, None, :], axis=-1)
    beta = T.masked_softmax(e, ctx_mask[:, :, None], axis=-2)
    c_d = T.matmul(alpha, r_s)
    r_d = T.matmul(T.swapaxes(beta, -1, -2), c_s)
    return c_d, r_d


def _match_side(a_s, a_d, params):
    feats = T.concat([a_s, a_d, T.sub(a_s, a_d), T.mul(a_s, a_d)], axis=-1)
    return T.relu(T.add(T.matmul(feats, params.f_weight), params.f_bias))


def local_match(c_s, c_d, r_s, r_d, params):
    """F([a; b; a-b; a*b]) per position for both sides."""
    return _match_side(c_s, c_d, params), _match_side(r_s, r_d, params)


def _pool_both(v, mask):
    return T.concat([T.masked_pool(v, mask, "max"), T.masked_pool(v, mask, "mean")], axis=-1)


def _compose_logits(params, c_l, r_l, ctx_mask, rsp_mask):
    r_v = bilstm(params.lstm2_fwd, params.lstm2_bwd, r_l, rsp_mask)
    pooled = _pool_both(r_v, rsp_mask)
    if params.variant == "full":
        c_v = bilstm(params.lstm2_fwd, params.lstm2_bwd, c_l, ctx_mask)
        pooled = T.concat([_pool_both(c_v, ctx_mask), pooled], axis=-1)
    hidden = T.tanh(T.add(T.matmul(pooled, params.mlp_w1), params.mlp_b1))
    return T.add(T.matmul(hidden, params.mlp_w2), params.mlp_b2)


def compose_and_classify(params, c_l, r_l, ctx_mask, rsp_mask):
    """Second BiLSTM + masked max/mean pooling + tanh MLP; softmax pair."""
    return T.softmax(_compose_logits(params, c_l, r_l, ctx_mask, rsp_mask), axis=-1)


def forward_logits(params, ctx_ids, ctx_mask, rsp_ids, rsp_mask):
    c_s, r_s = encode_inputs(params, ctx_ids, ctx_mask, rsp_ids, rsp_mask)
    e = attention_scores(c_s, r_s)
    c_d, r_d = align_dual(e, c_s, r_s, ctx_mask, rsp_mask)
    if params.variant == "full":
        c_l, r_l = local_match(c_s, c_d, r_s, r_d, params)
    else:
        c_l, r_l = None, _match_side(r_s, r_d, params)
    return _compose_logits(params, c_l, r_l, ctx_mask, rsp_mask)


def forward_probs(params, ctx_ids, ctx_mask, rsp_ids, rsp_mask):
    return T.softmax(forward_logits(params, ctx_ids, ctx_mask, rsp_ids, rsp_mask), axis=-1)


# ---------------------------------------------------------------------------
# Candidate scoring
# ---------------------------------------------------------------------------


class ESIMModel:
    """Params plus everything needed to score raw token sequences."""

    def __init__(self, params, vocab, max_ctx, max_rsp,
                 ctx_direction="keep_tail", rsp_direction="keep_head",
                 chunk_size=64, workers=1):
        self.params = params
        self.vocab = vocab
        self.max_ctx = max_ctx
        self.max_rsp = max_rsp
        self.ctx_direction = ctx_direction
        self.rsp_direction = rsp_direction
        self.chunk_size = chunk_size
        self.workers = workers

    def named_parameters(self):
        return self.params.named_parameters()

    def logits(self, batch):
        return forward_logits(self.params, batch.context_ids, batch.context_mask,
                              batch.response_ids, batch.response_mask)

    def score_candidates(self, context_tokens, candidates):
        """Positive-class probability per candidate.

        The context is encoded once and reused across candidate chunks;
        chunk boundaries cannot change the scores beyond padding noise.
        """
        if not candidates:
            raise ContractError("score: empty candidate set")
        with T.no_grad():
            ctx_row, ctx_mask = _encode_single(context_tokens, self.vocab,
                                               self.max_ctx, self.ctx_direction)
            c_in = project(self.params.proj, T.gather_rows(self.params.embed, ctx_row))
            c_s1 = bilstm(self.params.lstm1_fwd, self.params.lstm1_bwd, c_in, ctx_mask)
        chunks = [candidates[i : i + self.chunk_size]
                  for i in range(0, len(candidates), self.chunk_size)]

        def run(chunk):
            with T.no_grad():
                return self._score_chunk(c_s1, ctx_mask, chunk)

        if self.workers > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                parts = list(pool.map(run, chunks))
        else:
            parts = [run(c) for c in chunks]
        return np.concatenate(parts)

    def _score_chunk(self, c_s1, ctx_mask1, chunk):
        rsp_ids, rsp_mask = encode_sentences(chunk, self.vocab, self.max_rsp,
                                             self.rsp_direction)
        b = len(chunk)
        c_s = T.tile_batch(c_s1, b)
        ctx_mask = np.repeat(ctx_mask1, b, axis=0)
        r_in = project(self.params.proj, T.gather_rows(self.params.embed, rsp_ids))
        r_s = bilstm(self.params.lstm1_fwd, self.params.lstm1_bwd, r_in, rsp_mask)
        e = attention_scores(c_s, r_s)
        c_d, r_d = align_dual(e, c_s, r_s, ctx_mask, rsp_mask)
        if self.params.variant == "full":
            c_l, r_l = local_match(c_s, c_d, r_s, r_d, self.params)
        else:
            c_l, r_l = None, _match_side(r_s, r_d, self.params)
        probs = compose_and_classify(self.params, c_l, r_l, ctx_mask, rsp_mask)
        return probs.data[:, 1].copy()

    def score_case(self, candidate_set):
        return self.score_candidates(concat_context(candidate_set.context_utterances),
                                     candidate_set.candidates)

    def score_cases(self, cases, batch_size=64):
        """Bulk scoring across candidate sets (flattened pair batches)."""
        pairs_ctx, pairs_rsp, owners = [], [], []
        for ci, cs in enumerate(cases):
            ctx = concat_context(cs.context_utterances)
            for cand in cs.candidates:
                pairs_ctx.append(ctx)
                pairs_rsp.append(cand)
                owners.append(ci)
        scores = np.zeros(len(pairs_ctx))
        with T.no_grad():
            for start in range(0, len(pairs_ctx), batch_size):
                stop = start + batch_size
                batch = encode_pair_batch(pairs_ctx[start:stop], pairs_rsp[start:stop],
                                          self.vocab, self.max_ctx, self.max_rsp,
                                          self.ctx_direction, self.rsp_direction)
                probs = forward_probs(self.params, batch.context_ids, batch.context_mask,
                                      batch.response_ids, batch.response_mask)
                scores[start:stop] = probs.data[:, 1]
        out = [[] for _ in cases]
        for owner, s in zip(owners, scores):
            out[owner].append(float(s))
        return [np.asarray(s) for s in out]


def _encode_single(tokens, vocab, max_len, direction):
    return encode_sentences([tokens], vocab, max_len, direction)
