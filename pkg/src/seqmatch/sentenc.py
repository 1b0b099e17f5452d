"""Siamese sentence encoder for cheap large-pool retrieval.

One shared BiLSTM encodes both sentences of a pair. Multi-head
self-attention pooling turns the variable-length states into a fixed
vector per head (weights normalized over the token axis), the heads are
flattened, and an MLP with ReLU hidden layers and input-concatenation
shortcuts classifies the pair from [v_c; v_r; |v_c - v_r|; v_c * v_r].

Pool-side encodings are cached per sentence so a whole retrieval run
encodes each pool sentence once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .datapipe import concat_context, encode_sentences
from .embeddings import Projection, init_projection, project
from .errors import ContractError, DimensionError
from .rnn import LstmCellParams, bilstm, glorot, init_lstm_params
from .tensor import Tensor


@dataclass
class SentEncParams:
    """Shared encoder, attention-pooling weights, shortcut MLP."""

    embed: Tensor
    proj: Projection
    lstm_fwd: LstmCellParams
    lstm_bwd: LstmCellParams
    att_w1: Tensor  # (d_a, 2h)
    att_b1: Tensor  # (d_a,)
    att_w2: Tensor  # (d_m, d_a)
    att_b2: Tensor  # (d_m,)
    mlp_w1: Tensor  # (4v, H) where v = 2h * d_m
    mlp_b1: Tensor
    mlp_w2: Tensor  # (4v + H, H)
    mlp_b2: Tensor
    out_w: Tensor  # (4v + 2H, 2)
    out_b: Tensor

    @property
    def hidden(self):
        return self.lstm_fwd.hidden_size

    @property
    def heads(self):
        return self.att_w2.shape[0]

    @property
    def sentence_dim(self):
        return 2 * self.hidden * self.heads

    def named_parameters(self):
        out = [("embed", self.embed)] if self.embed.requires_grad else []
        out += [
            ("proj.weight", self.proj.weight),
            ("proj.bias", self.proj.bias),
            ("lstm_fwd.w_ih", self.lstm_fwd.w_ih),
            ("lstm_fwd.w_hh", self.lstm_fwd.w_hh),
            ("lstm_fwd.bias", self.lstm_fwd.bias),
            ("lstm_bwd.w_ih", self.lstm_bwd.w_ih),
            ("lstm_bwd.w_hh", self.lstm_bwd.w_hh),
            ("lstm_bwd.bias", self.lstm_bwd.bias),
            ("att.w1", self.att_w1),
            ("att.b1", self.att_b1),
            ("att.w2", self.att_w2),
            ("att.b2", self.att_b2),
            ("mlp.w1", self.mlp_w1),
            ("mlp.b1", self.mlp_b1),
            ("mlp.w2", self.mlp_w2),
            ("mlp.b2", self.mlp_b2),
            ("out.w", self.out_w),
            ("out.b", self.out_b),
        ]
        return out

    def all_tensors(self):
        named = dict(self.named_parameters())
        named.setdefault("embed", self.embed)
        return named


def init_sentenc_params(rng, embed_matrix, hidden, heads=4, attn_dim=None,
                        mlp_hidden=None, embed_trainable=True, dtype=None):
    """attn_dim defaults to 2h; mlp_hidden defaults to the BiLSTM hidden."""
    attn_dim = attn_dim or 2 * hidden
    mlp_hidden = mlp_hidden or hidden
    embed = Tensor(embed_matrix, requires_grad=embed_trainable, dtype=dtype)
    v = 2 * hidden * heads
    return SentEncParams(
        embed=embed,
        proj=init_projection(rng, embed.shape[1], hidden, dtype),
        lstm_fwd=init_lstm_params(rng, hidden, hidden, dtype),
        lstm_bwd=init_lstm_params(rng, hidden, hidden, dtype),
        att_w1=glorot(rng, attn_dim, 2 * hidden, dtype),
        att_b1=Tensor(np.zeros(attn_dim), requires_grad=True, dtype=dtype),
        att_w2=glorot(rng, heads, attn_dim, dtype),
        att_b2=Tensor(np.zeros(heads), requires_grad=True, dtype=dtype),
        mlp_w1=_linear(rng, 4 * v, mlp_hidden, dtype),
        mlp_b1=Tensor(np.zeros(mlp_hidden), requires_grad=True, dtype=dtype),
        mlp_w2=_linear(rng, 4 * v + mlp_hidden, mlp_hidden, dtype),
        mlp_b2=Tensor(np.zeros(mlp_hidden), requires_grad=True, dtype=dtype),
        out_w=_linear(rng, 4 * v + 2 * mlp_hidden, 2, dtype),
        out_b=Tensor(np.zeros(2), requires_grad=True, dtype=dtype),
    )


def _linear(rng, fan_in, fan_out, dtype):
    w = glorot(rng, fan_out, fan_in, dtype)
    return Tensor(w.data.T.copy(), requires_grad=True, dtype=dtype)


def encode_sentence(params, ids, mask):
    """Fixed-length sentence vector: (B, T) ids -> (B, 2h * d_m).

    Per head, attention weights are a masked softmax over the token axis;
    the head vectors are weighted sums of the BiLSTM states, flattened in
    head order.
    """
    ids = np.asarray(ids)
    mask = np.asarray(mask)
    if ids.ndim != 2 or mask.shape != ids.shape:
        raise DimensionError(f"encode_sentence: ids {ids.shape} vs mask {mask.shape}")
    x = project(params.proj, T.gather_rows(params.embed, ids))
    h = bilstm(params.lstm_fwd, params.lstm_bwd, x, mask)  # (B, T, 2h)
    pre = T.relu(T.add(T.matmul(h, T.swapaxes(params.att_w1, 0, 1)), params.att_b1))
    scores = T.add(T.matmul(pre, T.swapaxes(params.att_w2, 0, 1)), params.att_b2)
    att = T.masked_softmax(scores, mask[:, :, None], axis=-2)  # (B, T, d_m)
    heads = T.matmul(T.swapaxes(att, -1, -2), h)  # (B, d_m, 2h)
    return T.reshape(heads, (ids.shape[0], params.sentence_dim))


def _classify_logits(params, v_c, v_r):
    if v_c.shape != v_r.shape:
        raise DimensionError(f"classify_pair: {v_c.shape} vs {v_r.shape}")
    x = T.concat([v_c, v_r, T.absolute(T.sub(v_c, v_r)), T.mul(v_c, v_r)], axis=-1)
    h1 = T.relu(T.add(T.matmul(x, params.mlp_w1), params.mlp_b1))
    i2 = T.concat([x, h1], axis=-1)  # shortcut: layer input rides along
    h2 = T.relu(T.add(T.matmul(i2, params.mlp_w2), params.mlp_b2))
    i3 = T.concat([i2, h2], axis=-1)
    return T.add(T.matmul(i3, params.out_w), params.out_b)


def classify_pair(params, v_c, v_r):
    """Softmax pair over [v_c; v_r; |v_c - v_r|; v_c * v_r]."""
    return T.softmax(_classify_logits(params, v_c, v_r), axis=-1)


def retrieve_topk(model, context_tokens, pool, k):
    """Rank the whole pool against one context; return top-k (index, score).

    The context is encoded once; pool sentences are encoded and scored
    once per distinct token sequence (duplicates share their score), so
    ties break by ascending pool index.
    """
    if not pool:
        raise ContractError("retrieve_topk: empty pool")
    if k > len(pool):
        raise ContractError(f"retrieve_topk: k={k} exceeds pool size {len(pool)}")
    scores = model.score_pool(context_tokens, pool)
    order = sorted(range(len(pool)), key=lambda i: (-scores[i], i))
    return [(i, float(scores[i])) for i in order[:k]]


class SentEncModel:
    """Params plus tokenization limits, with a per-instance encoding cache."""

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
        self._vector_cache = {}

    def named_parameters(self):
        return self.params.named_parameters()

    def logits(self, batch):
        v_c = encode_sentence(self.params, batch.context_ids, batch.context_mask)
        v_r = encode_sentence(self.params, batch.response_ids, batch.response_mask)
        return _classify_logits(self.params, v_c, v_r)

    def encode_tokens(self, token_lists, max_len, direction):
        ids, mask = encode_sentences(token_lists, self.vocab, max_len, direction)
        with T.no_grad():
            return encode_sentence(self.params, ids, mask).data

    def encode_pool(self, pool):
        """Vectors for every pool entry, cached by token content."""
        missing, queued = [], set()
        for tokens in pool:
            key = tuple(tokens)
            if key not in self._vector_cache and key not in queued:
                missing.append(tokens)
                queued.add(key)
        for start in range(0, len(missing), self.chunk_size):
            chunk = missing[start : start + self.chunk_size]
            vecs = self.encode_tokens(chunk, self.max_rsp, self.rsp_direction)
            for tokens, vec in zip(chunk, vecs):
                self._vector_cache[tuple(tokens)] = vec
        return np.stack([self._vector_cache[tuple(t)] for t in pool])

    def score_pool(self, context_tokens, pool):
        """Pair probability for the context against every pool sentence.

        Duplicate sentences are scored once and share the value exactly.
        """
        ctx_vec = self.encode_tokens([context_tokens], self.max_ctx, self.ctx_direction)[0]
        pool_vecs = self.encode_pool(pool)
        distinct = {}
        for i, tokens in enumerate(pool):
            distinct.setdefault(tuple(tokens), i)
        keys = list(distinct)
        scores_by_key = {}
        with T.no_grad():
            for start in range(0, len(keys), self.chunk_size):
                chunk = keys[start : start + self.chunk_size]
                vr = np.stack([pool_vecs[distinct[kk]] for kk in chunk])
                vc = np.repeat(ctx_vec[None, :], len(chunk), axis=0)
                probs = classify_pair(self.params, Tensor(vc), Tensor(vr))
                for kk, p in zip(chunk, probs.data[:, 1]):
                    scores_by_key[kk] = float(p)
        return np.asarray([scores_by_key[tuple(t)] for t in pool])

    def score_cases(self, cases, batch_size=64):
        """Per-case candidate scores (same contract as the ESIM scorer)."""
        out = []
        for cs in cases:
            ctx = concat_context(cs.context_utterances)
            out.append(self.score_pool(ctx, cs.candidates))
        return out

    def retrieve(self, context_tokens, pool, k):
        return retrieve_topk(self, context_tokens, pool, k)
