"""Pretrained word-embedding ingestion, vocabulary, and input projection.

Reads the whitespace-separated text format (headerless GloVe style, or
fastText style with a single "count dim" header line), concatenates any
number of tables per token, and projects the concatenation down to the
model width with a ReLU feed-forward layer.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, EmptyTableError
from .tensor import Tensor

PAD = "<pad>"
UNK = "<unk>"
EOU = "__eou__"
EOT = "__eot__"
SPECIALS = (PAD, UNK, EOU, EOT)
PAD_ID = 0
UNK_ID = 1


@dataclass
class EmbeddingTable:
    """One pretrained table: token -> row of a (|V|, dim) matrix."""

    dim: int
    index: dict[str, int]
    matrix: np.ndarray

    def __contains__(self, token):
        return token in self.index

    def row(self, token):
        return self.matrix[self.index[token]]

    def __len__(self):
        return len(self.index)


def parse_embedding_file(path, expected_dim=None):
    """Parse a text embedding file.

    Returns (EmbeddingTable, skipped_count). Duplicate tokens keep their
    first row; lines whose float count disagrees with the table dimension
    are skipped and counted. A first line of exactly two integers is
    treated as a fastText "count dim" header.
    """
    tokens = []
    index = {}
    rows = []
    dim = expected_dim
    skipped = 0
    with open(path, "r", encoding="utf-8", newline=None) as fh:
        for lineno, line in enumerate(fh):
            parts = line.rstrip("\r\n").split()
            if not parts:
                continue
            if lineno == 0 and len(parts) == 2 and _all_ints(parts):
                continue  # header line
            token, fields = parts[0], parts[1:]
            try:
                vec = [float(v) for v in fields]
            except ValueError:
                skipped += 1
                continue
            if dim is None:
                if not vec:
                    skipped += 1
                    continue
                dim = len(vec)
            if len(vec) != dim:
                skipped += 1
                continue
            if token in index:
                skipped += 1
                continue
            index[token] = len(tokens)
            tokens.append(token)
            rows.append(vec)
    if not rows:
        raise EmptyTableError(f"no well-formed embedding rows in {path}")
    matrix = np.asarray(rows, dtype=np.float64)
    if expected_dim is not None and matrix.shape[1] != expected_dim:
        raise DimensionError(
            f"{path}: expected dim {expected_dim}, file has {matrix.shape[1]}"
        )
    return EmbeddingTable(dim=int(matrix.shape[1]), index=index, matrix=matrix), skipped


def _all_ints(parts):
    try:
        [int(p) for p in parts]
        return True
    except ValueError:
        return False


def write_embedding_file(table, path):
    """Inverse of parse_embedding_file (headerless, 6 decimal places)."""
    order = sorted(table.index, key=table.index.get)
    with open(path, "w", encoding="utf-8") as fh:
        for token in order:
            vals = " ".join(f"{v:.6f}" for v in table.row(token))
            fh.write(f"{token} {vals}\n")


def _token_rng(seed, token):
    digest = hashlib.sha256(f"{seed}:{token}".encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


@dataclass
class EmbeddingSet:
    """Ordered embedding tables looked up jointly per token.

    oov_policy: "random" draws a per-token seeded uniform vector in
    [-0.1, 0.1] (distinct OOV tokens stay distinguishable), "zeros"
    returns zero vectors. Special tokens always get seeded-random rows
    except <pad>, which is all-zero.
    """

    tables: list[EmbeddingTable]
    oov_policy: str = "random"
    trainable: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.tables:
            raise ContractError("EmbeddingSet needs at least one table")
        if self.oov_policy not in ("random", "zeros"):
            raise ContractError(f"unknown OOV policy {self.oov_policy!r}")

    @property
    def dim(self):
        return sum(t.dim for t in self.tables)

    def lookup_concat(self, token):
        """Concatenated per-table vectors, in table order; length == dim."""
        if token == PAD:
            return np.zeros(self.dim)
        parts = []
        for i, table in enumerate(self.tables):
            if token in table and token not in SPECIALS:
                parts.append(np.asarray(table.row(token), dtype=np.float64))
            elif self.oov_policy == "zeros" and token not in SPECIALS:
                parts.append(np.zeros(table.dim))
            else:
                rng = _token_rng(self.seed, f"{i}:{token}")
                parts.append(rng.uniform(-0.1, 0.1, size=table.dim))
        return np.concatenate(parts)

    def build_matrix(self, vocab):
        """Materialize one row per vocab id, in id order."""
        return np.stack([self.lookup_concat(tok) for tok in vocab.id_to_token])


def random_embedding_set(dim, seed=0, trainable=True):
    """An EmbeddingSet with an empty table: every token resolves by the
    seeded-random policy. Used when no pretrained file is configured."""
    table = EmbeddingTable(dim=dim, index={}, matrix=np.zeros((0, dim)))
    return EmbeddingSet(tables=[table], oov_policy="random", trainable=trainable, seed=seed)


@dataclass
class Vocab:
    """Token <-> id map with the reserved specials at fixed ids."""

    id_to_token: list[str] = field(default_factory=lambda: list(SPECIALS))
    token_to_id: dict[str, int] = None

    def __post_init__(self):
        if self.token_to_id is None:
            self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    def id(self, token):
        return self.token_to_id.get(token, UNK_ID)

    def ids(self, tokens):
        get = self.token_to_id.get
        return [get(t, UNK_ID) for t in tokens]

    def decode(self, ids):
        return [self.id_to_token[i] for i in ids]


def build_vocab(token_iterables, max_size=None):
    """Count tokens across corpora and keep the most frequent.

    Ties break by token string so the result is deterministic. max_size
    counts the four reserved specials.
    """
    counts = {}
    for tokens in token_iterables:
        for tok in tokens:
            counts[tok] = counts.get(tok, 0) + 1
    for special in SPECIALS:
        counts.pop(special, None)
    ranked = sorted(counts, key=lambda t: (-counts[t], t))
    if max_size is not None:
        ranked = ranked[: max(0, max_size - len(SPECIALS))]
    return Vocab(id_to_token=list(SPECIALS) + ranked)


@dataclass
class Projection:
    """ReLU feed-forward layer reducing the concatenated embedding width."""

    weight: Tensor  # (in_dim, out_dim)
    bias: Tensor  # (out_dim,)

    @property
    def out_dim(self):
        return self.weight.shape[1]


def init_projection(rng, in_dim, out_dim, dtype=None):
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    weight = rng.uniform(-limit, limit, size=(in_dim, out_dim))
    return Projection(
        weight=Tensor(weight, requires_grad=True, dtype=dtype),
        bias=Tensor(np.zeros(out_dim), requires_grad=True, dtype=dtype),
    )


def project(proj, x):
    """ReLU(x @ W + b) applied along the last axis."""
    if x.shape[-1] != proj.weight.shape[0]:
        raise DimensionError(
            f"project: input width {x.shape} vs weight {proj.weight.shape}"
        )
    return T.relu(T.add(T.matmul(x, proj.weight), proj.bias))
