"""End-to-end training: cross-entropy loss, Adam, epoch loop with dev-set
model selection, and the binary checkpoint format.

Checkpoint layout: magic "ESRS", little-endian u32 version, u64 manifest
length, UTF-8 JSON manifest (model kind, config echo, vocabulary, named
parameter shapes, optional optimizer state, dev-metric snapshot), then the
raw little-endian float32 payloads in manifest order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import rankeval
from . import tensor as T
from .datapipe import make_batches
from .embeddings import PAD_ID
from .errors import ContractError, FormatError, TrainingDivergedError
from .tensor import Tensor

MAGIC = b"ESRS"
VERSION = 1
PROB_FLOOR = 1e-12


@dataclass
class TrainConfig:
    learning_rate: float = 0.0004
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    precision: str = "float32"
    embeddings_trainable: bool = True
    max_ctx: int = 300
    max_rsp: int = 30
    ctx_direction: str = "keep_tail"
    rsp_direction: str = "keep_head"
    selection_metric: str = "mrr"
    eval_every: int = 1
    early_stop_train_acc: float | None = None
    grad_clip: float = 0.0  # 0 disables
    lr_decay: float = 1.0  # per-epoch multiplier; 1 disables

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractError("learning rate must be positive")
        if self.batch_size < 1:
            raise ContractError("batch size must be >= 1")


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def cross_entropy(prob_pair, labels):
    """Mean negative log-probability of the true class.

    Takes softmax outputs; the log argument is floored at 1e-12 so a
    saturated wrong prediction stays finite.
    """
    labels = np.asarray(labels)
    onehot = np.zeros(prob_pair.shape, dtype=prob_pair.dtype)
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    picked = T.sum_(T.mul(prob_pair, Tensor(onehot, dtype=prob_pair.dtype)), axis=-1)
    return T.neg(T.mean_(T.log(T.clamp_min(picked, PROB_FLOOR))))


def cross_entropy_from_logits(logits, labels):
    """Same loss computed in log space (the training path)."""
    labels = np.asarray(labels)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    picked = T.sum_(T.mul(T.log_softmax(logits, axis=-1), Tensor(onehot, dtype=logits.dtype)),
                    axis=-1)
    return T.neg(T.mean_(picked))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, named_params, lr):
    """Standard Adam update with bias correction, in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in named_params:
        if p.grad is None:
            raise ContractError(f"adam_step: trainable parameter {name} has no gradient")
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_gradients(named_params, max_norm):
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for _, p in named_params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad)))
    norm = np.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for _, p in named_params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    model_kind: str
    config: dict
    vocab: list[str]
    params: dict  # name -> float32 ndarray
    optimizer: dict | None = None  # {"t": int, "m": {...}, "v": {...}}
    dev_metric: dict | None = None


def save_checkpoint(ckpt, path):
    names = list(ckpt.params)
    entries = [{"name": n, "shape": list(ckpt.params[n].shape)} for n in names]
    manifest = {
        "model": ckpt.model_kind,
        "config": ckpt.config,
        "vocab": ckpt.vocab,
        "params": entries,
        "optimizer": None,
        "dev_metric": ckpt.dev_metric,
    }
    payload_parts = [np.ascontiguousarray(ckpt.params[n], dtype="<f4").tobytes() for n in names]
    if ckpt.optimizer is not None:
        manifest["optimizer"] = {"t": ckpt.optimizer["t"], "slots": names}
        for slot in ("m", "v"):
            payload_parts += [
                np.ascontiguousarray(ckpt.optimizer[slot][n], dtype="<f4").tobytes()
                for n in names
            ]
    blob = json.dumps(manifest, sort_keys=True, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for part in payload_parts:
            fh.write(part)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0 (expected {MAGIC!r})")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header at offset {len(raw)}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    (mlen,) = struct.unpack_from("<Q", raw, 8)
    if 16 + mlen > len(raw):
        raise FormatError(f"{path}: manifest overruns file at offset 16")
    try:
        manifest = json.loads(raw[16 : 16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: manifest unreadable at offset 16 ({exc})") from None
    offset = 16 + mlen
    params = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        params[entry["name"]], offset = _read_array(raw, offset, shape, path)
    optimizer = None
    if manifest.get("optimizer"):
        slots = manifest["optimizer"]["slots"]
        moments = {"m": {}, "v": {}}
        for slot in ("m", "v"):
            for name in slots:
                moments[slot][name], offset = _read_array(raw, offset, params[name].shape, path)
        optimizer = {"t": int(manifest["optimizer"]["t"]), **moments}
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes at offset {offset}")
    return Checkpoint(
        model_kind=manifest["model"],
        config=manifest["config"],
        vocab=list(manifest["vocab"]),
        params=params,
        optimizer=optimizer,
        dev_metric=manifest.get("dev_metric"),
    )


def _read_array(raw, offset, shape, path):
    count = int(np.prod(shape)) if shape else 1
    nbytes = count * 4
    if offset + nbytes > len(raw):
        raise FormatError(f"{path}: payload truncated at offset {offset}")
    arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
    return arr.copy(), offset + nbytes


def snapshot_params(named_params):
    return {name: np.asarray(p.data, dtype=np.float32).copy() for name, p in named_params}


def restore_params(named_params, arrays):
    for name, p in named_params:
        if name not in arrays:
            raise FormatError(f"checkpoint missing parameter {name}")
        if tuple(arrays[name].shape) != tuple(p.shape):
            raise FormatError(
                f"checkpoint parameter {name} has shape {arrays[name].shape}, "
                f"model expects {tuple(p.shape)}"
            )
        p.data = np.asarray(arrays[name], dtype=p.data.dtype).copy()


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def train(model, config, train_examples, dev_cases, vocab, config_echo=None, model_kind="esim"):
    """Optimize the model; return (best Checkpoint, per-epoch history).

    Model selection keeps the epoch with the best dev metric (MRR by
    default). With no dev cases, the final epoch wins. Deterministic
    under (data, config) including the shuffle order.
    """
    T.set_precision(config.precision)
    named = model.named_parameters()
    adam = AdamState()
    rng = np.random.default_rng(config.seed)
    history = []
    best = None
    best_value = -1.0
    lr = config.learning_rate
    embed = getattr(model.params, "embed", None)

    for epoch in range(1, config.epochs + 1):
        shuffle_seed = int(rng.integers(2**63))
        batches = make_batches(
            train_examples, config.batch_size, vocab, config.max_ctx, config.max_rsp,
            seed=shuffle_seed, ctx_direction=config.ctx_direction,
            rsp_direction=config.rsp_direction,
        )
        total_loss = 0.0
        total_correct = 0
        total_seen = 0
        for bi, batch in enumerate(batches):
            logits = model.logits(batch)
            loss = cross_entropy_from_logits(logits, batch.labels)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError("non-finite training loss", epoch, bi)
            T.backward(loss)
            if embed is not None and embed.requires_grad and embed.grad is not None:
                embed.grad[PAD_ID] = 0.0  # <pad> row stays frozen at zero
            if config.grad_clip > 0:
                clip_gradients(named, config.grad_clip)
            adam_step(adam, named, lr)
            for _, p in named:
                p.grad = None
            total_loss += value * len(batch)
            total_correct += int((logits.data.argmax(axis=-1) == batch.labels).sum())
            total_seen += len(batch)
        lr *= config.lr_decay

        row = {
            "epoch": epoch,
            "train_loss": total_loss / max(total_seen, 1),
            "train_accuracy": total_correct / max(total_seen, 1),
        }
        evaluate_now = dev_cases and config.eval_every and (
            epoch % config.eval_every == 0 or epoch == config.epochs
        )
        if evaluate_now:
            report = evaluate_on_cases(model, dev_cases)
            row.update({f"dev_{k}": v for k, v in report.items()})
            value = report[config.selection_metric]
            if value > best_value:
                best_value = value
                best = _make_checkpoint(model, config, vocab, named, adam, config_echo,
                                        model_kind, config.selection_metric, value)
        history.append(row)
        if (config.early_stop_train_acc is not None
                and row["train_accuracy"] >= config.early_stop_train_acc):
            break
    if best is None:
        best = _make_checkpoint(model, config, vocab, named, adam, config_echo,
                                model_kind, None, None)
    return best, history


def _make_checkpoint(model, config, vocab, named, adam, config_echo, model_kind,
                     metric_name, metric_value):
    dev_metric = None
    if metric_name is not None:
        dev_metric = {"name": metric_name, "value": metric_value}
    all_named = sorted(model.params.all_tensors().items())
    optimizer = None
    if adam.t > 0:
        trained = [n for n, _ in named]
        optimizer = {
            "t": adam.t,
            "m": {n: np.asarray(adam.m[n], dtype=np.float32).copy() for n in trained},
            "v": {n: np.asarray(adam.v[n], dtype=np.float32).copy() for n in trained},
        }
    return Checkpoint(
        model_kind=model_kind,
        config=dict(config_echo or {}),
        vocab=list(vocab.id_to_token),
        params=snapshot_params(all_named),
        optimizer=optimizer,
        dev_metric=dev_metric,
    )


def evaluate_on_cases(model, cases):
    """Rank each candidate set with the model and compute the metrics."""
    score_lists = model.score_cases(cases)
    rankings = [rankeval.rank(cs, s) for cs, s in zip(cases, score_lists)]
    correct = [cs.correct for cs in cases]
    return rankeval.report_metrics(rankings, correct)
