"""Dialogue corpus handling: augmentation, negative sampling, special-token
concatenation, directional truncation, batching, and a synthetic corpus
generator for desk-scale experiments.

On-disk formats are JSON Lines. Dialogue records:
    {"id": ..., "utterances": [{"speaker": ..., "tokens": [...]}, ...]}
Candidate-set records:
    {"id": ..., "context": [utterance objects], "candidates": [[tokens]...],
     "correct": [indices]}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .embeddings import EOT, EOU, PAD_ID
from .errors import ContractError, InsufficientPoolError, ParseError


@dataclass
class Utterance:
    speaker: str
    tokens: list[str]


@dataclass
class Dialogue:
    id: str
    utterances: list[Utterance]


@dataclass
class Example:
    """One (context, response, label) unit; group ties negatives to their
    positive. Context may still be utterance-structured (before concat)."""

    context: list[str]
    response: list[str]
    label: int
    group: str


@dataclass
class PendingExample:
    """augment/sample output: context not yet concatenated."""

    context_utterances: list[Utterance]
    response: list[str]
    label: int
    group: str


@dataclass
class CandidateSet:
    id: str
    context_utterances: list[Utterance]
    candidates: list[list[str]]
    correct: list[int]


@dataclass
class Batch:
    """Padded id matrices with 1/0 masks; content is left-aligned."""

    context_ids: np.ndarray  # (B, m_max) int
    context_mask: np.ndarray  # (B, m_max) float
    response_ids: np.ndarray
    response_mask: np.ndarray
    labels: np.ndarray  # (B,) int
    context_lengths: np.ndarray
    response_lengths: np.ndarray

    def __len__(self):
        return self.labels.shape[0]


# ---------------------------------------------------------------------------
# Corpus construction
# ---------------------------------------------------------------------------


def augment(dialogue):
    """Each utterance from the second one onward becomes a positive
    response, with everything before it as context; a dialogue of length
    L yields L-1 positives."""
    if len(dialogue.utterances) < 2:
        raise ContractError(f"dialogue {dialogue.id} has fewer than 2 utterances")
    out = []
    for t in range(1, len(dialogue.utterances)):
        out.append(
            PendingExample(
                context_utterances=dialogue.utterances[:t],
                response=list(dialogue.utterances[t].tokens),
                label=1,
                group=f"{dialogue.id}:{t}",
            )
        )
    return out


def sample_negatives(positives, pool, ratio, seed):
    """Draw label-0 responses for each positive from the shared pool.

    Each positive gets floor(ratio) negatives plus one more with
    probability frac(ratio), sampled without replacement and never equal
    to the positive's own response. Deterministic under seed.
    """
    if ratio < 1:
        raise ContractError(f"negative ratio must be >= 1, got {ratio}")
    rng = np.random.default_rng(seed)
    whole = int(math.floor(ratio))
    frac = ratio - whole
    out = []
    for pos in positives:
        n = whole + (1 if frac > 0 and rng.random() < frac else 0)
        eligible = [i for i, resp in enumerate(pool) if resp != pos.response]
        if len(eligible) < n:
            raise InsufficientPoolError(
                f"pool of {len(eligible)} eligible responses cannot supply {n} negatives"
            )
        picks = rng.choice(len(eligible), size=n, replace=False)
        for k in sorted(picks):
            out.append(
                PendingExample(
                    context_utterances=pos.context_utterances,
                    response=list(pool[eligible[k]]),
                    label=0,
                    group=pos.group,
                )
            )
    return out


def concat_context(utterances):
    """Flatten utterances into one token sequence.

    __eou__ follows every utterance; __eot__ additionally follows the last
    utterance of each maximal same-speaker run (including the final one).
    """
    if not utterances:
        raise ContractError("concat_context: empty utterance list")
    out = []
    for i, utt in enumerate(utterances):
        out.extend(utt.tokens)
        out.append(EOU)
        last_of_run = i + 1 == len(utterances) or utterances[i + 1].speaker != utt.speaker
        if last_of_run:
            out.append(EOT)
    return out


def finalize_examples(pending):
    """Concatenate contexts, producing flat Examples."""
    return [
        Example(
            context=concat_context(p.context_utterances),
            response=p.response,
            label=p.label,
            group=p.group,
        )
        for p in pending
    ]


def truncate(tokens, max_len, direction):
    """keep_tail keeps the final max_len tokens; keep_head the first."""
    if max_len < 1:
        raise ContractError(f"max_len must be >= 1, got {max_len}")
    if len(tokens) <= max_len:
        return list(tokens)
    if direction == "keep_tail":
        return list(tokens[-max_len:])
    if direction == "keep_head":
        return list(tokens[:max_len])
    raise ContractError(f"unknown truncation direction {direction!r}")


def make_batches(
    examples,
    batch_size,
    vocab,
    max_ctx,
    max_rsp,
    seed,
    ctx_direction="keep_tail",
    rsp_direction="keep_head",
    shuffle=True,
):
    """Shuffle, truncate, id-map, and pad examples into batches.

    Padding goes to each batch's own maxima, not global ones. Every
    example appears exactly once.
    """
    order = np.arange(len(examples))
    if shuffle:
        np.random.default_rng(seed).shuffle(order)
    batches = []
    for start in range(0, len(examples), batch_size):
        chunk = [examples[i] for i in order[start : start + batch_size]]
        ctxs = [truncate(e.context, max_ctx, ctx_direction) for e in chunk]
        rsps = [truncate(e.response, max_rsp, rsp_direction) for e in chunk]
        batches.append(
            _pad_batch(
                [vocab.ids(c) for c in ctxs],
                [vocab.ids(r) for r in rsps],
                [e.label for e in chunk],
            )
        )
    return batches


def _pad_batch(ctx_ids, rsp_ids, labels):
    return Batch(
        context_ids=_pad_matrix(ctx_ids),
        context_mask=_mask_matrix(ctx_ids),
        response_ids=_pad_matrix(rsp_ids),
        response_mask=_mask_matrix(rsp_ids),
        labels=np.asarray(labels, dtype=np.int64),
        context_lengths=np.asarray([len(r) for r in ctx_ids], dtype=np.int64),
        response_lengths=np.asarray([len(r) for r in rsp_ids], dtype=np.int64),
    )


def _pad_matrix(rows, width=None):
    width = width or max(len(r) for r in rows)
    out = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def _mask_matrix(rows, width=None):
    width = width or max(len(r) for r in rows)
    out = np.zeros((len(rows), width), dtype=np.float64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = 1.0
    return out


def encode_pair_batch(context_tokens_list, response_tokens_list, vocab, max_ctx, max_rsp,
                      ctx_direction="keep_tail", rsp_direction="keep_head"):
    """Batch already-flattened (context, response) token pairs for scoring."""
    ctxs = [vocab.ids(truncate(c, max_ctx, ctx_direction)) for c in context_tokens_list]
    rsps = [vocab.ids(truncate(r, max_rsp, rsp_direction)) for r in response_tokens_list]
    return _pad_batch(ctxs, rsps, [0] * len(ctxs))


def encode_sentences(token_lists, vocab, max_len, direction="keep_head"):
    """Id-map and pad standalone sentences; returns (ids, mask)."""
    rows = [vocab.ids(truncate(t, max_len, direction)) for t in token_lists]
    return _pad_matrix(rows), _mask_matrix(rows)


# ---------------------------------------------------------------------------
# JSON Lines I/O
# ---------------------------------------------------------------------------


def _jsonl_records(path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", line=lineno) from None


def _write_jsonl(path, records):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")


def load_dialogues(path):
    out = []
    for lineno, rec in _jsonl_records(path):
        try:
            utts = [Utterance(speaker=str(u["speaker"]), tokens=list(u["tokens"]))
                    for u in rec["utterances"]]
            out.append(Dialogue(id=str(rec["id"]), utterances=utts))
        except (KeyError, TypeError) as exc:
            raise ParseError(f"bad dialogue record ({exc!r})", line=lineno) from None
    return out


def save_dialogues(dialogues, path):
    _write_jsonl(path, (
        {
            "id": d.id,
            "utterances": [{"speaker": u.speaker, "tokens": u.tokens} for u in d.utterances],
        }
        for d in dialogues
    ))


def load_candidate_sets(path):
    out = []
    for lineno, rec in _jsonl_records(path):
        try:
            ctx = [Utterance(speaker=str(u["speaker"]), tokens=list(u["tokens"]))
                   for u in rec["context"]]
            out.append(
                CandidateSet(
                    id=str(rec["id"]),
                    context_utterances=ctx,
                    candidates=[list(c) for c in rec["candidates"]],
                    correct=[int(i) for i in rec.get("correct", [])],
                )
            )
        except (KeyError, TypeError) as exc:
            raise ParseError(f"bad candidate record ({exc!r})", line=lineno) from None
    return out


def save_candidate_sets(sets, path):
    _write_jsonl(path, (
        {
            "id": cs.id,
            "context": [{"speaker": u.speaker, "tokens": u.tokens} for u in cs.context_utterances],
            "candidates": cs.candidates,
            "correct": cs.correct,
        }
        for cs in sets
    ))


def load_examples(path):
    out = []
    for lineno, rec in _jsonl_records(path):
        try:
            out.append(Example(context=list(rec["context"]), response=list(rec["response"]),
                               label=int(rec["label"]), group=str(rec["group"])))
        except (KeyError, TypeError) as exc:
            raise ParseError(f"bad example record ({exc!r})", line=lineno) from None
    return out


def save_examples(examples, path):
    _write_jsonl(path, (
        {"context": e.context, "response": e.response, "label": e.label, "group": e.group}
        for e in examples
    ))


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    """Keyword-linked corpus: the correct next utterance shares a planted
    keyword with its context; distractors never do."""

    dialogues: int = 32
    dev_dialogues: int = 8
    test_dialogues: int = 16
    eval_cases: int = 32
    candidates: int = 10
    vocab_size: int = 50  # filler word pool
    keywords: int = 16
    turns_min: int = 3
    turns_max: int = 5
    utterance_min: int = 3
    utterance_max: int = 7
    keyword_strength: float = 1.0  # chance a context utterance carries the keyword
    none_rate: float = 0.0  # fraction of eval cases with no correct candidate


@dataclass
class SynthCorpus:
    train: list[Dialogue]
    dev: list[Dialogue]
    test: list[Dialogue]
    dev_cases: list[CandidateSet] = field(default_factory=list)
    test_cases: list[CandidateSet] = field(default_factory=list)


def generate_synthetic_corpus(config, seed):
    """Deterministic keyword-linked corpus with eval candidate sets."""
    rng = np.random.default_rng(seed)
    fillers = [f"w{i:03d}" for i in range(config.vocab_size)]
    keywords = [f"kw{i:03d}" for i in range(config.keywords)]

    def make_dialogue(split, idx):
        kw = keywords[int(rng.integers(len(keywords)))]
        n_turns = int(rng.integers(config.turns_min, config.turns_max + 1))
        utts = []
        for t in range(n_turns):
            length = int(rng.integers(config.utterance_min, config.utterance_max + 1))
            tokens = [fillers[int(rng.integers(len(fillers)))] for _ in range(length)]
            # Utterances after the first (the potential responses) always
            # carry the keyword; the opener carries it with keyword_strength.
            if t > 0 or rng.random() < config.keyword_strength:
                tokens[int(rng.integers(length))] = kw
            utts.append(Utterance(speaker="A" if t % 2 == 0 else "B", tokens=tokens))
        return Dialogue(id=f"{split}-{idx:04d}", utterances=utts), kw

    def make_split(split, count):
        pairs = [make_dialogue(split, i) for i in range(count)]
        return [d for d, _ in pairs], [k for _, k in pairs]

    train, _ = make_split("train", config.dialogues)
    dev, dev_kws = make_split("dev", config.dev_dialogues)
    test, test_kws = make_split("test", config.test_dialogues)

    # Distractor pool: (dialogue keyword, utterance tokens) over all splits.
    pool = []
    for d in train + dev + test:
        kw = next((t for u in d.utterances for t in u.tokens if t.startswith("kw")), None)
        for u in d.utterances:
            pool.append((kw, list(u.tokens)))

    def make_cases(split, dialogues, kws, count, start_rng):
        cases = []
        for i in range(count):
            di = int(start_rng.integers(len(dialogues)))
            d, kw = dialogues[di], kws[di]
            cut = int(start_rng.integers(1, len(d.utterances)))
            context = d.utterances[:cut]
            correct_resp = list(d.utterances[cut].tokens)
            wants_none = start_rng.random() < config.none_rate
            distractors = []
            guard = 0
            n_distract = config.candidates if wants_none else config.candidates - 1
            while len(distractors) < n_distract:
                kw2, tokens = pool[int(start_rng.integers(len(pool)))]
                guard += 1
                if guard > 10000:
                    raise ContractError("synthetic generator cannot find distractors")
                if kw2 == kw or kw in tokens:
                    continue
                distractors.append(tokens)
            if wants_none:
                candidates = distractors
                correct = []
            else:
                slot = int(start_rng.integers(config.candidates))
                candidates = distractors[:slot] + [correct_resp] + distractors[slot:]
                correct = [slot]
            cases.append(
                CandidateSet(
                    id=f"{split}-case-{i:04d}",
                    context_utterances=context,
                    candidates=candidates,
                    correct=correct,
                )
            )
        return cases

    dev_cases = make_cases("dev", dev, dev_kws, max(4, config.eval_cases // 4), rng)
    test_cases = make_cases("test", test, test_kws, config.eval_cases, rng)
    return SynthCorpus(train=train, dev=dev, test=test, dev_cases=dev_cases, test_cases=test_cases)


def corpus_response_pool(dialogues):
    """All augmentation responses, in corpus order (negative-sampling pool)."""
    pool = []
    for d in dialogues:
        for u in d.utterances[1:]:
            pool.append(list(u.tokens))
    return pool


def prepare_examples(dialogues, ratio, seed):
    """augment + sample_negatives + concat for a whole corpus.

    Returns (examples, stats) where stats reports counts and the achieved
    negative ratio.
    """
    positives = []
    for d in dialogues:
        positives.extend(augment(d))
    pool = corpus_response_pool(dialogues)
    negatives = sample_negatives(positives, pool, ratio, seed)
    examples = finalize_examples(positives + negatives)
    stats = {
        "positives": len(positives),
        "negatives": len(negatives),
        "total": len(examples),
        "ratio_achieved": (len(negatives) / len(positives)) if positives else 0.0,
    }
    return examples, stats
