"""Candidate ranking, Recall@k / MRR / MAP, threshold selection for pools
that may lack a correct answer, score-table ensembling, and the two-stage
retrieve-then-rerank pipeline.

Score tables travel as TSV (context_id, candidate_index, score), sorted,
LF-terminated, so independently trained runs can be ensembled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ParseError

THRESHOLD_GRID = [round(0.50 + 0.01 * i, 2) for i in range(50)]


@dataclass
class Ranking:
    """Candidate indices best-first with their scores.

    none_at_top inserts a virtual NONE answer at rank 1 (every real
    candidate shifts down one rank); it is the correct answer exactly for
    cases whose correct set is empty.
    """

    context_id: str
    order: list[int]
    scores: list[float]
    none_at_top: bool = False


def rank(candidate_set, scores):
    """Descending stable sort; ties break by ascending candidate index."""
    scores = np.asarray(scores, dtype=float)
    if scores.shape[0] != len(candidate_set.candidates):
        raise ContractError(
            f"rank: {scores.shape[0]} scores for {len(candidate_set.candidates)} candidates"
        )
    order = sorted(range(scores.shape[0]), key=lambda i: (-scores[i], i))
    return Ranking(
        context_id=candidate_set.id,
        order=order,
        scores=[float(scores[i]) for i in order],
    )


def _first_correct_rank(ranking, correct):
    """1-based rank of the first correct answer, honoring the NONE rule."""
    correct = set(correct)
    shift = 1 if ranking.none_at_top else 0
    if ranking.none_at_top and not correct:
        return 1
    for pos, idx in enumerate(ranking.order):
        if idx in correct:
            return pos + 1 + shift
    return None


def recall_at_k(rankings, correct_sets, k):
    """Fraction of cases with a correct answer in the top k."""
    if k < 1:
        raise ContractError(f"recall_at_k: k must be >= 1, got {k}")
    hits = 0
    for ranking, correct in zip(rankings, correct_sets):
        rank_ = _first_correct_rank(ranking, correct)
        if rank_ is not None and rank_ <= k:
            hits += 1
    return hits / len(rankings) if rankings else 0.0


def mrr(rankings, correct_sets):
    """Mean reciprocal rank of the first correct answer (0 when absent)."""
    total = 0.0
    for ranking, correct in zip(rankings, correct_sets):
        rank_ = _first_correct_rank(ranking, correct)
        if rank_ is not None:
            total += 1.0 / rank_
    return total / len(rankings) if rankings else 0.0


def mean_average_precision(rankings, correct_sets):
    """Mean over cases of average precision across their correct answers."""
    total = 0.0
    for ranking, correct in zip(rankings, correct_sets):
        correct = set(correct)
        shift = 1 if ranking.none_at_top else 0
        if ranking.none_at_top and not correct:
            total += 1.0  # the NONE verdict is the single correct answer
            continue
        found = 0
        precisions = []
        for pos, idx in enumerate(ranking.order):
            if idx in correct:
                found += 1
                precisions.append(found / (pos + 1 + shift))
        if precisions:
            total += sum(precisions) / len(precisions)
    return total / len(rankings) if rankings else 0.0


def report_metrics(rankings, correct_sets, threshold=None):
    """All metrics in one dict (the EvalReport payload)."""
    report = {
        "cases": len(rankings),
        "recall@1": recall_at_k(rankings, correct_sets, 1),
        "recall@10": recall_at_k(rankings, correct_sets, 10),
        "recall@50": recall_at_k(rankings, correct_sets, 50),
        "mrr": mrr(rankings, correct_sets),
        "map": mean_average_precision(rankings, correct_sets),
    }
    if threshold is not None:
        report["threshold"] = threshold
    return report


# ---------------------------------------------------------------------------
# NONE-verdict thresholding
# ---------------------------------------------------------------------------


def apply_threshold(ranking, theta):
    """NONE goes to rank 1 when the top score falls below theta."""
    none = bool(ranking.scores and ranking.scores[0] < theta)
    return Ranking(
        context_id=ranking.context_id,
        order=list(ranking.order),
        scores=list(ranking.scores),
        none_at_top=none,
    )


def select_threshold(rankings, correct_sets, metric=None):
    """Grid-search theta in {0.50 ... 0.99} maximizing (R@1 + MRR)/2 on the
    given cases; ties return the smallest theta."""
    if not rankings:
        raise ContractError("select_threshold: no dev cases")
    if metric is None:
        def metric(rs, cs):
            return 0.5 * (recall_at_k(rs, cs, 1) + mrr(rs, cs))
    best_theta, best_value = None, -1.0
    for theta in THRESHOLD_GRID:
        thresholded = [apply_threshold(r, theta) for r in rankings]
        value = metric(thresholded, correct_sets)
        if value > best_value:
            best_theta, best_value = theta, value
    return best_theta


# ---------------------------------------------------------------------------
# Score tables and ensembling
# ---------------------------------------------------------------------------


def save_score_table(table, path):
    """table: context_id -> list of per-candidate scores."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ctx_id in sorted(table):
            for idx, score in enumerate(table[ctx_id]):
                fh.write(f"{ctx_id}\t{idx}\t{float(score)!r}\n")


def load_score_table(path):
    rows = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise ParseError("score table rows need 3 tab-separated fields", line=lineno)
            ctx_id, idx, score = parts
            try:
                rows.setdefault(ctx_id, {})[int(idx)] = float(score)
            except ValueError:
                raise ParseError("bad index or score field", line=lineno) from None
    table = {}
    for ctx_id, by_idx in rows.items():
        if sorted(by_idx) != list(range(len(by_idx))):
            raise ParseError(f"candidate indices for {ctx_id} are not contiguous")
        table[ctx_id] = [by_idx[i] for i in range(len(by_idx))]
    return table


def ensemble(tables):
    """Per-candidate arithmetic mean of aligned score tables."""
    if not tables:
        raise ContractError("ensemble: no score tables")
    first = tables[0]
    keys = set(first)
    for t in tables[1:]:
        if set(t) != keys or any(len(t[k]) != len(first[k]) for k in keys):
            raise ContractError("ensemble: candidate sets are misaligned across tables")
    return {
        k: [sum(t[k][i] for t in tables) / len(tables) for i in range(len(first[k]))]
        for k in first
    }


# ---------------------------------------------------------------------------
# Retrieve-then-rerank
# ---------------------------------------------------------------------------


@dataclass
class RerankResult:
    ranking: Ranking
    stage1: list = field(default_factory=list)  # (index, retrieval score)
    reranked_scores: dict = field(default_factory=dict)  # index -> matcher score


def retrieve_rerank(sent_model, esim_model, context_tokens, pool, k, case_id="case"):
    """Stage 1 ranks the whole pool with the cheap Siamese model; stage 2
    rescores only the top k with the cross-attention matcher.

    The final order is the k by matcher score, then the remainder in
    stage-1 order. Remainder entries get placeholder scores strictly
    below the reranked block so the ranking stays monotone.
    """
    if k > len(pool):
        raise ContractError(f"retrieve_rerank: k={k} exceeds pool size {len(pool)}")
    full = sent_model.retrieve(context_tokens, pool, len(pool))
    head = [idx for idx, _ in full[:k]]
    tail = full[k:]
    # Score in ascending index order so chunk composition matches a direct
    # whole-pool ranking when k == |pool|.
    head_sorted = sorted(head)
    esim_scores = esim_model.score_candidates(context_tokens,
                                              [pool[i] for i in head_sorted])
    by_index = dict(zip(head_sorted, (float(s) for s in esim_scores)))
    order = sorted(head, key=lambda i: (-by_index[i], i))
    scores = [by_index[i] for i in order]
    floor = min(scores) if scores else 1.0
    for j, (idx, _) in enumerate(tail):
        order.append(idx)
        scores.append(floor - 1.0 - j)
    ranking = Ranking(context_id=case_id, order=order, scores=scores)
    return RerankResult(ranking=ranking, stage1=full, reranked_scores=by_index)
