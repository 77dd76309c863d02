"""Filtered link-prediction ranking and MRR / Hits@N aggregation.

Every split triple is ranked in both directions: (h, r, ?) for the tail and
(t, r_inv, ?) for the head, where r_inv = r + relation_count. Ties count
against the gold answer so a constant scorer cannot look good. The filtered
protocol removes every other known-true answer before ranking; --raw keeps
them in.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .errors import ContractViolation

HITS_LEVELS = (1, 3, 10)


@dataclasses.dataclass
class RankResult:
    query: tuple  # (head_id, relation_id); relation >= relation_count means inverse
    gold: int
    rank: int
    filtered: bool


@dataclasses.dataclass
class DirectionMetrics:
    mrr: float
    hits: dict

    @staticmethod
    def from_ranks(ranks):
        arr = np.asarray(ranks, dtype=np.float64)
        # fsum: exactly rounded, so the mean is independent of query order
        return DirectionMetrics(
            mrr=math.fsum(1.0 / arr) / arr.size,
            hits={n: float((arr <= n).mean()) for n in HITS_LEVELS},
        )


@dataclasses.dataclass
class Metrics:
    overall: DirectionMetrics
    tail: DirectionMetrics
    head: DirectionMetrics
    query_count: int


def rank_query(scores, gold, filter_out):
    """Pessimistic rank of `gold` among non-filtered candidates.

    rank = 1 + #{strictly greater} + #{equal, excluding the gold itself}.
    """
    scores = np.asarray(scores)
    if gold in filter_out:
        raise ContractViolation(f"gold entity {gold} present in its own filter set")
    gold_score = scores[gold]
    if filter_out:
        keep = np.ones(len(scores), dtype=bool)
        keep[list(filter_out)] = False
        scores = scores[keep]
    greater = int((scores > gold_score).sum())
    equal = int((scores == gold_score).sum()) - 1  # the gold itself ties with itself
    return 1 + greater + equal


def evaluate(model, store, split, filtered=True, collect_ranks=False):
    """Rank both directions of every triple in `split` and aggregate metrics.

    `model` needs candidate_scores(heads, rels) -> (Q, entity_count) array
    with higher-is-better scores.
    """
    triples = np.asarray(store.split(split), dtype=np.int64)
    R = store.relation_count
    heads = np.concatenate([triples[:, 0], triples[:, 2]])
    rels = np.concatenate([triples[:, 1], triples[:, 1] + R])
    golds = np.concatenate([triples[:, 2], triples[:, 0]])
    n = len(triples)

    scores = model.candidate_scores(heads, rels)
    ranks = np.empty(2 * n, dtype=np.int64)
    results = [] if collect_ranks else None
    for q in range(2 * n):
        if filtered:
            known = store.filter_index.get((int(heads[q]), int(rels[q])), set())
            filter_out = known - {int(golds[q])}
        else:
            filter_out = set()
        ranks[q] = rank_query(scores[q], int(golds[q]), filter_out)
        if collect_ranks:
            results.append(RankResult(query=(int(heads[q]), int(rels[q])),
                                      gold=int(golds[q]), rank=int(ranks[q]),
                                      filtered=filtered))

    metrics = Metrics(
        overall=DirectionMetrics.from_ranks(ranks),
        tail=DirectionMetrics.from_ranks(ranks[:n]),
        head=DirectionMetrics.from_ranks(ranks[n:]),
        query_count=2 * n,
    )
    return (metrics, results) if collect_ranks else metrics


# ---------------------------------------------------------------------------
# reporting


def report_lines(metrics, label=""):
    rows = [f"== {label or 'evaluation'} ({metrics.query_count} queries) =="]
    for name, dm in (("overall", metrics.overall), ("tail", metrics.tail),
                     ("head", metrics.head)):
        hits = "  ".join(f"hits@{n} {dm.hits[n]:.4f}" for n in HITS_LEVELS)
        rows.append(f"{name:>8}  mrr {dm.mrr:.4f}  {hits}")
    return rows


def metrics_kv(metrics):
    out = {}
    for name, dm in (("overall", metrics.overall), ("tail", metrics.tail),
                     ("head", metrics.head)):
        out[f"{name}.mrr"] = dm.mrr
        for n in HITS_LEVELS:
            out[f"{name}.hits{n}"] = dm.hits[n]
    out["query_count"] = metrics.query_count
    return out


def write_metrics(metrics, path):
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in metrics_kv(metrics).items():
            fh.write(f"{key} = {value}\n")
