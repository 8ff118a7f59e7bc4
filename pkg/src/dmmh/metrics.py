"""Hamming-ranking retrieval metrics: AP, mAP@all and precision@K."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .hamming import BitsMismatchError, CodeBank, rank_rows

# Published mAP of the DMMH model, by dataset and code length.
PAPER_MAP = {
    "MIR-Flickr25K": {16: 0.8319, 32: 0.8523, 64: 0.8694, 128: 0.8788},
    "NUS-WIDE": {16: 0.7229, 32: 0.7424, 64: 0.7661, 128: 0.7806},
    "MS COCO": {16: 0.5869, 32: 0.6299, 64: 0.6477, 128: 0.6715},
}

DEFAULT_PRECISION_AT = (1, 10, 100)
_CHUNK = 64


def paper_reference(dataset: str, bits: int) -> float:
    try:
        return PAPER_MAP[dataset][int(bits)]
    except KeyError:
        raise KeyError(f"no published mAP for ({dataset!r}, {bits} bits); datasets: "
                       f"{sorted(PAPER_MAP)}, bits: 16/32/64/128") from None


def relevance(query_labels, item_labels) -> bool:
    return bool(np.any(np.logical_and(query_labels, item_labels)))


def average_precision(rel) -> float | None:
    """AP of a ranked 0/1 relevance vector; ``None`` when nothing is relevant.

    The precisions at relevant ranks are summed with ``math.fsum`` so the
    result is the correctly rounded mean, independent of summation order.
    """
    rel = np.asarray(rel, dtype=bool)
    R = int(rel.sum())
    if R == 0:
        return None
    pos = np.flatnonzero(rel) + 1
    return math.fsum((np.arange(1, R + 1) / pos).tolist()) / R


def precision_at_k(rel, K: int) -> float:
    rel = np.asarray(rel, dtype=bool)
    if K < 1:
        raise ValueError("K must be >= 1")
    top = rel[:K]
    return float(top.mean()) if top.size else 0.0


@dataclass
class EvalReport:
    map: float
    aps: list = field(repr=False)
    num_queries: int
    excluded_queries: int
    num_retrieval: int
    bits: int
    precision_at: dict = field(default_factory=dict)
    paper_reference: dict | None = None

    def to_dict(self) -> dict:
        d = {
            "map": self.map,
            "num_queries": self.num_queries,
            "excluded_queries": self.excluded_queries,
            "precision_at": {str(k): v for k, v in self.precision_at.items()},
            "bits": self.bits,
        }
        if self.paper_reference is not None:
            d["paper_reference"] = self.paper_reference
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _ranked_relevance(qi: int, queries: CodeBank, retrieval: CodeBank) -> np.ndarray:
    rows, _ = rank_rows(queries.words[qi], retrieval)
    return (retrieval.labels[rows].astype(np.int64) @ queries.labels[qi].astype(np.int64)) > 0


def mean_average_precision(queries: CodeBank, retrieval: CodeBank,
                           precision_at=DEFAULT_PRECISION_AT, threads: int = 1,
                           dataset: str | None = None) -> EvalReport:
    """mAP@all of ``queries`` ranked against ``retrieval``.

    Queries with no relevant retrieval item are excluded from the mean and
    counted in ``excluded_queries``; precision@K averages the scored queries.
    Work is split into fixed chunks so results do not depend on ``threads``.
    """
    if len(queries) == 0:
        raise ValueError("empty query set")
    if queries.k != retrieval.k:
        raise BitsMismatchError(f"query bank has {queries.k} bits, retrieval bank {retrieval.k}")
    if queries.n_categories != retrieval.n_categories:
        raise ValueError(f"label spaces differ: {queries.n_categories} vs "
                         f"{retrieval.n_categories} categories")
    ks = tuple(int(k) for k in precision_at)
    nq = len(queries)
    aps = np.full(nq, np.nan)
    prec = np.zeros((nq, len(ks)))

    def work(start):
        for qi in range(start, min(start + _CHUNK, nq)):
            rel = _ranked_relevance(qi, queries, retrieval)
            ap = average_precision(rel)
            if ap is not None:
                aps[qi] = ap
                prec[qi] = [precision_at_k(rel, k) for k in ks]

    starts = range(0, nq, _CHUNK)
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            list(ex.map(work, starts))
    else:
        for s in starts:
            work(s)

    scored = ~np.isnan(aps)
    per_query = aps[scored]
    report = EvalReport(
        map=float(np.mean(per_query)) if per_query.size else 0.0,
        aps=per_query.tolist(),
        num_queries=nq,
        excluded_queries=int(nq - scored.sum()),
        num_retrieval=len(retrieval),
        bits=queries.k,
        precision_at={k: float(np.mean(prec[scored, j])) if scored.any() else 0.0
                      for j, k in enumerate(ks)},
    )
    if dataset is not None:
        report.paper_reference = {"dataset": dataset, "bits": queries.k,
                                  "map": paper_reference(dataset, queries.k)}
    return report
