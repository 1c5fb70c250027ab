"""Descriptor extraction, cosine ranking and retrieval metrics."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .dataset import Dataset, View

log = logging.getLogger(__name__)

PROTOCOLS = ("uav_sat_single", "uav_sat_multi", "sat_uav")
RECALL_KS = (1, 5, 10)


class EvaluationError(ValueError):
    pass


@dataclass
class RetrievalResult:
    query_id: int
    ranked_ids: np.ndarray
    scores: np.ndarray


# ---------------------------------------------------------------------------
# descriptors

@torch.no_grad()
def extract_descriptors(encoder, dataset: Dataset, batch_size: int = 64) -> np.ndarray:
    """(N, 4 * d_embed) descriptors; rings concatenated innermost first."""
    if hasattr(encoder, "describe_dataset"):
        return encoder.describe_dataset(dataset)
    was_training = encoder.training
    encoder.eval()
    out = []
    try:
        for start in range(0, len(dataset), batch_size):
            images = dataset.images(range(start, min(start + batch_size, len(dataset))))
            _, parts = encoder(images)
            out.append(parts.reshape(parts.shape[0], -1).double().numpy())
    finally:
        encoder.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, 0))


def extract_descriptor(encoder, image: torch.Tensor) -> np.ndarray:
    with torch.no_grad():
        was_training = encoder.training
        encoder.eval()
        _, parts = encoder(image[None])
        encoder.train(was_training)
    return parts.reshape(-1).double().numpy()


class OracleEncoder:
    """Embeds each sample as the one-hot of its location id (a perfect encoder)."""

    def describe_dataset(self, dataset: Dataset) -> np.ndarray:
        return np.eye(dataset.num_locations)[dataset.labels]


# ---------------------------------------------------------------------------
# similarity and ranking

def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        log.warning("cosine similarity with a zero vector; returning 0")
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    zero = norms[:, 0] == 0.0
    if zero.any():
        log.warning("%d zero descriptors; their similarities are 0", int(zero.sum()))
    return x / np.where(norms == 0.0, 1.0, norms)


def similarity_matrix(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    return np.clip(_unit_rows(queries) @ _unit_rows(gallery).T, -1.0, 1.0)


def rank_by_scores(scores: np.ndarray, gallery_ids: np.ndarray | None = None) -> np.ndarray:
    """Positions sorted by descending score, ties by ascending gallery id."""
    ids = np.arange(len(scores)) if gallery_ids is None else np.asarray(gallery_ids)
    return np.lexsort((ids, -np.asarray(scores)))


def rank_gallery(query, gallery, query_id: int = 0, gallery_ids=None) -> RetrievalResult:
    gallery = np.asarray(gallery, dtype=np.float64)
    if gallery.ndim != 2 or len(gallery) == 0:
        raise EvaluationError("gallery must be a non-empty (G, D) array")
    ids = np.arange(len(gallery)) if gallery_ids is None else np.asarray(gallery_ids)
    scores = similarity_matrix(np.asarray(query, dtype=np.float64)[None], gallery)[0]
    order = rank_by_scores(scores, ids)
    return RetrievalResult(query_id, ids[order], scores[order])


# ---------------------------------------------------------------------------
# metrics

def relevant_ranks(ranked_ids: Iterable[int], relevant: set) -> np.ndarray:
    """1-based ranks at which relevant ids appear."""
    return np.array([r for r, g in enumerate(ranked_ids, 1) if g in relevant], dtype=np.int64)


def average_precision(result: RetrievalResult, relevant: set) -> float:
    if not relevant:
        raise EvaluationError("average precision needs a non-empty relevant set")
    ranks = relevant_ranks(result.ranked_ids, relevant)
    hits = np.arange(1, len(ranks) + 1)
    return float(np.sum(hits / ranks) / len(relevant))


def _kept(results, relevance):
    kept = [r for r in results if relevance.get(r.query_id)]
    excluded = len(results) - len(kept)
    if excluded:
        log.warning("%d queries have no relevant gallery item and are excluded", excluded)
    return kept, excluded


def recall_at_k(results: list[RetrievalResult], relevance: dict[int, set], k: int) -> float:
    if k < 1:
        raise EvaluationError("k must be >= 1")
    kept, _ = _kept(results, relevance)
    if not kept:
        return 0.0
    hits = [any(g in relevance[r.query_id] for g in r.ranked_ids[:k]) for r in kept]
    return float(np.mean(hits))


def multi_query_fuse(descriptors) -> np.ndarray:
    arrs = [np.asarray(d, dtype=np.float64) for d in descriptors]
    if not arrs:
        raise EvaluationError("need at least one descriptor to fuse")
    if len({a.shape for a in arrs}) != 1:
        raise EvaluationError("cannot fuse descriptors of different lengths")
    return np.mean(arrs, axis=0)


# ---------------------------------------------------------------------------
# protocol

@dataclass
class Evaluation:
    report: dict
    results: list[RetrievalResult]
    per_query: list[dict]
    query_paths: list[str | None]
    gallery_paths: list[str | None]


def _check_views(ds: Dataset, view: View, role: str, protocol: str) -> None:
    if any(s.view != view for s in ds.samples):
        raise EvaluationError(f"{protocol}: {role} set must contain only {view.name} images")


def evaluate_descriptors(q_desc: np.ndarray, q_labels: np.ndarray, g_desc: np.ndarray, g_labels: np.ndarray,
                         protocol: str, q_paths=None, g_paths=None) -> Evaluation:
    """Rank every query against the gallery; relevance is shared location id."""
    if len(g_desc) == 0:
        raise EvaluationError("empty gallery")
    q_paths = list(q_paths) if q_paths is not None else [None] * len(q_desc)
    if protocol == "uav_sat_multi":
        locs = np.unique(q_labels)
        q_desc = np.stack([multi_query_fuse(q_desc[q_labels == loc]) for loc in locs])
        q_paths = [f"<{int((q_labels == loc).sum())} fused queries of location {loc}>" for loc in locs]
        q_labels = locs
    sims = similarity_matrix(q_desc, g_desc)
    g_ids = np.arange(len(g_desc))
    results, per_query = [], []
    relevance: dict[int, set] = {}
    for qi in range(len(q_desc)):
        order = rank_by_scores(sims[qi], g_ids)
        res = RetrievalResult(qi, g_ids[order], sims[qi][order])
        results.append(res)
        rel = set(np.flatnonzero(g_labels == q_labels[qi]).tolist())
        relevance[qi] = rel
        row = {"query": qi, "location_id": int(q_labels[qi]), "num_relevant": len(rel)}
        if rel:
            ranks = relevant_ranks(res.ranked_ids, rel)
            row["first_rank"] = int(ranks[0])
            row["AP"] = average_precision(res, rel)
        per_query.append(row)
    kept, excluded = _kept(results, relevance)
    report = {"protocol": protocol}
    for k in RECALL_KS:
        report[f"R@{k}"] = recall_at_k(results, relevance, k)
    report["AP"] = float(np.mean([average_precision(r, relevance[r.query_id]) for r in kept])) if kept else 0.0
    report.update(num_queries=len(results), num_gallery=len(g_desc), excluded_queries=excluded)
    return Evaluation(report, results, per_query, q_paths, list(g_paths) if g_paths is not None else [None] * len(g_desc))


def evaluate(encoder, query: Dataset, gallery: Dataset, protocol: str, batch_size: int = 64) -> Evaluation:
    """Run one protocol.  For ``sat_uav`` pass satellite queries and a UAV gallery."""
    if protocol not in PROTOCOLS:
        raise EvaluationError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    q_view, g_view = (View.SATELLITE, View.UAV) if protocol == "sat_uav" else (View.UAV, View.SATELLITE)
    _check_views(query, q_view, "query", protocol)
    _check_views(gallery, g_view, "gallery", protocol)
    q_desc = extract_descriptors(encoder, query, batch_size)
    g_desc = extract_descriptors(encoder, gallery, batch_size)
    return evaluate_descriptors(
        q_desc, query.labels, g_desc, gallery.labels, protocol,
        [s.source_path for s in query.samples], [s.source_path for s in gallery.samples],
    )


def write_metrics(ev: Evaluation, out_dir: str | Path, topk: int = 5) -> Path:
    """Write ``metrics_<protocol>.json``, a per-query CSV and a top-k ranked dump."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    proto = ev.report["protocol"]
    path = out / f"metrics_{proto}.json"
    path.write_text(json.dumps(ev.report, indent=2))
    if ev.per_query:
        fields = ["query", "location_id", "num_relevant", "first_rank", "AP"]
        with open(out / f"per_query_{proto}.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
            w.writeheader()
            w.writerows(ev.per_query)
    if topk > 0:
        with open(out / f"ranked_{proto}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["query", "query_path", "rank", "gallery", "gallery_path", "score"])
            for res in ev.results:
                for r, (g, s) in enumerate(zip(res.ranked_ids[:topk], res.scores[:topk]), 1):
                    w.writerow([res.query_id, ev.query_paths[res.query_id], r, int(g), ev.gallery_paths[g], repr(float(s))])
    return path
