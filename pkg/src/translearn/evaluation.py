"""CMC and mAP under the Market-1501 protocol.

For each query, gallery images of the same identity seen by the same camera
are ignored, as are junk images (pid -1); distractors (pid 0) stay in the list
as negatives. AP is the mean of precision at each true match.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class Protocol(str, enum.Enum):
    SINGLE_QUERY = "sq"
    MULTI_QUERY = "mq"


@dataclass
class EvalReport:
    cmc: np.ndarray
    map_score: float
    per_query_ap: np.ndarray
    protocol: Protocol = Protocol.SINGLE_QUERY
    skipped: int = 0
    num_queries: int = 0
    extra: dict = field(default_factory=dict)

    def rank(self, k: int) -> float:
        """CMC at rank ``k`` (1-based); saturates past the gallery length."""
        if len(self.cmc) == 0:
            return 0.0
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def summary(self) -> dict:
        out = {f"rank{k}": self.rank(k) for k in (1, 5, 10, 20)}
        out.update(mAP=float(self.map_score), skipped=int(self.skipped),
                   queries=int(self.num_queries), protocol=self.protocol.value)
        out.update(self.extra)
        return out

    def to_table(self) -> str:
        s = self.summary()
        head = f"{'protocol':<9}{'rank-1':>8}{'rank-5':>8}{'rank-10':>9}{'rank-20':>9}{'mAP':>8}{'skipped':>9}"
        row = (f"{s['protocol']:<9}{100 * s['rank1']:>8.2f}{100 * s['rank5']:>8.2f}"
               f"{100 * s['rank10']:>9.2f}{100 * s['rank20']:>9.2f}{100 * s['mAP']:>8.2f}{s['skipped']:>9d}")
        return head + "\n" + row + "\n"

    def write(self, out_dir, stem: str = "report") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        txt = out_dir / f"{stem}.txt"
        kv = out_dir / f"{stem}.json"
        txt.write_text(self.to_table())
        kv.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        return txt, kv


def pairwise_distances(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    query, gallery = np.atleast_2d(query), np.atleast_2d(gallery)
    if query.shape[1] != gallery.shape[1]:
        raise ValueError(f"descriptor dims differ: query {query.shape[1]} vs gallery {gallery.shape[1]}")
    # direct differences rather than the Gram expansion: exact zeros for equal rows
    return np.stack([np.sqrt(((gallery - q) ** 2).sum(1)) for q in query]) if len(query) else \
        np.zeros((0, len(gallery)))


def rank_gallery(query_desc: np.ndarray, gallery_descs: np.ndarray) -> np.ndarray:
    """Gallery indices by ascending Euclidean distance, ties to the lower index."""
    query_desc = np.asarray(query_desc, dtype=np.float64).reshape(-1)
    gallery_descs = np.atleast_2d(np.asarray(gallery_descs, dtype=np.float64))
    if gallery_descs.shape[1] != query_desc.shape[0]:
        raise ValueError(f"descriptor dims differ: query {query_desc.shape[0]} vs gallery {gallery_descs.shape[1]}")
    dist = np.sqrt(((gallery_descs - query_desc) ** 2).sum(1))
    return np.argsort(dist, kind="stable")


def ap_and_cmc(order: np.ndarray, good: np.ndarray, junk: np.ndarray, length: int) -> tuple[float, np.ndarray]:
    """AP and 0/1 CMC row for one ranked list; ``good``/``junk`` are boolean masks."""
    keep = ~junk[order]
    hits = good[order][keep]
    cmc = np.zeros(length)
    positives = np.flatnonzero(hits)
    if len(positives) == 0:
        return 0.0, cmc
    cmc[positives[0]:] = 1.0
    precision = np.arange(1, len(positives) + 1) / (positives + 1)
    return float(precision.mean()), cmc


def multi_query_descriptor(descs: np.ndarray) -> np.ndarray:
    """Element-wise mean of a same-identity, same-camera query group."""
    descs = np.atleast_2d(np.asarray(descs, dtype=np.float64))
    if descs.shape[0] == 0:
        raise ValueError("empty multi-query group")
    return descs.mean(axis=0)


def evaluate(query_pids: Sequence[int], query_cams: Sequence[int], query_descs: np.ndarray,
             gallery_pids: Sequence[int], gallery_cams: Sequence[int], gallery_descs: np.ndarray,
             protocol: Protocol | str = Protocol.SINGLE_QUERY) -> EvalReport:
    """Score every query against the gallery.

    Under the multi-query protocol each query descriptor is replaced by the
    mean over all queries sharing its identity and camera. Queries with no
    valid true match are skipped and counted.
    """
    protocol = Protocol(protocol)
    q_pids, q_cams = np.asarray(query_pids), np.asarray(query_cams)
    g_pids, g_cams = np.asarray(gallery_pids), np.asarray(gallery_cams)
    q_descs = np.atleast_2d(np.asarray(query_descs, dtype=np.float64))
    g_descs = np.atleast_2d(np.asarray(gallery_descs, dtype=np.float64))
    if protocol is Protocol.MULTI_QUERY:
        q_descs = _pool_queries(q_pids, q_cams, q_descs)
    dist = pairwise_distances(q_descs, g_descs)
    n_gallery = len(g_pids)
    aps, cmcs, skipped = [], [], 0
    for q in range(len(q_pids)):
        order = np.argsort(dist[q], kind="stable")
        same_id = g_pids == q_pids[q]
        same_cam = g_cams == q_cams[q]
        good = same_id & ~same_cam
        junk = (same_id & same_cam) | (g_pids == -1)
        if not good.any():
            skipped += 1
            continue
        ap, cmc = ap_and_cmc(order, good, junk, n_gallery)
        aps.append(ap)
        cmcs.append(cmc)
    cmc = np.mean(cmcs, axis=0) if cmcs else np.zeros(n_gallery)
    per_query = np.asarray(aps)
    return EvalReport(cmc, float(per_query.mean()) if len(per_query) else 0.0, per_query,
                      protocol, skipped, len(q_pids))


def _pool_queries(pids: np.ndarray, cams: np.ndarray, descs: np.ndarray) -> np.ndarray:
    pooled = np.empty_like(descs)
    for key in {(int(p), int(c)) for p, c in zip(pids, cams)}:
        mask = (pids == key[0]) & (cams == key[1])
        pooled[mask] = multi_query_descriptor(descs[mask])
    return pooled


def evaluate_tables(query_samples, gallery_samples, table, protocol=Protocol.SINGLE_QUERY) -> EvalReport:
    """:func:`evaluate` with descriptors looked up from a descriptor table."""
    q_desc = table.rows([str(s.image_path) for s in query_samples])
    g_desc = table.rows([str(s.image_path) for s in gallery_samples])
    report = evaluate([s.person_id for s in query_samples], [s.camera_id for s in query_samples], q_desc,
                      [s.person_id for s in gallery_samples], [s.camera_id for s in gallery_samples], g_desc,
                      protocol)
    report.extra.update(dim=int(table.dim), parts=int(table.parts), pool=table.mode.value)
    return report
