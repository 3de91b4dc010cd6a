"""Cross-modal recall and multi-modal mAP over galleries that grow with learned tasks."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .data import collate
from .model import VLPModel, l2_normalize
from .taskstream import TaskStream

KS = (1, 5, 10)
RECALL_KEYS = ("TR@1", "TR@5", "TR@10", "IR@1", "IR@5", "IR@10")
MAP_KEYS = ("mAP@1", "mAP@5", "mAP@10")


@dataclass
class SimilarityMatrix:
    scores: np.ndarray
    query_ids: list[int]
    gallery_ids: list[int]

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.query_ids), len(self.gallery_ids)):
            raise ValueError("score matrix shape does not match the id lists")
        if not np.isfinite(self.scores).all():
            raise ValueError("similarity scores must be finite")


@dataclass
class RetrievalReport:
    task_index: int
    gallery_size: int
    values: dict[str, float] = field(default_factory=dict)

    @property
    def rm(self) -> float:
        return self.values["Rm"]

    def to_record(self) -> dict:
        return asdict(self)

    @classmethod
    def from_record(cls, rec: Mapping) -> "RetrievalReport":
        return cls(task_index=rec["task_index"], gallery_size=rec["gallery_size"], values=dict(rec["values"]))


def ranking(scores: np.ndarray) -> np.ndarray:
    """Gallery indices per query by descending score; ties keep gallery order."""
    return np.argsort(-np.asarray(scores), axis=1, kind="stable")


def recall_at_k(sims: SimilarityMatrix, ground_truth: Mapping[int, int], ks: Sequence[int] = KS) -> dict[int, float]:
    """``ground_truth`` maps query id -> its single gallery id."""
    col = {g: j for j, g in enumerate(sims.gallery_ids)}
    truth = np.empty(len(sims.query_ids), dtype=np.int64)
    for i, q in enumerate(sims.query_ids):
        if q not in ground_truth or ground_truth[q] not in col:
            raise ValueError(f"query {q} has no ground-truth gallery item")
        truth[i] = col[ground_truth[q]]
    order = ranking(sims.scores)
    # 1-based rank of the truth item
    ranks = np.argmax(order == truth[:, None], axis=1) + 1
    q = len(ranks)
    return {k: 100.0 * float((ranks <= k).sum()) / q for k in ks}


def rm(recalls: Sequence[float]) -> float:
    if len(recalls) != 6:
        raise ValueError("Rm is the mean of exactly six recall values")
    return float(np.mean(recalls))


def average_precision(correct: Sequence[bool]) -> float:
    """AP over a top-N correctness pattern: precision (hits before k, plus one) / k
    at each hit, averaged over the hits inside the list."""
    hits = 0
    total = 0.0
    for k, ok in enumerate(correct, start=1):
        if ok:
            total += (hits + 1) / k
            hits += 1
    return total / hits if hits else 0.0


def map_at_n(
    sims: SimilarityMatrix,
    relevance: Mapping[int, set[int]],
    n: int,
    exclude_self: bool = True,
) -> float:
    if n < 1:
        raise ValueError("N must be >= 1")
    scores = sims.scores.copy()
    gal = np.asarray(sims.gallery_ids)
    if exclude_self:
        pos = {g: j for j, g in enumerate(sims.gallery_ids)}
        for i, q in enumerate(sims.query_ids):
            if q in pos:
                scores[i, pos[q]] = -np.inf
    order = ranking(scores)
    aps = []
    for i, q in enumerate(sims.query_ids):
        rel = relevance.get(q)
        if not rel:
            raise ValueError(f"query {q} has no relevant gallery item")
        top = order[i, :n]
        if exclude_self:
            top = top[np.isfinite(scores[i, top])]
        aps.append(average_precision([int(g) in rel for g in gal[top]]))
    return 100.0 * float(np.mean(aps))


# --------------------------------------------------------------------------
# galleries


@torch.no_grad()
def encode_pairs(model: VLPModel, pairs, max_seq_len: int, batch_size: int = 256) -> dict[str, torch.Tensor]:
    model.eval()
    dtype = next(model.parameters()).dtype
    vs, ws, fs = [], [], []
    for i in range(0, len(pairs), batch_size):
        b = collate(pairs[i : i + batch_size], max_seq_len, dtype=dtype)
        out = model(b.images, b.tokens, b.attention_mask)
        vs.append(out["v"])
        ws.append(out["w"])
        fs.append(l2_normalize(out["fused_cls"]))
    return {"v": torch.cat(vs), "w": torch.cat(ws), "fused": torch.cat(fs)}


def learned_tasks(order: Sequence[int], upto: int) -> list[int]:
    if not 0 <= upto < len(order):
        raise ValueError(f"task index {upto} outside the stream")
    return list(order[: upto + 1])


def build_eval_galleries(stream: TaskStream, upto: int, model: VLPModel, order: Sequence[int] | None = None) -> dict:
    """Similarity matrices over the merged splits of tasks learned so far."""
    order = list(range(len(stream.tasks))) if order is None else list(order)
    tasks = [stream.tasks[t] for t in learned_tasks(order, upto)]
    test = [p for t in tasks for p in t.test]
    query = [p for t in tasks for p in t.query]
    gallery = [p for t in tasks for p in t.gallery]
    if not test or not gallery or not query:
        raise ValueError("merged gallery is empty")
    max_len = model.cfg.max_seq_len

    enc_test = encode_pairs(model, test, max_len)
    ids = [p.pair_id for p in test]
    cross = SimilarityMatrix((enc_test["v"] @ enc_test["w"].t()).double().numpy(), ids, ids)

    enc_q = encode_pairs(model, query, max_len)
    enc_g = encode_pairs(model, gallery, max_len)
    multi = SimilarityMatrix(
        (enc_q["fused"] @ enc_g["fused"].t()).double().numpy(),
        [p.pair_id for p in query],
        [p.pair_id for p in gallery],
    )
    by_class: dict[int, set[int]] = {}
    for p in gallery:
        by_class.setdefault(p.class_id, set()).add(p.pair_id)
    relevance = {p.pair_id: by_class.get(p.class_id, set()) - {p.pair_id} for p in query}
    return {
        "cross": cross,
        "cross_truth": {i: i for i in ids},
        "multi": multi,
        "relevance": relevance,
        "gallery_size": len(test) + len(gallery),
    }


def evaluate(stream: TaskStream, upto: int, model: VLPModel, order: Sequence[int] | None = None) -> RetrievalReport:
    g = build_eval_galleries(stream, upto, model, order)
    cross: SimilarityMatrix = g["cross"]
    tr = recall_at_k(cross, g["cross_truth"])
    t2i = SimilarityMatrix(cross.scores.T, cross.gallery_ids, cross.query_ids)
    ir = recall_at_k(t2i, g["cross_truth"])
    values = {f"TR@{k}": tr[k] for k in KS}
    values.update({f"IR@{k}": ir[k] for k in KS})
    values["Rm"] = rm([values[k] for k in RECALL_KEYS])
    for n in KS:
        values[f"mAP@{n}"] = map_at_n(g["multi"], g["relevance"], n)
    return RetrievalReport(task_index=upto, gallery_size=g["gallery_size"], values=values)


def format_table(rows: Mapping[str, RetrievalReport]) -> str:
    cols = list(RECALL_KEYS) + ["Rm"] + list(MAP_KEYS)
    head = "| Method | " + " | ".join(cols) + " |"
    sep = "|---" * (len(cols) + 1) + "|"
    lines = [head, sep]
    for name, rep in rows.items():
        lines.append("| " + name + " | " + " | ".join(f"{rep.values[c]:.2f}" for c in cols) + " |")
    return "\n".join(lines)
