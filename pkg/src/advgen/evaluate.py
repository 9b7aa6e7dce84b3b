"""Attack-success evaluation over precomputed embedding matrices.

Everything here is encoder-agnostic: queries and galleries arrive as row
matrices, rankings break ties by ascending gallery index, and percentages are
reported with two decimals. R@Mean is the exact arithmetic mean of the stored
retrieval entries.
"""

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import load_embeddings
from .errors import ConfigError, ContractError, DimensionError, InvalidInputError


def _as_matrix(x, name) -> np.ndarray:
    arr = np.asarray(x.detach().cpu().numpy() if hasattr(x, "detach") else x)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be a 2-d matrix, got shape {arr.shape}")
    return arr


def similarity_matrix(queries, gallery) -> np.ndarray:
    """Entry (i, j) is the dot product of query row i and gallery row j."""
    q = _as_matrix(queries, "queries")
    g = _as_matrix(gallery, "gallery")
    if q.shape[1] != g.shape[1]:
        raise DimensionError(f"embedding dims differ: queries {q.shape[1]} vs gallery {g.shape[1]}")
    return q @ g.T


def recall_at_k(sim: np.ndarray, ground_truth: Dict[int, set], ks: Sequence[int]) -> Dict[int, float]:
    """Percentage of queries whose top-k rows intersect their ground-truth set.

    Ties are broken by ascending gallery index (stable sort), so results are
    reproducible across implementations.
    """
    sim = _as_matrix(sim, "similarity matrix")
    nq, ng = sim.shape
    for k in ks:
        if k < 1 or k > ng:
            raise ConfigError(f"k={k} outside the gallery size {ng}")
    for i in range(nq):
        if i not in ground_truth or not ground_truth[i]:
            raise InvalidInputError(f"query {i} has no ground-truth entries")
        for j in ground_truth[i]:
            if j < 0 or j >= ng:
                raise InvalidInputError(f"query {i} lists gallery row {j}, "
                                        f"but the gallery has {ng} rows")
    kmax = max(ks)
    out = {int(k): 0 for k in ks}
    for i in range(nq):
        order = np.argsort(-sim[i], kind="stable")[:kmax]
        gt = ground_truth[i]
        for k in ks:
            if any(int(j) in gt for j in order[:k]):
                out[int(k)] += 1
    return {k: 100.0 * c / nq for k, c in out.items()}


def classification_asr(adv_emb, candidate_emb: Sequence, gt_index: Sequence[int]) -> float:
    """Percentage of samples whose nearest candidate (by cosine) is the target.

    Each sample brings its own candidate list; ties resolve to the lowest
    candidate index.
    """
    adv = _as_matrix(adv_emb, "adv embeddings")
    if len(candidate_emb) != adv.shape[0] or len(gt_index) != adv.shape[0]:
        raise DimensionError(f"{adv.shape[0]} samples but {len(candidate_emb)} candidate lists "
                             f"and {len(gt_index)} ground-truth indices")
    hits = 0
    for i in range(adv.shape[0]):
        cands = np.asarray(candidate_emb[i])
        if cands.ndim != 2 or cands.shape[0] < 2:
            raise ConfigError(f"sample {i} needs >= 2 candidates, got shape {cands.shape}")
        gt = int(gt_index[i])
        if gt < 0 or gt >= cands.shape[0]:
            raise InvalidInputError(f"sample {i} ground-truth index {gt} out of range")
        sims = cands @ adv[i]
        if int(np.argmax(sims)) == gt:  # argmax takes the first maximum
            hits += 1
    return 100.0 * hits / adv.shape[0]


@dataclass
class EvalReport:
    """Retrieval percentages in both directions plus optional classification ASR."""

    tr_at: Dict[int, float]
    ir_at: Dict[int, float]
    r_mean: float
    classification_asr: Optional[float] = None
    metadata: dict = field(default_factory=dict)

    def validate(self):
        entries = list(self.tr_at.values()) + list(self.ir_at.values())
        if abs(self.r_mean - sum(entries) / len(entries)) > 1e-9:
            raise ContractError("r_mean does not equal the mean of the retrieval entries")
        for v in entries + ([self.classification_asr] if self.classification_asr is not None else []):
            if not 0.0 <= v <= 100.0:
                raise ContractError(f"percentage {v} outside [0, 100]")
        return self


def retrieval_report(adv_image_emb, text_emb, image_gallery_emb, gt_tr: Dict[int, set],
                     gt_ir: Dict[int, set], ks=(1, 5, 10), classification: Optional[float] = None,
                     metadata: Optional[dict] = None) -> EvalReport:
    """TR@k ranks text rows by adversarial-image queries; IR@k ranks the
    adversarial-substituted image gallery by text queries.

    Entries are rounded to two decimals when stored; r_mean is the exact mean
    of the stored entries.
    """
    tr = recall_at_k(similarity_matrix(adv_image_emb, text_emb), gt_tr, ks)
    ir = recall_at_k(similarity_matrix(text_emb, image_gallery_emb), gt_ir, ks)
    tr = {k: round(v, 2) for k, v in tr.items()}
    ir = {k: round(v, 2) for k, v in ir.items()}
    entries = list(tr.values()) + list(ir.values())
    report = EvalReport(
        tr_at=tr, ir_at=ir, r_mean=sum(entries) / len(entries),
        classification_asr=None if classification is None else round(classification, 2),
        metadata=dict(metadata or {}))
    return report.validate()


# --- report files --------------------------------------------------------


def write_report(report: EvalReport, path) -> Path:
    """Emit the report as one JSON document plus a flat CSV row.

    The CSV keeps the fixed column order TR@1,...,R@Mean and appends the
    producing config fingerprint; the JSON round-trips the report exactly.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"tr_at": {str(k): v for k, v in report.tr_at.items()},
           "ir_at": {str(k): v for k, v in report.ir_at.items()},
           "r_mean": report.r_mean,
           "classification_asr": report.classification_asr,
           "metadata": report.metadata}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    csv_path = path.with_suffix(".csv")
    cols = [f"TR@{k}" for k in report.tr_at] + [f"IR@{k}" for k in report.ir_at] + ["R@Mean"]
    vals = [report.tr_at[k] for k in report.tr_at] + [report.ir_at[k] for k in report.ir_at] \
        + [report.r_mean]
    fingerprint = report.metadata.get("fingerprint", "")
    with open(csv_path, "w") as f:
        f.write(",".join(cols + ["fingerprint"]) + "\n")
        f.write(",".join(repr(v) for v in vals) + f",{fingerprint}\n")
    return path


def read_report(path) -> EvalReport:
    doc = json.loads(Path(path).read_text())
    return EvalReport(
        tr_at={int(k): v for k, v in doc["tr_at"].items()},
        ir_at={int(k): v for k, v in doc["ir_at"].items()},
        r_mean=doc["r_mean"],
        classification_asr=doc.get("classification_asr"),
        metadata=doc.get("metadata", {}))


def _gt_map(obj: dict) -> Dict[int, set]:
    return {int(k): set(int(x) for x in v) for k, v in obj.items()}


def evaluate_files(adv_path, text_path, gallery_path, gt_path, ks=(1, 5, 10),
                   metadata: Optional[dict] = None) -> EvalReport:
    """File-level evaluation: load embedding matrices and ground truth, rank,
    aggregate. The ground-truth JSON holds tr/ir maps (query row -> correct
    gallery rows) and an optional classification block with per-sample
    candidate ids into the text matrix."""
    t0 = time.time()
    adv, _ = load_embeddings(adv_path)
    text, _ = load_embeddings(text_path)
    gallery, _ = load_embeddings(gallery_path)
    gt = json.loads(Path(gt_path).read_text())
    cls_pct = None
    if "classification" in gt:
        blk = gt["classification"]
        cand = [text[np.asarray(ids, dtype=int)] for ids in blk["candidates"]]
        cls_pct = classification_asr(adv, cand, blk["gt_index"])
    meta = dict(metadata or {})
    meta.update({"sizes": {"adv_queries": int(adv.shape[0]), "text_rows": int(text.shape[0]),
                           "image_gallery_rows": int(gallery.shape[0])}})
    report = retrieval_report(adv, text, gallery, _gt_map(gt["tr"]), _gt_map(gt["ir"]),
                              ks=tuple(ks), classification=cls_pct, metadata=meta)
    report.metadata["elapsed_seconds"] = round(time.time() - t0, 3)
    return report
