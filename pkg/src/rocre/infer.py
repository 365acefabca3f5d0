"""Retrieval inference, pairwise discrimination, metrics and attention dumps."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .dataio import NONE_LABEL, Instance
from .model import RocModel
from .numcore import UsageError
from .pair_encoder import encode_pair
from .rel_encoder import CatalogMatrix

METRIC_CONVENTION = "mnre-micro-nonnone-v1"


class StaleCatalogError(RuntimeError):
    """A catalog matrix built from different relation-encoder weights was used."""


@dataclass
class Prediction:
    instance_id: str
    predicted_label: str
    score: float
    ranked: list[tuple[str, float]]


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    n: int
    convention: str = METRIC_CONVENTION

    def to_dict(self) -> dict:
        d = asdict(self)
        return {
            "accuracy": d["accuracy"],
            "precision": d["precision"],
            "recall": d["recall"],
            "f1": d["f1"],
            "counts": {"tp": self.tp, "fp": self.fp, "fn": self.fn, "n": self.n},
            "convention": self.convention,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Metrics":
        c = d["counts"]
        return cls(d["accuracy"], d["precision"], d["recall"], d["f1"], c["tp"], c["fp"], c["fn"], c["n"], d["convention"])


def compute_metrics(gold: Sequence[str], pred: Sequence[str], none_label: str = NONE_LABEL) -> Metrics:
    """Accuracy over everything; micro P/R/F1 over non-None labels.

    A wrong non-None prediction on a non-None gold counts as both FP and FN.
    With nothing to score (TP = FP = FN = 0) P, R and F1 are 1 by convention.
    """
    if len(gold) != len(pred):
        raise UsageError("gold and prediction lists differ in length")
    if not gold:
        raise UsageError("cannot evaluate an empty instance list")
    tp = fp = fn = correct = 0
    for g, p in zip(gold, pred):
        correct += g == p
        if g != none_label and p == g:
            tp += 1
        if p != none_label and p != g:
            fp += 1
        if g != none_label and p != g:
            fn += 1
    if tp == fp == fn == 0:
        prec = rec = f1 = 1.0
    else:
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    return Metrics(correct / len(gold), prec, rec, f1, tp, fp, fn, len(gold))


def cosine_scores(h_e: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Cosine of each pair vector (last axis) against every catalog row."""
    a = h_e / np.linalg.norm(h_e, axis=-1, keepdims=True)
    b = rows / np.linalg.norm(rows, axis=-1, keepdims=True)
    return np.clip(a @ b.T, -1.0, 1.0)


def rank(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score; equal scores keep catalog order."""
    return np.lexsort((np.arange(len(scores)), -np.asarray(scores)))


def _check_version(model: RocModel, cm: CatalogMatrix) -> None:
    if cm.catalog_version != model.catalog_version():
        raise StaleCatalogError("catalog matrix is stale; rebuild it with model.catalog_matrix()")


def _scores(model: RocModel, instances: list[Instance], cm: CatalogMatrix | None) -> np.ndarray:
    with nc.no_grad():
        h_e = model.encode_pairs(instances)
        if model.config.head == "classification":
            return model.class_logits(h_e).data
    if cm is None:
        cm = model.catalog_matrix()
    else:
        _check_version(model, cm)
    return cosine_scores(h_e.data, cm.rows)


def predict_scores(model: RocModel, instances: list[Instance], catalog_matrix: CatalogMatrix | None = None, batch_size: int = 128) -> np.ndarray:
    """(n, K) similarity (retrieval) or logit (classification) matrix."""
    if catalog_matrix is None and model.config.head == "retrieval":
        catalog_matrix = model.catalog_matrix()
    out = [_scores(model, instances[i : i + batch_size], catalog_matrix) for i in range(0, len(instances), batch_size)]
    return np.concatenate(out, axis=0)


def _prediction(inst: Instance, labels: Sequence[str], scores: np.ndarray, tau: float | None, topk: int) -> Prediction:
    if tau is not None and tau <= 0:
        raise UsageError("tau_infer must be positive")
    shown = scores / tau if tau else scores
    order = rank(scores)
    ranked = [(labels[k], float(shown[k])) for k in order[:topk]]
    best = int(order[0])
    return Prediction(inst.instance_id, labels[best], float(shown[best]), ranked)


def predict(
    model: RocModel,
    instance: Instance,
    catalog_matrix: CatalogMatrix | None = None,
    tau_infer: float | None = None,
    topk: int = 5,
) -> Prediction:
    """Nearest relation description by cosine; ``tau_infer`` only rescales scores."""
    scores = predict_scores(model, [instance], catalog_matrix)[0]
    return _prediction(instance, model.catalog.labels, scores, tau_infer, topk)


def predict_many(model: RocModel, instances: list[Instance], catalog_matrix=None, tau_infer=None, topk: int = 5) -> list[Prediction]:
    scores = predict_scores(model, instances, catalog_matrix)
    labels = model.catalog.labels
    return [_prediction(inst, labels, s, tau_infer, topk) for inst, s in zip(instances, scores)]


def predict_restricted(
    model: RocModel,
    instance: Instance,
    candidate_labels: Sequence[str],
    catalog_matrix: CatalogMatrix | None = None,
) -> Prediction:
    """Binary choice between two catalog relations."""
    return predict_restricted_many(model, [instance], [candidate_labels], catalog_matrix)[0]


def predict_restricted_many(model: RocModel, instances: list[Instance], candidates: list[Sequence[str]], catalog_matrix=None) -> list[Prediction]:
    labels = model.catalog.labels
    idx = []
    for cands in candidates:
        if len(cands) != 2 or cands[0] == cands[1]:
            raise UsageError("predict_restricted needs exactly two distinct labels")
        for c in cands:
            if c not in model.catalog:
                raise UsageError(f"unknown relation label {c!r}")
        idx.append(sorted(model.catalog.index(c) for c in cands))
    scores = predict_scores(model, instances, catalog_matrix)
    out = []
    for inst, s, pair in zip(instances, scores, idx):
        sub = s[pair]
        out.append(_prediction(inst, [labels[k] for k in pair], sub, None, 2))
    return out


def evaluate(model: RocModel, instances: list[Instance], catalog_matrix: CatalogMatrix | None = None) -> Metrics:
    if not instances:
        raise UsageError("cannot evaluate an empty instance list")
    for inst in instances:
        if inst.gold_relation not in model.catalog:
            raise UsageError(f"{inst.instance_id}: gold relation {inst.gold_relation!r} not in catalog")
    scores = predict_scores(model, instances, catalog_matrix)
    labels = model.catalog.labels
    pred = [labels[int(rank(s)[0])] for s in scores]
    return compute_metrics([i.gold_relation for i in instances], pred)


def write_predictions(preds: list[Prediction], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in preds:
            f.write(json.dumps(asdict(p)) + "\n")


ATTENTION_COLUMNS = ("layer", "head", "query_index", "query_token", "key_index", "key_token", "weight")


def dump_attention(model: RocModel, instance: Instance, out_path) -> int:
    """Write every fusion-layer attention weight for one instance as CSV rows."""
    if not model.encoder.retain_attention:
        raise UsageError("attention retention is off; set encoder.retain_attention (CLI: --dump-attention)")
    emb = encode_pair(instance, model.params, model.encoder, model.vocab, retain_attention=True)
    marked = emb.marked
    names = list(marked.tokens) + [f"[IMG{j}]" for j in range(marked.visual_len)]
    rows = 0
    with open(Path(out_path), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(ATTENTION_COLUMNS)
        for layer, maps in enumerate(emb.attention_maps or []):
            heads, q_len, k_len = maps.shape
            for h in range(heads):
                for q in range(q_len):
                    for k in range(k_len):
                        w.writerow([layer, h, q, names[q], k, names[k], repr(float(maps[h, q, k]))])
                        rows += 1
    return rows
