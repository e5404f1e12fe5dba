"""SER / VAD evaluation metrics and the two analysis exports.

UA is the mean per-class recall over classes that occur in the labels; WA
is the overall fraction of correct predictions. VAD metrics are frame
level, with precision (recall) defined as 1.0 when nothing is predicted
(truly) speech. Exports are stable-key-order JSON with a schema version.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import EMOTIONS, N_EMOTIONS
from .corpus import Utterance
from .pipeline import PipelineOutput, PipelineParams


@dataclass
class EvalReport:
    ua: float
    wa: float
    per_class_recalls: list[float | None]
    confusion: np.ndarray
    n_utterances: int
    vad_accuracy: float | None = None
    vad_precision: float | None = None
    vad_recall: float | None = None

    def to_dict(self) -> dict:
        out = {
            "v": 1,
            "ua": self.ua,
            "wa": self.wa,
            "per_class_recalls": self.per_class_recalls,
            "classes": list(EMOTIONS),
            "confusion": self.confusion.astype(int).tolist(),
            "n_utterances": self.n_utterances,
        }
        if self.vad_accuracy is not None:
            out["vad"] = {
                "accuracy": self.vad_accuracy,
                "precision": self.vad_precision,
                "recall": self.vad_recall,
            }
        return out


def ser_metrics(preds, labels) -> tuple[float, float, np.ndarray]:
    """(UA, WA, 4x4 confusion) with rows = reference class, cols = prediction."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ValueError(f"preds/labels shapes differ: {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        raise ValueError("ser_metrics needs at least one sample")
    if preds.min() < 0 or preds.max() >= N_EMOTIONS or labels.min() < 0 or labels.max() >= N_EMOTIONS:
        raise ValueError(f"class ids must be in [0,{N_EMOTIONS})")
    confusion = np.zeros((N_EMOTIONS, N_EMOTIONS), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    wa = float(np.trace(confusion) / confusion.sum())
    recalls = []
    for c in range(N_EMOTIONS):
        support = confusion[c].sum()
        recalls.append(float(confusion[c, c] / support) if support else None)
    present = [r for r in recalls if r is not None]
    ua = float(np.mean(present))
    return ua, wa, confusion


def per_class_recalls(confusion: np.ndarray) -> list[float | None]:
    out: list[float | None] = []
    for c in range(confusion.shape[0]):
        support = confusion[c].sum()
        out.append(float(confusion[c, c] / support) if support else None)
    return out


def vad_metrics(pred_mask, true_mask) -> tuple[float, float, float]:
    """(accuracy, precision, recall) over frames; empty-denominator cases read as 1.0."""
    pred = np.asarray(pred_mask).astype(np.int64).ravel()
    true = np.asarray(true_mask).astype(np.int64).ravel()
    if pred.shape != true.shape:
        raise ValueError(f"mask lengths differ: {pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise ValueError("vad_metrics needs at least one frame")
    tp = int(np.sum((pred == 1) & (true == 1)))
    tn = int(np.sum((pred == 0) & (true == 0)))
    fp = int(np.sum((pred == 1) & (true == 0)))
    fn = int(np.sum((pred == 0) & (true == 1)))
    accuracy = (tp + tn) / pred.size
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    return float(accuracy), float(precision), float(recall)


def _dump_json(payload: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def export_featurizer_weights(params: PipelineParams, path) -> dict:
    """Write the softmax-normalized 13-layer weights per featurizer, layer 0 first."""
    if params.shared_featurizer:
        entries = [{"role": "shared", "weights": params.feat_vad.normalized_weights().astype(float).tolist()}]
    else:
        entries = [
            {"role": "vad", "weights": params.feat_vad.normalized_weights().astype(float).tolist()},
            {"role": "ser", "weights": params.feat_ser.normalized_weights().astype(float).tolist()},
        ]
    payload = {"v": 1, "n_layers": 13, "featurizers": entries}
    _dump_json(payload, path)
    return payload


def export_vad_timeline(u: Utterance, out: PipelineOutput, path) -> dict:
    """Per-frame oracle label, predicted mask, and speech posterior for replotting."""
    if out.hard_mask is None or out.vad_probs is None:
        raise ValueError("pipeline output has no VAD stage; nothing to export")
    if u.frame_labels is None:
        raise ValueError(f"utterance {u.id} has no oracle frame labels")
    if len(u.frame_labels) != len(out.hard_mask):
        raise ValueError(f"length mismatch: {len(u.frame_labels)} oracle vs {len(out.hard_mask)} predicted frames")
    rows = [
        {
            "frame": i,
            "oracle": int(u.frame_labels[i]),
            "predicted": int(out.hard_mask[i]),
            "speech_prob": float(out.vad_probs[i, 1]),
        }
        for i in range(len(out.hard_mask))
    ]
    payload = {"v": 1, "utterance_id": u.id, "snr_db": u.snr_db, "rows": rows}
    _dump_json(payload, path)
    return payload
