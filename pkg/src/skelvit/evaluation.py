"""Metrics and analyses over prediction streams.

Mean class accuracy is the mean of per-class recalls; classes absent from an
eval split are excluded from that mean and logged loudly.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import CHECKPOINT_DTYPE, PatchConfig, VideoTransformer
from .data import LabeledSample
from .errors import ConfigError, ContractError
from .jointmap import build_pixel_map, pool_token_map
from .map_head import TokenMapHead

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    top1: float
    mca: float
    confusion: np.ndarray  # (C, C) counts, rows = true class
    per_class_recall: np.ndarray  # (C,), NaN for classes absent from the split

    def to_dict(self) -> dict:
        return {
            "top1": self.top1,
            "mca": self.mca,
            "confusion": self.confusion.tolist(),
            "per_class_recall": [None if np.isnan(r) else float(r)
                                 for r in self.per_class_recall],
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "EvalReport":
        recall = np.array([np.nan if r is None else r
                           for r in raw["per_class_recall"]])
        return cls(top1=raw["top1"], mca=raw["mca"],
                   confusion=np.array(raw["confusion"], dtype=np.int64),
                   per_class_recall=recall)


def report_from_predictions(labels, predictions, num_classes: int) -> EvalReport:
    """Build a report by counting; labels/predictions are class indices."""
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.shape != predictions.shape:
        raise ContractError("labels and predictions have different lengths")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    row_sums = confusion.sum(axis=1)
    recall = np.full(num_classes, np.nan)
    present = row_sums > 0
    recall[present] = np.diag(confusion)[present] / row_sums[present]
    absent = np.flatnonzero(~present)
    if absent.size:
        log.warning("classes %s have no eval samples; excluded from mCA",
                    absent.tolist())
    top1 = float(np.diag(confusion).sum() / max(len(labels), 1))
    mca = float(np.nanmean(recall)) if present.any() else 0.0
    return EvalReport(top1=top1, mca=mca, confusion=confusion,
                      per_class_recall=recall)


def evaluate(model, samples: list[LabeledSample], num_classes: int,
             batch_size: int = 32) -> tuple[EvalReport, list[dict]]:
    """Run a pose-free model (anything with predict_logits) over samples.

    Returns the report and per-sample prediction records
    ({id, label, logits}) suitable for a JSONL dump.
    """
    clips = [s.clip for s in samples]
    logits = model.predict_logits(clips, batch_size=batch_size)
    labels = np.array([c.label for c in clips])
    predictions = logits.argmax(axis=1)
    records = [{"id": c.id, "label": int(c.label), "logits": l.tolist()}
               for c, l in zip(clips, logits)]
    return report_from_predictions(labels, predictions, num_classes), records


class FusedModel:
    """Late-fusion pipeline exposing the same predict_logits surface.

    Needs poses: each sample's pose-side logits come from the provider probe.
    """

    def __init__(self, backbone: VideoTransformer, provider, fusion,
                 samples: list[LabeledSample]):
        from .trainer import late_fuse
        self._late_fuse = late_fuse
        self.backbone = backbone
        self.provider = provider
        self.fusion = fusion
        self._pose_logits = {}
        for s in samples:
            if s.pose3d is None:
                raise ConfigError(f"fusion needs 3D poses; sample {s.clip.id} "
                                  "has none")
            self._pose_logits[s.clip.id] = provider.probe_logits(s.pose3d)

    def predict_logits(self, clips, batch_size: int = 32) -> np.ndarray:
        rgb = self.backbone.predict_logits(clips, batch_size=batch_size)
        pose = np.stack([self._pose_logits[c.id] for c in clips])
        probs = self._late_fuse(rgb, pose, self.fusion)
        # downstream argmax works on probabilities; keep them in log space
        return np.log(np.clip(probs, 1e-300, None))


def compare_runs(report_a: EvalReport, report_b: EvalReport) -> dict:
    """Per-class recall deltas (B - A) and class-pair confusion improvements.

    A pair (i, j) improves by the reduction in off-diagonal count i->j going
    from run A to run B.
    """
    if report_a.confusion.shape != report_b.confusion.shape:
        raise ContractError("reports cover different class sets")
    deltas = report_b.per_class_recall - report_a.per_class_recall
    order = np.argsort(-np.nan_to_num(deltas, nan=-np.inf))
    class_deltas = [(int(c), float(deltas[c])) for c in order
                    if not np.isnan(deltas[c])]
    diff = report_a.confusion - report_b.confusion
    np.fill_diagonal(diff, 0)
    pairs = [((int(i), int(j)), int(diff[i, j]))
             for i, j in zip(*np.nonzero(diff))]
    pairs.sort(key=lambda item: (-item[1], item[0]))
    return {"class_deltas": class_deltas, "pair_improvements": pairs}


def joint_token_distance_profile(model: VideoTransformer,
                                 samples: list[LabeledSample]) -> np.ndarray:
    """Mean pairwise feature distance between joint-bearing tokens per layer.

    Joint-bearing tokens are those whose patch contains any 2D joint; the
    distance is Euclidean on post-block token features, averaged over all
    token pairs and then over samples. Layers with fewer than two joint
    tokens in a sample skip that sample.
    """
    cfg = model.cfg
    depth = cfg.depth
    sums = np.zeros(depth)
    counts = np.zeros(depth, dtype=np.int64)
    for sample in samples:
        if sample.pose2d is None:
            raise ConfigError(f"sample {sample.clip.id} has no 2D pose")
        pixel = build_pixel_map(sample.pose2d, cfg.height, cfg.width)
        bits = pool_token_map(pixel, cfg).bits.max(axis=2)  # (T_v, S_v) any joint
        mask = bits.reshape(-1).astype(bool)
        if mask.sum() < 2:
            continue
        out = model.forward_with_taps(sample.clip, range(1, depth + 1))
        for layer, tap in out.taps.items():
            feats = tap.tokens[1:][mask]  # joint-bearing patch rows
            diffs = feats[:, None, :] - feats[None, :, :]
            dist = np.sqrt((diffs ** 2).sum(axis=-1))
            iu = np.triu_indices(len(feats), k=1)
            sums[layer - 1] += dist[iu].mean()
            counts[layer - 1] += 1
    if not counts.all():
        log.warning("some layers had no sample with >= 2 joint tokens")
    with np.errstate(invalid="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def ranking_auc(scores, targets) -> float:
    """Area under the ROC curve via the rank statistic; ties share ranks."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    targets = np.asarray(targets).reshape(-1).astype(bool)
    pos, neg = targets.sum(), (~targets).sum()
    if pos == 0 or neg == 0:
        raise ConfigError("AUC needs both positive and negative targets")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    ranks[order] = np.arange(1, len(scores) + 1)
    # average ranks over tied score groups
    sorted_scores = scores[order]
    start = 0
    for end in range(1, len(scores) + 1):
        if end == len(scores) or sorted_scores[end] != sorted_scores[start]:
            ranks[order[start:end]] = ranks[order[start:end]].mean()
            start = end
    return float((ranks[targets].sum() - pos * (pos + 1) / 2) / (pos * neg))


def token_map_auc(backbone: VideoTransformer, head: TokenMapHead,
                  samples: list[LabeledSample]) -> float:
    """Joint-presence AUC of a trained map head over held-out samples."""
    cfg = backbone.cfg
    all_scores, all_targets = [], []
    for sample in samples:
        if sample.pose2d is None:
            raise ConfigError(f"sample {sample.clip.id} has no 2D pose")
        pixel = build_pixel_map(sample.pose2d, cfg.height, cfg.width)
        bits = pool_token_map(pixel, cfg).bits
        if head.head_cfg.variant == "flat":
            bits = bits.max(axis=2, keepdims=True)
        out = backbone.forward_with_taps(sample.clip, (head.head_cfg.tap_layer,))
        tokens = torch.as_tensor(out.taps[head.head_cfg.tap_layer].tokens,
                                 dtype=CHECKPOINT_DTYPE).unsqueeze(0)
        with torch.no_grad():
            logits, _ = head(tokens)
        all_scores.append(logits[0].numpy().reshape(-1))
        all_targets.append(bits.reshape(-1))
    return ranking_auc(np.concatenate(all_scores), np.concatenate(all_targets))


def dump_predictions(path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")
