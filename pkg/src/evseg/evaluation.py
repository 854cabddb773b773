"""Semantic-map assembly, class merging, and segmentation metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from .backbones import MaskSet, TextEncoder, embed_classes
from .distill import normalize_mixture
from .errors import ConfigError, InvalidArgumentError, InvalidInputError


@dataclass(frozen=True)
class SegmentationMap:
    """Per-pixel class distribution plus its argmax labels over a vocabulary."""

    soft: np.ndarray          # H x W x C
    hard: np.ndarray          # H x W int64
    vocabulary: tuple

    @staticmethod
    def from_soft(soft: np.ndarray, vocabulary) -> "SegmentationMap":
        soft = np.asarray(soft, dtype=np.float64)
        if soft.ndim != 3 or soft.shape[2] != len(vocabulary):
            raise InvalidArgumentError("soft map must be H x W x len(vocabulary)")
        sums = soft.sum(axis=2)
        if not np.allclose(sums, 1.0, atol=1e-5):
            raise InvalidInputError("per-pixel class values must sum to 1 (within 1e-5)")
        return SegmentationMap(soft, soft.argmax(axis=2).astype(np.int64), tuple(vocabulary))

    @staticmethod
    def from_labels(labels: np.ndarray, vocabulary) -> "SegmentationMap":
        labels = np.asarray(labels, dtype=np.int64)
        c = len(vocabulary)
        if labels.min() < 0 or labels.max() >= c:
            raise InvalidArgumentError("label index outside the vocabulary")
        soft = np.eye(c, dtype=np.float64)[labels]
        return SegmentationMap(soft, labels, tuple(vocabulary))

    @property
    def shape(self):
        return self.hard.shape


def assemble_mixture(mask_set: MaskSet, class_matrix: torch.Tensor, temperature,
                     no_object: torch.Tensor | None = None):
    """Differentiable core of semantic assembly.

    Returns the unnormalized per-pixel class mixture S (B x C x H x W, strictly
    positive) and the per-query class distributions p (B x Q x C).  When a
    no-object row is supplied, the softmax runs over C+1 columns and the
    no-object mass is dropped and renormalized away.
    """
    emb = mask_set.mask_embeddings
    logits = mask_set.mask_logits
    squeezed = emb.ndim == 2
    if squeezed:
        emb = emb.unsqueeze(0)
        logits = logits.unsqueeze(0)
    if emb.shape[-1] != class_matrix.shape[-1]:
        raise InvalidArgumentError(
            f"embedding width {emb.shape[-1]} != class embedding width {class_matrix.shape[-1]}")
    temperature = torch.as_tensor(temperature, dtype=emb.dtype)
    if no_object is not None:
        cols = torch.cat([class_matrix, no_object.unsqueeze(0)], dim=0)
        full = torch.softmax(temperature * (emb @ cols.transpose(0, 1)), dim=-1)
        p = full[..., :-1]
        p = p / p.sum(dim=-1, keepdim=True)
    else:
        p = torch.softmax(temperature * (emb @ class_matrix.transpose(0, 1)), dim=-1)
    weights = torch.sigmoid(logits)                       # B x Q x H x W
    mix = torch.einsum("bqc,bqhw->bchw", p, weights)
    if squeezed:
        return mix, p
    return mix, p


def assemble_semantic(mask_set: MaskSet, class_matrix: torch.Tensor, temperature,
                      no_object: torch.Tensor | None = None,
                      vocabulary=None) -> SegmentationMap:
    """Assemble one sample's masks and embeddings into a SegmentationMap."""
    if mask_set.mask_embeddings.ndim != 2:
        raise InvalidArgumentError("assemble_semantic expects a single (unbatched) mask set")
    with torch.no_grad():
        mix, _ = assemble_mixture(mask_set, class_matrix, temperature, no_object)
        soft = normalize_mixture(mix)[0].permute(1, 2, 0).numpy()
    if vocabulary is None:
        vocabulary = tuple(f"class_{i}" for i in range(class_matrix.shape[0]))
    return SegmentationMap.from_soft(soft, vocabulary)


# --------------------------------------------------------------------------
# Class merging
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassMergeMap:
    """Total mapping from fine class names to merged class names."""

    mapping: dict

    @staticmethod
    def from_file(path) -> "ClassMergeMap":
        data = yaml.safe_load(Path(path).read_text())
        if not isinstance(data, dict) or not data:
            raise ConfigError(f"merge file {path} must be a non-empty mapping")
        return ClassMergeMap({str(k): str(v) for k, v in data.items()})

    def merged_vocabulary(self, vocabulary) -> tuple:
        missing = [name for name in vocabulary if name not in self.mapping]
        if missing:
            raise ConfigError(f"merge map does not cover classes: {missing}")
        out = []
        for name in vocabulary:
            target = self.mapping[name]
            if target not in out:
                out.append(target)
        return tuple(out)


def merge_classes(segmap: SegmentationMap, merge: ClassMergeMap) -> SegmentationMap:
    """Sum soft mass within merged groups and recompute the hard labels."""
    merged_vocab = merge.merged_vocabulary(segmap.vocabulary)
    index = {name: i for i, name in enumerate(merged_vocab)}
    h, w, _ = segmap.soft.shape
    soft = np.zeros((h, w, len(merged_vocab)), dtype=np.float64)
    for i, name in enumerate(segmap.vocabulary):
        soft[:, :, index[merge.mapping[name]]] += segmap.soft[:, :, i]
    return SegmentationMap(soft, soft.argmax(axis=2).astype(np.int64), merged_vocab)


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


@dataclass
class MetricsReport:
    vocabulary: tuple
    confusion: np.ndarray           # C x C int64, rows = ground truth
    per_class_iou: dict
    miou: float
    accuracy: float
    total_pixels: int
    skipped: int = 0
    empty: bool = False
    per_sample: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "vocabulary": list(self.vocabulary),
            "confusion": self.confusion.tolist(),
            "per_class_iou": {k: self.per_class_iou[k] for k in sorted(self.per_class_iou)},
            "miou": self.miou,
            "accuracy": self.accuracy,
            "total_pixels": self.total_pixels,
            "skipped": self.skipped,
            "empty": self.empty,
        }


def confusion_matrix(gt_hard: np.ndarray, pred_hard: np.ndarray, num_classes: int,
                     ignore_index: int | None = None) -> np.ndarray:
    """Integer confusion counts over non-ignored pixels (rows = ground truth)."""
    gt = np.asarray(gt_hard).reshape(-1)
    pred = np.asarray(pred_hard).reshape(-1)
    if gt.shape != pred.shape:
        raise InvalidArgumentError("prediction and ground truth sizes differ")
    keep = np.ones(gt.shape, dtype=bool) if ignore_index is None else gt != ignore_index
    counts = np.bincount(num_classes * gt[keep] + pred[keep], minlength=num_classes ** 2)
    return counts.reshape(num_classes, num_classes).astype(np.int64)


def metrics_from_confusion(confusion: np.ndarray, vocabulary, skipped: int = 0,
                           per_sample=None) -> MetricsReport:
    """Derive IoU / accuracy from summed confusion counts.

    Classes absent from both ground truth and prediction are excluded from the
    mIoU mean.  An all-zero confusion yields a flagged empty report.
    """
    confusion = np.asarray(confusion, dtype=np.int64)
    tp = np.diag(confusion).astype(np.float64)
    fn = confusion.sum(axis=1) - tp
    fp = confusion.sum(axis=0) - tp
    union = tp + fp + fn
    present = union > 0
    iou = np.zeros(len(vocabulary), dtype=np.float64)
    iou[present] = tp[present] / union[present]
    total = int(confusion.sum())
    empty = total == 0
    per_class = {name: (float(iou[i]) if present[i] else None) for i, name in enumerate(vocabulary)}
    miou = float(iou[present].mean()) if present.any() else 0.0
    accuracy = float(tp.sum() / total) if total else 0.0
    return MetricsReport(tuple(vocabulary), confusion, per_class, miou, accuracy,
                         total, skipped, empty, list(per_sample or []))


def compute_metrics(pred: SegmentationMap, gt: SegmentationMap,
                    ignore_label: str | None = None) -> MetricsReport:
    """Confusion-matrix metrics between two maps over the same vocabulary."""
    if pred.vocabulary != gt.vocabulary:
        raise InvalidArgumentError(
            f"vocabulary mismatch: {pred.vocabulary} vs {gt.vocabulary}")
    if pred.shape != gt.shape:
        raise InvalidArgumentError("prediction and ground truth geometry differ")
    ignore_index = None
    if ignore_label is not None:
        if ignore_label not in gt.vocabulary:
            raise InvalidArgumentError(f"ignore label {ignore_label!r} not in vocabulary")
        ignore_index = gt.vocabulary.index(ignore_label)
    conf = confusion_matrix(gt.hard, pred.hard, len(gt.vocabulary), ignore_index)
    return metrics_from_confusion(conf, gt.vocabulary)


# --------------------------------------------------------------------------
# Full event-branch evaluation
# --------------------------------------------------------------------------


def evaluate(event_branch, reconstructor, dataset, vocabulary, text_encoder: TextEncoder,
             head, templates=None, merge: ClassMergeMap | None = None,
             ignore_label: str | None = None, overlay_dir=None) -> MetricsReport:
    """Reconstruct, forward the event branch, assemble, and score every sample.

    ``dataset`` provides samples with an event stream, a paired frame (used
    only by the identity reconstructor), and ground-truth labels over
    ``dataset.class_names``.  Predictions are assembled over ``vocabulary``
    (the open-vocabulary query classes) and compared against the ground truth
    positionally when the name sets differ, so synonym vocabularies evaluate
    without error.  Samples with mismatched geometry are skipped and counted.
    """
    from .data import save_overlay  # local import to keep module graphs acyclic

    templates = list(templates) if templates else ["a photo of a {}"]
    vocabulary = list(vocabulary)
    gt_vocab = list(dataset.class_names)
    if len(vocabulary) != len(gt_vocab):
        raise InvalidArgumentError(
            f"query vocabulary size {len(vocabulary)} != ground-truth classes {len(gt_vocab)}")
    class_matrix = embed_classes(text_encoder, vocabulary, templates)

    eval_vocab = tuple(vocabulary)
    if merge is not None:
        eval_vocab = merge.merged_vocabulary(vocabulary)
        gt_merge_lookup = _merge_lookup(gt_vocab, vocabulary, merge, eval_vocab)

    num_classes = len(eval_vocab)
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    skipped = 0
    per_sample = []
    with torch.no_grad():
        for sample in dataset.samples:
            if sample.labels is None:
                skipped += 1
                continue
            recon = reconstructor.reconstruct(sample.stream, frame=sample.image)
            if recon.shape != sample.labels.shape:
                skipped += 1
                continue
            x = torch.from_numpy(np.ascontiguousarray(recon)).to(class_matrix.dtype)
            out = event_branch.forward(x.unsqueeze(0).unsqueeze(0))
            segmap = assemble_semantic(out.masks.sample(0), class_matrix, head.temperature,
                                       head.no_object, vocabulary)
            if merge is not None:
                segmap = merge_classes(segmap, merge)
                gt_hard = gt_merge_lookup[sample.labels]
            else:
                gt_hard = sample.labels
            ignore_index = None
            if ignore_label is not None and ignore_label in eval_vocab:
                ignore_index = eval_vocab.index(ignore_label)
            sample_conf = confusion_matrix(gt_hard, segmap.hard, num_classes, ignore_index)
            conf += sample_conf
            per_sample.append({"id": sample.seq_id,
                               "miou": metrics_from_confusion(sample_conf, eval_vocab).miou})
            if overlay_dir is not None:
                save_overlay(Path(overlay_dir) / f"{sample.seq_id}.png", recon,
                             segmap.hard, num_classes)
    return metrics_from_confusion(conf, eval_vocab, skipped, per_sample)


def _merge_lookup(gt_vocab, query_vocab, merge: ClassMergeMap, merged_vocab) -> np.ndarray:
    """Index remap of ground-truth labels into the merged vocabulary.

    Ground-truth classes are matched to query classes by name when possible
    and positionally otherwise (synonym vocabularies).
    """
    lookup = np.zeros(len(gt_vocab), dtype=np.int64)
    for i, name in enumerate(gt_vocab):
        fine = name if name in merge.mapping else query_vocab[i]
        lookup[i] = merged_vocab.index(merge.mapping[fine])
    return lookup
