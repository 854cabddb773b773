import math
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import micro_components
from evseg.backbones import MaskSet
from evseg.errors import ConfigError, InvalidArgumentError, InvalidInputError
from evseg.evaluation import (
    ClassMergeMap,
    MetricsReport,
    SegmentationMap,
    assemble_semantic,
    compute_metrics,
    confusion_matrix,
    merge_classes,
    metrics_from_confusion,
)

MERGE_DIR = Path(__file__).resolve().parents[1] / "src" / "evseg" / "merges"


def brute_force_metrics(pred, gt, num_classes):
    """Independent per-pixel tally oracle."""
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for g, p in zip(gt.reshape(-1), pred.reshape(-1)):
        conf[g, p] += 1
    iou = {}
    for c in range(num_classes):
        tp = conf[c, c]
        fp = conf[:, c].sum() - tp
        fn = conf[c, :].sum() - tp
        if tp + fp + fn > 0:
            iou[c] = tp / (tp + fp + fn)
    miou = sum(iou.values()) / len(iou) if iou else 0.0
    acc = np.trace(conf) / conf.sum() if conf.sum() else 0.0
    return conf, iou, miou, acc


class TestSegmentationMap:
    def test_from_soft_validates_rows(self):
        bad = np.full((2, 2, 3), 0.5)
        with pytest.raises(InvalidInputError):
            SegmentationMap.from_soft(bad, ["a", "b", "c"])

    def test_hard_is_argmax(self):
        soft = np.zeros((1, 2, 3))
        soft[0, 0] = [0.2, 0.5, 0.3]
        soft[0, 1] = [0.6, 0.1, 0.3]
        m = SegmentationMap.from_soft(soft, ["a", "b", "c"])
        assert m.hard.tolist() == [[1, 0]]

    def test_from_labels_one_hot(self):
        m = SegmentationMap.from_labels(np.array([[0, 2]]), ["a", "b", "c"])
        assert m.soft[0, 1, 2] == 1.0
        assert m.soft[0, 1].sum() == 1.0


class TestAssembleSemantic:
    def test_single_query_full_mask_large_temperature(self, micro):
        cm = torch.eye(4, dtype=torch.float64)[:3]  # orthonormal class rows
        masks = MaskSet(torch.full((1, 8, 8), 10.0, dtype=torch.float64),
                        cm[0:1].clone(), [])
        seg = assemble_semantic(masks, cm, temperature=100.0, vocabulary=["a", "b", "c"])
        assert np.all(seg.hard == 0)

    def test_two_disjoint_masks_partition(self, micro):
        cm = torch.eye(4, dtype=torch.float64)[:2]
        left = torch.full((8, 8), -12.0, dtype=torch.float64)
        left[:, :4] = 12.0
        right = -left
        masks = MaskSet(torch.stack([left, right]), cm.clone(), [])
        seg = assemble_semantic(masks, cm, temperature=100.0, vocabulary=["a", "b"])
        assert np.all(seg.hard[:, :4] == 0)
        assert np.all(seg.hard[:, 4:] == 1)

    def test_rows_sum_to_one(self, micro):
        gen = torch.Generator().manual_seed(0)
        masks = MaskSet(torch.randn(5, 6, 6, dtype=torch.float64, generator=gen),
                        torch.randn(5, 4, dtype=torch.float64, generator=gen), [])
        cm = torch.randn(3, 4, dtype=torch.float64, generator=gen)
        cm = cm / cm.norm(dim=1, keepdim=True)
        seg = assemble_semantic(masks, cm, temperature=7.0)
        np.testing.assert_allclose(seg.soft.sum(axis=2), 1.0, atol=1e-5)

    def test_no_object_column_excluded_and_renormalized(self, micro):
        cm = torch.eye(4, dtype=torch.float64)[:2]
        masks = MaskSet(torch.zeros(1, 4, 4, dtype=torch.float64),
                        torch.tensor([[0.0, 0.0, 5.0, 0.0]], dtype=torch.float64), [])
        no_obj = torch.tensor([0.0, 0.0, 1.0, 0.0], dtype=torch.float64)
        seg = assemble_semantic(masks, cm, temperature=3.0, no_object=no_obj,
                                vocabulary=["a", "b"])
        np.testing.assert_allclose(seg.soft.sum(axis=2), 1.0, atol=1e-12)
        np.testing.assert_allclose(seg.soft[..., 0], 0.5, atol=1e-9)

    def test_rescaling_embeddings_with_inverse_temperature_invariant(self, micro):
        gen = torch.Generator().manual_seed(1)
        emb = torch.randn(3, 4, dtype=torch.float64, generator=gen)
        logits = torch.randn(3, 5, 5, dtype=torch.float64, generator=gen)
        cm = torch.randn(2, 4, dtype=torch.float64, generator=gen)
        a = assemble_semantic(MaskSet(logits, emb, []), cm, temperature=8.0)
        b = assemble_semantic(MaskSet(logits, 2.0 * emb, []), cm, temperature=4.0)
        np.testing.assert_allclose(a.soft, b.soft, atol=1e-9)

    def test_dimension_mismatch(self, micro):
        masks = MaskSet(torch.zeros(1, 4, 4, dtype=torch.float64),
                        torch.zeros(1, 4, dtype=torch.float64), [])
        with pytest.raises(InvalidArgumentError):
            assemble_semantic(masks, torch.zeros(2, 6, dtype=torch.float64), 1.0)


class TestMergeClasses:
    def seg(self):
        soft = np.zeros((1, 1, 3))
        soft[0, 0] = [0.3, 0.4, 0.3]
        return SegmentationMap.from_soft(soft, ["road", "pavement", "sky"])

    def test_identity_merge_unchanged(self):
        m = self.seg()
        identity = ClassMergeMap({c: c for c in m.vocabulary})
        out = merge_classes(m, identity)
        assert out.vocabulary == m.vocabulary
        np.testing.assert_array_equal(out.soft, m.soft)
        np.testing.assert_array_equal(out.hard, m.hard)

    def test_group_mass_sums(self):
        out = merge_classes(self.seg(), ClassMergeMap(
            {"road": "flat", "pavement": "flat", "sky": "background"}))
        assert out.vocabulary == ("flat", "background")
        assert out.soft[0, 0, 0] == pytest.approx(0.7)
        assert out.hard[0, 0] == 0

    def test_merge_all_to_one(self):
        out = merge_classes(self.seg(), ClassMergeMap(
            {"road": "stuff", "pavement": "stuff", "sky": "stuff"}))
        assert out.vocabulary == ("stuff",)
        assert np.all(out.hard == 0)

    def test_unmapped_class_lists_name(self):
        with pytest.raises(ConfigError) as err:
            merge_classes(self.seg(), ClassMergeMap({"road": "flat", "pavement": "flat"}))
        assert "sky" in str(err.value)


class TestComputeMetrics:
    def test_perfect_prediction(self):
        labels = np.array([[0, 1], [2, 1]])
        m = SegmentationMap.from_labels(labels, ["a", "b", "c"])
        report = compute_metrics(m, m)
        assert report.miou == 1.0
        assert report.accuracy == 1.0

    def test_two_class_half_right(self):
        gt = SegmentationMap.from_labels(np.array([[0, 0], [1, 1]]), ["a", "b"])
        pred = SegmentationMap.from_labels(np.zeros((2, 2), np.int64), ["a", "b"])
        report = compute_metrics(pred, gt)
        assert report.per_class_iou["a"] == pytest.approx(0.5)
        assert report.per_class_iou["b"] == pytest.approx(0.0)
        assert report.miou == pytest.approx(0.25)
        assert report.accuracy == pytest.approx(0.5)

    def test_all_ignored_flags_empty(self):
        gt = SegmentationMap.from_labels(np.zeros((2, 2), np.int64), ["void", "b"])
        pred = SegmentationMap.from_labels(np.ones((2, 2), np.int64), ["void", "b"])
        report = compute_metrics(pred, gt, ignore_label="void")
        assert report.empty
        assert report.miou == 0.0 and report.accuracy == 0.0

    def test_absent_class_excluded_from_mean(self):
        gt = SegmentationMap.from_labels(np.array([[0, 0]]), ["a", "b", "c"])
        pred = SegmentationMap.from_labels(np.array([[0, 0]]), ["a", "b", "c"])
        report = compute_metrics(pred, gt)
        assert report.per_class_iou["b"] is None
        assert report.miou == 1.0

    def test_vocabulary_mismatch(self):
        a = SegmentationMap.from_labels(np.zeros((1, 1), np.int64), ["a"])
        b = SegmentationMap.from_labels(np.zeros((1, 1), np.int64), ["b"])
        with pytest.raises(InvalidArgumentError):
            compute_metrics(a, b)

    @settings(max_examples=60, deadline=None, derandomize=True)
    @given(st.integers(2, 6), st.integers(0, 2 ** 31 - 1))
    def test_matches_brute_force_oracle(self, num_classes, seed):
        rng = np.random.default_rng(seed)
        gt = rng.integers(0, num_classes, (16, 16))
        pred = rng.integers(0, num_classes, (16, 16))
        report = metrics_from_confusion(
            confusion_matrix(gt, pred, num_classes), [f"c{i}" for i in range(num_classes)])
        conf, iou, miou, acc = brute_force_metrics(pred, gt, num_classes)
        np.testing.assert_array_equal(report.confusion, conf)
        assert report.miou == pytest.approx(miou, abs=1e-12)
        assert report.accuracy == pytest.approx(acc, abs=1e-12)
        for c, v in iou.items():
            assert report.per_class_iou[f"c{c}"] == pytest.approx(v, abs=1e-12)

    def test_merge_commutes_with_confusion_aggregation(self):
        rng = np.random.default_rng(7)
        vocab = ["a", "b", "c", "d"]
        merge = ClassMergeMap({"a": "x", "b": "x", "c": "y", "d": "y"})
        gt = rng.integers(0, 4, (12, 12))
        pred = rng.integers(0, 4, (12, 12))
        # route 1: merge hard maps, then confusion
        lookup = np.array([0, 0, 1, 1])
        direct = confusion_matrix(lookup[gt], lookup[pred], 2)
        # route 2: group-sum the fine confusion matrix
        fine = confusion_matrix(gt, pred, 4)
        grouped = np.zeros((2, 2), dtype=np.int64)
        for i in range(4):
            for j in range(4):
                grouped[lookup[i], lookup[j]] += fine[i, j]
        np.testing.assert_array_equal(direct, grouped)
        a = metrics_from_confusion(direct, ["x", "y"])
        b = metrics_from_confusion(grouped, ["x", "y"])
        assert a.miou == b.miou and a.accuracy == b.accuracy


class TestShippedMergeMaps:
    def test_six_class_driving_map(self):
        merge = ClassMergeMap.from_file(MERGE_DIR / "ddd17_six_class.yaml")
        fine = ["road", "pavement", "construction", "sky", "pole", "pole group",
                "traffic light", "traffic sign", "vegetation", "human", "vehicle"]
        merged = merge.merged_vocabulary(fine)
        assert set(merged) == {"flat", "background", "object", "vegetation", "human", "vehicle"}
        assert len(merged) == 6

    def test_eleven_class_driving_map(self):
        merge = ClassMergeMap.from_file(MERGE_DIR / "dsec_eleven_class.yaml")
        fine = ["road", "sidewalk", "building", "wall", "fence", "pole", "traffic light",
                "traffic sign", "vegetation", "terrain", "sky", "person", "rider", "car",
                "truck", "bus", "train", "motorcycle", "bicycle"]
        merged = merge.merged_vocabulary(fine)
        assert set(merged) == {"background", "building", "fence", "person", "pole", "road",
                               "sidewalk", "vegetation", "car", "wall", "traffic sign"}
        assert len(merged) == 11
