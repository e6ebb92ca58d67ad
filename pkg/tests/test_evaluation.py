"""Scene generation, panoptic assembly, and metric tests."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eovseg.classifier import MaskLabel
from eovseg.decoder import MaskSet
from eovseg.evaluation import (
    PanopticAnnotation,
    SceneSpec,
    SegmentRecord,
    assemble_panoptic,
    generate_scene,
    match_segments,
    miou,
    pq_metrics,
)
from eovseg.tensor import Rng


class TestSceneGeneration:
    def test_one_disk_one_background_two_segments(self):
        spec = SceneSpec(
            height=64, width=64, stuff_classes=("bg",), thing_classes=("disk",), n_shapes=1, seed=5
        )
        # force the single shape to be a disk by scanning seeds
        for seed in range(20):
            spec = SceneSpec(
                height=64, width=64, stuff_classes=("bg",), thing_classes=("disk",), n_shapes=1, seed=seed
            )
            image, gt, templates = generate_scene(spec)
            if len(gt.segments) == 2:
                break
        assert len(gt.segments) == 2
        assert image.shape == (3, 64, 64)
        assert templates.shape == (spec.n_templates, 2, spec.embed_dim)

    def test_determinism(self):
        spec = SceneSpec(seed=9)
        i1, g1, t1 = generate_scene(spec)
        i2, g2, t2 = generate_scene(spec)
        assert np.array_equal(i1, i2)
        assert np.array_equal(g1.segment_map, g2.segment_map)
        assert np.array_equal(t1, t2)
        assert [(s.segment_id, s.class_id, s.is_thing) for s in g1.segments] == [
            (s.segment_id, s.class_id, s.is_thing) for s in g2.segments
        ]

    def test_occlusion_z_order(self):
        # draw many shapes; wherever two segments could overlap, the later id owns it
        spec = SceneSpec(seed=3, n_shapes=6)
        _, gt, _ = generate_scene(spec)
        ids = sorted({int(i) for i in np.unique(gt.segment_map)})
        assert all(i > 0 for i in ids)  # background always covers, no void
        # rasterize again by hand and confirm the final map matches draw order:
        # the generator assigns strictly increasing ids, so any overlap pixel
        # must hold the larger id; verified indirectly by record consistency
        record_ids = {s.segment_id for s in gt.segments}
        assert set(ids) == record_ids

    def test_every_map_id_has_record(self):
        _, gt, _ = generate_scene(SceneSpec(seed=11, n_shapes=5))
        record_ids = {s.segment_id for s in gt.segments}
        for sid in np.unique(gt.segment_map):
            if sid != 0:
                assert int(sid) in record_ids

    def test_template_embeddings_deterministic_per_class(self):
        s1 = SceneSpec(seed=1)
        s2 = SceneSpec(seed=2)  # different scene seed, same classes
        _, _, t1 = generate_scene(s1)
        _, _, t2 = generate_scene(s2)
        assert np.array_equal(t1, t2)  # templates derive from class indices only

    def test_semantic_map_roundtrip(self):
        _, gt, _ = generate_scene(SceneSpec(seed=21))
        sem = gt.semantic_map()
        for s in gt.segments:
            pix = gt.segment_map == s.segment_id
            assert np.all(sem[pix] == s.class_id)


class TestMatching:
    def _two_box_gt(self):
        seg = np.zeros((10, 10), dtype=np.int32)
        seg[:5] = 1
        seg[5:] = 2
        return PanopticAnnotation(
            segment_map=seg, segments=[SegmentRecord(1, 0, True), SegmentRecord(2, 1, True)]
        )

    def test_identity_matches_all_with_iou_one(self):
        gt = self._two_box_gt()
        matches = match_segments(gt, gt)
        assert len(matches) == 2
        assert all(m.iou == 1.0 for m in matches)

    def test_disjoint_no_matches(self):
        gt = self._two_box_gt()
        pred_map = np.zeros((10, 10), dtype=np.int32)
        pred_map[:5] = 2
        pred_map[5:] = 1
        pred = PanopticAnnotation(
            segment_map=pred_map, segments=[SegmentRecord(1, 0, True), SegmentRecord(2, 1, True)]
        )
        assert match_segments(pred, gt) == []

    def test_partial_overlap_iou_hand_count(self):
        # gt segment: 100 px; pred: 100 px, 80 inside -> IoU = 80 / 120
        seg = np.zeros((20, 10), dtype=np.int32)
        seg[:10] = 1
        gt = PanopticAnnotation(
            segment_map=seg,
            segments=[SegmentRecord(1, 0, True)],
        )
        # remaining gt pixels belong to another class so they are not void
        seg2 = seg.copy()
        seg2[10:] = 2
        gt = PanopticAnnotation(
            segment_map=seg2, segments=[SegmentRecord(1, 0, True), SegmentRecord(2, 1, True)]
        )
        pred_map = np.zeros((20, 10), dtype=np.int32)
        pred_map[2:12] = 1
        pred_map[pred_map == 0] = 2
        pred = PanopticAnnotation(
            segment_map=pred_map, segments=[SegmentRecord(1, 0, True), SegmentRecord(2, 1, True)]
        )
        matches = {m.pred_id: m for m in match_segments(pred, gt)}
        assert abs(matches[1].iou - 80 / 120) < 1e-9

    def test_class_mismatch_blocks_match(self):
        gt = self._two_box_gt()
        pred = PanopticAnnotation(
            segment_map=gt.segment_map.copy(),
            segments=[SegmentRecord(1, 1, True), SegmentRecord(2, 0, True)],
        )
        assert match_segments(pred, gt) == []


def _random_annotation(rng, h=12, w=12, n_seg=4, n_class=3):
    seg = rng.integers(0, n_seg + 1, size=(h, w)).astype(np.int32)
    records = [
        SegmentRecord(int(sid), int(rng.integers(0, n_class)), bool(rng.integers(0, 2)))
        for sid in np.unique(seg)
        if sid != 0
    ]
    return PanopticAnnotation(segment_map=seg, segments=records)


class TestPqMetrics:
    def test_perfect_prediction(self):
        gt = _random_annotation(Rng(1))
        r = pq_metrics(gt, gt)
        assert r.pq == 1.0 and r.sq == 1.0 and r.rq == 1.0

    def test_hand_case_one_tp_one_fn(self):
        seg = np.zeros((10, 10), dtype=np.int32)
        seg[:5] = 1
        seg[5:] = 2
        gt = PanopticAnnotation(
            segment_map=seg, segments=[SegmentRecord(1, 0, True), SegmentRecord(2, 0, True)]
        )
        pred_map = np.zeros((10, 10), dtype=np.int32)
        pred_map[:4] = 1  # 40/50 overlap with gt 1 -> IoU 0.8; gt 2 unmatched
        pred = PanopticAnnotation(segment_map=pred_map, segments=[SegmentRecord(1, 0, True)])
        c = pq_metrics(pred, gt).per_class[0]
        assert (c.tp, c.fp, c.fn) == (1, 0, 1)
        assert abs(c.pq - 0.5333) < 1e-4
        assert abs(c.sq - 0.8) < 1e-9
        assert abs(c.rq - 2 / 3) < 1e-9

    def test_empty_prediction(self):
        gt = _random_annotation(Rng(2))
        empty = PanopticAnnotation(segment_map=np.zeros_like(gt.segment_map), segments=[])
        assert pq_metrics(empty, gt).pq == 0.0

    def test_identity_pq_sq_rq_on_random_pairs(self):
        rng = Rng(3)
        for _ in range(200):
            pred = _random_annotation(rng)
            gt = _random_annotation(rng)
            for c in pq_metrics(pred, gt).per_class.values():
                if c.tp > 0:
                    assert abs(c.pq - c.sq * c.rq) < 1e-9
                assert 0.0 <= c.pq <= 1.0 and 0.0 <= c.sq <= 1.0 and 0.0 <= c.rq <= 1.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 1_000_000))
    def test_relabeling_symmetry(self, seed, offset):
        rng = Rng(seed)
        pred = _random_annotation(rng)
        gt = _random_annotation(rng)
        base = pq_metrics(pred, gt)
        remap = PanopticAnnotation(
            segment_map=np.where(pred.segment_map > 0, pred.segment_map + offset, 0).astype(np.int32),
            segments=[
                SegmentRecord(s.segment_id + offset, s.class_id, s.is_thing) for s in pred.segments
            ],
        )
        relabeled = pq_metrics(remap, gt)
        assert abs(base.pq - relabeled.pq) < 1e-12
        assert abs(base.sq - relabeled.sq) < 1e-12
        assert abs(base.rq - relabeled.rq) < 1e-12


class TestMiou:
    def test_perfect(self):
        sem = _random_annotation(Rng(4)).semantic_map()
        assert miou(sem, sem) == 1.0

    def test_complement_two_class_split(self):
        gt = np.zeros((4, 4), dtype=np.int32)
        gt[2:] = 1
        pred = 1 - gt
        assert miou(pred, gt) == 0.0

    def test_hand_pixel_count(self):
        gt = np.zeros((10, 10), dtype=np.int32)  # single class 0 everywhere
        pred = np.full((10, 10), 1, dtype=np.int32)
        pred[:5] = 0  # covers half of the class -> IoU = 50/100
        assert abs(miou(pred, gt) - 0.5) < 1e-12

    def test_gt_void_excluded(self):
        gt = np.full((4, 4), -1, dtype=np.int32)
        gt[0, 0] = 2
        pred = np.full((4, 4), 2, dtype=np.int32)
        # union restricted to non-void gt pixels: the single pixel matches
        assert miou(pred, gt) == 1.0


class TestAssembly:
    def test_no_labels_gives_void_map(self):
        masks = MaskSet(logits=Rng(5).normal((3, 4, 4)))
        out = assemble_panoptic(masks, [], np.array([True]), upsample_factor=4)
        assert out.segment_map.shape == (16, 16)
        assert np.all(out.segment_map == 0)
        assert out.segments == []

    def test_winner_takes_pixels(self):
        logits = np.full((2, 4, 4), -10.0, dtype=np.float32)
        logits[0, :, :2] = 10.0
        logits[1, :, 2:] = 10.0
        masks = MaskSet(logits=logits)
        labels = [
            MaskLabel(mask_index=0, class_id=0, confidence=0.9),
            MaskLabel(mask_index=1, class_id=1, confidence=0.9),
        ]
        out = assemble_panoptic(masks, labels, np.array([True, True]), upsample_factor=1)
        assert np.all(out.segment_map[:, 0] == 1)
        assert np.all(out.segment_map[:, 3] == 2)
        assert len(out.segments) == 2

    def test_stuff_segments_merged_by_class(self):
        logits = np.full((2, 4, 4), -10.0, dtype=np.float32)
        logits[0, :, :1] = 10.0
        logits[1, :, 3:] = 10.0
        masks = MaskSet(logits=logits)
        labels = [
            MaskLabel(mask_index=0, class_id=7, confidence=0.9),
            MaskLabel(mask_index=1, class_id=7, confidence=0.9),
        ]
        is_thing = np.zeros(8, dtype=bool)
        out = assemble_panoptic(masks, labels, is_thing, upsample_factor=1)
        assert len(out.segments) == 1
        assert out.segments[0].class_id == 7 and not out.segments[0].is_thing
        assert np.all(out.segment_map[:, 0] == out.segment_map[:, 3])

    def test_upsampled_extents(self):
        masks = MaskSet(logits=Rng(6).normal((2, 4, 4)))
        labels = [MaskLabel(0, 0, 0.5), MaskLabel(1, 0, 0.6)]
        out = assemble_panoptic(masks, labels, np.array([True]), upsample_factor=4)
        assert out.segment_map.shape == (16, 16)


def test_annotation_invariants_enforced():
    with pytest.raises(ValueError, match="lack records"):
        PanopticAnnotation(segment_map=np.ones((2, 2), dtype=np.int32), segments=[])
    with pytest.raises(ValueError, match="duplicate"):
        PanopticAnnotation(
            segment_map=np.ones((2, 2), dtype=np.int32),
            segments=[SegmentRecord(1, 0, True), SegmentRecord(1, 1, True)],
        )


def test_scene_spec_validation():
    with pytest.raises(ValueError, match="stuff"):
        SceneSpec(stuff_classes=())
    with pytest.raises(ValueError, match="thing"):
        SceneSpec(thing_classes=(), n_shapes=2)
