import math

import numpy as np
import pytest

from slimdet.detection import (
    Box, Detection, PriorConfig, PriorLevel, box_iou, cluster_priors, decode,
    default_prior_config, encode, generate_priors, nms, prior_config_from_dict,
    prior_config_to_dict, priors_from_json, priors_to_json,
)
from slimdet.oracles import make_clustered_box_fixture, oracle_nms


class TestGeneratePriors:
    def test_small_scale_level(self):
        config = default_prior_config((256, 320), [(32, 40), (16, 20), (8, 10)])
        priors = generate_priors(config)
        level1 = priors[:32 * 40 * 6]
        squares = [b for b in level1 if abs(b.w - b.h) < 1e-9]
        sides = sorted(set(round(b.w, 4) for b in squares))
        assert sides == [15.0, round(math.sqrt(15 * 50), 4)]
        # at every cell
        assert len(squares) == 32 * 40 * 2

    def test_level_ranges_follow_short_side(self):
        config = default_prior_config((256, 320), [(32, 40), (16, 20), (8, 10)])
        assert [(l.min_size, l.max_size) for l in config.levels] == \
            [(15.0, 50.0), (50.0, 140.0), (140.0, 230.0)]

    def test_single_cell_square_only(self):
        config = PriorConfig(
            levels=(PriorLevel((1, 1), 10.0, 40.0, aspect_ratios=(1.0,)),),
            image=(64, 64))
        priors = generate_priors(config)
        assert len(priors) == 2
        for b in priors:
            assert (b.cx, b.cy) == (32.0, 32.0)

    def test_total_count_matches_enumeration(self):
        config = default_prior_config((256, 320), [(32, 40), (16, 20), (8, 10)])
        priors = generate_priors(config)
        # independent count: walk cells and the per-cell box list by hand
        count = 0
        for level in config.levels:
            per_cell = 2 + sum(1 for r in level.aspect_ratios if r != 1.0)
            count += level.feature_map[0] * level.feature_map[1] * per_cell
        assert len(priors) == count == 10080

    def test_cell_centers_row_major(self):
        config = PriorConfig(levels=(PriorLevel((2, 2), 10.0, 20.0, (1.0,)),),
                             image=(100, 100))
        priors = generate_priors(config)
        centers = [(b.cx, b.cy) for b in priors[::2]]
        assert centers == [(25.0, 25.0), (75.0, 25.0), (25.0, 75.0), (75.0, 75.0)]

    def test_ratio_boxes(self):
        config = PriorConfig(levels=(PriorLevel((1, 1), 16.0, 32.0, (1.0, 2.0, 0.5)),),
                             image=(64, 64))
        priors = generate_priors(config)
        assert len(priors) == 4
        wide, tall = priors[2], priors[3]
        assert wide.w == pytest.approx(16 * math.sqrt(2))
        assert wide.h == pytest.approx(16 / math.sqrt(2))
        assert (tall.w, tall.h) == (pytest.approx(wide.h), pytest.approx(wide.w))

    def test_deterministic_ordering(self):
        config = default_prior_config((64, 80), [(8, 10), (4, 5), (2, 3)])
        a = generate_priors(config)
        b = generate_priors(config)
        assert a == b

    def test_json_round_trip(self):
        config = default_prior_config((64, 80), [(8, 10), (4, 5), (2, 3)])
        priors = generate_priors(config)
        assert priors_from_json(priors_to_json(priors)) == priors
        assert prior_config_from_dict(prior_config_to_dict(config)) == config

    def test_config_unknown_field_rejected(self):
        doc = prior_config_to_dict(default_prior_config((64, 80), [(8, 10), (4, 5), (2, 3)]))
        doc["clip"] = True
        with pytest.raises(ValueError, match="clip"):
            prior_config_from_dict(doc)


class TestClusterPriors:
    def test_emits_scale_times_ratio_boxes(self):
        boxes = make_clustered_box_fixture(0)
        priors = cluster_priors(boxes, seed=0)
        assert len(priors) == 12

    def test_identical_boxes_degenerate(self):
        boxes = [Box(0, 0, 30.0, 20.0)] * 12
        priors = cluster_priors(boxes, seed=3)
        for p in priors:
            assert (p.w, p.h) == (pytest.approx(30.0), pytest.approx(20.0))

    def test_seed_determinism(self):
        boxes = make_clustered_box_fixture(1, jitter=0.02)
        assert cluster_priors(boxes, seed=9) == cluster_priors(boxes, seed=9)

    def test_recovers_planted_centroids(self):
        scales = (20.0, 60.0, 180.0)
        ratios = (0.5, 1.0, 2.0, 3.0)
        boxes = make_clustered_box_fixture(2, scales=scales, ratios=ratios)
        priors = cluster_priors(boxes, seed=0)
        got = sorted((round(math.sqrt(b.w * b.h), 6), round(b.w / b.h, 6)) for b in priors)
        want = sorted((s, r) for s in scales for r in ratios)
        for (gs, gr), (ws, wr) in zip(got, want):
            assert abs(gs - ws) / ws < 0.01
            assert abs(gr - wr) / wr < 0.01

    def test_permutation_invariance(self):
        boxes = make_clustered_box_fixture(4, jitter=0.05)
        rng = np.random.default_rng(0)
        shuffled = list(boxes)
        rng.shuffle(shuffled)
        assert cluster_priors(boxes, seed=5) == cluster_priors(shuffled, seed=5)

    def test_too_few_boxes(self):
        with pytest.raises(ValueError, match="at least"):
            cluster_priors([Box(0, 0, 10, 10)] * 11)


class TestBoxCoding:
    def test_self_encoding_is_zero(self):
        p = Box(50, 40, 30, 20)
        assert encode(p, p) == (0.0, 0.0, 0.0, 0.0)

    def test_round_trip(self):
        gt = Box(47.0, 61.5, 28.0, 14.0)
        prior = Box(50.0, 60.0, 25.0, 18.0)
        back = decode(encode(gt, prior), prior)
        for a, b in zip((gt.cx, gt.cy, gt.w, gt.h), (back.cx, back.cy, back.w, back.h)):
            assert abs(a - b) < 1e-6

    def test_zero_offsets_give_prior(self):
        prior = Box(10, 20, 5, 8)
        assert decode((0, 0, 0, 0), prior) == prior

    def test_degenerate_decode_clamped(self):
        prior = Box(10, 10, 4, 4)
        out = decode((0, 0, -1e6, -1e6), prior)
        assert out.w >= 1.0 and out.h >= 1.0

    def test_round_trip_random(self, rng):
        for _ in range(50):
            gt = Box(*rng.uniform(10, 90, 2), *rng.uniform(2, 40, 2))
            prior = Box(*rng.uniform(10, 90, 2), *rng.uniform(2, 40, 2))
            back = decode(encode(gt, prior), prior)
            assert abs(back.cx - gt.cx) < 1e-6 and abs(back.w - gt.w) < 1e-5


class TestNms:
    def make(self, rng, n):
        dets = []
        for _ in range(n):
            w, h = rng.uniform(4, 30, 2)
            dets.append(Detection(
                Box(float(rng.uniform(15, 85)), float(rng.uniform(15, 85)), float(w), float(h)),
                float(rng.choice([0.1, 0.3, 0.5, 0.5, 0.7, 0.9])), 1))
        return dets

    def test_disjoint_all_kept(self):
        dets = [Detection(Box(10 + 30 * i, 10, 8, 8), 0.5, 1) for i in range(3)]
        assert nms(dets, 0.5) == dets

    def test_overlapping_keeps_higher_score(self):
        a = Detection(Box(50, 50, 20, 20), 0.9, 1)
        b = Detection(Box(51, 50, 20, 20), 0.6, 1)
        assert box_iou(a.box, b.box) > 0.5
        assert nms([b, a], 0.5) == [a]

    def test_matches_oracle_on_random_instances(self, rng):
        for _ in range(50):
            dets = self.make(rng, int(rng.integers(1, 50)))
            thr = float(rng.choice([0.3, 0.5, 0.7]))
            kept = nms(dets, thr)
            want = [dets[i] for i in oracle_nms(dets, thr)]
            assert kept == want

    def test_output_invariants(self, rng):
        dets = self.make(rng, 50)
        kept = nms(dets, 0.4)
        scores = [d.score for d in kept]
        assert scores == sorted(scores, reverse=True)
        for i, a in enumerate(kept):
            for b in kept[:i]:
                assert box_iou(a.box, b.box) <= 0.4
        assert all(d in dets for d in kept)

    def test_max_keep(self, rng):
        dets = self.make(rng, 30)
        assert len(nms(dets, 0.9, max_keep=5)) <= 5

    def test_nonfinite_scores_rejected(self):
        dets = [Detection(Box(10, 10, 5, 5), float("nan"), 1)]
        with pytest.raises(ValueError):
            nms(dets, 0.5)
