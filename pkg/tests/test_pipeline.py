import csv
import json
import math

import numpy as np
import pytest

from anchormask.config import RunConfig
from anchormask.data import SynthSpec, generate_synthetic, synthetic_suite
from anchormask.heatmap import HeatMapHistory, build_heatmap
from anchormask.pipeline import (Backbone, Nets, Variant, evaluate, run_frame, run_sequence, sequence_features,
                                 to_input, train_masknet, train_rpn)
from oracles import central_diff, max_rel_error


def small_cfg(**train):
    cfg = RunConfig()
    cfg.backbone.frozen_blocks = 3
    for tc in (cfg.train_rpn, cfg.train_mask):
        tc.iterations, tc.batch_size, tc.lr = 12, 4, 0.05
        for k, v in train.items():
            setattr(tc, k, v)
    return cfg


@pytest.fixture(scope="module")
def seqs():
    return synthetic_suite(11, 2, None)[:2]


@pytest.fixture(scope="module")
def short_seqs():
    return [generate_synthetic(SynthSpec(seed=s, n_frames=5)) for s in (1, 2)]


@pytest.fixture(scope="module")
def nets():
    return Nets.build(RunConfig())


def test_backbone_shape_and_stride():
    bb = Backbone(rng=np.random.default_rng(0))
    out = bb.forward(np.random.default_rng(1).random((224, 224)))
    assert out.shape == (32, 14, 14) and bb.stride == 16


def test_backbone_gradient():
    rng = np.random.default_rng(2)
    bb = Backbone((2, 3), rng)
    x = rng.random((1, 1, 8, 8))
    w = rng.standard_normal((1, 3, 2, 2))

    def loss():
        return float(np.sum(bb.forward_range(x) * w))

    bb.forward_range(x, record=True)
    bb.backward(w)
    for name, layer in bb.all_layers().items():
        idx = rng.choice(layer.weight.size, 10, replace=False)
        numeric = central_diff(loss, layer.weight, 1e-6, idx)
        assert max_rel_error(layer.grads["weight"], numeric) <= 1e-4, name


def test_stride_mismatch_rejected():
    cfg = RunConfig()
    cfg.backbone.widths = (8, 16, 32)
    with pytest.raises(ValueError):
        Nets.build(cfg)


def test_rpn_trace_length_and_determinism(short_seqs):
    cfg = small_cfg(iterations=13)
    _, a = train_rpn(short_seqs, cfg)
    _, b = train_rpn(short_seqs, cfg)
    assert len(a.trace) == math.ceil(13 / 5)
    assert a.losses == b.losses
    assert all(np.isfinite(a.losses))


def test_rpn_zero_lr_keeps_params(short_seqs):
    cfg = small_cfg(lr=0.0, iterations=3)
    start = {k: v.copy() for k, v in Nets.build(cfg).detector_params().items()}
    nets, _ = train_rpn(short_seqs, cfg)
    assert all(np.array_equal(start[k], v) for k, v in nets.detector_params().items())


def test_rpn_trains_unfrozen_backbone(short_seqs):
    cfg = small_cfg(iterations=2)
    cfg.backbone.frozen_blocks = 2
    before = Nets.build(cfg).detector_params()
    after = train_rpn(short_seqs, cfg)[0].detector_params()
    assert np.array_equal(before["backbone.block1.weight"], after["backbone.block1.weight"])
    assert not np.array_equal(before["backbone.block2.weight"], after["backbone.block2.weight"])


def test_training_rejects_empty():
    with pytest.raises(ValueError):
        train_rpn([], small_cfg())
    with pytest.raises(ValueError):
        train_masknet([generate_synthetic(SynthSpec(n_frames=1))], small_cfg())


def test_masknet_training_deterministic_with_short_histories():
    two = [generate_synthetic(SynthSpec(seed=s, n_frames=2)) for s in (3, 4)]
    cfg = small_cfg(iterations=6)
    _, a = train_masknet(two, cfg)
    _, b = train_masknet(two, cfg)
    assert a.losses == b.losses and all(np.isfinite(a.losses))


def test_checkpoint_roundtrip(tmp_path, nets):
    nets.save(tmp_path / "n.ckpt")
    other = Nets.build(RunConfig(), seed=99).load(tmp_path / "n.ckpt")
    for k, v in nets.detector_params().items():
        assert np.array_equal(v, other.detector_params()[k])
    for k, v in nets.masknet.params().items():
        assert np.array_equal(v, other.masknet.params()[k])


def test_run_frame_mask_disabled_matches_plain(seqs, nets):
    cfg = RunConfig()
    seq = seqs[0]
    hist = HeatMapHistory()
    hist.push(0, build_heatmap(seq.gt[:1], nets.grid))
    plain, _ = run_frame(seq.frames[1], hist.copy(), nets, cfg, 1, seq.box(1), mask_enabled=False)
    off, _ = run_frame(seq.frames[1], hist.copy(), nets, cfg, 1, seq.box(1), mask_enabled=False, fusion=True)
    ones, h = run_frame(seq.frames[1], hist.copy(), nets, cfg, 1, seq.box(1), predicted_mask=np.ones((14, 14)))
    assert plain.proposals == off.proposals == ones.proposals
    assert plain.mask is None and len(h) == 2


def test_precomputed_features_hook(seqs, nets):
    cfg = RunConfig()
    seq = seqs[0]
    feats = nets.backbone.forward(to_input(seq.frames[2]))
    a, _ = run_frame(seq.frames[2], HeatMapHistory(), nets, cfg, 2)
    b, _ = run_frame(None, HeatMapHistory(), nets, cfg, 2, features=feats)
    assert a.proposals == b.proposals


def test_zero_mask_without_fusion_loses_target(seqs, nets):
    cfg = RunConfig()
    hist = HeatMapHistory()
    hist.push(0, build_heatmap(seqs[0].gt[:1], nets.grid))
    res, _ = run_frame(seqs[0].frames[1], hist, nets, cfg, 1, seqs[0].box(1), predicted_mask=np.zeros((14, 14)))
    assert res.lost and res.iou_vs_gt == 0.0 and not res.heatmap.any()
    hist2 = HeatMapHistory()
    hist2.push(0, build_heatmap(seqs[0].gt[:1], nets.grid))
    res, _ = run_frame(seqs[0].frames[1], hist2, nets, cfg, 1, predicted_mask=np.zeros((14, 14)), fusion=True)
    assert not res.lost


def test_forced_ones_sequence_bit_identical(seqs, nets):
    cfg = RunConfig()
    for seq in seqs:
        feats = sequence_features(seq, nets)
        plain = run_sequence(seq, nets, cfg, Variant("plain", False), feats)
        forced = run_sequence(seq, nets, cfg, Variant("ones", True, False, True), feats)
        for p, f in zip(plain, forced):
            assert p.proposals == f.proposals
            assert p.heatmap.tobytes() == f.heatmap.tobytes()


def test_temporal_causality(seqs, nets):
    cfg = RunConfig()
    seq = seqs[1]
    feats = sequence_features(seq, nets)
    base = run_sequence(seq, nets, cfg, Variant("masked", True), feats)
    t = 6
    bumped = feats.copy()
    bumped[t] = np.random.default_rng(0).random(bumped[t].shape) * 5
    other = run_sequence(seq, nets, cfg, Variant("masked", True), bumped)
    for a, b in zip(base, other):
        if a.frame <= t:
            assert np.array_equal(a.mask, b.mask)
    assert any(a.proposals != b.proposals for a, b in zip(base, other))


def test_history_never_exceeds_three(seqs, nets):
    cfg = RunConfig()
    hist = HeatMapHistory()
    for t in range(6):
        _, hist = run_frame(seqs[0].frames[t], hist, nets, cfg, t)
        assert len(hist) <= 3


def test_evaluate_report(tmp_path, seqs, nets):
    cfg = RunConfig()
    same = (Variant("a", True), Variant("b", True))
    rep = evaluate(seqs[:1], nets, cfg, same)
    assert rep.mean_iou("a") == rep.mean_iou("b")
    assert [r["iou"] for r in rep.rows if r["variant"] == "a"] == [r["iou"] for r in rep.rows if r["variant"] == "b"]
    assert all(0.0 <= r["iou"] <= 1.0 for r in rep.rows)
    rep.write_csv(tmp_path / "m.csv")
    rep.write_json(tmp_path / "s.json")
    with open(tmp_path / "m.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["frame", "variant", "iou", "score", "x1", "y1", "x2", "y2"]
    assert len(rows) == 1 + 2 * (len(seqs[0]) - 1)
    summary = json.loads((tmp_path / "s.json").read_text())
    assert set(summary["mean_iou"]) == {"a", "b"}
    assert summary["paired_deltas"]["a-b"] == 0.0
