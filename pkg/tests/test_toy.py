import math

import numpy as np
import pytest

from sdprior import tensor as T
from sdprior.errors import ContractError
from sdprior.metrics import CLASSES, MapInstance
from sdprior.osm import NEAR
from sdprior.sd_encoder import SdEncoderConfig, frame_tokens
from sdprior.text_encoder import TextEncoder, TextEncoderConfig, build_vocab
from sdprior.toy import (NO_OBJECT, MapDecoder, SceneSpec, ToyDecoderConfig, ToyModel, TrainConfig, assign,
                         decode, generate_dataset, generate_scene, lane_offsets, match_and_loss, matching_cost,
                         read_scenes, road_ground_truth, scene_to_dict, train_toy, write_scenes)
import oracles

SD_TINY = SdEncoderConfig(d_model=8, layers=1, heads=2, dropout=0.0, d_orf=8, d_pos=4, tag_dim=6, d_ff=12)
DEC_TINY = ToyDecoderConfig(queries=4, d_model=8, layers=1, heads=2, d_ff=12, dropout=0.0, points=3)


def straight(n=121):
    xs = np.linspace(-30, 30, n)
    return np.stack([xs, np.zeros(n)], 1)


def test_lane_offsets_two_lanes():
    b, d, c = lane_offsets(2, 3.5)
    assert b == [-3.5, 3.5] and d == [0.0] and c == [-1.75, 1.75]


def test_single_lane_instance_counts():
    gt = road_ground_truth(straight(), 1, 3.5, True, 10)
    assert [g.cls for g in gt].count("centerline") == 1
    assert [g.cls for g in gt].count("boundary") == 2
    assert [g.cls for g in gt].count("divider") == 0


def test_two_lane_straight_road_offsets():
    gt = road_ground_truth(straight(), 2, 3.5, False, 10)
    ys = {c: sorted(round(float(g.xy[:, 1].mean()), 9) for g in gt if g.cls == c) for c in CLASSES}
    assert ys == {"boundary": [-3.5, 3.5], "divider": [0.0], "centerline": [-1.75, 1.75]}
    # the return lane of a two-way road runs the other way
    left = next(g for g in gt if g.cls == "centerline" and g.xy[0, 1] > 0)
    right = next(g for g in gt if g.cls == "centerline" and g.xy[0, 1] < 0)
    assert left.xy[0, 0] > left.xy[-1, 0] and right.xy[0, 0] < right.xy[-1, 0]
    oneway = road_ground_truth(straight(), 2, 3.5, True, 10)
    assert all(g.xy[0, 0] < g.xy[-1, 0] for g in oneway)


def test_generated_scene_counts_and_determinism():
    spec = SceneSpec()
    for seed in range(20):
        scene = generate_scene(spec, seed)
        roads = [e for e in scene.frame.elements if e.kind == "polyline"]
        expect = sum(2 * int(dict(r.tags)["lanes"]) + 1 for r in roads)
        assert len(scene.gt) == expect <= spec.max_instances() <= 20
        scene.frame.check(spec.points)
        assert scene_to_dict(scene) == scene_to_dict(generate_scene(spec, seed))


def test_sd_geometry_does_not_depend_on_lane_count():
    for seed in range(10):
        # same widest road, so same clearance; only the drawn lane counts differ
        one = generate_scene(SceneSpec(lanes=(1, 3)), seed)
        three = generate_scene(SceneSpec(lanes=(3, 3)), seed)
        assert [e.id for e in one.frame.elements] == [e.id for e in three.frame.elements]
        for a, b in zip(one.frame.elements, three.frame.elements):
            if a.kind != "relation":
                assert np.array_equal(a.xy, b.xy)
        assert len(one.gt) <= len(three.gt)


def test_scene_spec_validation():
    with pytest.raises(ContractError):
        SceneSpec(lane_width=0)
    with pytest.raises(ContractError):
        SceneSpec(lanes=(3, 1))


def test_dataset_roundtrip(tmp_path):
    scenes = generate_dataset(SceneSpec(), 5, seed=1)
    write_scenes(tmp_path / "s.jsonl", scenes)
    back = read_scenes(tmp_path / "s.jsonl")
    assert [scene_to_dict(s) for s in back] == [scene_to_dict(s) for s in scenes]
    assert (tmp_path / "s.jsonl").read_text().count("\n") == 5


def oracle_decode(dec, memory, mask=None):
    p = {k: t.data for k, t in dec.params.items()}
    c = dec.config
    x = p["query"].copy()
    for i in range(c.layers):
        x = oracles.decoder_layer_one(x, memory, p, f"layer{i}", c.heads, mask)
    x = oracles.layer_norm(x, p["ln_out.g"], p["ln_out.b"])
    logits = x @ p["cls.w"] + p["cls.b"]
    h = oracles.gelu(x @ p["pts1.w"] + p["pts1.b"])
    pts = (h @ p["pts2.w"] + p["pts2.b"]).reshape(c.queries, c.points, 2) + p["ref"]
    return logits, pts


def test_decoder_matches_straight_line_oracle():
    dec = MapDecoder(DEC_TINY, seed=2)
    mem = np.random.default_rng(0).normal(size=(2, 5, 8))
    valid = np.array([[True] * 5, [True, True, False, False, False]])
    with T.no_grad():
        logits, pts = dec(T.Tensor(mem), valid)
    for b in range(2):
        el, ep = oracle_decode(dec, mem[b], valid[b])
        assert np.allclose(logits.data[b], el, atol=1e-12)
        assert np.allclose(pts.data[b], ep, atol=1e-12)


def test_zero_layer_decoder_ignores_tokens():
    dec = MapDecoder(ToyDecoderConfig(queries=5, d_model=8, layers=0, heads=2, points=4), seed=0)
    rng = np.random.default_rng(1)
    with T.no_grad():
        a = dec(T.Tensor(rng.normal(size=(1, 3, 8))))
        b = dec(T.Tensor(rng.normal(size=(1, 7, 8))))
    assert np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1].data, b[1].data)


def test_decode_returns_q_predictions():
    scene = generate_scene(SceneSpec(), 3)
    model = ToyModel(SdEncoderConfig(d_model=16, heads=4, d_ff=16), ToyDecoderConfig(d_model=16, heads=4),
                     "no-tags", seed=0)
    preds = decode(model, scene.frame)
    assert len(preds) == 20
    assert all(p.cls in CLASSES and 0 <= p.confidence <= 1 and p.xy.shape == (10, 2) for p in preds)


def perfect_outputs(gt, q, area):
    hx, hy = area.half_extents
    logits = np.zeros((q, NO_OBJECT + 1))
    logits[:, NO_OBJECT] = 10.0
    pts = np.zeros((q, gt[0].xy.shape[0], 2))
    for i, g in enumerate(gt):
        logits[i] = 0.0
        logits[i, CLASSES.index(g.cls)] = 10.0
        pts[i] = g.xy / [hx, hy]
    return logits, pts


def test_perfect_predictions_have_near_zero_loss():
    gt = generate_scene(SceneSpec(), 4).gt
    logits, pts = perfect_outputs(gt, 20, NEAR)
    loss, pairs = match_and_loss(logits, pts, gt, NEAR)
    assert loss.item() < 1e-3
    assert pairs == [(i, i) for i in range(len(gt))]


def test_reversed_ground_truth_costs_the_same():
    gt = generate_scene(SceneSpec(), 5).gt
    logits, pts = perfect_outputs(gt, 20, NEAR)
    pts = pts + np.random.default_rng(0).normal(0, 0.01, pts.shape)
    rev = [MapInstance(g.cls, g.xy[::-1]) for g in gt]
    a, pa = match_and_loss(logits, pts, gt, NEAR)
    b, pb = match_and_loss(logits, pts, rev, NEAR)
    assert math.isclose(a.item(), b.item(), rel_tol=1e-12) and pa == pb
    lp = np.log(np.full((20, 4), 0.25))
    cf, _ = matching_cost(lp, pts, [0] * len(gt), np.stack([g.xy for g in gt]))
    cr, _ = matching_cost(lp, pts, [0] * len(gt), np.stack([g.xy[::-1] for g in gt]))
    assert np.array_equal(cf, cr)


def test_tie_goes_to_lower_query():
    gt = [MapInstance("divider", straight(10))]
    logits = np.zeros((3, 4))
    pts = np.zeros((3, 10, 2))
    _, pairs = match_and_loss(logits, pts, gt, NEAR)
    assert pairs == [(0, 0)]


def test_too_many_ground_truths():
    gt = [MapInstance("divider", straight(4))] * 3
    with pytest.raises(ContractError):
        match_and_loss(np.zeros((2, 4)), np.zeros((2, 4, 2)), gt, NEAR)


@pytest.mark.parametrize("seed", range(40))
def test_assignment_equals_exhaustive_search(seed):
    rng = np.random.default_rng(seed)
    q = int(rng.integers(1, 7))
    g = int(rng.integers(0, q + 1))
    cost = rng.normal(size=(q, g))
    if seed % 2:
        cost = np.round(cost)  # integer costs produce many exact ties
    if g == 0:
        assert assign(cost) == []
        return
    expect, best = oracles.brute_force_assignment(cost)
    got = assign(cost)
    assert got == expect
    assert math.isclose(sum(cost[r, c] for r, c in got), best, rel_tol=1e-12, abs_tol=1e-12)


def test_zero_lambda_assigns_by_class_only():
    gt = [MapInstance("divider", straight(5)), MapInstance("boundary", straight(5) + [0, 9])]
    logits = np.full((3, 4), -5.0)
    logits[0, 1] = 5.0  # boundary
    logits[2, 2] = 5.0  # divider
    pts = np.random.default_rng(0).normal(size=(3, 5, 2)) * 100
    _, pairs = match_and_loss(logits, pts, gt, NEAR, lam=0.0)
    assert pairs == [(2, 0), (0, 1)]


def test_set_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    gt = [MapInstance("divider", rng.normal(0, 5, (3, 2))), MapInstance("centerline", rng.normal(0, 5, (3, 2)))]
    logits = T.parameter(rng.normal(size=(4, 4)))
    pts = T.parameter(rng.normal(size=(4, 3, 2)))
    loss, pairs = match_and_loss(logits, pts, gt, NEAR)
    loss.backward()
    for p in (logits, pts):
        num = oracles.numeric_grad(lambda: match_and_loss(logits.detach(), pts.detach(), gt, NEAR)[0].item(),
                                   p.data)
        assert oracles.rel_error(p.grad, num) < 1e-6


def tiny_text(frames):
    sets = [e.tags for f in frames for e in f.elements]
    cfg = TextEncoderConfig(layers=1, heads=2, d_model=8, d_ff=8, embed_dim=6, dropout=0.0)
    return TextEncoder(cfg, build_vocab(sets, 60), seed=0)


def test_stack_gradients_match_finite_differences():
    scenes = generate_dataset(SceneSpec(max_roads=1, lanes=(1, 1), signal_prob=1.0), 2, seed=8)
    text = tiny_text([s.frame for s in scenes])
    model = ToyModel(SD_TINY, DEC_TINY, "finetune-0.1", text, seed=1)
    seqs = [frame_tokens(s.frame, SD_TINY, i)[0] for i, s in enumerate(scenes)]
    gts = [[MapInstance(g.cls, g.xy[[0, 4, 9]]) for g in s.gt] for s in scenes]
    from sdprior.toy import set_loss

    def loss():
        logits, pts = model.forward(seqs, None, train=True)
        return set_loss(logits, pts, gts, NEAR)[0]

    loss().backward()
    for name, p in model.parameters().items():
        num = oracles.numeric_grad(lambda: loss().item(), p.data)
        assert oracles.rel_error(p.grad, num) < 1e-4, name


def small_run(mode, text=None, epochs=2, **kw):
    spec = SceneSpec(max_roads=1)
    train = generate_dataset(spec, 12, seed=1)
    held = generate_dataset(spec, 4, seed=2)
    sd = SdEncoderConfig(d_model=8, layers=1, heads=2, d_orf=8, d_pos=4, tag_dim=6, d_ff=8)
    dec = ToyDecoderConfig(queries=8, d_model=8, layers=1, heads=2, d_ff=8, points=10)
    return train_toy(train, held, mode, text, sd, dec, TrainConfig(epochs=epochs, batch_size=4, **kw), seed=0)


def test_no_tags_mode_never_touches_text_encoder():
    frames = [s.frame for s in generate_dataset(SceneSpec(max_roads=1), 12, seed=1)]
    text = tiny_text(frames)
    before = {k: p.data.copy() for k, p in text.params.items()}
    model, log = small_run("no-tags", text)
    assert model.text is None
    assert not any(k.startswith("text.") for k in log.effective_lr)
    assert all(np.array_equal(before[k], p.data) for k, p in text.params.items())


def test_multiplier_applies_only_to_text_parameters():
    frames = [s.frame for s in generate_dataset(SceneSpec(max_roads=1), 12, seed=1)]
    model, log = small_run("finetune-0.1", tiny_text(frames))
    for k, v in log.effective_lr.items():
        assert v == pytest.approx(1e-4 if k.startswith("text.") else 1e-3)
    assert not any(np.array_equal(model.text.params[k].data, p.data) for k, p in tiny_text(frames).params.items()
                   if k.startswith("layer0.ffn.fc1.w"))
    frozen_text = tiny_text(frames)
    before = {k: p.data.copy() for k, p in frozen_text.params.items()}
    model, log = small_run("frozen-nlp", frozen_text)
    assert all(v == 0.0 for k, v in log.effective_lr.items() if k.startswith("text."))
    assert all(before[k].tobytes() == p.data.tobytes() for k, p in frozen_text.params.items())


def test_finetuning_leaves_the_callers_encoder_intact():
    frames = [s.frame for s in generate_dataset(SceneSpec(max_roads=1), 12, seed=1)]
    text = tiny_text(frames)
    before = {k: p.data.copy() for k, p in text.params.items()}
    model, _ = small_run("finetune-0.1", text)
    assert model.text is not text
    assert all(np.array_equal(before[k], p.data) for k, p in text.params.items())
    assert any(not np.array_equal(before[k], p.data) for k, p in model.text.params.items())


def test_training_log_and_determinism():
    a, log_a = small_run("no-tags", epochs=3)
    b, log_b = small_run("no-tags", epochs=3)
    assert [r["train_loss"] for r in log_a.rows] == [r["train_loss"] for r in log_b.rows]
    assert log_a.rows[-1]["train_loss"] < log_a.rows[0]["train_loss"]
    csv = log_a.to_csv().splitlines()
    assert csv[0] == "epoch,mode,train_loss,AP_centerline,AP_boundary,AP_divider,mAP"
    assert len(csv) == 4


def test_tag_modes_need_an_encoder():
    with pytest.raises(ContractError):
        ToyModel(SD_TINY, DEC_TINY, "with-tags")
    with pytest.raises(ContractError):
        ToyModel(SD_TINY, DEC_TINY, "bogus")
