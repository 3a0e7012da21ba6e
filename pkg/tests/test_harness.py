import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latentsteer.geometry import RegionMask, read_pnm
from latentsteer.harness import (METHODS, apply_blur_baseline, apply_color_baseline, emit_heatmap,
                                 gen_scenario, gradcheck_suite, pretrain_toy, run_roc,
                                 single_object_accuracy, steering_prompt)
from latentsteer.model import ModelConfig, blank_image, init_weights
from latentsteer.relevancy import relevancy_map
from latentsteer.steering import SteeringConfig

GOLDEN = json.loads((Path(__file__).parent / "data" / "golden.json").read_text())
CFG = ModelConfig()


def test_scenario_deterministic():
    a, b = gen_scenario(42, CFG), gen_scenario(42, CFG)
    assert a.image.checksum() == b.image.checksum()
    assert (a.prompt, a.question, a.answer) == (b.prompt, b.question, b.answer)


def test_scenario_golden():
    sc = gen_scenario(0, CFG)
    assert sc.image.checksum() == GOLDEN["scenario0_image_sha256"]
    assert apply_color_baseline(sc.image, sc.region).checksum() == GOLDEN["scenario0_color_sha256"]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_scenario_invariants(seed):
    sc = gen_scenario(seed, CFG, "point")
    assert not (sc.target.bits & sc.distractor.bits).any()
    assert sc.answer in sc.candidates and len(set(sc.candidates)) == 2
    # the point prompt lands inside the target
    assert set(sc.region.indices) <= set(sc.target.indices)
    # hard negative: the distractor touches the target or sits one cell away
    t, d = sc.target.grid(), sc.distractor.grid()
    tr, tc = np.nonzero(t)
    dr, dc = np.nonzero(d)
    gap = np.min(np.maximum(np.abs(tr[:, None] - dr), np.abs(tc[:, None] - dc)))
    assert gap <= 2


def test_scene_independent_of_prompt_kind():
    kinds = [gen_scenario(9, CFG, k) for k in ("box", "mask", "scribble", "point")]
    assert len({k.image.checksum() for k in kinds}) == 1
    assert kinds[0].region == kinds[1].region


def test_candidate_order_balanced():
    first = sum(gen_scenario(s, CFG).candidates[0] == gen_scenario(s, CFG).answer for s in range(1000))
    assert abs(first / 1000 - 0.5) <= 0.05


def test_steering_prompt_choice():
    box = gen_scenario(3, CFG, "box")
    assert steering_prompt(box, "steer-hard") == (box.prompt, None)
    prompt, mask = steering_prompt(box, "steer-soft")
    assert prompt.kind == "point" and mask is None
    pt = gen_scenario(3, CFG, "point")
    prompt, mask = steering_prompt(pt, "steer-hard")
    assert prompt is pt.prompt and mask == pt.region


def test_color_baseline():
    sc = gen_scenario(1, CFG)
    out = apply_color_baseline(sc.image, sc.region)
    flat = out.tokens()
    assert np.all(flat[sc.region.bits, CFG.highlight_channel] == 1.0)
    assert np.array_equal(flat[~sc.region.bits], sc.image.tokens()[~sc.region.bits])
    full = RegionMask(np.ones(64, dtype=bool), 8, 8)
    assert np.all(apply_color_baseline(sc.image, full).tokens()[:, CFG.highlight_channel] == 1.0)


def test_blur_baseline():
    sc = gen_scenario(1, CFG)
    full = RegionMask(np.ones(64, dtype=bool), 8, 8)
    assert np.array_equal(apply_blur_baseline(sc.image, full).channels, sc.image.channels)
    blank = blank_image(CFG)
    assert np.array_equal(apply_blur_baseline(blank, sc.region).channels, blank.channels)
    out = apply_blur_baseline(sc.image, sc.region).tokens()
    outside = out[~sc.region.bits]
    assert np.allclose(outside, outside[0], atol=0)


def test_heatmap_outputs(tmp_path):
    pgm, csv_path = emit_heatmap(np.full(64, 0.3), (8, 8), tmp_path / "c.pgm")
    assert np.all(read_pnm(pgm) == 255)
    assert np.allclose(np.loadtxt(csv_path, delimiter=","), 0.3)
    pgm, _ = emit_heatmap(np.zeros(64), (8, 8), tmp_path / "z.pgm")
    assert not read_pnm(pgm).any()
    with pytest.raises(ValueError):
        emit_heatmap(np.full(64, np.nan), (8, 8), tmp_path / "n.pgm")


def test_heatmap_golden(tmp_path, weights):
    sc = gen_scenario(0, weights.config)
    pgm, _ = emit_heatmap(relevancy_map(sc.image, sc.question, weights), (8, 8), tmp_path / "r.pgm")
    assert hashlib.sha256(pgm.read_bytes()).hexdigest() == GOLDEN["scenario0_relevancy_pgm_sha256"]


def test_pretraining_reduces_loss():
    res = pretrain_toy(init_weights(ModelConfig(seed=1)), steps=30, seed=1, batch=16)
    assert np.mean(res.losses[-5:]) < res.losses[0]
    again = pretrain_toy(init_weights(ModelConfig(seed=1)), steps=30, seed=1, batch=16)
    assert again.weights.checksum() == res.weights.checksum()


def test_shipped_weights_quality(weights):
    assert single_object_accuracy(weights) >= 0.95


def test_roc_report(weights, tmp_path):
    report = run_roc(weights, METHODS, 6, SteeringConfig())
    assert len(report.records) == 6 * len(METHODS)
    assert report.n_scenarios == 6
    for m in METHODS:
        assert 0.0 <= report.accuracy(m) <= 1.0
    summary, records = report.write(tmp_path / "roc.csv")
    assert summary.read_text().splitlines()[0].startswith("method,n,accuracy")
    rows = [json.loads(l) for l in records.read_text().splitlines()]
    assert len(rows) == 6 * len(METHODS)
    none_rows = [r for r in rows if r["method"] == "none"]
    assert all(r["ratio_before"] == r["ratio_after"] for r in none_rows)


def test_roc_unknown_method(weights):
    with pytest.raises(ValueError):
        run_roc(weights, ("none", "oracle"), 2)


def test_unsteered_roc_golden(weights):
    report = run_roc(weights, ("none",), 200)
    assert report.accuracy("none") == GOLDEN["roc_none_accuracy"]
    assert abs(report.accuracy("none") - 0.5) <= 0.1


def test_gradcheck_suite_small():
    errors = gradcheck_suite(4, coords=4)
    assert len(errors) == 4 and max(errors) < 1e-5
