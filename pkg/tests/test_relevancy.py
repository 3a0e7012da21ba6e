import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latentsteer.geometry import RegionMask
from latentsteer.harness import gen_scenario
from latentsteer.model import ModelConfig, encode_text, init_weights
from latentsteer.relevancy import relevancy_from_embeddings, relevancy_map, relevancy_score, rollout

GOLDEN = json.loads((Path(__file__).parent / "data" / "golden.json").read_text())


def test_uniform_attention_uniform_grads():
    n, v = 6, 4
    a = np.tril(np.ones((n, n))) / np.arange(1, n + 1)[:, None]
    out = rollout([[a]], [[np.ones((n, n))]], v)
    assert np.allclose(out, 1.0 / n, atol=1e-15)


def test_zero_grads_give_zero_map():
    a = np.tril(np.ones((4, 4))) / np.arange(1, 5)[:, None]
    assert not rollout([[a], [a]], [[np.zeros((4, 4))], [np.zeros((4, 4))]], 2).any()


def test_map_is_non_negative_and_finite(weights):
    sc = gen_scenario(7, weights.config)
    m = relevancy_map(sc.image, sc.question, weights)
    assert m.shape == (64,)
    assert np.all(np.isfinite(m)) and np.all(m >= 0)


def test_map_golden(weights):
    sc = gen_scenario(0, weights.config)
    m = relevancy_map(sc.image, sc.question, weights)
    assert np.allclose(m, GOLDEN["scenario0_relevancy"], rtol=1e-9, atol=1e-15)


def test_score_examples(weights):
    region = RegionMask(np.arange(64) % 5 == 0, 8, 8)
    assert relevancy_score(np.zeros(64), region) == 0.0
    sc = gen_scenario(0, weights.config)
    m = relevancy_map(sc.image, sc.question, weights)
    everything = RegionMask(np.ones(64, dtype=bool), 8, 8)
    assert relevancy_score(m, everything) == m.max()
    assert relevancy_score(m, sc.region) == max(m[i] for i in sc.region.indices)


@given(st.lists(st.floats(0, 10), min_size=16, max_size=16), st.integers(1, 2**16 - 1),
       st.integers(1, 2**16 - 1))
def test_score_of_union_is_max(values, c1, c2):
    m = np.asarray(values)
    bits = lambda c: np.array([(c >> i) & 1 for i in range(16)], dtype=bool)
    r1, r2 = RegionMask(bits(c1), 4, 4), RegionMask(bits(c2), 4, 4)
    assert relevancy_score(m, r1 | r2) == max(relevancy_score(m, r1), relevancy_score(m, r2))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_relabeling_out_of_region_tokens(seed):
    # one layer and no positional signal: the last row sees the visual tokens as a set
    w = init_weights(ModelConfig(n_layers=1, seed=3))
    rng = np.random.default_rng(seed)
    e_v = rng.normal(size=(64, 32))
    e_t = encode_text([0, 1, 2], w)
    region = np.zeros(64, dtype=bool)
    region[rng.choice(64, size=6, replace=False)] = True
    outside = np.flatnonzero(~region)
    perm = np.arange(64)
    perm[outside] = rng.permutation(outside)
    m = relevancy_from_embeddings(e_v, e_t, w)
    mp = relevancy_from_embeddings(e_v[perm], e_t, w)
    assert np.allclose(mp, m[perm], rtol=1e-9, atol=1e-14)
    mask = RegionMask(region, 8, 8)
    assert relevancy_score(mp, mask) == pytest.approx(relevancy_score(m, mask), rel=1e-9)


def test_explicit_token(weights):
    sc = gen_scenario(1, weights.config)
    a, b = sc.candidates
    ma = relevancy_map(sc.image, sc.question, weights, token=a)
    mb = relevancy_map(sc.image, sc.question, weights, token=b)
    assert not np.array_equal(ma, mb)
