import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stfusion.errors import ConfigError
from stfusion.grid import FeatureGrid, LinearHead, Pose
from stfusion.stt import (
    ReconNet, SttConfig, comm_volume, dynamic_map, reconstruct, saliency_map, select_all, select_tokens,
    select_under_budget, selection_mask, transmission_mask,
)
from stfusion.wire import OVERHEAD, SparseTokenSet, encode_tokens, entry_size
from stfusion.world import OBJECT_LOGIT, ScenarioConfig, generate_scenario, rasterize_features

unit = st.floats(0, 1, allow_nan=False)


def unit_grid(shape=(6, 6)):
    return arrays(np.float64, shape, elements=unit)


def seeded(h=32, w=32, c=4, seed=0):
    return FeatureGrid(np.random.default_rng(seed).normal(size=(h, w, c)))


# -- saliency and dynamics ----------------------------------------------

def test_saliency_zero_features_is_half():
    g = FeatureGrid(np.zeros((4, 5, 3)))
    assert np.array_equal(saliency_map(g, LinearHead(np.zeros(3))), np.full((4, 5), 0.5))


def test_saliency_on_analytic_logits():
    data = np.zeros((8, 8, 7))
    data[..., 0] = -OBJECT_LOGIT
    data[2:4, 3:6, 0] = OBJECT_LOGIT
    e = saliency_map(FeatureGrid(data), LinearHead.one_hot(7, 0))
    obj = data[..., 0] > 0
    hi, lo = 1 / (1 + math.exp(-5)), 1 / (1 + math.exp(5))
    assert np.allclose(e[obj], hi, rtol=0, atol=1e-15) and np.all(e[obj] >= 0.993)
    assert np.allclose(e[~obj], lo, rtol=0, atol=1e-15) and np.all(e[~obj] <= 0.007)


@given(arrays(np.float64, (4, 4, 2), elements=st.floats(-20, 20)), st.integers(0, 15), st.floats(0, 5))
def test_saliency_monotone_in_head_response(data, cell, bump):
    head = LinearHead.one_hot(2, 0)
    before = saliency_map(FeatureGrid(data), head)
    raised = data.copy()
    raised[cell // 4, cell % 4, 0] += bump
    after = saliency_map(FeatureGrid(raised), head)
    assert after[cell // 4, cell % 4] >= before[cell // 4, cell % 4]
    assert np.all((after > 0) & (after < 1))


def test_dynamic_map_examples():
    a = np.array([[0.9, 0.3]])
    b = np.array([[0.1, 0.3]])
    assert dynamic_map(a, b)[0, 0] == pytest.approx(0.8, abs=1e-15)
    assert dynamic_map(a, b)[0, 1] == 0.0
    assert np.array_equal(dynamic_map(a, a), np.zeros_like(a))
    with pytest.raises(ConfigError):
        dynamic_map(a, np.zeros((2, 2)))


@given(unit_grid(), unit_grid())
def test_dynamic_map_symmetric_and_bounded(a, b):
    d = dynamic_map(a, b)
    assert np.array_equal(d, dynamic_map(b, a))
    assert np.all((d >= 0) & (d <= 1))


# -- selection mask -----------------------------------------------------

def test_mask_arithmetic_example():
    m = selection_mask(np.array([[0.8]]), np.array([[0.5]]), 1.0)
    assert m[0, 0] == pytest.approx(0.8, abs=1e-15)


@given(unit_grid(), unit_grid(), st.floats(0, 10))
@settings(max_examples=300)
def test_mask_collapse_laws_and_bound(e, d, rho):
    assert np.array_equal(selection_mask(e, d, 0.0), e)
    assert np.array_equal(selection_mask(e, np.zeros_like(e), rho), e / (rho + 1))
    m = selection_mask(e, d, rho)
    ceiling = SttConfig(rho=rho).mask_ceiling
    assert np.all(m >= 0) and np.all(m <= ceiling * (1 + 1e-15))


def test_mask_rejects_bad_inputs():
    with pytest.raises(ConfigError):
        selection_mask(np.zeros((2, 2)), np.zeros((2, 2)), -0.1)
    with pytest.raises(ConfigError):
        selection_mask(np.zeros((2, 2)), np.zeros((2, 3)), 1.0)


def test_collapse_laws_on_seeded_grids():
    head = LinearHead(np.random.default_rng(1).normal(size=4), 0.1)
    f_now, f_prev = seeded(seed=2), seeded(seed=3)
    e, d, m = transmission_mask(f_now, head, 0.0, history=f_prev)
    assert np.array_equal(m, e)
    e, d, m = transmission_mask(f_now, head, 1.5, history=None)
    assert np.array_equal(d, np.zeros_like(e)) and np.array_equal(m, e / 2.5)
    # static two-frame scene: the dynamic map vanishes everywhere
    e, d, m = transmission_mask(f_now, head, 1.0, history=f_now)
    assert np.array_equal(d, np.zeros((32, 32)))


def test_stt_config_validation():
    for bad in ({"rho": -1}, {"threshold": -0.5}, {"tau": 0}, {"tau": 1.5}):
        with pytest.raises(ConfigError):
            SttConfig(**bad)
    assert SttConfig().rho == 1.0 and SttConfig().threshold == 0.01


# -- token selection ----------------------------------------------------

def test_select_tokens_endpoints():
    f = seeded(8, 8, 3)
    m = np.random.default_rng(5).uniform(0.01, 0.9, (8, 8))
    assert len(select_tokens(f, m, m.max())) == 0
    full = select_tokens(f, m, 0.0)
    assert len(full) == 64
    assert full == select_all(f)
    assert np.array_equal(full.values, f.data.reshape(64, 3).astype(np.float16))


def test_token_count_monotone_over_threshold_sweep():
    scenario = generate_scenario(ScenarioConfig.preset("default", frames=2), seed=0)
    head = LinearHead.one_hot(scenario.grid.channels, 0)
    f1, _ = rasterize_features(scenario, 1, 1)
    f0, _ = rasterize_features(scenario, 1, 0)
    _, _, m = transmission_mask(f1, head, 1.0, history=f0)
    counts = [len(select_tokens(f1, m, t)) for t in (0.0001, 0.001, 0.01, 0.1, 1.0)]
    assert counts == sorted(counts, reverse=True)
    assert counts[0] == 64 * 64
    # newly covered cells can exceed 1 when rho = 1; nothing clears the ceiling
    assert len(select_tokens(f1, m, SttConfig(rho=1.0).mask_ceiling)) == 0


@given(arrays(np.float64, (5, 5), elements=unit), st.floats(0, 1), st.floats(0, 1))
def test_token_count_monotone_property(m, a, b):
    f = FeatureGrid(np.ones((5, 5, 1)))
    lo, hi = min(a, b), max(a, b)
    assert len(select_tokens(f, m, lo)) >= len(select_tokens(f, m, hi))


def test_budget_examples():
    f = seeded(6, 6, 2)
    m = np.random.default_rng(8).permutation(36).reshape(6, 6) / 36.0 + 0.01  # distinct values
    full = select_tokens(f, m, 0.0)
    big, eff = select_under_budget(f, m, encode_tokens(full).__len__())
    assert big == full and eff == 0.0
    empty, _ = select_under_budget(f, m, 0)
    assert len(empty) == 0
    for k in (1, 5, 17):
        got, eff = select_under_budget(f, m, OVERHEAD + k * entry_size(2))
        top = np.argsort(m.reshape(-1))[::-1][:k]  # sort oracle
        assert set(zip(got.rows.tolist(), got.cols.tolist())) == {divmod(int(i), 6) for i in top}
        assert select_tokens(f, m, eff) == got


@given(arrays(np.float64, (5, 6), elements=unit), st.integers(0, 600))
@settings(max_examples=200)
def test_budget_is_always_feasible(m, budget):
    f = FeatureGrid(np.random.default_rng(0).normal(size=(5, 6, 3)))
    tokens, _ = select_under_budget(f, m, budget)
    if len(tokens):
        assert len(encode_tokens(tokens)) <= budget
    with pytest.raises(ConfigError):
        select_under_budget(f, m, -1)


# -- communication volume -----------------------------------------------

def test_comm_volume_examples():
    assert abs(comm_volume(262144, 256) - 7.0) <= 1e-12
    assert abs(comm_volume(32768, 256) - 4.0) <= 1e-12
    assert abs(comm_volume(512, 64) - (-4.0)) <= 1e-12
    assert comm_volume(0, 64) is None
    with pytest.raises(ConfigError):
        comm_volume(-1, 4)


@given(st.integers(1, 2**20), st.integers(1, 512))
def test_comm_volume_halving_drops_one(n, c):
    assert comm_volume(2 * n, c) - comm_volume(n, c) == pytest.approx(1.0, abs=1e-12)


def test_comm_volume_dense_grid_matches_byte_count():
    h, w, c = 64, 64, 32
    megabytes = h * w * c * 2 / 2**20
    assert comm_volume(h * w, c) == pytest.approx(math.log2(megabytes), abs=1e-12)


# -- reconstruction -----------------------------------------------------

def test_fresh_recon_net_is_passthrough():
    x = np.random.default_rng(0).normal(size=(6, 6, 4))
    for net in (ReconNet.zeros(4), ReconNet.seeded(4)):
        assert net.is_passthrough
        assert net(x) is x
    active = ReconNet.seeded(4, scale=0.1)
    assert not active.is_passthrough
    assert not np.allclose(active(x), x)


def test_zero_filters_contribute_nothing_even_with_scale():
    net = ReconNet.zeros(3)
    net.scale[:] = 1.0
    x = np.random.default_rng(1).normal(size=(4, 4, 3))
    assert np.array_equal(net(x), x)


def test_reconstruct_full_tokens_overwrite_history():
    f = seeded(6, 6, 3, seed=4)
    history = seeded(6, 6, 3, seed=5)
    out = reconstruct(select_all(f), history, Pose(), Pose(), ReconNet.zeros(3))
    assert np.array_equal(out.data, f.data.astype(np.float16).astype(np.float64))


def test_reconstruct_empty_tokens_returns_history():
    history = seeded(6, 6, 3, seed=6)
    empty = SparseTokenSet(1, 0, Pose(), 3, 6, 6)
    out = reconstruct(empty, history, Pose(), Pose(), ReconNet.zeros(3))
    assert out.equals(history)


@given(st.integers(0, 10_000))
@settings(max_examples=50)
def test_reconstruct_matches_quantized_values_at_token_cells(seed):
    rng = np.random.default_rng(seed)
    f = FeatureGrid(rng.normal(size=(5, 5, 2)))
    mask = rng.random((5, 5)) < 0.4
    tokens = SparseTokenSet.from_cells(f, mask, 0, 0, Pose())
    history = FeatureGrid(rng.normal(size=(5, 5, 2)))
    out = reconstruct(tokens, history, Pose(), Pose(), ReconNet.zeros(2)).data
    assert np.array_equal(out[mask], f.data[mask].astype(np.float16).astype(np.float64))
    assert np.array_equal(out[~mask], history.data[~mask])


def test_reconstruct_channel_mismatch():
    tokens = SparseTokenSet(0, 0, Pose(), 3, 4, 4)
    with pytest.raises(ConfigError):
        reconstruct(tokens, FeatureGrid(np.zeros((4, 4, 2))), Pose(), Pose(), None)
    with pytest.raises(ConfigError):
        reconstruct(tokens, FeatureGrid(np.zeros((5, 4, 3))), Pose(), Pose(), None)
    with pytest.raises(ConfigError):
        reconstruct(tokens, None, None, None, ReconNet.zeros(2))


def test_reconstruct_dynamic_tokens_within_static_drift_of_dense_oracle():
    config = ScenarioConfig.preset("default", frames=2, vehicle_speed=(0.0, 0.0))
    scenario = generate_scenario(config, seed=3)
    head = LinearHead.one_hot(scenario.grid.channels, 0)
    agent = 1
    pose = scenario.agent(agent).poses[0]
    f0, _ = rasterize_features(scenario, agent, 0)
    f1, _ = rasterize_features(scenario, agent, 1)
    # dense oracle: what a full transmission delivers each frame
    dense0 = reconstruct(select_all(f0), None, None, pose, None, resolution=f0.resolution, origin=f0.origin)
    dense1 = reconstruct(select_all(f1), dense0, pose, pose, None)
    moved = np.abs(f1.data[..., 0] - f0.data[..., 0]) > 0
    static = ~moved & (f0.data[..., 0] < 0) & (f1.data[..., 0] < 0)
    drift = np.max(np.abs(dense1.data - dense0.data)[static])
    _, _, m = transmission_mask(f1, head, 1.0, history=dense0)
    tokens = select_tokens(f1, m, 0.005)
    assert np.all(tokens.mask()[moved])
    out = reconstruct(tokens, dense0, pose, pose, ReconNet.zeros(f1.channels))
    err = np.max(np.abs(out.data - dense1.data))
    assert err <= drift
    assert drift <= 2 * scenario.feature_noise + 1e-3
