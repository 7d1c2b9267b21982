import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from conftest import random_state, tiny_config
from routedrive import flow
from routedrive import numerics as nx
from routedrive import world
from routedrive.errors import ConfigError, InputError
from routedrive.flow import FlowNoise, NoisyActionState
from routedrive.model import Model
from routedrive.numerics import Tensor

finite = st.floats(-1e6, 1e6, allow_nan=False)


def test_sample_noisy_cases():
    rng = np.random.default_rng(0)
    y, eps = rng.standard_normal((20, 2)), rng.standard_normal((20, 2))
    assert np.array_equal(flow.sample_noisy(y, eps, 0.0), eps)
    assert np.array_equal(flow.sample_noisy(y, eps, 1.0), y)
    assert flow.sample_noisy([2.0, 4.0], [0.0, 0.0], 0.5).tolist() == [1.0, 2.0]
    tau = 0.37
    got = flow.sample_noisy(y, eps, tau)
    for idx in np.ndindex(y.shape):
        assert got[idx] == (1 - tau) * eps[idx] + tau * y[idx]
    with pytest.raises(InputError):
        flow.sample_noisy(y, eps[:5], 0.5)
    with pytest.raises(InputError):
        flow.sample_noisy(y, eps, 1.2)


def test_sample_noisy_per_sample_tau():
    rng = np.random.default_rng(1)
    y, eps = rng.standard_normal((3, 20, 2)), rng.standard_normal((3, 20, 2))
    tau = np.array([0.0, 0.5, 1.0])
    got = flow.sample_noisy(y, eps, tau)
    assert np.array_equal(got[0], eps[0]) and np.array_equal(got[2], y[2])


def test_target_field_cases():
    assert np.all(flow.target_field([1.0, 2.0], [1.0, 2.0]) == 0)
    assert flow.target_field([3.0, 0.0], [1.0, 0.0]).tolist() == [2.0, 0.0]
    with pytest.raises(InputError):
        flow.target_field(np.zeros(3), np.zeros(2))


@settings(max_examples=80, deadline=None)
@given(hnp.arrays(np.float64, (20, 2), elements=finite), hnp.arrays(np.float64, (20, 2), elements=finite))
def test_flow_identities_property(y, eps):
    assert np.array_equal(flow.sample_noisy(y, eps, 0.0), eps)
    assert np.array_equal(flow.sample_noisy(y, eps, 1.0), y)
    # y - eps + eps is exact only when the subtraction is; check on dyadic grids below
    assert np.allclose(flow.target_field(y, eps) + eps, y, rtol=0, atol=1e-9)


@settings(max_examples=80, deadline=None)
@given(hnp.arrays(np.float64, (10, 1), elements=st.integers(-2**20, 2**20).map(lambda k: k / 1024.0)),
       hnp.arrays(np.float64, (10, 1), elements=st.integers(-2**20, 2**20).map(lambda k: k / 1024.0)))
def test_target_field_plus_eps_exact_property(y, eps):
    assert np.array_equal(flow.target_field(y, eps) + eps, y)


def test_implicit_condition():
    rng = np.random.default_rng(2)
    w = rng.standard_normal((6, 3))
    row = rng.standard_normal((1, 6))
    assert np.allclose(flow.implicit_condition(Tensor(row), Tensor(w)).data, row[0] @ w)
    dup = np.repeat(row, 4, axis=0)
    assert np.allclose(flow.implicit_condition(Tensor(dup), Tensor(w)).data, row[0] @ w, atol=1e-14)
    h = rng.standard_normal((5, 6))
    assert np.allclose(flow.implicit_condition(Tensor(h), Tensor(w)).data, h.mean(0) @ w, atol=1e-14)
    with pytest.raises(InputError):
        flow.implicit_condition(Tensor(np.zeros((0, 6))), Tensor(w))


def test_explicit_condition():
    rng = np.random.default_rng(3)
    we, wn, wp = (Tensor(rng.standard_normal(s)) for s in ((5, 2), (6, 2), (2, 2)))
    zero = flow.explicit_condition(np.zeros(5), Tensor(np.zeros((3, 6))), np.zeros(2), we, wn, wp)
    assert np.all(zero.data == 0)
    ego, nav, p = rng.standard_normal(5), rng.standard_normal((3, 6)), rng.standard_normal(2)
    got = flow.explicit_condition(ego, Tensor(nav), p, we, wn, wp).data
    ref = np.concatenate([ego @ we.data, nav.mean(0) @ wn.data, (p / 20.0) @ wp.data])
    assert np.allclose(got, ref, atol=1e-14)
    moved = flow.explicit_condition(ego, Tensor(nav), p + 1.0, we, wn, wp).data
    assert np.array_equal(moved[:4], got[:4]) and not np.array_equal(moved[4:], got[4:])
    with pytest.raises(InputError):
        flow.explicit_condition(ego, Tensor(np.zeros((0, 6))), p, we, wn, wp)


def test_predict_field_shapes_and_live_conditioning(batch):
    model = Model(tiny_config())
    state = random_state(np.random.default_rng(4), len(batch))
    vp, vs = flow.predict_field(model, batch, state)
    assert vp.shape == (len(batch), 20, 2) and vs.shape == (len(batch), 10, 1)
    changed = batch.with_text(batch.command_ids[:, 2:])
    changed.goal_ids = (batch.goal_ids + 1) % 20 + 3
    vp2, _ = flow.predict_field(model, changed, state)
    assert not np.array_equal(vp.data, vp2.data)


def test_predict_field_tied_experts_match_shared_ffn_variant(batch):
    routed = Model(tiny_config())
    shared = Model(tiny_config(variant="shared-ffn"))
    for name, t in shared.store.items():
        t.data = routed.store[name].data.copy()
    for name in routed.group("expert1"):
        routed.store[name].data = routed.store[name.replace("expert1", "expert0")].data.copy()
    state = random_state(np.random.default_rng(5), len(batch))
    a = flow.predict_field(routed, batch, state)
    b = flow.predict_field(shared, batch, state)
    for x, y in zip(a, b):
        assert np.max(np.abs(x.data - y.data)) < 1e-12


def test_euler_constant_field_recovers_target_exactly():
    rng = np.random.default_rng(6)
    b = world.collate(world.generate(0, 2))
    x0 = rng.standard_normal((2, 20, 2)), rng.standard_normal((2, 10, 1))
    y = rng.standard_normal((2, 20, 2)), rng.standard_normal((2, 10, 1))
    field = lambda state: (y[0] - x0[0], y[1] - x0[1])
    one = flow.euler_integrate(None, b, steps=1, field_fn=field, x0=x0)
    assert np.array_equal(one.waypoints, (x0[0] + (y[0] - x0[0])) * 20.0)
    for steps in (1, 2, 3, 7, 10, 64):
        out = flow.euler_integrate(None, b, steps=steps, field_fn=field, x0=x0)
        assert np.max(np.abs(out.waypoints / 20.0 - y[0])) < 1e-14
        assert np.max(np.abs(out.speeds / 15.0 - y[1][..., 0])) < 1e-14
    with pytest.raises(ConfigError):
        flow.euler_integrate(None, b, steps=0, field_fn=field, x0=x0)


def test_euler_single_step_and_determinism(batch):
    model = Model(tiny_config())
    x0 = flow.initial_noise(3, len(batch))
    one = flow.euler_integrate(model, batch, steps=1, x0=x0)
    vp, vs = flow.predict_field(model, batch, NoisyActionState(x0[0], x0[1], 0.0))
    assert np.array_equal(one.waypoints, (x0[0] + vp.data) * 20.0)
    a = flow.euler_integrate(model, batch, steps=3, seed=9)
    b = flow.euler_integrate(model, batch, steps=3, seed=9)
    assert a.waypoints.tobytes() == b.waypoints.tobytes() and a.speeds.shape == (len(batch), 10)


def test_euler_queries_tau_grid():
    b = world.collate(world.generate(0, 1))
    seen = []

    def field(state):
        seen.append(float(state.tau))
        return np.zeros_like(state.path), np.zeros_like(state.speed)

    flow.euler_integrate(None, b, steps=4, field_fn=field)
    assert seen == [0.0, 0.25, 0.5, 0.75]


def test_smoothness_cases():
    line = np.stack([np.arange(1, 21) * 0.7, np.arange(1, 21) * -0.2], axis=-1)
    assert abs(float(flow.smoothness_loss(line).data)) < 1e-24
    k = np.arange(1, 21, dtype=np.float64)
    quad = np.stack([k, k * k], axis=-1)
    assert float(flow.smoothness_loss(quad).data) == 4.0
    rng = np.random.default_rng(7)
    wp = rng.standard_normal((20, 2))
    assert abs(float(flow.smoothness_loss(wp).data) - oracles.smoothness(wp.tolist())) < 1e-13
    with pytest.raises(InputError):
        flow.smoothness_loss(np.zeros((19, 2)))


def test_flow_losses_with_stub_fields(batch, monkeypatch):
    model = Model(tiny_config())
    noise = FlowNoise.draw(np.random.default_rng(8), len(batch))
    y = flow.normalize_path(batch.path)
    target = flow.target_field(y, noise.eps_path)

    monkeypatch.setattr(flow, "field_from_hidden", lambda *a: (Tensor(target), Tensor(np.zeros((len(batch), 10, 1)))))
    assert float(flow.flow_terms(model, batch, noise)["path"].data) == 0.0

    monkeypatch.setattr(flow, "field_from_hidden", lambda *a: (Tensor(np.zeros_like(y)), Tensor(np.zeros((len(batch), 10, 1)))))
    got = float(flow.flow_terms(model, batch, noise)["path"].data)
    ref = np.mean(np.sum((y - noise.eps_path) ** 2, axis=-1))
    assert abs(got - ref) < 1e-12


def test_path_loss_gradient_wrt_flow_head_matches_finite_differences(batch):
    model = Model(tiny_config())
    noise = FlowNoise.draw(np.random.default_rng(9), len(batch))
    loss = flow.flow_terms(model, batch, noise)["path"]
    model.store.zero_grad()
    nx.backward(loss)
    rng = np.random.default_rng(10)
    for name in ("flow.path.w1", "flow.path.w2", "flow.proj", "cond.vl"):
        arr = model.store[name].data
        grad = model.store[name].grad
        for _ in range(3):
            idx = tuple(rng.integers(0, s) for s in arr.shape)
            num = oracles.central_difference(lambda: float(flow.flow_terms(model, batch, noise)["path"].data), arr, idx)
            assert abs(grad[idx] - num) <= 1e-4 * max(abs(num), abs(grad[idx]), 1e-7)


def test_flow_terms_requires_ground_truth(batch):
    model = Model(tiny_config())
    b = world.collate(world.generate(0, 2))
    b.path = None
    with pytest.raises(InputError):
        flow.flow_terms(model, b, FlowNoise.draw(np.random.default_rng(0), 2))


def test_noisy_state_validation():
    with pytest.raises(InputError):
        NoisyActionState(np.zeros((19, 2)), np.zeros((10, 1)), 0.5)
    with pytest.raises(InputError):
        NoisyActionState(np.zeros((20, 2)), np.zeros((10, 1)), -0.1)


def test_regression_variant_is_single_pass(batch):
    model = Model(tiny_config(variant="regression-head"))
    out = flow.euler_integrate(model, batch, steps=10)
    vp, _ = flow.predict_field(model, batch, NoisyActionState(np.zeros((len(batch), 20, 2)), np.zeros((len(batch), 10, 1)), 0.0))
    assert np.array_equal(out.waypoints, vp.data * 20.0)
    noise = FlowNoise.draw(np.random.default_rng(0), len(batch))
    terms = flow.flow_terms(model, batch, noise)
    ref = np.mean(np.sum((vp.data - flow.normalize_path(batch.path)) ** 2, axis=-1))
    assert abs(float(terms["path"].data) - ref) < 1e-12
