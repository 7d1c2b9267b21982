import hashlib

import numpy as np
import pytest

import oracles
from conftest import random_state, tiny_config
from routedrive import numerics as nx
from routedrive import world
from routedrive.errors import ConfigError
from routedrive.model import Model
from routedrive.numerics import MASK_VALUE, Tensor
from routedrive.tokenizer import TokenType
from routedrive.transformer import (
    ExpertParams,
    RoutedLayerParams,
    build_mask,
    expert_ffn,
    layer_forward,
    merge_back,
    model_forward,
    route_gather,
    shared_attention,
)

G, A = TokenType.GOAL, TokenType.PATH_ACTION
GOLDEN_HASH = "3ed7473fb1ff0e7262bf0442072ac69c1049b39fae43b929c429a1b6ed017850"


def rand_layer(rng, d, dff, tie=False):
    t = lambda *s: Tensor(rng.standard_normal(s) / np.sqrt(s[0]))
    e0 = ExpertParams(t(d, dff), t(d, dff), t(dff, d))
    e1 = e0 if tie else ExpertParams(t(d, dff), t(d, dff), t(dff, d))
    gains = lambda: Tensor(1.0 + 0.1 * rng.standard_normal(d))
    return RoutedLayerParams(t(d, d), t(d, d), t(d, d), t(d, d), gains(), gains(), (e0, e1))


def as_dict(layer):
    out = {k: getattr(layer, k).data for k in ("wq", "wk", "wv", "wo", "ln_attn", "ln_ffn")}
    for e, ex in enumerate(layer.experts):
        out.update({f"gate{e}": ex.gate.data, f"up{e}": ex.up.data, f"down{e}": ex.down.data})
    out.update(gate=out["gate0"], up=out["up0"], down=out["down0"])
    return out


def test_build_mask_cases():
    m = build_mask([G, G, G])
    assert np.array_equal(m == 0.0, np.tril(np.ones((3, 3), dtype=bool)))
    m = build_mask([G, G, A, A])
    assert m[2, 3] == 0.0 and m[3, 2] == 0.0
    assert m[1, 2] == MASK_VALUE and m[1, 3] == MASK_VALUE
    assert np.all(build_mask([A] * 5) == 0.0)
    assert np.all(np.diag(build_mask([G, A, G, A])) == 0.0)
    with pytest.raises(ConfigError):
        build_mask([])


def test_build_mask_matches_oracle_on_canonical_layout():
    tags = [G] * 3 + [TokenType.IMAGE] * 16 + [TokenType.TARGET_POINT] + [TokenType.COMMAND] * 5 \
        + [TokenType.EGO_STATE] + [A] * 20 + [TokenType.SPEED_ACTION] * 10
    is_act = [t in (A, TokenType.SPEED_ACTION) for t in tags]
    assert np.array_equal(build_mask(tags), oracles.causal_action_mask(is_act))


def test_decoupled_mask_hides_prefix_from_actions():
    m = build_mask([G, G, A, A], decoupled=True)
    assert np.all(m[2:, :2] == MASK_VALUE) and np.all(m[2:, 2:] == 0.0)
    assert np.array_equal(m[:2], build_mask([G, G, A, A])[:2])


def test_shared_attention_closed_forms():
    rng = np.random.default_rng(0)
    layer = rand_layer(rng, 8, 12)
    h = rng.standard_normal((1, 8))
    out = shared_attention(Tensor(h), layer, np.zeros((1, 1)), 2).data
    ref = h + oracles.layer_norm(h, layer.ln_attn.data) @ layer.wv.data @ layer.wo.data
    assert np.allclose(out, ref, atol=1e-13)
    zero_wo = RoutedLayerParams(layer.wq, layer.wk, layer.wv, Tensor(np.zeros((8, 8))),
                                layer.ln_attn, layer.ln_ffn, layer.experts)
    h5 = rng.standard_normal((5, 8))
    assert np.array_equal(shared_attention(Tensor(h5), zero_wo, build_mask([G] * 5), 2).data, h5)
    with pytest.raises(ConfigError):
        shared_attention(Tensor(h5), layer, build_mask([G] * 5), 3)


def test_shared_attention_matches_oracle():
    rng = np.random.default_rng(1)
    layer = rand_layer(rng, 8, 12)
    h = rng.standard_normal((5, 8))
    mask = build_mask([G, G, G, A, A])
    got = shared_attention(Tensor(h), layer, mask, 2).data
    p = as_dict(layer)
    ref = oracles.attention(h, p["wq"], p["wk"], p["wv"], p["wo"], p["ln_attn"], mask, 2)
    assert np.max(np.abs(got - ref)) < 1e-12


def test_route_gather_and_merge():
    rng = np.random.default_rng(2)
    h = Tensor(rng.standard_normal((6, 4)))
    assert np.array_equal(route_gather(h, np.arange(6)).data, h.data)
    assert route_gather(h, np.zeros(0, dtype=int)).shape == (0, 4)
    vl, act = np.array([0, 2, 3]), np.array([1, 4, 5])
    zero = lambda n: Tensor(np.zeros((n, 4)))
    assert np.array_equal(merge_back(h, zero(3), zero(3), vl, act).data, h.data)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    got = merge_back(h, Tensor(a), Tensor(b), vl, act).data
    ref = h.data.copy()
    for r, i in enumerate(vl):
        ref[i] += a[r]
    for r, i in enumerate(act):
        ref[i] += b[r]
    assert np.array_equal(got, ref)
    # gather both sets then scatter with zero residual reproduces the input
    back = merge_back(Tensor(np.zeros((6, 4))), route_gather(h, vl), route_gather(h, act), vl, act)
    assert np.array_equal(back.data, h.data)


def test_expert_ffn():
    rng = np.random.default_rng(3)
    ex = rand_layer(rng, 8, 12).experts[0]
    assert np.all(expert_ffn(Tensor(np.zeros((2, 8))), ex).data == 0.0)
    x = rng.standard_normal((2, 8))
    zero_down = ExpertParams(ex.gate, ex.up, Tensor(np.zeros((12, 8))))
    assert np.all(expert_ffn(Tensor(x), zero_down).data == 0.0)
    ref = oracles.gated_ffn(x, ex.gate.data, ex.up.data, ex.down.data)
    assert np.max(np.abs(expert_ffn(Tensor(x), ex).data - ref)) < 1e-12


def test_layer_forward_matches_straight_line_reference():
    rng = np.random.default_rng(4)
    layer = rand_layer(rng, 8, 12)
    tags = [G, G, TokenType.TARGET_POINT, TokenType.COMMAND, A, TokenType.SPEED_ACTION]
    is_act = [t in (A, TokenType.SPEED_ACTION, TokenType.TARGET_POINT) for t in tags]
    vl = np.array([i for i, a in enumerate(is_act) if not a])
    act = np.array([i for i, a in enumerate(is_act) if a])
    h = rng.standard_normal((6, 8))
    mask = build_mask(tags)
    got = layer_forward(Tensor(h), layer, mask, vl, act, 2).data
    ref = oracles.routed_layer(h, as_dict(layer), mask, 2, is_act)
    assert np.max(np.abs(got - ref)) < 1e-12


def test_tied_experts_equal_unrouted_layer():
    rng = np.random.default_rng(5)
    layer = rand_layer(rng, 8, 12, tie=True)
    h = rng.standard_normal((6, 8))
    mask = build_mask([G, G, G, G, A, A])
    got = layer_forward(Tensor(h), layer, mask, np.arange(4), np.array([4, 5]), 2).data
    ref = oracles.single_ffn_stack(h, [as_dict(layer)], mask, 2)
    assert np.max(np.abs(got - ref)) < 1e-12


def test_all_vl_sequence_leaves_expert1_gradients_zero():
    rng = np.random.default_rng(6)
    layer = rand_layer(rng, 8, 12)
    for t in (layer.experts[0].gate, layer.experts[1].gate, layer.experts[1].down):
        t.requires_grad = True
    h = Tensor(rng.standard_normal((4, 8)))
    out = layer_forward(h, layer, build_mask([G] * 4), np.arange(4), np.zeros(0, dtype=int), 2)
    nx.backward(nx.sum_all(nx.mul(out, out)))
    assert np.any(layer.experts[0].gate.grad != 0)
    for t in (layer.experts[1].gate, layer.experts[1].down):
        assert t.grad is None or np.all(t.grad == 0)


def test_model_forward_zero_layers_is_identity():
    h = Tensor(np.random.default_rng(7).standard_normal((3, 8)))
    assert np.array_equal(model_forward(h, [], build_mask([G] * 3), np.arange(3), np.zeros(0, int), 2).data, h.data)


def test_prefix_invariance_under_action_changes():
    model = Model(tiny_config())
    b = world.collate(world.generate(0, 3))
    rng = np.random.default_rng(8)
    s1, s2 = random_state(rng, 3), random_state(rng, 3)
    seq1, seq2 = model.sequence(b, s1), model.sequence(b, s2)
    h1, h2 = model.forward(seq1).data, model.forward(seq2).data
    lo = seq1.spans["action"][0]
    assert h1[:, :lo].tobytes() == h2[:, :lo].tobytes()
    assert not np.array_equal(h1[:, lo:], h2[:, lo:])


def test_golden_forward_hash():
    model = Model(tiny_config(seed=7))
    b = world.collate(world.generate(0, 2))
    seq = model.sequence(b, random_state(np.random.default_rng(0), 2))
    h = model.forward(seq).data
    assert np.allclose(h[0, 0, :4], [0.66584633, -1.56993757, 0.43762954, -0.60682866], atol=1e-8)
    assert np.allclose(h[1, -1, -3:], [0.46395079, 0.33550708, -0.68047559], atol=1e-8)
    assert hashlib.sha256(np.round(h, 9).tobytes()).hexdigest() == GOLDEN_HASH


def test_single_expert_routes_everything_to_expert1():
    model = Model(tiny_config(variant="single-expert"))
    b = world.collate(world.generate(0, 1))
    seq = model.sequence(b, random_state(np.random.default_rng(9), 1))
    vl, act, _ = model.routing(seq.tags)
    assert vl.size == 0 and act.tolist() == list(range(len(seq)))


def test_shared_ffn_variant_has_one_expert_per_layer():
    model = Model(tiny_config(variant="shared-ffn"))
    assert model.group("expert1") == []
    layer = model.layer(0)
    assert layer.experts[0] is layer.experts[1]


def test_sequence_longer_than_max_len_rejected():
    model = Model(tiny_config(max_len=40))
    b = world.collate(world.generate(0, 1))
    with pytest.raises(ConfigError):
        model.forward(model.sequence(b, random_state(np.random.default_rng(0), 1)))
