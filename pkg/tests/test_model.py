import math

import numpy as np
import pytest

from bayesncl.model import (ForwardOut, MaskStrategy, ModelSpec, encode, forward, gate_alpha, gate_features,
                            infer_numpy, init_params, make_mask, method_name, topk_mask)
from bayesncl.ndcore import Graph, backward, grad_check, sigmoid
from bayesncl.objective import SimilarityConfig, bernoulli_kl_node, total_loss_node


def _graph_params(params):
    g = Graph()
    return g, {k: g.param(v) for k, v in params.items()}


def test_zero_encoder_gives_zero_features():
    spec = ModelSpec(d=5, K=3, hidden=(4,))
    params = {k: np.zeros_like(v) for k, v in init_params(spec, np.random.default_rng(0)).items()}
    g, pids = _graph_params(params)
    z = encode(g, pids, g.const(np.ones((2, 5))))
    assert np.array_equal(g.value(z), np.zeros((2, 3)))


def test_nonneg_encoder_clamps_negative_outputs():
    params = {"enc.0.W": np.eye(3), "enc.0.b": np.zeros((1, 3))}
    g, pids = _graph_params(params)
    x = np.array([[-1.0, 0.5, 2.0]])
    assert np.array_equal(g.value(encode(g, pids, g.const(x), nonneg=True)), [[0.0, 0.5, 2.0]])
    assert np.array_equal(g.value(encode(g, pids, g.const(x), nonneg=False)), x)


def test_zero_gate_is_one_half():
    spec = ModelSpec(d=4, K=3, hidden=())
    params = {k: np.zeros_like(v) for k, v in init_params(spec, np.random.default_rng(0)).items()}
    g, pids = _graph_params(params)
    a = gate_alpha(g, pids, g.const(np.random.default_rng(1).random((5, 3))))
    assert np.all(g.value(a) == 0.5)


def test_gate_bias_sets_initial_keep_probability():
    spec = ModelSpec(d=4, K=3, hidden=())
    params = init_params(spec, np.random.default_rng(0), gate_bias=math.log(0.9 / 0.1))
    params = {k: (np.zeros_like(v) if k.endswith(".W") else v) for k, v in params.items()}
    g, pids = _graph_params(params)
    a = gate_alpha(g, pids, g.const(np.ones((2, 3))))
    np.testing.assert_allclose(g.value(a), 0.9)


@pytest.mark.parametrize("detach", [True, False])
def test_detach_controls_sparsity_gradient_into_encoder(detach):
    spec = ModelSpec(d=3, K=2, hidden=(), detach=detach)
    params = init_params(spec, np.random.default_rng(0))
    params["enc.0.b"][:] = 0.5
    g, pids = _graph_params(params)
    fwd = forward(g, pids, spec, MaskStrategy("ste"), np.abs(np.random.default_rng(3).standard_normal((4, 3))))
    grads = backward(g, bernoulli_kl_node(g, fwd.alpha, 0.8, fwd.logits))
    enc = np.abs(grads[pids["enc.0.W"]]).max()
    assert np.abs(grads[pids["gate.0.W"]]).max() > 0.0
    assert (enc == 0.0) if detach else (enc > 0.0)


def test_ste_thresholds_alpha():
    g = Graph()
    a = g.param(np.array([[0.7, 0.3]]))
    m_hard, m_train = make_mask(g, a, MaskStrategy("ste"), g.const(np.ones((1, 2))))
    assert np.array_equal(m_hard, [[1.0, 0.0]])
    assert np.array_equal(g.value(m_train), m_hard)
    grad = backward(g, g.mean_all(g.mul(m_train, g.const(np.array([[2.0, 2.0]])))))[a]
    np.testing.assert_allclose(grad, [[1.0, 1.0]], rtol=0, atol=1e-15)


def test_gumbel_with_zero_noise_is_alpha_at_unit_temperature():
    g = Graph()
    a = g.param(np.array([[0.7]]))
    _, m_train = make_mask(g, a, MaskStrategy("gumbel_sigmoid", temperature=1.0), g.const(np.ones((1, 1))),
                           gumbel_noise=np.zeros((1, 1)))
    assert g.value(m_train)[0, 0] == pytest.approx(0.7, abs=1e-12)


def test_gumbel_needs_noise_source():
    g = Graph()
    a = g.param(np.array([[0.7]]))
    with pytest.raises(ValueError):
        make_mask(g, a, MaskStrategy("gumbel_sigmoid"), g.const(np.ones((1, 1))))


def test_topk_keeps_largest_and_breaks_ties_low():
    z = np.array([[3.0, 1.0, 3.0, 2.0]])
    assert np.array_equal(topk_mask(z, 0.5), [[1, 0, 1, 0]])
    assert np.array_equal(topk_mask(np.ones((1, 4)), 0.5), [[1, 1, 0, 0]])
    assert topk_mask(z, 0.0).sum() == 0


def test_strategy_validation():
    with pytest.raises(ValueError):
        MaskStrategy("hard")
    with pytest.raises(ValueError):
        MaskStrategy("gumbel_sigmoid", temperature=0.0)
    with pytest.raises(ValueError):
        ModelSpec(d=2, K=2, gate_depth=4)


def _gated(bias):
    spec = ModelSpec(d=4, K=3, hidden=(5,))
    params = init_params(spec, np.random.default_rng(0))
    params["gate.1.W"][:] = 0.0
    params["gate.1.b"][:] = bias
    g, pids = _graph_params(params)
    x = np.random.default_rng(1).standard_normal((6, 4))
    return g, forward(g, pids, spec, MaskStrategy("ste"), x)


def test_ste_all_on_passes_features_through():
    g, f = _gated(5.0)
    assert np.array_equal(f.val("z_gated"), f.val("z"))


def test_ste_all_off_zeroes_features():
    g, f = _gated(-5.0)
    assert np.array_equal(f.val("z_gated"), np.zeros_like(f.val("z")))


def test_none_strategy_is_bit_exact():
    spec = ModelSpec(d=4, K=3)
    params = init_params(spec, np.random.default_rng(0), with_gate=False)
    g, pids = _graph_params(params)
    f = forward(g, pids, spec, MaskStrategy("none"), np.ones((2, 4)))
    assert f.z_gated == f.z and f.alpha is None


def test_forward_rejects_wrong_width():
    spec = ModelSpec(d=4, K=3)
    g, pids = _graph_params(init_params(spec, np.random.default_rng(0)))
    with pytest.raises(ValueError, match="input width"):
        forward(g, pids, spec, MaskStrategy("ste"), np.ones((2, 5)))


@pytest.mark.parametrize("kind", ["none", "topk", "ste", "soft", "gumbel_sigmoid"])
def test_numpy_inference_matches_graph(kind):
    spec = ModelSpec(d=6, K=4, hidden=(5,))
    strat = MaskStrategy(kind)
    params = init_params(spec, np.random.default_rng(0), with_gate=strat.gated)
    x = np.random.default_rng(1).standard_normal((7, 6))
    g, pids = _graph_params(params)
    f = forward(g, pids, spec, strat, x, gumbel_noise=np.zeros((7, 4)))
    out = infer_numpy(params, spec, strat, x)
    np.testing.assert_allclose(out["z"], f.val("z"), atol=1e-12)
    if kind != "gumbel_sigmoid":
        np.testing.assert_allclose(out["z_gated"], f.val("z_gated"), atol=1e-12)


@pytest.mark.parametrize("kind", ["ste", "gumbel_sigmoid", "soft", "topk", "none"])
@pytest.mark.parametrize("detach", [True, False])
def test_full_loss_matches_finite_differences(kind, detach):
    spec = ModelSpec(d=8, K=6, hidden=(7,), detach=detach)
    strat = MaskStrategy(kind, temperature=0.7)
    rng = np.random.default_rng(4)
    params = init_params(spec, rng, with_gate=strat.gated)
    names = sorted(params)
    x, xp = rng.standard_normal((4, 8)), rng.standard_normal((4, 8))
    noise = (rng.logistic(size=(4, 6)), rng.logistic(size=(4, 6)))

    def f(g, ids):
        pids = dict(zip(names, ids))
        fa = forward(g, pids, spec, strat, x, gumbel_noise=noise[0])
        fp = forward(g, pids, spec, strat, xp, gumbel_noise=noise[1])
        return total_loss_node(g, fa, fp, SimilarityConfig(0.5, True), 0.1, 0.8)[0]

    assert grad_check(f, [params[k] for k in names], eps=1e-6) < 1e-5


def test_method_names():
    assert method_name(ModelSpec(2, 2, nonneg=False), MaskStrategy("none")) == "cl"
    assert method_name(ModelSpec(2, 2), MaskStrategy("none")) == "ncl"
    assert method_name(ModelSpec(2, 2), MaskStrategy("gumbel_sigmoid")) == "bayesncl_gs"


def test_gate_features_returns_logits():
    spec = ModelSpec(d=3, K=2, hidden=())
    params = init_params(spec, np.random.default_rng(0))
    g, pids = _graph_params(params)
    f = gate_features(g, pids, spec, MaskStrategy("soft"), g.const(np.ones((2, 2))))
    assert isinstance(f, ForwardOut)
    np.testing.assert_allclose(f.val("alpha"), sigmoid(f.val("logits")))
