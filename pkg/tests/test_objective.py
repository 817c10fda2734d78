import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bayesncl.ndcore import Graph
from bayesncl.objective import (SimilarityConfig, bernoulli_kl, bernoulli_kl_node, info_nce, ipw_similarity,
                                ipw_similarity_matrix, masked_info_nce_node, softplus_node, total_loss_node)
from bayesncl.trainer import TrainConfig

RAW = SimilarityConfig(tau=1.0, normalize=False)


def test_symmetric_case_is_ln2():
    a = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert info_nce(a, a, RAW) == pytest.approx(math.log(2), abs=1e-12)


def test_unit_margin_value():
    # row 0: s_p = 1, s_n = 0; row 1 mirrors it
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert info_nce(a, a, RAW) == pytest.approx(-1 + math.log(math.e + 1), abs=1e-12)


def test_loss_nonnegative_and_decreasing_in_margin():
    grid = np.linspace(-3, 3, 20)

    def loss(sp, sn):
        return -sp + np.logaddexp(sp, sn)

    L = np.array([[loss(sp, sn) for sn in grid] for sp in grid])
    assert np.all(L >= 0)
    assert np.all(np.diff(L, axis=0) < 0) and np.all(np.diff(L, axis=1) > 0)
    # the graph builder agrees with the closed form on a two-anchor batch
    for sp, sn in [(0.3, -1.0), (2.0, 2.0), (-1.5, 0.5)]:
        a = np.array([[1.0], [sn]])
        p = np.array([[sp], [sp * sn]])
        want = 0.5 * (loss(sp, sn) + loss(sp * sn * sn, sn))
        assert info_nce(a, p, RAW) == pytest.approx(want, abs=1e-12)


def test_info_nce_needs_two_anchors():
    with pytest.raises(ValueError):
        info_nce(np.ones((1, 3)), np.ones((1, 3)))


def test_kl_closed_forms():
    assert bernoulli_kl(np.full((3, 4), 0.8), 0.8) == pytest.approx(0.0, abs=1e-12)
    assert bernoulli_kl(np.array([[0.9]]), 0.8) == pytest.approx(0.9 * math.log(1.125) + 0.1 * math.log(0.5),
                                                                 abs=1e-12)
    assert bernoulli_kl(np.array([[0.9]]), 0.8) == pytest.approx(0.0366900, abs=5e-8)


def test_kl_saturated_limit_from_logits():
    g = Graph()
    u = g.const(np.array([[60.0]]))
    kl = bernoulli_kl_node(g, g.sigmoid(u), 0.8, logits=u)
    assert float(g.value(kl)[0, 0]) == pytest.approx(math.log(1 / 0.8), abs=1e-9)


@given(st.floats(-40, 40))
def test_logit_form_matches_direct_form(u):
    g = Graph()
    uid = g.const(np.array([[u]]))
    a = g.sigmoid(uid)
    av = float(g.value(a)[0, 0])
    if not 1e-12 < av < 1 - 1e-12:
        return
    stable = float(g.value(bernoulli_kl_node(g, a, 0.3, logits=uid))[0, 0])
    direct = float(g.value(bernoulli_kl_node(g, a, 0.3))[0, 0])
    assert stable == pytest.approx(direct, rel=1e-7, abs=1e-9)


def test_softplus_is_finite_for_large_inputs():
    g = Graph()
    sp = g.value(softplus_node(g, g.const(np.array([[-800.0, 0.0, 800.0]]))))
    np.testing.assert_allclose(sp, [[0.0, math.log(2), 800.0]])


def test_rho_outside_unit_interval_rejected():
    with pytest.raises(ValueError):
        bernoulli_kl(np.full((1, 1), 0.5), 1.0)


def test_all_ones_mask_equals_plain_loss():
    z = np.random.default_rng(0).random((5, 3))
    cfg = SimilarityConfig(0.5)
    g = Graph()
    ones = g.const(np.ones_like(z))
    fa = SimpleNamespace(z_gated=g.mul(g.const(z), ones))
    fp = SimpleNamespace(z_gated=g.mul(g.const(z[::-1].copy()), ones))
    got = float(g.value(masked_info_nce_node(g, fa, fp, cfg))[0, 0])
    assert got == info_nce(z, z[::-1].copy(), cfg)


def test_all_zero_mask_unnormalised_gives_ln_n():
    z = np.zeros((6, 3))
    assert info_nce(z, z, SimilarityConfig(0.5, normalize=False)) == pytest.approx(math.log(6), abs=1e-12)


def test_total_is_align_plus_weighted_sparsity():
    rng = np.random.default_rng(1)
    z = rng.random((4, 3))
    alpha = rng.uniform(0.1, 0.9, (4, 3))
    g = Graph()
    fa = SimpleNamespace(z_gated=g.const(z), alpha=g.const(alpha), logits=None)
    fp = SimpleNamespace(z_gated=g.const(z + 0.1), alpha=g.const(alpha), logits=None)
    _, _, _, br = total_loss_node(g, fa, fp, SimilarityConfig(0.5), 0.3, 0.8)
    assert br.total == br.align + 0.3 * br.sparsity
    _, _, _, br0 = total_loss_node(g, fa, fp, SimilarityConfig(0.5), 0.0, 0.8)
    assert br0.total == br0.align


def test_no_gate_reports_zero_sparsity():
    g = Graph()
    z = np.random.default_rng(2).random((3, 2))
    fa = SimpleNamespace(z_gated=g.const(z), alpha=None, logits=None)
    _, _, sp, br = total_loss_node(g, fa, fa, SimilarityConfig(), 1.0, 0.8)
    assert sp is None and br.sparsity == 0.0 and br.total == br.align


def test_default_sparsity_weight():
    assert TrainConfig().lam == 3e-5
    assert TrainConfig().rho == 0.8


def test_ipw_similarity_examples():
    assert ipw_similarity([1, 0], [1, 0], [0.5, 0.9]) == pytest.approx(2.0)
    assert ipw_similarity([1, 1], [1, 1], [0.9, 0.1]) == pytest.approx(1 / 0.9 + 1 / 0.1)
    z, zp = np.array([0.3, 2.0]), np.array([1.5, 0.25])
    assert ipw_similarity(z, zp, [1, 1]) == pytest.approx(float(z @ zp))


def test_ipw_rejects_bad_prevalence():
    with pytest.raises(ValueError):
        ipw_similarity([1], [1], [0.0])
    with pytest.raises(ValueError):
        ipw_similarity([1, 2], [1], [0.5, 0.5])


def test_ipw_matrix_matches_scalar():
    rng = np.random.default_rng(3)
    Z, Zp, pi = rng.random((5, 3)), rng.random((5, 3)), rng.uniform(0.1, 1, 3)
    np.testing.assert_allclose(ipw_similarity_matrix(Z, Zp, pi), [ipw_similarity(a, b, pi) for a, b in zip(Z, Zp)])
