import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dessilbi.core import make_rng
from dessilbi.errors import ArgumentError, DimensionError
from dessilbi.network import LayerSpec as L, NetworkSpec, init_params, loss_and_grad
from dessilbi.optimizer import (CoupledState, OptimizerConfig, dessilbi_step, dessilbi_step_momentum,
                                dessilbi_step_scaled, init_state, lbi_reformulated_step,
                                max_step_size, mda_step, scale_factors, sgd_step)
from dessilbi.penalty import PenaltySpec, prox


def scalar_state(w, lam=1.0, momentum=False, track_g=False):
    return CoupledState.create({"w": np.array([w])}, {"w": PenaltySpec.lasso(lam)},
                               momentum=momentum, track_g=track_g)


def test_single_step_example():
    cfg = OptimizerConfig(kappa=1.0, nu=1.0, lr=0.01)
    s = dessilbi_step(scalar_state(1.0), {"w": np.zeros(1)}, cfg)
    assert s.layers["w"].W[0] == pytest.approx(0.99, abs=1e-15)
    assert s.layers["w"].V[0] == pytest.approx(0.01, abs=1e-15)
    assert s.layers["w"].Gamma[0] == 0.0
    assert s.k == 1


def naive_loop(w, v, gam, grad_fn, kappa, nu, alpha, lam, steps):
    """Plain-float transcription of the naive iteration for one scalar."""
    out = []
    for _ in range(steps):
        gw = grad_fn(w) + (w - gam) / nu
        gg = -(w - gam) / nu
        w = w - kappa * alpha * gw
        v = v - alpha * gg
        gam = kappa * (v - lam if v > lam else (v + lam if v < -lam else 0.0))
        out.append((w, v, gam))
    return out


def test_naive_matches_scalar_transcription():
    # loss 0.5*(w - 3)^2: gradient w - 3
    cfg = OptimizerConfig(kappa=2.0, nu=5.0, lr=0.05)
    s = scalar_state(0.0, lam=0.4)
    ref = naive_loop(0.0, 0.0, 0.0, lambda w: w - 3.0, 2.0, 5.0, 0.05, 0.4, 200)
    for w, v, gam in ref:
        s = dessilbi_step(s, {"w": s.layers["w"].W - 3.0}, cfg)
        assert s.layers["w"].W[0] == pytest.approx(w, rel=1e-13, abs=1e-15)
        assert s.layers["w"].V[0] == pytest.approx(v, rel=1e-13, abs=1e-15)
        assert s.layers["w"].Gamma[0] == pytest.approx(gam, rel=1e-13, abs=1e-15)


def test_entry_time_matches_closed_form():
    # with nu huge and zero loss gradient W barely moves, so V grows by alpha*w0/nu per step
    w0, nu, alpha, lam = 2.0, 1e6, 0.1, 1e-4
    cfg = OptimizerConfig(kappa=1.0, nu=nu, lr=alpha)
    s = scalar_state(w0, lam)
    k = 0
    while s.layers["w"].Gamma[0] == 0:
        s = dessilbi_step(s, {"w": np.zeros(1)}, cfg)
        k += 1
    # V_k ~= k * alpha * w0 / nu, first k with V_k > lam
    expected = int(np.floor(lam * nu / (alpha * w0))) + 1
    assert abs(k - expected) <= 1


def test_momentum_unrolls_by_hand():
    cfg = OptimizerConfig(kappa=1.0, nu=2.0, lr=0.1, variant="momentum_wd", momentum=0.5,
                          weight_decay=0.01)
    s = scalar_state(1.0, lam=10.0, momentum=True)
    w, m = 1.0, 0.0
    for _ in range(5):
        s = dessilbi_step_momentum(s, {"w": np.full(1, 0.3)}, cfg)
        gw = 0.3 + w / 2.0
        m = 0.5 * m + gw
        w = w - 0.1 * m - 0.01 * w
        assert s.layers["w"].W[0] == pytest.approx(w, rel=1e-14)
    with pytest.raises(ArgumentError):
        dessilbi_step(scalar_state(1.0), {"w": np.zeros(1)}, cfg)


def test_scaled_beta_example():
    p = {"w": np.array([[4.0, 0.0], [0.0, 1.0]])}
    s = CoupledState.create(p, {"w": PenaltySpec.group_lasso(1.0)})
    s.layers["w"].Gamma = np.array([[1.0, 0.0], [0.0, 0.0]])
    beta, eps = scale_factors(s.layers["w"], 0.01)
    # ratio 1/2; row norms 4 and 1
    assert np.allclose(beta, [[0.125, 0.125], [0.5, 0.5]])
    assert np.allclose(eps, [[4.0, 4.0], [1.0, 1.0]])
    beta, _ = scale_factors(s.layers["w"], 0.2)
    assert np.allclose(beta[0], 0.2)


def test_scaled_step_uses_beta_and_eps():
    cfg = OptimizerConfig(kappa=1.0, nu=1.0, lr=0.5, variant="scaled", momentum=0.0)
    s = CoupledState.create({"w": np.array([[2.0, 0.0]])}, {"w": PenaltySpec.group_lasso(0.1)},
                            momentum=True)
    out = dessilbi_step_scaled(s, {"w": np.zeros((1, 2))}, cfg)
    # beta = min(1, 1/2) * (1 - 0) = 0.5; V = 0.5*0.5*[2, 0]
    assert np.allclose(out.layers["w"].V, [[0.5, 0.0]])
    assert np.allclose(out.layers["w"].Gamma, 2.0 * prox(np.array([[0.5, 0.0]]),
                                                        PenaltySpec.group_lasso(0.1)))


def test_fixed_point_is_preserved():
    cfg = OptimizerConfig(kappa=2.0, nu=3.0, lr=0.1)
    s = scalar_state(0.0, lam=1.0)
    s.layers["w"].V = np.array([1.5])
    s.layers["w"].Gamma = 2.0 * prox(s.layers["w"].V, PenaltySpec.lasso(1.0))
    s.layers["w"].W = s.layers["w"].Gamma.copy()
    out = dessilbi_step(s, {"w": np.zeros(1)}, cfg)
    for f in ("W", "V", "Gamma"):
        assert np.array_equal(getattr(out.layers["w"], f), getattr(s.layers["w"], f))


def test_huge_nu_decouples_to_gradient_descent():
    cfg = OptimizerConfig(kappa=1.0, nu=1e12, lr=0.1)
    rng = make_rng(0)
    w = rng.standard_normal(5)
    s = CoupledState.create({"w": w}, {"w": PenaltySpec.lasso(1.0)})
    for _ in range(50):
        g = s.layers["w"].W - 1.0
        s = dessilbi_step(s, {"w": g}, cfg)
        w = w - 0.1 * (w - 1.0)
    assert np.allclose(s.layers["w"].W, w, rtol=0, atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.2, 3.0), st.floats(0.01, 0.5))
def test_gamma_always_kappa_prox_v(seed, kappa, lam):
    net = NetworkSpec((L.dense(3, 4), L.act("tanh"), L.dense(4, 2)), (3,), "mse")
    rng = make_rng(seed)
    x, y = rng.standard_normal((8, 3)), rng.standard_normal((8, 2))
    cfg = OptimizerConfig(kappa=kappa, nu=1.0, lr=0.05 / kappa)
    s = init_state(net, init_params(net, rng), lam)
    for _ in range(10):
        _, g = loss_and_grad(net, s.params(), x, y)
        s = dessilbi_step(s, g, cfg)
        for ls in s.layers.values():
            assert np.array_equal(ls.Gamma, kappa * prox(ls.V, ls.penalty))


def test_reformulated_matches_naive_short_run():
    net = NetworkSpec((L.dense(3, 5), L.act("tanh"), L.dense(5, 2)), (3,), "mse")
    rng = make_rng(3)
    x, y = rng.standard_normal((16, 3)), rng.standard_normal((16, 2))
    params = init_params(net, rng)
    cfg = OptimizerConfig(kappa=1.0, nu=1.0, lr=0.1)
    a = init_state(net, params, 0.05)
    b = init_state(net, params, 0.05, track_g=True)
    for _ in range(50):
        a = dessilbi_step(a, loss_and_grad(net, a.params(), x, y)[1], cfg)
        b = lbi_reformulated_step(b, loss_and_grad(net, b.params(), x, y)[1], cfg)
    for key in a.layers:
        assert np.allclose(a.layers[key].W, b.layers[key].W, rtol=1e-10, atol=1e-13)
        assert np.allclose(a.layers[key].Gamma, b.layers[key].Gamma, rtol=1e-10, atol=1e-13)


def test_step_does_not_mutate_input():
    s = scalar_state(1.0)
    before = s.layers["w"].W.copy()
    dessilbi_step(s, {"w": np.ones(1)}, OptimizerConfig())
    assert np.array_equal(s.layers["w"].W, before)


def test_step_errors():
    s = scalar_state(1.0)
    with pytest.raises(DimensionError):
        dessilbi_step(s, {}, OptimizerConfig())
    with pytest.raises(DimensionError):
        dessilbi_step(s, {"w": np.ones(2)}, OptimizerConfig())
    with pytest.raises(ArgumentError):
        OptimizerConfig(variant="adam")
    with pytest.raises(ArgumentError):
        lbi_reformulated_step(s, {"w": np.ones(1)}, OptimizerConfig(variant="momentum"))


def test_alpha_schedule():
    cfg = OptimizerConfig(lr=1.0, lr_step=2, lr_decay=0.5)
    assert [cfg.alpha(e) for e in range(5)] == [1.0, 1.0, 0.5, 0.5, 0.25]
    cfg = OptimizerConfig(lr=1.0, milestones=(1, 3))
    assert [cfg.alpha(e) for e in range(4)] == pytest.approx([1.0, 0.1, 0.1, 0.01])
    assert OptimizerConfig.from_dict(cfg.to_dict()) == cfg


def test_mda_and_sgd_examples():
    z, w = mda_step(np.array([0.5, -0.5]), np.zeros(2), np.array([-1.0, 0.0]), 1.0,
                    PenaltySpec.lasso(1.0), kappa=2.0)
    assert np.allclose(z, [1.5, -0.5]) and np.allclose(w, [1.0, 0.0])
    p, b = sgd_step({"a": np.array([1.0])}, {"a": np.array([2.0])}, 0.1, momentum=0.9)
    assert p["a"][0] == pytest.approx(0.8)
    p, b = sgd_step(p, {"a": np.array([2.0])}, 0.1, momentum=0.9, buffers=b)
    assert b["a"][0] == pytest.approx(3.8) and p["a"][0] == pytest.approx(0.42)
    p, _ = sgd_step({"a": np.array([1.0])}, {"a": np.array([0.0])}, 0.1, weight_decay=0.5)
    assert p["a"][0] == 0.5


def test_max_step_size():
    assert max_step_size(1.0, 10.0, 1.9) == pytest.approx(1.0)
    assert max_step_size(2.0, 1.0, 1.0) == pytest.approx(0.5)
    with pytest.raises(ArgumentError):
        max_step_size(1.0, 0.0, 1.0)
