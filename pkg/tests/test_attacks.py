import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gsattack.attacks import (AttackConfig, clip_to_ball, fgsm, momentum_update, preset, run_attack,
                              sign)
from gsattack.model import LinearModel, LossSpec, Network
from gsattack.transforms import default_pipeline, derive_rng


class Negated:
    def __init__(self, model):
        self.model = model

    def value_and_grad(self, xs, loss):
        v, g = self.model.value_and_grad(xs, loss)
        return -v, -g


class Flat:
    def value_and_grad(self, xs, loss):
        return np.zeros(len(xs)), np.zeros_like(xs)


# independent textbook loops; the engine must match them bit for bit

def ref_ifgsm(model, x, loss, eps, alpha, n):
    adv = x.copy()
    for _ in range(n):
        _, g = model.value_and_grad(adv[None], loss)
        adv = np.clip(adv + alpha * np.sign(g[0]), np.maximum(x - eps, 0), np.minimum(x + eps, 1))
    return adv


def ref_mifgsm(model, x, loss, eps, alpha, n, mu):
    adv, acc = x.copy(), np.zeros_like(x)
    for _ in range(n):
        _, g = model.value_and_grad(adv[None], loss)
        acc = mu * acc + g[0] / np.sum(np.abs(g[0]))
        adv = np.clip(adv + alpha * np.sign(acc), np.maximum(x - eps, 0), np.minimum(x + eps, 1))
    return adv


def ref_di2fgsm(model, x, loss, eps, alpha, n, p, seed):
    rng = derive_rng(seed, 0)
    pipe = default_pipeline(p)
    adv = x.copy()
    for _ in range(n):
        t = pipe.transform(adv, rng) if rng.random() < p else adv
        _, g = model.value_and_grad(t[None], loss)
        adv = np.clip(adv + alpha * np.sign(g[0]), np.maximum(x - eps, 0), np.minimum(x + eps, 1))
    return adv


@pytest.fixture
def setup(tiny_params, rng):
    return Network(tiny_params), rng.random((12, 12, 3)), LossSpec.cross_entropy(1)


def test_sign_convention():
    np.testing.assert_array_equal(sign([0.3, -0.2, 0.0]), [1, -1, 0])
    with pytest.raises(ValueError):
        sign([np.nan])


# magnitudes kept away from underflow so c * g keeps its sign
finite = st.one_of(st.just(0.0), st.floats(1e-200, 1e6), st.floats(-1e6, -1e-200))


@given(arrays(np.float64, 6, elements=finite), st.floats(1e-6, 1e6))
def test_sign_odd_and_scale_invariant(g, c):
    np.testing.assert_array_equal(sign(-g), -sign(g))
    np.testing.assert_array_equal(sign(c * g), sign(g))


def test_clip_to_ball_cases():
    assert clip_to_ball(np.array([0.75]), np.array([0.5]), 0.1)[0] == pytest.approx(0.6)
    assert clip_to_ball(np.array([1.2]), np.array([0.95]), 0.1)[0] == 1.0
    assert clip_to_ball(np.array([0.52]), np.array([0.5]), 0.1)[0] == 0.52
    with pytest.raises(ValueError):
        clip_to_ball(np.zeros(2), np.zeros(3), 0.1)


def test_momentum_arithmetic():
    g1, z1 = momentum_update(np.zeros(2), np.array([0.3, -0.2]), 1.0)
    np.testing.assert_allclose(g1, [0.6, -0.4], atol=1e-12)
    g2, z2 = momentum_update(g1, np.array([0.1, 0.1]), 1.0)
    np.testing.assert_allclose(g2, [1.1, 0.1], atol=1e-12)
    assert not z1 and not z2


@given(arrays(np.float64, 7, elements=st.floats(-1e3, 1e3)).filter(lambda g: np.abs(g).sum() >= 1e-9))
def test_momentum_from_rest_has_unit_l1(g):
    out, zero = momentum_update(np.zeros(7), g, 1.0)
    assert not zero
    assert abs(np.abs(out).sum() - 1) <= 1e-9


def test_fgsm_on_linear_loss():
    m, x = LinearModel([0.3, -0.2]), np.array([0.5, 0.5])
    np.testing.assert_allclose(fgsm(m, x, AttackConfig(0.1, 1)).adversarial, [0.6, 0.4], atol=1e-15)
    np.testing.assert_allclose(fgsm(m, x, AttackConfig(0.1, 1, targeted=True)).adversarial, [0.4, 0.6],
                               atol=1e-15)
    np.testing.assert_array_equal(fgsm(m, x, AttackConfig(0.0, 1)).adversarial, x)
    with pytest.raises(ValueError):
        fgsm(m, x, AttackConfig(0.1, 2))


def test_ifgsm_matches_reference(setup):
    model, x, loss = setup
    out = run_attack(model, x, preset("ifgsm", 0.05, 8, loss=loss))
    np.testing.assert_array_equal(out.adversarial, ref_ifgsm(model, x, loss, 0.05, 0.05 / 8, 8))


def test_mifgsm_matches_reference(setup):
    model, x, loss = setup
    out = run_attack(model, x, preset("mifgsm", 0.05, 8, loss=loss))
    np.testing.assert_array_equal(out.adversarial, ref_mifgsm(model, x, loss, 0.05, 0.05 / 8, 8, 1.0))


def test_di2fgsm_matches_reference(setup):
    model, x, loss = setup
    out = run_attack(model, x, preset("di2fgsm", 0.05, 8, loss=loss, seed=11))
    np.testing.assert_array_equal(out.adversarial, ref_di2fgsm(model, x, loss, 0.05, 0.05 / 8, 8, 0.5, 11))
    assert 0 < sum(t["transformed"] for t in out.trace) < 8


def test_degradation_lattice(setup):
    model, x, loss = setup

    def run(name, **kw):
        return run_attack(model, x, preset(name, 0.05, 8, loss=loss, seed=3, **kw)).adversarial

    np.testing.assert_array_equal(run("mdi2fgsm", p=0.0), run("mifgsm"))
    np.testing.assert_array_equal(run("di2fgsm", p=0.0), run("ifgsm"))
    np.testing.assert_array_equal(run("mdi2fgsm", mu=0.0), run("di2fgsm"))
    np.testing.assert_array_equal(run("mifgsm", mu=0.0), run("ifgsm"))
    one = run_attack(model, x, AttackConfig(0.05, 1, alpha=0.05, loss=loss)).adversarial
    np.testing.assert_array_equal(one, fgsm(model, x, preset("fgsm", 0.05, loss=loss)).adversarial)


def test_targeted_untargeted_duality(setup):
    model, x, loss = setup
    cfg = preset("mdi2fgsm", 0.05, 6, loss=loss, seed=2)
    a = run_attack(model, x, cfg)
    b = run_attack(Negated(model), x, AttackConfig(**{**cfg.__dict__, "targeted": True}))
    np.testing.assert_array_equal(a.adversarial, b.adversarial)


def test_zero_gradient_is_a_no_op():
    x = np.full((8, 8, 3), 0.4)
    out = run_attack(Flat(), x, preset("mdi2fgsm", 0.1, 5, seed=1))
    np.testing.assert_array_equal(out.adversarial, x)
    assert all(t["zero_grad"] for t in out.trace)


def test_zero_epsilon_returns_input(setup):
    model, x, loss = setup
    out = run_attack(model, x, preset("mdi2fgsm", 0.0, 5, loss=loss))
    np.testing.assert_array_equal(out.adversarial, x)


def test_streams_are_averaged_and_seeded(setup):
    model, x, loss = setup
    cfg = preset("mdi2fgsm", 0.05, 5, loss=loss, streams=4, seed=8)
    a, b = run_attack(model, x, cfg), run_attack(model, x, cfg)
    np.testing.assert_array_equal(a.adversarial, b.adversarial)
    assert max(t["transformed"] for t in a.trace) <= 4


def test_early_stop_and_iterates(setup):
    model, x, loss = setup
    out = run_attack(model, x, preset("ifgsm", 0.05, 10, loss=loss), keep_iterates=True,
                     stop=lambda n, adv: n == 3)
    assert out.iterations_run == 3
    assert len(out.iterates) == 3 and len(out.trace) == 3


def test_config_validation():
    for bad in (dict(epsilon=-1), dict(epsilon=0.1, iterations=0), dict(epsilon=0.1, mu=-1),
                dict(epsilon=0.1, p=1.5), dict(epsilon=0.1, alpha=0.0), dict(epsilon=0.1, streams=0)):
        with pytest.raises(ValueError):
            AttackConfig(**bad)
    with pytest.raises(ValueError):
        preset("pgd", 0.1)
    assert preset("fgsm", 0.1, 30).iterations == 1
    assert AttackConfig(0.1, 4).step_size == pytest.approx(0.025)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (8, 8, 3), elements=st.floats(-1, 1)),
       arrays(np.float64, (8, 8, 3), elements=st.floats(0, 1)),
       st.floats(0, 0.3), st.integers(1, 6), st.sampled_from([0.0, 0.5, 1.0]),
       st.sampled_from([0.0, 0.5, 1.0]), st.booleans(), st.integers(0, 1000))
def test_budget_and_range_invariant(w, x, eps, n, mu, p, targeted, seed):
    cfg = AttackConfig(eps, n, mu=mu, p=p, targeted=targeted, seed=seed)
    out = run_attack(LinearModel(w), x, cfg)
    assert np.max(np.abs(out.adversarial - x)) <= eps + 1e-9
    assert out.adversarial.min() >= 0 and out.adversarial.max() <= 1
    assert out.iterations_run <= n


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6, 6, 3), elements=st.floats(-1, 1)),
       arrays(np.float64, (6, 6, 3), elements=st.floats(0, 1)),
       st.floats(0.001, 0.3), st.integers(1, 8), st.sampled_from([0.0, 1.0]))
def test_linear_loss_never_decreases(w, x, eps, n, mu):
    m = LinearModel(w)
    out = run_attack(m, x, AttackConfig(eps, n, mu=mu))
    losses = [t["loss"] for t in out.trace] + [m.value_and_grad(out.adversarial)[0]]
    assert all(b >= a - 1e-12 for a, b in zip(losses, losses[1:]))
