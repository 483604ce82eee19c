import numpy as np
import pytest

from divo.actor import Actor, lambda_coefficient, policy_loss, select_target_action
from divo.approximator import forward, zero_params
from divo.critics import CriticPair, ValueFn
from divo.diffusion import DiffusionPolicy, sample_action
from divo.exceptions import ConfigurationError

from conftest import central_difference, reference_mlp, relative_error


def parts(seed=0):
    rng = np.random.default_rng(seed)
    diffusion = DiffusionPolicy(1, 1, hidden_dim=2, num_layers=2, rng=rng)
    critics = CriticPair(1, 1, hidden_dim=4, rng=rng)
    value_fn = ValueFn(1, hidden_dim=4, rng=rng)
    actor = Actor(1, 1, hidden_dim=4, rng=rng)
    return diffusion, critics, value_fn, actor


def linear_q(critics, w_state=1.0):
    critics.spec = CriticPair(1, 1, hidden_dim=1, num_layers=1).spec
    critics.q1 = np.array([w_state, 0.0, 0.0])
    critics.q2 = critics.q1.copy()


def constant_actor(value):
    actor = Actor(1, 1, hidden_dim=4)
    actor.theta = zero_params(actor.spec)
    actor.theta[-1] = np.arctanh(value)
    return actor


def test_actor_bounded_and_target_copy():
    actor = Actor(3, 2, rng=np.random.default_rng(0))
    assert np.array_equal(actor.theta, actor.theta_target)
    out = actor.act(np.random.default_rng(1).normal(scale=100, size=(50, 3)))
    assert out.shape == (50, 2) and np.all(np.abs(out) <= 1)


@pytest.mark.parametrize("kwargs", [dict(alpha=0.0), dict(beta_reg=-1.0), dict(policy_update_freq=0)])
def test_actor_rejects_bad_hyperparameters(kwargs):
    with pytest.raises(ConfigurationError):
        Actor(1, 1, **kwargs)


def test_gate_takes_diffusion_sample_at_zero_advantage():
    diffusion, critics, value_fn, actor = parts()
    critics.q1, critics.q2 = zero_params(critics.spec), zero_params(critics.spec)
    value_fn.params = zero_params(value_fn.spec)
    states = np.linspace(-1, 1, 9)[:, None]
    targets, keep = select_target_action(diffusion, critics, value_fn, actor, states, np.random.default_rng(3))
    assert keep.all()
    assert np.array_equal(targets, sample_action(diffusion, states, np.random.default_rng(3)))


def test_gate_falls_back_to_actor_when_value_is_huge():
    diffusion, critics, value_fn, actor = parts()
    value_fn.params[-1] = 1e12
    states = np.linspace(-1, 1, 9)[:, None]
    targets, keep = select_target_action(diffusion, critics, value_fn, actor, states, np.random.default_rng(3))
    assert not keep.any()
    assert np.array_equal(targets, actor.act(states))


def test_gate_matches_scratch_advantage():
    diffusion, critics, value_fn, actor = parts(5)
    states = np.random.default_rng(6).normal(size=(32, 1))
    # center V so that roughly half of the sampled actions pass the gate
    probe = sample_action(diffusion, states, np.random.default_rng(7))
    value_fn.params[-1] += np.median(critics.min_q(states, probe) - value_fn(states))
    targets, keep = select_target_action(diffusion, critics, value_fn, actor, states, np.random.default_rng(7))
    sampled = sample_action(diffusion, states, np.random.default_rng(7))
    sa = np.hstack([states, sampled])
    adv = (np.minimum(reference_mlp(critics.q1, [2, 4, 4, 1], sa), reference_mlp(critics.q2, [2, 4, 4, 1], sa))
           - reference_mlp(value_fn.params, [1, 4, 4, 1], states))[:, 0]
    assert np.array_equal(keep, adv >= 0)
    assert 0 < keep.sum() < 32  # both branches exercised with this seed
    pi = reference_mlp(actor.theta, [1, 4, 4, 1], states, tanh=True)
    assert np.allclose(targets, np.where(keep[:, None], sampled, pi), atol=1e-12)


def test_lambda_unit_q_gives_alpha():
    _, critics, _, _ = parts()
    linear_q(critics, 0.0)
    critics.q1[-1] = critics.q2[-1] = -1.0
    actor = Actor(1, 1, alpha=2.5, hidden_dim=4)
    assert lambda_coefficient(critics, actor, np.zeros((6, 1))) == 2.5


def test_lambda_arithmetic_oracle():
    _, critics, _, _ = parts()
    linear_q(critics)
    actor = Actor(1, 1, alpha=2.5, hidden_dim=4)
    assert lambda_coefficient(critics, actor, np.array([[2.0], [-2.0], [4.0]])) == 0.9375


def test_lambda_homogeneity_and_floor():
    _, critics, _, actor = parts(2)
    states = np.random.default_rng(0).normal(size=(10, 1))
    base = lambda_coefficient(critics, actor, states)
    for name in ("q1", "q2"):
        getattr(critics, name)[-critics.spec.layout[-1][0] - 1:] *= 4.0
    assert lambda_coefficient(critics, actor, states) == pytest.approx(base / 4.0, rel=1e-12)
    critics.q1, critics.q2 = zero_params(critics.spec), zero_params(critics.spec)
    assert lambda_coefficient(critics, actor, states) == actor.alpha * 10 / 1e-8


def test_policy_loss_vanishes_with_zero_q_and_no_regularizer():
    _, critics, _, _ = parts()
    critics.q1, critics.q2 = zero_params(critics.spec), zero_params(critics.spec)
    actor = Actor(1, 1, beta_reg=0.0, hidden_dim=4, rng=np.random.default_rng(1))
    loss, grad, _ = policy_loss(actor, critics, np.zeros((4, 1)), np.ones((4, 1)))
    assert loss == 0.0 and not grad.any()


def test_policy_loss_perfect_imitation():
    _, critics, _, actor = parts(3)
    states = np.random.default_rng(2).normal(size=(4, 1))
    loss, _, _ = policy_loss(actor, critics, actor.act(states), states, lam=0.0)
    assert loss == 0.0


def test_policy_loss_regularizer_arithmetic():
    _, critics, _, _ = parts()
    actor = constant_actor(0.5)
    actor.beta_reg = 0.4
    loss, _, _ = policy_loss(actor, critics, np.zeros((1, 1)), np.zeros((1, 1)), lam=0.0)
    assert loss == pytest.approx(0.1, rel=1e-12)


def test_policy_gradient_matches_finite_differences():
    _, critics, _, actor = parts(9)
    assert actor.spec.num_params <= 64
    rng = np.random.default_rng(10)
    states, targets = rng.normal(size=(6, 1)), rng.uniform(-1, 1, (6, 1))
    _, grad, lam = policy_loss(actor, critics, targets, states)

    def f(p):
        actor.theta = p
        return policy_loss(actor, critics, targets, states, lam=lam)[0]

    assert relative_error(grad, central_difference(f, actor.theta.copy())) <= 1e-4


def q_term_gradient(actor, critics, states):
    beta = actor.beta_reg
    actor.beta_reg = 0.0
    _, grad, _ = policy_loss(actor, critics, np.zeros((len(states), 1)), states)
    actor.beta_reg = beta
    return grad


@pytest.mark.parametrize("c", [0.1, 10.0])
def test_lambda_makes_q_gradient_scale_invariant(c):
    _, critics, _, actor = parts(11)
    states = np.random.default_rng(12).normal(size=(16, 1))
    base = q_term_gradient(actor, critics, states)
    fan_in = critics.spec.layout[-1][0]
    for name in ("q1", "q2"):
        getattr(critics, name)[-fan_in - 1:] *= c  # scales the output layer, hence Q
    scaled = q_term_gradient(actor, critics, states)
    assert relative_error(scaled, base) <= 1e-10


def test_policy_loss_uses_q1_only_for_improvement():
    _, critics, _, actor = parts(4)
    states = np.random.default_rng(0).normal(size=(5, 1))
    loss, _, lam = policy_loss(actor, critics, np.zeros((5, 1)), states)
    pi = actor.act(states)
    q1 = forward(critics.spec, critics.q1, np.hstack([states, pi]))[:, 0]
    expected = np.mean(-lam * q1 + actor.beta_reg * pi[:, 0] ** 2)
    assert loss == pytest.approx(expected, rel=1e-12)
