import numpy as np
import pytest
from oracles import central_difference, max_relative_error, np_mlp

from caster import agents as ag
from caster import numerics as nx
from caster.agents import Batch, CriticParams

S, A, Z = 2, 2, 3


def _batch(rng, n=5, lead=()):
    shape = lead + (n,)
    return Batch(rng.normal(size=shape + (S,)), rng.uniform(-1, 1, size=shape + (A,)),
                 rng.normal(size=shape), rng.normal(size=shape + (S,)), np.zeros(shape, dtype=bool))


def _constant_mlp(sizes, value):
    net = nx.init_mlp(sizes, np.random.default_rng(0))
    for w in net.weights:
        w.data[:] = 0.0
    for b in net.biases:
        b.data[:] = 0.0
    net.biases[-1].data[:] = value
    return net


def _constant_critic(c1, c2, t1=None, t2=None, hidden=(4,)):
    sizes = [S + A + Z, *hidden, 1]
    t1 = c1 if t1 is None else t1
    t2 = c2 if t2 is None else t2
    return CriticParams(_constant_mlp(sizes, c1), _constant_mlp(sizes, c2),
                        _constant_mlp(sizes, t1).frozen(), _constant_mlp(sizes, t2).frozen())


def _np_params(net):
    return [w.data for w in net.weights], [b.data for b in net.biases], net.activations


def test_deterministic_action_is_tanh_mean():
    rng = np.random.default_rng(0)
    policy = ag.init_policy(S, Z, A, rng, (8,))
    policy.net.weights[-1].data = rng.normal(size=policy.net.weights[-1].shape)
    s, z = rng.normal(size=(4, S)), rng.normal(size=Z)
    mean, _ = ag.policy_distribution(policy, s, z)
    action, _ = ag.policy_sample(policy, s, z, deterministic=True)
    np.testing.assert_allclose(action.data, np.tanh(mean.data), rtol=1e-15)


def test_actions_strictly_inside_box():
    rng = np.random.default_rng(1)
    policy = ag.init_policy(S, Z, A, rng, (8,))
    policy.net.weights[-1].data = rng.normal(0, 20, size=policy.net.weights[-1].shape)
    action, logp = ag.policy_sample(policy, rng.normal(size=(50_000, S)), rng.normal(size=Z), rng)
    assert action.shape == (50_000, A)
    assert np.all(np.abs(action.data) < 1.0)
    assert np.all(np.isfinite(logp.data))


def test_log_prob_integrates_to_one():
    for mean, log_std in [(0.3, np.log(0.5)), (-1.0, 0.0), (0.0, np.log(0.2))]:
        a = np.linspace(-1 + 1e-12, 1 - 1e-12, 400_001)
        u = np.arctanh(a)
        noise = (u - mean) / np.exp(log_std)
        _, logp = ag.squash(nx.Tensor(np.full((a.size, 1), mean)), nx.Tensor(np.full((a.size, 1), log_std)),
                            noise[:, None])
        assert abs(np.trapezoid(np.exp(logp.data), a) - 1.0) < 1e-3


def test_log_prob_matches_naive_formula():
    rng = np.random.default_rng(2)
    mean, log_std, noise = rng.normal(size=(3, 10, A))
    u = mean + np.exp(log_std) * noise
    naive = np.sum(-0.5 * noise ** 2 - log_std - 0.5 * np.log(2 * np.pi) - np.log(1 - np.tanh(u) ** 2), axis=-1)
    _, logp = ag.squash(nx.Tensor(mean), nx.Tensor(log_std), noise)
    np.testing.assert_allclose(logp.data, naive, rtol=1e-10)


def test_log_prob_finite_under_saturation():
    _, logp = ag.squash(nx.Tensor(np.array([[40.0]])), nx.Tensor(np.array([[-20.0]])), np.zeros((1, 1)))
    assert np.isfinite(logp.item())


def test_zero_critic_outputs_zero():
    critic = _constant_critic(0.0, 0.0)
    q1, q2 = ag.q_value(critic, np.ones((3, S)), np.ones((3, A)), np.ones(Z))
    np.testing.assert_array_equal(q1.data, 0.0)
    np.testing.assert_array_equal(q2.data, 0.0)


def test_q_value_pure_and_twins_differ():
    rng = np.random.default_rng(3)
    critic = ag.init_critic(S, Z, A, rng)
    s, a, z = rng.normal(size=(6, S)), rng.uniform(-1, 1, (6, A)), rng.normal(size=Z)
    first = ag.q_value(critic, s, a, z)
    second = ag.q_value(critic, s, a, z)
    np.testing.assert_array_equal(first[0].data, second[0].data)
    assert np.max(np.abs(first[0].data - first[1].data)) > 1e-6


def test_q_value_shape_mismatch():
    critic = ag.init_critic(S, Z, A, np.random.default_rng(0))
    with pytest.raises(nx.ShapeError):
        ag.q_value(critic, np.ones((3, S)), np.ones((3, A + 1)), np.ones(Z))


def test_critic_loss_exact_fit_is_zero():
    rng = np.random.default_rng(4)
    batch = _batch(rng)
    batch = batch.with_rewards(np.full(5, 0.7))
    critic = _constant_critic(0.7, 0.7)
    policy = ag.init_policy(S, Z, A, rng)
    temp = ag.init_temperature(A)
    assert ag.sac_critic_loss(critic, policy, temp, batch, np.zeros(Z), 0.0, rng).item() == 0.0


def test_critic_loss_constant_residual_is_one():
    rng = np.random.default_rng(5)
    batch = _batch(rng).with_rewards(np.ones(5))
    loss = ag.sac_critic_loss(_constant_critic(0.0, 0.0), ag.init_policy(S, Z, A, rng), ag.init_temperature(A),
                              batch, np.zeros(Z), 0.0, rng)
    assert loss.item() == pytest.approx(1.0, abs=1e-15)


def test_critic_loss_scripted_oracle():
    """Three transitions through tiny networks, evaluated step by step in plain numpy."""
    rng = np.random.default_rng(6)
    policy = ag.init_policy(S, Z, A, rng, (3,))
    policy.net.weights[-1].data = rng.normal(size=policy.net.weights[-1].shape)
    critic = ag.init_critic(S, Z, A, rng, (3,))
    for net in (critic.q1_target, critic.q2_target):
        for t in net.tensors():
            t.data += rng.normal(0, 0.3, t.shape)
    temp = ag.init_temperature(A, init_alpha=0.37)
    batch = _batch(rng, n=3)
    z = rng.normal(size=Z)
    noise = rng.normal(size=(3, A))
    gamma = 0.9

    zs = np.tile(z, (3, 1))
    out = np_mlp(*_np_params(policy.net), np.hstack([batch.next_obs, zs]))
    mu, log_std = out[:, :A], np.clip(out[:, A:], -20, 2)
    u = mu + np.exp(log_std) * noise
    a_next = np.tanh(u)
    logp = np.sum(-0.5 * noise ** 2 - log_std - 0.5 * np.log(2 * np.pi) - np.log(1 - a_next ** 2), axis=1)
    x_next = np.hstack([batch.next_obs, a_next, zs])
    t1 = np_mlp(*_np_params(critic.q1_target), x_next)[:, 0]
    t2 = np_mlp(*_np_params(critic.q2_target), x_next)[:, 0]
    y = batch.rew + gamma * (np.minimum(t1, t2) - 0.37 * logp)
    x = np.hstack([batch.obs, batch.act, zs])
    q1 = np_mlp(*_np_params(critic.q1), x)[:, 0]
    q2 = np_mlp(*_np_params(critic.q2), x)[:, 0]
    expected = 0.5 * (np.mean((q1 - y) ** 2) + np.mean((q2 - y) ** 2))

    loss = ag.sac_critic_loss(critic, policy, temp, batch, z, gamma, noise=noise)
    assert abs(loss.item() - expected) <= 1e-10


@pytest.mark.parametrize("t1,t2", [(1.0, 3.0), (3.0, 1.0), (-2.0, -2.5)])
def test_td_target_takes_min_of_target_twins(t1, t2):
    rng = np.random.default_rng(7)
    critic = _constant_critic(5.0, 6.0, t1, t2)
    policy = ag.init_policy(S, Z, A, rng)
    temp = ag.init_temperature(A, init_alpha=0.5)
    batch = _batch(rng)
    noise = rng.normal(size=(5, A))
    _, logp = ag.policy_sample(policy, batch.next_obs, np.zeros(Z), noise=noise)
    y = ag.td_target(critic, policy, temp, batch, np.zeros(Z), 0.9, noise=noise)
    np.testing.assert_allclose(y, batch.rew + 0.9 * (min(t1, t2) - 0.5 * logp.data), rtol=1e-14)


def test_td_target_bootstraps_on_time_limit():
    rng = np.random.default_rng(8)
    critic = _constant_critic(0.0, 0.0, 2.0, 2.0)
    temp = ag.init_temperature(A, init_alpha=1e-30)
    batch = _batch(rng)
    batch.done[:] = True
    y = ag.td_target(critic, ag.init_policy(S, Z, A, rng), temp, batch, np.zeros(Z), 0.5, rng)
    np.testing.assert_allclose(y, batch.rew + 1.0, rtol=1e-12)


def test_actor_loss_flat_critic():
    rng = np.random.default_rng(9)
    critic = _constant_critic(2.5, 4.0)
    policy = ag.init_policy(S, Z, A, rng)
    temp = ag.init_temperature(A, init_alpha=1.0)
    temp.log_alpha.data = np.array(-np.inf)
    batch = _batch(rng)
    loss, grads = nx.value_and_grad(lambda: ag.sac_actor_loss(critic, policy, temp, batch, np.zeros(Z), rng),
                                    policy)
    assert loss == pytest.approx(-2.5)
    assert all(np.all(g == 0) for g in grads)


def test_actor_loss_increases_with_alpha_when_log_prob_positive():
    rng = np.random.default_rng(10)
    critic = ag.init_critic(S, Z, A, rng)
    policy = ag.init_policy(S, Z, A, rng)
    policy.net.biases[-1].data[A:] = -5.0  # narrow policy: log pi > 0
    batch = _batch(rng)
    noise = rng.normal(size=(5, A))
    losses = []
    for alpha in (0.1, 0.5, 2.0):
        temp = ag.init_temperature(A, init_alpha=alpha)
        loss, logp = ag.actor_terms(critic, policy, temp, batch, np.zeros(Z), noise=noise)
        assert np.all(logp.data > 0)
        losses.append(loss.item())
    assert losses[0] < losses[1] < losses[2]


def test_stop_gradient_contract():
    rng = np.random.default_rng(11)
    critic = ag.init_critic(S, Z, A, rng)
    policy = ag.init_policy(S, Z, A, rng)
    temp = ag.init_temperature(A)
    batch = _batch(rng)
    z = nx.Tensor(rng.normal(size=Z), requires_grad=True)
    noise = rng.normal(size=(5, A))
    actor_grads = nx.grad(lambda: ag.sac_actor_loss(critic, policy, temp, batch, z, noise=noise),
                          critic.tensors() + critic.target_tensors() + [z, temp.log_alpha])
    assert all(np.all(g == 0) for g in actor_grads)
    critic_grads = nx.grad(lambda: ag.sac_critic_loss(critic, policy, temp, batch, np.zeros(Z), 0.99, noise=noise),
                           policy.tensors() + critic.target_tensors() + [temp.log_alpha])
    assert all(np.all(g == 0) for g in critic_grads)


def _fd_check(make_loss, params):
    _, grads = nx.value_and_grad(make_loss, params)
    numeric = central_difference(lambda: make_loss().item(), [t.data for t in params])
    return max_relative_error(grads, numeric)


def test_critic_loss_gradient_matches_finite_differences():
    worst = 0.0
    for trial in range(20):
        rng = np.random.default_rng(200 + trial)
        critic = ag.init_critic(S, Z, A, rng, (5,))
        policy = ag.init_policy(S, Z, A, rng, (5,))
        temp = ag.init_temperature(A, init_alpha=0.3)
        batch = _batch(rng, n=4)
        z = nx.Tensor(rng.normal(size=Z), requires_grad=True)
        noise = rng.normal(size=(4, A))
        worst = max(worst, _fd_check(lambda: ag.sac_critic_loss(critic, policy, temp, batch, z, 0.9, noise=noise),
                                     critic.tensors()))
    assert worst <= 1e-4


def test_critic_loss_gradient_in_z_treats_target_as_constant():
    worst = 0.0
    for trial in range(20):
        rng = np.random.default_rng(250 + trial)
        critic = ag.init_critic(S, Z, A, rng, (5,))
        policy = ag.init_policy(S, Z, A, rng, (5,))
        temp = ag.init_temperature(A, init_alpha=0.3)
        batch = _batch(rng, n=4)
        z = nx.Tensor(rng.normal(size=Z), requires_grad=True)
        noise = rng.normal(size=(4, A))
        y = ag.td_target(critic, policy, temp, batch, z, 0.9, noise=noise)

        def frozen_target_loss():
            q1, q2 = ag.q_value(critic, batch.obs, batch.act, z)
            return 0.5 * (nx.mean(nx.square(q1 - y)) + nx.mean(nx.square(q2 - y)))

        _, (g,) = nx.value_and_grad(lambda: ag.sac_critic_loss(critic, policy, temp, batch, z, 0.9, noise=noise),
                                    [z])
        (numeric,) = central_difference(lambda: frozen_target_loss().item(), [z.data])
        worst = max(worst, max_relative_error([g], [numeric]))
    assert worst <= 1e-4


def test_actor_loss_gradient_matches_finite_differences():
    worst = 0.0
    for trial in range(20):
        rng = np.random.default_rng(300 + trial)
        critic = ag.init_critic(S, Z, A, rng, (5,))
        policy = ag.init_policy(S, Z, A, rng, (5,))
        policy.net.weights[-1].data = rng.normal(0, 0.5, size=policy.net.weights[-1].shape)
        temp = ag.init_temperature(A, init_alpha=0.3)
        batch = _batch(rng, n=4)
        noise = rng.normal(size=(4, A))
        worst = max(worst, _fd_check(lambda: ag.sac_actor_loss(critic, policy, temp, batch, np.zeros(Z), noise=noise),
                                     policy.tensors()))
    assert worst <= 1e-4


def test_temperature_equilibrium_is_stationary():
    temp = ag.init_temperature(A, init_alpha=0.4)
    opt = nx.AdamState.for_params(temp, lr=0.1)
    logp = np.full(32, -temp.target_entropy)
    g = nx.grad(lambda: ag.temperature_loss(temp, logp), [temp.log_alpha])[0]
    assert g == 0.0
    ag.temperature_update(temp, opt, logp)
    assert temp.alpha == pytest.approx(0.4, rel=1e-15)


def test_temperature_rises_when_entropy_low():
    temp = ag.init_temperature(A, init_alpha=0.4)
    opt = nx.AdamState.for_params(temp, lr=0.01)
    ag.temperature_update(temp, opt, np.full(32, 10.0))  # entropy -10 << target -2
    assert temp.alpha > 0.4
    temp2 = ag.init_temperature(A, init_alpha=0.4)
    ag.temperature_update(temp2, nx.AdamState.for_params(temp2, lr=0.01), np.full(32, -10.0))
    assert temp2.alpha < 0.4


def test_temperature_converges_to_fixed_point():
    """A 1-D Gaussian policy that is optimal for Q(a) = -k a^2 / 2 has variance alpha / k.

    Its entropy equals the target when alpha = k exp(2 H) / (2 pi e).
    """
    k, target = 1.0, -1.0
    alpha_star = k * np.exp(2 * target) / (2 * np.pi * np.e)
    temp = ag.init_temperature(1, init_alpha=1.0, target_entropy=target)
    opt = nx.AdamState.for_params(temp, lr=0.05)
    rng = np.random.default_rng(12)
    for _ in range(500):
        std = np.sqrt(temp.alpha / k)
        a = rng.normal(0, std, size=4096)
        logp = -0.5 * (a / std) ** 2 - np.log(std) - 0.5 * np.log(2 * np.pi)
        ag.temperature_update(temp, opt, logp)
    assert abs(temp.alpha - alpha_star) / alpha_star < 0.1


def test_fixed_temperature_is_untouched():
    temp = ag.init_temperature(A, init_alpha=0.2, learnable=False)
    ag.temperature_update(temp, nx.AdamState.for_params([nx.Tensor(0.0, True)]), np.full(8, 10.0))
    assert temp.alpha == pytest.approx(0.2)


def test_polyak_full_copy_and_arithmetic():
    rng = np.random.default_rng(13)
    critic = ag.init_critic(S, Z, A, rng)
    ag.polyak_update(critic, critic, 1.0)
    for t, o in zip(critic.target_tensors(), critic.tensors()):
        np.testing.assert_array_equal(t.data, o.data)
    target, online = _constant_mlp([2, 1], 0.0), _constant_mlp([2, 1], 1.0)
    ag.polyak_update(target, online, 0.005)
    assert target.biases[0].data[0] == pytest.approx(0.005, abs=1e-18)


def test_polyak_geometric_convergence():
    target, online = _constant_mlp([2, 1], 0.0), _constant_mlp([2, 1], 1.0)
    gaps = []
    for _ in range(50):
        ag.polyak_update(target, online, 0.1)
        gaps.append(1.0 - target.biases[0].data[0])
    np.testing.assert_allclose(np.array(gaps[1:]) / np.array(gaps[:-1]), 0.9, rtol=1e-10)


def test_polyak_rejects_bad_tau_and_shapes():
    target, online = _constant_mlp([2, 1], 0.0), _constant_mlp([3, 1], 1.0)
    with pytest.raises(ValueError):
        ag.polyak_update(target, target, 0.0)
    with pytest.raises(nx.ShapeError):
        ag.polyak_update(target, online, 0.5)


def test_sac_update_moves_only_agent_parameters():
    rng = np.random.default_rng(14)
    agent = ag.make_agent(S, Z, A, rng, (8,))
    batch = _batch(rng, n=6, lead=(2,))
    before = nx.checksum(agent.tensors())
    stats = ag.sac_update(agent, batch, rng.normal(size=(2, Z)), 0.99, 0.005, rng)
    assert nx.checksum(agent.tensors()) != before
    assert set(stats) == {"critic_loss", "policy_loss", "alpha", "entropy"}
    assert all(np.isfinite(v) for v in stats.values())
