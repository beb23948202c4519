import math

import numpy as np
import pytest

from pulsebandit import (
    EndOfLog,
    EnvError,
    InputError,
    LowerBoundEnv,
    ParameterError,
    ReplayLog,
    ReplayStream,
    SyntheticEnv,
    bump_function,
    generate_history,
    load_replay_log,
    save_replay_log,
    substream,
)


def arma_variance_oracle(ar1, ar2, ma1, ma2, sigma, terms=4000):
    """Var(S) via the moving-average expansion of the recursion."""
    psi = np.zeros(terms)
    psi[0] = 1.0
    psi[1] = ar1 * psi[0] + ma1
    psi[2] = ar1 * psi[1] + ar2 * psi[0] + ma2
    for j in range(3, terms):
        psi[j] = ar1 * psi[j - 1] + ar2 * psi[j - 2]
    return sigma * sigma * float((psi * psi).sum())


def test_ar_roots_have_modulus_two():
    env = SyntheticEnv()
    np.testing.assert_allclose(env.ar_root_moduli(), [2.0, 2.0], atol=1e-12)


def test_stationary_variance_matches_ma_expansion():
    env = SyntheticEnv()
    rng = substream(71, "env")
    env.reset(rng)
    draws = np.array([env.step(rng).observed[0] for _ in range(60_000)])
    target = arma_variance_oracle(0.75, -0.25, 0.65, 0.35, 0.1)
    assert draws.var() == pytest.approx(target, rel=0.06)
    assert abs(draws.mean()) < 4 * math.sqrt(target / draws.size) * 10


def test_noiseless_fixed_point_rewards():
    env = SyntheticEnv(innovation_sd=0.0, xi_sd=0.0, eta_sd=0.0)
    env.reset(substream(0, "none"))
    step = env.step(substream(0, "none"))
    # zero state: x = (1, 0), W = 0.5, both arm means 0.65 - 0.23 * 0.5
    np.testing.assert_allclose(step.arm_means, [0.535, 0.535], atol=1e-15)
    np.testing.assert_allclose(step.potential_rewards, [0.535, 0.535], atol=1e-15)


def test_noiseless_nonlinear_matches_linear_at_zero():
    lin = SyntheticEnv(innovation_sd=0.0, xi_sd=0.0, eta_sd=0.0)
    non = SyntheticEnv(innovation_sd=0.0, xi_sd=0.0, eta_sd=0.0, nonlinearity=4.0)
    r = substream(0, "none")
    lin.reset(r)
    non.reset(r)
    np.testing.assert_allclose(
        lin.step(r).arm_means, non.step(r).arm_means, atol=1e-15
    )


def test_burn_in_runs_on_reset():
    env = SyntheticEnv()
    env.reset(substream(5, "env"))
    assert env._t == 0
    step = env.step(substream(5, "other"))
    assert step.t == 1
    # after burn-in the state is generically nonzero
    env2 = SyntheticEnv()
    rng2 = substream(5, "env")
    env2.reset(rng2)
    assert env2._s1 != 0.0


def test_conditional_mean_formula():
    env = SyntheticEnv(nonlinearity=2.0)
    mu = env.conditional_mean_w(0.3, 0.1, -0.1)
    x2 = (0.3 + 0.1 - 0.1) / 3.0
    assert mu == pytest.approx(0.5 - 0.14 * x2 + math.sin(2.0 * x2), abs=1e-15)


def test_same_stream_reproduces_steps():
    env1, env2 = SyntheticEnv(), SyntheticEnv()
    r1, r2 = substream(9, "env"), substream(9, "env")
    env1.reset(r1)
    env2.reset(r2)
    for _ in range(20):
        s1, s2 = env1.step(r1), env2.step(r2)
        np.testing.assert_array_equal(s1.full_context, s2.full_context)
        np.testing.assert_array_equal(s1.potential_rewards, s2.potential_rewards)


def test_optimal_arm_is_argmax_of_means():
    env = SyntheticEnv()
    rng = substream(10, "env")
    env.reset(rng)
    for _ in range(200):
        step = env.step(rng)
        assert step.optimal_arm == int(np.argmax(step.arm_means))
        assert step.optimal_mean == step.arm_means[step.optimal_arm]


def test_oracle_accessors_track_last_step():
    env = SyntheticEnv()
    rng = substream(11, "env")
    env.reset(rng)
    with pytest.raises(EnvError):
        env.oracle_mean_w()
    step = env.step(rng)
    assert env.oracle_mean_w()[0] == step.cond_mean_w[0]
    assert env.oracle_sd_w() == step.cond_sd_w == 0.1


def test_bump_function_shape():
    f = bump_function(beta=1.0, amplitude=0.5)
    assert f(np.zeros(3)) == pytest.approx(0.5)
    assert f(np.array([1.0, 0.0, 0.0])) == 0.0
    assert f(np.array([1.5, 0.0, 0.0])) == 0.0
    assert f(np.array([0.5, -0.5, 0.25])) == pytest.approx(0.25)
    g = bump_function(beta=0.5, amplitude=1.0)
    assert g(np.array([0.75])) == pytest.approx(0.5)


def test_lower_bound_theta_structure():
    env = LowerBoundEnv(d_lin=4, d_non=2, horizon_for_scaling=400)
    mag = math.sqrt(4 / 400.0)
    np.testing.assert_allclose(env.theta_q, np.full(4, mag))
    np.testing.assert_allclose(
        env.theta_star, np.concatenate([np.full(4, mag), np.zeros(2), [0.5]])
    )


def test_lower_bound_branch_means():
    env = LowerBoundEnv(d_lin=3, d_non=2)
    rng = substream(12, "lb")
    env.reset(rng)
    for _ in range(300):
        step = env.step(rng)
        q = step.full_context[:3]
        o = step.full_context[3:5]
        if q.any():  # V = 1 branch: Q is a basis vector, O pinned at o0
            np.testing.assert_array_equal(o, env.o0)
            lin = float(env.theta_q @ q)
            np.testing.assert_allclose(step.arm_means, [lin, -lin], atol=1e-12)
        else:  # V = 0 branch: O uniform in the cube, arm means (f(O)/2, 0)
            assert np.abs(o).max() <= 1.0
            np.testing.assert_allclose(
                step.arm_means, [0.5 * env.f(o), 0.0], atol=1e-12
            )


def test_lower_bound_w_equals_f_of_o():
    env = LowerBoundEnv(d_lin=2, d_non=2)
    rng = substream(13, "lb")
    env.reset(rng)
    for _ in range(50):
        step = env.step(rng)
        o = step.full_context[2:4]
        assert step.full_context[-1] == pytest.approx(float(env.f(o)), abs=1e-15)
        assert step.cond_sd_w == 0.0


def test_lower_bound_validation():
    with pytest.raises(ParameterError):
        LowerBoundEnv(d_lin=0, d_non=1)
    with pytest.raises(ParameterError):
        LowerBoundEnv(d_lin=1, d_non=1, o0=np.array([0.5]))  # inside the cube
    with pytest.raises(ParameterError):
        LowerBoundEnv(d_lin=1, d_non=1, f=lambda o: 1.0)  # f(o0) != 0


def test_replay_log_round_trip_bitexact(tmp_path):
    rng = substream(14, "log")
    log = ReplayLog(
        observed=rng.standard_normal((30, 2)),
        rewards=(rng.random(30) < 0.4).astype(float),
        full=rng.standard_normal((30, 3)),
        pool_ids=np.repeat(np.arange(3), 10),
        row_ids=np.arange(30),
    )
    path = tmp_path / "log.csv"
    save_replay_log(log, str(path))
    back = load_replay_log(str(path))
    np.testing.assert_array_equal(back.observed, log.observed)
    np.testing.assert_array_equal(back.full, log.full)
    np.testing.assert_array_equal(back.rewards, log.rewards)
    np.testing.assert_array_equal(back.pool_ids, log.pool_ids)


def test_replay_log_rejects_nonbinary_rewards():
    with pytest.raises(InputError):
        ReplayLog(observed=np.zeros((3, 1)), rewards=np.array([0.0, 0.5, 1.0]))


def test_replay_stream_consumes_only_chosen():
    log = ReplayLog(
        observed=np.arange(10, dtype=float)[:, None],
        rewards=np.zeros(10),
    )
    stream = ReplayStream(log, substream(15, "rep"))
    candidates, reveal = stream.step(4)
    assert len(candidates) == 4
    assert stream.n_remaining == 10
    reveal(2)
    assert stream.n_remaining == 9
    assert candidates[2] not in stream._remaining
    # the other three candidates stay available
    for j in (0, 1, 3):
        assert candidates[j] in stream._remaining


def test_replay_stream_reveal_once_and_bounds():
    log = ReplayLog(observed=np.zeros((6, 1)), rewards=np.zeros(6))
    stream = ReplayStream(log, substream(16, "rep"))
    _, reveal = stream.step(3)
    with pytest.raises(InputError):
        reveal(7)
    reveal(0)
    with pytest.raises(InputError):
        reveal(1)


def test_replay_stream_end_of_log():
    log = ReplayLog(observed=np.zeros((5, 1)), rewards=np.zeros(5))
    stream = ReplayStream(log, substream(17, "rep"))
    for _ in range(3):  # 5 rows, k=3: exactly 3 steps then exhaustion
        _, reveal = stream.step(3)
        reveal(0)
    with pytest.raises(EndOfLog):
        stream.step(3)


def test_generate_history_shapes_and_determinism():
    data1 = generate_history(SyntheticEnv, 4, 12, base_seed=77)
    data2 = generate_history(SyntheticEnv, 4, 12, base_seed=77)
    assert data1.s.shape == (4, 12, 1) and data1.w.shape == (4, 12, 1)
    np.testing.assert_array_equal(data1.s, data2.s)
    np.testing.assert_array_equal(data1.w, data2.w)
    # trajectories differ from each other
    assert not np.array_equal(data1.s[0], data1.s[1])


def test_lower_bound_step_draw_reproducibility():
    e1, e2 = LowerBoundEnv(2, 2), LowerBoundEnv(2, 2)
    r1, r2 = substream(18, "lb"), substream(18, "lb")
    e1.reset(r1)
    e2.reset(r2)
    for _ in range(25):
        s1, s2 = e1.step(r1), e2.step(r2)
        np.testing.assert_array_equal(s1.full_context, s2.full_context)
        np.testing.assert_array_equal(s1.potential_rewards, s2.potential_rewards)
