"""Parameter containers, forward heads, squashed sampling, KL, Polyak."""

import math

import numpy as np
import pytest

import relightlab.nets as nets
import relightlab.numerics as nm
from relightlab.litworld import SOURCE_LIGHT, LitWorld


def _obs(seed=0):
    env = LitWorld()
    _, obs = env.reset(seed, SOURCE_LIGHT)
    return obs


def test_encode_zero_final_layer_gives_zero_feature():
    agent = nets.init_agent(0)
    agent.params["enc.w2"][:] = 0.0
    agent.params["enc.b2"][:] = 0.0
    obs = _obs()
    flat = nets.flatten_obs(obs.image[None], obs.proprio[None])
    np.testing.assert_array_equal(nets.encode(agent.params, flat), np.zeros((1, 64)))


def test_encode_deterministic_and_matches_straightline_oracle():
    agent = nets.init_agent(3)
    obs = _obs(5)
    flat = nets.flatten_obs(obs.image[None], obs.proprio[None])
    f1 = nets.encode(agent.params, flat)
    f2 = nets.encode(agent.params, flat)
    np.testing.assert_array_equal(f1, f2)
    p = agent.params
    oracle = np.maximum(flat @ p["enc.w1"] + p["enc.b1"], 0.0) @ p["enc.w2"] + p["enc.b2"]
    np.testing.assert_array_equal(f1, oracle)


def test_encode_rejects_wrong_image_extents():
    agent = nets.init_agent(0)
    with pytest.raises(ValueError, match="16x16x3"):
        nets.flatten_obs(np.zeros((8, 8, 3), dtype=np.uint8), np.zeros(2))
    _ = agent


def test_sample_squashed_zero_noise_zero_mean_closed_form():
    mu = np.zeros((1, 2), dtype=np.float32)
    log_sigma = np.zeros((1, 2), dtype=np.float32)  # sigma = 1
    noise = np.zeros((1, 2), dtype=np.float32)
    a, log_pi = nets.sample_squashed(mu, log_sigma, noise)
    np.testing.assert_array_equal(a, np.zeros((1, 2)))
    # corrections vanish at a=0 except the 1e-6 squash floor inside the log
    expected = 2 * (-0.5 * math.log(2 * math.pi)) - 2 * math.log1p(1e-6)
    assert log_pi[0] == pytest.approx(expected, abs=1e-6)
    assert log_pi[0] == pytest.approx(-1.8379, abs=1e-4)


def test_sample_squashed_bounded_actions():
    rng = np.random.default_rng(0)
    mu = rng.normal(scale=3.0, size=(100, 2)).astype(np.float32)
    log_sigma = rng.uniform(-5, 2, size=(100, 2)).astype(np.float32)
    noise = rng.normal(size=(100, 2)).astype(np.float32)
    a, log_pi = nets.sample_squashed(mu, log_sigma, noise)
    # fp32 tanh saturates to exactly 1.0 for |pre-tanh| >~ 9; the squash floor
    # keeps the density finite there. Strict openness holds below saturation.
    assert np.all(np.abs(a) <= 1.0)
    assert np.all(np.isfinite(log_pi))
    pre = mu + np.exp(log_sigma) * noise
    moderate = np.abs(pre) < 8.0
    assert np.all(np.abs(a[moderate]) < 1.0)


def _mc_density_integral(mu, sigma, n, seed):
    """Monte-Carlo integral of exp(log pi) over the action box via a uniform
    proposal; the density formula is evaluated at arbitrary actions by
    inverting the squash to recover the driving noise."""
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1.0, 1.0, size=(n, 2))
    u = np.arctanh(a)
    noise = (u - mu) / sigma
    log_sigma = np.log(sigma)
    _, log_pi = nets.sample_squashed(mu.astype(np.float64),
                                     log_sigma.astype(np.float64), noise)
    return float(np.exp(log_pi).mean() * 4.0)  # box area (-1,1)^2


@pytest.mark.parametrize("case", range(5))
def test_log_density_normalizes_monte_carlo(case):
    rng = np.random.default_rng(100 + case)
    mu = rng.uniform(-0.5, 0.5, size=2)
    sigma = rng.uniform(0.6, 1.2, size=2)
    integral = _mc_density_integral(mu, sigma, n=100_000, seed=case)
    assert integral == pytest.approx(1.0, rel=0.02)


def test_q_values_zero_final_layers_and_twin_independence():
    agent = nets.init_agent(1)
    feat = np.random.default_rng(0).normal(size=(4, 64)).astype(np.float32)
    act = np.random.default_rng(1).uniform(-1, 1, size=(4, 2)).astype(np.float32)
    for q in ("q1", "q2"):
        agent.params[f"{q}.w2"][:] = 0.0
        agent.params[f"{q}.b2"][:] = 0.0
    q1, q2 = nets.q_values(agent.params, feat, act)
    np.testing.assert_array_equal(q1, np.zeros(4))
    np.testing.assert_array_equal(q2, np.zeros(4))

    agent2 = nets.init_agent(2)
    q1, q2 = nets.q_values(agent2.params, feat, act)
    assert not np.allclose(q1, q2)  # independent copies


def test_q_values_match_straightline_oracle():
    agent = nets.init_agent(5)
    p = agent.params
    feat = np.random.default_rng(2).normal(size=(3, 64)).astype(np.float32)
    act = np.random.default_rng(3).uniform(-1, 1, size=(3, 2)).astype(np.float32)
    q1, q2 = nets.q_values(p, feat, act)
    x = np.concatenate([feat, act], axis=-1)
    for got, q in ((q1, "q1"), (q2, "q2")):
        oracle = (np.maximum(x @ p[f"{q}.w1"] + p[f"{q}.b1"], 0.0)
                  @ p[f"{q}.w2"] + p[f"{q}.b2"])[:, 0]
        np.testing.assert_array_equal(got, oracle)


def test_polyak_endpoints_and_midpoint():
    tgt = {"tq1.w1": np.array([2.0], dtype=np.float32)}
    onl = {"q1.w1": np.array([4.0], dtype=np.float32)}
    nets.polyak_update(dict(tgt), onl, 0.0)
    assert tgt["tq1.w1"][0] == 2.0  # tau=0: unchanged (dict copy shares arrays)

    t = {"tq1.w1": np.array([2.0], dtype=np.float32)}
    nets.polyak_update(t, onl, 1.0)
    assert t["tq1.w1"][0] == 4.0

    t = {"tq1.w1": np.array([2.0], dtype=np.float32)}
    nets.polyak_update(t, onl, 0.5)
    assert t["tq1.w1"][0] == pytest.approx(3.0)


def test_polyak_rejects_tau_outside_unit_interval():
    with pytest.raises(ValueError):
        nets.polyak_update({}, {}, 1.5)
    with pytest.raises(ValueError):
        nets.polyak_update({}, {}, -0.1)


def test_kl_identical_distributions_is_exactly_zero():
    mu = np.array([0.3, -0.7])
    sigma = np.array([0.5, 1.4])
    assert nets.kl_diag_gauss(mu, sigma, mu.copy(), sigma.copy()) == 0.0


def test_kl_unit_shift_closed_form():
    # N(0,1) vs N(1,1): 0.5 per dimension
    mu0 = np.zeros(2)
    sigma = np.ones(2)
    kl = nets.kl_diag_gauss(mu0, sigma, np.ones(2), sigma)
    assert kl == pytest.approx(1.0, rel=1e-12)  # 0.5 * 2 dims


def test_kl_matches_monte_carlo_estimate():
    rng = np.random.default_rng(12)
    mu0 = rng.uniform(-1, 1, size=2)
    sigma0 = rng.uniform(0.5, 1.5, size=2)
    mu = rng.uniform(-1, 1, size=2)
    sigma = rng.uniform(0.5, 1.5, size=2)
    closed = float(nets.kl_diag_gauss(mu0, sigma0, mu, sigma))

    n = 1_000_000
    x = rng.normal(size=(n, 2)) * sigma0 + mu0

    def logpdf(x, m, s):
        return (-0.5 * math.log(2 * math.pi) - np.log(s)
                - 0.5 * ((x - m) / s) ** 2).sum(axis=-1)

    mc = float((logpdf(x, mu0, sigma0) - logpdf(x, mu, sigma)).mean())
    assert closed == pytest.approx(mc, rel=0.01)


def test_kl_nonnegative_and_zero_iff_equal():
    rng = np.random.default_rng(9)
    for _ in range(100):
        mu0 = rng.uniform(-2, 2, size=2)
        sigma0 = rng.uniform(0.1, 2.0, size=2)
        mu = rng.uniform(-2, 2, size=2)
        sigma = rng.uniform(0.1, 2.0, size=2)
        kl = float(nets.kl_diag_gauss(mu0, sigma0, mu, sigma))
        assert kl >= 0.0
        if abs(kl) <= 1e-12:
            np.testing.assert_allclose(mu0, mu, atol=1e-6)
            np.testing.assert_allclose(sigma0, sigma, atol=1e-6)


def test_kl_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        nets.kl_diag_gauss(np.zeros(2), np.zeros(2), np.zeros(2), np.ones(2))


def test_frozen_anchor_checksum_stable_and_detects_mutation():
    agent = nets.init_agent(0)
    frozen = nets.FrozenAnchor(agent)
    before = frozen.checksum
    agent.params["actor.w1"][:] += 1.0  # mutating the live agent is fine
    frozen.verify()
    assert frozen.checksum == before

    # bypass the write lock to prove verify catches corruption
    arr = frozen.params["actor.w1"]
    arr.setflags(write=True)
    arr[0, 0] += 1.0
    with pytest.raises(RuntimeError):
        frozen.verify()


def test_log_sigma_clamped_to_safe_range():
    agent = nets.init_agent(0)
    agent.params["actor.bsig"][:] = 100.0
    feat = np.random.default_rng(0).normal(size=(5, 64)).astype(np.float32)
    _, log_sigma = nets.actor_heads(agent.params, feat)
    assert np.all(log_sigma <= nets.LOG_SIGMA_MAX)
    agent.params["actor.bsig"][:] = -100.0
    _, log_sigma = nets.actor_heads(agent.params, feat)
    assert np.all(log_sigma >= nets.LOG_SIGMA_MIN)


def test_tape_heads_match_numpy_heads_bitwise():
    agent = nets.init_agent(8)
    obs = _obs(2)
    flat = nets.flatten_obs(obs.image[None].repeat(4, axis=0),
                            np.tile(obs.proprio, (4, 1)))
    feat_np = nets.encode(agent.params, flat)
    mu_np, ls_np = nets.actor_heads(agent.params, feat_np)

    tape = nm.Tape()
    p = nets.lift(tape, agent.params, nets.ENCODER_KEYS + nets.ACTOR_KEYS, True)
    feat_t = nets.encode_t(p, tape.constant(flat, dtype=np.float32))
    mu_t, ls_t = nets.actor_heads_t(p, feat_t)
    np.testing.assert_array_equal(feat_t.value, feat_np)
    np.testing.assert_array_equal(mu_t.value, mu_np)
    np.testing.assert_array_equal(ls_t.value, ls_np)


def test_tape_sample_squashed_matches_numpy():
    rng = np.random.default_rng(4)
    mu = rng.normal(size=(6, 2)).astype(np.float32)
    ls = rng.uniform(-2, 0.5, size=(6, 2)).astype(np.float32)
    noise = rng.normal(size=(6, 2)).astype(np.float32)
    a_np, lp_np = nets.sample_squashed(mu, ls, noise)

    tape = nm.Tape()
    mu_t = tape.constant(mu, dtype=np.float32)
    ls_t = tape.constant(ls, dtype=np.float32)
    a_t, lp_t = nets.sample_squashed_t(tape, mu_t, ls_t, noise)
    np.testing.assert_array_equal(a_t.value, a_np)
    np.testing.assert_allclose(lp_t.value, lp_np, rtol=1e-6)
