"""Latent prior: encoder features, AR-KL, latent chain, policy, critic."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motionprior.clips import MotionClip, extract_segment
from motionprior.errors import ShapeError, ValidationError
from motionprior.prior import (PROP_FEAT_DIM, SEG_FEAT_DIM, PriorConfig,
                               PriorNetworks, ar_kl_grads, ar_kl_loss,
                               next_latent, precompute_segment_features,
                               prop_features, segment_features,
                               segment_features_from_segment)
from motionprior.robot import STAND_JOINTS
from motionprior.sim import RobotState


@pytest.fixture(scope="module")
def cfg():
    return PriorConfig()


@pytest.fixture(scope="module")
def nets(geom):
    return PriorNetworks(PriorConfig(), n_clips=3, geom=geom, seed=0)


def _state(geom):
    return RobotState(root_x=0.2, root_z=geom.stand_height(), pitch=0.05,
                      vx=0.4, vz=0.0, pitch_rate=0.0,
                      joints=STAND_JOINTS.copy(), joint_vels=np.zeros(4),
                      foot_contact=np.ones(2) > 0,
                      last_action=STAND_JOINTS.copy())


# ---------------------------------------------------------------------------
# AR-KL term


def test_ar_kl_identity_is_zero(cfg):
    z = np.full(cfg.d_z, 0.3)
    mu = cfg.alpha * z
    sigma = np.full(cfg.d_z, np.sqrt(1.0 - cfg.alpha ** 2))
    assert abs(ar_kl_loss(mu, sigma, z, cfg)) <= 1e-12


def test_ar_kl_scalar_oracle():
    # d=1, alpha=0.95, z_prev=0, mu=0.5, sigma^2 = 0.0975, beta=1
    cfg = PriorConfig(alpha=0.95, beta=1.0, d_z=1)
    var_p = 1.0 - 0.95 ** 2  # 0.0975
    val = ar_kl_loss(np.array([0.5]), np.array([np.sqrt(var_p)]),
                     np.array([0.0]), cfg)
    # KL = mu^2 / (2 var_p) = 0.25 / 0.195
    assert val == pytest.approx(0.25 / (2 * var_p), abs=1e-9)
    assert val == pytest.approx(1.2820513, abs=1e-6)


def test_ar_kl_scales_with_beta():
    a = ar_kl_loss(np.array([0.5]), np.array([0.2]), np.array([0.0]),
                   PriorConfig(beta=1.0, d_z=1))
    b = ar_kl_loss(np.array([0.5]), np.array([0.2]), np.array([0.0]),
                   PriorConfig(beta=1e-3, d_z=1))
    assert b == pytest.approx(1e-3 * a, rel=1e-12)


@given(st.floats(-2, 2), st.floats(0.05, 3.0), st.floats(-2, 2))
@settings(max_examples=100, deadline=None)
def test_ar_kl_nonnegative(mu, sigma, z_prev):
    cfg = PriorConfig(alpha=0.95, beta=1.0, d_z=1)
    val = ar_kl_loss(np.array([mu]), np.array([sigma]), np.array([z_prev]), cfg)
    assert val >= -1e-12


def test_ar_kl_batched_rows_match_scalar(cfg, rng):
    mu = rng.standard_normal((5, cfg.d_z))
    sigma = np.exp(rng.uniform(-1, 0.5, (5, cfg.d_z)))
    zp = rng.standard_normal((5, cfg.d_z))
    batch = ar_kl_loss(mu, sigma, zp, cfg)
    assert batch.shape == (5,)
    for i in range(5):
        assert batch[i] == pytest.approx(
            float(ar_kl_loss(mu[i], sigma[i], zp[i], cfg)), rel=1e-12)


def test_ar_kl_shape_mismatch_raises(cfg):
    with pytest.raises(ShapeError):
        ar_kl_loss(np.zeros(3), np.ones(3), np.zeros(4), cfg)


def test_ar_kl_grads_match_fd():
    cfg = PriorConfig(alpha=0.95, beta=1.0, d_z=1)
    mu0, sigma0, zp = 0.4, 0.6, -0.3
    dmu, dsigma = ar_kl_grads(np.array([mu0]), np.array([sigma0]),
                              np.array([zp]), cfg)
    h = 1e-6

    def f(mu, sigma):
        return float(ar_kl_loss(np.array([mu]), np.array([sigma]),
                                np.array([zp]), cfg))

    fd_mu = (f(mu0 + h, sigma0) - f(mu0 - h, sigma0)) / (2 * h)
    fd_sigma = (f(mu0, sigma0 + h) - f(mu0, sigma0 - h)) / (2 * h)
    assert dmu[0] == pytest.approx(fd_mu, rel=1e-6)
    assert dsigma[0] == pytest.approx(fd_sigma, rel=1e-6)


def test_ar_kl_monte_carlo_single_setting(rng):
    # KL = E_q[log q - log p]; one quick MC sanity check (acceptance runs 5)
    cfg = PriorConfig(alpha=0.95, beta=1.0, d_z=1)
    mu, sigma, zp = 0.3, 0.5, -0.4
    closed = float(ar_kl_loss(np.array([mu]), np.array([sigma]),
                              np.array([zp]), cfg))
    n = 200_000
    x = rng.normal(mu, sigma, n)
    var_p = 1.0 - cfg.alpha ** 2
    log_q = -0.5 * ((x - mu) / sigma) ** 2 - np.log(sigma) - 0.5 * np.log(2 * np.pi)
    log_p = (-0.5 * (x - cfg.alpha * zp) ** 2 / var_p
             - 0.5 * np.log(2 * np.pi * var_p))
    diff = log_q - log_p
    mc, se = diff.mean(), diff.std() / np.sqrt(n)
    assert abs(mc - closed) < 3 * se


# ---------------------------------------------------------------------------
# latent chain


def test_latent_chain_stationary_variance(cfg):
    # z_t = alpha z_{t-1} + sqrt(1 - alpha^2) eps has unit stationary variance
    r = np.random.default_rng(11)
    n = 100_000
    sd = np.sqrt(1.0 - cfg.alpha ** 2)
    z = r.standard_normal()
    samples = np.empty(n)
    for i in range(n):
        z = cfg.alpha * z + sd * r.standard_normal()
        samples[i] = z
    assert 0.97 < samples.var() < 1.03


def test_next_latent_resample_and_hold():
    cfg = PriorConfig(resample_every=2, d_z=4)
    r = np.random.default_rng(0)
    mu, sigma = np.ones(4), np.full(4, 0.1)
    zp = np.zeros(4)
    drawn = next_latent(mu, sigma, zp, 0, cfg, r)
    held = next_latent(mu, sigma, drawn.z, 1, cfg, r)
    np.testing.assert_array_equal(held.z, drawn.z)
    redrawn = next_latent(mu, sigma, held.z, 2, cfg, r)
    assert not np.array_equal(redrawn.z, held.z)


def test_next_latent_mean_matches_mu():
    cfg = PriorConfig(d_z=1)
    r = np.random.default_rng(1)
    n = 100_000
    mu, sigma = np.array([0.7]), np.array([0.3])
    zs = np.array([next_latent(mu, sigma, np.zeros(1), 0, cfg, r).z[0]
                   for _ in range(n)])
    se = sigma[0] / np.sqrt(n)
    assert abs(zs.mean() - mu[0]) < 3 * se


def test_prior_config_validation():
    with pytest.raises(ValidationError):
        PriorConfig(alpha=1.0)
    with pytest.raises(ValidationError):
        PriorConfig(beta=-0.1)


# ---------------------------------------------------------------------------
# features


def test_segment_features_translation_invariant(geom, walk_clip):
    shifted = MotionClip(walk_clip.name, walk_clip.source, walk_clip.dt,
                         walk_clip.poses + np.array([5.0, 0, 0, 0, 0, 0, 0]),
                         geom)
    a = segment_features(walk_clip, 12)
    b = segment_features(shifted, 12)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_segment_feature_table_matches_single(walk_clip):
    table = precompute_segment_features(walk_clip)
    assert table.shape == (len(walk_clip), SEG_FEAT_DIM)
    for t in (0, 17, walk_clip.T):
        np.testing.assert_array_equal(table[t], segment_features(walk_clip, t))


def test_segment_features_from_segment_matches(walk_clip):
    t = 9
    seg = extract_segment(walk_clip, t)
    a = segment_features_from_segment(seg, walk_clip.poses[t])
    np.testing.assert_allclose(a, segment_features(walk_clip, t), atol=1e-12)


def test_prop_features_layout(geom):
    s = _state(geom)
    pf = prop_features(s.to_array()[None, :])[0]
    assert pf.shape == (PROP_FEAT_DIM,)
    assert pf[0] == s.root_z
    assert pf[1] == pytest.approx(np.sin(s.pitch))
    assert pf[2] == pytest.approx(np.cos(s.pitch))
    assert pf[3] == s.vx
    # root_x must not appear anywhere
    s2 = _state(geom)
    s2.root_x += 10.0
    np.testing.assert_array_equal(pf, prop_features(s2.to_array()[None, :])[0])


# ---------------------------------------------------------------------------
# networks


def test_encode_shapes_and_determinism(nets, walk_clip):
    feats = segment_features(walk_clip, 5)
    mu1, sigma1 = nets.encode(feats)
    mu2, sigma2 = nets.encode(feats)
    assert mu1.shape == (nets.cfg.d_z,)
    np.testing.assert_array_equal(mu1, mu2)
    np.testing.assert_array_equal(sigma1, sigma2)
    assert np.all(sigma1 > 0)


def test_encode_distinguishes_segments(nets, walk_clip, hop_clip):
    mu_walk, _ = nets.encode(segment_features(walk_clip, 5))
    mu_hop, _ = nets.encode(segment_features(hop_clip, 5))
    assert not np.allclose(mu_walk, mu_hop)


def test_action_mean_within_joint_limits(nets, geom):
    r = np.random.default_rng(2)
    s = _state(geom)
    for _ in range(200):
        z = 5.0 * r.standard_normal(nets.cfg.d_z)
        mean, log_std = nets.act(z, s)
        assert np.all(mean >= geom.limits_low)
        assert np.all(mean <= geom.limits_high)
        assert log_std.shape == (4,)


def test_action_log_std_initial_value(nets):
    assert np.all(nets.log_std == nets.cfg.init_log_std)


def test_critic_depends_on_clip_embedding(nets, geom):
    s = _state(geom)
    z = np.zeros(nets.cfg.d_z)
    v0 = nets.critic_value(s, z, 0)
    v1 = nets.critic_value(s, z, 1)
    assert v0 != v1


def test_critic_rejects_bad_clip_id(nets, geom):
    with pytest.raises(IndexError):
        nets.critic_value(_state(geom), np.zeros(nets.cfg.d_z), 3)


def test_critic_embedding_gradient_fd(geom):
    # d value / d embedding via the critic input gradient vs central FD
    nets = PriorNetworks(PriorConfig(), n_clips=2, geom=geom, seed=1)
    s = _state(geom)
    z = 0.1 * np.ones(nets.cfg.d_z)
    pf = prop_features(s.to_array()[None, :])
    enc, _ = nets.prop.forward(pf)
    inp = np.concatenate([enc[0], z, nets.embeddings[0]])
    g = nets.critic.input_gradient(inp[None, :])[0]
    emb_grad = g[-nets.cfg.embed_dim:]
    h = 1e-6
    for j in range(nets.cfg.embed_dim):
        nets.embeddings[0, j] += h
        up = nets.critic_value(s, z, 0)
        nets.embeddings[0, j] -= 2 * h
        dn = nets.critic_value(s, z, 0)
        nets.embeddings[0, j] += h
        assert emb_grad[j] == pytest.approx((up - dn) / (2 * h),
                                            rel=1e-5, abs=1e-9)


def test_params_roundtrip(nets):
    params = {k: v.copy() for k, v in nets.params().items()}
    nets.load_params(params)
    for k, v in nets.params().items():
        np.testing.assert_array_equal(v, params[k])
    bad = dict(params)
    bad.pop("log_std")
    with pytest.raises(ValidationError):
        nets.load_params(bad)


def test_load_params_rejects_shape_mismatch(nets):
    params = {k: v.copy() for k, v in nets.params().items()}
    params["log_std"] = np.zeros(5)
    with pytest.raises(ValidationError):
        nets.load_params(params)
