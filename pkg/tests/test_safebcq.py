import copy
import math

import numpy as np
import pytest

import batchdrive.diffcore as dc
from batchdrive.dataset import BatchDataset, Transition
from batchdrive.safebcq import (
    SafeBcqAgent,
    TrainConfig,
    Trainer,
    Vae,
    config_from_json_dict,
    config_to_json_dict,
    gaussian_kl,
    load_agent,
    run_training,
    save_agent,
    spawn_streams,
)

from fdcheck import check_grads, numeric_grad_at, rel_err

OBS = 5
ACT = 2


def tiny_config(**kw):
    base = dict(
        hidden=(8, 8), icnn_hidden=(4, 4), minibatch=8, epochs=1,
        iters_per_epoch=3, eval_episodes=1,
    )
    base.update(kw)
    return TrainConfig(**base)


def make_agent(variant="bcq", seed=0, **kw):
    cfg = tiny_config(variant=variant, **kw)
    streams = spawn_streams(seed)
    return SafeBcqAgent(OBS, ACT, "highway", cfg, streams["init"],
                        noise_rng=streams["noise"]), streams


def synthetic_dataset(n=60, seed=3, obs_dim=OBS, act_dim=ACT,
                      env_id="highway"):
    rng = np.random.default_rng(seed)
    ds = BatchDataset(env_id, obs_dim, act_dim, seed=seed)
    for i in range(n):
        s = rng.uniform(-1, 1, obs_dim)
        a = rng.uniform(-1, 1, act_dim)
        s2 = np.clip(s + 0.1 * rng.uniform(-1, 1, obs_dim), -1, 1)
        ds.append(Transition(s, a, float(rng.uniform(-1, 0.4)), s2,
                             bool(i % 17 == 0)))
    return ds


def constant_net(in_dim, value):
    w = np.zeros((1, in_dim))
    b = np.array([float(value)])
    return dc.Mlp([dc.Dense(w, b, "identity")])


def linear_in_coord(obs_dim, act_dim, coord):
    """Q(s, a) = a[coord], as a single dense layer."""
    w = np.zeros((1, obs_dim + act_dim))
    w[0, obs_dim + coord] = 1.0
    return dc.Mlp([dc.Dense(w, np.zeros(1), "identity")])


# ---------------------------------------------------------------------------
# agent constructor ordering: first positional arg is env_id in trainer use;
# the helper above builds agents directly so pin the real signature here

def test_agent_signature_matches_trainer_use():
    ds = synthetic_dataset(10)
    cfg = tiny_config()
    tr = Trainer(ds, cfg, seed=0)
    assert tr.agent.obs_dim == ds.obs_dim
    assert tr.agent.act_dim == ds.act_dim
    assert tr.agent.env_id == ds.env_id


# ---------------------------------------------------------------------------
# VAE


def test_kl_identical_gaussians_zero():
    assert gaussian_kl(np.zeros(4), np.ones(4)) == 0.0


def test_kl_unit_mean_half():
    assert gaussian_kl([1.0], [1.0]) == pytest.approx(0.5, abs=1e-12)


def test_vae_loss_zero_for_perfect_reconstruction():
    rng = np.random.default_rng(0)
    vae = Vae(OBS, ACT, [8], rng)
    # zero heads: encoder gives mu=0, log sigma=0; decoder gives tanh(0)=0
    for net in (vae.encoder, vae.decoder):
        for _, p in net.param_items():
            p[...] = 0.0
        net.bump()
    S = rng.uniform(-1, 1, (6, OBS))
    A = np.zeros((6, ACT))
    e = rng.standard_normal((6, vae.latent_dim))
    loss, recon, kl, _, _ = vae.loss_and_grads(S, A, e)
    assert loss == 0.0 and recon == 0.0 and kl == 0.0


def test_vae_kl_value_through_loss():
    # zero encoder gives mu=0, sigma=1 on every latent dim: KL term 0
    rng = np.random.default_rng(1)
    vae = Vae(OBS, ACT, [8], rng)
    for _, p in vae.encoder.param_items():
        p[...] = 0.0
    vae.encoder.bump()
    S = rng.uniform(-1, 1, (4, OBS))
    A = rng.uniform(-1, 1, (4, ACT))
    e = rng.standard_normal((4, vae.latent_dim))
    _, _, kl, _, _ = vae.loss_and_grads(S, A, e)
    assert kl == 0.0


def test_vae_decode_bounded_and_deterministic():
    rng = np.random.default_rng(2)
    vae = Vae(OBS, ACT, [8, 8], rng)
    S = rng.uniform(-1, 1, (10_000, OBS))
    out = vae.decode_prior(S, np.random.default_rng(7))
    assert np.all(np.abs(out) <= 1.0)
    again = vae.decode_prior(S, np.random.default_rng(7))
    assert np.array_equal(out, again)


def test_vae_latent_clip():
    rng = np.random.default_rng(3)
    vae = Vae(OBS, ACT, [8], rng)
    # identity-pass decoder check is indirect: drive the clip bound by
    # verifying draws beyond +-0.5 cannot change the output
    S = np.zeros((2000, OBS))
    a = vae.decode_prior(S, np.random.default_rng(0), clip=0.5)
    z = np.clip(np.random.default_rng(0).standard_normal(
        (2000, vae.latent_dim)), -0.5, 0.5)
    assert np.array_equal(a, vae.decode(S, z))


def test_vae_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    vae = Vae(3, 2, [6], rng)
    S = rng.uniform(-1, 1, (5, 3))
    A = rng.uniform(-0.9, 0.9, (5, 2))
    e = rng.standard_normal((5, vae.latent_dim))

    def loss_fn():
        vae.encoder.bump()
        vae.decoder.bump()
        return vae.loss_and_grads(S, A, e)[0]

    _, _, _, enc_grads, dec_grads = vae.loss_and_grads(S, A, e)
    for net, grads in ((vae.encoder, enc_grads), (vae.decoder, dec_grads)):
        check_grads(loss_fn, net.param_items(), dc.flatten_grads(grads),
                    rng, per_tensor=3)


def test_vae_learns_constant_action():
    rng = np.random.default_rng(5)
    vae = Vae(3, 2, [16], rng, lr=1e-2)
    target = np.array([0.3, -0.4])
    draw = np.random.default_rng(6)
    S = draw.uniform(-1, 1, (64, 3))
    A = np.tile(target, (64, 1))
    for _ in range(400):
        e = draw.standard_normal((64, vae.latent_dim))
        vae.update(S, A, e)
    decoded = vae.decode_prior(draw.uniform(-1, 1, (256, 3)),
                               np.random.default_rng(8))
    assert np.max(np.abs(decoded.mean(axis=0) - target)) < 0.1


# ---------------------------------------------------------------------------
# candidates


def test_phi_zero_candidates_equal_raw_vae():
    agent, _ = make_agent("noisy_bcq", phi=0.0)
    S = np.random.default_rng(0).uniform(-1, 1, (12, OBS))
    cands, raw = agent.candidate_actions(S, np.random.default_rng(1))
    assert np.array_equal(cands, raw)


def test_candidates_bounded():
    agent, _ = make_agent("safe_bcq")
    rng = np.random.default_rng(2)
    for _ in range(20):
        cands = agent.perturbed_candidates(rng.uniform(-1, 1, OBS),
                                           np.random.default_rng(3))
        assert cands.shape == (agent.config.n_candidates, ACT)
        assert np.all(np.abs(cands) <= 1.0)


def test_bcq_candidates_deterministic_noisy_stochastic():
    obs = np.random.default_rng(0).uniform(-1, 1, OBS)
    agent, _ = make_agent("bcq")
    pairs = [
        (agent.perturbed_candidates(obs, np.random.default_rng(9)),
         agent.perturbed_candidates(obs, np.random.default_rng(9)))
        for _ in range(100)
    ]
    assert all(np.array_equal(a, b) for a, b in pairs)

    agent, _ = make_agent("noisy_bcq")
    diffs = [
        not np.array_equal(
            agent.perturbed_candidates(obs, np.random.default_rng(9)),
            agent.perturbed_candidates(obs, np.random.default_rng(9)),
        )
        for _ in range(100)
    ]
    assert any(diffs)


def test_selected_action_stays_near_generator_output():
    agent, _ = make_agent("noisy_bcq")
    rng = np.random.default_rng(4)
    for _ in range(50):
        S = rng.uniform(-1, 1, (agent.config.n_candidates, OBS))
        cands, raw = agent.candidate_actions(S, rng)
        assert np.max(np.abs(cands - raw)) <= agent.config.phi + 1e-12


# ---------------------------------------------------------------------------
# action selection


def test_single_candidate_returned():
    agent, _ = make_agent("bcq", n_candidates=1)
    obs = np.zeros(OBS)
    a = agent.select_action(obs, np.random.default_rng(0))
    b, _ = agent.candidate_actions(np.tile(obs, (1, 1)),
                                   np.random.default_rng(0), noisy=False)
    assert np.array_equal(a, b[0])


def test_constant_q_ties_break_to_lowest_index():
    agent, _ = make_agent("bcq")
    agent.q1 = constant_net(OBS + ACT, 3.0)
    obs = np.random.default_rng(1).uniform(-1, 1, OBS)
    a = agent.select_action(obs, np.random.default_rng(2))
    cands, _ = agent.candidate_actions(np.tile(obs, (10, 1)),
                                       np.random.default_rng(2), noisy=False)
    assert np.array_equal(a, cands[0])


def test_selection_matches_exhaustive_argmax():
    agent, _ = make_agent("bcq")
    agent.q1 = linear_in_coord(OBS, ACT, 0)
    obs = np.random.default_rng(3).uniform(-1, 1, OBS)
    a = agent.select_action(obs, np.random.default_rng(4))
    cands, _ = agent.candidate_actions(np.tile(obs, (10, 1)),
                                       np.random.default_rng(4), noisy=False)
    assert np.array_equal(a, cands[np.argmax(cands[:, 0])])


# ---------------------------------------------------------------------------
# targets


def test_target_hand_value():
    agent, _ = make_agent("bcq", n_candidates=1)
    agent.q1_target = constant_net(OBS + ACT, 2.0)
    agent.q2_target = constant_net(OBS + ACT, 1.0)
    y = agent.compute_target(
        np.array([1.0]), np.zeros((1, OBS)), np.array([0.0]),
        np.random.default_rng(0),
    )
    assert y[0] == pytest.approx(1.875, abs=1e-12)


def test_target_terminal_cut():
    agent, _ = make_agent("bcq")
    agent.q1_target = constant_net(OBS + ACT, 5.0)
    agent.q2_target = constant_net(OBS + ACT, 5.0)
    R = np.array([0.25, -1.0])
    y = agent.compute_target(R, np.zeros((2, OBS)), np.array([1.0, 1.0]),
                             np.random.default_rng(0))
    assert np.array_equal(y, R)


def test_target_lambda_one_is_max_over_candidates():
    agent, _ = make_agent("bcq", lam=1.0)
    q = linear_in_coord(OBS, ACT, 1)
    agent.q1_target = q
    agent.q2_target = q
    S2 = np.random.default_rng(1).uniform(-1, 1, (4, OBS))
    y = agent.compute_target(np.zeros(4), S2, np.zeros(4),
                             np.random.default_rng(2))
    cands, _ = agent.candidate_actions(
        np.repeat(S2, 10, axis=0), np.random.default_rng(2), noisy=False
    )
    best = cands[:, 1].reshape(4, 10).max(axis=1)
    assert np.allclose(y, 0.7 * best, atol=1e-12)


# ---------------------------------------------------------------------------
# critic update


def test_bcq_update_leaves_certificate_untouched():
    agent, _ = make_agent("bcq")
    before = {k: v for k, v in agent.param_snapshot().items()
              if k.startswith("pair_")}
    S = np.random.default_rng(0).uniform(-1, 1, (8, OBS))
    A = np.random.default_rng(1).uniform(-1, 1, (8, ACT))
    losses = agent.critic_update(S, A, np.zeros(8), S2=S)
    assert "risk" not in losses and "anchor" not in losses
    after = agent.param_snapshot()
    for k, v in before.items():
        assert np.array_equal(v, after[k])


def test_zero_critics_zero_targets_zero_loss():
    agent, _ = make_agent("bcq")
    agent.q1 = constant_net(OBS + ACT, 0.0)
    agent.q2 = constant_net(OBS + ACT, 0.0)
    agent.q1_opt = dc.Adam(agent.q1)
    agent.q2_opt = dc.Adam(agent.q2)
    S = np.random.default_rng(2).uniform(-1, 1, (6, OBS))
    A = np.random.default_rng(3).uniform(-1, 1, (6, ACT))
    losses = agent.critic_update(S, A, np.zeros(6))
    assert losses["q1"] == 0.0 and losses["q2"] == 0.0


def test_joint_gradient_wrt_icnn_matches_finite_differences():
    agent, _ = make_agent("safe_bcq")
    rng = np.random.default_rng(4)
    S = rng.uniform(-1, 1, (6, OBS))
    A = rng.uniform(-1, 1, (6, ACT))
    S2 = np.clip(S + 0.05 * rng.uniform(-1, 1, (6, OBS)), -1, 1)
    y = np.zeros(6)
    cfg = agent.config

    def total_loss():
        agent.pair.icnn.bump()
        agent.pair.f_net.bump()
        q1, _ = agent.q1.forward(np.hstack([S, A]))
        q2, _ = agent.q2.forward(np.hstack([S, A]))
        bellman = float(np.mean((q1[:, 0] - y) ** 2)
                        + np.mean((q2[:, 0] - y) ** 2))
        risk = agent.pair.lyapunov_risk(S)
        f_bar = agent.pair.nominal(S)
        err = S + f_bar * agent.config.lyapunov.dt - S2
        anchor = float(np.mean(np.sum(err * err, axis=1)))
        return bellman + cfg.risk_weight * risk + cfg.anchor_weight * anchor

    _, grads = agent.critic_losses_and_grads(S, A, y, S2=S2)
    check_grads(total_loss, agent.pair.icnn.param_items(), grads["icnn"],
                rng, per_tensor=3)
    check_grads(total_loss, agent.pair.f_net.param_items(),
                dc.flatten_grads(grads["f_net"]), rng, per_tensor=3)


# ---------------------------------------------------------------------------
# perturbation update


def test_perturb_gradients_match_finite_differences():
    agent, _ = make_agent("noisy_bcq")
    agent.resample_noise()  # fixed epsilon for the whole check
    rng = np.random.default_rng(5)
    S = rng.uniform(-1, 1, (6, OBS))

    def objective():
        agent.perturb.bump()
        return agent.perturb_objective_and_grads(
            S, np.random.default_rng(11))[0]

    _, grads = agent.perturb_objective_and_grads(S, np.random.default_rng(11))
    flat = dc.flatten_grads(grads)
    assert any("sigma" in k and np.any(f != 0) for k, f in flat.items())
    check_grads(objective, agent.perturb.param_items(), flat, rng,
                per_tensor=3)


def test_constant_critic_leaves_perturbation_unchanged():
    agent, _ = make_agent("noisy_bcq")
    agent.q1 = constant_net(OBS + ACT, 1.0)
    before = copy.deepcopy(dict(agent.perturb.param_items()))
    S = np.random.default_rng(6).uniform(-1, 1, (8, OBS))
    agent.perturb_update(S, np.random.default_rng(7))
    for k, p in agent.perturb.param_items():
        assert np.array_equal(before[k], p)


def test_perturb_step_increases_fixed_batch_objective():
    agent, _ = make_agent("noisy_bcq")
    agent.resample_noise()
    S = np.random.default_rng(8).uniform(-1, 1, (16, OBS))
    before = agent.perturb_objective_and_grads(
        S, np.random.default_rng(12))[0]
    agent.perturb_update(S, np.random.default_rng(12))
    after = agent.perturb_objective_and_grads(
        S, np.random.default_rng(12))[0]
    assert after > before


# ---------------------------------------------------------------------------
# epoch loop


def test_epoch_deterministic():
    ds = synthetic_dataset()
    d1 = Trainer(ds, tiny_config(variant="safe_bcq"), seed=5).train_epoch()
    d2 = Trainer(ds, tiny_config(variant="safe_bcq"), seed=5).train_epoch()
    assert d1 == d2


def test_epoch_tau_zero_keeps_targets():
    ds = synthetic_dataset()
    tr = Trainer(ds, tiny_config(tau=0.0), seed=1)
    before = {k: p.copy() for k, p in tr.agent.q1_target.param_items()}
    tr.train_epoch()
    for k, p in tr.agent.q1_target.param_items():
        assert np.array_equal(before[k], p)


def test_epoch_diagnostics_variant_gated():
    ds = synthetic_dataset()
    safe = Trainer(ds, tiny_config(variant="safe_bcq"), seed=2).train_epoch()
    plain = Trainer(ds, tiny_config(variant="bcq"), seed=2).train_epoch()
    assert "risk" in safe and "anchor" in safe
    assert "risk" not in plain and "anchor" not in plain


def test_target_drift_is_exact_convex_blend():
    agent, _ = make_agent("bcq")
    tau = agent.config.tau
    old = {k: p.copy() for k, p in agent.q1_target.param_items()}
    online = {k: p.copy() for k, p in agent.q1.param_items()}
    agent.soft_update_targets()
    for k, p in agent.q1_target.param_items():
        assert np.array_equal(p, tau * online[k] + (1.0 - tau) * old[k])


def test_variant_nesting_identical_when_extras_disabled():
    ds = synthetic_dataset()
    snaps = []
    for variant in ("bcq", "noisy_bcq", "safe_bcq"):
        cfg = tiny_config(variant=variant, phi=0.0, freeze_noise=True,
                          risk_weight=0.0, anchor_weight=0.0, epochs=2)
        tr = Trainer(ds, cfg, seed=9)
        for _ in range(2):
            tr.train_epoch()
        snaps.append(tr.agent.param_snapshot())
    for other in snaps[1:]:
        assert snaps[0].keys() == other.keys()
        for k in snaps[0]:
            assert np.array_equal(snaps[0][k], other[k]), k


def test_nesting_breaks_when_noise_is_live():
    ds = synthetic_dataset()
    snaps = []
    for variant in ("bcq", "noisy_bcq"):
        cfg = tiny_config(variant=variant, epochs=1)
        tr = Trainer(ds, cfg, seed=9)
        tr.train_epoch()
        snaps.append(tr.agent.param_snapshot())
    assert any(
        not np.array_equal(snaps[0][k], snaps[1][k]) for k in snaps[0]
    )


# ---------------------------------------------------------------------------
# evaluation hook and run directory


def test_trainer_evaluate_deterministic_across_reruns():
    ds = synthetic_dataset(env_id="parking", obs_dim=12, act_dim=2)
    r1 = Trainer(ds, tiny_config(), seed=3).evaluate(episodes=2)
    r2 = Trainer(ds, tiny_config(), seed=3).evaluate(episodes=2)
    assert r1.returns == r2.returns
    assert r1.successes == r2.successes


def test_run_training_writes_artifacts(tmp_path):
    ds = synthetic_dataset(env_id="parking", obs_dim=12, act_dim=2)
    cfg = tiny_config(variant="safe_bcq", epochs=2, eval_every=2)
    out = run_training(ds, cfg, seed=0, run_dir=str(tmp_path / "run"))
    base = tmp_path / "run"
    for name in ("config.json", "diagnostics.csv", "metrics.csv",
                 "episodes.csv", "checkpoint_0002.json",
                 "checkpoint_final.json"):
        assert (base / name).exists(), name
    assert out["epochs"] == 2
    lines = (base / "metrics.csv").read_text().strip().splitlines()
    assert lines[0].startswith("epoch,seed,variant")
    assert len(lines) == 2


def test_run_training_metrics_reproducible(tmp_path):
    ds = synthetic_dataset(env_id="parking", obs_dim=12, act_dim=2)
    paths = []
    for name in ("a", "b"):
        cfg = tiny_config(variant="noisy_bcq", epochs=2, eval_every=1)
        run_training(ds, cfg, seed=4, run_dir=str(tmp_path / name))
        paths.append(tmp_path / name / "metrics.csv")
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_checkpoint_round_trip(tmp_path):
    agent, _ = make_agent("safe_bcq")
    path = tmp_path / "ckpt.json"
    save_agent(str(path), agent, extra={"epoch": 7})
    loaded, meta = load_agent(str(path))
    assert meta["epoch"] == 7
    assert loaded.config == agent.config
    before = agent.param_snapshot()
    after = loaded.param_snapshot()
    assert before.keys() == after.keys()
    for k in before:
        assert np.array_equal(before[k], after[k]), k
    obs = np.random.default_rng(0).uniform(-1, 1, OBS)
    assert np.array_equal(
        agent.select_action(obs, np.random.default_rng(1)),
        loaded.select_action(obs, np.random.default_rng(1)),
    )


def test_config_json_round_trip():
    cfg = tiny_config(variant="safe_bcq", phi=0.01)
    assert config_from_json_dict(config_to_json_dict(cfg)) == cfg


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(variant="dqn")
    with pytest.raises(ValueError):
        TrainConfig(gamma=1.0)
    with pytest.raises(ValueError):
        TrainConfig(lam=1.5)
    with pytest.raises(ValueError):
        TrainConfig(n_candidates=0)
