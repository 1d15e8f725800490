"""Batch-constrained Q-learning with optional parameter-noise exploration
and a jointly trained Lyapunov certificate.

One trainer owns one (variant, seed) run. Three variants share the same
skeleton:

* ``bcq``        -- deterministic perturbation (noise frozen at zero).
* ``noisy_bcq``  -- perturbation weights carry learnable noise scales,
                    resampled once per minibatch.
* ``safe_bcq``   -- noisy variant plus Lyapunov risk and dynamics anchor
                    terms joined to the critic update.

Determinism: every stochastic choice draws from a named substream spawned
from the run seed (agent init, minibatch indices, VAE reparameterization,
candidate latents, perturbation latents, weight noise, evaluation). Using
separate streams keeps variants aligned draw-for-draw wherever their
behavior is meant to coincide, so switching a variant's extra machinery
off reproduces its simpler sibling bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import evalkit
from . import lyapunov as ly
from .behavior import check_finite, clone_net, soft_update
from .drivesim import config_to_dict, make_env

VARIANTS = ("bcq", "noisy_bcq", "safe_bcq")

STREAM_NAMES = ("init", "batch", "vae", "cand", "perturb", "noise", "eval")


@dataclass
class TrainConfig:
    variant: str = "bcq"
    gamma: float = 0.7
    lam: float = 0.75
    tau: float = 0.005
    minibatch: int = 100
    n_candidates: int = 10
    epochs: int = 200
    eval_every: int = 10
    eval_episodes: int = 5
    iters_per_epoch: int = 100
    phi: float = 0.05
    latent_clip: float = 0.5
    lr: float = 1e-3
    risk_weight: float = 1.0
    anchor_weight: float = 1.0
    freeze_noise: bool = False
    hidden: tuple = (64, 64)
    icnn_hidden: tuple = (32, 32)
    lyapunov: ly.LyapunovConfig = field(default_factory=ly.LyapunovConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(
                f"unknown variant {self.variant!r}; valid: {', '.join(VARIANTS)}"
            )
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.n_candidates < 1:
            raise ValueError("need at least one candidate action")

    @property
    def noisy(self):
        return self.variant in ("noisy_bcq", "safe_bcq")

    @property
    def lyapunov_on(self):
        return self.variant == "safe_bcq"


def config_to_json_dict(cfg):
    d = dataclasses.asdict(cfg)
    d["hidden"] = list(cfg.hidden)
    d["icnn_hidden"] = list(cfg.icnn_hidden)
    return d


def config_from_json_dict(d):
    d = dict(d)
    d["hidden"] = tuple(d["hidden"])
    d["icnn_hidden"] = tuple(d["icnn_hidden"])
    d["lyapunov"] = ly.LyapunovConfig(**d["lyapunov"])
    return TrainConfig(**d)


def spawn_streams(seed):
    children = np.random.SeedSequence(seed).spawn(len(STREAM_NAMES))
    return {name: np.random.default_rng(ss)
            for name, ss in zip(STREAM_NAMES, children)}


# ---------------------------------------------------------------------------
# action generator


class Vae:
    """Action generator: encoder to latent stats, tanh decoder back to
    actions. The latent dimension is twice the action dimension."""

    def __init__(self, obs_dim, act_dim, hidden, rng, lr=1e-3):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.latent_dim = 2 * act_dim
        h = list(hidden)
        self.encoder = dc.make_mlp(
            [obs_dim + act_dim] + h + [2 * self.latent_dim],
            ["tanh"] * len(h) + ["identity"], rng,
        )
        self.decoder = dc.make_mlp(
            [obs_dim + self.latent_dim] + h + [act_dim],
            ["tanh"] * len(h) + ["tanh"], rng,
        )
        self.enc_opt = dc.Adam(self.encoder, lr=lr)
        self.dec_opt = dc.Adam(self.decoder, lr=lr)

    def decode(self, S, Z):
        a, _ = self.decoder.forward(np.hstack([S, Z]))
        return a

    def decode_prior(self, S, rng, clip=0.5):
        """Sample latents from the clipped unit Gaussian and decode."""
        Z = np.clip(rng.standard_normal((len(S), self.latent_dim)), -clip, clip)
        return self.decode(S, Z)

    def loss_and_grads(self, S, A, e):
        """Reconstruction + KL with injected reparameterization noise e.

        The loss is the batch mean of the summed squared reconstruction
        error plus the per-dimension KL to the unit Gaussian,
        0.5 (mu^2 + sigma^2 - log sigma^2 - 1), summed over latent dims.
        """
        B = len(S)
        stats, enc_tape = self.encoder.forward(np.hstack([S, A]))
        mu = stats[:, : self.latent_dim]
        log_sigma = stats[:, self.latent_dim:]
        sigma = np.exp(log_sigma)
        Z = mu + sigma * e
        recon, dec_tape = self.decoder.forward(np.hstack([S, Z]))
        diff = recon - A
        recon_loss = float(np.mean(np.sum(diff * diff, axis=1)))
        kl = float(np.mean(0.5 * np.sum(
            mu * mu + sigma * sigma - 2.0 * log_sigma - 1.0, axis=1)))

        gy = (2.0 / B) * diff
        gin, dec_grads = self.decoder.backward(dec_tape, gy)
        gz = gin[:, self.obs_dim:]
        gmu = gz + mu / B
        gls = gz * sigma * e + (sigma * sigma - 1.0) / B
        _, enc_grads = self.encoder.backward(enc_tape, np.hstack([gmu, gls]))
        return recon_loss + kl, recon_loss, kl, enc_grads, dec_grads

    def update(self, S, A, e):
        loss, recon, kl, enc_grads, dec_grads = self.loss_and_grads(S, A, e)
        check_finite("vae loss", loss)
        self.enc_opt.step(enc_grads)
        self.dec_opt.step(dec_grads)
        return loss, recon, kl

    def nets(self):
        return {"vae_encoder": self.encoder, "vae_decoder": self.decoder}

    def opts(self):
        return {"vae_encoder": self.enc_opt, "vae_decoder": self.dec_opt}


def gaussian_kl(mu, sigma):
    """KL(N(mu, sigma^2) || N(0, 1)), summed over dimensions."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    return float(np.sum(
        0.5 * (mu * mu + sigma * sigma - np.log(sigma * sigma) - 1.0)
    ))


# ---------------------------------------------------------------------------
# agent


class SafeBcqAgent:
    """Networks plus the operations of one training iteration."""

    def __init__(self, obs_dim, act_dim, env_id, config, init_rng,
                 noise_rng=None):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.env_id = env_id
        self.config = config
        h = list(config.hidden)
        acts = ["tanh"] * len(h)
        self.vae = Vae(obs_dim, act_dim, h, init_rng, lr=config.lr)
        self.perturb = dc.make_mlp(
            [obs_dim + act_dim] + h + [act_dim], acts + ["tanh"], init_rng,
            noisy=True,
        )
        self.q1 = dc.make_mlp(
            [obs_dim + act_dim] + h + [1], acts + ["identity"], init_rng
        )
        self.q2 = dc.make_mlp(
            [obs_dim + act_dim] + h + [1], acts + ["identity"], init_rng
        )
        self.q1_target = clone_net(self.q1)
        self.q2_target = clone_net(self.q2)
        # the certificate pair exists for every variant so that agent
        # construction consumes identical init draws across variants
        state_dim = ly.state_map(env_id, np.zeros(obs_dim)).shape[0]
        self.pair = ly.make_pair(
            state_dim, init_rng, config.lyapunov,
            hidden=tuple(h), icnn_hidden=tuple(config.icnn_hidden),
        )
        self.noise_rng = (noise_rng if noise_rng is not None
                          else init_rng.spawn(1)[0])
        self.perturb_opt = dc.Adam(self.perturb, lr=config.lr)
        self.q1_opt = dc.Adam(self.q1, lr=config.lr)
        self.q2_opt = dc.Adam(self.q2, lr=config.lr)
        self.f_opt = dc.Adam(self.pair.f_net, lr=config.lr)
        self.icnn_opt = dc.Adam(self.pair.icnn, lr=config.lr)

    # -- candidate generation -----------------------------------------------

    def resample_noise(self, rng=None):
        """Fresh weight noise for the noisy variants; a no-op for plain bcq
        and under a noise freeze."""
        if self.config.noisy and not self.config.freeze_noise:
            self.perturb.resample_noise(
                rng if rng is not None else self.noise_rng
            )

    def perturbation(self, S, A, noisy=True):
        """Bounded action correction: phi * tanh-net(s, a)."""
        out, tape = self.perturb.forward(np.hstack([S, A]), noisy=noisy)
        return self.config.phi * out, tape

    def candidate_actions(self, S_rep, rng, noisy=True):
        """VAE samples plus perturbation under the current weight noise,
        clipped to the action box."""
        raw = self.vae.decode_prior(S_rep, rng, clip=self.config.latent_clip)
        xi, _ = self.perturbation(S_rep, raw, noisy=noisy)
        return np.clip(raw + xi, -1.0, 1.0), raw

    def perturbed_candidates(self, obs, rng):
        """n candidate actions for one observation, resampling the weight
        noise first (noisy variants only)."""
        self.resample_noise()
        S_rep = np.tile(np.asarray(obs, dtype=float),
                        (self.config.n_candidates, 1))
        cands, _ = self.candidate_actions(S_rep, rng, noisy=self.config.noisy)
        return cands

    def select_action(self, obs, rng, explore=False):
        """Highest-scoring candidate under the first critic; ties take the
        lowest index. Greedy evaluation holds the weight noise at zero."""
        if explore:
            cands = self.perturbed_candidates(obs, rng)
        else:
            S_rep = np.tile(np.asarray(obs, dtype=float),
                            (self.config.n_candidates, 1))
            cands, _ = self.candidate_actions(S_rep, rng, noisy=False)
        S_rep = np.tile(np.asarray(obs, dtype=float), (len(cands), 1))
        q, _ = self.q1.forward(np.hstack([S_rep, cands]))
        return cands[int(np.argmax(q[:, 0]))]

    # -- targets ------------------------------------------------------------

    def compute_target(self, R, S2, D, rng):
        """Blended twin-critic backup over n perturbed candidates at s2:
        y = r + gamma (1-done) max_i [lam min_j Q'_j + (1-lam) max_j Q'_j]."""
        cfg = self.config
        B = len(S2)
        S_rep = np.repeat(S2, cfg.n_candidates, axis=0)
        cands, _ = self.candidate_actions(S_rep, rng, noisy=cfg.noisy)
        inp = np.hstack([S_rep, cands])
        q1, _ = self.q1_target.forward(inp)
        q2, _ = self.q2_target.forward(inp)
        q1 = q1[:, 0].reshape(B, cfg.n_candidates)
        q2 = q2[:, 0].reshape(B, cfg.n_candidates)
        blend = cfg.lam * np.minimum(q1, q2) \
            + (1.0 - cfg.lam) * np.maximum(q1, q2)
        return R + cfg.gamma * (1.0 - D) * blend.max(axis=1)

    # -- updates ------------------------------------------------------------

    def critic_losses_and_grads(self, S, A, y, S2=None):
        """Twin Bellman regression losses; for the safe variant the Lyapunov
        risk and dynamics anchor join the same objective. Returns the loss
        dict and per-network gradients without touching any parameters."""
        cfg = self.config
        B = len(S)
        inp = np.hstack([S, A])
        losses = {}
        grads = {}
        for name, net in (("q1", self.q1), ("q2", self.q2)):
            q, tape = net.forward(inp)
            err = q[:, 0] - y
            losses[name] = check_finite(
                f"{name} loss", float(np.mean(err * err))
            )
            _, g = net.backward(tape, (2.0 / B) * err[:, None])
            grads[name] = g
        if cfg.lyapunov_on:
            Sl = ly.state_map(self.env_id, S)
            S2l = ly.state_map(self.env_id, S2)
            risk, anchor, f_grads, icnn_grads, stats = \
                self.pair.losses_and_grads(
                    Sl, S2l,
                    risk_weight=cfg.risk_weight,
                    anchor_weight=cfg.anchor_weight,
                )
            check_finite("lyapunov risk", risk)
            check_finite("dynamics anchor", anchor)
            losses["risk"] = risk
            losses["anchor"] = anchor
            losses["decrease_active"] = stats["decrease_active"]
            grads["f_net"] = f_grads
            grads["icnn"] = icnn_grads
        return losses, grads

    def critic_update(self, S, A, y, S2=None):
        losses, grads = self.critic_losses_and_grads(S, A, y, S2=S2)
        self.q1_opt.step(grads["q1"])
        self.q2_opt.step(grads["q2"])
        if self.config.lyapunov_on:
            self.f_opt.step(grads["f_net"])
            self.icnn_opt.step(grads["icnn"])
        return losses

    def perturb_objective_and_grads(self, S, rng):
        """Mean first-critic score of perturbed VAE actions, with gradients
        for the perturbation parameters (both weight means and noise scales;
        the scale gradient flows through the sampled epsilon)."""
        cfg = self.config
        raw = self.vae.decode_prior(S, rng, clip=cfg.latent_clip)
        out, tape = self.perturb.forward(np.hstack([S, raw]), noisy=cfg.noisy)
        summed = raw + cfg.phi * out
        acts = np.clip(summed, -1.0, 1.0)
        q, qtape = self.q1.forward(np.hstack([S, acts]))
        objective = float(np.mean(q))
        gin, _ = self.q1.backward(qtape, np.full((len(S), 1), 1.0 / len(S)))
        ga = gin[:, self.obs_dim:]
        ga = np.where(np.abs(summed) <= 1.0, ga, 0.0)  # clip gate
        _, grads = self.perturb.backward(tape, cfg.phi * ga)
        return objective, grads

    def perturb_update(self, S, rng):
        objective, grads = self.perturb_objective_and_grads(S, rng)
        check_finite("perturbation objective", objective)
        flat = dc.flatten_grads(grads)
        self.perturb_opt.step({k: -g for k, g in flat.items()})
        return objective

    def soft_update_targets(self, tau=None):
        tau = self.config.tau if tau is None else tau
        soft_update(self.q1, self.q1_target, tau)
        soft_update(self.q2, self.q2_target, tau)

    # -- persistence --------------------------------------------------------

    def nets(self):
        out = dict(self.vae.nets())
        out.update(
            perturb=self.perturb,
            q1=self.q1, q2=self.q2,
            q1_target=self.q1_target, q2_target=self.q2_target,
            pair_f_net=self.pair.f_net, pair_icnn=self.pair.icnn,
        )
        return out

    def opts(self):
        out = dict(self.vae.opts())
        out.update(
            perturb=self.perturb_opt,
            q1=self.q1_opt, q2=self.q2_opt,
            f_net=self.f_opt, icnn=self.icnn_opt,
        )
        return out

    def param_snapshot(self):
        """Copies of every parameter array, keyed net/param."""
        return {
            f"{net_name}/{k}": p.copy()
            for net_name, net in self.nets().items()
            for k, p in net.param_items()
        }

    def adopt_nets(self, nets):
        """Swap in loaded networks (checkpoint restore) and rebind the
        optimizers to them."""
        self.vae.encoder = nets["vae_encoder"]
        self.vae.decoder = nets["vae_decoder"]
        self.perturb = nets["perturb"]
        self.q1 = nets["q1"]
        self.q2 = nets["q2"]
        self.q1_target = nets["q1_target"]
        self.q2_target = nets["q2_target"]
        self.pair = ly.LyapunovPair(
            nets["pair_f_net"], nets["pair_icnn"], self.config.lyapunov
        )
        lr = self.config.lr
        self.vae.enc_opt = dc.Adam(self.vae.encoder, lr=lr)
        self.vae.dec_opt = dc.Adam(self.vae.decoder, lr=lr)
        self.perturb_opt = dc.Adam(self.perturb, lr=lr)
        self.q1_opt = dc.Adam(self.q1, lr=lr)
        self.q2_opt = dc.Adam(self.q2, lr=lr)
        self.f_opt = dc.Adam(self.pair.f_net, lr=lr)
        self.icnn_opt = dc.Adam(self.pair.icnn, lr=lr)


def save_agent(path, agent, rngs=None, extra=None):
    meta = {
        "env_id": agent.env_id,
        "obs_dim": agent.obs_dim,
        "act_dim": agent.act_dim,
        "config": config_to_json_dict(agent.config),
    }
    if extra:
        meta.update(extra)
    dc.save_checkpoint(path, agent.nets(), rngs=rngs,
                       adams=agent.opts(), extra=meta)


def load_agent(path):
    """Rebuild an agent from a checkpoint; optimizer state starts fresh."""
    nets, rngs, doc = dc.load_checkpoint(path)
    meta = doc["extra"]
    config = config_from_json_dict(meta["config"])
    agent = SafeBcqAgent(
        meta["obs_dim"], meta["act_dim"], meta["env_id"], config,
        np.random.default_rng(0),
    )
    agent.adopt_nets(nets)
    return agent, meta


# ---------------------------------------------------------------------------
# training loop


class Trainer:
    """One (variant, seed) training run over a fixed dataset."""

    def __init__(self, ds, config, seed, env_config=None):
        if ds.count < 1:
            raise ValueError("dataset is empty")
        self.ds = ds
        self.config = config
        self.seed = seed
        self.env_config = env_config
        self.rngs = spawn_streams(seed)
        self.agent = SafeBcqAgent(
            ds.obs_dim, ds.act_dim, ds.env_id, config,
            self.rngs["init"], noise_rng=self.rngs["noise"],
        )
        self.epoch = 0

    def train_iteration(self):
        cfg = self.config
        agent = self.agent
        S, A, R, S2, D = self.ds.sample_arrays(cfg.minibatch,
                                               self.rngs["batch"])
        e = self.rngs["vae"].standard_normal(
            (cfg.minibatch, agent.vae.latent_dim)
        )
        vae_loss, recon, kl = agent.vae.update(S, A, e)
        agent.resample_noise()
        y = agent.compute_target(R, S2, D, self.rngs["cand"])
        losses = agent.critic_update(S, A, y, S2=S2)
        perturb_obj = agent.perturb_update(S, self.rngs["perturb"])
        agent.soft_update_targets()
        losses.update(vae=vae_loss, recon=recon, kl=kl, perturb=perturb_obj)
        return losses

    def train_epoch(self):
        sums = {}
        for _ in range(self.config.iters_per_epoch):
            for k, v in self.train_iteration().items():
                sums[k] = sums.get(k, 0.0) + v
        self.epoch += 1
        return {k: v / self.config.iters_per_epoch for k, v in sums.items()}

    def evaluate(self, episodes=None):
        """Greedy rollouts on a freshly seeded environment.

        The env and action streams are spawned (not drawn) from the eval
        stream, so evaluation conditions at epoch k are identical across
        variants regardless of how much randomness each consumed before.
        """
        episodes = self.config.eval_episodes if episodes is None else episodes
        env_rng, act_rng = self.rngs["eval"].spawn(2)
        env = make_env(self.ds.env_id, seed=env_rng, config=self.env_config)
        policy = lambda obs, rng: self.agent.select_action(
            obs, rng, explore=False
        )
        return evalkit.evaluate_policy(
            policy, env, episodes, act_rng, epoch=self.epoch, seed=self.seed
        )


DIAG_COLUMNS = (
    "epoch", "vae", "recon", "kl", "q1", "q2", "perturb", "risk", "anchor",
    "decrease_active",
)


def run_training(ds, config, seed, run_dir, env_config=None, progress=None):
    """Train one (variant, seed) run and write the run directory:
    config.json, per-epoch diagnostics.csv, metrics.csv and episodes.csv at
    every evaluation point, and checkpoints alongside them."""
    os.makedirs(run_dir, exist_ok=True)
    for name in ("metrics.csv", "episodes.csv", "diagnostics.csv"):
        path = os.path.join(run_dir, name)
        if os.path.exists(path):  # appended files: a rerun starts clean
            os.remove(path)
    trainer = Trainer(ds, config, seed, env_config=env_config)
    doc = {
        "env_id": ds.env_id,
        "seed": seed,
        "variant": config.variant,
        "train": config_to_json_dict(config),
        "env": config_to_dict(env_config) if env_config is not None else None,
        "dataset": ds.header(),
    }
    with open(os.path.join(run_dir, "config.json"), "w",
              encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)

    risk_window = []
    record = None
    for epoch in range(1, config.epochs + 1):
        diag = trainer.train_epoch()
        diag["epoch"] = epoch
        evalkit.append_csv_row(
            os.path.join(run_dir, "diagnostics.csv"), DIAG_COLUMNS,
            {c: diag.get(c) for c in DIAG_COLUMNS},
        )
        if config.lyapunov_on:
            risk_window.append(diag["risk"])
        if epoch % config.eval_every == 0:
            record = trainer.evaluate()
            risk = float(np.mean(risk_window)) if risk_window else None
            risk_window = []
            evalkit.append_eval_record(run_dir, record, config.variant, risk)
            save_agent(
                os.path.join(run_dir, f"checkpoint_{epoch:04d}.json"),
                trainer.agent, rngs=trainer.rngs, extra={"epoch": epoch},
            )
            if progress is not None:
                progress(epoch, record)
    save_agent(
        os.path.join(run_dir, "checkpoint_final.json"),
        trainer.agent, rngs=trainer.rngs, extra={"epoch": trainer.epoch},
    )
    return {
        "run_dir": run_dir,
        "variant": config.variant,
        "seed": seed,
        "epochs": trainer.epoch,
        "final_return": record.mean_return if record is not None else None,
        "final_success_rate": (record.success_rate if record is not None
                               else None),
    }


def resolve_run_dir(base, variant, seed):
    return os.path.join(base, f"{variant}_seed{seed}")
