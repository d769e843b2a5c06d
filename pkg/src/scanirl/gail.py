"""Adversarial reward and policy learning over DCB states.

Each iteration samples scanpaths from the current policy, updates the
discriminator on generated versus human state-action pairs, turns the
discriminator into per-step rewards ``log D``, and runs clipped policy
optimisation with a jointly trained critic.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .beliefs import pixel_to_cell
from .nets import ArchConfig, build_nets
from .searchenv import N_ACTIONS, SearchEnv, SearchTrial, cell_to_action, collect_episodes, ior_neighbourhood

log = logging.getLogger(__name__)

D_EPS = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    image_batch: int = 128
    pair_batch: int = 64
    gamma: float = 0.99
    gae_lambda: float = 0.96
    clip: float = 0.2
    ppo_epochs: int = 10
    lr: float = 0.0005
    entropy_weight: float = 0.01
    grad_penalty: float = 10.0
    scanpaths_per_image: int = 2
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "image_batch", "pair_batch", "ppo_epochs", "scanpaths_per_image"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.clip < 1:
            raise ValueError("clip must lie in (0, 1)")
        if self.lr < 0 or self.entropy_weight < 0 or self.grad_penalty < 0:
            raise ValueError("lr, entropy_weight and grad_penalty must be non-negative")
        if not (0 < self.gamma <= 1 and 0 <= self.gae_lambda <= 1):
            raise ValueError("gamma must lie in (0, 1] and gae_lambda in [0, 1]")


# --------------------------------------------------------------------------
# state-action pairs


@dataclass(frozen=True)
class StateActionPair:
    trial: SearchTrial
    history: tuple  # fixation cells preceding the action, start fixation first
    action: int
    source: str = "real"

    def __post_init__(self):
        if not 0 <= self.action < N_ACTIONS:
            raise ValueError(f"action {self.action} out of range")
        if len(self.history) > 6:
            raise ValueError("fixation history longer than the episode budget")


def expert_pairs(trial: SearchTrial, scanpaths, max_steps: int = 6) -> list[StateActionPair]:
    """Replay human scanpaths into (state, action) pairs at grid resolution."""
    out = []
    for sp in scanpaths:
        cells = [pixel_to_cell(x, y) for x, y in sp.xy]
        for k in range(1, min(len(cells), max_steps + 1)):
            out.append(StateActionPair(trial, tuple(cells[:k]), cell_to_action(cells[k]), "real"))
    return out


def pair_arrays(pairs, env: SearchEnv):
    obs = np.stack([env.observe(p.trial, list(p.history)) for p in pairs])
    tasks = np.array([p.trial.task_id for p in pairs])
    actions = np.array([p.action for p in pairs])
    return obs, tasks, actions


def allowed_mask(history) -> np.ndarray:
    """Cells still available after inhibiting the 3 x 3 patch of each fixation."""
    inh = np.zeros(N_ACTIONS, dtype=bool)
    for cell in history:
        inh |= ior_neighbourhood(cell_to_action(cell)).ravel()
    return ~inh


# --------------------------------------------------------------------------
# losses


def _clamp(d):
    return np.clip(d, D_EPS, 1.0 - D_EPS)


def discriminator_loss(disc, real, fake, grad_penalty: float):
    """Negated adversarial objective with an input-gradient penalty on real pairs.

    ``real`` and ``fake`` are ``(obs, tasks, actions)`` triples. Returns the
    loss, parameter gradients and a diagnostics dict.
    """
    (xr, tr, ar), (xf, tf, af) = real, fake
    if len(ar) == 0 or len(af) == 0:
        raise ValueError("discriminator_loss needs non-empty real and fake batches")
    nr, nf = len(ar), len(af)
    lr_, cr = disc.forward(xr, tr)
    lf_, cf = disc.forward(xf, tf)
    zr = lr_[np.arange(nr), ar]
    zf = lf_[np.arange(nf), af]
    dr, df = nc.sigmoid(zr), nc.sigmoid(zf)
    dr_c, df_c = _clamp(dr), _clamp(df)
    loss = -np.mean(np.log(dr_c)) - np.mean(np.log(1.0 - df_c))

    # d/dz of -log D = -(1 - D); of -log(1 - D) = D; zero where clamped
    gr = np.where(dr == dr_c, -(1.0 - dr), 0.0) / nr
    gf = np.where(df == df_c, df, 0.0) / nf
    dlr = np.zeros_like(lr_)
    dlr[np.arange(nr), ar] = gr
    dlf = np.zeros_like(lf_)
    dlf[np.arange(nf), af] = gf
    grads, _ = disc.backward(dlr, cr)
    gfake, _ = disc.backward(dlf, cf)
    for k in grads:
        grads[k] = grads[k] + gfake[k]

    penalty = 0.0
    if grad_penalty > 0:
        pen, gpen = disc.input_grad_penalty(xr, tr, ar, weights=np.full(nr, grad_penalty / nr), cache=cr)
        penalty = float(np.mean(pen))
        loss += grad_penalty * penalty
        for k in grads:
            grads[k] = grads[k] + gpen[k]
    acc = 0.5 * (np.mean(dr > 0.5) + np.mean(df < 0.5))
    return float(loss), grads, {"d_accuracy": float(acc), "penalty": penalty}


def reward(disc, obs, tasks, actions) -> np.ndarray:
    return np.log(_clamp(disc.prob(obs, tasks, actions)))


def reward_map(disc, obs, tasks) -> np.ndarray:
    return np.log(_clamp(disc.prob_map(obs, tasks)))


def gae_advantages(rewards, values, bootstrap: float = 0.0, gamma: float = 0.99, lam: float = 0.96):
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if r.shape != v.shape:
        raise ValueError(f"rewards ({r.shape}) and values ({v.shape}) differ in length")
    n = len(r)
    adv = np.zeros(n)
    nxt = np.append(v[1:], bootstrap)
    delta = r + gamma * nxt - v
    acc = 0.0
    for t in range(n - 1, -1, -1):
        acc = delta[t] + gamma * lam * acc
        adv[t] = acc
    return adv, adv + v


def normalize_advantages(adv):
    adv = np.asarray(adv, dtype=np.float64)
    if len(adv) < 2:
        return adv - adv.mean()
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def masked_entropy(logits, allowed):
    lp = nc.log_softmax(logits, allowed)
    p = np.exp(lp)
    plogp = np.where(allowed, p * np.where(allowed, lp, 0.0), 0.0)
    return -plogp.sum(axis=1), p, lp


def ppo_policy_loss(logits, allowed, actions, old_logp, adv, clip: float, entropy_weight: float):
    """Clipped surrogate plus entropy bonus; returns (loss, dloss/dlogits, info)."""
    if old_logp is None:
        raise ValueError("ppo_policy_loss needs the log-probabilities recorded at collection")
    n = len(actions)
    idx = np.arange(n)
    ent, p, lp = masked_entropy(logits, allowed)
    logp = lp[idx, actions]
    ratio = np.exp(logp - old_logp)
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    use_unclipped = surr1 <= surr2
    loss = -np.mean(np.minimum(surr1, surr2)) - entropy_weight * np.mean(ent)

    onehot = np.zeros_like(p)
    onehot[idx, actions] = 1.0
    coef = np.where(use_unclipped, -adv * ratio, 0.0) / n
    dlogits = coef[:, None] * (onehot - p)
    # dH/dz_i = -p_i (log p_i + H)
    dent = -p * (np.where(allowed, lp, 0.0) + ent[:, None])
    dlogits -= entropy_weight * dent / n
    clipfrac = float(np.mean(np.abs(ratio - 1.0) > clip))
    return float(loss), dlogits, {"entropy": float(np.mean(ent)), "clipfrac": clipfrac}


def value_loss(values, returns):
    loss, g = nc.smoothed_l1(values, returns)
    n = len(values)
    return float(np.mean(loss)), g / n


# --------------------------------------------------------------------------
# training


def chunked(fn, arrays, chunk: int = 128):
    n = len(arrays[0])
    outs = [fn(*(a[i:i + chunk] for a in arrays)) for i in range(0, n, chunk)]
    return np.concatenate(outs) if outs else np.zeros(0)


@dataclass
class EpisodeBatch:
    obs: np.ndarray
    tasks: np.ndarray
    actions: np.ndarray
    allowed: np.ndarray
    old_logp: np.ndarray
    rewards: np.ndarray = None
    values: np.ndarray = None
    advantages: np.ndarray = None
    returns: np.ndarray = None
    episode_slices: list = field(default_factory=list)

    def __len__(self):
        return len(self.actions)


def policy_sampler(policy):
    def fn(obs, tasks):
        return chunked(lambda o, t: policy.probs(o, t), (obs, tasks))
    return fn


def episodes_to_batch(episodes, policy) -> EpisodeBatch:
    obs, tasks, actions, allowed, slices = [], [], [], [], []
    pos = 0
    for ep in episodes:
        obs.extend(ep.obs)
        tasks.extend([ep.trial.task_id] * len(ep))
        actions.extend(ep.actions)
        allowed.extend(ep.masks)
        slices.append(slice(pos, pos + len(ep)))
        pos += len(ep)
    obs = np.stack(obs)
    tasks = np.array(tasks)
    actions = np.array(actions)
    allowed = np.stack(allowed)

    def logp_fn(o, t, a, m):
        logits, _ = policy.forward(o, t)
        return nc.log_softmax(logits, m)[np.arange(len(a)), a]

    old_logp = chunked(logp_fn, (obs, tasks, actions, allowed))
    return EpisodeBatch(obs, tasks, actions, allowed, old_logp, episode_slices=slices)


class IRLTrainer:
    """Owns the three networks and runs the adversarial training loop."""

    def __init__(self, train_set, config: TrainConfig | None = None, env: SearchEnv | None = None,
                 arch: ArchConfig | None = None, nets: dict | None = None):
        self.config = config or TrainConfig()
        self.env = env or SearchEnv()
        self.arch = arch or ArchConfig()
        self.train_set = list(train_set)  # (SearchTrial, [Scanpath]) pairs
        if not self.train_set:
            raise ValueError("empty training set")
        self.rng = np.random.default_rng(self.config.seed)
        in_ch = self.env.n_channels(self.train_set[0][0])
        self.nets = nets or build_nets(in_ch, np.random.default_rng([self.config.seed, 1]), self.arch)
        self.expert = {}
        for trial, sps in self.train_set:
            self.expert.setdefault(trial.task, []).extend(expert_pairs(trial, sps, self.env.max_steps))
        self.iteration = 0
        self.history = []

    @property
    def policy(self):
        return self.nets["policy"]

    @property
    def discriminator(self):
        return self.nets["discriminator"]

    @property
    def critic(self):
        return self.nets["critic"]

    def _sample_expert(self, tasks_in_batch, count):
        pool = []
        for t in sorted(tasks_in_batch):
            if not self.expert.get(t):
                raise ValueError(f"no expert state-action pairs for task {t!r}")
            pool.extend(self.expert[t])
        idx = self.rng.integers(0, len(pool), size=count)
        return [pool[i] for i in idx]

    def train_iteration(self, trials) -> dict:
        cfg = self.config
        pol, disc, crit = self.policy, self.discriminator, self.critic
        seed = int(self.rng.integers(2**31))
        episodes = collect_episodes(policy_sampler(pol), trials, cfg.scanpaths_per_image, "sample", seed,
                                    self.env, record=True)
        batch = episodes_to_batch(episodes, pol)
        n = len(batch)

        # discriminator: one pass over the generated pairs in minibatches
        order = self.rng.permutation(n)
        tasks_in_batch = {t.task for t in trials}
        d_losses, d_accs = [], []
        for i in range(0, n, cfg.pair_batch):
            fi = order[i:i + cfg.pair_batch]
            real = self._sample_expert(tasks_in_batch, len(fi))
            loss, grads, info = discriminator_loss(
                disc, pair_arrays(real, self.env), (batch.obs[fi], batch.tasks[fi], batch.actions[fi]),
                cfg.grad_penalty)
            disc.params.accumulate(grads)
            nc.adam_step(disc.params, cfg.lr)
            d_losses.append(loss)
            d_accs.append(info["d_accuracy"])

        batch.rewards = chunked(lambda o, t, a: reward(disc, o, t, a), (batch.obs, batch.tasks, batch.actions))
        batch.values = chunked(lambda o, t: crit.value(o, t), (batch.obs, batch.tasks))
        adv = np.zeros(n)
        ret = np.zeros(n)
        for sl in batch.episode_slices:
            adv[sl], ret[sl] = gae_advantages(batch.rewards[sl], batch.values[sl], 0.0, cfg.gamma, cfg.gae_lambda)
        batch.returns = ret
        batch.advantages = normalize_advantages(adv)

        ents, vlosses = [], []
        for _ in range(cfg.ppo_epochs):
            order = self.rng.permutation(n)
            for i in range(0, n, cfg.pair_batch):
                mb = order[i:i + cfg.pair_batch]
                logits, pc = pol.forward(batch.obs[mb], batch.tasks[mb])
                _, dlogits, info = ppo_policy_loss(
                    logits, batch.allowed[mb], batch.actions[mb], batch.old_logp[mb],
                    batch.advantages[mb], cfg.clip, cfg.entropy_weight)
                pg, _ = pol.backward(dlogits, pc)
                v, vc = crit.forward(batch.obs[mb], batch.tasks[mb])
                vl, dv = value_loss(v, batch.returns[mb])
                vg, _ = crit.backward(dv, vc)
                pol.params.accumulate(pg)
                crit.params.accumulate(vg)
                nc.adam_step(pol.params, cfg.lr)
                nc.adam_step(crit.params, cfg.lr)
                ents.append(info["entropy"])
                vlosses.append(vl)

        self.iteration += 1
        diag = {
            "iteration": self.iteration,
            "d_loss": float(np.mean(d_losses)),
            "d_accuracy": float(np.mean(d_accs)),
            "mean_reward": float(np.mean(batch.rewards)),
            "entropy": float(np.mean(ents)),
            "value_loss": float(np.mean(vlosses)),
            "n_pairs": n,
            "hit_rate": float(np.mean([e.hit for e in episodes])),
        }
        self.history.append(diag)
        log.info("iter %(iteration)d  D-loss %(d_loss).4f  D-acc %(d_accuracy).3f  reward %(mean_reward).4f  "
                 "H %(entropy).3f  V-loss %(value_loss).4f  hit %(hit_rate).3f", diag)
        return diag

    def train_epoch(self) -> list[dict]:
        trials = [t for t, _ in self.train_set]
        order = self.rng.permutation(len(trials))
        out = []
        for i in range(0, len(trials), self.config.image_batch):
            out.append(self.train_iteration([trials[j] for j in order[i:i + self.config.image_batch]]))
        return out

    def train(self, epochs: int | None = None, callback=None) -> list[dict]:
        for e in range(epochs if epochs is not None else self.config.epochs):
            diags = self.train_epoch()
            if callback is not None:
                callback(e, diags)
        return self.history


DIAG_COLUMNS = ("iteration", "d_loss", "d_accuracy", "mean_reward", "entropy", "value_loss")


def write_diagnostics(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DIAG_COLUMNS)
        for row in history:
            w.writerow([row["iteration"]] + [f"{row[c]:.6f}" for c in DIAG_COLUMNS[1:]])


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
