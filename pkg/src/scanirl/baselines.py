"""Comparison scanpath generators: random, map samplers, BC-CNN and BC-LSTM."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from . import numcore as nc
from .beliefs import GRID_H, GRID_W, pixel_to_cell
from .gail import expert_pairs, pair_arrays
from .nets import ArchConfig, NetworkSpec, PolicyNet, policy_spec
from .records import Scanpath
from .searchenv import (
    MAX_STEPS,
    N_ACTIONS,
    START_XY,
    SearchEnv,
    SearchTrial,
    action_to_pixel,
    cell_to_action,
    collect_episodes,
    ior_neighbourhood,
    target_hit,
)

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# random scanpath


def random_scanpath(human: dict, key, rng: np.random.Generator) -> Scanpath:
    """A human scanpath for the same task drawn uniformly from a different image.

    ``human`` maps (image, task) keys to lists of scanpaths.
    """
    image, task = key
    pool = [sp for (img, t), sps in sorted(human.items()) if t == task and img != image for sp in sps]
    if not pool:
        raise ValueError(f"task {task!r} has no scanpaths on any image other than {image!r}")
    return pool[int(rng.integers(len(pool)))]


def random_scanpaths(human: dict, keys, n: int, seed: int = 0) -> dict:
    out = {}
    for i, key in enumerate(keys):
        rng = np.random.default_rng([seed, i])
        out[key] = [random_scanpath(human, key, rng) for _ in range(n)]
    return out


# --------------------------------------------------------------------------
# static priority maps


def _normalised(prio: np.ndarray) -> np.ndarray:
    m = np.asarray(prio, dtype=np.float64)
    if m.shape not in ((GRID_H, GRID_W), (N_ACTIONS,)):
        raise ValueError(f"priority map must be {GRID_H}x{GRID_W}, got {m.shape}")
    if not np.all(np.isfinite(m)) or np.any(m < 0):
        raise ValueError("priority map must be finite and nonnegative")
    tot = m.sum()
    if tot <= 0:
        raise ValueError("degenerate priority map: all cells are zero")
    return (m / tot).ravel()


def map_sampler(prio: np.ndarray, n_scanpaths: int, max_len: int = MAX_STEPS, seed: int = 0,
                bbox=None, image_id: str = "", task: str = "") -> list[Scanpath]:
    """Sample fixations from a fixed map with inhibition of return between steps.

    Scanpaths start at the image centre and, when ``bbox`` is given, stop at
    the first fixation inside it. If every remaining cell with mass is
    inhibited, the remaining free cells are sampled uniformly.
    """
    p0 = _normalised(prio)
    out = []
    for k in range(n_scanpaths):
        rng = np.random.default_rng([seed, k])
        inh = ior_neighbourhood(cell_to_action(pixel_to_cell(*START_XY))).ravel()
        xy = [START_XY]
        for _ in range(max_len):
            p = np.where(inh, 0.0, p0)
            if p.sum() <= 0:
                p = (~inh).astype(float)
            a = int(rng.choice(N_ACTIONS, p=p / p.sum()))
            inh |= ior_neighbourhood(a).ravel()
            xy.append(action_to_pixel(a))
            if bbox is not None and target_hit(xy[-1], bbox):
                break
        out.append(Scanpath(np.array(xy), image_id, task, None, "model"))
    return out


def detector_map(trial: SearchTrial) -> np.ndarray:
    """Target-category confidence from the high-resolution belief stack."""
    try:
        return trial.high.channels[trial.high.index(trial.task)].copy()
    except KeyError:
        raise KeyError(f"trial {trial.image_id}: no belief channel for target {trial.task!r}") from None


def fdm_estimate(scanpaths, sigma_cells: float = 1.0, include_initial: bool = False) -> np.ndarray:
    """Gaussian kernel density of fixations over the grid, normalised to sum 1."""
    counts = np.zeros((GRID_H, GRID_W))
    for sp in scanpaths:
        pts = sp.xy if include_initial else sp.xy[1:]
        for x, y in pts:
            r, c = pixel_to_cell(x, y)
            counts[r, c] += 1
    if counts.sum() == 0:
        raise ValueError("fdm_estimate needs at least one fixation")
    dens = gaussian_filter(counts, sigma_cells, mode="constant") if sigma_cells > 0 else counts
    return dens / dens.sum()


def fdm_by_task(human: dict, sigma_cells: float = 1.0) -> dict:
    by_task = {}
    for (_, task), sps in human.items():
        by_task.setdefault(task, []).extend(sps)
    return {t: fdm_estimate(sps, sigma_cells) for t, sps in by_task.items()}


# --------------------------------------------------------------------------
# behaviour cloning with the policy architecture


@dataclass(frozen=True)
class BCConfig:
    epochs: int = 20
    batch: int = 64
    lr: float = 0.0005
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch < 1 or self.lr < 0:
            raise ValueError("BCConfig: epochs >= 0, batch >= 1 and lr >= 0 required")


def delta_targets(actions: np.ndarray) -> np.ndarray:
    t = np.zeros((len(actions), N_ACTIONS))
    t[np.arange(len(actions)), actions] = 1.0
    return t


def bc_cnn_train(train_set, config: BCConfig | None = None, env: SearchEnv | None = None,
                 arch: ArchConfig | None = None, policy: PolicyNet | None = None, callback=None):
    """Fit the policy network to expert next-fixation cells by KL to a delta map.

    Returns ``(policy, epoch_losses)``.
    """
    cfg = config or BCConfig()
    env = env or SearchEnv()
    arch = arch or ArchConfig()
    pairs = [p for trial, sps in train_set for p in expert_pairs(trial, sps, env.max_steps)]
    if not pairs:
        raise ValueError("no expert state-action pairs to clone")
    obs, tasks, actions = pair_arrays(pairs, env)
    if policy is None:
        spec = arch.specs(obs.shape[1])["policy"]
        policy = PolicyNet(spec, np.random.default_rng([cfg.seed, 1]), dtype=arch.compute_dtype)
    rng = np.random.default_rng([cfg.seed, 2])
    losses = []
    for ep in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        tot = 0.0
        for i in range(0, len(order), cfg.batch):
            mb = order[i:i + cfg.batch]
            logits, cache = policy.forward(obs[mb], tasks[mb])
            loss, dlog = nc.kl_logits_grad(logits, delta_targets(actions[mb]))
            g, _ = policy.backward(dlog / len(mb), cache)
            policy.params.accumulate(g)
            nc.adam_step(policy.params, cfg.lr)
            tot += float(loss.sum())
        losses.append(tot / len(pairs))
        log.info("bc-cnn epoch %d  loss %.4f", ep + 1, losses[-1])
        if callback is not None:
            callback(ep, losses[-1])
    return policy, losses


def bc_loss(policy: PolicyNet, obs, tasks, actions) -> float:
    logits, _ = policy.forward(obs, tasks)
    loss, _ = nc.kl_logits_grad(logits, delta_targets(actions))
    return float(loss.mean())


# --------------------------------------------------------------------------
# convolutional LSTM


def _sig(x):
    return nc.sigmoid(x)


@dataclass
class ConvLSTMCell:
    """Gated convolutional recurrence over C x 20 x 32 maps.

    Gates (input, forget, output, candidate) come from one 3 x 3 convolution
    of the concatenated input and hidden maps.
    """

    in_channels: int
    hidden: int
    params: nc.ParamSet
    kernel: int = 3

    @classmethod
    def create(cls, in_channels: int, hidden: int, rng: np.random.Generator, kernel: int = 3):
        ps = nc.ParamSet()
        cin = in_channels + hidden
        ps.add("lstm.w", nc.glorot_uniform(rng, (4 * hidden, cin, kernel, kernel), cin * kernel * kernel,
                                           4 * hidden * kernel * kernel))
        ps.add("lstm.b", np.zeros(4 * hidden))
        return cls(in_channels, hidden, ps, kernel)

    def zero_state(self, n: int):
        z = np.zeros((n, self.hidden, GRID_H, GRID_W))
        return z, z.copy()

    def step(self, x, state):
        """One update; returns (h', c') and a cache for :meth:`step_backward`."""
        h, c = state
        if x.shape[1] != self.in_channels or h.shape[1] != self.hidden:
            raise nc.ShapeError(f"ConvLSTM expects {self.in_channels} input / {self.hidden} hidden channels, "
                                f"got {x.shape[1]} / {h.shape[1]}")
        xh = np.concatenate([x, h], axis=1)
        z, zc = nc.conv2d_forward(xh, self.params["lstm.w"], self.params["lstm.b"], self.kernel // 2)
        k = self.hidden
        i, f, o = _sig(z[:, :k]), _sig(z[:, k:2 * k]), _sig(z[:, 2 * k:3 * k])
        g = np.tanh(z[:, 3 * k:])
        c2 = f * c + i * g
        tc = np.tanh(c2)
        h2 = o * tc
        return (h2, c2), (zc, i, f, o, g, c, tc)

    def step_backward(self, dh2, dc2, cache):
        """Gradients through one step: returns (dx, dh, dc, param grads)."""
        zc, i, f, o, g, c, tc = cache
        do = dh2 * tc
        dc = dc2 + dh2 * o * (1.0 - tc * tc)
        di, df, dg = dc * g, dc * c, dc * i
        dc_prev = dc * f
        dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)], axis=1)
        dxh, dw, db = nc.conv2d_backward(dz, zc, need_dx=True)
        dx, dh = dxh[:, :self.in_channels], dxh[:, self.in_channels:]
        return dx, dh, dc_prev, {"lstm.w": dw, "lstm.b": db}


def convlstm_step(cell: ConvLSTMCell, state, x):
    return cell.step(x, state)[0]


@dataclass
class BCLSTM:
    cell: ConvLSTMCell
    head: PolicyNet

    @classmethod
    def create(cls, in_channels: int, rng, hidden: int | None = None, widths=(128, 64, 32), dtype="float64"):
        hidden = in_channels if hidden is None else hidden
        cell = ConvLSTMCell.create(in_channels, hidden, rng)
        head = PolicyNet(policy_spec(hidden, widths), rng, dtype=dtype)
        return cls(cell, head)

    # recurrent policy protocol for collect_episodes
    def reset(self, n: int):
        self._h, self._c = self.cell.zero_state(n)

    def __call__(self, obs, tasks, idx):
        (h, c), _ = self.cell.step(obs, (self._h[idx], self._c[idx]))
        self._h[idx], self._c[idx] = h, c
        logits, _ = self.head.forward(h, tasks)
        return np.exp(nc.log_softmax(logits))


def save_bclstm(model: BCLSTM, path, extra: dict | None = None) -> None:
    tensors = {f"cell/{k}": v for k, v in model.cell.params.params.items()}
    tensors.update({f"head/{k}": v for k, v in model.head.params.params.items()})
    meta = {"kind": "bc-lstm", "in_channels": model.cell.in_channels, "hidden": model.cell.hidden,
            "head_spec": model.head.spec.to_dict(), "compute_dtype": model.head.dtype.name}
    meta.update(extra or {})
    nc.save_params(path, tensors, meta)


def load_bclstm(path) -> BCLSTM:
    tensors, meta = nc.load_params(path)
    if meta.get("kind") != "bc-lstm":
        raise ValueError(f"{path}: not a BC-LSTM checkpoint")
    cell = ConvLSTMCell.create(meta["in_channels"], meta["hidden"], np.random.default_rng(0))
    head = PolicyNet(NetworkSpec.from_dict(meta["head_spec"]), np.random.default_rng(0),
                     dtype=meta.get("compute_dtype", "float64"))
    for name, arr in tensors.items():
        part, key = name.split("/", 1)
        target = (cell if part == "cell" else head).params.params
        if key not in target or target[key].shape != arr.shape:
            raise ValueError(f"{path}: tensor {name!r} does not fit the stored architecture")
        target[key][...] = arr
    return BCLSTM(cell, head)


def _sequences(train_set, env: SearchEnv):
    """Per human scanpath: observation sequence, task id and next-cell actions."""
    seqs = []
    for trial, sps in train_set:
        for sp in sps:
            cells = [pixel_to_cell(x, y) for x, y in sp.xy][:env.max_steps + 1]
            if len(cells) < 2:
                continue
            obs = np.stack([env.observe(trial, cells[:k]) for k in range(1, len(cells))])
            acts = np.array([cell_to_action(c) for c in cells[1:]])
            seqs.append((obs, trial.task_id, acts))
    return seqs


def bc_lstm_train(train_set, config: BCConfig | None = None, env: SearchEnv | None = None,
                  arch: ArchConfig | None = None, hidden: int | None = None, callback=None):
    """Behaviour cloning with a ConvLSTM belief update and the policy head on its hidden state."""
    cfg = config or BCConfig()
    env = env or SearchEnv()
    arch = arch or ArchConfig()
    seqs = _sequences(train_set, env)
    if not seqs:
        raise ValueError("no human scanpaths with at least one post-initial fixation")
    in_ch = seqs[0][0].shape[1]
    model = BCLSTM.create(in_ch, np.random.default_rng([cfg.seed, 1]), hidden, arch.policy_widths, arch.compute_dtype)
    rng = np.random.default_rng([cfg.seed, 2])
    T = max(len(s[2]) for s in seqs)
    losses = []
    for ep in range(cfg.epochs):
        order = rng.permutation(len(seqs))
        tot, count = 0.0, 0
        for i in range(0, len(order), cfg.batch):
            mb = [seqs[j] for j in order[i:i + cfg.batch]]
            n = len(mb)
            lens = np.array([len(s[2]) for s in mb])
            x = np.zeros((T, n) + mb[0][0].shape[1:])
            acts = np.zeros((T, n), dtype=int)
            for b, (o, _, a) in enumerate(mb):
                x[:len(a), b] = o
                acts[:len(a), b] = a
            tasks = np.array([s[1] for s in mb])
            state = model.cell.zero_state(n)
            caches, hcaches, dlogits = [], [], []
            for t in range(T):
                state, cc = model.cell.step(x[t], state)
                logits, hc = model.head.forward(state[0], tasks)
                alive = (lens > t).astype(float)
                loss, dl = nc.kl_logits_grad(logits, delta_targets(acts[t]))
                tot += float((loss * alive).sum())
                caches.append(cc)
                hcaches.append(hc)
                dlogits.append(dl * alive[:, None] / lens.sum())
            count += int(lens.sum())
            dh = np.zeros_like(state[0])
            dc = np.zeros_like(state[1])
            for t in range(T - 1, -1, -1):
                g_head, dh_head = model.head.backward(dlogits[t], hcaches[t], need_dx=True)
                model.head.params.accumulate(g_head)
                _, dh, dc, g_cell = model.cell.step_backward(dh + dh_head, dc, caches[t])
                model.cell.params.accumulate(g_cell)
            nc.adam_step(model.head.params, cfg.lr)
            nc.adam_step(model.cell.params, cfg.lr)
        losses.append(tot / max(count, 1))
        log.info("bc-lstm epoch %d  loss %.4f", ep + 1, losses[-1])
        if callback is not None:
            callback(ep, losses[-1])
    return model, losses


def generate_baseline(kind: str, trials, n: int, seed: int = 0, human: dict | None = None,
                      model=None, env: SearchEnv | None = None, mode: str = "sample",
                      sigma_cells: float = 1.0) -> dict:
    """Scanpaths per (image, task) for one of: random, detector, heuristic, bc-cnn, bc-lstm."""
    env = env or SearchEnv()
    keys = [(t.image_id, t.task) for t in trials]
    if kind == "random":
        if human is None:
            raise ValueError("random baseline needs human scanpaths")
        return random_scanpaths(human, keys, n, seed)
    if kind in ("detector", "heuristic"):
        fdm = fdm_by_task(human, sigma_cells) if kind == "heuristic" else None
        out = {}
        for i, t in enumerate(trials):
            prio = detector_map(t) if kind == "detector" else fdm[t.task]
            out[(t.image_id, t.task)] = map_sampler(prio, n, env.max_steps, seed + i, t.bbox, t.image_id, t.task)
        return out
    if kind == "bc-cnn":
        from .gail import policy_sampler

        pol = policy_sampler(model) if mode == "sample" else (lambda o, tk: model.forward(o, tk)[0])
        eps = collect_episodes(pol, trials, n, mode, seed, env)
    elif kind == "bc-lstm":
        eps = collect_episodes(model, trials, n, "sample", seed, env)
    else:
        raise ValueError(f"unknown baseline {kind!r}")
    out = {}
    for e in eps:
        out.setdefault((e.trial.image_id, e.trial.task), []).append(e.scanpath())
    return out
