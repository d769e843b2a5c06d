"""Search episodes on the 20 x 32 action grid.

An episode starts with a fixation at the image centre, then takes up to six
more fixations, stopping early when a fixation lands in the target box.
Inhibition of return zeroes the 3 x 3 neighbourhood of every attended cell.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .beliefs import (
    CELL_PX,
    DEFAULT_RADIUS,
    GRID_H,
    GRID_W,
    IMG_H,
    IMG_W,
    BeliefStack,
    attach_auxiliary_channels,
    history_mask,
    pixel_to_cell,
    task_id,
)
from .records import Scanpath

log = logging.getLogger(__name__)

N_ACTIONS = GRID_H * GRID_W
MAX_STEPS = 6
START_XY = (IMG_W / 2.0, IMG_H / 2.0)
NORM_TOL = 1e-6


@dataclass(frozen=True)
class SearchTrial:
    image_id: str
    task: str
    bbox: tuple  # x, y, w, h in 320 x 512 pixels
    low: BeliefStack
    high: BeliefStack
    subject_id: str | None = None
    saliency: np.ndarray | None = None

    def __post_init__(self):
        x, y, w, h = self.bbox
        if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > IMG_W or y + h > IMG_H:
            raise ValueError(f"trial {self.image_id}: bbox {self.bbox} outside the {IMG_W}x{IMG_H} image")
        task_id(self.task)  # unknown task names fail here, not mid-rollout
        if self.task not in self.high.channel_names:
            raise ValueError(f"trial {self.image_id}: task {self.task!r} has no belief channel")

    @property
    def task_id(self) -> int:
        return task_id(self.task)

    @property
    def target_center(self) -> tuple[float, float]:
        x, y, w, h = self.bbox
        return (x + w / 2.0, y + h / 2.0)


def action_to_cell(a: int) -> tuple[int, int]:
    return divmod(int(a), GRID_W)


def cell_to_action(cell) -> int:
    r, c = cell
    return int(r) * GRID_W + int(c)


def action_to_pixel(a: int) -> tuple[float, float]:
    r, c = action_to_cell(a)
    return (c * CELL_PX + CELL_PX / 2.0, r * CELL_PX + CELL_PX / 2.0)


def pixel_to_action(x: float, y: float) -> int:
    return cell_to_action(pixel_to_cell(x, y))


def target_hit(xy, bbox) -> bool:
    x, y = xy
    bx, by, bw, bh = bbox
    return bool(bx <= x <= bx + bw and by <= y <= by + bh)


def target_cells(bbox) -> np.ndarray:
    """Boolean 20 x 32 map of cells whose centre falls inside the box."""
    xs = np.arange(GRID_W) * CELL_PX + CELL_PX / 2.0
    ys = np.arange(GRID_H) * CELL_PX + CELL_PX / 2.0
    bx, by, bw, bh = bbox
    inx = (xs >= bx) & (xs <= bx + bw)
    iny = (ys >= by) & (ys <= by + bh)
    return iny[:, None] & inx[None, :]


def ior_neighbourhood(a: int) -> np.ndarray:
    r, c = action_to_cell(a)
    m = np.zeros((GRID_H, GRID_W), dtype=bool)
    m[max(r - 1, 0):r + 2, max(c - 1, 0):c + 2] = True
    return m


def apply_ior(prob_map: np.ndarray, inhibited: np.ndarray) -> np.ndarray:
    """Zero inhibited cells and renormalise; works on a map or a batch of flat maps."""
    p = np.asarray(prob_map, dtype=np.float64)
    shape = p.shape
    flat = p.reshape(-1, N_ACTIONS)
    inh = np.broadcast_to(np.asarray(inhibited, dtype=bool).reshape(-1, N_ACTIONS), flat.shape)
    out = np.where(inh, 0.0, flat)
    tot = out.sum(axis=1)
    for i in np.nonzero(tot <= 0)[0]:
        free = ~inh[i]
        if free.any():
            out[i] = free / free.sum()
        else:
            log.warning("every cell inhibited; falling back to a uniform map")
            out[i] = 1.0 / N_ACTIONS
        tot[i] = 1.0
    return (out / tot[:, None]).reshape(shape)


@dataclass(frozen=True)
class SearchEnv:
    """How states are observed: mask radius, optional auxiliary channels, ablations."""

    radius: float = DEFAULT_RADIUS
    use_saliency: bool = False
    use_history: bool = False
    ablate: tuple = ()
    max_steps: int = MAX_STEPS

    def observe(self, trial: SearchTrial, cells) -> np.ndarray:
        m = history_mask(cells, self.radius) if cells else np.zeros((GRID_H, GRID_W), dtype=bool)
        chans = np.where(m[None], trial.high.channels, trial.low.channels)
        if self.ablate:
            idx = [trial.high.index(n) if isinstance(n, str) else int(n) for n in self.ablate]
            chans = chans.copy()
            chans[idx] = 0.0
        if self.use_saliency or self.use_history:
            st = trial.high.with_channels(chans)
            sal = None
            if self.use_saliency:
                sal = trial.saliency if trial.saliency is not None else np.zeros((GRID_H, GRID_W))
            st = attach_auxiliary_channels(st, sal, m.astype(np.float64) if self.use_history else None)
            chans = st.channels
        return chans

    def n_channels(self, trial: SearchTrial) -> int:
        return trial.high.n_channels + int(self.use_saliency) + int(self.use_history)

    def with_ablation(self, channels) -> "SearchEnv":
        return SearchEnv(self.radius, self.use_saliency, self.use_history, tuple(channels), self.max_steps)


@dataclass
class EpisodeState:
    trial: SearchTrial
    fixations: list = field(default_factory=list)  # pixel coordinates, start fixation first
    cells: list = field(default_factory=list)
    t: int = 0
    done: bool = False
    hit: bool = False
    inhibited: np.ndarray = field(default_factory=lambda: np.zeros((GRID_H, GRID_W), dtype=bool))


def reset(trial: SearchTrial) -> EpisodeState:
    st = EpisodeState(trial)
    st.fixations.append(START_XY)
    cell = pixel_to_cell(*START_XY)
    st.cells.append(cell)
    st.inhibited = ior_neighbourhood(cell_to_action(cell))
    st.hit = target_hit(START_XY, trial.bbox)
    st.done = st.hit
    return st


def step(state: EpisodeState, a: int, max_steps: int = MAX_STEPS) -> EpisodeState:
    if state.done:
        raise RuntimeError("step() called on a finished episode")
    if not 0 <= a < N_ACTIONS:
        raise ValueError(f"action {a} outside [0, {N_ACTIONS})")
    xy = action_to_pixel(a)
    state.fixations.append(xy)
    state.cells.append(action_to_cell(a))
    state.inhibited = state.inhibited | ior_neighbourhood(a)
    state.t += 1
    state.hit = target_hit(xy, state.trial.bbox)
    state.done = state.hit or state.t >= max_steps
    return state


@dataclass
class Episode:
    """One finished episode plus what training needs to replay it."""

    trial: SearchTrial
    trial_index: int
    cells: list
    actions: list
    masks: list  # allowed (non-inhibited) cells before each action
    obs: list  # DCB state before each action (only when recorded)
    hit: bool

    def scanpath(self, source: str = "model") -> Scanpath:
        xy = [START_XY] + [action_to_pixel(a) for a in self.actions]
        return Scanpath(np.array(xy), self.trial.image_id, self.trial.task, None, source)

    def __len__(self):
        return len(self.actions)


def episode_rng(seed: int, trial_index: int, k: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(trial_index), int(k)])


def collect_episodes(policy, trials, n_per_trial: int = 10, mode: str = "sample", seed: int = 0,
                     env: SearchEnv | None = None, record: bool = False) -> list[Episode]:
    """Run episodes in lock-step batches.

    ``policy(obs, task_ids)`` maps an N x C x 20 x 32 batch to N x 640 rows:
    probabilities in ``sample`` mode, scores to maximise in ``greedy`` mode.
    A policy with a ``reset(n)`` method is treated as recurrent: it is reset
    once per call and then receives the episode indices of the live rows as
    a third argument.
    """
    env = env or SearchEnv()
    if mode not in ("sample", "greedy"):
        raise ValueError(f"unknown rollout mode {mode!r}")
    if isinstance(trials, SearchTrial):
        trials = [trials]
    states, meta = [], []
    for ti, trial in enumerate(trials):
        for k in range(n_per_trial):
            states.append(reset(trial))
            meta.append((ti, episode_rng(seed, ti, k), [], [], []))
    recurrent = hasattr(policy, "reset")
    if recurrent:
        policy.reset(len(states))
    while True:
        live = [i for i, s in enumerate(states) if not s.done]
        if not live:
            break
        obs = np.stack([env.observe(states[i].trial, states[i].cells) for i in live])
        tids = np.array([states[i].trial.task_id for i in live])
        raw = policy(obs, tids, np.array(live)) if recurrent else policy(obs, tids)
        out = np.asarray(raw, dtype=np.float64).reshape(len(live), N_ACTIONS)
        inh = np.stack([states[i].inhibited.ravel() for i in live])
        if mode == "sample":
            sums = out.sum(axis=1)
            if np.any(np.abs(sums - 1.0) > NORM_TOL) or np.any(out < 0):
                raise ValueError("policy emitted an unnormalised probability map")
            probs = apply_ior(out, inh)
        for j, i in enumerate(live):
            _, rng, actions, masks, obs_list = meta[i]
            if mode == "sample":
                cdf = np.cumsum(probs[j])
                a = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
                a = min(a, N_ACTIONS - 1)
                while inh[j, a]:  # guards against float ties at zero-mass cells
                    a = (a + 1) % N_ACTIONS
            else:
                scores = np.where(inh[j], -np.inf, out[j])
                a = int(np.argmax(scores)) if np.isfinite(scores).any() else int(np.argmin(inh[j]))
            actions.append(a)
            masks.append(~inh[j].copy())
            if record:
                obs_list.append(obs[j])
            step(states[i], a, env.max_steps)
    episodes = []
    for s, (ti, _, actions, masks, obs_list) in zip(states, meta):
        episodes.append(Episode(s.trial, ti, list(s.cells), actions, masks, obs_list, s.hit))
    return episodes


def rollout(policy, trial, n_scanpaths: int = 10, mode: str = "sample", seed: int = 0,
            env: SearchEnv | None = None) -> list[Scanpath]:
    trials = [trial] if isinstance(trial, SearchTrial) else list(trial)
    eps = collect_episodes(policy, trials, n_scanpaths, mode, seed, env)
    return [e.scanpath() for e in eps]
