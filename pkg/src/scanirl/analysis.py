"""Reward maps, context effects and maps, data-efficiency and subject studies."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .baselines import BCConfig, bc_cnn_train
from .beliefs import GRID_H, GRID_W, pixel_to_cell
from .gail import IRLTrainer, TrainConfig, policy_sampler, reward_map as _reward_rows
from .metrics import DEFAULT_BANDWIDTH, MetricReport, evaluate, tfp_auc, tfp_curve
from .nets import ArchConfig
from .searchenv import START_XY, SearchEnv, SearchTrial, collect_episodes

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# rollouts grouped by trial


def group_episodes(episodes) -> dict:
    out = {}
    for e in episodes:
        out.setdefault((e.trial.image_id, e.trial.task), []).append(e.scanpath())
    return out


def policy_scanpaths(policy, trials, n: int = 10, seed: int = 0, env: SearchEnv | None = None,
                     mode: str = "sample") -> dict:
    if mode == "sample":
        fn = policy_sampler(policy)
    elif mode == "greedy":
        fn = lambda o, t: policy.forward(o, t)[0]  # noqa: E731
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return group_episodes(collect_episodes(fn, trials, n, mode, seed, env))


def greedy_reward_scanpaths(disc, trials, n: int = 10, seed: int = 0, env: SearchEnv | None = None) -> dict:
    """Each fixation maximises the immediate reward log D(S, a) over allowed cells."""
    fn = lambda o, t: disc.forward(o, t)[0]  # noqa: E731  (log D is monotone in the logit)
    return group_episodes(collect_episodes(fn, trials, n, "greedy", seed, env))


def bboxes_of(trials) -> dict:
    return {(t.image_id, t.task): t.bbox for t in trials}


# --------------------------------------------------------------------------
# reward maps


def initial_state(trial: SearchTrial, env: SearchEnv | None = None) -> np.ndarray:
    env = env or SearchEnv()
    return env.observe(trial, [pixel_to_cell(*START_XY)])


def reward_map(trial: SearchTrial, disc, env: SearchEnv | None = None) -> np.ndarray:
    """log D(S_0, a) for every cell a of the initial state."""
    obs = initial_state(trial, env)[None]
    return _reward_rows(disc, obs, np.array([trial.task_id]))[0].reshape(GRID_H, GRID_W)


# --------------------------------------------------------------------------
# context


@dataclass(frozen=True)
class ContextEffect:
    category: str
    task: str
    delta: float
    auc_intact: float
    auc_ablated: float
    n_trials: int


def _auc(policy, trials, n, seed, env):
    eps = collect_episodes(policy_sampler(policy), trials, n, "sample", seed, env)
    return tfp_auc(tfp_curve((e.scanpath(), e.trial.bbox) for e in eps))


def context_effect(category: str, task: str, trials, policy, env: SearchEnv | None = None,
                   n_scanpaths: int = 10, seed: int = 0) -> ContextEffect:
    """TFP-AUC with the category's belief map present minus with it zeroed.

    Both runs share the rollout seeds, so the ablation is the only difference.
    """
    env = env or SearchEnv()
    trials = [t for t in trials if t.task == task]
    if not trials:
        raise ValueError(f"no test trials for task {task!r}")
    if category not in trials[0].high.channel_names:
        raise KeyError(f"unknown category {category!r}")
    intact = _auc(policy, trials, n_scanpaths, seed, env)
    ablated = _auc(policy, trials, n_scanpaths, seed, env.with_ablation(tuple(env.ablate) + (category,)))
    return ContextEffect(category, task, intact - ablated, intact, ablated, len(trials))


def context_map(trial: SearchTrial, category: str, policy, env: SearchEnv | None = None) -> np.ndarray:
    """Initial-state policy map with the category present minus with it ablated.

    Positive cells are probability the category's presence pulls in.
    """
    env = env or SearchEnv()
    s = initial_state(trial, env)[None]
    s_abl = initial_state(trial, env.with_ablation(tuple(env.ablate) + (category,)))[None]
    t = np.array([trial.task_id])
    return (policy.probs(s, t) - policy.probs(s_abl, t))[0].reshape(GRID_H, GRID_W)


def write_context_csv(path, effects) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["category", "task", "delta_tfp_auc", "tfp_auc_intact", "tfp_auc_ablated", "n_trials"])
        for e in effects:
            w.writerow([e.category, e.task, f"{e.delta:.6f}", f"{e.auc_intact:.6f}", f"{e.auc_ablated:.6f}", e.n_trials])


# --------------------------------------------------------------------------
# heatmaps


def write_map_csv(path, m: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.asarray(m), delimiter=",", fmt="%.8g")


def _colour(m: np.ndarray, signed: bool) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    rgb = np.zeros(m.shape + (3,))
    if signed:
        s = np.abs(m).max() or 1.0
        v = m / s
        rgb[..., 0] = np.where(v > 0, 1.0, 1.0 + v)
        rgb[..., 1] = 1.0 - np.abs(v)
        rgb[..., 2] = np.where(v < 0, 1.0, 1.0 - v)
    else:
        lo, hi = m.min(), m.max()
        v = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
        rgb[..., 0] = np.clip(3 * v, 0, 1)
        rgb[..., 1] = np.clip(3 * v - 1, 0, 1)
        rgb[..., 2] = np.clip(3 * v - 2, 0, 1)
    return (rgb * 255).round().astype(np.uint8)


def write_ppm(path, m: np.ndarray, scale: int = 16, signed: bool = False) -> None:
    """Binary PPM heatmap; ``signed`` uses blue-white-red around zero."""
    img = _colour(m, signed)
    img = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def emit_map(out_dir, analysis: str, name: str, m: np.ndarray, signed: bool = False) -> None:
    out = Path(out_dir)
    write_map_csv(out / "reports" / analysis / f"{name}.csv", m)
    write_ppm(out / "maps" / analysis / f"{name}.ppm", m, signed=signed)


# --------------------------------------------------------------------------
# training helpers shared by the sweeps


@dataclass(frozen=True)
class StudyConfig:
    train: TrainConfig = TrainConfig()
    bc: BCConfig = BCConfig()
    arch: ArchConfig = ArchConfig()
    n_eval: int = 10
    bandwidth: float = DEFAULT_BANDWIDTH
    seed: int = 0


def train_method(method: str, train_set, study: StudyConfig, env: SearchEnv, seed: int):
    if method == "irl":
        cfg = TrainConfig(**{**study.train.__dict__, "seed": seed})
        tr = IRLTrainer(train_set, cfg, env, study.arch)
        tr.train()
        return tr.policy
    if method == "bc_cnn":
        cfg = BCConfig(**{**study.bc.__dict__, "seed": seed})
        pol, _ = bc_cnn_train(train_set, cfg, env, study.arch)
        return pol
    raise ValueError(f"unknown trainer {method!r}; expected irl or bc_cnn")


def evaluate_policy(policy, test_set, study: StudyConfig, env: SearchEnv, name: str) -> MetricReport:
    trials = [t for t, _ in test_set]
    gen = policy_scanpaths(policy, trials, study.n_eval, study.seed + 7919, env)
    human = {(t.image_id, t.task): sps for t, sps in test_set}
    return evaluate(gen, human, bboxes_of(trials), name, study.bandwidth)


def data_efficiency_sweep(dataset, split, ipcs=(5, 10, 20), methods=("irl", "bc_cnn"),
                          study: StudyConfig | None = None, env: SearchEnv | None = None) -> list:
    """Train each method on seeded ``ipc``-per-category subsets; evaluate on the test split."""
    from .dataio import subsample_ipc

    study = study or StudyConfig()
    env = env or SearchEnv()
    test_set = dataset.training_pairs(images=set(split.ids("test")))
    out = []
    for ipc in ipcs:
        ids = subsample_ipc(split, ipc, study.seed)
        train_set = dataset.training_pairs(images=set(ids))
        for method in methods:
            pol = train_method(method, train_set, study, env, study.seed)
            rep = evaluate_policy(pol, test_set, study, env, f"{method}@{ipc}ipc")
            log.info("sweep %s ipc=%d  TFP-AUC %.3f", method, ipc, rep.tfp_auc)
            out.append((method, ipc, rep))
    return out


def loso_harness(dataset, split, subject: str, methods=("irl",), study: StudyConfig | None = None,
                 env: SearchEnv | None = None) -> list:
    """Group model (other subjects) vs individual model (held-out subject), scored on the held-out subject."""
    study = study or StudyConfig()
    env = env or SearchEnv()
    subjects = dataset.subjects()
    if len(subjects) < 2:
        raise ValueError("leave-one-subject-out needs at least two subjects")
    if subject not in subjects:
        raise KeyError(f"unknown subject {subject!r}")
    others = [s for s in subjects if s != subject]
    train_ids = set(split.ids("train"))
    group = dataset.training_pairs(images=train_ids, subjects=set(others))
    indiv = dataset.training_pairs(images=train_ids, subjects={subject})
    assert all(sp.subject != subject for _, sps in group for sp in sps)
    test_set = dataset.training_pairs(images=set(split.ids("test")), subjects={subject})
    out = []
    for method in methods:
        for kind, train_set in (("group", group), ("individual", indiv)):
            pol = train_method(method, train_set, study, env, study.seed)
            out.append((method, kind, evaluate_policy(pol, test_set, study, env, f"{method}-{kind}-{subject}")))
    return out


def generation_mode_compare(policy, disc, test_set, n: int = 10, seed: int = 0, env: SearchEnv | None = None,
                            bandwidth: float = DEFAULT_BANDWIDTH) -> tuple[MetricReport, MetricReport]:
    """Policy sampling (total reward) versus greedy immediate-reward fixations."""
    env = env or SearchEnv()
    trials = [t for t, _ in test_set]
    human = {(t.image_id, t.task): sps for t, sps in test_set}
    boxes = bboxes_of(trials)
    sampled = policy_scanpaths(policy, trials, n, seed, env)
    greedy = greedy_reward_scanpaths(disc, trials, n, seed, env)
    return (evaluate(sampled, human, boxes, "total-reward", bandwidth),
            evaluate(greedy, human, boxes, "immediate-reward", bandwidth))


def mean_inside_outside(m: np.ndarray, trial: SearchTrial) -> tuple[float, float]:
    from .searchenv import target_cells

    inside = target_cells(trial.bbox)
    return float(m[inside].mean()), float(m[~inside].mean())


__all__ = [
    "ContextEffect", "StudyConfig", "bboxes_of", "context_effect", "context_map", "data_efficiency_sweep",
    "emit_map", "generation_mode_compare", "greedy_reward_scanpaths", "loso_harness", "mean_inside_outside",
    "policy_scanpaths", "reward_map", "write_context_csv", "write_map_csv", "write_ppm",
]
