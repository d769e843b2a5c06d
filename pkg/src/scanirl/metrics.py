"""Scanpath evaluation: target-fixation curves, efficiency, and similarity."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .beliefs import IMG_H, IMG_W
from .records import Scanpath
from .searchenv import MAX_STEPS, target_hit

DEFAULT_BANDWIDTH = 64.0
SCREEN = (IMG_W, IMG_H)

REPORT_COLUMNS = (
    "model", "tfp_auc", "prob_mismatch", "scanpath_ratio", "sequence_score",
    "mm_shape", "mm_direction", "mm_length", "mm_position", "n_trials", "bandwidth",
)


# --------------------------------------------------------------------------
# target fixation probability


def first_hit(scanpath: Scanpath, bbox) -> int | None:
    """Index of the first fixation inside the box, or None."""
    for i, xy in enumerate(scanpath.xy):
        if target_hit(xy, bbox):
            return i
    return None


def tfp_curve(pairs, max_steps: int = MAX_STEPS) -> np.ndarray:
    """Cumulative fraction of scanpaths that have hit the target by fixation n = 0..max_steps.

    ``pairs`` is an iterable of (scanpath, bbox). Index 0 is the start fixation.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("tfp_curve needs at least one scanpath")
    counts = np.zeros(max_steps + 1)
    for sp, bbox in pairs:
        k = first_hit(sp, bbox)
        if k is not None and k <= max_steps:
            counts[k:] += 1
    return counts / len(pairs)


def tfp_auc(curve) -> float:
    curve = np.asarray(curve, dtype=np.float64)
    return float(curve[1:].sum())


def probability_mismatch(model_curve, human_curve) -> float:
    a = np.asarray(model_curve, dtype=np.float64)
    b = np.asarray(human_curve, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"curve lengths differ: {a.shape} vs {b.shape}")
    return float(np.abs(a[1:] - b[1:]).sum())


def scanpath_ratio(scanpath: Scanpath, bbox) -> float | None:
    """Straight-line distance to the target centre over travelled distance; None if never hit."""
    k = first_hit(scanpath, bbox)
    if k is None:
        return None
    x, y, w, h = bbox
    centre = np.array([x + w / 2.0, y + h / 2.0])
    xy = scanpath.xy[:k + 1]
    travelled = float(np.linalg.norm(np.diff(xy, axis=0), axis=1).sum())
    if travelled == 0.0:
        return 1.0
    return float(np.linalg.norm(xy[0] - centre) / travelled)


# --------------------------------------------------------------------------
# sequence score


def mean_shift_modes(points: np.ndarray, bandwidth: float, max_iter: int = 300, tol: float = 1e-7):
    """Flat-kernel mean shift started from every point; returns the converged seed positions."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    modes = pts.copy()
    for s in range(len(pts)):
        m = pts[s]
        for _ in range(max_iter):
            near = np.linalg.norm(pts - m, axis=1) <= bandwidth
            new = pts[near].mean(axis=0)
            if np.linalg.norm(new - m) <= tol * max(bandwidth, 1.0):
                m = new
                break
            m = new
        modes[s] = m
    return modes


def cluster_fixations(fix_a, fix_b=None, bandwidth: float = DEFAULT_BANDWIDTH) -> tuple[np.ndarray, np.ndarray]:
    """Mean-shift cluster labels for the union of two fixation sets.

    Converged seeds closer than the bandwidth to an already accepted centre
    are merged into it; seeds are visited by descending support, ties broken
    by lowest seed index. Each fixation then takes the label of its nearest
    centre.
    """
    a = np.asarray(fix_a, dtype=np.float64).reshape(-1, 2)
    b = np.zeros((0, 2)) if fix_b is None else np.asarray(fix_b, dtype=np.float64).reshape(-1, 2)
    pts = np.concatenate([a, b])
    if len(pts) == 0:
        raise ValueError("cluster_fixations needs at least one fixation")
    modes = mean_shift_modes(pts, bandwidth)
    support = np.array([(np.linalg.norm(pts - m, axis=1) <= bandwidth).sum() for m in modes])
    order = sorted(range(len(modes)), key=lambda i: (-support[i], i))
    centres = []
    for i in order:
        if all(np.linalg.norm(modes[i] - c) >= bandwidth for c in centres):
            centres.append(modes[i])
    centres = np.array(centres)
    d = np.linalg.norm(pts[:, None, :] - centres[None], axis=2)
    labels = d.argmin(axis=1)
    return labels[:len(a)], labels[len(a):]


def needleman_wunsch(seq_a, seq_b, match: float = 1.0, mismatch: float = 0.0, gap: float = 0.0) -> float:
    """Global alignment score; with the default scores it is the longest common subsequence."""
    n, m = len(seq_a), len(seq_b)
    f = np.zeros((n + 1, m + 1))
    f[:, 0] = gap * np.arange(n + 1)
    f[0, :] = gap * np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            s = match if seq_a[i - 1] == seq_b[j - 1] else mismatch
            f[i, j] = max(f[i - 1, j - 1] + s, f[i - 1, j] + gap, f[i, j - 1] + gap)
    return float(f[n, m])


def _behavioural(sp: Scanpath, include_initial: bool) -> np.ndarray:
    return sp.xy if include_initial else sp.xy[1:]


def sequence_score(s1: Scanpath, s2: Scanpath, bandwidth: float = DEFAULT_BANDWIDTH,
                   include_initial: bool = False) -> float:
    a, b = _behavioural(s1, include_initial), _behavioural(s2, include_initial)
    if len(a) == 0 and len(b) == 0:
        return 1.0
    if len(a) == 0 or len(b) == 0:
        return 0.0
    la, lb = cluster_fixations(a, b, bandwidth)
    return needleman_wunsch(list(la), list(lb)) / max(len(a), len(b))


# --------------------------------------------------------------------------
# MultiMatch


@dataclass(frozen=True)
class MultiMatch:
    shape: float | None
    direction: float | None
    length: float | None
    position: float

    def as_tuple(self):
        return (self.shape, self.direction, self.length, self.position)


def _dp_alignment(cost: np.ndarray) -> list[tuple[int, int]]:
    """Cheapest monotone path from (0, 0) to (n-1, m-1) through a cost matrix.

    Moves go right, down or diagonally; the path cost is the sum of visited
    cells. Ties prefer the diagonal, then down, then right.
    """
    n, m = cost.shape
    acc = np.full((n, m), np.inf)
    acc[0, 0] = cost[0, 0]
    back = np.zeros((n, m), dtype=int)
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            cands = []
            if i > 0 and j > 0:
                cands.append((acc[i - 1, j - 1], 0))
            if i > 0:
                cands.append((acc[i - 1, j], 1))
            if j > 0:
                cands.append((acc[i, j - 1], 2))
            best, move = min(cands, key=lambda t: (t[0], t[1]))
            acc[i, j] = best + cost[i, j]
            back[i, j] = move
    path = [(n - 1, m - 1)]
    i, j = n - 1, m - 1
    while (i, j) != (0, 0):
        move = back[i, j]
        if move == 0:
            i, j = i - 1, j - 1
        elif move == 1:
            i -= 1
        else:
            j -= 1
        path.append((i, j))
    return path[::-1]


def _angle_between(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0 if nu == nv else math.pi / 2.0
    # atan2 stays exact for parallel vectors where acos of a rounded cosine does not
    return abs(math.atan2(u[0] * v[1] - u[1] * v[0], float(np.dot(u, v))))


def multimatch(s1: Scanpath, s2: Scanpath, screen=SCREEN, include_initial: bool = False) -> MultiMatch:
    """Shape, direction, length and position similarity in [0, 1].

    Saccade vectors of both scanpaths are aligned by the cheapest path
    through their vector-difference matrix; each dimension averages its
    difference over the aligned pairs. Position compares the fixations at
    which aligned saccades start. With fewer than two fixations on either
    side there are no saccades, and position falls back to aligning the
    fixations themselves.
    """
    a, b = _behavioural(s1, include_initial), _behavioural(s2, include_initial)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("multimatch needs at least one behavioural fixation per scanpath")
    diag = math.hypot(*screen)
    if len(a) < 2 or len(b) < 2:
        cost = np.linalg.norm(a[:, None] - b[None], axis=2)
        path = _dp_alignment(cost)
        pos = float(np.mean([cost[i, j] for i, j in path]))
        return MultiMatch(None, None, None, 1.0 - pos / diag)
    va, vb = np.diff(a, axis=0), np.diff(b, axis=0)
    cost = np.linalg.norm(va[:, None] - vb[None], axis=2)
    path = _dp_alignment(cost)
    shape = np.mean([cost[i, j] for i, j in path])
    direction = np.mean([_angle_between(va[i], vb[j]) for i, j in path])
    length = np.mean([abs(np.linalg.norm(va[i]) - np.linalg.norm(vb[j])) for i, j in path])
    position = np.mean([np.linalg.norm(a[i] - b[j]) for i, j in path])
    return MultiMatch(
        float(1.0 - shape / (2.0 * diag)),
        float(1.0 - direction / math.pi),
        float(1.0 - length / diag),
        float(1.0 - position / diag),
    )


# --------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    model: str
    tfp_auc: float
    prob_mismatch: float | None
    scanpath_ratio: float | None
    sequence_score: float | None
    mm_shape: float | None
    mm_direction: float | None
    mm_length: float | None
    mm_position: float | None
    n_trials: int
    bandwidth: float
    tfp: tuple = ()
    human_tfp: tuple = ()

    def row(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in REPORT_COLUMNS}


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def evaluate(model, human, bboxes: dict, name: str = "model", bandwidth: float = DEFAULT_BANDWIDTH,
             include_initial: bool = False, similarity: bool = True) -> MetricReport:
    """Score generated scanpaths against human ones.

    ``model`` and ``human`` map a trial key (image, task) to lists of
    scanpaths; ``bboxes`` maps the same keys to target boxes. Per-trial
    means come first, then the mean over trials.
    """
    keys = [k for k in model if model[k]]
    if not keys:
        raise ValueError("no generated scanpaths to evaluate")
    missing = [k for k in keys if k not in bboxes]
    if missing:
        raise KeyError(f"no target box for trial {missing[0]}")
    curve = tfp_curve((sp, bboxes[k]) for k in keys for sp in model[k])
    hkeys = [k for k in keys if human.get(k)]
    hcurve = tfp_curve((sp, bboxes[k]) for k in hkeys for sp in human[k]) if hkeys else None
    ratios, seqs, mms = [], [], []
    for k in keys:
        ratios.append(_mean(scanpath_ratio(sp, bboxes[k]) for sp in model[k]))
        if similarity and human.get(k):
            seq_k, mm_k = [], []
            for sp in model[k]:
                for hp in human[k]:
                    seq_k.append(sequence_score(sp, hp, bandwidth, include_initial))
                    mm_k.append(multimatch(sp, hp, include_initial=include_initial))
            seqs.append(_mean(seq_k))
            mms.append(tuple(_mean(m.as_tuple()[d] for m in mm_k) for d in range(4)))
    mm = [(_mean(m[d] for m in mms) if mms else None) for d in range(4)]
    return MetricReport(
        name, tfp_auc(curve), probability_mismatch(curve, hcurve) if hcurve is not None else None,
        _mean(ratios), _mean(seqs) if seqs else None, *mm, len(keys), float(bandwidth),
        tuple(float(c) for c in curve), tuple(float(c) for c in hcurve) if hcurve is not None else (),
    )


def human_consistency(human, bboxes, bandwidth: float = DEFAULT_BANDWIDTH) -> float | None:
    """Leave-one-out human-to-human sequence score (the ceiling reference)."""
    per_trial = []
    for k, sps in human.items():
        if len(sps) < 2:
            continue
        scores = [sequence_score(a, b, bandwidth) for i, a in enumerate(sps) for j, b in enumerate(sps) if i != j]
        per_trial.append(np.mean(scores))
    return float(np.mean(per_trial)) if per_trial else None


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_report_csv(path, reports) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            row = r.row()
            w.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])


def write_tfp_csv(path, reports) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "n", "tfp", "human_tfp"])
        for r in reports:
            for n, v in enumerate(r.tfp):
                h = r.human_tfp[n] if r.human_tfp else None
                w.writerow([r.model, n, _fmt(float(v)), _fmt(h)])


def read_report_csv(path) -> list[dict]:
    with open(path) as fh:
        return list(csv.DictReader(fh))
