"""Trial manifests, filtering, splits and the synthetic search corpus."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .beliefs import (
    CELL_PX,
    GRID_H,
    GRID_W,
    IMG_H,
    IMG_W,
    TASKS,
    BeliefStack,
    pixel_to_cell,
    read_belief_file,
    write_belief_file,
)
from .records import Scanpath
from .searchenv import (
    MAX_STEPS,
    START_XY,
    SearchTrial,
    action_to_pixel,
    cell_to_action,
    ior_neighbourhood,
    target_cells,
    target_hit,
)

MANIFEST_VERSION = 1
PRESENT, ABSENT = "present", "absent"


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class FixationRecord:
    x: float
    y: float
    t: float | None = None


@dataclass(frozen=True)
class TrialRecord:
    subject: str
    task: str
    image: str
    condition: str
    correct: bool
    fixations: tuple
    bbox: tuple | None = None

    def scanpath(self) -> Scanpath:
        xy = np.array([[f.x, f.y] for f in self.fixations]).reshape(-1, 2)
        dur = None
        if self.fixations and all(f.t is not None for f in self.fixations):
            dur = np.array([f.t for f in self.fixations])
        return Scanpath(xy, self.image, self.task, self.subject, "human", dur)

    def to_json(self) -> dict:
        d = {
            "subject": self.subject,
            "task": self.task,
            "image": self.image,
            "condition": self.condition,
            "correct": self.correct,
            "bbox": list(self.bbox) if self.bbox is not None else None,
            "fixations": [],
        }
        for f in self.fixations:
            fx = {"x": f.x, "y": f.y}
            if f.t is not None:
                fx["t"] = f.t
            d["fixations"].append(fx)
        return d


@dataclass
class Dataset:
    records: list
    tensors: dict = field(default_factory=dict)  # image id -> {"high": path, "low": path, ...}
    root: Path | None = None
    provenance: dict = field(default_factory=dict)
    stacks: dict = field(default_factory=dict)  # image id -> (low, high) once loaded

    def beliefs(self, image: str) -> tuple[BeliefStack, BeliefStack]:
        if image not in self.stacks:
            entry = self.tensors.get(image)
            if entry is None:
                raise KeyError(f"no belief tensors indexed for image {image!r}")
            base = self.root or Path(".")
            nt = entry.get("n_things")
            low = read_belief_file(base / entry["low"], "low", nt)
            high = read_belief_file(base / entry["high"], "high", nt)
            self.stacks[image] = (low, high)
        return self.stacks[image]

    def search_trial(self, image: str, task: str, subject: str | None = None) -> SearchTrial:
        rec = next((r for r in self.records if r.image == image and r.task == task and r.bbox is not None), None)
        if rec is None:
            raise KeyError(f"no target-present record for image {image!r}, task {task!r}")
        low, high = self.beliefs(image)
        return SearchTrial(image, task, tuple(rec.bbox), low, high, subject)

    def images_by_task(self) -> dict:
        out = {}
        for r in self.records:
            ids = out.setdefault(r.task, [])
            if r.image not in ids:
                ids.append(r.image)
        return out

    def training_pairs(self, images=None, subjects=None) -> list:
        """(SearchTrial, [human Scanpath]) per (image, task), optionally restricted."""
        groups = {}
        for r in self.records:
            if images is not None and r.image not in images:
                continue
            if subjects is not None and r.subject not in subjects:
                continue
            groups.setdefault((r.image, r.task), []).append(r)
        out = []
        for (image, task), recs in groups.items():
            out.append((self.search_trial(image, task), [r.scanpath() for r in recs]))
        return out

    def subjects(self) -> list:
        return sorted({r.subject for r in self.records})


# --------------------------------------------------------------------------
# manifest I/O


def _fail(where: str, msg: str):
    raise SchemaError(f"{where}: {msg}")


def _parse_record(i: int, raw: dict, scale, offset) -> TrialRecord:
    where = f"trials[{i}]"
    if not isinstance(raw, dict):
        _fail(where, "expected an object")
    for key in ("subject", "task", "image", "condition", "correct", "fixations"):
        if key not in raw:
            _fail(where, f"missing field {key!r}")
    cond = raw["condition"]
    if cond not in (PRESENT, ABSENT):
        _fail(f"{where}.condition", f"expected 'present' or 'absent', got {cond!r}")
    if not isinstance(raw["correct"], bool):
        _fail(f"{where}.correct", "expected a boolean")
    sx, sy = scale
    ox, oy = offset
    fixations = []
    for j, f in enumerate(raw["fixations"]):
        if not isinstance(f, dict) or "x" not in f or "y" not in f:
            _fail(f"{where}.fixations[{j}]", "expected {x, y[, t]}")
        x, y = float(f["x"]) * sx + ox, float(f["y"]) * sy + oy
        if not (0 <= x <= IMG_W and 0 <= y <= IMG_H):
            _fail(f"{where}.fixations[{j}]", f"({x:.1f}, {y:.1f}) outside the {IMG_W}x{IMG_H} image")
        fixations.append(FixationRecord(x, y, float(f["t"]) if f.get("t") is not None else None))
    bbox = raw.get("bbox")
    if cond == PRESENT:
        if bbox is None or len(bbox) != 4:
            _fail(f"{where}.bbox", "target-present trials need [x, y, w, h]")
        bx, by, bw, bh = (float(bbox[0]) * sx + ox, float(bbox[1]) * sy + oy, float(bbox[2]) * sx, float(bbox[3]) * sy)
        if bw <= 0 or bh <= 0 or bx < 0 or by < 0 or bx + bw > IMG_W + 1e-9 or by + bh > IMG_H + 1e-9:
            _fail(f"{where}.bbox", f"trial (subject={raw['subject']}, image={raw['image']}) bbox outside image")
        bbox = (bx, by, bw, bh)
    else:
        bbox = None
    return TrialRecord(str(raw["subject"]), str(raw["task"]), str(raw["image"]), cond, raw["correct"],
                       tuple(fixations), bbox)


def calibration_from(manifest: dict) -> tuple[tuple, tuple]:
    cal = manifest.get("calibration")
    if cal is not None:
        return tuple(cal["scale"]), tuple(cal.get("offset", (0.0, 0.0)))
    native = manifest.get("native_size")
    if native is not None:
        h, w = native
        return (IMG_W / w, IMG_H / h), (0.0, 0.0)
    return (1.0, 1.0), (0.0, 0.0)


def load_dataset(path, check_tensors: bool = True) -> Dataset:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if isinstance(manifest, list):
        manifest = {"trials": manifest}
    scale, offset = calibration_from(manifest)
    trials = manifest.get("trials")
    if not isinstance(trials, list):
        raise SchemaError(f"{path}: 'trials' must be an array")
    records = [_parse_record(i, raw, scale, offset) for i, raw in enumerate(trials)]
    tensors = manifest.get("tensors", {})
    root = path.parent
    if check_tensors:
        for image, entry in tensors.items():
            for res in ("high", "low"):
                if not (root / entry[res]).exists():
                    raise FileNotFoundError(f"{path}: belief tensor {entry[res]} for image {image!r} is missing")
    prov = dict(manifest.get("provenance", {}))
    prov["coordinate_scale"] = list(scale)
    prov["coordinate_offset"] = list(offset)
    return Dataset(records, tensors, root, prov)


def dataset_manifest(ds: Dataset) -> dict:
    prov = {k: v for k, v in ds.provenance.items() if k not in ("coordinate_scale", "coordinate_offset")}
    return {
        "version": MANIFEST_VERSION,
        "provenance": prov,
        "calibration": {"scale": [1.0, 1.0], "offset": [0.0, 0.0]},
        "tensors": ds.tensors,
        "trials": [r.to_json() for r in ds.records],
    }


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    path.write_text(json.dumps(dataset_manifest(ds), indent=1, sort_keys=True))


# --------------------------------------------------------------------------
# filtering and splits


def first_hit_index(fixations, bbox) -> int | None:
    for i, f in enumerate(fixations):
        if i == 0:
            continue
        if target_hit((f.x, f.y), bbox):
            return i
    return None


def filter_training_fixations(records) -> list:
    """Drop error and target-absent trials; truncate each scanpath at its first target hit."""
    out = []
    for r in records:
        if r.condition != PRESENT or not r.correct:
            continue
        k = first_hit_index(r.fixations, r.bbox)
        if k is not None and k + 1 < len(r.fixations):
            r = TrialRecord(r.subject, r.task, r.image, r.condition, r.correct, r.fixations[:k + 1], r.bbox)
        out.append(r)
    return out


@dataclass(frozen=True)
class SplitSpec:
    train: dict
    valid: dict
    test: dict
    seed: int

    def ids(self, part: str) -> list:
        return [i for ids in getattr(self, part).values() for i in ids]


def _round(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_splits(images_per_category: dict, seed: int = 0, fractions=(0.7, 0.1, 0.2)) -> SplitSpec:
    train, valid, test = {}, {}, {}
    for cat in sorted(images_per_category):
        ids = sorted(images_per_category[cat])
        if len(ids) < 10:
            raise ValueError(f"category {cat!r} has {len(ids)} images; at least 10 are needed to split")
        rng = np.random.default_rng([seed, int(hashlib.sha1(cat.encode()).hexdigest()[:8], 16)])
        order = [ids[i] for i in rng.permutation(len(ids))]
        n_tr = _round(fractions[0] * len(ids))
        n_va = _round(fractions[1] * len(ids))
        train[cat], valid[cat], test[cat] = order[:n_tr], order[n_tr:n_tr + n_va], order[n_tr + n_va:]
    return SplitSpec(train, valid, test, seed)


def write_splits(split: SplitSpec, directory) -> None:
    d = Path(directory)
    for part in ("train", "valid", "test"):
        for cat, ids in getattr(split, part).items():
            p = d / cat.replace(" ", "_")
            p.mkdir(parents=True, exist_ok=True)
            (p / f"{part}.txt").write_text("".join(f"{i}\n" for i in ids))


def read_splits(directory, seed: int = 0) -> SplitSpec:
    d = Path(directory)
    parts = {"train": {}, "valid": {}, "test": {}}
    for cat_dir in sorted(p for p in d.iterdir() if p.is_dir()):
        for part in parts:
            f = cat_dir / f"{part}.txt"
            if f.exists():
                parts[part][cat_dir.name.replace("_", " ")] = f.read_text().split()
    return SplitSpec(parts["train"], parts["valid"], parts["test"], seed)


def subsample_ipc(split: SplitSpec, ipc: int, seed: int) -> list:
    """``ipc`` training images per category, seeded."""
    out = []
    for cat in sorted(split.train):
        ids = split.train[cat]
        if ipc > len(ids):
            raise ValueError(f"category {cat!r} has {len(ids)} training images, fewer than ipc={ipc}")
        rng = np.random.default_rng([seed, ipc, len(cat), sum(map(ord, cat))])
        out.extend(ids[i] for i in sorted(rng.choice(len(ids), ipc, replace=False)))
    return out


# --------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SyntheticSceneConfig:
    """Scene generator settings; blob sizes are in pixels of the 320 x 512 image."""

    tasks: tuple = ("knife", "car", "mouse")
    scenes_per_task: int = 100
    n_subjects: int = 2
    n_clutter: int = 2  # irrelevant thing categories
    n_stuff: int = 1
    anchor_correlation: float = 0.8
    anchor_gap_px: tuple = (0.0, 8.0)
    target_size: tuple = (24.0, 48.0)
    anchor_size: tuple = (64.0, 112.0)
    target_visibility: tuple = (0.3, 0.9)
    target_hidden_prob: float = 0.25
    lookalike_prob: float = 0.8
    other_target_prob: float = 0.5
    # expert: softmax over -distance to the nearest goal, goals being the
    # target (cost 0), the lookalike (lure cost) and the anchor (anchor cost)
    expert_temperature: float = 0.2
    lure_cost: float = 0.4
    anchor_cost: float = 1.5
    blur_sigma: float = 1.0  # cells
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.anchor_correlation <= 1.0:
            raise ValueError("anchor_correlation must lie in [0, 1]")
        if self.n_clutter + 2 < 1:
            raise ValueError("need at least one context category")
        if any(t not in TASKS for t in self.tasks):
            raise ValueError(f"tasks must be drawn from {TASKS}")

    @property
    def channel_names(self) -> tuple:
        return (tuple(self.tasks) + ("anchor", "lookalike") + tuple(f"clutter{i}" for i in range(self.n_clutter))
                + tuple(f"stuff{i}" for i in range(self.n_stuff)))

    @property
    def n_things(self) -> int:
        return len(self.tasks) + 2 + self.n_clutter

    def digest(self) -> str:
        return hashlib.sha1(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class SyntheticScene:
    image_id: str
    task: str
    bbox: tuple
    low: BeliefStack
    high: BeliefStack
    anchor_bbox: tuple
    lookalike_bbox: tuple | None
    anchored: bool
    hidden: bool


@dataclass
class Corpus:
    config: SyntheticSceneConfig
    scenes: list
    records: list

    def dataset(self) -> Dataset:
        ds = Dataset(list(self.records), provenance=self.provenance())
        for s in self.scenes:
            ds.stacks[s.image_id] = (s.low, s.high)
        return ds

    def provenance(self) -> dict:
        return {"generator": "synthetic", "seed": self.config.seed, "config_hash": self.config.digest(),
                "config": json.loads(json.dumps(asdict(self.config)))}

    def scene(self, image_id: str) -> SyntheticScene:
        return next(s for s in self.scenes if s.image_id == image_id)


_CY, _CX = np.mgrid[0:GRID_H, 0:GRID_W]
_CELL_X = _CX * CELL_PX + CELL_PX / 2.0
_CELL_Y = _CY * CELL_PX + CELL_PX / 2.0


def _blob(bbox) -> np.ndarray:
    """Truncated Gaussian over a box, sampled at cell centres, peak-normalised to 1."""
    x, y, w, h = bbox
    cx, cy = x + w / 2.0, y + h / 2.0
    sx, sy = max(w / 2.5, 6.0), max(h / 2.5, 6.0)
    g = np.exp(-0.5 * (((_CELL_X - cx) / sx) ** 2 + ((_CELL_Y - cy) / sy) ** 2))
    g[g < 0.05] = 0.0
    m = g.max()
    return g / m if m > 0 else g


def _box_distance_cells(bbox) -> np.ndarray:
    """Distance (in cells) from each cell centre to the box; zero inside."""
    x, y, w, h = bbox
    dx = np.maximum(np.maximum(x - _CELL_X, _CELL_X - (x + w)), 0.0)
    dy = np.maximum(np.maximum(y - _CELL_Y, _CELL_Y - (y + h)), 0.0)
    return np.hypot(dx, dy) / CELL_PX


_CENTRE_BOX = (IMG_W * 2 / 5, IMG_H * 2 / 5, IMG_W / 5, IMG_H / 5)


def _overlaps(a, b, margin=0.0) -> bool:
    return not (a[0] + a[2] + margin <= b[0] or b[0] + b[2] + margin <= a[0]
                or a[1] + a[3] + margin <= b[1] or b[1] + b[3] + margin <= a[1])


def _inside(b) -> bool:
    return b[0] >= 0 and b[1] >= 0 and b[0] + b[2] <= IMG_W and b[1] + b[3] <= IMG_H


def _random_box(rng, size_range, aspect=(0.7, 1.4)):
    w = rng.uniform(*size_range)
    h = float(np.clip(w * rng.uniform(*aspect), size_range[0] * 0.6, size_range[1]))
    x = rng.uniform(0, IMG_W - w)
    y = rng.uniform(0, IMG_H - h)
    return (float(x), float(y), float(w), float(h))


def _contains_cell_centre(bbox) -> bool:
    return bool(target_cells(bbox).any())


def _place_scene(cfg: SyntheticSceneConfig, rng, max_tries: int = 200):
    for _ in range(max_tries):
        anchor = _random_box(rng, cfg.anchor_size, aspect=(0.35, 0.6))
        anchored = rng.random() < cfg.anchor_correlation
        tw = rng.uniform(*cfg.target_size)
        th = float(np.clip(tw * rng.uniform(0.7, 1.4), cfg.target_size[0] * 0.6, cfg.target_size[1]))
        if anchored:
            gap = rng.uniform(*cfg.anchor_gap_px)
            tx = anchor[0] + anchor[2] + gap
            ty = anchor[1] + anchor[3] / 2.0 - th / 2.0 + rng.uniform(-4, 4)
            target = (float(tx), float(ty), float(tw), float(th))
        else:
            target = (float(rng.uniform(0, IMG_W - tw)), float(rng.uniform(0, IMG_H - th)), float(tw), float(th))
        if not (_inside(target) and _inside(anchor)):
            continue
        if _overlaps(target, _CENTRE_BOX) or not _contains_cell_centre(target):
            continue
        if not anchored and _overlaps(target, anchor, margin=16.0):
            continue
        if anchored and _overlaps(target, anchor):
            continue
        return anchor, target, anchored
    raise RuntimeError("could not place target and anchor after bounded retries")


def _free_box(rng, size_range, avoid, min_gap_px, max_tries=200):
    for _ in range(max_tries):
        b = _random_box(rng, size_range)
        if all(not _overlaps(b, a, margin=min_gap_px) for a in avoid):
            return b
    return None


def expert_logits(scene_goals: dict, cfg: SyntheticSceneConfig, temperature: float) -> np.ndarray:
    d = scene_goals["target"]
    if scene_goals.get("lookalike") is not None:
        d = np.minimum(d, scene_goals["lookalike"] + cfg.lure_cost)
    d = np.minimum(d, scene_goals["anchor"] + cfg.anchor_cost)
    return (-d / max(temperature, 1e-12)).ravel()


def oracle_scanpath(scene: SyntheticScene, cfg: SyntheticSceneConfig, rng, temperature: float,
                    max_steps: int = MAX_STEPS) -> list:
    goals = {"target": _box_distance_cells(scene.bbox), "anchor": _box_distance_cells(scene.anchor_bbox),
             "lookalike": _box_distance_cells(scene.lookalike_bbox) if scene.lookalike_bbox else None}
    logits = expert_logits(goals, cfg, temperature)
    xy = [START_XY]
    inhibited = ior_neighbourhood(cell_to_action(pixel_to_cell(*START_XY))).ravel()
    for _ in range(max_steps):
        z = np.where(inhibited, -np.inf, logits)
        if temperature <= 1e-9:
            a = int(np.argmax(z))
        else:
            p = np.exp(z - z.max())
            p /= p.sum()
            a = int(rng.choice(len(p), p=p))
        inhibited |= ior_neighbourhood(a).ravel()
        xy.append(action_to_pixel(a))
        if target_hit(xy[-1], scene.bbox):
            break
    return xy


def _make_scene(cfg: SyntheticSceneConfig, index: int, task: str) -> SyntheticScene:
    rng = np.random.default_rng([cfg.seed, index])
    names = cfg.channel_names
    ch = {n: i for i, n in enumerate(names)}
    high = np.zeros((len(names), GRID_H, GRID_W))
    anchor, target, anchored = _place_scene(cfg, rng)
    high[ch[task]] = _blob(target)
    high[ch["anchor"]] = _blob(anchor)
    placed = [target, anchor, _CENTRE_BOX]
    look = None
    if rng.random() < cfg.lookalike_prob:
        look = _free_box(rng, cfg.target_size, placed, min_gap_px=48.0)
        if look is not None:
            high[ch["lookalike"]] = _blob(look)
            placed.append(look)
    for other in cfg.tasks:
        if other != task and rng.random() < cfg.other_target_prob:
            b = _free_box(rng, cfg.target_size, placed, min_gap_px=16.0)
            if b is not None:
                high[ch[other]] = np.maximum(high[ch[other]], _blob(b))
                placed.append(b)
    for i in range(cfg.n_clutter):
        b = _free_box(rng, (32.0, 80.0), placed[:2], min_gap_px=0.0)
        if b is not None:
            high[ch[f"clutter{i}"]] = _blob(b)
    for i in range(cfg.n_stuff):
        band_y = rng.uniform(0, IMG_H * 0.6)
        band = (0.0, float(band_y), float(IMG_W), float(IMG_H * 0.4))
        high[ch[f"stuff{i}"]] = ((_CELL_Y >= band[1]) & (_CELL_Y <= band[1] + band[3])).astype(float) * 0.8

    hidden = bool(rng.random() < cfg.target_hidden_prob)
    vis = np.full(len(names), 0.8)
    vis[ch["anchor"]] = 1.0
    vis[ch["lookalike"]] = 1.0
    vis[ch[task]] = 0.0 if hidden else rng.uniform(*cfg.target_visibility)
    low = np.stack([gaussian_filter(high[i], cfg.blur_sigma, mode="constant") for i in range(len(names))])
    peak = high.max(axis=(1, 2), keepdims=True)
    lpk = low.max(axis=(1, 2), keepdims=True)
    low = np.where(lpk > 0, low / np.where(lpk > 0, lpk, 1.0) * peak, 0.0) * vis[:, None, None]
    low = np.clip(low, 0.0, 1.0)
    # belief files hold float32; keep the in-memory corpus identical to its saved form
    low, high = (a.astype(np.float32).astype(np.float64) for a in (low, high))
    image_id = f"syn{cfg.seed}_{index:05d}"
    return SyntheticScene(
        image_id, task, target,
        BeliefStack(low, names, "low", cfg.n_things),
        BeliefStack(high, names, "high", cfg.n_things),
        anchor, look, anchored, hidden,
    )


def subject_temperature(cfg: SyntheticSceneConfig, s: int) -> float:
    if cfg.n_subjects == 1:
        return cfg.expert_temperature
    return cfg.expert_temperature * (0.8 + 0.4 * s / (cfg.n_subjects - 1))


def generate_synthetic_corpus(cfg: SyntheticSceneConfig | None = None) -> Corpus:
    cfg = cfg or SyntheticSceneConfig()
    scenes, records = [], []
    index = 0
    for task in cfg.tasks:
        for _ in range(cfg.scenes_per_task):
            scene = _make_scene(cfg, index, task)
            scenes.append(scene)
            for s in range(cfg.n_subjects):
                rng = np.random.default_rng([cfg.seed, index, 1000 + s])
                xy = oracle_scanpath(scene, cfg, rng, subject_temperature(cfg, s))
                durs = rng.uniform(150.0, 400.0, size=len(xy))
                fx = tuple(FixationRecord(float(x), float(y), float(round(t, 1))) for (x, y), t in zip(xy, durs))
                records.append(TrialRecord(f"s{s}", task, scene.image_id, PRESENT, True, fx, scene.bbox))
            index += 1
    return Corpus(cfg, scenes, records)


def save_corpus(corpus: Corpus, directory) -> Path:
    d = Path(directory)
    (d / "beliefs").mkdir(parents=True, exist_ok=True)
    tensors = {}
    for s in corpus.scenes:
        hp, lp = f"beliefs/{s.image_id}.high.dcbt", f"beliefs/{s.image_id}.low.dcbt"
        write_belief_file(d / hp, s.high)
        write_belief_file(d / lp, s.low)
        tensors[s.image_id] = {"high": hp, "low": lp, "blur_sigma": corpus.config.blur_sigma,
                               "n_things": corpus.config.n_things}
    ds = Dataset(corpus.records, tensors, d, corpus.provenance())
    path = d / "manifest.json"
    save_dataset(ds, path)
    return path
