"""Batch entry points: ``scanirl <command> [flags]``.

Every command accepts ``--config FILE`` holding ``key=value`` lines (keys are
flag names, ``-`` or ``_``); flags on the command line override the file.
Each output directory receives ``config.txt``, a resolved snapshot that
reproduces the run via ``scanirl <command> --config config.txt --out DIR``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

from . import analysis, baselines, dataio, gradcheck, metrics
from . import numcore as nc
from .gail import IRLTrainer, TrainConfig, write_diagnostics
from .nets import ArchConfig, ConvNet, net_from_checkpoint, save_net
from .records import Scanpath
from .searchenv import SearchEnv

log = logging.getLogger("scanirl")

SNAPSHOT = "config.txt"


class UsageError(Exception):
    """Bad flags, missing inputs or conflicting settings; exits with status 2."""


def component_seed(root: int, name: str) -> int:
    """Deterministic per-component seed split from the root seed."""
    h = hashlib.sha1(f"{int(root)}:{name}".encode()).digest()
    return int.from_bytes(h[:4], "little") & 0x7FFFFFFF


# --------------------------------------------------------------------------
# value parsers


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {s!r}")


def _int_tuple(s) -> tuple:
    try:
        return tuple(int(v) for v in str(s).split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def _float_tuple(s) -> tuple:
    try:
        return tuple(float(v) for v in str(s).split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


def _str_tuple(s) -> tuple:
    return tuple(v.strip() for v in str(s).split(",") if v.strip())


def _parser_for(default):
    if isinstance(default, bool):
        return _bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple):
        if default and all(isinstance(v, int) for v in default):
            return _int_tuple
        if default and all(isinstance(v, (int, float)) for v in default):
            return _float_tuple
        return _str_tuple
    return str


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_dataclass_flags(p, cls, prefix: str = "", skip=("seed",)):
    """One flag per dataclass field, defaulting to the field's default."""
    for f in fields(cls):
        if f.name in skip:
            continue
        typ = _parser_for(f.default)
        kw = {"nargs": "?", "const": True} if typ is _bool else {}
        p.add_argument(_flag(prefix + f.name), dest=prefix + f.name, type=typ, default=f.default,
                       help=f"default {f.default}", **kw)


def _dataclass_from(args, cls, prefix: str = "", **extra):
    vals = {f.name: getattr(args, prefix + f.name) for f in fields(cls) if hasattr(args, prefix + f.name)}
    vals.update(extra)
    return cls(**vals)


# --------------------------------------------------------------------------
# flag groups


def _common(p):
    p.add_argument("--config", help="key=value file; command-line flags override it")
    p.add_argument("--seed", type=int, default=0, help="root seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                   help="parallel analysis cells (default: available cores)")
    p.add_argument("--log-level", default="INFO")


def _data(p, part_default="test"):
    p.add_argument("--data", help="dataset manifest (manifest.json)")
    p.add_argument("--split", help="split directory (default: <data dir>/splits, else a seeded 70/10/20 split)")
    p.add_argument("--part", default=part_default, choices=("train", "valid", "test"))
    p.add_argument("--ipc", type=int, help="images per category drawn from the train split")
    p.add_argument("--radius", type=float, default=2.0, help="fovea radius in cells")
    p.add_argument("--ablate", type=_str_tuple, default=(), help="comma-separated channels to zero")
    p.add_argument("--bandwidth", type=float, default=metrics.DEFAULT_BANDWIDTH, help="clustering bandwidth (px)")


def _arch(p):
    _add_dataclass_flags(p, ArchConfig)


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="scanirl", description="Visual-search scanpath prediction by inverse RL.")
    sub = top.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("synth-gen", help="write a seeded synthetic search corpus")
    _common(p)
    _add_dataclass_flags(p, dataio.SyntheticSceneConfig)

    p = sub.add_parser("train-irl", help="adversarial IRL training")
    _common(p)
    _data(p, "train")
    _arch(p)
    _add_dataclass_flags(p, TrainConfig)
    p.add_argument("--checkpoint-every", type=int, default=1, help="epochs between checkpoints (0: final only)")

    p = sub.add_parser("train-bc", help="behaviour cloning baselines")
    _common(p)
    _data(p, "train")
    _arch(p)
    p.add_argument("--kind", choices=("cnn", "lstm"), default="cnn")
    p.add_argument("--hidden", type=int, help="ConvLSTM hidden channels (default: input channels)")
    _add_dataclass_flags(p, baselines.BCConfig)

    p = sub.add_parser("generate", help="write scanpaths from a model or baseline")
    _common(p)
    _data(p)
    p.add_argument("--model", help="policy or BC-LSTM checkpoint")
    p.add_argument("--baseline", choices=("random", "detector", "heuristic", "human"))
    p.add_argument("--mode", choices=("sample", "greedy"), default="sample")
    p.add_argument("--n", type=int, default=10, help="scanpaths per trial")
    p.add_argument("--sigma-cells", type=float, default=1.0, help="heuristic map smoothing")

    p = sub.add_parser("eval", help="score scanpaths against humans")
    _common(p)
    _data(p)
    p.add_argument("--scanpaths", action="append", help="model scanpath file (repeatable)")
    p.add_argument("--human", help="human scanpath file (default: the dataset split)")
    p.add_argument("--name", action="append", help="report row name per --scanpaths file")
    p.add_argument("--include-initial", type=_bool, nargs="?", const=True, default=False)

    p = sub.add_parser("reward-map", help="initial-state reward maps from a discriminator")
    _common(p)
    _data(p)
    p.add_argument("--discriminator", required=False, help="discriminator checkpoint")
    p.add_argument("--limit", type=int, default=10, help="trials to map")

    p = sub.add_parser("context", help="context effects and context maps")
    _common(p)
    _data(p)
    p.add_argument("--model", help="policy checkpoint")
    p.add_argument("--task", help="restrict to one search task")
    p.add_argument("--categories", type=_str_tuple, default=(), help="context channels (default: all non-task)")
    p.add_argument("--n", type=int, default=10, help="scanpaths per trial")
    p.add_argument("--limit", type=int, default=4, help="trials to map per category")

    p = sub.add_parser("sweep-ipc", help="data-efficiency sweep")
    _common(p)
    _data(p)
    _arch(p)
    p.add_argument("--ipcs", type=_int_tuple, default=(5, 10, 20))
    p.add_argument("--methods", type=_str_tuple, default=("irl", "bc_cnn"))
    p.add_argument("--n", type=int, default=10)
    _add_dataclass_flags(p, TrainConfig)

    p = sub.add_parser("loso", help="leave-one-subject-out group vs individual models")
    _common(p)
    _data(p)
    _arch(p)
    p.add_argument("--subjects", type=_str_tuple, default=(), help="held-out subjects (default: all)")
    p.add_argument("--methods", type=_str_tuple, default=("irl",))
    p.add_argument("--n", type=int, default=10)
    _add_dataclass_flags(p, TrainConfig)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    _common(p)
    p.add_argument("--per-tensor", type=int, default=6, help="sampled entries per network tensor")
    return top


# --------------------------------------------------------------------------
# config files and snapshots


def read_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    out = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        k = k.strip().replace("-", "_")
        if k in out:
            raise UsageError(f"{path}:{n}: key {k!r} given twice")
        out[k] = v.strip()
    return out


def _known_dests(sub) -> dict:
    return {a.dest: a for a in sub._actions if a.option_strings}


def _subparser(top, command):
    for a in top._actions:
        if isinstance(a, argparse._SubParsersAction):
            return a.choices.get(command)
    return None


def parse_args(argv) -> argparse.Namespace:
    top = build_parser()
    argv = list(argv)
    first = top.parse_args(argv)
    if not first.config:
        return first
    cfg = read_config(first.config)
    cmd = cfg.pop("command", None)
    if cmd is not None and cmd != first.command:
        raise UsageError(f"config {first.config} is for command {cmd!r}, not {first.command!r}")
    sub = _subparser(top, first.command)
    dests = _known_dests(sub)
    pre = []
    for k, v in cfg.items():
        if k not in dests or k == "config":
            raise UsageError(f"config {first.config}: unknown key {k!r} for {first.command}")
        act = dests[k]
        if isinstance(act, argparse._AppendAction):
            for item in v.split(";"):
                pre += [act.option_strings[0], item]
        else:
            pre += [act.option_strings[0], v]
    # file values first so explicit flags win
    i = argv.index(first.command)
    return top.parse_args(argv[:i + 1] + pre + argv[i + 1:])


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def write_snapshot(out: Path, args, extra: dict | None = None) -> Path:
    """Resolved flags plus any derived values; default-valued flags are included.

    ``out`` and ``workers`` do not change results and are left out, so two
    runs into different directories produce identical snapshots.
    """
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"command={args.command}"]
    for k, v in sorted(vars(args).items()):
        if k in ("command", "config", "log_level", "out", "workers") or v is None:
            continue
        if isinstance(v, list):  # append flags
            lines.append(f"{k}={';'.join(str(x) for x in v)}")
            continue
        lines.append(f"{k}={_fmt_value(v)}")
    for k, v in (extra or {}).items():
        lines.append(f"# {k}={_fmt_value(v)}")
    path = out / SNAPSHOT
    path.write_text("\n".join(lines) + "\n")
    return path


# --------------------------------------------------------------------------
# shared plumbing


def _need(args, *names):
    for n in names:
        if getattr(args, n, None) in (None, ""):
            raise UsageError(f"{args.command} needs {_flag(n)}")


def _out(args) -> Path:
    _need(args, "out")
    return Path(args.out)


def _arch_from(args) -> ArchConfig:
    arch = _dataclass_from(args, ArchConfig)
    if arch.compute_dtype not in ("float64", "float32"):
        raise UsageError(f"--compute-dtype must be float64 or float32, got {arch.compute_dtype!r}")
    if len(arch.policy_widths) != 3 or len(arch.critic_widths) != 2:
        raise UsageError("--policy-widths takes 3 values and --critic-widths 2")
    return arch


def load_data(args) -> dataio.Dataset:
    _need(args, "data")
    path = Path(args.data)
    if not path.is_file():
        raise UsageError(f"dataset manifest not found: {path}")
    try:
        return dataio.load_dataset(path)
    except dataio.SchemaError as e:
        raise UsageError(f"{path}: {e}") from None


def load_split(args, ds: dataio.Dataset) -> dataio.SplitSpec:
    if args.split:
        d = Path(args.split)
        if not d.is_dir():
            raise UsageError(f"split directory not found: {d}")
        return dataio.read_splits(d, args.seed)
    d = Path(args.data).parent / "splits"
    if d.is_dir():
        return dataio.read_splits(d, args.seed)
    try:
        return dataio.make_splits(ds.images_by_task(), args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _env(args, ds: dataio.Dataset | None = None) -> SearchEnv:
    if args.radius <= 0:
        raise UsageError("--radius must be positive")
    env = SearchEnv(radius=args.radius, ablate=tuple(args.ablate))
    if ds is not None and args.ablate:
        img = ds.records[0].image
        names = ds.beliefs(img)[1].channel_names
        bad = [c for c in args.ablate if c not in names]
        if bad:
            raise UsageError(f"--ablate: unknown channel {bad[0]!r}; available: {', '.join(names)}")
    return env


def _part_ids(args, ds, split, part=None) -> set:
    part = part or args.part
    ids = list(split.ids(part))
    if args.ipc is not None:
        if part != "train":
            raise UsageError("--ipc subsamples the train split; it conflicts with --part " + part)
        try:
            ids = dataio.subsample_ipc(split, args.ipc, args.seed)
        except ValueError as e:
            raise UsageError(f"--ipc {args.ipc}: {e}") from None
    return set(ids)


def pmap(fn, items, workers: int):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as ex:
        return list(ex.map(fn, items))


def write_scanpaths(path: Path, groups: dict, bboxes: dict | None = None) -> None:
    rows = []
    for key in sorted(groups):
        for sp in groups[key]:
            d = sp.to_json()
            if bboxes is not None and key in bboxes:
                d["bbox"] = [float(v) for v in bboxes[key]]
            rows.append(d)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")


def read_scanpaths(path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"scanpath file not found: {path}")
    try:
        rows = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: invalid JSON ({e})") from None
    groups, boxes = {}, {}
    for r in rows:
        sp = Scanpath.from_json(r)
        groups.setdefault(sp.key, []).append(sp)
        if "bbox" in r:
            boxes[sp.key] = tuple(r["bbox"])
    return groups, boxes


def load_policy(path):
    """A policy checkpoint or a BC-LSTM checkpoint."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    _, meta = nc.load_params(path)
    if meta.get("kind") == "bc-lstm":
        return baselines.load_bclstm(path)
    net = net_from_checkpoint(path)
    if net.spec.kind != "policy":
        raise UsageError(f"{path} holds a {net.spec.kind} network, expected a policy")
    return net


def _save_nets(nets: dict, d: Path, suffix: str, meta: dict):
    d.mkdir(parents=True, exist_ok=True)
    for name, net in nets.items():
        save_net(net, d / f"{name}{suffix}.ckpt", meta)


# --------------------------------------------------------------------------
# commands


def cmd_synth_gen(args) -> int:
    out = _out(args)
    try:
        cfg = _dataclass_from(args, dataio.SyntheticSceneConfig, seed=args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    corpus = dataio.generate_synthetic_corpus(cfg)
    path = dataio.save_corpus(corpus, out)
    split = dataio.make_splits(corpus.dataset().images_by_task(), args.seed)
    dataio.write_splits(split, out / "splits")
    write_snapshot(out, args, {"config_hash": cfg.digest()})
    log.info("wrote %d scenes, %d trials to %s", len(corpus.scenes), len(corpus.records), path)
    return 0


def _train_set(args, ds, split):
    ids = _part_ids(args, ds, split)
    pairs = ds.training_pairs(images=ids)
    if not pairs:
        raise UsageError("no training trials selected")
    return pairs


def cmd_train_irl(args) -> int:
    out = _out(args)
    ds = load_data(args)
    split = load_split(args, ds)
    env = _env(args, ds)
    arch = _arch_from(args)
    try:
        cfg = _dataclass_from(args, TrainConfig, seed=args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if args.checkpoint_every < 0:
        raise UsageError("--checkpoint-every must be >= 0")
    train_set = _train_set(args, ds, split)
    trainer = IRLTrainer(train_set, cfg, env, arch)
    write_snapshot(out, args, {"n_train_trials": len(train_set)})
    ck = out / "checkpoints"
    meta = {"seed": args.seed}
    if args.checkpoint_every:
        _save_nets(trainer.nets, ck, "-000", meta)

    def on_epoch(e, diags):
        write_diagnostics(out / "diagnostics.csv", trainer.history)
        if args.checkpoint_every and (e + 1) % args.checkpoint_every == 0:
            _save_nets(trainer.nets, ck, f"-{e + 1:03d}", {**meta, "epoch": e + 1})

    t0 = time.time()
    trainer.train(callback=on_epoch)
    write_diagnostics(out / "diagnostics.csv", trainer.history)
    _save_nets(trainer.nets, out, "", {**meta, "epoch": cfg.epochs})
    log.info("trained %d epochs in %.0fs", cfg.epochs, time.time() - t0)
    return 0


def cmd_train_bc(args) -> int:
    out = _out(args)
    ds = load_data(args)
    split = load_split(args, ds)
    env = _env(args, ds)
    arch = _arch_from(args)
    try:
        cfg = _dataclass_from(args, baselines.BCConfig, seed=args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if args.kind == "cnn" and args.hidden is not None:
        raise UsageError("--hidden only applies to --kind lstm")
    train_set = _train_set(args, ds, split)
    write_snapshot(out, args, {"n_train_trials": len(train_set)})
    if args.kind == "cnn":
        pol, losses = baselines.bc_cnn_train(train_set, cfg, env, arch)
        save_net(pol, out / "policy.ckpt", {"seed": args.seed, "kind": "bc-cnn"})
    else:
        model, losses = baselines.bc_lstm_train(train_set, cfg, env, arch, args.hidden)
        baselines.save_bclstm(model, out / "bclstm.ckpt", {"seed": args.seed})
    with open(out / "losses.csv", "w") as fh:
        fh.write("epoch,loss\n")
        for i, v in enumerate(losses):
            fh.write(f"{i + 1},{v:.6f}\n")
    return 0


def _human_groups(pairs) -> dict:
    return {(t.image_id, t.task): list(sps) for t, sps in pairs}


def cmd_generate(args) -> int:
    out = _out(args)
    if bool(args.model) == bool(args.baseline):
        raise UsageError("generate needs exactly one of --model or --baseline")
    ds = load_data(args)
    split = load_split(args, ds)
    env = _env(args, ds)
    pairs = ds.training_pairs(images=_part_ids(args, ds, split))
    trials = [t for t, _ in pairs]
    human = _human_groups(pairs)
    seed = component_seed(args.seed, "generate")
    if args.baseline == "human":
        groups = human
    elif args.baseline:
        if args.mode != "sample":
            raise UsageError(f"--mode {args.mode} does not apply to the {args.baseline} baseline")
        groups = baselines.generate_baseline(args.baseline, trials, args.n, seed, human, env=env,
                                             sigma_cells=args.sigma_cells)
    else:
        model = load_policy(args.model)
        if isinstance(model, baselines.BCLSTM):
            if args.mode != "sample":
                raise UsageError("the BC-LSTM model only supports --mode sample")
            groups = baselines.generate_baseline("bc-lstm", trials, args.n, seed, model=model, env=env)
        else:
            groups = analysis.policy_scanpaths(model, trials, args.n, seed, env, args.mode)
    write_scanpaths(out / "scanpaths.json", groups, analysis.bboxes_of(trials))
    write_snapshot(out, args, {"generate_seed": seed})
    return 0


def cmd_eval(args) -> int:
    out = _out(args)
    _need(args, "scanpaths")
    names = args.name or []
    if names and len(names) != len(args.scanpaths):
        raise UsageError("give one --name per --scanpaths file")
    boxes = {}
    if args.human:
        human, hb = read_scanpaths(args.human)
        boxes.update(hb)
    else:
        ds = load_data(args)
        split = load_split(args, ds)
        pairs = ds.training_pairs(images=_part_ids(args, ds, split))
        human = _human_groups(pairs)
        boxes.update(analysis.bboxes_of([t for t, _ in pairs]))
    if args.data and args.human:
        ds = load_data(args)
        for r in ds.records:
            if r.bbox is not None:
                boxes.setdefault((r.image, r.task), tuple(r.bbox))
    reports = []
    for i, f in enumerate(args.scanpaths):
        model, mb = read_scanpaths(f)
        for k, v in mb.items():
            boxes.setdefault(k, v)
        name = names[i] if names else Path(f).parent.name or Path(f).stem
        try:
            reports.append(metrics.evaluate(model, human, boxes, name, args.bandwidth, args.include_initial))
        except KeyError as e:
            raise UsageError(f"{f}: {e.args[0]}; pass --data or include bbox fields") from None
    metrics.write_report_csv(out / "report.csv", reports)
    metrics.write_tfp_csv(out / "tfp.csv", reports)
    hc = metrics.human_consistency(human, boxes, args.bandwidth)
    write_snapshot(out, args, {"human_consistency": hc if hc is not None else "n/a"})
    for r in reports:
        log.info("%s  TFP-AUC %.3f  seq %s", r.model, r.tfp_auc, r.sequence_score)
    return 0


def cmd_reward_map(args) -> int:
    out = _out(args)
    _need(args, "discriminator")
    p = Path(args.discriminator)
    if not p.is_file():
        raise UsageError(f"checkpoint not found: {p}")
    disc = net_from_checkpoint(p)
    if disc.spec.kind != "discriminator":
        raise UsageError(f"{p} holds a {disc.spec.kind} network, expected a discriminator")
    ds = load_data(args)
    split = load_split(args, ds)
    env = _env(args, ds)
    pairs = ds.training_pairs(images=_part_ids(args, ds, split))[: args.limit]
    rows = ["image,task,mean_inside,mean_outside"]
    for t, _ in pairs:
        m = analysis.reward_map(t, disc, env)
        name = f"{t.image_id}_{t.task.replace(' ', '-')}"
        analysis.emit_map(out, "reward", name, m)
        inside, outside = analysis.mean_inside_outside(m, t)
        rows.append(f"{t.image_id},{t.task},{inside:.6f},{outside:.6f}")
    (out / "reports").mkdir(parents=True, exist_ok=True)
    (out / "reports" / "reward_summary.csv").write_text("\n".join(rows) + "\n")
    write_snapshot(out, args)
    return 0


def _context_cell(job):
    category, task, trials, policy, env, n, seed = job
    return analysis.context_effect(category, task, trials, policy, env, n, seed)


def cmd_context(args) -> int:
    out = _out(args)
    _need(args, "model")
    pol = load_policy(args.model)
    if not isinstance(pol, ConvNet):
        raise UsageError("context analysis needs a policy network checkpoint")
    ds = load_data(args)
    split = load_split(args, ds)
    env = _env(args, ds)
    trials = [t for t, _ in ds.training_pairs(images=_part_ids(args, ds, split))]
    tasks = sorted({t.task for t in trials})
    if args.task:
        if args.task not in tasks:
            raise UsageError(f"--task {args.task!r} has no trials; available: {', '.join(tasks)}")
        tasks = [args.task]
    names = trials[0].high.channel_names
    cats = list(args.categories) or [c for c in names if c not in tasks]
    bad = [c for c in cats if c not in names]
    if bad:
        raise UsageError(f"unknown category {bad[0]!r}; available: {', '.join(names)}")
    seed = component_seed(args.seed, "context")
    jobs = [(c, t, trials, pol, env, args.n, seed) for t in tasks for c in cats if c != t]
    effects = pmap(_context_cell, jobs, args.workers)
    analysis.write_context_csv(out / "reports" / "context_effects.csv", effects)
    for c, t, *_ in jobs:
        for tr in [x for x in trials if x.task == t][: args.limit]:
            m = analysis.context_map(tr, c, pol, env)
            analysis.emit_map(out, "context", f"{t.replace(' ', '-')}_{c}_{tr.image_id}", m, signed=True)
    write_snapshot(out, args, {"context_seed": seed})
    return 0


def _study(args, arch) -> analysis.StudyConfig:
    try:
        tc = _dataclass_from(args, TrainConfig, seed=args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    bc = baselines.BCConfig(epochs=tc.epochs, batch=tc.pair_batch, lr=tc.lr, seed=args.seed)
    return analysis.StudyConfig(tc, bc, arch, args.n, args.bandwidth, args.seed)


def _sweep_cell(job):
    ds, split, ipc, method, study, env = job
    return analysis.data_efficiency_sweep(ds, split, (ipc,), (method,), study, env)[0]


def cmd_sweep_ipc(args) -> int:
    out = _out(args)
    if args.ipc is not None:
        raise UsageError("sweep-ipc takes --ipcs (a list); --ipc conflicts with it")
    bad = [m for m in args.methods if m not in ("irl", "bc_cnn")]
    if bad:
        raise UsageError(f"unknown method {bad[0]!r}; expected irl or bc_cnn")
    ds = load_data(args)
    split = load_split(args, ds)
    env = _env(args, ds)
    study = _study(args, _arch_from(args))
    for ipc in args.ipcs:
        try:
            dataio.subsample_ipc(split, ipc, args.seed)
        except ValueError as e:
            raise UsageError(f"--ipcs {ipc}: {e}") from None
    jobs = [(ds, split, ipc, m, study, env) for ipc in args.ipcs for m in args.methods]
    cells = pmap(_sweep_cell, jobs, args.workers)
    metrics.write_report_csv(out / "reports" / "sweep_ipc.csv", [r for _, _, r in cells])
    write_snapshot(out, args)
    return 0


def _loso_cell(job):
    ds, split, subject, methods, study, env = job
    return analysis.loso_harness(ds, split, subject, methods, study, env)


def cmd_loso(args) -> int:
    out = _out(args)
    ds = load_data(args)
    split = load_split(args, ds)
    env = _env(args, ds)
    study = _study(args, _arch_from(args))
    subjects = list(args.subjects) or ds.subjects()
    unknown = [s for s in subjects if s not in ds.subjects()]
    if unknown:
        raise UsageError(f"unknown subject {unknown[0]!r}; available: {', '.join(ds.subjects())}")
    if len(ds.subjects()) < 2:
        raise UsageError("leave-one-subject-out needs at least two subjects")
    jobs = [(ds, split, s, tuple(args.methods), study, env) for s in subjects]
    rows = [r for cell in pmap(_loso_cell, jobs, args.workers) for r in cell]
    metrics.write_report_csv(out / "reports" / "loso.csv", [r for _, _, r in rows])
    write_snapshot(out, args)
    return 0


def cmd_grad_check(args) -> int:
    t0 = time.time()
    results = gradcheck.run_suite(args.seed, args.per_tensor)
    lines = [r.line() for r in results]
    bad = [r for r in results if not r.passed]
    lines.append(f"{len(results) - len(bad)}/{len(results)} checks passed in {time.time() - t0:.1f}s")
    print("\n".join(lines))
    if args.out:
        out = Path(args.out)
        write_snapshot(out, args)
        (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    return 1 if bad else 0


COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "train-irl": cmd_train_irl,
    "train-bc": cmd_train_bc,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "reward-map": cmd_reward_map,
    "context": cmd_context,
    "sweep-ipc": cmd_sweep_ipc,
    "loso": cmd_loso,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
    except SystemExit as e:  # argparse: unknown flag or bad value, message already printed
        return int(e.code or 0)
    except UsageError as e:
        print(f"scanirl: error: {e}", file=sys.stderr)
        return 2
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(name)s %(message)s")
    if args.workers < 1:
        print("scanirl: error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"scanirl: error: {e}", file=sys.stderr)
        return 2
    except (nc.ShapeError, dataio.SchemaError) as e:
        print(f"scanirl: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())


