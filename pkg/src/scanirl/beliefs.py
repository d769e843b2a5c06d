"""Dynamic contextual belief state.

The state after a fixation history is ``M * H + (1 - M) * L`` where ``H`` and
``L`` are per-category belief maps computed on the sharp and blurred image and
``M`` is the union of disc masks around every fixation so far.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

GRID_H, GRID_W = 20, 32
IMG_H, IMG_W = 320, 512
CELL_PX = 16
DEFAULT_RADIUS = 2.0

# the 18 search-target categories; the index is the task id.
TASKS = (
    "bottle", "bowl", "car", "chair", "clock", "cup", "fork", "keyboard", "knife",
    "laptop", "microwave", "mouse", "oven", "potted plant", "sink", "stop sign",
    "toilet", "tv",
)
N_TASKS = len(TASKS)
TASK_INDEX = {name: i for i, name in enumerate(TASKS)}

SALIENCY = "saliency"
HISTORY = "history"

DCBT_MAGIC = b"DCBT"
DCBT_VERSION = 1


def task_id(name: str) -> int:
    try:
        return TASK_INDEX[name]
    except KeyError:
        raise KeyError(f"unknown search task {name!r}; expected one of {', '.join(TASKS)}") from None


@dataclass(frozen=True)
class BeliefStack:
    channels: np.ndarray  # C x 20 x 32
    channel_names: tuple
    resolution_tag: str = "high"
    n_things: int | None = None  # leading 'thing' channels; the rest (minus aux) are 'stuff'

    def __post_init__(self):
        ch = np.asarray(self.channels, dtype=np.float64)
        object.__setattr__(self, "channels", ch)
        object.__setattr__(self, "channel_names", tuple(self.channel_names))
        if ch.ndim != 3 or ch.shape[1:] != (GRID_H, GRID_W):
            raise ValueError(f"belief stack must be C x {GRID_H} x {GRID_W}, got {ch.shape}")
        if len(self.channel_names) != ch.shape[0]:
            raise ValueError("channel_names length does not match channel count")

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]

    def index(self, name: str) -> int:
        try:
            return self.channel_names.index(name)
        except ValueError:
            raise KeyError(f"no channel named {name!r}") from None

    def with_channels(self, channels, names=None) -> "BeliefStack":
        return replace(self, channels=channels, channel_names=names if names is not None else self.channel_names)


@dataclass(frozen=True)
class ChannelGroups:
    target: tuple
    context_things: tuple
    stuff: tuple
    saliency: tuple = ()
    history: tuple = ()

    def as_dict(self) -> dict:
        return {
            "target": self.target,
            "context_things": self.context_things,
            "stuff": self.stuff,
            "saliency": self.saliency,
            "history": self.history,
        }


def channel_groups(stack: BeliefStack, task: str) -> ChannelGroups:
    """Partition channels into target / other things / stuff / auxiliary groups."""
    names = stack.channel_names
    aux_sal = tuple(i for i, n in enumerate(names) if n == SALIENCY)
    aux_hist = tuple(i for i, n in enumerate(names) if n == HISTORY)
    semantic = [i for i, n in enumerate(names) if n not in (SALIENCY, HISTORY)]
    n_things = stack.n_things if stack.n_things is not None else len(semantic)
    things, stuff = semantic[:n_things], semantic[n_things:]
    t = stack.index(task)
    if t not in things:
        raise ValueError(f"task channel {task!r} is not a thing category")
    return ChannelGroups(
        target=(t,),
        context_things=tuple(i for i in things if i != t),
        stuff=tuple(stuff),
        saliency=aux_sal,
        history=aux_hist,
    )


# --------------------------------------------------------------------------
# fixation masks

_ROWS, _COLS = np.mgrid[0:GRID_H, 0:GRID_W]


def pixel_to_cell(x: float, y: float) -> tuple[int, int]:
    col = int(np.clip(np.floor(x / CELL_PX), 0, GRID_W - 1))
    row = int(np.clip(np.floor(y / CELL_PX), 0, GRID_H - 1))
    return row, col


def make_fixation_mask(cell, radius_cells: float = DEFAULT_RADIUS) -> np.ndarray:
    """Binary 20 x 32 disc of cells whose centres lie within ``radius_cells``."""
    r, c = cell
    if not (0 <= r < GRID_H and 0 <= c < GRID_W):
        raise ValueError(f"fixation cell {cell} outside the {GRID_H}x{GRID_W} grid")
    if radius_cells <= 0:
        raise ValueError("mask radius must be positive")
    d2 = (_ROWS - r) ** 2 + (_COLS - c) ** 2
    return d2 <= radius_cells * radius_cells


def union_masks(masks) -> np.ndarray:
    out = np.zeros((GRID_H, GRID_W), dtype=bool)
    for m in masks:
        out |= np.asarray(m, dtype=bool)
    return out


def history_mask(cells, radius_cells: float = DEFAULT_RADIUS) -> np.ndarray:
    return union_masks(make_fixation_mask(c, radius_cells) for c in cells)


def _check_aligned(low: BeliefStack, high: BeliefStack):
    if low.channel_names != high.channel_names or low.channels.shape != high.channels.shape:
        raise ValueError("low- and high-resolution stacks are not channel-aligned")


def blend(low: np.ndarray, high: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask[None], high, low)


def dcb_state(low: BeliefStack, high: BeliefStack, fixation_history, radius: float = DEFAULT_RADIUS) -> BeliefStack:
    """Belief state after the given fixation cells (closed form)."""
    _check_aligned(low, high)
    cells = list(fixation_history)
    if not cells:
        return low
    m = history_mask(cells, radius)
    return low.with_channels(blend(low.channels, high.channels, m))


def dcb_recurrent(low: BeliefStack, high: BeliefStack, fixation_history, radius: float = DEFAULT_RADIUS) -> BeliefStack:
    """Same state built by applying the one-fixation update in sequence."""
    _check_aligned(low, high)
    b = low.channels
    for cell in fixation_history:
        m = make_fixation_mask(cell, radius)[None].astype(np.float64)
        b = m * high.channels + (1.0 - m) * b
    return low.with_channels(b)


def ablate_channels(state: BeliefStack, channels) -> BeliefStack:
    idx = []
    for ch in channels:
        if isinstance(ch, str):
            idx.append(state.index(ch))
        else:
            if not 0 <= int(ch) < state.n_channels:
                raise KeyError(f"channel index {ch} out of range")
            idx.append(int(ch))
    if not idx:
        return state
    out = state.channels.copy()
    out[idx] = 0.0
    return state.with_channels(out)


def attach_auxiliary_channels(state: BeliefStack, saliency_map=None, history_map=None) -> BeliefStack:
    """Append saliency then history maps as extra channels."""
    extra, names = [], []
    for nm, m in ((SALIENCY, saliency_map), (HISTORY, history_map)):
        if m is None:
            continue
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (GRID_H, GRID_W):
            raise ValueError(f"{nm} map must be {GRID_H}x{GRID_W}, got {m.shape}")
        if m.min() < 0 or m.max() > 1:
            raise ValueError(f"{nm} map values must lie in [0, 1]")
        extra.append(m)
        names.append(nm)
    if not extra:
        return state
    n_things = state.n_things
    if n_things is None:
        n_things = sum(1 for n in state.channel_names if n not in (SALIENCY, HISTORY))
    return replace(
        state,
        channels=np.concatenate([state.channels, np.stack(extra)]),
        channel_names=state.channel_names + tuple(names),
        n_things=n_things,
    )


# --------------------------------------------------------------------------
# belief tensor files


def write_belief_file(path, stack: BeliefStack) -> None:
    """DCBT layout: magic, u16 version, u16 C, u16 H, u16 W, C NUL-terminated
    names, then C*H*W little-endian float32 values."""
    c, h, w = stack.channels.shape
    with open(path, "wb") as fh:
        fh.write(DCBT_MAGIC)
        fh.write(struct.pack("<HHHH", DCBT_VERSION, c, h, w))
        for name in stack.channel_names:
            fh.write(name.encode() + b"\x00")
        fh.write(stack.channels.astype("<f4").tobytes())


def read_belief_file(path, resolution_tag: str = "high", n_things: int | None = None) -> BeliefStack:
    data = Path(path).read_bytes()
    if data[:4] != DCBT_MAGIC:
        raise ValueError(f"{path}: bad magic, not a DCBT belief tensor")
    version, c, h, w = struct.unpack_from("<HHHH", data, 4)
    if version != DCBT_VERSION:
        raise ValueError(f"{path}: unsupported DCBT version {version}")
    if (h, w) != (GRID_H, GRID_W):
        raise ValueError(f"{path}: spatial size {h}x{w}, expected {GRID_H}x{GRID_W}")
    off = 12
    names = []
    for _ in range(c):
        end = data.index(b"\x00", off)
        names.append(data[off:end].decode())
        off = end + 1
    values = np.frombuffer(data, dtype="<f4", count=c * h * w, offset=off).reshape(c, h, w)
    if not np.all(np.isfinite(values)) or values.min() < 0.0 or values.max() > 1.0:
        raise ValueError(f"{path}: belief values outside [0, 1]")
    return BeliefStack(values.astype(np.float64), tuple(names), resolution_tag, n_things)
