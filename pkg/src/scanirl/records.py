from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Scanpath:
    """Ordered fixations in 320 x 512 image pixels; index 0 is the start fixation."""

    xy: np.ndarray  # n x 2, columns (x, y)
    image_id: str = ""
    task: str = ""
    subject: str | None = None
    source: str = "human"
    durations: np.ndarray | None = None

    def __post_init__(self):
        xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        if len(xy) == 0:
            raise ValueError("scanpath must contain at least one fixation")
        object.__setattr__(self, "xy", xy)

    def __len__(self):
        return len(self.xy)

    @property
    def key(self):
        return (self.image_id, self.task)

    def to_json(self) -> dict:
        out = {
            "image": self.image_id,
            "task": self.task,
            "subject": self.subject,
            "source": self.source,
            "fixations": [{"x": float(x), "y": float(y)} for x, y in self.xy],
        }
        if self.durations is not None:
            for f, t in zip(out["fixations"], self.durations):
                f["t"] = float(t)
        return out

    @classmethod
    def from_json(cls, d: dict) -> "Scanpath":
        fx = d["fixations"]
        dur = None
        if fx and all("t" in f for f in fx):
            dur = np.array([f["t"] for f in fx], dtype=np.float64)
        return cls(
            np.array([[f["x"], f["y"]] for f in fx], dtype=np.float64),
            image_id=d.get("image", ""),
            task=d.get("task", ""),
            subject=d.get("subject"),
            source=d.get("source", "human"),
            durations=dur,
        )
