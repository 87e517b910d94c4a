"""Small helpers shared by the three training tasks."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch

from .errors import DivergenceError

torch.use_deterministic_algorithms(True)


def epoch_generator(seed: int, epoch: int, stream: int = 0) -> torch.Generator:
    # independent per-epoch streams keep resumed runs identical to uninterrupted ones
    g = torch.Generator()
    g.manual_seed((seed * 1_000_003 + epoch * 7919 + stream) % (2**63))
    return g


def init_seed(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


def check_finite(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise DivergenceError(f"{what} became non-finite ({value})")
    return value


def batches(n: int, batch_size: int, generator: torch.Generator):
    order = torch.randperm(n, generator=generator)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


class TSVLog:
    """Append-only tab-separated training log."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.rows: list[tuple] = []

    def reset(self):
        if self.path is not None:
            self.path.write_text("")

    def write(self, *row):
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write("\t".join(_fmt(x) for x in row) + "\n")


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def to_float(x: np.ndarray | torch.Tensor, dtype=torch.float32) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.from_numpy(np.asarray(x)).to(dtype)
