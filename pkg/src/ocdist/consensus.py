"""Per-agent averages of gradients and Hessians."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

MODES = ("exact", "linear")


@dataclass(frozen=True)
class ConsensusConfig:
    """``exact`` hands every agent the true mean; ``linear`` applies ``W`` ``rounds`` times."""

    mode: str = "exact"
    rounds: int = 1
    mixing: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"consensus mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "linear":
            if int(self.rounds) != self.rounds or self.rounds < 1:
                raise ValueError(f"linear consensus needs rounds >= 1, got {self.rounds}")
            if self.mixing is None:
                raise ValueError("linear consensus needs a mixing matrix")


def average_vectors(values, cfg: ConsensusConfig):
    """Average the rows of ``values`` (one per agent) across agents.

    Extra trailing axes are averaged entrywise, so matrices work too.
    """
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    if cfg.mode == "exact":
        return np.broadcast_to(values.mean(axis=0), values.shape).copy()
    W = np.asarray(cfg.mixing)
    if W.shape != (n, n):
        raise ValueError(f"mixing matrix has shape {W.shape}, expected ({n}, {n})")
    flat = values.reshape(n, -1)
    for _ in range(cfg.rounds):
        flat = W @ flat
    return flat.reshape(values.shape)


def average_matrices(values, cfg: ConsensusConfig):
    """Entrywise :func:`average_vectors` on per-agent symmetric matrices."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 3 or values.shape[1] != values.shape[2]:
        raise ValueError(f"expected per-agent square matrices, got shape {values.shape}")
    out = average_vectors(values, cfg)
    return (out + np.swapaxes(out, 1, 2)) / 2.0


def deviation(values):
    """Frobenius distance of per-agent values from their mean."""
    values = np.asarray(values, dtype=float)
    return float(np.linalg.norm(values - values.mean(axis=0)))
