"""Navigation metrics (TL, NE, OSR, SR, SPL) and world-model prediction statistics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError
from .graphworld import World, shortest_path

REPORT_COLUMNS = ("split", "seed", "variant", "supervision", "TL", "NE", "OSR", "SR", "SPL", "mwm_cos", "mwm_mse")


@dataclass
class EpisodeMetrics:
    tl: float
    ne: float
    osr: float
    sr: float
    spl: float


@dataclass
class MetricsReport:
    rows: list[EpisodeMetrics]
    threshold: float

    def _mean(self, attr: str) -> float:
        return float(np.mean([getattr(r, attr) for r in self.rows])) if self.rows else math.nan

    @property
    def tl(self) -> float:
        return self._mean("tl")

    @property
    def ne(self) -> float:
        return self._mean("ne")

    @property
    def osr(self) -> float:
        return self._mean("osr")

    @property
    def sr(self) -> float:
        return self._mean("sr")

    @property
    def spl(self) -> float:
        return self._mean("spl")

    def aggregate(self) -> dict:
        return {"TL": self.tl, "NE": self.ne, "OSR": self.osr, "SR": self.sr, "SPL": self.spl}


def episode_metrics(world: World, nodes: Sequence[int], traveled: float, goal: int, start: int,
                    threshold: float = 3.0) -> EpisodeMetrics:
    if not nodes:
        raise ContractError("empty trajectory")
    if threshold <= 0:
        raise ContractError("threshold must be positive")
    ne = world.distance(nodes[-1], goal)
    sr = 1.0 if ne <= threshold else 0.0
    osr = 1.0 if min(world.distance(n, goal) for n in nodes) <= threshold else 0.0
    ell = shortest_path(world, start, goal)[1]
    if max(traveled, ell) == 0.0:
        spl = sr
    else:
        spl = sr * ell / max(traveled, ell)
    return EpisodeMetrics(traveled, ne, osr, sr, spl)


def compute_metrics(trajs: Sequence, worlds, threshold: float = 3.0) -> MetricsReport:
    """Per-episode TL/NE/OSR/SR/SPL; ``worlds`` is one World or a list aligned with ``trajs``."""
    if threshold <= 0:
        raise ContractError("threshold must be positive")
    if isinstance(worlds, World):
        worlds = [worlds] * len(trajs)
    if len(worlds) != len(trajs):
        raise ContractError("need one world per trajectory")
    rows = [episode_metrics(w, t.nodes, t.path_length, t.episode.goal, t.episode.start, threshold)
            for t, w in zip(trajs, worlds)]
    return MetricsReport(rows, threshold)


@dataclass
class PredictionStats:
    cosines: list = field(default_factory=list)
    mses: list = field(default_factory=list)
    zero_norm: int = 0

    @property
    def mean_cosine(self) -> float:
        return float(np.mean(self.cosines)) if self.cosines else math.nan

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.mses)) if self.mses else math.nan

    def histograms(self, bins: int = 20) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """Equal-width (counts, edges) histograms; cosine bins span [-1, 1]."""
        out = {"cosine": np.histogram(self.cosines, bins=bins, range=(-1.0, 1.0))}
        hi = max(self.mses) if self.mses and max(self.mses) > 0 else 1.0
        out["mse"] = np.histogram(self.mses, bins=bins, range=(0.0, hi))
        return out


def prediction_stats(preds: Sequence, labels: Sequence) -> PredictionStats:
    """Per-pair cosine similarity and MSE. Zero-norm pairs keep their MSE but are
    excluded from the cosine list and counted in ``zero_norm``."""
    if len(preds) != len(labels):
        raise DimensionError(f"{len(preds)} predictions vs {len(labels)} labels")
    stats = PredictionStats()
    for p, l in zip(preds, labels):
        p = np.asarray(getattr(p, "data", p), dtype=np.float64).reshape(-1)
        l = np.asarray(getattr(l, "data", l), dtype=np.float64).reshape(-1)
        if p.shape != l.shape:
            raise DimensionError(f"prediction {p.shape} vs label {l.shape}")
        stats.mses.append(float(np.mean((p - l) ** 2)))
        npn, nl = np.linalg.norm(p), np.linalg.norm(l)
        if npn == 0 or nl == 0:
            stats.zero_norm += 1
            continue
        stats.cosines.append(float(np.clip(p @ l / (npn * nl), -1.0, 1.0)))
    return stats


def write_histogram_csv(path, stats: PredictionStats, bins: int = 20) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quantity", "bin_lo", "bin_hi", "count"])
        for name, (counts, edges) in stats.histograms(bins).items():
            for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                w.writerow([name, repr(float(lo)), repr(float(hi)), int(c)])
