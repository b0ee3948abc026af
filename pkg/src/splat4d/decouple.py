"""Threshold partition of a scene into dynamic and static Gaussians."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .render import ContractError, RenderOutput, render
from .scene import Camera, GaussianSet

TRAINING = "training"
INFERENCE = "inference"


@dataclass(frozen=True)
class Partition:
    dynamic_indices: np.ndarray
    static_indices: np.ndarray
    unassigned_indices: np.ndarray
    tau_d: float
    tau_s: float
    mode: str

    @property
    def n(self) -> int:
        return self.dynamic_indices.size + self.static_indices.size + self.unassigned_indices.size

    def summary(self) -> dict:
        return {
            "mode": self.mode, "tau_d": self.tau_d, "tau_s": self.tau_s,
            "dynamic": int(self.dynamic_indices.size),
            "static": int(self.static_indices.size),
            "unassigned": int(self.unassigned_indices.size),
        }


def partition_weights(w, mode: str = TRAINING, tau_d: float = 0.5, tau_s: float = 0.5) -> Partition:
    """Partition a vector of dynamic coefficients.

    training: dynamic iff w >= tau (tau_d must equal tau_s), static otherwise.
    inference: dynamic iff w > tau_d, static iff w < tau_s, rest unassigned.
    """
    if not (0.0 <= tau_s <= tau_d <= 1.0):
        raise ContractError(f"need 0 <= tau_s <= tau_d <= 1, got tau_s={tau_s}, tau_d={tau_d}")
    w = np.asarray(w, dtype=np.float64)
    if mode == TRAINING:
        if tau_d != tau_s:
            raise ContractError("training mode uses a single threshold (tau_d == tau_s)")
        dyn = w >= tau_d
        sta = ~dyn
        una = np.zeros_like(dyn)
    elif mode == INFERENCE:
        dyn = w > tau_d
        sta = w < tau_s
        una = ~(dyn | sta)
    else:
        raise ContractError(f"unknown partition mode {mode!r}")
    return Partition(np.flatnonzero(dyn), np.flatnonzero(sta), np.flatnonzero(una), float(tau_d), float(tau_s), mode)


def partition(scene: GaussianSet, mode: str = TRAINING, tau_d: float = 0.5, tau_s: float = 0.5) -> Partition:
    return partition_weights(scene.w, mode, tau_d, tau_s)


def render_split(scene: GaussianSet, camera: Camera, t: float, part: Partition,
                 **render_kw) -> tuple[RenderOutput, RenderOutput]:
    """(dynamic-only render, static-only render)."""
    if part.n != len(scene):
        raise ContractError(f"partition covers {part.n} Gaussians, scene has {len(scene)}")
    dyn = render(scene, camera, t, subset_filter=part.dynamic_indices, **render_kw)
    sta = render(scene, camera, t, subset_filter=part.static_indices, **render_kw)
    return dyn, sta


@dataclass
class CoeffHistogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    gap_mass: float

    def to_dict(self) -> dict:
        return {
            "bin_edges": [float(e) for e in self.bin_edges],
            "counts": [int(c) for c in self.counts],
            "gap_mass": float(self.gap_mass),
        }


def gap_mass(w, tau_s: float = 0.2, tau_d: float = 0.85) -> float:
    """Fraction of coefficients in (tau_s, tau_d]."""
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        return 0.0
    return float(np.mean((w > tau_s) & (w <= tau_d)))


def coeff_histogram(scene_or_w, bins: int = 20, tau_s: float = 0.2, tau_d: float = 0.85) -> CoeffHistogram:
    """Histogram of w over uniform bins on [0, 1] plus the gap mass."""
    if bins < 2:
        raise ContractError("bins must be >= 2")
    w = scene_or_w.w if isinstance(scene_or_w, GaussianSet) else np.asarray(scene_or_w, dtype=np.float64)
    # bin k holds [k/bins, (k+1)/bins); index by floor(w * bins) so values on an
    # edge land in the bin that starts there regardless of edge rounding
    k = np.clip(np.floor(w * bins).astype(np.int64), 0, bins - 1)
    counts = np.bincount(k, minlength=bins)
    edges = np.arange(bins + 1) / bins
    return CoeffHistogram(edges, counts, gap_mass(w, tau_s, tau_d))
