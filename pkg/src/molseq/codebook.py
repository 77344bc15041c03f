"""Quantile codebooks: equal-count bin edges per channel, encoding/decoding,
and the joint 3D position grid."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .frames import MolecularFrame

# Default bin counts per channel.
POS_JOINT_BINS = 10  # per axis; 10^3 grid cells
POS_1D_BINS = 512
FORCE_BINS = 4096
ENERGY_BINS = 2048


class DuplicateEdgeError(ValueError):
    """Too few distinct values to cut K equal-count bins for a channel."""

    def __init__(self, channel: str, k: int):
        super().__init__(f"channel {channel!r}: duplicate quantile edges for K={k}")
        self.channel = channel


@dataclass
class QuantileEdges:
    """K-1 interior edges plus a per-bin representative (bin training median)."""

    edges: np.ndarray  # shape (K-1,), non-decreasing
    representatives: np.ndarray  # shape (K,)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        self.representatives = np.asarray(self.representatives, dtype=np.float64)
        if np.any(np.diff(self.edges) < 0):
            raise ValueError("edges must be non-decreasing")

    @property
    def n_bins(self) -> int:
        return len(self.edges) + 1


def fit_quantile_edges(values, k: int, channel: str = "values") -> QuantileEdges:
    """Fit K equal-count bins: interior edges at the i/K sample quantiles.

    Raises DuplicateEdgeError when ties collapse two edges onto the same value.
    """
    vals = np.asarray(values, dtype=np.float64).ravel()
    if vals.size == 0:
        raise ValueError(f"channel {channel!r}: no values to fit")
    if k < 2:
        raise ValueError(f"K must be >= 2, got {k}")
    if not np.all(np.isfinite(vals)):
        raise ValueError(f"channel {channel!r}: non-finite training values")
    if np.unique(vals).size < k:
        raise DuplicateEdgeError(channel, k)
    qs = np.arange(1, k) / k
    edges = np.quantile(vals, qs)
    if np.any(np.diff(edges) <= 0):
        raise DuplicateEdgeError(channel, k)
    svals = np.sort(vals)
    # Ties broken toward the lower bin, matching assign_bins.
    idx = np.searchsorted(edges, svals, side="left")
    reps = np.empty(k)
    for b in range(k):
        members = svals[idx == b]
        if members.size == 0:
            # Degenerate empty interior bin: fall back to the edge midpoint.
            lo = edges[b - 1] if b > 0 else svals[0]
            hi = edges[b] if b < k - 1 else svals[-1]
            reps[b] = 0.5 * (lo + hi)
        else:
            reps[b] = np.median(members)
    return QuantileEdges(edges=edges, representatives=reps)


def assign_bins(x, edges: QuantileEdges) -> np.ndarray:
    """Vectorized bin assignment; out-of-range values clamp to edge bins."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite value passed to encoder")
    return np.searchsorted(edges.edges, arr, side="left").astype(np.int64)


def encode_value(x: float, edges: QuantileEdges) -> int:
    """Bin id in [0, K-1] for one value; clamps below/above the edge range."""
    return int(assign_bins(x, edges))


def decode_bin(bin_id: int, edges: QuantileEdges) -> float:
    """Representative value (training median) of a bin."""
    if not 0 <= bin_id < edges.n_bins:
        raise ValueError(f"bin id {bin_id} out of range [0, {edges.n_bins})")
    return float(edges.representatives[bin_id])


@dataclass
class QuantileCodebook:
    """All fitted channels: joint-grid and 1D position axes, forces, energy."""

    position_axis_edges: list[QuantileEdges]  # 3 x K=10 (joint grid)
    position_1d_edges: Optional[list[QuantileEdges]] = None  # 3 x K=512
    force_axis_edges: Optional[list[QuantileEdges]] = None  # 3 x K=4096
    energy_edges: Optional[QuantileEdges] = None  # K=2048

    def encode_position(self, xyz) -> int:
        """Joint 3D grid cell id: bx*100 + by*10 + bz, in [0, 999]."""
        xyz = np.asarray(xyz, dtype=np.float64)
        k = self.position_axis_edges[0].n_bins
        bx = encode_value(xyz[0], self.position_axis_edges[0])
        by = encode_value(xyz[1], self.position_axis_edges[1])
        bz = encode_value(xyz[2], self.position_axis_edges[2])
        return (bx * k + by) * k + bz

    def decode_position_cell(self, cell_id: int) -> np.ndarray:
        k = self.position_axis_edges[0].n_bins
        if not 0 <= cell_id < k**3:
            raise ValueError(f"cell id {cell_id} out of range [0, {k**3})")
        bx, rem = divmod(cell_id, k * k)
        by, bz = divmod(rem, k)
        return np.array(
            [
                decode_bin(bx, self.position_axis_edges[0]),
                decode_bin(by, self.position_axis_edges[1]),
                decode_bin(bz, self.position_axis_edges[2]),
            ]
        )


def encode_position(xyz, codebook: QuantileCodebook) -> int:
    return codebook.encode_position(xyz)


def fit_codebook(
    frames: Sequence[MolecularFrame],
    pos_joint_bins: int = POS_JOINT_BINS,
    pos_1d_bins: int = POS_1D_BINS,
    force_bins: int = FORCE_BINS,
    energy_bins: int = ENERGY_BINS,
    fit_forces: bool = True,
    fit_energy: bool = True,
    fit_pos_1d: bool = True,
) -> QuantileCodebook:
    """Fit every channel independently from pooled training values."""
    if not frames:
        raise ValueError("no frames to fit")
    positions = np.concatenate([f.positions for f in frames], axis=0)
    axis_names = "xyz"
    pos_joint = [
        fit_quantile_edges(positions[:, a], pos_joint_bins, f"pos_joint_{axis_names[a]}")
        for a in range(3)
    ]
    pos_1d = None
    if fit_pos_1d:
        pos_1d = [
            fit_quantile_edges(positions[:, a], pos_1d_bins, f"pos_1d_{axis_names[a]}")
            for a in range(3)
        ]
    force = None
    if fit_forces:
        if any(f.forces is None for f in frames):
            raise ValueError("force channel requested but some frames lack forces")
        all_forces = np.concatenate([f.forces for f in frames], axis=0)
        force = [
            fit_quantile_edges(all_forces[:, a], force_bins, f"force_{axis_names[a]}")
            for a in range(3)
        ]
    energy = None
    if fit_energy:
        if any(f.energy is None for f in frames):
            raise ValueError("energy channel requested but some frames lack energy")
        energies = np.array([f.energy for f in frames])
        energy = fit_quantile_edges(energies, energy_bins, "energy")
    return QuantileCodebook(
        position_axis_edges=pos_joint,
        position_1d_edges=pos_1d,
        force_axis_edges=force,
        energy_edges=energy,
    )


def _edges_to_dict(e: QuantileEdges) -> dict:
    return {
        "K": e.n_bins,
        "edges": e.edges.tolist(),
        "representatives": e.representatives.tolist(),
    }


def _edges_from_dict(d: dict) -> QuantileEdges:
    e = QuantileEdges(
        edges=np.array(d["edges"], dtype=np.float64),
        representatives=np.array(d["representatives"], dtype=np.float64),
    )
    if e.n_bins != d["K"]:
        raise ValueError("codebook K inconsistent with edge count")
    return e


def codebook_to_dict(cb: QuantileCodebook) -> dict:
    doc: dict = {}
    for name, group in (
        ("pos_joint", cb.position_axis_edges),
        ("pos_1d", cb.position_1d_edges),
        ("force", cb.force_axis_edges),
    ):
        if group is not None:
            for a, e in zip("xyz", group):
                doc[f"{name}_{a}"] = _edges_to_dict(e)
    if cb.energy_edges is not None:
        doc["energy"] = _edges_to_dict(cb.energy_edges)
    return doc


def codebook_from_dict(doc: dict) -> QuantileCodebook:
    def group(name):
        keys = [f"{name}_{a}" for a in "xyz"]
        if not all(k in doc for k in keys):
            return None
        return [_edges_from_dict(doc[k]) for k in keys]

    pos_joint = group("pos_joint")
    if pos_joint is None:
        raise ValueError("codebook missing joint position channels")
    return QuantileCodebook(
        position_axis_edges=pos_joint,
        position_1d_edges=group("pos_1d"),
        force_axis_edges=group("force"),
        energy_edges=_edges_from_dict(doc["energy"]) if "energy" in doc else None,
    )


def save_codebook(cb: QuantileCodebook, path):
    with open(path, "w") as fh:
        json.dump(codebook_to_dict(cb), fh)


def load_codebook(path) -> QuantileCodebook:
    with open(path) as fh:
        return codebook_from_dict(json.load(fh))


def codebook_hash(cb: QuantileCodebook) -> str:
    """Stable content hash used to pair checkpoints with their codebook."""
    payload = json.dumps(codebook_to_dict(cb), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()
