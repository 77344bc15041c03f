"""Attention analytics, equivariance measurement, log-probability scoring,
and scaling-law / IsoFLOP fitting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import least_squares, minimize_scalar

from . import autodiff as ad
from .frames import MolecularFrame, random_rotation, augment_rotate
from .model import AttentionRecord, ModelConfig, forward_causal
from .tokenizer import (
    DualSequence,
    TAG_CHARGE,
    TAG_ELEMENT,
    TAG_POSITION,
    TAG_SPIN,
)

BUCKETS = ("positions", "charge", "spin", "delimiter")


def bucket_tokens(seq: DualSequence) -> list[str]:
    """Semantic bucket per token: positions / charge / spin / delimiter."""
    if seq.mode != "finetune":
        raise ValueError("token-type buckets are defined on finetune sequences")
    out = []
    for tag in seq.type_tags:
        if tag in (TAG_ELEMENT, TAG_POSITION):
            out.append("positions")
        elif tag == TAG_CHARGE:
            out.append("charge")
        elif tag == TAG_SPIN:
            out.append("spin")
        else:
            out.append("delimiter")
    return out


def atom_token_indices(n_atoms: int) -> np.ndarray:
    """Sequence index of each atom's position-cell token under the fixed
    layout (BOS CHARGE SPIN [POS] then element/position pairs)."""
    return 5 + 2 * np.arange(n_atoms)


@dataclass
class TokenTypeMass:
    """fractions[layer, query_bucket, key_bucket]; rows sum to 1."""

    fractions: np.ndarray
    buckets: tuple = BUCKETS


def attention_by_token_type(record: AttentionRecord, buckets: Sequence[str]) -> TokenTypeMass:
    """Head-averaged attention mass flowing between semantic buckets."""
    t = len(buckets)
    masks = [np.array([b == name for b in buckets]) for name in BUCKETS]
    out = np.full((record.n_layers, len(BUCKETS), len(BUCKETS)), np.nan)
    for layer, scores in enumerate(record.scores):
        if scores.shape[-1] != t:
            raise ValueError(
                f"layer {layer}: attention size {scores.shape[-1]} != {t} buckets"
            )
        mean_attn = scores.mean(axis=0)  # (T, T)
        for qi, qmask in enumerate(masks):
            if not qmask.any():
                continue
            rows = mean_attn[qmask]
            total = rows.sum()
            for ki, kmask in enumerate(masks):
                out[layer, qi, ki] = rows[:, kmask].sum() / total
    return TokenTypeMass(fractions=out)


@dataclass
class Curve:
    x: np.ndarray
    y: np.ndarray


def _quantile_bucket_means(xs: np.ndarray, ys: np.ndarray, n_buckets: int) -> Curve:
    """Bucket (x, y) pairs by global x quantiles; mean y per bucket, x at the
    bucket midpoint."""
    if len(xs) == 0:
        raise ValueError("no pairs to bucket")
    if len(xs) < n_buckets:
        raise ValueError(f"{len(xs)} pairs < {n_buckets} quantile buckets")
    edges = np.unique(np.quantile(xs, np.arange(1, n_buckets) / n_buckets))
    idx = np.searchsorted(edges, xs, side="left")
    lo, hi = xs.min(), xs.max()
    bounds = np.concatenate([[lo], edges, [hi]])
    mids, means = [], []
    for b in range(len(edges) + 1):
        sel = idx == b
        if not sel.any():
            continue
        mids.append(0.5 * (bounds[b] + bounds[b + 1]))
        means.append(ys[sel].mean())
    return Curve(x=np.array(mids), y=np.array(means))


def _pair_scores(record_layer: np.ndarray, frame: MolecularFrame, head: Optional[int]):
    """(distance, attention) over ordered atom pairs i != j for one frame."""
    n = frame.n_atoms
    tok = atom_token_indices(n)
    attn = record_layer.mean(axis=0) if head is None else record_layer[head]
    sub = attn[np.ix_(tok, tok)]
    diff = frame.positions[:, None, :] - frame.positions[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=-1))
    off = ~np.eye(n, dtype=bool)
    return dist[off], sub[off]


def attention_vs_distance(
    records: Sequence[AttentionRecord],
    frames: Sequence[MolecularFrame],
    n_quantiles: int = 20,
) -> list[Curve]:
    """Per layer: mean head-averaged attention within interatomic distance
    quantiles, pooled over frames."""
    n_layers = records[0].n_layers
    curves = []
    for layer in range(n_layers):
        ds, ss = [], []
        for rec, frame in zip(records, frames):
            d, s = _pair_scores(rec.scores[layer], frame, head=None)
            ds.append(d)
            ss.append(s)
        xs = np.concatenate(ds)
        ys = np.concatenate(ss)
        curves.append(_quantile_bucket_means(xs, ys, min(n_quantiles, len(xs))))
    return curves


def effective_radius(attention_row: np.ndarray, distances: np.ndarray, delta: float = 0.9) -> float:
    """Smallest radius whose atoms carry at least `delta` of the (renormalized)
    attention mass; distance ties accumulate together."""
    row = np.asarray(attention_row, dtype=np.float64)
    distances = np.asarray(distances, dtype=np.float64)
    if row.size == 0:
        raise ValueError("empty attention row")
    if not 0 < delta <= 1:
        raise ValueError(f"delta must be in (0, 1], got {delta}")
    total = row.sum()
    if total <= 0:
        raise ValueError("attention row has no mass")
    row = row / total
    order = np.argsort(distances, kind="stable")
    d_sorted = distances[order]
    m_sorted = row[order]
    cum = 0.0
    i = 0
    n = len(row)
    last_nonzero = 0.0
    while i < n:
        j = i
        group = 0.0
        while j < n and d_sorted[j] == d_sorted[i]:
            group += m_sorted[j]
            j += 1
        cum += group
        if group > 0:
            last_nonzero = d_sorted[i]
        if cum >= delta - 1e-12:
            return float(d_sorted[i])
        i = j
    return float(last_nonzero)


def _atom_rows(record_layer: np.ndarray, frame: MolecularFrame):
    """Head-averaged attention restricted to atom tokens, plus the distance
    matrix (self at 0)."""
    n = frame.n_atoms
    tok = atom_token_indices(n)
    attn = record_layer.mean(axis=0)[np.ix_(tok, tok)]
    diff = frame.positions[:, None, :] - frame.positions[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=-1))
    return attn, dist


def radius_vs_density(
    records: Sequence[AttentionRecord],
    frames: Sequence[MolecularFrame],
    delta: float = 0.9,
    n_percentiles: int = 10,
) -> list[Curve]:
    """Per layer: mean effective radius bucketed by median-neighbor-distance
    percentile."""
    n_layers = records[0].n_layers
    curves = []
    for layer in range(n_layers):
        mnds, radii = [], []
        for rec, frame in zip(records, frames):
            attn, dist = _atom_rows(rec.scores[layer], frame)
            n = frame.n_atoms
            for i in range(n):
                radii.append(effective_radius(attn[i], dist[i], delta))
                if n > 1:
                    mnds.append(float(np.median(np.delete(dist[i], i))))
                else:
                    mnds.append(0.0)
        xs, ys = np.array(mnds), np.array(radii)
        curves.append(_quantile_bucket_means(xs, ys, min(n_percentiles, len(xs))))
    return curves


def per_head_curves(
    records: Sequence[AttentionRecord],
    frames: Sequence[MolecularFrame],
    n_quantiles: int = 20,
) -> dict:
    """Per (layer, head): attention-vs-distance and attention-vs-neighbor-rank
    curves, with no head averaging."""
    n_layers = records[0].n_layers
    n_heads = records[0].scores[0].shape[0]
    out = {}
    for layer in range(n_layers):
        for head in range(n_heads):
            ds, ss = [], []
            rank_scores: dict[int, list[float]] = {}
            for rec, frame in zip(records, frames):
                d, s = _pair_scores(rec.scores[layer], frame, head=head)
                ds.append(d)
                ss.append(s)
                n = frame.n_atoms
                tok = atom_token_indices(n)
                attn = rec.scores[layer][head][np.ix_(tok, tok)]
                diff = frame.positions[:, None, :] - frame.positions[None, :, :]
                dist = np.sqrt((diff**2).sum(axis=-1))
                for i in range(n):
                    others = np.delete(np.arange(n), i)
                    weights = attn[i, others]
                    total = weights.sum()
                    if total <= 0:
                        continue
                    weights = weights / total
                    order = np.argsort(dist[i, others], kind="stable")
                    for r, j in enumerate(order, start=1):
                        rank_scores.setdefault(r, []).append(weights[j])
            xs = np.concatenate(ds)
            ys = np.concatenate(ss)
            dist_curve = _quantile_bucket_means(xs, ys, min(n_quantiles, len(xs)))
            ranks = sorted(rank_scores)
            rank_curve = Curve(
                x=np.array(ranks, dtype=float),
                y=np.array([np.mean(rank_scores[r]) for r in ranks]),
            )
            out[(layer, head)] = {"distance": dist_curve, "rank": rank_curve}
    return out


# ---------------------------------------------------------------------------
# Equivariance


def equivariance_cossim(
    force_fn: Callable[[MolecularFrame], np.ndarray],
    frame: MolecularFrame,
    n_rotations: int,
    rng: np.random.Generator,
) -> tuple[float, int]:
    """Mean over sampled R of cossim(R F(r), F(R r)); returns (mean, n_excluded)
    where degenerate zero-force samples are excluded and counted."""
    sims = []
    excluded = 0
    base = np.asarray(force_fn(frame), dtype=np.float64)
    for _ in range(n_rotations):
        r = random_rotation(rng)
        rotated = np.asarray(force_fn(augment_rotate(frame, r)), dtype=np.float64)
        a = (base @ r.T).ravel()
        b = rotated.ravel()
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            excluded += 1
            continue
        sims.append(float(a @ b / (na * nb)))
    mean = float(np.mean(sims)) if sims else float("nan")
    return mean, excluded


def frame_average_forces(
    force_fn: Callable[[MolecularFrame], np.ndarray],
    frame: MolecularFrame,
    n_rotations: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Mean over sampled R of R^T F(R r): a symmetrized force predictor."""
    acc = np.zeros((frame.n_atoms, 3))
    for _ in range(n_rotations):
        r = random_rotation(rng)
        acc += np.asarray(force_fn(augment_rotate(frame, r))) @ r
    return acc / n_rotations


def make_frame_averaged(
    force_fn: Callable[[MolecularFrame], np.ndarray],
    n_rotations: int,
    seed: int,
) -> Callable[[MolecularFrame], np.ndarray]:
    """Wrap a predictor so every call frame-averages with a fixed rotation set."""

    def fn(frame: MolecularFrame) -> np.ndarray:
        return frame_average_forces(
            force_fn, frame, n_rotations, np.random.default_rng(seed)
        )

    return fn


# ---------------------------------------------------------------------------
# Log-probability scoring


def sequence_log_prob(params, model_config: ModelConfig, seq: DualSequence) -> float:
    """Sum of causal log-probabilities of the realized discrete tokens."""
    if seq.mode != "pretrain":
        raise ValueError("log-probability is defined for pretrain-mode sequences")
    logits = forward_causal(params, model_config, seq)
    x = np.asarray(logits.data, dtype=np.float64)[:-1]  # predictors for tokens 1..T-1
    targets = seq.token_ids[1:]
    m = x.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=-1))
    tok_logp = x[np.arange(len(targets)), targets] - lse
    return float(tok_logp.sum())


# ---------------------------------------------------------------------------
# Scaling laws


@dataclass
class ScalingFit:
    """Single power law L(N) = (N / n_c) ** alpha."""

    n_c: float
    alpha: float
    residuals: np.ndarray

    def predict(self, n) -> np.ndarray:
        return (np.asarray(n, dtype=float) / self.n_c) ** self.alpha


class DegenerateFitError(ValueError):
    pass


def fit_power_law(points: Sequence[tuple[float, float]]) -> ScalingFit:
    """Least squares on (ln N, ln L)."""
    if len(points) < 2:
        raise ValueError("need at least 2 points")
    n = np.array([p[0] for p in points], dtype=float)
    l = np.array([p[1] for p in points], dtype=float)
    if np.any(n <= 0) or np.any(l <= 0):
        raise ValueError("power-law fit needs positive N and L")
    x, y = np.log(n), np.log(l)
    a = np.vstack([x, np.ones_like(x)]).T
    (slope, intercept), *_ = np.linalg.lstsq(a, y, rcond=None)
    if slope == 0:
        raise DegenerateFitError("flat losses: alpha = 0")
    n_c = float(np.exp(-intercept / slope))
    resid = y - (slope * x + intercept)
    return ScalingFit(n_c=n_c, alpha=float(slope), residuals=resid)


@dataclass
class JointScalingFit:
    """L(N, D) = l_inf + a * N^-alpha + b * D^-beta."""

    l_inf: float
    a: float
    alpha: float
    b: float
    beta: float
    residual: float

    def predict(self, n, d) -> np.ndarray:
        n = np.asarray(n, dtype=float)
        d = np.asarray(d, dtype=float)
        return self.l_inf + self.a * n**-self.alpha + self.b * d**-self.beta


def fit_joint_scaling(
    points: Sequence[tuple[float, float, float]],
    n_starts: int = 16,
    seed: int = 0,
) -> JointScalingFit:
    """Nonlinear least squares in log space with multi-start; keeps the best
    residual."""
    if len(points) < 6:
        raise DegenerateFitError("need at least 6 (N, D, L) points")
    n = np.array([p[0] for p in points], dtype=float)
    d = np.array([p[1] for p in points], dtype=float)
    l = np.array([p[2] for p in points], dtype=float)
    if len(np.unique(n)) < 2 or len(np.unique(d)) < 2:
        raise DegenerateFitError("need at least 2 distinct values of N and of D")
    if np.any(l <= 0):
        raise ValueError("losses must be positive")
    if np.std(np.log(l)) < 1e-12:
        raise DegenerateFitError("all losses equal; exponents unidentifiable")
    log_l = np.log(l)
    l_min = l.min()

    def residuals(theta):
        l_inf, log_a, alpha, log_b, beta = theta
        pred = l_inf + np.exp(log_a) * n**-alpha + np.exp(log_b) * d**-beta
        return np.log(np.maximum(pred, 1e-300)) - log_l

    bounds = (
        [0.0, -50.0, 1e-6, -50.0, 1e-6],
        [l_min, 50.0, 5.0, 50.0, 5.0],
    )
    rng = np.random.default_rng(seed)
    starts = []
    for alpha0 in (0.2, 0.5, 1.0):
        for beta0 in (0.2, 0.5, 1.0):
            a0 = np.median(l) * np.median(n) ** alpha0
            b0 = np.median(l) * np.median(d) ** beta0
            starts.append(
                [0.5 * l_min, np.log(a0), alpha0, np.log(b0), beta0]
            )
    while len(starts) < n_starts:
        starts.append(
            [
                rng.uniform(0, 0.95) * l_min,
                rng.uniform(-2, 2) + np.log(np.median(l) * np.median(n) ** 0.5),
                rng.uniform(0.05, 2.0),
                rng.uniform(-2, 2) + np.log(np.median(l) * np.median(d) ** 0.5),
                rng.uniform(0.05, 2.0),
            ]
        )
    best = None
    for x0 in starts:
        x0 = np.clip(x0, bounds[0], bounds[1])
        try:
            sol = least_squares(
                residuals, x0, bounds=bounds, xtol=1e-15, ftol=1e-15, gtol=1e-15
            )
        except Exception:
            continue
        if best is None or sol.cost < best.cost:
            best = sol
    if best is None:
        raise DegenerateFitError("all optimizer starts failed")
    l_inf, log_a, alpha, log_b, beta = best.x
    return JointScalingFit(
        l_inf=float(l_inf),
        a=float(np.exp(log_a)),
        alpha=float(alpha),
        b=float(np.exp(log_b)),
        beta=float(beta),
        residual=float(best.cost),
    )


def default_flop_rule(n: float, d: float) -> float:
    return 6.0 * n * d


def isoflop_curve(
    fit: JointScalingFit,
    budget: float,
    flop_rule: Callable[[float, float], float] = default_flop_rule,
    n_min: float = 1e3,
    n_max: float = 1e12,
    n_grid: int = 257,
) -> tuple[np.ndarray, np.ndarray, float, float]:
    """Predicted loss versus model size at fixed compute.

    Returns (n_values, losses, n_optimal, loss_optimal); data budget D solves
    flop_rule(N, D) = budget for each grid N.
    """
    if budget <= 0:
        raise ValueError("budget must be positive")

    def tokens_for(n: float) -> float:
        # Monotone in D; bisection in log D.
        lo, hi = 0.0, 80.0  # log D in [1, e^80]
        if flop_rule(n, np.exp(lo)) > budget:
            raise ValueError(f"budget {budget} too small for any valid (N, D)")
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if flop_rule(n, np.exp(mid)) > budget:
                hi = mid
            else:
                lo = mid
        return float(np.exp(0.5 * (lo + hi)))

    ns = np.logspace(np.log10(n_min), np.log10(n_max), n_grid)
    losses = np.array([fit.predict(n, tokens_for(n)) for n in ns])
    i = int(np.argmin(losses))
    lo_i, hi_i = max(0, i - 1), min(n_grid - 1, i + 1)

    def obj(log_n):
        n = float(np.exp(log_n))
        return float(fit.predict(n, tokens_for(n)))

    sol = minimize_scalar(
        obj, bounds=(np.log(ns[lo_i]), np.log(ns[hi_i])), method="bounded",
        options={"xatol": 1e-10},
    )
    n_opt = float(np.exp(sol.x))
    return ns, losses, n_opt, float(sol.fun)
