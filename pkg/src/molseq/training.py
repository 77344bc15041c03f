"""Two-stage training loops, schedule, metrics, energy referencing, and
checkpointing."""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .codebook import QuantileCodebook, codebook_hash
from .frames import MolecularFrame, augment_rotate, random_rotation
from .model import ModelConfig, gated_head, transformer_hidden
from .optim import AdamState, NonFiniteGradientError, adam_step, clip_global_norm
from .tokenizer import Vocabulary, encode_frame


@dataclass
class TrainConfig:
    """Training hyperparameters; defaults mirror the pre-training recipe."""

    stage: str = "pretrain"  # "pretrain" | "finetune"
    peak_lr: float = 3e-4
    weight_decay: float = 0.0
    batch_size: int = 16
    epochs: int = 10
    warmup_fraction: float = 0.05
    clip_norm: float = 1.0
    lambda_energy: float = 1.0
    lambda_force: float = 1.0
    seed: int = 0
    rotation_augment: bool = False
    # Instability protocol: halve LR after this many skipped steps in a
    # 100-step window.
    max_skips_per_window: int = 3

    @classmethod
    def finetune_defaults(cls, **kwargs) -> "TrainConfig":
        base = dict(
            stage="finetune",
            peak_lr=3e-4,
            weight_decay=1e-3,
            warmup_fraction=0.10,
            clip_norm=100.0,
            epochs=60,
        )
        base.update(kwargs)
        return cls(**base)


def lr_schedule(step: int, total_steps: int, warmup_fraction: float, peak: float) -> float:
    """Linear warmup to `peak`, then cosine decay to 0 at `total_steps`."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = warmup_fraction * total_steps
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    if total_steps == warmup:
        return peak
    progress = (step - warmup) / (total_steps - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class EnergyReference:
    """Per-element linear energy baseline: E_ref = sum_Z n_Z c_Z + b."""

    coefficients: dict[int, float]
    offset: float = 0.0

    def predict(self, frame: MolecularFrame) -> float:
        return (
            sum(self.coefficients.get(z, 0.0) for z in frame.atomic_numbers)
            + self.offset
        )


def fit_energy_reference(frames: Sequence[MolecularFrame]) -> EnergyReference:
    """Least-squares per-element energy baseline fit on the training split."""
    if any(f.energy is None for f in frames):
        raise ValueError("all frames need energies to fit a reference")
    elements = sorted({z for f in frames for z in f.atomic_numbers})
    a = np.zeros((len(frames), len(elements) + 1))
    y = np.array([f.energy for f in frames])
    for i, f in enumerate(frames):
        for z in f.atomic_numbers:
            a[i, elements.index(z)] += 1.0
        a[i, -1] = 1.0
    coef, _, rank, _ = np.linalg.lstsq(a, y, rcond=None)
    if rank < a.shape[1]:
        # Degenerate design (e.g. constant atom count): mean energy per atom.
        per_atom = float(np.mean([f.energy / f.n_atoms for f in frames]))
        return EnergyReference(coefficients={z: per_atom for z in elements}, offset=0.0)
    return EnergyReference(
        coefficients={z: float(c) for z, c in zip(elements, coef[:-1])},
        offset=float(coef[-1]),
    )


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    history: list[dict]
    adam: AdamState
    skipped_steps: int
    reference: Optional[EnergyReference] = None


def _length_batches(n_atoms: list[int], batch_size: int, order: np.ndarray):
    """Partition shuffled indices into equal-atom-count batches."""
    buckets: dict[int, list[int]] = {}
    for idx in order:
        buckets.setdefault(n_atoms[idx], []).append(int(idx))
    batches = []
    for n in sorted(buckets):
        items = buckets[n]
        for i in range(0, len(items), batch_size):
            batches.append(items[i : i + batch_size])
    return batches


def _collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {
        k: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for k, p in params.items()
    }


class _InstabilityTracker:
    """Skip-and-halve protocol: after too many skipped steps in a rolling
    window, halve the peak learning rate."""

    def __init__(self, max_skips: int, window: int = 100):
        self.max_skips = max_skips
        self.window = window
        self.skip_steps: list[int] = []
        self.lr_scale = 1.0
        self.total_skips = 0

    def record_skip(self, step: int):
        self.total_skips += 1
        self.skip_steps.append(step)
        self.skip_steps = [s for s in self.skip_steps if s > step - self.window]
        if len(self.skip_steps) >= self.max_skips:
            self.lr_scale *= 0.5
            self.skip_steps.clear()


def _encode_batch(batch_frames, codebook, vocab, mode, dtype):
    seqs = [encode_frame(f, codebook, vocab, mode) for f in batch_frames]
    ids = np.stack([s.token_ids for s in seqs])
    cont = np.stack([s.continuous for s in seqs]).astype(dtype)
    return seqs, ids, cont


def pretrain(
    params: dict[str, Tensor],
    model_config: ModelConfig,
    frames: Sequence[MolecularFrame],
    codebook: QuantileCodebook,
    vocab: Vocabulary,
    cfg: TrainConfig,
) -> TrainResult:
    """Autoregressive cross-entropy training over all discrete tokens."""
    rng = np.random.default_rng(cfg.seed)
    n_atoms = [f.n_atoms for f in frames]
    steps_per_epoch = len(
        _length_batches(n_atoms, cfg.batch_size, np.arange(len(frames)))
    )
    total_steps = cfg.epochs * steps_per_epoch
    adam = AdamState.init({k: p.data for k, p in params.items()})
    tracker = _InstabilityTracker(cfg.max_skips_per_window)
    history = []
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(frames))
        for batch in _length_batches(n_atoms, cfg.batch_size, order):
            batch_frames = [frames[i] for i in batch]
            if cfg.rotation_augment:
                batch_frames = [
                    augment_rotate(f, random_rotation(rng)) for f in batch_frames
                ]
            _, ids, cont = _encode_batch(
                batch_frames, codebook, vocab, "pretrain", model_config.dtype
            )
            lr = lr_schedule(step, total_steps, cfg.warmup_fraction, cfg.peak_lr)
            lr *= tracker.lr_scale
            ad.zero_grads(params.values())
            hidden, _ = transformer_hidden(
                params, model_config, ids, cont, causal=True
            )
            logits = ad.matmul(hidden, params["logit_head"])
            t = ids.shape[1]
            pred = ad.take(logits, np.arange(t - 1), axis=1)
            loss = ad.cross_entropy(pred, ids[:, 1:])
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                tracker.record_skip(step)
                step += 1
                continue
            ad.backward(loss)
            grads = _collect_grads(params)
            try:
                norm = clip_global_norm(grads, cfg.clip_norm)
            except NonFiniteGradientError:
                tracker.record_skip(step)
                step += 1
                continue
            adam_step(
                {k: p.data for k, p in params.items()}, grads, adam, lr,
                cfg.weight_decay,
            )
            history.append(
                {
                    "step": step,
                    "lr": lr,
                    "loss": loss_val,
                    "grad_norm": norm,
                    "skips": tracker.total_skips,
                }
            )
            step += 1
    return TrainResult(
        params=params, history=history, adam=adam, skipped_steps=tracker.total_skips
    )


def finetune(
    params: dict[str, Tensor],
    model_config: ModelConfig,
    frames: Sequence[MolecularFrame],
    codebook: QuantileCodebook,
    vocab: Vocabulary,
    cfg: TrainConfig,
    reference: Optional[EnergyReference] = None,
) -> TrainResult:
    """Direct energy/force regression with a bidirectional mask.

    Loss per batch: lambda_E * |E_pred - E_res|/n + lambda_F * mean |F - F*|,
    where E_res is the reference-subtracted target energy.
    """
    if any(f.energy is None or f.forces is None for f in frames):
        raise ValueError("finetune requires energy and force labels")
    rng = np.random.default_rng(cfg.seed)
    if reference is None:
        reference = fit_energy_reference(frames)
    n_atoms = [f.n_atoms for f in frames]
    steps_per_epoch = len(
        _length_batches(n_atoms, cfg.batch_size, np.arange(len(frames)))
    )
    total_steps = cfg.epochs * steps_per_epoch
    adam = AdamState.init({k: p.data for k, p in params.items()})
    tracker = _InstabilityTracker(cfg.max_skips_per_window)
    history = []
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(frames))
        for batch in _length_batches(n_atoms, cfg.batch_size, order):
            batch_frames = [frames[i] for i in batch]
            if cfg.rotation_augment:
                batch_frames = [
                    augment_rotate(f, random_rotation(rng)) for f in batch_frames
                ]
            seqs, ids, cont = _encode_batch(
                batch_frames, codebook, vocab, "finetune", model_config.dtype
            )
            n = seqs[0].n_atoms
            atom_pos = seqs[0].atom_token_positions()
            e_targets = np.array(
                [f.energy - reference.predict(f) for f in batch_frames],
                dtype=model_config.dtype,
            )
            f_targets = np.stack([f.forces for f in batch_frames]).astype(
                model_config.dtype
            )
            lr = lr_schedule(step, total_steps, cfg.warmup_fraction, cfg.peak_lr)
            lr *= tracker.lr_scale
            ad.zero_grads(params.values())
            hidden, _ = transformer_hidden(
                params, model_config, ids, cont, causal=False
            )
            atom_hidden = ad.take(hidden, atom_pos, axis=1)  # (B, n, d)
            e_pred = ad.reshape(
                ad.sum_axis(gated_head(params, "energy_head", atom_hidden), axis=1),
                (len(batch),),
            )
            f_pred = gated_head(params, "force_head", atom_hidden)
            loss = ad.add(
                ad.scale(ad.mean_abs_error(e_pred, e_targets), cfg.lambda_energy / n),
                ad.scale(ad.mean_abs_error(f_pred, f_targets), cfg.lambda_force),
            )
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                tracker.record_skip(step)
                step += 1
                continue
            ad.backward(loss)
            grads = _collect_grads(params)
            try:
                norm = clip_global_norm(grads, cfg.clip_norm)
            except NonFiniteGradientError:
                tracker.record_skip(step)
                step += 1
                continue
            adam_step(
                {k: p.data for k, p in params.items()}, grads, adam, lr,
                cfg.weight_decay,
            )
            history.append(
                {
                    "step": step,
                    "lr": lr,
                    "loss": loss_val,
                    "grad_norm": norm,
                    "skips": tracker.total_skips,
                }
            )
            step += 1
    return TrainResult(
        params=params,
        history=history,
        adam=adam,
        skipped_steps=tracker.total_skips,
        reference=reference,
    )


def evaluate(
    params: dict[str, Tensor],
    model_config: ModelConfig,
    frames: Sequence[MolecularFrame],
    codebook: QuantileCodebook,
    vocab: Vocabulary,
    reference: Optional[EnergyReference] = None,
    include_ce: bool = False,
) -> dict:
    """Energy MAE per structure (meV) and force MAE per component (meV/A)."""
    from .model import forward_causal, predict_energy_forces

    if any(f.energy is None or f.forces is None for f in frames):
        raise ValueError("evaluation requires labeled frames")
    e_errors, f_errors, ce_losses = [], [], []
    for f in frames:
        seq = encode_frame(f, codebook, vocab, "finetune")
        offset = reference.predict(f) if reference is not None else 0.0
        energy, forces = predict_energy_forces(params, model_config, seq, offset)
        e_errors.append(abs(energy - f.energy))
        f_errors.append(np.abs(forces - f.forces).mean())
        if include_ce:
            pseq = encode_frame(f, codebook, vocab, "pretrain")
            logits = forward_causal(params, model_config, pseq)
            pred = ad.take(logits, np.arange(pseq.length - 1), axis=0)
            ce_losses.append(
                ad.cross_entropy(pred, pseq.token_ids[1:]).item()
            )
    out = {
        "energy_mae_meV": 1000.0 * float(np.mean(e_errors)),
        "force_mae_meV_per_A": 1000.0 * float(np.mean(f_errors)),
        "n_frames": len(frames),
    }
    if include_ce:
        out["ce_loss"] = float(np.mean(ce_losses))
    return out


def history_to_csv(history: list[dict], path):
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["step", "lr", "loss", "grad_norm", "skips"]
        )
        writer.writeheader()
        writer.writerows(history)


# ---------------------------------------------------------------------------
# Checkpoints: one binary file = sha256(payload) + payload, where the payload
# is an npz archive holding parameters, optimizer moments, and a JSON header.


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    path,
    params: dict[str, Tensor],
    model_config: ModelConfig,
    adam: Optional[AdamState] = None,
    step: int = 0,
    codebook: Optional[QuantileCodebook] = None,
    reference: Optional[EnergyReference] = None,
    history: Optional[list[dict]] = None,
):
    meta = {
        "config": model_config.as_dict(),
        "step": step,
        "codebook_hash": codebook_hash(codebook) if codebook is not None else None,
        "reference": None
        if reference is None
        else {
            "coefficients": {str(z): c for z, c in reference.coefficients.items()},
            "offset": reference.offset,
        },
        "history": history or [],
        "adam": None
        if adam is None
        else {"step": adam.step, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps},
    }
    arrays = {f"param/{k}": p.data for k, p in params.items()}
    if adam is not None:
        arrays.update({f"adam_m/{k}": v for k, v in adam.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in adam.v.items()})
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    payload = buf.getvalue()
    digest = hashlib.sha256(payload).digest()
    with open(path, "wb") as fh:
        fh.write(digest)
        fh.write(payload)


def load_checkpoint(path, codebook: Optional[QuantileCodebook] = None):
    """Returns (params, model_config, adam_or_none, meta).

    Refuses to load when the stored codebook hash disagrees with `codebook`,
    or when the file checksum fails.
    """
    with open(path, "rb") as fh:
        digest = fh.read(32)
        payload = fh.read()
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt checkpoint)")
    archive = np.load(io.BytesIO(payload))
    meta = json.loads(bytes(archive["meta"]).decode())
    if codebook is not None and meta["codebook_hash"] is not None:
        if codebook_hash(codebook) != meta["codebook_hash"]:
            raise CheckpointError(
                f"{path}: codebook hash mismatch; refusing to load"
            )
    model_config = ModelConfig(**meta["config"])
    params = {
        k[len("param/") :]: ad.tensor(archive[k], requires_grad=True)
        for k in archive.files
        if k.startswith("param/")
    }
    adam = None
    if meta["adam"] is not None:
        adam = AdamState(
            m={
                k[len("adam_m/") :]: archive[k]
                for k in archive.files
                if k.startswith("adam_m/")
            },
            v={
                k[len("adam_v/") :]: archive[k]
                for k in archive.files
                if k.startswith("adam_v/")
            },
            step=meta["adam"]["step"],
            beta1=meta["adam"]["beta1"],
            beta2=meta["adam"]["beta2"],
            eps=meta["adam"]["eps"],
        )
    reference = None
    if meta["reference"] is not None:
        reference = EnergyReference(
            coefficients={int(z): c for z, c in meta["reference"]["coefficients"].items()},
            offset=meta["reference"]["offset"],
        )
    return params, model_config, adam, reference, meta
