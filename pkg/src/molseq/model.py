"""Graph-free transformer: dual-stream embedding, multi-head self-attention
without positional embeddings, logit readout and energy/force heads."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tokenizer import CONTINUOUS_WIDTH, DualSequence


@dataclass
class ModelConfig:
    hidden_dim: int
    n_layers: int
    intermediate_size: int
    n_heads: int
    vocab_size: int
    continuous_width: int = CONTINUOUS_WIDTH
    precision: str = "float32"  # "float32" | "float64"

    def __post_init__(self):
        if self.hidden_dim % self.n_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}"
            )
        for name in ("hidden_dim", "n_layers", "intermediate_size", "n_heads", "vocab_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def as_dict(self) -> dict:
        return {
            "hidden_dim": self.hidden_dim,
            "n_layers": self.n_layers,
            "intermediate_size": self.intermediate_size,
            "n_heads": self.n_heads,
            "vocab_size": self.vocab_size,
            "continuous_width": self.continuous_width,
            "precision": self.precision,
        }


@dataclass
class AttentionRecord:
    """Post-softmax attention: one (n_heads, T, T) array per layer."""

    scores: list[np.ndarray]

    @property
    def n_layers(self) -> int:
        return len(self.scores)


def _trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Normal(0, std) resampled until within 2 std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while np.any(bad):
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def init_model(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Truncated-normal (std 0.02) matrices, unit norm gains, zero-initialized
    final layers of the energy/force heads."""
    d = config.hidden_dim
    inter = config.intermediate_size
    v = config.vocab_size
    dt = config.dtype
    p: dict[str, np.ndarray] = {}

    def mat(name, shape):
        p[name] = _trunc_normal(rng, shape, 0.02, dt)

    mat("embed.discrete", (v, d))
    mat("embed.continuous", (config.continuous_width, d))
    for i in range(config.n_layers):
        pre = f"layers.{i}."
        p[pre + "attn_norm"] = np.ones(d, dtype=dt)
        mat(pre + "wq", (d, d))
        mat(pre + "wk", (d, d))
        mat(pre + "wv", (d, d))
        mat(pre + "wo", (d, d))
        p[pre + "mlp_norm"] = np.ones(d, dtype=dt)
        mat(pre + "w_gate", (d, inter))
        mat(pre + "w_up", (d, inter))
        mat(pre + "w_down", (inter, d))
    p["final_norm"] = np.ones(d, dtype=dt)
    mat("logit_head", (d, v))
    for head, width in (("energy_head", 1), ("force_head", 3)):
        mat(head + ".w_gate", (d, d))
        mat(head + ".w_up", (d, d))
        p[head + ".w_out"] = np.zeros((d, width), dtype=dt)
    return {k: ad.tensor(a, requires_grad=True) for k, a in p.items()}


def count_params(config: ModelConfig) -> tuple[int, int]:
    """(total, non_embedding); non-embedding excludes the discrete embedding
    table and the logit head."""
    d, inter, v = config.hidden_dim, config.intermediate_size, config.vocab_size
    per_layer = 4 * d * d + 3 * d * inter + 2 * d
    heads = 2 * (2 * d * d) + d * 1 + d * 3
    non_embedding = (
        config.continuous_width * d + config.n_layers * per_layer + d + heads
    )
    total = non_embedding + v * d + d * v
    return total, non_embedding


def estimate_flops(config: ModelConfig, n_tokens: int) -> float:
    """Training FLOP estimate: 6 * non-embedding parameters * tokens."""
    if n_tokens <= 0:
        raise ValueError("n_tokens must be positive")
    _, non_emb = count_params(config)
    return 6.0 * non_emb * n_tokens


def causal_mask(t: int, dtype=np.float64) -> np.ndarray:
    mask = np.zeros((t, t), dtype=dtype)
    mask[np.triu_indices(t, k=1)] = -np.inf
    return mask


def _attention(params, config, x: Tensor, layer: int, mask: Optional[np.ndarray], capture):
    b, t, d = x.shape
    h = config.n_heads
    dh = d // h
    pre = f"layers.{layer}."
    q = ad.matmul(x, params[pre + "wq"])
    k = ad.matmul(x, params[pre + "wk"])
    v = ad.matmul(x, params[pre + "wv"])

    def split(z):
        return ad.transpose(ad.reshape(z, (b, t, h, dh)), (0, 2, 1, 3))

    qh, kh, vh = split(q), split(k), split(v)
    scores = ad.scale(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    if mask is not None:
        scores = ad.masked_fill(scores, mask)
    attn = ad.softmax_lastdim(scores)
    if capture is not None:
        capture.append(np.array(attn.data, copy=True))
    out = ad.matmul(attn, vh)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, t, d))
    return ad.matmul(out, params[pre + "wo"])


def embed_inputs(
    params: dict[str, Tensor],
    config: ModelConfig,
    token_ids: np.ndarray,
    continuous,
) -> Tensor:
    """h_t = E_discrete[token_t] + W_cont . c_t; no positional term."""
    disc = ad.embedding_lookup(params["embed.discrete"], token_ids)
    if not isinstance(continuous, Tensor):
        continuous = ad.tensor(np.asarray(continuous, dtype=config.dtype))
    cont = ad.matmul(continuous, params["embed.continuous"])
    return ad.add(disc, cont)


def transformer_hidden(
    params: dict[str, Tensor],
    config: ModelConfig,
    token_ids: np.ndarray,
    continuous,
    causal: bool,
    capture_attention: bool = False,
) -> tuple[Tensor, Optional[list[np.ndarray]]]:
    """Batched trunk: (B, T) token ids -> (B, T, d) final hidden states."""
    token_ids = np.asarray(token_ids)
    if token_ids.ndim == 1:
        token_ids = token_ids[None, :]
        if isinstance(continuous, Tensor):
            continuous = ad.reshape(continuous, (1,) + continuous.shape)
        else:
            continuous = np.asarray(continuous)[None, :, :]
    t = token_ids.shape[1]
    if t == 0:
        raise ValueError("empty sequence")
    mask = causal_mask(t, dtype=config.dtype) if causal else None
    x = embed_inputs(params, config, token_ids, continuous)
    capture: Optional[list[np.ndarray]] = [] if capture_attention else None
    for i in range(config.n_layers):
        pre = f"layers.{i}."
        attn_in = ad.rms_norm(x, params[pre + "attn_norm"])
        x = ad.add(x, _attention(params, config, attn_in, i, mask, capture))
        mlp_in = ad.rms_norm(x, params[pre + "mlp_norm"])
        gate = ad.matmul(mlp_in, params[pre + "w_gate"])
        up = ad.matmul(mlp_in, params[pre + "w_up"])
        x = ad.add(x, ad.matmul(ad.silu_gate(gate, up), params[pre + "w_down"]))
    x = ad.rms_norm(x, params["final_norm"])
    return x, capture


def _single_record(capture: Optional[list[np.ndarray]]) -> Optional[AttentionRecord]:
    if capture is None:
        return None
    return AttentionRecord(scores=[a[0] for a in capture])


def forward_causal(
    params: dict[str, Tensor],
    config: ModelConfig,
    seq: DualSequence,
    capture_attention: bool = False,
):
    """(T, V) next-token logits for a pretrain-mode sequence."""
    hidden, capture = transformer_hidden(
        params, config, seq.token_ids, seq.continuous, causal=True,
        capture_attention=capture_attention,
    )
    logits = ad.matmul(hidden, params["logit_head"])
    logits = ad.reshape(logits, (seq.length, config.vocab_size))
    if capture_attention:
        return logits, _single_record(capture)
    return logits


def forward_bidirectional(
    params: dict[str, Tensor],
    config: ModelConfig,
    seq: DualSequence,
    capture_attention: bool = False,
):
    """(T, d) final hidden states for a finetune-mode sequence."""
    hidden, capture = transformer_hidden(
        params, config, seq.token_ids, seq.continuous, causal=False,
        capture_attention=capture_attention,
    )
    hidden = ad.reshape(hidden, (seq.length, config.hidden_dim))
    if capture_attention:
        return hidden, _single_record(capture)
    return hidden


def gated_head(params: dict[str, Tensor], name: str, x: Tensor) -> Tensor:
    gate = ad.matmul(x, params[name + ".w_gate"])
    up = ad.matmul(x, params[name + ".w_up"])
    return ad.matmul(ad.silu_gate(gate, up), params[name + ".w_out"])


def _energy_forces_graph(params, config, seq, continuous):
    """Shared graph: returns (energy Tensor scalar, forces Tensor (n, 3))."""
    hidden, _ = transformer_hidden(
        params, config, seq.token_ids, continuous, causal=False
    )
    hidden = ad.reshape(hidden, (seq.length, config.hidden_dim))
    atom_pos = seq.atom_token_positions()
    if len(atom_pos) != seq.n_atoms:
        raise ValueError("sequence lacks a complete atom index map")
    atom_hidden = ad.take(hidden, atom_pos, axis=0)
    per_atom_e = gated_head(params, "energy_head", atom_hidden)  # (n, 1)
    energy = ad.sum_all(per_atom_e)
    forces = gated_head(params, "force_head", atom_hidden)  # (n, 3)
    return energy, forces


def predict_energy_forces(
    params: dict[str, Tensor],
    config: ModelConfig,
    seq: DualSequence,
    energy_offset: float = 0.0,
) -> tuple[float, np.ndarray]:
    """Direct-head prediction: total energy (eV) and per-atom forces (eV/A).

    `energy_offset` is the per-frame reference energy added back on top of the
    regressed residual.
    """
    energy, forces = _energy_forces_graph(params, config, seq, seq.continuous)
    return energy.item() + energy_offset, np.array(forces.data, dtype=np.float64)


def conservative_forces(
    params: dict[str, Tensor],
    config: ModelConfig,
    seq: DualSequence,
    return_energy: bool = False,
):
    """F_i = -dE/dr_i via reverse mode through the continuous position inputs.

    The discrete position-cell tokens are held fixed; the gradient flows
    through the continuous coordinate channels only.
    """
    cont = ad.tensor(
        np.asarray(seq.continuous, dtype=config.dtype), requires_grad=True
    )
    energy, _ = _energy_forces_graph(params, config, seq, cont)
    if not np.isfinite(energy.data):
        raise ValueError("non-finite energy; cannot differentiate")
    ad.backward(energy)
    atom_pos = seq.atom_token_positions()
    grad = cont.grad[atom_pos, :3]
    forces = -np.asarray(grad, dtype=np.float64)
    if return_energy:
        return forces, energy.item()
    return forces
