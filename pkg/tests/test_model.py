"""Transformer: causality, permutation behavior, parameter counting, heads,
and batched-vs-single consistency."""

import numpy as np
import pytest

from molseq import autodiff as ad
from molseq import frames as fr
from molseq import model as model_mod
from molseq import tokenizer as tok


@pytest.fixture()
def encoded(lj_dataset, small_codebook, small_vocab):
    def enc(frame, mode):
        return tok.encode_frame(frame, small_codebook, small_vocab, mode)

    return enc


class TestConfig:
    def test_divisibility_enforced(self):
        with pytest.raises(ValueError):
            model_mod.ModelConfig(30, 2, 60, 4, 100)

    def test_positive_fields(self):
        with pytest.raises(ValueError):
            model_mod.ModelConfig(32, 0, 64, 4, 100)

    def test_precision(self):
        with pytest.raises(ValueError):
            model_mod.ModelConfig(32, 1, 64, 4, 100, precision="float16")
        cfg = model_mod.ModelConfig(32, 1, 64, 4, 100, precision="float32")
        assert cfg.dtype == np.float32

    def test_as_dict_round_trip(self, tiny_config):
        again = model_mod.ModelConfig(**tiny_config.as_dict())
        assert again == tiny_config


class TestInit:
    def test_param_values_truncated(self, tiny_params):
        for name, p in tiny_params.items():
            if name.endswith(("norm",)):
                np.testing.assert_array_equal(p.data, np.ones_like(p.data))
            elif name.endswith(".w_out"):
                np.testing.assert_array_equal(p.data, np.zeros_like(p.data))
            else:
                assert np.abs(p.data).max() <= 2 * 0.02 + 1e-12

    def test_count_params_matches_actual(self, tiny_config, tiny_params):
        total, non_emb = model_mod.count_params(tiny_config)
        actual = sum(p.data.size for p in tiny_params.values())
        assert actual == total
        emb = (
            tiny_params["embed.discrete"].data.size
            + tiny_params["logit_head"].data.size
        )
        assert non_emb == total - emb

    def test_estimate_flops(self, tiny_config):
        _, non_emb = model_mod.count_params(tiny_config)
        assert model_mod.estimate_flops(tiny_config, 100) == 6.0 * non_emb * 100
        with pytest.raises(ValueError):
            model_mod.estimate_flops(tiny_config, 0)


class TestCausality:
    def test_prefix_logits_insensitive_to_suffix(
        self, lj_dataset, encoded, tiny_config, tiny_params
    ):
        rng = np.random.default_rng(0)
        seq = encoded(lj_dataset[0], "pretrain")
        base = model_mod.forward_causal(tiny_params, tiny_config, seq).data.copy()
        cut = seq.length // 2
        perturbed = tok.DualSequence(
            token_ids=seq.token_ids.copy(),
            continuous=seq.continuous.copy(),
            type_tags=seq.type_tags.copy(),
            atom_index=seq.atom_index.copy(),
            mode=seq.mode,
            n_atoms=seq.n_atoms,
        )
        perturbed.token_ids[cut:] = rng.integers(
            0, tiny_config.vocab_size, seq.length - cut
        )
        perturbed.continuous[cut:] += rng.standard_normal((seq.length - cut, 4))
        after = model_mod.forward_causal(tiny_params, tiny_config, perturbed).data
        np.testing.assert_array_equal(base[:cut], after[:cut])

    def test_bidirectional_sees_everything(
        self, lj_dataset, encoded, tiny_config, tiny_params
    ):
        seq = encoded(lj_dataset[0], "finetune")
        base = model_mod.forward_bidirectional(tiny_params, tiny_config, seq).data.copy()
        perturbed = tok.DualSequence(
            token_ids=seq.token_ids.copy(),
            continuous=seq.continuous.copy(),
            type_tags=seq.type_tags.copy(),
            atom_index=seq.atom_index.copy(),
            mode=seq.mode,
            n_atoms=seq.n_atoms,
        )
        perturbed.continuous[-2, 0] += 1.0
        after = model_mod.forward_bidirectional(tiny_params, tiny_config, perturbed).data
        assert np.abs(base[0] - after[0]).max() > 0


def permute_frame(frame, perm):
    return fr.MolecularFrame(
        atomic_numbers=[frame.atomic_numbers[i] for i in perm],
        positions=frame.positions[perm],
        forces=None if frame.forces is None else frame.forces[perm],
        energy=frame.energy,
        charge=frame.charge,
        spin=frame.spin,
    )


class TestPermutation:
    def test_energy_invariant_forces_equivariant(
        self, lj_dataset, small_codebook, small_vocab, tiny_config, tiny_params
    ):
        # Randomize the zero-init head outputs so the check is nontrivial.
        rng = np.random.default_rng(1)
        params = dict(tiny_params)
        for name in ("energy_head.w_out", "force_head.w_out"):
            params[name] = ad.tensor(
                rng.standard_normal(params[name].shape) * 0.1, requires_grad=True
            )
        frame = lj_dataset[0]
        seq = tok.encode_frame(frame, small_codebook, small_vocab, "finetune")
        e0, f0 = model_mod.predict_energy_forces(params, tiny_config, seq)
        perm = rng.permutation(frame.n_atoms)
        pseq = tok.encode_frame(
            permute_frame(frame, perm), small_codebook, small_vocab, "finetune"
        )
        e1, f1 = model_mod.predict_energy_forces(params, tiny_config, pseq)
        assert abs(e1 - e0) <= 1e-9 * max(1.0, abs(e0))
        np.testing.assert_allclose(f1, f0[perm], atol=1e-9)


class TestHeads:
    def test_zero_init_heads_output_zero(
        self, lj_dataset, encoded, tiny_config, tiny_params
    ):
        seq = encoded(lj_dataset[0], "finetune")
        e, f = model_mod.predict_energy_forces(tiny_params, tiny_config, seq)
        assert e == 0.0
        np.testing.assert_array_equal(f, np.zeros_like(f))
        forces = model_mod.conservative_forces(tiny_params, tiny_config, seq)
        np.testing.assert_array_equal(forces, np.zeros_like(forces))

    def test_energy_offset_added(self, lj_dataset, encoded, tiny_config, tiny_params):
        seq = encoded(lj_dataset[0], "finetune")
        e, _ = model_mod.predict_energy_forces(
            tiny_params, tiny_config, seq, energy_offset=-3.25
        )
        assert e == -3.25

    def test_conservative_forces_match_energy_gradient(
        self, lj_dataset, encoded, tiny_config, tiny_params
    ):
        rng = np.random.default_rng(2)
        params = dict(tiny_params)
        params["energy_head.w_out"] = ad.tensor(
            rng.standard_normal(params["energy_head.w_out"].shape) * 0.05,
            requires_grad=True,
        )
        seq = encoded(lj_dataset[0], "finetune")
        forces = model_mod.conservative_forces(params, tiny_config, seq)
        h = 1e-5
        atom_pos = seq.atom_token_positions()
        for i in (0, seq.n_atoms - 1):
            for a in range(3):
                def energy_at(delta):
                    cont = seq.continuous.copy()
                    cont[atom_pos[i], a] += delta
                    shifted = tok.DualSequence(
                        token_ids=seq.token_ids,
                        continuous=cont,
                        type_tags=seq.type_tags,
                        atom_index=seq.atom_index,
                        mode=seq.mode,
                        n_atoms=seq.n_atoms,
                    )
                    e, _ = model_mod.predict_energy_forces(params, tiny_config, shifted)
                    return e

                fd = -(energy_at(h) - energy_at(-h)) / (2 * h)
                assert abs(fd - forces[i, a]) < 1e-6 * max(1.0, abs(fd))


class TestBatching:
    def test_batched_matches_single(self, lj_dataset, small_codebook, small_vocab, tiny_config, tiny_params):
        frames = [f for f in lj_dataset if f.n_atoms == lj_dataset[0].n_atoms][:3]
        seqs = [
            tok.encode_frame(f, small_codebook, small_vocab, "pretrain")
            for f in frames
        ]
        ids = np.stack([s.token_ids for s in seqs])
        cont = np.stack([s.continuous for s in seqs])
        hidden, _ = model_mod.transformer_hidden(
            tiny_params, tiny_config, ids, cont, causal=True
        )
        for b, s in enumerate(seqs):
            single, _ = model_mod.transformer_hidden(
                tiny_params, tiny_config, s.token_ids, s.continuous, causal=True
            )
            np.testing.assert_allclose(
                hidden.data[b], single.data[0], atol=1e-12
            )

    def test_empty_sequence_rejected(self, tiny_config, tiny_params):
        with pytest.raises(ValueError):
            model_mod.transformer_hidden(
                tiny_params, tiny_config, np.zeros((1, 0), dtype=int),
                np.zeros((1, 0, 4)), causal=True,
            )


class TestAttentionCapture:
    def test_record_shapes_and_normalization(
        self, lj_dataset, encoded, tiny_config, tiny_params
    ):
        seq = encoded(lj_dataset[0], "finetune")
        _, record = model_mod.forward_bidirectional(
            tiny_params, tiny_config, seq, capture_attention=True
        )
        assert record.n_layers == tiny_config.n_layers
        for scores in record.scores:
            assert scores.shape == (tiny_config.n_heads, seq.length, seq.length)
            np.testing.assert_allclose(scores.sum(axis=-1), 1.0, atol=1e-6)

    def test_causal_record_is_lower_triangular(
        self, lj_dataset, encoded, tiny_config, tiny_params
    ):
        seq = encoded(lj_dataset[0], "pretrain")
        _, record = model_mod.forward_causal(
            tiny_params, tiny_config, seq, capture_attention=True
        )
        for scores in record.scores:
            for h in range(scores.shape[0]):
                upper = scores[h][np.triu_indices(seq.length, k=1)]
                assert np.all(upper == 0.0)


def test_reference_size_within_published_band():
    # The 5M entry of the size table: hidden 256, 4 layers, inter 1024, 4 heads.
    cfg = model_mod.ModelConfig(256, 4, 1024, 4, 7272)
    _, non_emb = model_mod.count_params(cfg)
    assert abs(non_emb - 5e6) / 5e6 < 0.15
