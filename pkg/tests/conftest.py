"""Shared fixtures: small LJ datasets, reduced-bin codebooks, and tiny models.

Session scope keeps the expensive pieces (dataset generation, codebook fits,
trained models for the acceptance suite) shared across test modules.
"""

import numpy as np
import pytest

from molseq import codebook as cb_mod
from molseq import frames as fr
from molseq import model as model_mod
from molseq import tokenizer as tok_mod


@pytest.fixture(scope="session")
def lj_dataset():
    rng = np.random.default_rng(1234)
    return fr.generate_lj_dataset(120, 4, 8, rng)


@pytest.fixture(scope="session")
def small_codebook(lj_dataset):
    # Reduced bin counts: the desk-scale dataset has too few distinct values
    # for the full 512/4096/2048 channels.
    return cb_mod.fit_codebook(
        lj_dataset, pos_1d_bins=32, force_bins=128, energy_bins=32
    )


@pytest.fixture(scope="session")
def small_vocab(small_codebook):
    return tok_mod.build_vocab(
        n_position_cells=1000, n_energy_bins=32, n_force_bins=128
    )


@pytest.fixture(scope="session")
def tiny_config(small_vocab):
    return model_mod.ModelConfig(
        hidden_dim=32,
        n_layers=2,
        intermediate_size=64,
        n_heads=4,
        vocab_size=small_vocab.size,
        precision="float64",
    )


@pytest.fixture()
def tiny_params(tiny_config):
    return model_mod.init_model(tiny_config, np.random.default_rng(7))
