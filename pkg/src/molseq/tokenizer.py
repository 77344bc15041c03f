"""Dual discrete/continuous sequence assembly and the token vocabulary."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .codebook import QuantileCodebook, assign_bins, decode_bin
from .frames import MolecularFrame

SPECIAL_TOKENS = (
    "BOS",
    "EOS",
    "POS",
    "POS_END",
    "TARGET",
    "TARGET_END",
    "FORCE",
    "FORCE_END",
    "CHARGE",
    "SPIN",
)

N_ELEMENTS = 118

# Token type tags. Stored as uint8 in the record stream.
TAG_SPECIAL = 0
TAG_ELEMENT = 1
TAG_POSITION = 2
TAG_ENERGY = 3
TAG_FORCE = 4
TAG_CHARGE = 5
TAG_SPIN = 6

TAG_NAMES = {
    TAG_SPECIAL: "special",
    TAG_ELEMENT: "element",
    TAG_POSITION: "position",
    TAG_ENERGY: "energy",
    TAG_FORCE: "force",
    TAG_CHARGE: "charge",
    TAG_SPIN: "spin",
}

CONTINUOUS_WIDTH = 4


class GrammarError(ValueError):
    """Sequence violates the expected section grammar."""

    def __init__(self, message: str, index: int):
        super().__init__(f"token {index}: {message}")
        self.index = index


@dataclass(frozen=True)
class Vocabulary:
    """Fixed id layout: specials, elements, position cells, energy, force."""

    n_position_cells: int
    n_energy_bins: int
    n_force_bins: int

    @property
    def special_offset(self) -> int:
        return 0

    @property
    def element_offset(self) -> int:
        return len(SPECIAL_TOKENS)

    @property
    def position_offset(self) -> int:
        return self.element_offset + N_ELEMENTS

    @property
    def energy_offset(self) -> int:
        return self.position_offset + self.n_position_cells

    @property
    def force_offset(self) -> int:
        return self.energy_offset + self.n_energy_bins

    @property
    def size(self) -> int:
        return self.force_offset + self.n_force_bins

    def special(self, name: str) -> int:
        return SPECIAL_TOKENS.index(name)

    def element(self, z: int) -> int:
        if not 1 <= z <= N_ELEMENTS:
            raise ValueError(f"atomic number {z} out of range")
        return self.element_offset + z - 1

    def position_cell(self, cell: int) -> int:
        if not 0 <= cell < self.n_position_cells:
            raise ValueError(f"position cell {cell} out of range")
        return self.position_offset + cell

    def energy_bin(self, b: int) -> int:
        if not 0 <= b < self.n_energy_bins:
            raise ValueError(f"energy bin {b} out of range")
        return self.energy_offset + b

    def force_bin(self, b: int) -> int:
        if not 0 <= b < self.n_force_bins:
            raise ValueError(f"force bin {b} out of range")
        return self.force_offset + b

    def id_kind(self, token_id: int) -> str:
        """Which range a token id falls in: special/element/position/energy/force."""
        if token_id < 0 or token_id >= self.size:
            raise ValueError(f"token id {token_id} out of range")
        if token_id < self.element_offset:
            return "special"
        if token_id < self.position_offset:
            return "element"
        if token_id < self.energy_offset:
            return "position"
        if token_id < self.force_offset:
            return "energy"
        return "force"


def build_vocab(
    n_position_cells: int = 1000,
    n_energy_bins: int = 2048,
    n_force_bins: int = 4096,
) -> Vocabulary:
    return Vocabulary(
        n_position_cells=n_position_cells,
        n_energy_bins=n_energy_bins,
        n_force_bins=n_force_bins,
    )


@dataclass
class DualSequence:
    """Parallel discrete and continuous streams for one frame.

    ``continuous`` is T x 4: channels 0..2 carry xyz coordinates on position
    tokens, channel 3 carries scalars (energy, force component, charge, spin).
    Rows of discrete-only tokens are all zero. ``atom_index[t]`` is the owning
    atom, or -1 for tokens not tied to an atom.
    """

    token_ids: np.ndarray  # (T,) int64
    continuous: np.ndarray  # (T, 4) float64
    type_tags: np.ndarray  # (T,) uint8
    atom_index: np.ndarray  # (T,) int64; -1 when not applicable
    mode: str  # "pretrain" | "finetune"
    n_atoms: int

    def __post_init__(self):
        t = len(self.token_ids)
        if not (len(self.continuous) == len(self.type_tags) == len(self.atom_index) == t):
            raise ValueError("stream lengths disagree")

    @property
    def length(self) -> int:
        return len(self.token_ids)

    def atom_token_positions(self) -> np.ndarray:
        """Sequence index of each atom's position-cell token, ordered by atom."""
        mask = self.type_tags == TAG_POSITION
        pos = np.nonzero(mask)[0]
        order = np.argsort(self.atom_index[pos], kind="stable")
        return pos[order]


def sequence_length(n_atoms: int, mode: str) -> int:
    """Token count: 5n+11 in pretrain mode, 2n+7 in finetune mode."""
    if n_atoms < 1:
        raise ValueError(f"need at least one atom, got {n_atoms}")
    if mode == "pretrain":
        return 5 * n_atoms + 11
    if mode == "finetune":
        return 2 * n_atoms + 7
    raise ValueError(f"unknown mode {mode!r}")


def encode_frame(
    frame: MolecularFrame,
    codebook: QuantileCodebook,
    vocab: Vocabulary,
    mode: str,
) -> DualSequence:
    """Assemble the dual sequence for one frame.

    Pretrain layout: BOS CHARGE SPIN [POS] (element, position-cell)*n [POS_END]
    [TARGET] energy [TARGET_END] [FORCE] (fx fy fz)*n [FORCE_END] EOS.
    Finetune layout stops after [POS_END] [TARGET] EOS; no energy/force tokens.
    """
    n = frame.n_atoms
    if n < 1:
        raise ValueError("cannot encode a frame with zero atoms")
    if mode not in ("pretrain", "finetune"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "pretrain":
        if frame.energy is None or frame.forces is None:
            raise ValueError("pretrain mode requires energy and force labels")
        if codebook.energy_edges is None or codebook.force_axis_edges is None:
            raise ValueError("pretrain mode requires energy and force codebooks")

    t_total = sequence_length(n, mode)
    ids = np.zeros(t_total, dtype=np.int64)
    cont = np.zeros((t_total, CONTINUOUS_WIDTH), dtype=np.float64)
    tags = np.zeros(t_total, dtype=np.uint8)
    atom = np.full(t_total, -1, dtype=np.int64)

    t = 0

    def put(token_id, tag, atom_i=-1, cont_row=None):
        nonlocal t
        ids[t] = token_id
        tags[t] = tag
        atom[t] = atom_i
        if cont_row is not None:
            cont[t, : len(cont_row)] = cont_row
        t += 1

    put(vocab.special("BOS"), TAG_SPECIAL)
    put(vocab.special("CHARGE"), TAG_CHARGE, cont_row=[0.0, 0.0, 0.0, float(frame.charge)])
    put(vocab.special("SPIN"), TAG_SPIN, cont_row=[0.0, 0.0, 0.0, float(frame.spin)])
    put(vocab.special("POS"), TAG_SPECIAL)
    for i in range(n):
        put(vocab.element(frame.atomic_numbers[i]), TAG_ELEMENT, atom_i=i)
        cell = codebook.encode_position(frame.positions[i])
        xyz = frame.positions[i]
        put(
            vocab.position_cell(cell),
            TAG_POSITION,
            atom_i=i,
            cont_row=[xyz[0], xyz[1], xyz[2], 0.0],
        )
    put(vocab.special("POS_END"), TAG_SPECIAL)
    put(vocab.special("TARGET"), TAG_SPECIAL)
    if mode == "pretrain":
        e_bin = int(assign_bins(frame.energy, codebook.energy_edges))
        put(
            vocab.energy_bin(e_bin),
            TAG_ENERGY,
            cont_row=[0.0, 0.0, 0.0, float(frame.energy)],
        )
        put(vocab.special("TARGET_END"), TAG_SPECIAL)
        put(vocab.special("FORCE"), TAG_SPECIAL)
        for i in range(n):
            for a in range(3):
                f_bin = int(assign_bins(frame.forces[i, a], codebook.force_axis_edges[a]))
                put(
                    vocab.force_bin(f_bin),
                    TAG_FORCE,
                    atom_i=i,
                    cont_row=[0.0, 0.0, 0.0, float(frame.forces[i, a])],
                )
        put(vocab.special("FORCE_END"), TAG_SPECIAL)
    put(vocab.special("EOS"), TAG_SPECIAL)
    assert t == t_total
    return DualSequence(
        token_ids=ids,
        continuous=cont,
        type_tags=tags,
        atom_index=atom,
        mode=mode,
        n_atoms=n,
    )


def decode_sequence(
    seq: DualSequence,
    codebook: QuantileCodebook,
    vocab: Vocabulary,
    use_continuous: bool = True,
) -> MolecularFrame:
    """Reconstruct a (partial) frame from a grammatical dual sequence.

    Element ids are exact. Positions/energy/forces come from the continuous
    channels when ``use_continuous``, else from bin representatives.
    """
    ids = seq.token_ids
    tags = seq.type_tags
    t_total = len(ids)
    if t_total == 0 or ids[0] != vocab.special("BOS"):
        raise GrammarError("sequence must start with BOS", 0)
    if ids[-1] != vocab.special("EOS"):
        raise GrammarError("sequence must end with EOS", t_total - 1)

    elements: list[int] = []
    positions: list[np.ndarray] = []
    energy: Optional[float] = None
    force_components: list[float] = []
    charge = 0
    spin = 0
    pending_element: Optional[int] = None
    for i in range(t_total):
        kind = vocab.id_kind(int(ids[i]))
        if tags[i] == TAG_CHARGE:
            charge = int(round(seq.continuous[i, 3]))
        elif tags[i] == TAG_SPIN:
            spin = int(round(seq.continuous[i, 3]))
        elif kind == "element":
            if pending_element is not None:
                raise GrammarError("element token not followed by a position token", i)
            pending_element = int(ids[i]) - vocab.element_offset + 1
        elif kind == "position":
            if pending_element is None:
                raise GrammarError("position token without a preceding element", i)
            elements.append(pending_element)
            pending_element = None
            if use_continuous:
                positions.append(seq.continuous[i, :3].copy())
            else:
                cell = int(ids[i]) - vocab.position_offset
                positions.append(codebook.decode_position_cell(cell))
        elif kind == "energy":
            if energy is not None:
                raise GrammarError("multiple energy tokens", i)
            if use_continuous:
                energy = float(seq.continuous[i, 3])
            else:
                energy = decode_bin(int(ids[i]) - vocab.energy_offset, codebook.energy_edges)
        elif kind == "force":
            if use_continuous:
                force_components.append(float(seq.continuous[i, 3]))
            else:
                axis = len(force_components) % 3
                force_components.append(
                    decode_bin(
                        int(ids[i]) - vocab.force_offset, codebook.force_axis_edges[axis]
                    )
                )
    if pending_element is not None:
        raise GrammarError("trailing element token without position", t_total - 1)
    n = len(elements)
    if n == 0:
        raise GrammarError("no atoms in sequence", 0)
    forces = None
    if force_components:
        if len(force_components) != 3 * n:
            raise GrammarError(
                f"force token count {len(force_components)} != 3*{n}", t_total - 1
            )
        forces = np.array(force_components).reshape(n, 3)
    return MolecularFrame(
        atomic_numbers=elements,
        positions=np.array(positions),
        forces=forces,
        energy=energy,
        charge=charge,
        spin=spin,
    )


# ---------------------------------------------------------------------------
# Binary record stream: per record a header (T, n_atoms, mode flag) followed by
# token ids (int32), the continuous matrix (float64), and tags (uint8).

_MAGIC = b"MSEQ1\n"
_HEADER = struct.Struct("<iib")


def write_records(seqs: Sequence[DualSequence], path):
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        for s in seqs:
            mode_flag = 0 if s.mode == "pretrain" else 1
            fh.write(_HEADER.pack(s.length, s.n_atoms, mode_flag))
            fh.write(s.token_ids.astype("<i4").tobytes())
            fh.write(s.continuous.astype("<f8").tobytes())
            fh.write(s.type_tags.astype(np.uint8).tobytes())
            fh.write(s.atom_index.astype("<i4").tobytes())


def read_records(path) -> list[DualSequence]:
    seqs = []
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a molseq record stream")
        while True:
            header = fh.read(_HEADER.size)
            if not header:
                break
            t, n, mode_flag = _HEADER.unpack(header)
            ids = np.frombuffer(fh.read(4 * t), dtype="<i4").astype(np.int64)
            cont = np.frombuffer(fh.read(8 * 4 * t), dtype="<f8").reshape(t, 4).copy()
            tags = np.frombuffer(fh.read(t), dtype=np.uint8).copy()
            atom = np.frombuffer(fh.read(4 * t), dtype="<i4").astype(np.int64)
            if len(atom) != t:
                raise ValueError(f"{path}: truncated record stream")
            seqs.append(
                DualSequence(
                    token_ids=ids,
                    continuous=cont,
                    type_tags=tags,
                    atom_index=atom,
                    mode="pretrain" if mode_flag == 0 else "finetune",
                    n_atoms=n,
                )
            )
    return seqs
