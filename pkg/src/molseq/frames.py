"""Molecular frames: xyz parsing/writing, rotations, splits, and the synthetic
Lennard-Jones dataset used as a desk-scale oracle."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

# fmt: off
ELEMENT_SYMBOLS = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne",
    "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca",
    "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn",
    "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr",
    "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn",
    "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd",
    "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb",
    "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg",
    "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th",
    "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm",
    "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds",
    "Rg", "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og",
]
# fmt: on

SYMBOL_TO_Z = {s: i + 1 for i, s in enumerate(ELEMENT_SYMBOLS)}

# Argon-like Lennard-Jones parameters for the synthetic oracle dataset.
LJ_EPSILON = 0.0104  # eV
LJ_SIGMA = 3.4  # Angstrom
ARGON_Z = 18
ARGON_MASS = 39.948  # amu


class XyzParseError(ValueError):
    """Raised on malformed xyz input; carries the offending line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class MolecularFrame:
    """One molecule: elements, coordinates, and optional labels.

    Units: positions in Angstrom, forces in eV/Angstrom, energy in eV.
    """

    atomic_numbers: list[int]
    positions: np.ndarray
    forces: Optional[np.ndarray] = None
    energy: Optional[float] = None
    charge: int = 0
    spin: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.shape != (len(self.atomic_numbers), 3):
            raise ValueError(
                f"positions shape {self.positions.shape} does not match "
                f"{len(self.atomic_numbers)} atoms"
            )
        if self.forces is not None:
            self.forces = np.asarray(self.forces, dtype=np.float64)
            if self.forces.shape != self.positions.shape:
                raise ValueError(
                    f"forces shape {self.forces.shape} does not match positions "
                    f"{self.positions.shape}"
                )
        for z in self.atomic_numbers:
            if not 1 <= z <= 118:
                raise ValueError(f"atomic number {z} out of range [1, 118]")
        if self.spin < 0:
            raise ValueError("spin must be non-negative")

    @property
    def n_atoms(self) -> int:
        return len(self.atomic_numbers)


@dataclass
class DatasetSplit:
    """Disjoint train/val/test index lists covering a frame collection."""

    train: list[int]
    val: list[int]
    test: list[int]

    def as_dict(self) -> dict:
        return {"train": self.train, "val": self.val, "test": self.test}


def _parse_comment_fields(comment: str) -> dict:
    """Pull energy=/charge=/spin= key-value pairs out of an xyz comment line.

    Values may carry per-atom force columns via the extended-xyz convention;
    only the scalar keys live here.
    """
    out = {}
    for tok in comment.split():
        if "=" not in tok:
            continue
        key, _, val = tok.partition("=")
        key = key.strip().lower()
        if key in ("energy", "charge", "spin"):
            out[key] = val
    return out


def parse_xyz(text: str) -> list[MolecularFrame]:
    """Parse a concatenation of xyz / extended-xyz blocks.

    Each block: atom count line, comment line (may carry ``energy=``,
    ``charge=``, ``spin=``), then one line per atom with ``symbol x y z`` and
    optionally three extra force columns. Missing labels stay absent.
    """
    lines = text.splitlines()
    frames: list[MolecularFrame] = []
    i = 0
    n_lines = len(lines)
    while i < n_lines:
        if lines[i].strip() == "":
            i += 1
            continue
        try:
            n_atoms = int(lines[i].strip())
        except ValueError:
            raise XyzParseError(f"expected atom count, got {lines[i]!r}", i + 1)
        if n_atoms <= 0:
            raise XyzParseError(f"non-positive atom count {n_atoms}", i + 1)
        if i + 1 + n_atoms >= n_lines + 1 and i + 1 + n_atoms > n_lines:
            raise XyzParseError(
                f"block declares {n_atoms} atoms but input ends early", i + 1
            )
        comment = lines[i + 1] if i + 1 < n_lines else ""
        fields = _parse_comment_fields(comment)
        atomic_numbers = []
        positions = np.zeros((n_atoms, 3))
        forces = np.zeros((n_atoms, 3))
        has_forces = None
        for a in range(n_atoms):
            lineno = i + 2 + a
            if lineno >= n_lines:
                raise XyzParseError("unexpected end of input inside block", lineno + 1)
            parts = lines[lineno].split()
            if len(parts) not in (4, 7):
                raise XyzParseError(
                    f"expected 4 or 7 columns, got {len(parts)}", lineno + 1
                )
            sym = parts[0]
            if sym not in SYMBOL_TO_Z:
                raise XyzParseError(f"unknown element symbol {sym!r}", lineno + 1)
            atomic_numbers.append(SYMBOL_TO_Z[sym])
            try:
                positions[a] = [float(x) for x in parts[1:4]]
                row_has_forces = len(parts) == 7
                if row_has_forces:
                    forces[a] = [float(x) for x in parts[4:7]]
            except ValueError as exc:
                raise XyzParseError(str(exc), lineno + 1)
            if has_forces is None:
                has_forces = row_has_forces
            elif has_forces != row_has_forces:
                raise XyzParseError("inconsistent column count within block", lineno + 1)
        try:
            energy = float(fields["energy"]) if "energy" in fields else None
            charge = int(fields.get("charge", 0))
            spin = int(fields.get("spin", 0))
        except ValueError as exc:
            raise XyzParseError(f"bad comment field: {exc}", i + 2)
        frames.append(
            MolecularFrame(
                atomic_numbers=atomic_numbers,
                positions=positions,
                forces=forces if has_forces else None,
                energy=energy,
                charge=charge,
                spin=spin,
            )
        )
        i += 2 + n_atoms
    return frames


def write_xyz(frames: Sequence[MolecularFrame]) -> str:
    """Serialize frames so that ``parse_xyz`` round-trips them losslessly."""
    blocks = []
    for f in frames:
        comment_parts = []
        if f.energy is not None:
            comment_parts.append(f"energy={f.energy!r}")
        comment_parts.append(f"charge={f.charge}")
        comment_parts.append(f"spin={f.spin}")
        lines = [str(f.n_atoms), " ".join(comment_parts)]
        for a in range(f.n_atoms):
            sym = ELEMENT_SYMBOLS[f.atomic_numbers[a] - 1]
            cols = [sym] + [repr(float(x)) for x in f.positions[a]]
            if f.forces is not None:
                cols += [repr(float(x)) for x in f.forces[a]]
            lines.append(" ".join(cols))
        blocks.append("\n".join(lines))
    return "\n".join(blocks) + ("\n" if blocks else "")


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform SO(3) rotation via a normalized quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def augment_rotate(frame: MolecularFrame, R: np.ndarray) -> MolecularFrame:
    """Rotate positions (and forces, when present); scalars untouched."""
    return MolecularFrame(
        atomic_numbers=list(frame.atomic_numbers),
        positions=frame.positions @ R.T,
        forces=None if frame.forces is None else frame.forces @ R.T,
        energy=frame.energy,
        charge=frame.charge,
        spin=frame.spin,
    )


def lj_energy_forces(
    positions: np.ndarray,
    epsilon: float = LJ_EPSILON,
    sigma: float = LJ_SIGMA,
) -> tuple[float, np.ndarray]:
    """Analytic Lennard-Jones energy (eV) and forces (eV/A) for one cluster."""
    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    diff = pos[:, None, :] - pos[None, :, :]
    r2 = np.sum(diff * diff, axis=-1)
    np.fill_diagonal(r2, 1.0)
    inv_r2 = sigma * sigma / r2
    inv_r6 = inv_r2**3
    inv_r12 = inv_r6**2
    pair_e = 4.0 * epsilon * (inv_r12 - inv_r6)
    np.fill_diagonal(pair_e, 0.0)
    energy = 0.5 * float(np.sum(pair_e))
    # dV/dr2 summed into forces: F_i = sum_j 24 eps (2 (s/r)^12 - (s/r)^6) / r^2 * (r_i - r_j)
    coeff = 24.0 * epsilon * (2.0 * inv_r12 - inv_r6) / r2
    np.fill_diagonal(coeff, 0.0)
    forces = np.sum(coeff[:, :, None] * diff, axis=1)
    if n == 1:
        return 0.0, np.zeros((1, 3))
    return energy, forces


def generate_lj_dataset(
    n_frames: int,
    atoms_min: int,
    atoms_max: int,
    rng: np.random.Generator,
    min_dist_factor: float = 0.8,
    box_scale: float = 1.3,
) -> list[MolecularFrame]:
    """Random argon-like LJ clusters with analytic energy and force labels.

    Configurations are rejection-sampled so every pair distance stays above
    ``min_dist_factor * sigma``, keeping labels bounded.
    """
    if not (2 <= atoms_min <= atoms_max <= 16):
        raise ValueError(f"invalid atom range [{atoms_min}, {atoms_max}]")
    if n_frames < 0:
        raise ValueError("n_frames must be non-negative")
    min_dist = min_dist_factor * LJ_SIGMA
    frames = []
    for _ in range(n_frames):
        n = int(rng.integers(atoms_min, atoms_max + 1))
        # Box sized so clusters stay loosely bound and sampling terminates fast.
        box = box_scale * LJ_SIGMA * n ** (1.0 / 3.0)
        while True:
            pos = rng.uniform(-box / 2, box / 2, size=(n, 3))
            diff = pos[:, None, :] - pos[None, :, :]
            d = np.sqrt(np.sum(diff * diff, axis=-1))
            np.fill_diagonal(d, np.inf)
            if np.min(d) >= min_dist:
                break
        energy, forces = lj_energy_forces(pos)
        frames.append(
            MolecularFrame(
                atomic_numbers=[ARGON_Z] * n,
                positions=pos,
                forces=forces,
                energy=energy,
            )
        )
    return frames


def split_dataset(
    n: int, fractions: tuple[float, float, float], rng: np.random.Generator
) -> DatasetSplit:
    """Deterministic (given rng) disjoint covering train/val/test split."""
    if any(f <= 0 for f in fractions):
        raise ValueError("fractions must be positive")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions sum to {sum(fractions)}, expected 1")
    if n < len(fractions):
        raise ValueError(f"n={n} smaller than number of splits")
    perm = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_train = min(n_train, n - 2)
    n_val = max(1, min(n_val, n - n_train - 1))
    train = sorted(int(i) for i in perm[:n_train])
    val = sorted(int(i) for i in perm[n_train : n_train + n_val])
    test = sorted(int(i) for i in perm[n_train + n_val :])
    return DatasetSplit(train=train, val=val, test=test)


def write_manifest(path, files: dict[str, str], extra: Optional[dict] = None):
    """Dataset manifest: JSON mapping split name -> xyz file path."""
    doc = {"files": files}
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


def load_manifest(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
