"""Residue-level protein structures: fixed-column parsing, validation, JSON export."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import IO, Iterable, Union

import numpy as np

from .errors import EmptyChain, MalformedRecord, MissingBackbone, UnknownResidue

# canonical type order; index == amino_acid_type
AA3 = (
    "ALA", "ARG", "ASN", "ASP", "CYS", "GLN", "GLU", "GLY", "HIS", "ILE",
    "LEU", "LYS", "MET", "PHE", "PRO", "SER", "THR", "TRP", "TYR", "VAL",
)
AA1 = "ARNDCQEGHILKMFPSTWYV"
AA_INDEX = {name: i for i, name in enumerate(AA3)}
NONCANONICAL_MAP = {
    "MSE": "MET",
    "SEC": "CYS",
    "HSD": "HIS",
    "HSE": "HIS",
    "HSP": "HIS",
    "HIE": "HIS",
    "HID": "HIS",
    "HIP": "HIS",
    "CYX": "CYS",
    "ASH": "ASP",
    "GLH": "GLU",
    "LYN": "LYS",
}
BACKBONE = ("N", "CA", "C")
CHAIN_BREAK_DISTANCE = 4.5

Label = Union[int, tuple, None]


@dataclass(frozen=True)
class Atom:
    name: str
    position: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(pos)):
            raise MalformedRecord(f"atom {self.name}: non-finite coordinates {pos}")
        object.__setattr__(self, "position", pos)

    def __eq__(self, other):
        if not isinstance(other, Atom):
            return NotImplemented
        return self.name == other.name and np.array_equal(self.position, other.position)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Residue:
    amino_acid_type: int
    seq_index: int
    atoms: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.amino_acid_type < 20:
            raise UnknownResidue(f"amino_acid_type {self.amino_acid_type} outside [0, 19]")

    @property
    def name(self) -> str:
        return AA3[self.amino_acid_type]

    def has(self, *names: str) -> bool:
        return all(n in self.atoms for n in names)

    def coord(self, name: str) -> np.ndarray:
        return self.atoms[name].position

    def __eq__(self, other):
        if not isinstance(other, Residue):
            return NotImplemented
        return (
            self.amino_acid_type == other.amino_acid_type
            and self.seq_index == other.seq_index
            and self.atoms == other.atoms
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ProteinStructure:
    residues: tuple
    chain_id: str = "A"
    label: Label = None

    def __post_init__(self):
        object.__setattr__(self, "residues", tuple(self.residues))
        if isinstance(self.label, list):
            object.__setattr__(self, "label", tuple(int(v) for v in self.label))

    def __len__(self) -> int:
        return len(self.residues)

    @property
    def n(self) -> int:
        return len(self.residues)

    @cached_property
    def types(self) -> np.ndarray:
        return np.array([r.amino_acid_type for r in self.residues], dtype=np.int64)

    @cached_property
    def seq_indices(self) -> np.ndarray:
        return np.array([r.seq_index for r in self.residues], dtype=np.int64)

    @cached_property
    def backbone(self) -> np.ndarray:
        """(n, 3, 3) array of N, CA, C coordinates."""
        return np.array([[r.coord(a) for a in BACKBONE] for r in self.residues], dtype=np.float64)

    @property
    def ca(self) -> np.ndarray:
        return self.backbone[:, 1]

    def atom_count(self) -> int:
        return sum(len(r.atoms) for r in self.residues)

    def transformed(self, rotation: np.ndarray, translation: np.ndarray) -> "ProteinStructure":
        """Copy with every atom mapped to ``rotation @ x + translation``."""
        rotation = np.asarray(rotation, dtype=np.float64)
        translation = np.asarray(translation, dtype=np.float64)
        residues = [
            Residue(
                r.amino_acid_type,
                r.seq_index,
                {k: Atom(k, rotation @ a.position + translation) for k, a in r.atoms.items()},
            )
            for r in self.residues
        ]
        return ProteinStructure(residues, self.chain_id, self.label)

    def with_label(self, label: Label) -> "ProteinStructure":
        return ProteinStructure(self.residues, self.chain_id, label)

    def __eq__(self, other):
        if not isinstance(other, ProteinStructure):
            return NotImplemented
        return (
            self.chain_id == other.chain_id
            and self.label == other.label
            and self.residues == other.residues
        )

    __hash__ = None


# --------------------------------------------------------------------------- parsing


def _is_hydrogen(atom_name: str, element: str) -> bool:
    if element:
        return element in ("H", "D")
    stripped = atom_name.strip()
    return stripped[:1] in ("H", "D") or (stripped[:1].isdigit() and stripped[1:2] in ("H", "D"))


def _field_float(line: str, start: int, stop: int, lineno: int) -> float:
    try:
        return float(line[start:stop])
    except ValueError:
        raise MalformedRecord(f"line {lineno}: bad coordinate field {line[start:stop]!r}") from None


def parse_structure(raw: Union[bytes, str, IO], chain_filter: str | None = None) -> ProteinStructure:
    """Parse fixed-column ATOM records into a :class:`ProteinStructure`.

    Reads the first model only, keeps alternate locations blank or ``A``,
    ignores hydrogens and every record other than ATOM/TER/ENDMDL. When
    ``chain_filter`` is None the first chain encountered is used.
    """
    if hasattr(raw, "read"):
        raw = raw.read()
    if isinstance(raw, bytes):
        raw = raw.decode("ascii", errors="replace")

    chain_id = chain_filter
    order: list = []
    grouped: dict = {}
    for lineno, line in enumerate(io.StringIO(raw), start=1):
        line = line.rstrip("\r\n")
        record = line[:6].rstrip()
        if record == "ENDMDL":
            break
        if record != "ATOM":
            continue
        if len(line.rstrip()) < 54:
            raise MalformedRecord(f"line {lineno}: ATOM record shorter than 54 columns")
        altloc = line[16]
        if altloc not in (" ", "A"):
            continue
        chain = line[21]
        if chain_id is None:
            chain_id = chain
        if chain != chain_id:
            continue
        atom_name = line[12:16].strip()
        element = line[76:78].strip().upper() if len(line) >= 78 else ""
        if not atom_name:
            raise MalformedRecord(f"line {lineno}: empty atom name")
        if _is_hydrogen(line[12:16], element):
            continue
        res_name = line[17:20].strip().upper()
        try:
            res_num = int(line[22:26])
        except ValueError:
            raise MalformedRecord(f"line {lineno}: bad residue number {line[22:26]!r}") from None
        icode = line[26] if len(line) > 26 else " "
        xyz = [_field_float(line, a, a + 8, lineno) for a in (30, 38, 46)]
        key = (res_num, icode)
        if key not in grouped:
            grouped[key] = (res_name, res_num, icode, {})
            order.append(key)
        elif grouped[key][0] != res_name:
            raise MalformedRecord(
                f"line {lineno}: residue {res_num}{icode.strip()} named both "
                f"{grouped[key][0]} and {res_name}"
            )
        atoms = grouped[key][3]
        if atom_name not in atoms:
            atoms[atom_name] = Atom(atom_name, np.array(xyz))

    if not order:
        raise EmptyChain(f"no ATOM records for chain {chain_id!r}")

    residues = []
    for seq_index, key in enumerate(order):
        res_name, res_num, icode, atoms = grouped[key]
        canonical = NONCANONICAL_MAP.get(res_name, res_name)
        if canonical not in AA_INDEX:
            raise UnknownResidue(f"residue {res_num}{icode.strip()}: non-canonical name {res_name}")
        missing = [a for a in BACKBONE if a not in atoms]
        if missing:
            raise MissingBackbone(
                f"residue {res_num}{icode.strip()} ({res_name}, seq_index {seq_index}) "
                f"lacks backbone atom(s) {', '.join(missing)}"
            )
        residues.append(Residue(AA_INDEX[canonical], seq_index, atoms))
    return ProteinStructure(residues, chain_id or "A")


def read_structure(path, chain_filter: str | None = None) -> ProteinStructure:
    with open(path, "rb") as fh:
        return parse_structure(fh.read(), chain_filter)


def format_pdb(s: ProteinStructure) -> str:
    """Render ``s`` as fixed-column ATOM records (one model, one chain)."""
    lines = []
    serial = 1
    for res in s.residues:
        for name, atom in res.atoms.items():
            x, y, z = atom.position
            padded = f" {name:<3}" if len(name) < 4 else name
            lines.append(
                f"ATOM  {serial:5d} {padded:<4} {res.name:>3} {s.chain_id:1}{res.seq_index + 1:4d}    "
                f"{x:8.3f}{y:8.3f}{z:8.3f}  1.00  0.00          {name[0]:>2}"
            )
            serial += 1
    lines.append("TER")
    lines.append("END")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- validation


@dataclass(frozen=True)
class StructureWarning:
    kind: str  # "chi_availability" | "missing_sidechain" | "chain_break" | "duplicate_index"
    seq_index: int
    message: str


def validate_structure(s: ProteinStructure) -> list:
    """Report chain breaks, duplicate indices and side-chain/χ availability.

    Never raises and never mutates ``s``.
    """
    from .geometry import CHI_ATOMS, SIDECHAIN_ATOMS

    warnings = []
    seen = set()
    for res in s.residues:
        if res.seq_index in seen:
            warnings.append(
                StructureWarning("duplicate_index", res.seq_index, f"duplicate seq_index {res.seq_index}")
            )
        seen.add(res.seq_index)

        expected = SIDECHAIN_ATOMS[res.name]
        missing = [a for a in expected if a not in res.atoms]
        if missing:
            warnings.append(
                StructureWarning(
                    "missing_sidechain",
                    res.seq_index,
                    f"{res.name} {res.seq_index}: missing side-chain atoms {', '.join(missing)}",
                )
            )
        quads = CHI_ATOMS.get(res.name, ())
        available = [n for n, q in enumerate(quads, start=1) if res.has(*q)]
        unavailable = [n for n in range(1, 5) if n not in available]
        if unavailable:
            names = ", ".join(f"chi{n}" for n in unavailable)
            warnings.append(
                StructureWarning(
                    "chi_availability",
                    res.seq_index,
                    f"{res.name} {res.seq_index}: {len(available)} chi angles available; unavailable: {names}",
                )
            )

    for a, b in zip(s.residues[:-1], s.residues[1:]):
        if "CA" in a.atoms and "CA" in b.atoms:
            d = float(np.linalg.norm(b.coord("CA") - a.coord("CA")))
            if d > CHAIN_BREAK_DISTANCE:
                warnings.append(
                    StructureWarning(
                        "chain_break",
                        b.seq_index,
                        f"chain break between {a.seq_index} and {b.seq_index}: CA-CA {d:.2f} A",
                    )
                )
    return warnings


# --------------------------------------------------------------------------- JSON


def _label_to_json(label: Label):
    if label is None:
        return None
    if isinstance(label, tuple):
        return list(label)
    return int(label)


def structure_to_dict(s: ProteinStructure) -> dict:
    return {
        "chain_id": s.chain_id,
        "label": _label_to_json(s.label),
        "residues": [
            {
                "type": res.name,
                "seq_index": res.seq_index,
                "atoms": {
                    name: [float(f"{v:.3f}") for v in atom.position] for name, atom in res.atoms.items()
                },
            }
            for res in s.residues
        ],
    }


def structure_from_dict(d: dict) -> ProteinStructure:
    residues = []
    for r in d["residues"]:
        name = NONCANONICAL_MAP.get(r["type"], r["type"])
        if name not in AA_INDEX:
            raise UnknownResidue(f"non-canonical residue name {r['type']}")
        atoms = {k: Atom(k, np.array(v, dtype=np.float64)) for k, v in r["atoms"].items()}
        residues.append(Residue(AA_INDEX[name], int(r["seq_index"]), atoms))
    label = d.get("label")
    if isinstance(label, list):
        label = tuple(label)
    return ProteinStructure(residues, d.get("chain_id", "A"), label)


def structure_to_json(s: ProteinStructure) -> str:
    return json.dumps(structure_to_dict(s))


def structure_from_json(text: str) -> ProteinStructure:
    return structure_from_dict(json.loads(text))


def save_dataset(structures: Iterable[ProteinStructure], path) -> None:
    with open(path, "w") as fh:
        json.dump([structure_to_dict(s) for s in structures], fh)


def load_dataset(path) -> list:
    with open(path) as fh:
        return [structure_from_dict(d) for d in json.load(fh)]
