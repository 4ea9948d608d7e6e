from __future__ import annotations

import numpy as np
import pytest

from mmpg.harness import SyntheticSpec, default_table, make_synthetic_dataset, synthesize_structure, motifs_for
from mmpg.structure import AA_INDEX, Atom, ProteinStructure, Residue


def atom_line(serial, name, res_name, chain, res_num, xyz, altloc=" ", icode=" ", element=None, record="ATOM"):
    """One fixed-column ATOM record."""
    padded = f" {name:<3}" if len(name) < 4 else name
    element = element if element is not None else name[0]
    x, y, z = xyz
    return (
        f"{record:<6}{serial:5d} {padded:<4}{altloc}{res_name:>3} {chain}{res_num:4d}{icode}   "
        f"{x:8.3f}{y:8.3f}{z:8.3f}  1.00  0.00          {element:>2}"
    )


def backbone_lines(res_name, res_num, origin, chain="A", start_serial=1, skip=()):
    origin = np.asarray(origin, dtype=float)
    offsets = {"N": (-0.5, 1.3, 0.0), "CA": (0.0, 0.0, 0.0), "C": (1.5, 0.2, 0.1)}
    lines = []
    for k, (name, off) in enumerate(offsets.items()):
        if name in skip:
            continue
        lines.append(atom_line(start_serial + k, name, res_name, chain, res_num, origin + off))
    return lines


def residue(type_name: str, seq_index: int, ca, n_off=(-0.5, 1.3, 0.0), c_off=(1.5, 0.2, 0.1), **extra) -> Residue:
    ca = np.asarray(ca, dtype=float)
    atoms = {"N": Atom("N", ca + n_off), "CA": Atom("CA", ca), "C": Atom("C", ca + c_off)}
    for name, pos in extra.items():
        atoms[name] = Atom(name, np.asarray(pos, dtype=float))
    return Residue(AA_INDEX[type_name], seq_index, atoms)


def random_structure(n: int, seed: int, label=None) -> ProteinStructure:
    """Synthetic chain with realistic backbone geometry and random motif."""
    rng = np.random.default_rng([99, seed])
    spec = SyntheticSpec()
    motif = motifs_for(4)[int(rng.integers(4))]
    return synthesize_structure([(motif, n)], rng, spec, label=label)


@pytest.fixture(scope="session")
def table():
    return default_table(0)


@pytest.fixture(scope="session")
def small_dataset():
    return make_synthetic_dataset(SyntheticSpec(structures_per_class=3, min_len=20, max_len=30))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list = []


def record_criterion(number: int, passed: bool, detail: str) -> str:
    """Remember one acceptance verdict for the end-of-run summary and echo it."""
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
