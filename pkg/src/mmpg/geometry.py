"""Dihedrals, side-chain χ encodings, per-residue local frames and 6-D pair descriptors.

All geometry is carried out in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometry
from .structure import ProteinStructure, Residue

EPS = 1e-12

# Standard side-chain torsion quadruples (IUPAC-IUB 1970 naming). χ1..χ4 per type.
CHI_ATOMS = {
    "ARG": (("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "CD"), ("CB", "CG", "CD", "NE"), ("CG", "CD", "NE", "CZ")),
    "ASN": (("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "OD1")),
    "ASP": (("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "OD1")),
    "CYS": (("N", "CA", "CB", "SG"),),
    "GLN": (("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "CD"), ("CB", "CG", "CD", "OE1")),
    "GLU": (("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "CD"), ("CB", "CG", "CD", "OE1")),
    "HIS": (("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "ND1")),
    "ILE": (("N", "CA", "CB", "CG1"), ("CA", "CB", "CG1", "CD1")),
    "LEU": (("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "CD1")),
    "LYS": (("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "CD"), ("CB", "CG", "CD", "CE"), ("CG", "CD", "CE", "NZ")),
    "MET": (("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "SD"), ("CB", "CG", "SD", "CE")),
    "PHE": (("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "CD1")),
    "PRO": (("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "CD")),
    "SER": (("N", "CA", "CB", "OG"),),
    "THR": (("N", "CA", "CB", "OG1"),),
    "TRP": (("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "CD1")),
    "TYR": (("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "CD1")),
    "VAL": (("N", "CA", "CB", "CG1"),),
    "ALA": (),
    "GLY": (),
}

# side-chain heavy atoms this package relies on: CB plus every χ-defining atom
SIDECHAIN_ATOMS = {
    name: (() if name == "GLY" else ("CB",) + tuple(q[3] for q in quads))
    for name, quads in CHI_ATOMS.items()
}


@dataclass(frozen=True, eq=False)
class LocalFrame:
    vx: np.ndarray
    vy: np.ndarray
    vz: np.ndarray
    origin: np.ndarray

    @property
    def basis(self) -> np.ndarray:
        """Rows vx, vy, vz; ``basis @ v`` expresses ``v`` in this frame."""
        return np.stack([self.vx, self.vy, self.vz])


@dataclass(frozen=True)
class PairDescriptor:
    r: float
    theta_i: float
    phi_i: float
    theta_j: float
    phi_j: float
    omega: float

    def astuple(self) -> tuple:
        return (self.r, self.theta_i, self.phi_i, self.theta_j, self.phi_j, self.omega)

    def swapped(self) -> "PairDescriptor":
        return PairDescriptor(self.r, self.theta_j, self.phi_j, self.theta_i, self.phi_i, self.omega)


@dataclass(frozen=True, eq=False)
class SideChainEncoding:
    values: np.ndarray  # (8,) sin/cos pairs
    mask: np.ndarray  # (4,) bool


def _wrap(angle: float) -> float:
    # atan2 returns -pi for a negative-zero sine; fold it onto +pi
    return np.pi if angle <= -np.pi else angle


def dihedral(p1, p2, p3, p4) -> float:
    """Signed torsion of p1-p2-p3-p4 in (-π, π], positive for clockwise rotation viewed along p2→p3."""
    p1, p2, p3, p4 = (np.asarray(p, dtype=np.float64) for p in (p1, p2, p3, p4))
    b1 = p2 - p1
    b2 = p3 - p2
    b3 = p4 - p3
    n1 = np.cross(b1, b2)
    n2 = np.cross(b2, b3)
    if np.linalg.norm(n1) < EPS or np.linalg.norm(n2) < EPS:
        raise DegenerateGeometry("dihedral undefined for collinear points")
    y = np.linalg.norm(b2) * np.dot(b1, n2)
    x = np.dot(n1, n2)
    return _wrap(float(np.arctan2(y, x)))


def chi_angles(res: Residue) -> SideChainEncoding:
    values = np.zeros(8)
    mask = np.zeros(4, dtype=bool)
    for n, quad in enumerate(CHI_ATOMS[res.name]):
        if not res.has(*quad):
            continue
        try:
            chi = dihedral(*(res.coord(a) for a in quad))
        except DegenerateGeometry:
            continue
        values[2 * n] = np.sin(chi)
        values[2 * n + 1] = np.cos(chi)
        mask[n] = True
    return SideChainEncoding(values, mask)


def _frame_from_backbone(n_pos, ca_pos, c_pos) -> LocalFrame:
    r_n = n_pos - ca_pos
    r_c = c_pos - ca_pos
    z = r_c + r_n
    nz = np.linalg.norm(z)
    if nz < EPS:
        raise DegenerateGeometry("N and C are opposite about CA; V_z undefined")
    vz = z / nz
    y = np.cross(vz, r_n)
    ny = np.linalg.norm(y)
    if ny < EPS:
        raise DegenerateGeometry("collinear backbone atoms; V_y undefined")
    vy = y / ny
    vx = np.cross(vy, vz)
    return LocalFrame(vx, vy, vz, np.array(ca_pos, dtype=np.float64))


def local_frame(res: Residue) -> LocalFrame:
    return _frame_from_backbone(res.coord("N"), res.coord("CA"), res.coord("C"))


def structure_frames(s: ProteinStructure) -> tuple:
    """Vectorised frames for every residue.

    Returns ``(origins, bases)`` with shapes (n, 3) and (n, 3, 3); ``bases[i]``
    holds rows vx, vy, vz of residue i.
    """
    bb = s.backbone
    ca = bb[:, 1]
    r_n = bb[:, 0] - ca
    r_c = bb[:, 2] - ca
    z = r_c + r_n
    nz = np.linalg.norm(z, axis=1)
    if np.any(nz < EPS):
        raise DegenerateGeometry(f"V_z undefined at residues {np.flatnonzero(nz < EPS).tolist()}")
    vz = z / nz[:, None]
    y = np.cross(vz, r_n)
    ny = np.linalg.norm(y, axis=1)
    if np.any(ny < EPS):
        raise DegenerateGeometry(f"V_y undefined at residues {np.flatnonzero(ny < EPS).tolist()}")
    vy = y / ny[:, None]
    vx = np.cross(vy, vz)
    return ca.copy(), np.stack([vx, vy, vz], axis=1)


def _polar(local: np.ndarray) -> tuple:
    theta = float(np.arctan2(np.hypot(local[0], local[1]), local[2]))
    phi = _wrap(float(np.arctan2(local[1], local[0])))
    return theta, phi


def pair_descriptor(f_i: LocalFrame, f_j: LocalFrame) -> PairDescriptor:
    d = f_j.origin - f_i.origin
    r = float(np.linalg.norm(d))
    if r < EPS:
        raise DegenerateGeometry("coincident frame origins")
    theta_i, phi_i = _polar(f_i.basis @ (d / r))
    theta_j, phi_j = _polar(f_j.basis @ (-d / r))
    omega = dihedral(f_i.origin + f_i.vz, f_i.origin, f_j.origin, f_j.origin + f_j.vz)
    return PairDescriptor(r, theta_i, phi_i, theta_j, phi_j, omega)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform proper rotation matrix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def place_atom(a, b, c, bond: float, angle: float, torsion: float) -> np.ndarray:
    """Position d such that |cd| = bond, angle(b, c, d) = angle, dihedral(a, b, c, d) = torsion."""
    bc = c - b
    bc /= np.linalg.norm(bc)
    n = np.cross(b - a, bc)
    n /= np.linalg.norm(n)
    m = np.cross(n, bc)
    d2 = np.array([-bond * np.cos(angle), bond * np.sin(angle) * np.cos(torsion), bond * np.sin(angle) * np.sin(torsion)])
    return c + d2[0] * bc + d2[1] * m + d2[2] * n
