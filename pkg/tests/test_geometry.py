import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_structure, residue
from mmpg.errors import DegenerateGeometry
from mmpg.geometry import (
    CHI_ATOMS,
    LocalFrame,
    chi_angles,
    dihedral,
    local_frame,
    pair_descriptor,
    place_atom,
    random_rotation,
    structure_frames,
)
from mmpg.structure import AA_INDEX, Atom, Residue

points = arrays(np.float64, (4, 3), elements=st.floats(-10, 10, allow_nan=False))


def _dihedral_arccos(p1, p2, p3, p4):
    """Independent oracle: angle between plane normals with the sign from the triple product."""
    b1, b2, b3 = p2 - p1, p3 - p2, p4 - p3
    n1, n2 = np.cross(b1, b2), np.cross(b2, b3)
    c = np.clip(n1 @ n2 / (np.linalg.norm(n1) * np.linalg.norm(n2)), -1, 1)
    ang = np.arccos(c)
    return ang if np.dot(np.cross(n1, n2), b2) >= 0 else -ang


def _angle_gap(a, b):
    return abs((a - b + np.pi) % (2 * np.pi) - np.pi)


class TestDihedral:
    base = [np.array(p, float) for p in ((1, 0, 0), (0, 0, 0), (0, 0, 1))]

    def test_cis(self):
        assert dihedral(*self.base, (1, 0, 1)) == pytest.approx(0.0, abs=1e-15)

    def test_trans_is_plus_pi(self):
        assert dihedral(*self.base, (-1, 0, 1)) == np.pi

    def test_right_hand_sign(self):
        assert dihedral(*self.base, (0, 1, 1)) == pytest.approx(np.pi / 2, abs=1e-15)
        assert dihedral(*self.base, (0, -1, 1)) == pytest.approx(-np.pi / 2, abs=1e-15)

    def test_degenerate(self):
        with pytest.raises(DegenerateGeometry):
            dihedral((0, 0, 0), (0, 0, 1), (0, 0, 2), (1, 0, 3))
        with pytest.raises(DegenerateGeometry):
            dihedral((1, 0, 0), (0, 0, 0), (0, 0, 0), (0, 1, 1))

    @settings(max_examples=200, deadline=None)
    @given(points)
    def test_matches_arccos_oracle_and_is_reversal_symmetric(self, p):
        b1, b2, b3 = p[1] - p[0], p[2] - p[1], p[3] - p[2]
        assume(np.linalg.norm(np.cross(b1, b2)) > 1e-3 and np.linalg.norm(np.cross(b2, b3)) > 1e-3)
        d = dihedral(*p)
        assert -np.pi < d <= np.pi
        assert _angle_gap(d, _dihedral_arccos(*p)) < 1e-6
        assert _angle_gap(dihedral(p[3], p[2], p[1], p[0]), d) < 1e-9

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-3.1, 3.1), st.floats(0.5, 2.8), st.floats(0.8, 2.0))
    def test_place_atom_inverts_dihedral(self, torsion, angle, bond):
        a, b, c = np.array([1.0, 0.3, 0.0]), np.zeros(3), np.array([0.2, 0.1, 1.5])
        d = place_atom(a, b, c, bond, angle, torsion)
        assert np.linalg.norm(d - c) == pytest.approx(bond, abs=1e-9)
        u, v = b - c, d - c
        assert np.arccos(u @ v / np.linalg.norm(u) / np.linalg.norm(v)) == pytest.approx(angle, abs=1e-9)
        assert dihedral(a, b, c, d) == pytest.approx(torsion, abs=1e-9)


def _sidechain(name, chis):
    n, ca, c = np.array([-0.5, 1.3, 0.0]), np.zeros(3), np.array([1.5, 0.2, 0.1])
    atoms = {"N": n, "CA": ca, "C": c, "CB": place_atom(c, n, ca, 1.53, 1.93, -2.14)}
    for q, quad in enumerate(CHI_ATOMS[name]):
        atoms[quad[3]] = place_atom(*(atoms[x] for x in quad[:3]), 1.52, 1.95, chis[q])
    return Residue(AA_INDEX[name], 0, {k: Atom(k, v) for k, v in atoms.items()})


class TestChi:
    def test_glycine(self):
        enc = chi_angles(residue("GLY", 0, (0, 0, 0)))
        assert not enc.mask.any() and not enc.values.any()

    def test_serine(self):
        enc = chi_angles(_sidechain("SER", [1.0]))
        assert enc.mask.tolist() == [True, False, False, False]
        assert enc.values[2:].tolist() == [0.0] * 6

    def test_lysine_matches_hand_dihedrals(self):
        chis = [-1.0, 3.0, 0.5, -2.5]
        res = _sidechain("LYS", chis)
        enc = chi_angles(res)
        assert enc.mask.all()
        for n, quad in enumerate(CHI_ATOMS["LYS"]):
            ref = dihedral(*(res.coord(a) for a in quad))
            assert ref == pytest.approx(chis[n], abs=1e-9)
            assert enc.values[2 * n] == pytest.approx(np.sin(ref), abs=1e-12)
            assert enc.values[2 * n + 1] == pytest.approx(np.cos(ref), abs=1e-12)
            assert enc.values[2 * n] ** 2 + enc.values[2 * n + 1] ** 2 == pytest.approx(1.0, abs=1e-9)

    def test_missing_atom_masks_that_angle(self):
        res = _sidechain("LYS", [-1.0, 3.0, 0.5, -2.5])
        atoms = dict(res.atoms)
        del atoms["CE"]
        enc = chi_angles(Residue(res.amino_acid_type, 0, atoms))
        assert enc.mask.tolist() == [True, True, False, False]

    def test_rigid_motion_invariance(self, rng):
        s = random_structure(25, seed=4)
        moved = s.transformed(random_rotation(rng), rng.normal(size=3) * 20)
        for a, b in zip(s.residues, moved.residues):
            np.testing.assert_allclose(chi_angles(a).values, chi_angles(b).values, atol=1e-9)


class TestFrames:
    def test_hand_example(self):
        f = local_frame(residue("GLY", 0, (0, 0, 0), n_off=(0, 1, 0), c_off=(1, 0, 0)))
        h = 1 / np.sqrt(2)
        np.testing.assert_allclose(f.vz, (h, h, 0), atol=1e-12)
        np.testing.assert_allclose(f.vy, (0, 0, 1), atol=1e-12)
        np.testing.assert_allclose(f.vx, (-h, h, 0), atol=1e-12)
        np.testing.assert_allclose(f.origin, (0, 0, 0))

    def test_degenerate(self):
        with pytest.raises(DegenerateGeometry):
            local_frame(residue("GLY", 0, (0, 0, 0), n_off=(-1, 0, 0), c_off=(1, 0, 0)))
        with pytest.raises(DegenerateGeometry):
            local_frame(residue("GLY", 0, (0, 0, 0), n_off=(1, 0, 0), c_off=(2, 0, 0)))

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (2, 3), elements=st.floats(-3, 3, allow_nan=False)))
    def test_right_handed_orthonormal(self, offs):
        assume(np.linalg.norm(np.cross(offs[0], offs[1])) > 1e-2 and np.linalg.norm(offs.sum(0)) > 1e-2)
        f = local_frame(residue("GLY", 0, (0, 0, 0), n_off=offs[0], c_off=offs[1]))
        B = f.basis
        np.testing.assert_allclose(B @ B.T, np.eye(3), atol=1e-9)
        np.testing.assert_allclose(np.cross(f.vx, f.vy), f.vz, atol=1e-9)

    def test_frames_rotate_with_structure(self, rng):
        s = random_structure(30, seed=2)
        for _ in range(10):
            R, t = random_rotation(rng), rng.normal(size=3) * 10
            moved = s.transformed(R, t)
            for a, b in zip(s.residues, moved.residues):
                fa, fb = local_frame(a), local_frame(b)
                np.testing.assert_allclose(fb.basis, fa.basis @ R.T, atol=1e-9)
                np.testing.assert_allclose(fb.origin, R @ fa.origin + t, atol=1e-9)

    def test_vectorised_frames_match_scalar(self):
        s = random_structure(40, seed=5)
        origins, bases = structure_frames(s)
        for i, res in enumerate(s.residues):
            f = local_frame(res)
            np.testing.assert_allclose(bases[i], f.basis, atol=1e-14)
            np.testing.assert_allclose(origins[i], f.origin)


def _frame(origin, basis=np.eye(3)):
    return LocalFrame(basis[0], basis[1], basis[2], np.asarray(origin, float))


class TestPairDescriptor:
    def test_translation_along_vz_is_degenerate(self):
        with pytest.raises(DegenerateGeometry):
            pair_descriptor(_frame((0, 0, 0)), _frame((0, 0, 5)))

    def test_translation_along_vx(self):
        d = pair_descriptor(_frame((0, 0, 0)), _frame((4, 0, 0)))
        assert d.r == pytest.approx(4)
        assert d.theta_i == pytest.approx(np.pi / 2)
        assert d.phi_i == pytest.approx(0.0)
        assert d.theta_j == pytest.approx(np.pi / 2)
        assert d.phi_j == pytest.approx(np.pi)
        assert d.omega == pytest.approx(0.0, abs=1e-12)

    def test_coincident(self):
        with pytest.raises(DegenerateGeometry):
            pair_descriptor(_frame((1, 1, 1)), _frame((1, 1, 1)))

    def test_ranges_swap_and_rigid_invariance(self, rng):
        s = random_structure(30, seed=6)
        frames = [local_frame(r) for r in s.residues]
        moved = s.transformed(random_rotation(rng), rng.normal(size=3) * 30)
        moved_frames = [local_frame(r) for r in moved.residues]
        for i in range(0, 30, 3):
            for j in range(i + 1, 30, 4):
                d = pair_descriptor(frames[i], frames[j])
                assert d.r > 0
                assert 0 <= d.theta_i <= np.pi and 0 <= d.theta_j <= np.pi
                for ang in (d.phi_i, d.phi_j, d.omega):
                    assert -np.pi < ang <= np.pi
                sw = pair_descriptor(frames[j], frames[i])
                assert sw.r == pytest.approx(d.r, abs=1e-12)
                assert abs(sw.omega) == pytest.approx(abs(d.omega), abs=1e-9)
                np.testing.assert_allclose(sw.astuple(), d.swapped().astuple(), atol=1e-9)
                np.testing.assert_allclose(
                    pair_descriptor(moved_frames[i], moved_frames[j]).astuple(), d.astuple(), atol=1e-9
                )


def test_random_rotation_is_proper(rng):
    for _ in range(20):
        R = random_rotation(rng)
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0)
