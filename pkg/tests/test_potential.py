import io
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmpg.errors import BadMagic, OutOfRange, ShapeMismatch, TruncatedPayload
from mmpg.geometry import PairDescriptor
from mmpg.potential import (
    MAGIC,
    BinningScheme,
    PotentialTable,
    contact_profile,
    energy,
    hydrophobic_preference,
    load_table,
    read_table,
    swap_bins,
    symmetrize,
    synth_table,
    write_table,
)
from mmpg.structure import AA_INDEX

TINY = BinningScheme(3.0, 16.0, 4, 2, 2, 2)


def _uniform_table(scheme=TINY, **kw):
    ones = np.ones((20, 20, scheme.n_bins), dtype=np.float32)
    return PotentialTable(scheme, ones, ones.copy(), **kw)


def _rebin(scheme, d):
    """Brute-force bin lookup, written independently of the kernels."""
    r, ti, pi_, tj, pj, om = d
    def idx(v, lo, hi, n):
        return min(max(int(np.floor((v - lo) / (hi - lo) * n)), 0), n - 1)
    parts = [
        idx(r, scheme.r_min, scheme.r_max, scheme.n_r),
        idx(ti, 0, np.pi, scheme.n_theta),
        idx(pi_, -np.pi, np.pi, scheme.n_phi),
        idx(tj, 0, np.pi, scheme.n_theta),
        idx(pj, -np.pi, np.pi, scheme.n_phi),
        idx(om, -np.pi, np.pi, scheme.n_omega),
    ]
    return int(np.ravel_multi_index(parts, scheme.grid_shape))


def test_scheme_validation():
    with pytest.raises(ShapeMismatch):
        BinningScheme(5.0, 5.0)
    with pytest.raises(ShapeMismatch):
        BinningScheme(n_r=0)
    assert BinningScheme.korp_like().grid_shape == (13, 6, 12, 6, 12, 12)


def test_table_invariants():
    with pytest.raises(ShapeMismatch):
        PotentialTable(TINY, -np.ones((20, 20, TINY.n_bins)), np.ones((20, 20, TINY.n_bins)))
    with pytest.raises(ShapeMismatch):
        _uniform_table(rt=0.0)
    with pytest.raises(ShapeMismatch):
        _uniform_table(z=-1.0)


def test_equal_probabilities_give_zero():
    t = _uniform_table()
    assert np.all(t.energies == 0.0)


def test_hand_value_minus_ln2():
    obs = np.full((20, 20, TINY.n_bins), 0.8 / (TINY.n_bins - 1), dtype=np.float64)
    ref = np.full_like(obs, 0.9 / (TINY.n_bins - 1))
    obs[:, :, 0], ref[:, :, 0] = 0.2, 0.1
    t = PotentialTable(TINY, obs, ref, rt=1.0, z=0.0)
    assert t.energies[0, 0, 0] == pytest.approx(-np.log(2), abs=1e-6)


def test_energy_range_policy():
    t = _uniform_table()
    with pytest.raises(OutOfRange):
        energy(t, 0, 0, PairDescriptor(2.9, 1, 0, 1, 0, 0))
    assert energy(t, 0, 0, PairDescriptor(16.0, 1, 0, 1, 0, 0)) == np.inf
    e, close = t.pair_energies(np.zeros(3, int), np.zeros(3, int), np.array([[2.0, 1, 0, 1, 0, 0], [5.0, 1, 0, 1, 0, 0], [17.0, 1, 0, 1, 0, 0]]))
    assert close.tolist() == [True, False, False]
    assert e[0] == np.inf and e[1] == 0.0 and e[2] == np.inf


def test_energies_match_brute_force_rebinner(table, rng):
    s = table.scheme
    for _ in range(1000):
        d = (rng.uniform(s.r_min, s.r_max), rng.uniform(0, np.pi), rng.uniform(-np.pi, np.pi),
             rng.uniform(0, np.pi), rng.uniform(-np.pi, np.pi), rng.uniform(-np.pi, np.pi))
        a, b = rng.integers(20, size=2)
        obs = table.counts_obs[a, b].astype(np.float64)
        ref = table.counts_ref[a, b].astype(np.float64)
        k = _rebin(s, d)
        expected = -table.rt * np.log((obs[k] / obs.sum() + table.z) / (ref[k] / ref.sum() + table.z))
        assert energy(table, a, b, PairDescriptor(*d)) == pytest.approx(expected, rel=1e-9, abs=1e-12)


def test_piecewise_constant(table):
    s = table.scheme
    centers = s.bin_centers()
    jitter = np.array([0.1, 0.05, 0.05, 0.05, 0.05, 0.05])
    for k in range(0, s.n_bins, 37):
        a = energy(table, 3, 9, PairDescriptor(*centers[k]))
        b = energy(table, 3, 9, PairDescriptor(*(centers[k] + jitter)))
        assert a == b


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 0.01), st.floats(0.0, 0.01), st.integers(0, 1000))
def test_smoothing_pulls_toward_zero(z1, z2, seed):
    z1, z2 = sorted((z1, z2))
    rng = np.random.default_rng(seed)
    obs = rng.uniform(0.1, 10, size=(20, 20, TINY.n_bins))
    ref = rng.uniform(0.1, 10, size=(20, 20, TINY.n_bins))
    e1 = PotentialTable(TINY, obs, ref, z=z1).energies
    e2 = PotentialTable(TINY, obs, ref, z=z2).energies
    assert np.all(np.abs(e2) <= np.abs(e1) + 1e-12)


def test_round_trip_and_determinism(tmp_path):
    t = synth_table(7, TINY)
    assert load_table(write_table(t)) == t
    assert write_table(synth_table(7, TINY)) == write_table(t)
    path = tmp_path / "t.bin"
    write_table(t, path)
    assert read_table(path) == t
    buf = io.BytesIO()
    write_table(t, buf)
    assert load_table(io.BytesIO(buf.getvalue())) == t


def test_load_errors():
    raw = write_table(synth_table(0, TINY))
    with pytest.raises(BadMagic):
        load_table(b"NOTATABL" + raw[8:])
    with pytest.raises(TruncatedPayload):
        load_table(raw[:-3])
    with pytest.raises(TruncatedPayload):
        load_table(raw[:20])
    # header says 13 radial bins, payload sized for 12
    t13 = synth_table(0, BinningScheme(3.0, 16.0, 13, 2, 2, 2))
    t12 = synth_table(0, BinningScheme(3.0, 16.0, 12, 2, 2, 2))
    header13 = write_table(t13)[: len(MAGIC) + 64]
    payload12 = write_table(t12)[len(MAGIC) + 64:]
    with pytest.raises(ShapeMismatch):
        load_table(header13 + payload12)


def test_200kb_table_loads_fast():
    scheme = BinningScheme(3.0, 16.0, 2, 2, 2, 2)
    raw = write_table(synth_table(0, scheme))
    assert 150_000 < len(raw) < 260_000
    t0 = time.perf_counter()
    load_table(raw)
    assert time.perf_counter() - t0 < 0.05


def test_zero_bias_mean_energy_near_zero():
    t = synth_table(3, TINY, z=0.0, reference="marginal")
    assert abs(float(t.energies.mean())) < 0.05


def test_leu_bias_below_gly():
    leu, gly = AA_INDEX["LEU"], AA_INDEX["GLY"]
    t = synth_table(5, TINY, contact_preference={("LEU", "LEU"): -1.0})
    contact = contact_profile(TINY.bin_centers()) > 0.5
    assert contact.any()
    assert t.energies[leu, leu][contact].mean() < t.energies[gly, gly][contact].mean() - 0.5


def test_symmetrize_identity(table, rng):
    t = symmetrize(synth_table(4, TINY))
    perm = swap_bins(TINY)
    np.testing.assert_allclose(t.energies, t.energies.transpose(1, 0, 2)[:, :, perm], atol=1e-5)
    centers = table.scheme.bin_centers()
    for _ in range(100):
        k = rng.integers(len(centers))
        d = PairDescriptor(*centers[k])
        a, b = rng.integers(20, size=2)
        assert energy(table, a, b, d) == pytest.approx(energy(table, b, a, d.swapped()), abs=1e-5)


def test_hydrophobic_wells_reach_threshold(table):
    ile = AA_INDEX["ILE"]
    assert table.energies[ile, ile].min() < -1.0
    assert hydrophobic_preference()[("ILE", "ILE")] < hydrophobic_preference()[("LYS", "LYS")] <= 0.0
