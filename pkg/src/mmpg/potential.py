"""Binned 6-D knowledge-based pair potentials evaluated by inverse Boltzmann.

A table stores observed and reference counts for every ordered residue-type
pair over a flat grid of geometric bins (r, θi, φi, θj, φj, ω). Energies are

    E = -rt * ln((P_obs + z) / (P_ref + z))

with each probability normalised over the bins of its own type pair.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import kernels
from .errors import BadMagic, OutOfRange, ShapeMismatch, TruncatedPayload
from .geometry import PairDescriptor
from .structure import AA3

MAGIC = b"KORPTBL1"
_HEADER = struct.Struct("<ddqqqqdd")
N_TYPES = 20
DEFAULT_RT = 0.593  # kcal/mol at 298 K


@dataclass(frozen=True)
class BinningScheme:
    r_min: float = 3.0
    r_max: float = 16.0
    n_r: int = 13
    n_theta: int = 2
    n_phi: int = 2
    n_omega: int = 2

    def __post_init__(self):
        if not self.r_min < self.r_max:
            raise ShapeMismatch(f"r_min {self.r_min} must be below r_max {self.r_max}")
        for name in ("n_r", "n_theta", "n_phi", "n_omega"):
            if int(getattr(self, name)) < 1:
                raise ShapeMismatch(f"{name} must be >= 1")

    @classmethod
    def korp_like(cls) -> "BinningScheme":
        """Finer grid (θ 6, φ 12, ω 12 bins); roughly 1.3 GB per count array."""
        return cls(3.0, 16.0, 13, 6, 12, 12)

    @property
    def grid_shape(self) -> tuple:
        return (self.n_r, self.n_theta, self.n_phi, self.n_theta, self.n_phi, self.n_omega)

    @property
    def n_bins(self) -> int:
        return int(np.prod(self.grid_shape))

    @property
    def shape(self) -> tuple:
        return (N_TYPES, N_TYPES) + self.grid_shape

    def bin_of(self, desc: np.ndarray) -> np.ndarray:
        """Flat bin index for an (P, 6) descriptor array (r must lie in range)."""
        desc = np.ascontiguousarray(desc, dtype=np.float64)
        return kernels.bin_index(
            desc, float(self.r_min), float(self.r_max),
            int(self.n_r), int(self.n_theta), int(self.n_phi), int(self.n_omega),
        )

    def bin_centers(self) -> np.ndarray:
        """(n_bins, 6) descriptor at the centre of every bin, in flat order."""
        r = self.r_min + (np.arange(self.n_r) + 0.5) * (self.r_max - self.r_min) / self.n_r
        th = (np.arange(self.n_theta) + 0.5) * np.pi / self.n_theta
        ph = -np.pi + (np.arange(self.n_phi) + 0.5) * 2 * np.pi / self.n_phi
        om = -np.pi + (np.arange(self.n_omega) + 0.5) * 2 * np.pi / self.n_omega
        grids = np.meshgrid(r, th, ph, th, ph, om, indexing="ij")
        return np.stack([g.reshape(-1) for g in grids], axis=1)


@dataclass(frozen=True, eq=False)
class PotentialTable:
    scheme: BinningScheme
    counts_obs: np.ndarray  # (20, 20, n_bins) float32
    counts_ref: np.ndarray
    rt: float = DEFAULT_RT
    z: float = field(default=None)

    def __post_init__(self):
        expected = (N_TYPES, N_TYPES, self.scheme.n_bins)
        obs = np.asarray(self.counts_obs, dtype=np.float32).reshape(expected)
        ref = np.asarray(self.counts_ref, dtype=np.float32).reshape(expected)
        if np.any(obs < 0) or np.any(ref < 0):
            raise ShapeMismatch("counts must be non-negative")
        object.__setattr__(self, "counts_obs", obs)
        object.__setattr__(self, "counts_ref", ref)
        if self.z is None:
            object.__setattr__(self, "z", 0.01 / self.scheme.n_bins)
        if not self.rt > 0:
            raise ShapeMismatch(f"rt must be positive, got {self.rt}")
        if not self.z >= 0:
            raise ShapeMismatch(f"z must be non-negative, got {self.z}")

    @cached_property
    def energies(self) -> np.ndarray:
        """(20, 20, n_bins) energy lookup."""
        obs = self.counts_obs.astype(np.float64)
        ref = self.counts_ref.astype(np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            p_obs = obs / obs.sum(axis=2, keepdims=True)
            p_ref = ref / ref.sum(axis=2, keepdims=True)
            p_obs = np.nan_to_num(p_obs, nan=0.0)
            p_ref = np.nan_to_num(p_ref, nan=0.0)
            e = -self.rt * np.log((p_obs + self.z) / (p_ref + self.z))
        # 0/0 (both probabilities zero with z == 0) carries no information
        return np.where(np.isnan(e), 0.0, e)

    def energy_at(self, type_a: int, type_b: int, bin_index) -> np.ndarray:
        return self.energies[type_a, type_b, bin_index]

    def pair_energies(self, type_a: np.ndarray, type_b: np.ndarray, desc: np.ndarray) -> tuple:
        """Vectorised energies for (P, 6) descriptors.

        Returns ``(energy, too_close)``: pairs at r >= r_max get +inf, pairs at
        r < r_min get +inf and are flagged in ``too_close``.
        """
        r = desc[:, 0]
        too_close = r < self.scheme.r_min
        in_range = (~too_close) & (r < self.scheme.r_max)
        out = np.full(len(r), np.inf)
        if np.any(in_range):
            bins = self.scheme.bin_of(desc[in_range])
            out[in_range] = self.energies[type_a[in_range], type_b[in_range], bins]
        return out, too_close

    def tobytes(self) -> bytes:
        s = self.scheme
        header = _HEADER.pack(
            float(s.r_min), float(s.r_max), int(s.n_r), int(s.n_theta), int(s.n_phi), int(s.n_omega),
            float(self.rt), float(self.z),
        )
        return MAGIC + header + self.counts_obs.astype("<f4").tobytes() + self.counts_ref.astype("<f4").tobytes()

    def __eq__(self, other):
        if not isinstance(other, PotentialTable):
            return NotImplemented
        return (
            self.scheme == other.scheme
            and self.rt == other.rt
            and self.z == other.z
            and np.array_equal(self.counts_obs, other.counts_obs)
            and np.array_equal(self.counts_ref, other.counts_ref)
        )

    __hash__ = None


def energy(table: PotentialTable, type_a: int, type_b: int, d: PairDescriptor) -> float:
    """Energy of one residue pair; +inf beyond ``r_max``; OutOfRange below ``r_min``."""
    if d.r < table.scheme.r_min:
        raise OutOfRange(f"r = {d.r:.3f} below r_min = {table.scheme.r_min}")
    if d.r >= table.scheme.r_max:
        return float("inf")
    b = table.scheme.bin_of(np.array([d.astuple()]))[0]
    return float(table.energies[type_a, type_b, b])


# --------------------------------------------------------------------------- binary IO


def write_table(table: PotentialTable, fh=None):
    data = table.tobytes()
    if fh is None:
        return data
    if isinstance(fh, (str, bytes)) or hasattr(fh, "__fspath__"):
        with open(fh, "wb") as out:
            out.write(data)
    else:
        fh.write(data)
    return data


def load_table(raw) -> PotentialTable:
    if hasattr(raw, "read"):
        raw = raw.read()
    raw = memoryview(raw)
    if len(raw) < len(MAGIC) or bytes(raw[: len(MAGIC)]) != MAGIC:
        raise BadMagic("not a potential table (bad magic)")
    if len(raw) < len(MAGIC) + _HEADER.size:
        raise TruncatedPayload("header truncated")
    r_min, r_max, n_r, n_theta, n_phi, n_omega, rt, z = _HEADER.unpack_from(raw, len(MAGIC))
    scheme = BinningScheme(r_min, r_max, n_r, n_theta, n_phi, n_omega)
    payload = raw[len(MAGIC) + _HEADER.size:]
    per_array = N_TYPES * N_TYPES * scheme.n_bins
    expected = 2 * per_array * 4
    if len(payload) != expected:
        pair_block = 2 * N_TYPES * N_TYPES * 4
        if len(payload) and len(payload) % pair_block == 0:
            raise ShapeMismatch(
                f"header implies {scheme.n_bins} bins per type pair, payload holds "
                f"{len(payload) // pair_block}"
            )
        raise TruncatedPayload(f"payload has {len(payload)} bytes, expected {expected}")
    values = np.frombuffer(payload, dtype="<f4")
    obs = values[:per_array].reshape(N_TYPES, N_TYPES, scheme.n_bins)
    ref = values[per_array:].reshape(N_TYPES, N_TYPES, scheme.n_bins)
    return PotentialTable(scheme, obs, ref, rt, z)


def read_table(path) -> PotentialTable:
    with open(path, "rb") as fh:
        return load_table(fh.read())


# --------------------------------------------------------------------------- synthesis


def swap_bins(scheme: BinningScheme) -> np.ndarray:
    """Permutation mapping each flat bin to the bin of its (i ↔ j) swapped descriptor."""
    idx = np.arange(scheme.n_bins).reshape(scheme.grid_shape)
    return idx.transpose(0, 3, 4, 1, 2, 5).reshape(-1)


def symmetrize(table: PotentialTable) -> PotentialTable:
    """Average counts so that energy(a, b, d) == energy(b, a, swap(d))."""
    perm = swap_bins(table.scheme)

    def sym(c):
        c = c.astype(np.float64)
        return ((c + c.transpose(1, 0, 2)[:, :, perm]) / 2).astype(np.float32)

    return PotentialTable(table.scheme, sym(table.counts_obs), sym(table.counts_ref), table.rt, table.z)


def marginal_reference(counts_obs: np.ndarray) -> np.ndarray:
    """Reference counts: the observed counts summed over all type pairs, per bin."""
    m = counts_obs.astype(np.float64).sum(axis=(0, 1))
    return np.broadcast_to(m, counts_obs.shape).astype(np.float32)


# Kyte-Doolittle hydropathy, canonical type order
HYDROPATHY = dict(zip(AA3, (
    1.8, -4.5, -3.5, -3.5, 2.5, -3.5, -3.5, -0.4, -3.2, 4.5,
    3.8, -3.9, 1.9, 2.8, -1.6, -0.8, -0.7, -0.9, -1.3, 4.2,
)))


def hydrophobic_preference(scale: float = 2.5) -> dict:
    """Type-pair biases favouring hydrophobic contacts, keyed by (name_a, name_b)."""
    h = np.array([HYDROPATHY[a] for a in AA3]) / 4.5
    return {
        (AA3[a], AA3[b]): float(-scale * max(h[a] + h[b], 0.0) / 2)
        for a in range(N_TYPES)
        for b in range(N_TYPES)
    }


def contact_profile(centers: np.ndarray, inner: float = 8.0, outer: float = 12.0) -> np.ndarray:
    """Weight in [0, 1] of each bin centre: short range, both residues facing each other."""
    radial = np.clip((outer - centers[:, 0]) / (outer - inner), 0.0, 1.0)
    facing = np.maximum(np.cos(centers[:, 1]), 0.0) * np.maximum(np.cos(centers[:, 3]), 0.0)
    w = radial * facing
    return w / w.max() if w.max() > 0 else w


def synth_table(
    seed: int,
    scheme: BinningScheme | None = None,
    contact_preference: dict | None = None,
    rt: float = DEFAULT_RT,
    z: float | None = None,
    noise: float = 0.15,
    counts_per_pair: float = 1e5,
    reference: str = "marginal",
) -> PotentialTable:
    """Deterministic synthetic table whose energies follow per-pair contact biases.

    For type pair (a, b) with bias ``b_ab`` the observed counts in bin g are
    ``N * q(g) * exp(-(b_ab * w(r_g) + noise) / rt)`` where ``q`` is a
    volume-weighted geometric prior and ``w`` a short-range contact profile.
    Reference counts are the marginal over type pairs (``reference="marginal"``)
    or the prior ``N * q`` itself (``reference="prior"``), which keeps contact
    wells at roughly the requested depth. ``contact_preference``
    maps (type_a, type_b), either 3-letter names or indices, to a bias; missing
    pairs get 0. The result is symmetrised.
    """
    scheme = scheme or BinningScheme()
    rng = np.random.default_rng(seed)
    centers = scheme.bin_centers()
    q = centers[:, 0] ** 2 * np.sin(centers[:, 1]) * np.sin(centers[:, 3])
    q = q / q.sum()
    w = contact_profile(centers)

    bias = np.zeros((N_TYPES, N_TYPES))
    for (a, b), v in (contact_preference or {}).items():
        ia = a if isinstance(a, (int, np.integer)) else AA3.index(a)
        ib = b if isinstance(b, (int, np.integer)) else AA3.index(b)
        bias[ia, ib] = v
    eps = noise * rng.standard_normal((N_TYPES, N_TYPES, scheme.n_bins))
    target = bias[:, :, None] * w[None, None, :] + eps
    obs = counts_per_pair * q[None, None, :] * np.exp(-target / rt)
    obs = obs.astype(np.float32)
    if reference == "marginal":
        ref = marginal_reference(obs)
    elif reference == "prior":
        ref = np.broadcast_to(counts_per_pair * q, obs.shape).astype(np.float32)
    else:
        raise ValueError(f"unknown reference {reference!r}")
    table = PotentialTable(scheme, obs, ref, rt, z)
    return symmetrize(table)
