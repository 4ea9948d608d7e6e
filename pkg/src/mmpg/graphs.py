"""Physical, chemical and geometric perspective graphs over residues."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import kernels
from .errors import DegenerateGeometry, ZeroEmbedding
from .geometry import LocalFrame, chi_angles, structure_frames
from .potential import PotentialTable
from .structure import ProteinStructure

EDGE_DIM = kernels.EDGE_DIM
DEFAULT_TAU = -1.0
DEFAULT_K = 20
DEFAULT_RADIUS = 4.0


class Perspective(str, Enum):
    PHYSICAL = "Physical"
    CHEMICAL = "Chemical"
    GEOMETRIC = "Geometric"


PERSPECTIVES = (Perspective.PHYSICAL, Perspective.CHEMICAL, Perspective.GEOMETRIC)


@dataclass(frozen=True, eq=False)
class PerspectiveGraph:
    perspective: Perspective
    n: int
    edges: np.ndarray  # (E, 2) int64, lexicographically sorted, (i, j): i receives from j
    edge_features: np.ndarray  # (E, EDGE_DIM)
    params: dict = field(default_factory=dict)

    @property
    def src(self) -> np.ndarray:
        """Receiving node of each edge."""
        return self.edges[:, 0]

    @property
    def dst(self) -> np.ndarray:
        """Sending (neighbour) node of each edge."""
        return self.edges[:, 1]

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def edge_set(self) -> set:
        return {(int(i), int(j)) for i, j in self.edges}

    def degree(self) -> np.ndarray:
        return np.bincount(self.edges[:, 0], minlength=self.n)

    def adjacency(self) -> list:
        out = [[] for _ in range(self.n)]
        for i, j in self.edges:
            out[int(i)].append(int(j))
        return out

    def is_symmetric(self) -> bool:
        es = self.edge_set()
        return all((j, i) in es for i, j in es)

    def to_dict(self) -> dict:
        return {
            "perspective": self.perspective.value,
            "n": self.n,
            "edges": self.edges.tolist(),
            "edge_features": self.edge_features.tolist(),
            "params": self.params,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "PerspectiveGraph":
        edges = np.array(d["edges"], dtype=np.int64).reshape(-1, 2)
        feats = np.array(d["edge_features"], dtype=np.float64)
        feats = feats.reshape(len(edges), -1) if len(edges) else np.zeros((0, EDGE_DIM))
        return cls(Perspective(d["perspective"]), int(d["n"]), edges, feats, dict(d.get("params", {})))


@dataclass(frozen=True)
class EdgeFeature:
    seq_sep_encoding: np.ndarray  # (12,)
    rel_pos_local: np.ndarray  # (3,)
    dist_rbf: np.ndarray  # (16,)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.seq_sep_encoding, self.rel_pos_local, self.dist_rbf])


@dataclass(frozen=True, eq=False)
class StaticNodeFeatures:
    types: np.ndarray  # (n,) int
    sidechain: np.ndarray  # (n, 8) sin/cos pairs
    mask: np.ndarray  # (n, 4) bool

    def __len__(self) -> int:
        return len(self.types)

    def record(self, i: int) -> dict:
        return {"type_index": int(self.types[i]), "sidechain": self.sidechain[i], "mask": self.mask[i]}


# --------------------------------------------------------------------------- features


def seq_sep_bucket(sep: int) -> int:
    """One-hot slot for signed sequence separation; -1 for zero."""
    if -5 <= sep <= -1:
        return sep + 5
    if 1 <= sep <= 5:
        return sep + 4
    if sep < -5:
        return 10
    if sep > 5:
        return 11
    return -1


def edge_feature(s: ProteinStructure, frames: list, i: int, j: int) -> EdgeFeature:
    if i == j:
        raise ValueError("edge features need i != j")
    seq = np.zeros(kernels.N_SEQ_BUCKETS)
    b = seq_sep_bucket(s.residues[j].seq_index - s.residues[i].seq_index)
    if b >= 0:
        seq[b] = 1.0
    f_i: LocalFrame = frames[i]
    d = frames[j].origin - f_i.origin
    dist = float(np.linalg.norm(d))
    if dist < 1e-12:
        raise DegenerateGeometry(f"residues {i} and {j} share a CA position")
    rel = f_i.basis @ (d / dist)
    rbf = np.exp(-(((dist - kernels.RBF_CENTERS) / kernels.RBF_WIDTH) ** 2))
    return EdgeFeature(seq, rel, rbf)


def pairwise_edge_features(s: ProteinStructure, frames: tuple | None = None) -> np.ndarray:
    """(n, n, EDGE_DIM) features for every ordered pair; the diagonal is zero."""
    origins, bases = frames if frames is not None else structure_frames(s)
    ca = np.ascontiguousarray(origins)
    diff = ca[:, None] - ca[None]
    dist = np.sqrt((diff**2).sum(-1)) + np.eye(len(ca))
    if np.any(dist < 1e-12):
        raise DegenerateGeometry("coincident CA positions")
    return kernels.edge_features_all(ca, np.ascontiguousarray(bases), np.ascontiguousarray(s.seq_indices))


def encode_static_node_features(s: ProteinStructure) -> StaticNodeFeatures:
    enc = [chi_angles(r) for r in s.residues]
    return StaticNodeFeatures(
        s.types.copy(),
        np.array([e.values for e in enc]).reshape(len(enc), 8),
        np.array([e.mask for e in enc]).reshape(len(enc), 4),
    )


# --------------------------------------------------------------------------- builders


def _sorted_edges(src: np.ndarray, dst: np.ndarray, n: int) -> np.ndarray:
    adj = np.zeros((n, n), dtype=bool)
    adj[src, dst] = True
    np.fill_diagonal(adj, False)
    i, j = np.nonzero(adj)
    return np.stack([i, j], axis=1).astype(np.int64)


def _symmetric_edges(src: np.ndarray, dst: np.ndarray, n: int) -> np.ndarray:
    return _sorted_edges(np.concatenate([src, dst]), np.concatenate([dst, src]), n)


def _features_for(edges: np.ndarray, features: np.ndarray) -> np.ndarray:
    if len(edges) == 0:
        return np.zeros((0, EDGE_DIM))
    return features[edges[:, 0], edges[:, 1]]


def physical_energies(s: ProteinStructure, table: PotentialTable, frames: tuple | None = None) -> tuple:
    """Energy of every unordered pair (lower index in the frame-i role).

    Returns ``(ii, jj, energy)`` with ``energy`` +inf for pairs outside the
    table's distance range (including steric clashes below r_min).
    """
    origins, bases = frames if frames is not None else structure_frames(s)
    ii, jj = np.triu_indices(s.n, k=1)
    ii = ii.astype(np.int64)
    jj = jj.astype(np.int64)
    desc, _ = kernels.pair_geometry(np.ascontiguousarray(origins), np.ascontiguousarray(bases), ii, jj)
    if np.any(desc[:, 0] < 1e-12):
        raise DegenerateGeometry("coincident CA positions")
    types = s.types
    e, _ = table.pair_energies(types[ii], types[jj], desc)
    return ii, jj, e


def build_physical(
    s: ProteinStructure,
    table: PotentialTable,
    tau: float = DEFAULT_TAU,
    *,
    frames: tuple | None = None,
    features: np.ndarray | None = None,
) -> PerspectiveGraph:
    """Connect i and j (both directions) when their pair energy is at most ``tau``."""
    frames = frames if frames is not None else structure_frames(s)
    ii, jj, e = physical_energies(s, table, frames)
    keep = np.isfinite(e) & (e <= tau)
    edges = _symmetric_edges(ii[keep], jj[keep], s.n)
    if features is None:
        features = pairwise_edge_features(s, frames)
    return PerspectiveGraph(Perspective.PHYSICAL, s.n, edges, _features_for(edges, features), {"tau": tau})


def build_geometric(
    s: ProteinStructure,
    r: float = DEFAULT_RADIUS,
    *,
    frames: tuple | None = None,
    features: np.ndarray | None = None,
) -> PerspectiveGraph:
    """Radius graph over CA positions: edge iff distance <= r."""
    if not r > 0:
        raise ValueError(f"radius must be positive, got {r}")
    ca = np.ascontiguousarray(s.ca)
    src, dst = kernels.radius_edges(ca, float(r))
    edges = _sorted_edges(src, dst, s.n)
    if features is None:
        features = pairwise_edge_features(s, frames)
    return PerspectiveGraph(Perspective.GEOMETRIC, s.n, edges, _features_for(edges, features), {"r": r})


def chemical_edges(h: np.ndarray, k: int = DEFAULT_K) -> np.ndarray:
    """Symmetrised hybrid top-k / positive-cosine edge list for embeddings ``h``."""
    h = np.ascontiguousarray(h, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    norms = np.linalg.norm(h, axis=1)
    if np.any(norms < 1e-12):
        raise ZeroEmbedding(f"zero embedding rows {np.flatnonzero(norms < 1e-12).tolist()}")
    n = h.shape[0]
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64)
    src, dst, _ = kernels.topk_similarity(h, int(k))
    return _symmetric_edges(src, dst, n)


def build_chemical(
    h: np.ndarray,
    k: int = DEFAULT_K,
    s: ProteinStructure | None = None,
    *,
    features: np.ndarray | None = None,
) -> PerspectiveGraph:
    """Chemical-similarity graph from node embeddings ``h``.

    Edge features come from ``features`` (precomputed pairwise tensor) or are
    computed from ``s``; with neither, the feature matrix is empty.
    """
    edges = chemical_edges(h, k)
    n = h.shape[0]
    if features is None and s is not None:
        features = pairwise_edge_features(s)
    feats = _features_for(edges, features) if features is not None else np.zeros((len(edges), 0))
    return PerspectiveGraph(Perspective.CHEMICAL, n, edges, feats, {"k": k})
