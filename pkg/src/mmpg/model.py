"""Multi-perspective encoder with a shared top-K mixture of graph experts."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigInvalid, LabelArityMismatch
from .geometry import structure_frames
from .graphs import (
    DEFAULT_K,
    DEFAULT_RADIUS,
    DEFAULT_TAU,
    EDGE_DIM,
    PERSPECTIVES,
    Perspective,
    PerspectiveGraph,
    StaticNodeFeatures,
    build_geometric,
    build_physical,
    chemical_edges,
    encode_static_node_features,
    pairwise_edge_features,
)
from .potential import PotentialTable
from .structure import ProteinStructure

N_TYPES = 20
UNK_TYPE = 20
SIDECHAIN_DIM = 8


@dataclass
class ModelConfig:
    d_model: int = 64
    L_enc: int = 2
    L_exp: int = 1
    M: int = 10
    K: int = 4
    n_classes: int = 4
    lam: float = 0.1
    lb_coeff: float = 0.01
    multi_label: bool = False
    expert_input: str = "encoder"  # "encoder" | "raw"
    lb_mode: str = "importance"  # "importance" | "load" | "both"
    k: int = DEFAULT_K
    init_gain: float = 1.0  # multiplies the init bound of message-passing weights

    def validate(self) -> "ModelConfig":
        if not 1 <= self.K <= self.M:
            raise ConfigInvalid(f"need 1 <= K <= M, got K={self.K}, M={self.M}")
        if self.d_model < 1 or self.n_classes < 1 or self.k < 1:
            raise ConfigInvalid("d_model, n_classes and k must be positive")
        if self.L_enc < 0 or self.L_exp < 0:
            raise ConfigInvalid("layer counts must be non-negative")
        if self.lam < 0 or self.lb_coeff < 0:
            raise ConfigInvalid("lambda and lb_coeff must be non-negative")
        if self.expert_input not in ("encoder", "raw"):
            raise ConfigInvalid(f"expert_input must be 'encoder' or 'raw', got {self.expert_input!r}")
        if self.lb_mode not in ("importance", "load", "both"):
            raise ConfigInvalid(f"unknown lb_mode {self.lb_mode!r}")
        if not self.init_gain > 0:
            raise ConfigInvalid("init_gain must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigInvalid(f"unknown model config keys {sorted(unknown)}")
        return cls(**d).validate()


# --------------------------------------------------------------------------- graph inputs


@dataclass(frozen=True, eq=False)
class GraphInput:
    """Edge arrays ready for message passing; ``scaled`` folds in 1/sqrt(|N(i)||N(j)|)."""

    n: int
    src: np.ndarray
    dst: np.ndarray
    scaled: Tensor

    @classmethod
    def from_edges(cls, n: int, edges: np.ndarray, features: np.ndarray) -> "GraphInput":
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        src, dst = edges[:, 0].copy(), edges[:, 1].copy()
        deg = np.bincount(src, minlength=n).astype(np.float64)
        norm = 1.0 / np.sqrt(deg[src] * deg[dst]) if len(src) else np.zeros(0)
        feats = np.asarray(features, dtype=np.float64).reshape(len(src), EDGE_DIM)
        return cls(n, src, dst, Tensor(feats * norm[:, None]))

    @classmethod
    def from_graph(cls, g: PerspectiveGraph) -> "GraphInput":
        return cls.from_edges(g.n, g.edges, g.edge_features)


@dataclass(eq=False)
class Sample:
    """Everything about one structure that does not depend on model parameters."""

    structure: ProteinStructure
    static: StaticNodeFeatures
    pair_features: np.ndarray  # (n, n, EDGE_DIM)
    physical: PerspectiveGraph
    geometric: PerspectiveGraph
    label: object = None
    sample_id: str = ""
    _inputs: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.structure.n

    def graph_input(self, p: Perspective) -> GraphInput:
        if p not in self._inputs:
            g = self.physical if p is Perspective.PHYSICAL else self.geometric
            self._inputs[p] = GraphInput.from_graph(g)
        return self._inputs[p]

    def with_static(self, static: StaticNodeFeatures) -> "Sample":
        return Sample(self.structure, static, self.pair_features, self.physical, self.geometric,
                      self.label, self.sample_id, self._inputs)


def prepare_sample(
    s: ProteinStructure,
    table: PotentialTable,
    tau: float = DEFAULT_TAU,
    r: float = DEFAULT_RADIUS,
    sample_id: str = "",
) -> Sample:
    frames = structure_frames(s)
    feats = pairwise_edge_features(s, frames)
    return Sample(
        structure=s,
        static=encode_static_node_features(s),
        pair_features=feats,
        physical=build_physical(s, table, tau, frames=frames, features=feats),
        geometric=build_geometric(s, r, frames=frames, features=feats),
        label=s.label,
        sample_id=sample_id,
    )


# --------------------------------------------------------------------------- parameters


def _glorot(rng, fan_in, fan_out, gain=1.0):
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class MoEModel:
    """Parameter container; every parameter is a named leaf :class:`Tensor`."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config.validate()
        rng = np.random.default_rng(seed)
        d, C, M = config.d_model, config.n_classes, config.M
        p = {}

        def w(name, fan_in, fan_out, gain=1.0):
            p[name] = Tensor(_glorot(rng, fan_in, fan_out, gain), requires_grad=True, name=name)

        def b(name, size):
            p[name] = Tensor(np.zeros((1, size)), requires_grad=True, name=name)

        p["type_embedding"] = Tensor(rng.normal(0.0, 0.02, size=(N_TYPES + 1, d)), requires_grad=True, name="type_embedding")
        w("sidechain_proj.W", SIDECHAIN_DIM, d)
        b("sidechain_proj.b", d)
        w("chem_fnn.W1", 2 * d, d)
        b("chem_fnn.b1", d)
        w("chem_fnn.W2", d, d)
        b("chem_fnn.b2", d)
        for persp in PERSPECTIVES:
            for layer in range(config.L_enc):
                w(f"encoder.{persp.value}.{layer}.Wn", d, d, config.init_gain)
                w(f"encoder.{persp.value}.{layer}.We", EDGE_DIM, d, config.init_gain)
        for m in range(M):
            for layer in range(config.L_exp):
                w(f"expert.{m}.{layer}.Wn", d, d, config.init_gain)
                w(f"expert.{m}.{layer}.We", EDGE_DIM, d, config.init_gain)
        w("gate.W", d, M)
        b("gate.b", M)
        for persp in PERSPECTIVES:
            w(f"aux_head.{persp.value}.W", d, C)
            b(f"aux_head.{persp.value}.b", C)
        w("aux_cls.W", 3 * C, C)
        b("aux_cls.b", C)
        w("main_head.W", 3 * d, C)
        b("main_head.b", C)
        self.params = p

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list:
        return list(self.params.values())

    def state_dict(self) -> dict:
        return {k: v.values.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise ConfigInvalid(f"checkpoint lacks parameters {sorted(missing)}")
        for k, t in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.values.shape:
                raise ConfigInvalid(f"parameter {k}: shape {arr.shape} != {t.values.shape}")
            t.values = arr.copy()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def expert_layers(self, m: int) -> list:
        return [(self.params[f"expert.{m}.{l}.Wn"], self.params[f"expert.{m}.{l}.We"]) for l in range(self.config.L_exp)]

    def encoder_layers(self, p: Perspective) -> list:
        return [
            (self.params[f"encoder.{p.value}.{l}.Wn"], self.params[f"encoder.{p.value}.{l}.We"])
            for l in range(self.config.L_enc)
        ]


# --------------------------------------------------------------------------- forward pieces


def node_init(model: MoEModel, static: StaticNodeFeatures) -> Tensor:
    """h_i = FNN(type_embedding[type_i] ⊕ sidechain_proj(χ encoding))."""
    t = ad.gather(model["type_embedding"], static.types)
    s = ad.add(ad.matmul(Tensor(static.sidechain), model["sidechain_proj.W"]), model["sidechain_proj.b"])
    x = ad.concat([t, s], axis=1)
    hidden = ad.relu(ad.add(ad.matmul(x, model["chem_fnn.W1"]), model["chem_fnn.b1"]))
    return ad.add(ad.matmul(hidden, model["chem_fnn.W2"]), model["chem_fnn.b2"])


def gcn_layer(h: Tensor, graph, W_n: Tensor, W_e: Tensor) -> Tensor:
    """relu(Σ_{j∈N(i)} (h_j W_n) ⊙ (e_ij W_e) / sqrt(|N(i)| |N(j)|))."""
    g = graph if isinstance(graph, GraphInput) else GraphInput.from_graph(graph)
    if h.shape[0] != g.n:
        raise ad.ShapeMismatch(f"{h.shape[0]} node rows for a graph of {g.n} nodes")
    if g.scaled.shape[1] != W_e.shape[0]:
        raise ad.ShapeMismatch(f"edge features of width {g.scaled.shape[1]} for W_e {W_e.shape}")
    messages = ad.mul(ad.gather(ad.matmul(h, W_n), g.dst), ad.matmul(g.scaled, W_e))
    return ad.relu(ad.scatter_add(messages, g.src, g.n))


def run_stack(h: Tensor, graph: GraphInput, layers: list) -> Tensor:
    for W_n, W_e in layers:
        h = gcn_layer(h, graph, W_n, W_e)
    return h


def encode_perspective(model: MoEModel, p: Perspective, graph: GraphInput, h0: Tensor) -> tuple:
    """First-stage encoder for one perspective; returns (node embeddings, mean-pooled row)."""
    h = run_stack(h0, graph, model.encoder_layers(p))
    return h, ad.mean(h, axis=0)


def gate_logits(model: MoEModel, g: Tensor) -> Tensor:
    return ad.add(ad.matmul(g, model["gate.W"]), model["gate.b"])


def gate(model: MoEModel, g: Tensor) -> Tensor:
    """Softmax gate weights over the M experts, shape (1, M)."""
    return ad.softmax(gate_logits(model, g))


@dataclass
class RoutingRecord:
    perspective: str
    gate_weights: np.ndarray  # (M,) full softmax
    selected: np.ndarray  # (K,) expert indices, best first
    selected_weights: np.ndarray  # (K,) renormalised


def route(logits: Tensor, K: int) -> tuple:
    """Top-K selection and renormalisation; returns (full weights, selected weights, indices)."""
    full = ad.softmax(logits)
    sel_logits, idx = ad.top_k(logits, K)
    return full, ad.softmax(sel_logits), idx


def moe_forward(model: MoEModel, p: Perspective, graph: GraphInput, x: Tensor, g: Tensor) -> tuple:
    """u_i = Σ_k w_k E_k(x_i) over the top-K experts chosen from gate(g).

    Returns ``(u, record, full_gate_weights, selected_weights)``.
    """
    full, w_sel, idx = route(gate_logits(model, g), model.config.K)
    outs = [run_stack(x, graph, model.expert_layers(int(m))) for m in idx]
    u = ad.weighted_sum(outs, w_sel)
    record = RoutingRecord(p.value, full.values[0].copy(), idx.copy(), w_sel.values[0].copy())
    return u, record, full, w_sel


def fuse(us: list) -> Tensor:
    """Mean-pool each perspective's fused node embeddings and concatenate in order."""
    return ad.concat([ad.mean(u, axis=0) for u in us], axis=1)


def _label_target(label, config: ModelConfig):
    C = config.n_classes
    if config.multi_label:
        y = np.asarray(label, dtype=np.float64).reshape(-1)
        if y.shape != (C,):
            raise LabelArityMismatch(f"multi-label target of length {y.size} for {C} classes")
        return y
    if isinstance(label, (tuple, list, np.ndarray)) or label is None:
        raise LabelArityMismatch(f"single-label task needs an integer class, got {label!r}")
    if not 0 <= int(label) < C:
        raise LabelArityMismatch(f"label {label} outside [0, {C})")
    return int(label)


def classification_loss(logits: Tensor, target, config: ModelConfig) -> Tensor:
    if config.multi_label:
        return ad.bce_with_logits(logits, target)
    return ad.nll(ad.log_softmax(logits), target)


def task_loss(model: MoEModel, g_fused: Tensor, z_concat: Tensor, label, config: ModelConfig | None = None) -> dict:
    """L_CLS + λ·L_CLS_aux from the fused representation and concatenated auxiliary logits."""
    config = config or model.config
    target = _label_target(label, config)
    logits = ad.add(ad.matmul(g_fused, model["main_head.W"]), model["main_head.b"])
    aux_logits = ad.add(ad.matmul(z_concat, model["aux_cls.W"]), model["aux_cls.b"])
    l_cls = classification_loss(logits, target, config)
    l_aux = classification_loss(aux_logits, target, config)
    total = l_cls if config.lam == 0 else ad.add(l_cls, ad.scale(l_aux, config.lam))
    return {"logits": logits, "aux_logits": aux_logits, "cls": l_cls, "aux": l_aux, "total": total}


def load_balance_loss(gate_rows: list, config: ModelConfig, selected_rows: list | None = None, selected_idx: list | None = None) -> Tensor:
    """lb_coeff · CV² of per-expert importance (sum of full gate weights over the batch).

    ``lb_mode`` "load" uses the renormalised top-K weights scattered onto their
    experts instead; "both" adds the two terms.
    """
    terms = []
    if config.lb_mode in ("importance", "both"):
        importance = ad.sum(ad.concat(gate_rows, axis=0), axis=0)
        terms.append(ad.cv_squared(importance))
    if config.lb_mode in ("load", "both"):
        if selected_rows is None or selected_idx is None:
            raise ConfigInvalid("load balancing in 'load' mode needs the selected weights")
        stacked = ad.concat(selected_rows, axis=1)
        idx = np.concatenate(selected_idx)
        load = ad.scatter_add(ad.reshape(stacked, (stacked.shape[1], 1)), idx, config.M)
        terms.append(ad.cv_squared(load))
    total = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
    return ad.scale(total, config.lb_coeff)


# --------------------------------------------------------------------------- full forward


@dataclass
class ForwardOutput:
    g_fused: Tensor
    logits: Tensor
    aux_logits: Tensor
    loss_cls: Tensor
    loss_aux: Tensor
    task: Tensor
    gate_rows: list
    selected_rows: list
    routing: list
    pooled: list  # pre-MoE g^(p)
    fused_nodes: list  # u^(p)
    chemical_edges: np.ndarray


def chemical_graph_input(sample: Sample, h: np.ndarray, k: int) -> tuple:
    edges = chemical_edges(h, k)
    feats = sample.pair_features[edges[:, 0], edges[:, 1]] if len(edges) else np.zeros((0, EDGE_DIM))
    return GraphInput.from_edges(sample.n, edges, feats), edges


def model_forward(sample: Sample, model: MoEModel, config: ModelConfig | None = None, with_loss: bool = True) -> ForwardOutput:
    config = config or model.config
    h0 = node_init(model, sample.static)
    chem_input, chem_edges = chemical_graph_input(sample, h0.values, config.k)
    inputs = {
        Perspective.PHYSICAL: sample.graph_input(Perspective.PHYSICAL),
        Perspective.CHEMICAL: chem_input,
        Perspective.GEOMETRIC: sample.graph_input(Perspective.GEOMETRIC),
    }
    pooled, us, gate_rows, sel_rows, records, aux = [], [], [], [], [], []
    for p in PERSPECTIVES:
        h_p, g_p = encode_perspective(model, p, inputs[p], h0)
        x = h_p if config.expert_input == "encoder" else h0
        u, rec, full, w_sel = moe_forward(model, p, inputs[p], x, g_p)
        pooled.append(g_p)
        us.append(u)
        gate_rows.append(full)
        sel_rows.append(w_sel)
        records.append(rec)
        aux.append(ad.add(ad.matmul(g_p, model[f"aux_head.{p.value}.W"]), model[f"aux_head.{p.value}.b"]))
    g_fused = fuse(us)
    z_concat = ad.concat(aux, axis=1)
    if with_loss:
        losses = task_loss(model, g_fused, z_concat, sample.label, config)
    else:
        logits = ad.add(ad.matmul(g_fused, model["main_head.W"]), model["main_head.b"])
        aux_logits = ad.add(ad.matmul(z_concat, model["aux_cls.W"]), model["aux_cls.b"])
        losses = {"logits": logits, "aux_logits": aux_logits, "cls": None, "aux": None, "total": None}
    return ForwardOutput(
        g_fused=g_fused,
        logits=losses["logits"],
        aux_logits=losses["aux_logits"],
        loss_cls=losses["cls"],
        loss_aux=losses["aux"],
        task=losses["total"],
        gate_rows=gate_rows,
        selected_rows=sel_rows,
        routing=records,
        pooled=pooled,
        fused_nodes=us,
        chemical_edges=chem_edges,
    )


@dataclass
class BatchOutput:
    objective: Tensor
    task: float
    cls: float
    aux: float
    lb: float
    outputs: list


def batch_objective(samples: list, model: MoEModel, config: ModelConfig | None = None) -> BatchOutput:
    """Mean task loss over the batch plus the load-balancing term (sequential, batch order)."""
    config = config or model.config
    outs = [model_forward(s, model, config) for s in samples]
    task = ad.scale(ad.sum(ad.concat([_as_matrix(o.task) for o in outs], axis=1)), 1.0 / len(outs))
    gate_rows = [r for o in outs for r in o.gate_rows]
    sel_rows = [r for o in outs for r in o.selected_rows]
    sel_idx = [rec.selected for o in outs for rec in o.routing]
    lb = load_balance_loss(gate_rows, config, sel_rows, sel_idx)
    objective = ad.add(_as_matrix(task), _as_matrix(lb))
    return BatchOutput(
        objective=objective,
        task=task.item(),
        cls=float(np.mean([o.loss_cls.item() for o in outs])),
        aux=float(np.mean([o.loss_aux.item() for o in outs])),
        lb=lb.item(),
        outputs=outs,
    )


def _as_matrix(t: Tensor) -> Tensor:
    return t if t.shape == (1, 1) else ad.reshape(t, (1, 1))


def predict(samples: list, model: MoEModel) -> np.ndarray:
    """Class scores per sample: softmax probabilities, or sigmoids when multi-label."""
    rows = []
    for s in samples:
        logits = model_forward(s, model, with_loss=False).logits.values[0]
        if model.config.multi_label:
            rows.append(1.0 / (1.0 + np.exp(-logits)))
        else:
            e = np.exp(logits - logits.max())
            rows.append(e / e.sum())
    return np.array(rows)
