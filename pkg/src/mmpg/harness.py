"""Synthetic data, the training loop, evaluation and diagnostics.

The synthetic generator builds backbones by chaining ideal bond geometry
with motif-specific (phi, psi) torsions, so each class has a distinct
secondary-structure shape, a biased residue composition and preferred
side-chain rotamers.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .geometry import CHI_ATOMS, place_atom
from .graphs import PERSPECTIVES, StaticNodeFeatures
from .model import MoEModel, ModelConfig, Sample, model_forward, batch_objective, predict, prepare_sample
from .potential import PotentialTable, hydrophobic_preference, synth_table
from .structure import AA1, AA3, Atom, ProteinStructure, Residue

log = logging.getLogger(__name__)

UNK_TYPE = 20

# ideal backbone geometry (Engh & Huber style values)
BOND_N_CA, BOND_CA_C, BOND_C_N = 1.458, 1.525, 1.329
ANGLE_N_CA_C, ANGLE_CA_C_N, ANGLE_C_N_CA = np.radians([111.2, 116.2, 121.7])
OMEGA = np.pi


@dataclass(frozen=True)
class Motif:
    """One class template: backbone torsions, a favoured residue group and rotamers."""

    name: str
    phi: float  # degrees
    psi: float
    residues: str  # one-letter codes that are over-represented
    chi_means: tuple = (-60.0, 180.0, 60.0, 180.0)


DEFAULT_MOTIFS = (
    Motif("alpha", -57.0, -47.0, "AILMFVW", (-60.0, 180.0, -60.0, 180.0)),
    Motif("strand", -120.0, 130.0, "RDEKH", (180.0, 60.0, 180.0, 60.0)),
    Motif("three10", -49.0, -26.0, "NQSTYC", (60.0, -60.0, 60.0, -60.0)),
    Motif("ppii", -75.0, 145.0, "GPAST", (-60.0, -60.0, 180.0, 180.0)),
)


def extra_motif(c: int) -> Motif:
    """Deterministic extra templates for more classes than the built-in four."""
    rng = np.random.default_rng([7, c])
    phi = float(rng.uniform(-140, -50))
    psi = float(rng.uniform(-60, 160))
    letters = "".join(sorted(rng.choice(list(AA1), size=6, replace=False)))
    chis = tuple(float(x) for x in rng.choice([-60.0, 60.0, 180.0], size=4))
    return Motif(f"motif{c}", phi, psi, letters, chis)


def motifs_for(n_classes: int) -> tuple:
    return tuple(DEFAULT_MOTIFS[c] if c < len(DEFAULT_MOTIFS) else extra_motif(c) for c in range(n_classes))


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 4
    structures_per_class: int = 40
    min_len: int = 30
    max_len: int = 50
    seed: int = 0
    multi_label: bool = False
    composition_bias: float = 0.6  # weight of the motif group in the type distribution
    torsion_noise: float = 8.0  # degrees
    chi_noise: float = 15.0
    motifs: tuple | None = None

    def resolved_motifs(self) -> tuple:
        return self.motifs if self.motifs is not None else motifs_for(self.n_classes)


def type_distribution(motif: Motif, bias: float) -> np.ndarray:
    group = np.zeros(20)
    for letter in motif.residues:
        group[AA1.index(letter)] = 1.0
    group /= group.sum()
    return (1.0 - bias) * np.full(20, 1.0 / 20) + bias * group


def _backbone(torsions: np.ndarray) -> np.ndarray:
    """(n, 3, 3) N/CA/C coordinates from per-residue (phi, psi) in radians."""
    n = len(torsions)
    out = np.zeros((n, 3, 3))
    out[0, 0] = (0.0, 0.0, 0.0)
    out[0, 1] = (BOND_N_CA, 0.0, 0.0)
    out[0, 2] = out[0, 1] + BOND_CA_C * np.array([-np.cos(ANGLE_N_CA_C), np.sin(ANGLE_N_CA_C), 0.0])
    for i in range(1, n):
        n_prev, ca_prev, c_prev = out[i - 1]
        out[i, 0] = place_atom(n_prev, ca_prev, c_prev, BOND_C_N, ANGLE_CA_C_N, torsions[i - 1, 1])
        out[i, 1] = place_atom(ca_prev, c_prev, out[i, 0], BOND_N_CA, ANGLE_C_N_CA, OMEGA)
        out[i, 2] = place_atom(c_prev, out[i, 0], out[i, 1], BOND_CA_C, ANGLE_N_CA_C, torsions[i, 0])
    return out


def _residue(type_index: int, seq_index: int, bb: np.ndarray, chis: np.ndarray) -> Residue:
    name = AA3[type_index]
    atoms = {"N": Atom("N", bb[0]), "CA": Atom("CA", bb[1]), "C": Atom("C", bb[2])}
    if name != "GLY":
        cb = place_atom(bb[2], bb[0], bb[1], 1.53, np.radians(110.5), np.radians(-122.5))
        atoms["CB"] = Atom("CB", cb)
        for q, quad in enumerate(CHI_ATOMS[name]):
            a, b, c = (atoms[x].position for x in quad[:3])
            atoms[quad[3]] = Atom(quad[3], place_atom(a, b, c, 1.52, np.radians(112.0), chis[q]))
    return Residue(type_index, seq_index, atoms)


def synthesize_structure(
    segments: list,
    rng: np.random.Generator,
    spec: SyntheticSpec,
    label=None,
) -> ProteinStructure:
    """Chain of ``(motif, length)`` segments drawn with ``rng``."""
    torsions, types, chis = [], [], []
    for motif, length in segments:
        base = np.radians([motif.phi, motif.psi])
        torsions.append(base + np.radians(rng.normal(0.0, spec.torsion_noise, size=(length, 2))))
        types.append(rng.choice(20, size=length, p=type_distribution(motif, spec.composition_bias)))
        chis.append(np.radians(np.array(motif.chi_means) + rng.normal(0.0, spec.chi_noise, size=(length, 4))))
    torsions = np.concatenate(torsions)
    types = np.concatenate(types)
    chis = np.concatenate(chis)
    bb = _backbone(torsions)
    residues = tuple(_residue(int(types[i]), i, bb[i], chis[i]) for i in range(len(types)))
    return ProteinStructure(residues, "A", label)


def make_synthetic_dataset(spec: SyntheticSpec) -> list:
    """Labelled structures ordered class by class.

    Single-label: each structure is one motif. Multi-label: two segments
    with independently drawn motifs, labelled by which motifs are present.
    """
    motifs = spec.resolved_motifs()
    C = len(motifs)
    out = []
    for c in range(C):
        for j in range(spec.structures_per_class):
            rng = np.random.default_rng([spec.seed, c, j])
            n = int(rng.integers(spec.min_len, spec.max_len + 1))
            if not spec.multi_label:
                out.append(synthesize_structure([(motifs[c], n)], rng, spec, label=c))
                continue
            other = int(rng.integers(C))
            cut = n // 2
            segs = [(motifs[c], cut), (motifs[other], n - cut)]
            label = tuple(int(k in (c, other)) for k in range(C))
            out.append(synthesize_structure(segs, rng, spec, label=label))
    return out


# --------------------------------------------------------------------------- training


def default_table(seed: int = 0) -> PotentialTable:
    return synth_table(seed, contact_preference=hydrophobic_preference(), reference="prior")


def split_indices(labels: list, split_seed: int, val_fraction: float = 0.2) -> tuple:
    """80/20 split; stratified by class for single-label data."""
    rng = np.random.default_rng(split_seed)
    n = len(labels)
    if n and all(isinstance(l, (int, np.integer)) for l in labels):
        train, val = [], []
        for c in sorted(set(int(l) for l in labels)):
            idx = np.array([i for i, l in enumerate(labels) if int(l) == c])
            idx = idx[rng.permutation(len(idx))]
            n_val = int(round(val_fraction * len(idx)))
            val.extend(idx[:n_val].tolist())
            train.extend(idx[n_val:].tolist())
        return sorted(train), sorted(val)
    perm = rng.permutation(n)
    n_val = int(round(val_fraction * n))
    return sorted(perm[n_val:].tolist()), sorted(perm[:n_val].tolist())


def prepare_dataset(structures: list, table: PotentialTable, tau: float, r: float) -> list:
    return [prepare_sample(s, table, tau, r, sample_id=f"s{i:04d}") for i, s in enumerate(structures)]


def accuracy(probs: np.ndarray, labels: list) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


def f_max(probs: np.ndarray, labels: list, thresholds: np.ndarray | None = None) -> float:
    """Protein-centric maximum F-score over decision thresholds."""
    y = np.asarray(labels, dtype=bool)
    thresholds = np.linspace(0.01, 0.99, 99) if thresholds is None else thresholds
    best = 0.0
    for t in thresholds:
        pred = probs >= t
        has = pred.any(axis=1)
        if not has.any():
            continue
        tp = (pred & y).sum(axis=1)
        precision = np.mean(tp[has] / pred[has].sum(axis=1))
        recall = np.mean(tp / np.maximum(y.sum(axis=1), 1))
        if precision + recall > 0:
            best = max(best, 2 * precision * recall / (precision + recall))
    return float(best)


def evaluate(model: MoEModel, samples: list) -> float:
    """Accuracy (single-label) or F_max (multi-label) on ``samples``."""
    if not samples:
        return float("nan")
    probs = predict(samples, model)
    labels = [s.label for s in samples]
    return f_max(probs, labels) if model.config.multi_label else accuracy(probs, labels)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss_cls: float
    loss_aux: float
    load_balance: float
    objective: float
    train_metric: float
    val_metric: float
    wall_time: float = 0.0

    def metrics(self) -> dict:
        d = self.__dict__.copy()
        d.pop("wall_time")
        return d


@dataclass
class TrainReport:
    config: dict
    epochs: list = field(default_factory=list)
    train_ids: list = field(default_factory=list)
    val_ids: list = field(default_factory=list)
    model: MoEModel | None = None
    val_samples: list = field(default_factory=list)
    train_samples: list = field(default_factory=list)
    checkpoint_path: str | None = None

    @property
    def final_val(self) -> float:
        return self.epochs[-1].val_metric if self.epochs else float("nan")

    @property
    def best_val(self) -> float:
        return max((e.val_metric for e in self.epochs), default=float("nan"))

    @property
    def total_time(self) -> float:
        return float(sum(e.wall_time for e in self.epochs))

    def to_dict(self) -> dict:
        """Deterministic summary; wall-clock times are left out on purpose."""
        return {
            "config": self.config,
            "train_ids": self.train_ids,
            "val_ids": self.val_ids,
            "epochs": [e.metrics() for e in self.epochs],
            "final_val": self.final_val,
            "best_val": self.best_val,
            "checkpoint_path": self.checkpoint_path,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _train_metric(outs: list, labels: list, multi_label: bool) -> list:
    if multi_label:
        return []
    return [int(np.argmax(o.logits.values[0]) == l) for o, l in zip(outs, labels)]


def train(
    structures: list,
    config: RunConfig,
    table: PotentialTable | None = None,
    samples: list | None = None,
    on_epoch=None,
) -> TrainReport:
    """Mini-batch SGD with momentum and a multistep schedule.

    ``samples`` may carry pre-built graphs for ``structures`` (same order).
    ``on_epoch(record)`` is called after each epoch.
    """
    mcfg = config.model_config()
    if samples is None:
        table = table if table is not None else default_table(config.table_seed)
        samples = prepare_dataset(structures, table, config.tau, config.r)
    labels = [s.label for s in samples]
    train_idx, val_idx = split_indices(labels, config.split_seed)
    train_s = [samples[i] for i in train_idx]
    val_s = [samples[i] for i in val_idx]

    model = MoEModel(mcfg, seed=config.seed)
    opt = ad.SGD(model.parameters(), lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)
    order_rng = np.random.default_rng([config.seed, 1])
    report = TrainReport(config=config.to_dict(), train_ids=[samples[i].sample_id for i in train_idx],
                         val_ids=[samples[i].sample_id for i in val_idx], model=model,
                         val_samples=val_s, train_samples=train_s)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = float(ad.multistep_lr(config.lr, epoch, config.epochs))
        opt.lr = lr
        order = order_rng.permutation(len(train_s))
        cls, aux, lb, obj, hits = [], [], [], [], []
        for start in range(0, len(order), config.batch_size):
            batch = [train_s[i] for i in order[start:start + config.batch_size]]
            model.zero_grad()
            out = batch_objective(batch, model, mcfg)
            ad.backward(out.objective)
            opt.step()
            cls.append(out.cls)
            aux.append(out.aux)
            lb.append(out.lb)
            obj.append(out.objective.item())
            hits.extend(_train_metric(out.outputs, [s.label for s in batch], mcfg.multi_label))
        rec = EpochRecord(
            epoch=epoch,
            lr=lr,
            loss_cls=float(np.mean(cls)) if cls else float("nan"),
            loss_aux=float(np.mean(aux)) if aux else float("nan"),
            load_balance=float(np.mean(lb)) if lb else float("nan"),
            objective=float(np.mean(obj)) if obj else float("nan"),
            train_metric=float(np.mean(hits)) if hits else float("nan"),
            val_metric=evaluate(model, val_s),
            wall_time=time.perf_counter() - t0,
        )
        report.epochs.append(rec)
        log.info("epoch %d lr %.4g cls %.4f aux %.4f lb %.5f train %.3f val %.3f (%.1fs)", epoch, lr,
                 rec.loss_cls, rec.loss_aux, rec.load_balance, rec.train_metric, rec.val_metric, rec.wall_time)
        if on_epoch is not None:
            on_epoch(rec)
    return report


# --------------------------------------------------------------------------- diagnostics


def routing_counts(model: MoEModel, samples: list) -> np.ndarray:
    """(3, M) number of samples whose top-K selection includes each expert."""
    counts = np.zeros((len(PERSPECTIVES), model.config.M), dtype=np.int64)
    for s in samples:
        out = model_forward(s, model, with_loss=False)
        for p, rec in enumerate(out.routing):
            counts[p, rec.selected] += 1
    return counts


def expert_frequency(model: MoEModel, samples: list) -> np.ndarray:
    """(3, M) fraction of samples routing to each expert per perspective."""
    return routing_counts(model, samples) / max(len(samples), 1)


def classify_experts(freq: np.ndarray, threshold: float = 0.5) -> list:
    """Role of each expert from how many perspectives select it at least ``threshold`` of the time.

    3 -> generalist, 2 -> collaborative, 1 -> specialized, 0 -> unused.
    """
    names = {0: "unused", 1: "specialized", 2: "collaborative"}
    used = (freq >= threshold).sum(axis=0)
    return [names.get(int(u), "generalist") for u in used]


def expert_table_csv(freq: np.ndarray, threshold: float = 0.5) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["expert", *[p.value for p in PERSPECTIVES], "role"])
    for m, role in enumerate(classify_experts(freq, threshold)):
        w.writerow([m, *[f"{x:.6f}" for x in freq[:, m]], role])
    return buf.getvalue()


def mask_static(static: StaticNodeFeatures, u: float, rng: np.random.Generator) -> StaticNodeFeatures:
    """Give floor(u*n/100) residues the unknown type and an empty side chain."""
    n = len(static)
    n_mask = int(np.floor(u * n / 100.0 + 1e-9))
    idx = rng.choice(n, size=n_mask, replace=False) if n_mask else np.zeros(0, dtype=np.int64)
    types = static.types.copy()
    sc = static.sidechain.copy()
    mask = static.mask.copy()
    types[idx] = UNK_TYPE
    sc[idx] = 0.0
    mask[idx] = False
    return StaticNodeFeatures(types, sc, mask)


def mask_residues(samples: list, u: float, seed: int) -> list:
    """Masked copies of ``samples`` with ``u`` percent of residues hidden; graphs are shared."""
    if not 0.0 <= u <= 100.0:
        raise ValueError(f"mask percentage must be in [0, 100], got {u}")
    return [s.with_static(mask_static(s.static, u, np.random.default_rng([seed, i]))) for i, s in enumerate(samples)]


def masking_curve(model: MoEModel, samples: list, percents, seeds=(0,)) -> list:
    """Rows ``(percent, seed, metric)``; only node inputs are masked, geometry stays."""
    rows = []
    for u in percents:
        for seed in seeds:
            rows.append((float(u), int(seed), evaluate(model, mask_residues(samples, float(u), seed))))
    return rows


def masking_summary(rows: list) -> list:
    """Mean metric per mask percentage, in the order first seen."""
    out = {}
    for u, _, v in rows:
        out.setdefault(u, []).append(v)
    return [(u, float(np.mean(v))) for u, v in out.items()]


def routing_rows(model: MoEModel, samples: list) -> list:
    """``(perspective, expert_index, weight, structure_id)`` for every selected expert."""
    rows = []
    for s in samples:
        for rec in model_forward(s, model, with_loss=False).routing:
            for m, w in zip(rec.selected, rec.selected_weights):
                rows.append((rec.perspective, int(m), float(w), s.sample_id))
    return rows


def rows_csv(header: list, rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([f"{x:.6f}" if isinstance(x, float) else x for x in row])
    return buf.getvalue()


GRAPH_PARAMS = ("tau", "r")
SWEEPABLE = ("tau", "r", "k", "M", "K", "lam", "lambda", "lb_coeff", "d_model")


def sweep(structures: list, base: RunConfig, param: str, values, seeds=(0,), table: PotentialTable | None = None) -> list:
    """Retrain for each value of ``param``; rows ``(value, seed, final validation metric)``."""
    if param not in SWEEPABLE:
        raise ValueError(f"cannot sweep {param!r}; choose from {SWEEPABLE}")
    attr = "lam" if param == "lambda" else param
    table = table if table is not None else default_table(base.table_seed)
    cached = None if attr in GRAPH_PARAMS else prepare_dataset(structures, table, base.tau, base.r)
    rows = []
    for v in values:
        cfg = replace(base, **{attr: type(getattr(base, attr))(v)}).validate()
        samples = cached if cached is not None else prepare_dataset(structures, table, cfg.tau, cfg.r)
        for seed in seeds:
            report = train(structures, replace(cfg, seed=int(seed)), samples=samples)
            rows.append((v, int(seed), report.final_val))
    return rows


def embeddings(model: MoEModel, samples: list) -> np.ndarray:
    return np.array([model_forward(s, model, with_loss=False).g_fused.values[0] for s in samples])


def class_distances(emb: np.ndarray, labels: list) -> tuple:
    """Mean pairwise Euclidean distance within classes and across classes.

    Either value is None when no such pair exists.
    """
    keys = [tuple(l) if isinstance(l, (list, tuple)) else l for l in labels]
    diff = emb[:, None, :] - emb[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    same = np.array([[a == b for b in keys] for a in keys])
    iu = np.triu_indices(len(keys), k=1)
    d, s = dist[iu], same[iu]
    intra = float(d[s].mean()) if s.any() else None
    inter = float(d[~s].mean()) if (~s).any() else None
    return intra, inter


def embeddings_csv(emb: np.ndarray, samples: list) -> str:
    d = emb.shape[1] if emb.ndim == 2 else 0
    rows = []
    for s, e in zip(samples, emb):
        label = s.label if not isinstance(s.label, tuple) else "".join(str(x) for x in s.label)
        rows.append([s.sample_id, label, *[float(x) for x in e]])
    return rows_csv(["structure_id", "label", *[f"g{i}" for i in range(d)]], rows)


# --------------------------------------------------------------------------- gradient check


@dataclass
class GradCheckResult:
    rows: list  # (name, flat_index, analytic, numeric, relative_error)
    runtime: float

    @property
    def max_error(self) -> float:
        return max((r[4] for r in self.rows), default=0.0)

    @property
    def groups(self) -> set:
        return {r[0] for r in self.rows}

    def worst(self, count: int = 5) -> list:
        return sorted(self.rows, key=lambda r: -r[4])[:count]


def gradient_check_instance(n: int = 20, d: int = 16, M: int = 4, K: int = 2, init_gain: float = 3.0, seed: int = 0):
    """Two synthetic structures of length ``n`` and a small model over them."""
    spec = SyntheticSpec(n_classes=2, structures_per_class=1, min_len=n, max_len=n, seed=seed)
    samples = prepare_dataset(make_synthetic_dataset(spec), default_table(seed), -1.0, 4.0)
    cfg = ModelConfig(d_model=d, M=M, K=K, n_classes=2, init_gain=init_gain)
    return samples, MoEModel(cfg, seed)


def gradient_check(
    n: int = 20,
    d: int = 16,
    M: int = 4,
    K: int = 2,
    init_gain: float = 3.0,
    per_param: int = 8,
    eps: float = 1e-5,
    seed: int = 0,
) -> GradCheckResult:
    """Central differences of the full batch objective against backprop.

    ``init_gain`` scales the message-passing initialisation. At gain 1 the
    deepest gradients are ~1e-9, close to the ~1e-11 absolute noise of a
    central difference with eps=1e-5, so relative errors there say more about
    floating point than about the derivative code.
    """
    samples, model = gradient_check_instance(n, d, M, K, init_gain, seed)
    t0 = time.perf_counter()
    rows = ad.finite_difference_check(
        lambda: batch_objective(samples, model).objective,
        model.parameters(),
        np.random.default_rng(seed),
        n_samples=per_param,
        eps=eps,
    )
    return GradCheckResult(rows, time.perf_counter() - t0)


__all__ = [
    "Motif", "SyntheticSpec", "make_synthetic_dataset", "synthesize_structure", "default_table",
    "train", "TrainReport", "EpochRecord", "evaluate", "accuracy", "f_max", "split_indices",
    "expert_frequency", "routing_counts", "classify_experts", "expert_table_csv", "mask_residues",
    "masking_curve", "masking_summary", "routing_rows", "sweep", "embeddings", "class_distances", "embeddings_csv", "prepare_dataset",
    "ModelConfig", "Sample", "gradient_check", "GradCheckResult",
]
