"""Command line entry point: ``mmpg <command> ...``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 internal error.
Failures print a one-line JSON object to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

from . import autodiff as ad
from . import harness
from .config import RunConfig
from .errors import ConfigInvalid, DataError, DegenerateGeometry, OutOfRange, ZeroEmbedding
from .graphs import build_chemical
from .model import MoEModel, node_init
from .potential import BinningScheme, read_table, synth_table, hydrophobic_preference, write_table
from .structure import load_dataset, read_structure, save_dataset

log = logging.getLogger("mmpg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
CHECKPOINT_NAME = "model.ckpt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list:
    return [int(v) for v in _floats(text)]


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# --------------------------------------------------------------------------- shared loaders


def _table(cfg: RunConfig):
    if cfg.table_path:
        return read_table(cfg.table_path)
    return harness.default_table(cfg.table_seed)


def _dataset(cfg: RunConfig, override: str | None = None) -> list:
    path = override or cfg.dataset_path
    if path:
        return load_dataset(path)
    spec = harness.SyntheticSpec(
        n_classes=cfg.n_classes,
        structures_per_class=cfg.structures_per_class,
        min_len=cfg.min_len,
        max_len=cfg.max_len,
        seed=cfg.data_seed,
        multi_label=cfg.multi_label,
    )
    return harness.make_synthetic_dataset(spec)


def _load_model(path: str) -> tuple:
    tensors, meta = ad.load_checkpoint(path)
    cfg = RunConfig.from_dict(meta["run_config"])
    model = MoEModel(cfg.model_config(), seed=cfg.seed)
    model.load_state_dict(tensors)
    return model, cfg


# --------------------------------------------------------------------------- commands


def cmd_init_config(args) -> int:
    cfg = RunConfig()
    text = cfg.to_json() + "\n"
    if args.out:
        _write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_synth_data(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.per_class is not None:
        cfg = replace(cfg, structures_per_class=args.per_class)
    if args.seed is not None:
        cfg = replace(cfg, data_seed=args.seed)
    cfg = replace(cfg, multi_label=cfg.multi_label or args.multi_label).validate()
    data = _dataset(replace(cfg, dataset_path=None))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_dataset(data, args.out)
    print(json.dumps({"structures": len(data), "out": args.out}))
    return EXIT_OK


def cmd_synth_table(args) -> int:
    scheme = BinningScheme.korp_like() if args.korp_like else BinningScheme()
    table = synth_table(args.seed, scheme, contact_preference=hydrophobic_preference(), reference=args.reference)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "wb") as fh:
        write_table(table, fh)
    print(json.dumps({"bins": scheme.n_bins, "out": args.out}))
    return EXIT_OK


def cmd_build_graphs(args) -> int:
    table = read_table(args.table) if args.table else harness.default_table(args.table_seed)
    model = _load_model(args.checkpoint)[0] if args.checkpoint else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for path in args.structures:
        s = read_structure(path)
        sample = harness.prepare_sample(s, table, args.tau, args.r, sample_id=Path(path).stem)
        stem = Path(path).stem
        written = []
        for g in (sample.physical, sample.geometric):
            name = out / f"{stem}.{g.perspective.value.lower()}.json"
            _write(name, g.to_json())
            written.append(str(name))
        entry = {"structure": str(path), "files": written}
        if model is not None:
            h = node_init(model, sample.static).values
            g = build_chemical(h, args.k if args.k is not None else model.config.k, features=sample.pair_features)
            name = out / f"{stem}.chemical.json"
            _write(name, g.to_json())
            written.append(str(name))
        else:
            entry["omitted"] = {"Chemical": "needs --checkpoint: chemical edges come from learned embeddings"}
        summary.append(entry)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    if args.output_dir is not None:
        cfg = replace(cfg, output_dir=args.output_dir)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "train.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(message)s"))
    logging.getLogger("mmpg").addHandler(handler)
    try:
        table = _table(cfg)
        data = _dataset(cfg)
        report = harness.train(data, cfg, table=table)
    finally:
        logging.getLogger("mmpg").removeHandler(handler)
        handler.close()
    report.checkpoint_path = str(out / CHECKPOINT_NAME)
    ad.save_checkpoint(report.checkpoint_path, report.model.state_dict(), {"run_config": cfg.to_dict()})
    _write(out / "config.json", cfg.to_json() + "\n")
    _write(out / "report.json", report.to_json() + "\n")
    print(json.dumps({"final_val": report.final_val, "best_val": report.best_val, "output_dir": str(out)}))
    return EXIT_OK


def _analysis_samples(cfg: RunConfig, dataset: str | None) -> list:
    return harness.prepare_dataset(_dataset(cfg, dataset), _table(cfg), cfg.tau, cfg.r)


def cmd_analyze(args) -> int:
    out = Path(args.out)
    if args.which == "sweep":
        if not args.config:
            raise UsageError("analyze sweep needs --config")
        if not args.param or not args.values:
            raise UsageError("analyze sweep needs --param and --values")
        cfg = RunConfig.load(args.config)
        rows = harness.sweep(_dataset(cfg, args.dataset), cfg, args.param, _floats(args.values),
                             seeds=_ints(args.seeds), table=_table(cfg))
        _write(out, harness.rows_csv(["param_value", "metric", "seed"], [(float(v), m, s) for v, s, m in rows]))
        return EXIT_OK
    if not args.checkpoint:
        raise UsageError(f"analyze {args.which} needs --checkpoint")
    model, cfg = _load_model(args.checkpoint)
    samples = _analysis_samples(cfg, args.dataset)
    if args.which == "experts":
        freq = harness.expert_frequency(model, samples)
        _write(out, harness.expert_table_csv(freq, args.threshold))
        if args.routing:
            _write(Path(args.routing), harness.rows_csv(["perspective", "expert_index", "weight", "structure_id"],
                                                        harness.routing_rows(model, samples)))
        roles = harness.classify_experts(freq, args.threshold)
        print(json.dumps({"row_sums": freq.sum(axis=1).tolist(), "generalists": roles.count("generalist")}))
    elif args.which == "mask":
        rows = harness.masking_curve(model, samples, _floats(args.u), _ints(args.seeds))
        _write(out, harness.rows_csv(["u", "seed", "accuracy"], rows))
    elif args.which == "embed":
        emb = harness.embeddings(model, samples)
        _write(out, harness.embeddings_csv(emb, samples))
        intra, inter = harness.class_distances(emb, [s.label for s in samples])
        print(json.dumps({"intra_class": intra, "inter_class": inter}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    res = harness.gradient_check(init_gain=args.init_gain, per_param=args.per_param, seed=args.seed)
    worst = res.worst(1)[0] if res.rows else None
    print(json.dumps({
        "coordinates": len(res.rows),
        "parameter_groups": len(res.groups),
        "max_relative_error": res.max_error,
        "worst": {"name": worst[0], "index": worst[1], "analytic": worst[2], "numeric": worst[3]} if worst else None,
        "runtime_s": round(res.runtime, 3),
    }))
    return EXIT_OK if res.max_error <= args.tol else EXIT_INTERNAL


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mmpg", description="Multi-perspective protein graphs with a mixture of graph experts.")
    p.add_argument("--deterministic", action="store_true", help="limit native thread pools to one thread")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("init-config", help="print or write the default run config")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_init_config)

    s = sub.add_parser("synth-data", help="write a synthetic labelled dataset (JSON)")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--per-class", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--multi-label", action="store_true")
    s.set_defaults(fn=cmd_synth_data)

    s = sub.add_parser("synth-table", help="write a synthetic statistical potential table")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--reference", choices=("prior", "marginal"), default="prior")
    s.add_argument("--korp-like", action="store_true", help="full-resolution angular binning (large)")
    s.set_defaults(fn=cmd_synth_table)

    s = sub.add_parser("build-graphs", help="build perspective graphs for structure files")
    s.add_argument("structures", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--table")
    s.add_argument("--table-seed", type=int, default=0)
    s.add_argument("--tau", type=float, default=-1.0)
    s.add_argument("--r", type=float, default=4.0)
    s.add_argument("--k", type=int)
    s.add_argument("--checkpoint")
    s.set_defaults(fn=cmd_build_graphs)

    s = sub.add_parser("train", help="train from a config file")
    s.add_argument("config")
    s.add_argument("--epochs", type=int)
    s.add_argument("--output-dir")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("analyze", help="diagnostics on a trained model")
    s.add_argument("which", choices=("experts", "mask", "embed", "sweep"))
    s.add_argument("--checkpoint")
    s.add_argument("--config")
    s.add_argument("--dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--routing", help="experts: also write per-structure routing records here")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--u", default="0,10,20,30,40", help="mask percentages")
    s.add_argument("--seeds", default="0")
    s.add_argument("--param")
    s.add_argument("--values")
    s.set_defaults(fn=cmd_analyze)

    s = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    s.add_argument("--init-gain", type=float, default=3.0)
    s.add_argument("--per-param", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(fn=cmd_gradcheck)
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (UsageError, ConfigInvalid)):
        return EXIT_USAGE
    if isinstance(exc, (DataError, FileNotFoundError, IsADirectoryError, DegenerateGeometry, OutOfRange, ZeroEmbedding)):
        return EXIT_DATA
    return EXIT_INTERNAL


def _thread_limit(deterministic: bool):
    if not deterministic:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(format="%(message)s")
        for h in logging.getLogger().handlers:
            h.setLevel(logging.INFO if args.verbose else logging.WARNING)
        log.setLevel(logging.INFO)
        with _thread_limit(args.deterministic):
            return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        code = _exit_code(exc)
        record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
        if isinstance(exc, FileNotFoundError) and exc.filename:
            record["path"] = str(exc.filename)
        sys.stderr.write(json.dumps(record) + "\n")
        return code


if __name__ == "__main__":
    sys.exit(main())
