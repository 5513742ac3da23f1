"""Command-line surface: approximate / train / infer / eval / sweep.

Configuration precedence is built-in defaults < preset < config file <
explicit flags. Config files are line-oriented "key = value" text whose
keys mirror the flag names; unknown keys are hard errors. Result lines
go to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import itertools
import os
import sys
import time
from dataclasses import fields as dataclass_fields

import numpy as np

from .errors import InputError, ParseError, TrainingError
from .graph import (
    build_csr,
    load_dataset,
    load_edge_list,
    load_labels,
    load_sparse_features,
    load_split,
)
from .neural import load_model, save_model
from .push import SparsifiedPanel, build_panel
from .trainer import (
    Predictions,
    TrainConfig,
    evaluate,
    infer,
    sample_unlabeled_subset,
    subset_rng,
    train,
)

# flag name (config-file key) -> TrainConfig field
FLAG_TO_FIELD = {
    "delta": "delta",
    "m-aug": "m_aug",
    "scheme": "scheme",
    "alpha": "alpha",
    "N": "order",
    "rmax": "r_max",
    "k": "k",
    "gamma": "gamma",
    "tau": "tau",
    "lambda-max": "lam_max",
    "warmup": "warmup_steps",
    "distance": "distance",
    "bl": "batch_labeled",
    "bu": "batch_unlabeled",
    "u-size": "unlabeled_size",
    "lr": "lr",
    "wr": "weight_decay",
    "clip": "clip_norm",
    "layers": "num_layers",
    "hidden": "hidden_dim",
    "max-steps": "max_steps",
    "eval-every": "eval_every",
    "patience": "patience",
    "seed": "seed",
    "workers": "workers",
    "embed-mode": "embed_mode",
    "batchnorm": "batchnorm",
    "shared-mask": "shared_mask",
    "renorm-ppr": "renorm_ppr",
}
FIELD_TO_FLAG = {v: k for k, v in FLAG_TO_FIELD.items()}

_BOOL_FLAGS = {"embed-mode", "batchnorm", "shared-mask", "renorm-ppr"}
_OPTIONAL_FIELDS = {"alpha", "gamma", "unlabeled_size", "clip_norm"}

PRESETS: dict[str, dict[str, object]] = {}


def _make_presets() -> None:
    citation_common = {
        "delta": 0.5, "m_aug": 2, "tau": 0.1, "distance": "l2",
        "batch_labeled": 50, "batch_unlabeled": 100, "warmup_steps": 1000,
    }
    table = {
        # name: (scheme, alpha, order, r_max, k, lr, wr, layers, hidden, lam_max)
        "cora-ppr": ("ppr", 0.2, 20, 1e-7, 32, 1e-2, 1e-3, 2, 64, 1.5),
        "cora-avg": ("avg", None, 4, 1e-7, 32, 1e-2, 1e-3, 2, 64, 1.5),
        "cora-single": ("single", None, 2, 1e-7, 32, 1e-2, 1e-3, 2, 64, 1.5),
        "citeseer-ppr": ("ppr", 0.4, 10, 1e-7, 32, 1e-3, 1e-3, 2, 256, 0.8),
        "citeseer-avg": ("avg", None, 2, 1e-7, 32, 1e-3, 1e-3, 2, 256, 0.8),
        "citeseer-single": ("single", None, 2, 1e-7, 32, 1e-3, 1e-3, 2, 256, 0.8),
        "pubmed-ppr": ("ppr", 0.5, 6, 1e-5, 16, 1e-2, 1e-2, 1, 64, 1.0),
        "pubmed-avg": ("avg", None, 4, 1e-5, 16, 1e-2, 1e-2, 1, 64, 1.0),
        "pubmed-single": ("single", None, 2, 1e-5, 16, 1e-2, 1e-2, 1, 64, 1.0),
    }
    for name, row in table.items():
        scheme, alpha, order, r_max, k, lr, wr, layers, hidden, lam = row
        preset = dict(citation_common)
        preset.update(
            scheme=scheme, alpha=alpha, order=order, r_max=r_max, k=k,
            lr=lr, weight_decay=wr, num_layers=layers, hidden_dim=hidden,
            lam_max=lam,
        )
        if name.startswith("pubmed"):
            preset["batch_labeled"] = 5
        PRESETS[name] = preset


_make_presets()


def _field_type(name: str):
    for f in dataclass_fields(TrainConfig):
        if f.name == name:
            return f
    raise KeyError(name)


def _coerce(flag: str, raw: str):
    field_name = FLAG_TO_FIELD[flag]
    text = raw.strip()
    if flag in _BOOL_FLAGS:
        low = text.lower()
        if low in ("true", "on", "1", "yes"):
            return True
        if low in ("false", "off", "0", "no"):
            return False
        raise InputError(f"bad boolean value {raw!r} for {flag}")
    if field_name in _OPTIONAL_FIELDS and text.lower() in ("none", ""):
        return None
    if field_name in ("scheme", "distance"):
        return text
    if field_name in ("m_aug", "order", "k", "warmup_steps", "batch_labeled",
                      "batch_unlabeled", "unlabeled_size", "num_layers",
                      "hidden_dim", "max_steps", "eval_every", "patience",
                      "seed", "workers"):
        return int(text)
    return float(text)


def read_config_file(path) -> dict[str, object]:
    """Parse "key = value" lines; '#' starts a comment; unknown keys fail."""
    values: dict[str, object] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ParseError(path, line_no, f"expected 'key = value', got {text!r}")
            key, _, raw = text.partition("=")
            key = key.strip()
            if key not in FLAG_TO_FIELD:
                raise ParseError(path, line_no, f"unknown config key {key!r}")
            try:
                values[FLAG_TO_FIELD[key]] = _coerce(key, raw)
            except (InputError, ValueError) as exc:
                raise ParseError(path, line_no, str(exc)) from None
    return values


def resolve_config(args) -> TrainConfig:
    """defaults < preset < config file < CLI flags."""
    config = TrainConfig()
    if getattr(args, "preset", None):
        if args.preset not in PRESETS:
            raise InputError(
                f"unknown preset {args.preset!r}; available: {sorted(PRESETS)}"
            )
        for field_name, value in PRESETS[args.preset].items():
            setattr(config, field_name, value)
    if getattr(args, "config", None):
        for field_name, value in read_config_file(args.config).items():
            setattr(config, field_name, value)
    for field_name in FLAG_TO_FIELD.values():
        value = getattr(args, field_name, None)
        if value is not None:
            setattr(config, field_name, value)
    if config.scheme != "ppr":
        config.alpha = None
    return config


def print_config(config: TrainConfig, stream=None) -> None:
    stream = stream or sys.stdout
    for flag, field_name in FLAG_TO_FIELD.items():
        value = getattr(config, field_name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif value is None:
            value = "none"
        stream.write(f"{flag} = {value}\n")


def _add_hyper_flags(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("hyperparameters")
    g.add_argument("--delta", type=float)
    g.add_argument("--m-aug", dest="m_aug", type=int)
    g.add_argument("--scheme", choices=["ppr", "avg", "single"])
    g.add_argument("--alpha", type=float)
    g.add_argument("-N", dest="order", type=int)
    g.add_argument("--rmax", dest="r_max", type=float)
    g.add_argument("-k", dest="k", type=int)
    g.add_argument("--gamma", type=float)
    g.add_argument("--tau", type=float)
    g.add_argument("--lambda-max", dest="lam_max", type=float)
    g.add_argument("--warmup", dest="warmup_steps", type=int)
    g.add_argument("--distance", choices=["l2", "kl"])
    g.add_argument("--bl", dest="batch_labeled", type=int)
    g.add_argument("--bu", dest="batch_unlabeled", type=int)
    g.add_argument("--u-size", dest="unlabeled_size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--wr", dest="weight_decay", type=float)
    g.add_argument("--clip", dest="clip_norm", type=float)
    g.add_argument("--layers", dest="num_layers", type=int)
    g.add_argument("--hidden", dest="hidden_dim", type=int)
    g.add_argument("--max-steps", dest="max_steps", type=int)
    g.add_argument("--eval-every", dest="eval_every", type=int)
    g.add_argument("--patience", type=int)
    g.add_argument("--embed-mode", dest="embed_mode",
                   action=argparse.BooleanOptionalAction)
    g.add_argument("--batchnorm", action=argparse.BooleanOptionalAction)
    g.add_argument("--shared-mask", dest="shared_mask",
                   action=argparse.BooleanOptionalAction)
    g.add_argument("--renorm-ppr", dest="renorm_ppr",
                   action=argparse.BooleanOptionalAction)


def _add_shared_flags(parser: argparse.ArgumentParser, need_graph=True) -> None:
    g = parser.add_argument_group("dataset")
    g.add_argument("--graph", required=need_graph, help="edge list file")
    g.add_argument("--features", help="COO feature file")
    g.add_argument("--labels", help="label file 'i c'")
    g.add_argument("--train-split")
    g.add_argument("--valid-split")
    g.add_argument("--test-split")
    g.add_argument("--num-classes", dest="num_classes", type=int,
                   help="default: 1 + max class in the label file")
    g.add_argument("--no-normalize-features", dest="normalize",
                   action="store_false", default=True,
                   help="skip row L1 normalization of features")
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--preset", help=f"one of {sorted(PRESETS)}")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--workers", type=int,
                        help="default: available parallelism")
    parser.add_argument("--print-config", action="store_true",
                        help="print the resolved configuration and exit")


def _resolved_workers(config: TrainConfig, args) -> int:
    if getattr(args, "workers", None) is not None:
        return args.workers
    return max(1, os.cpu_count() or 1)


def _infer_num_classes(labels_path) -> int:
    labels = load_labels(labels_path, num_classes=1 << 31)
    if not labels:
        raise InputError(f"{labels_path}: no labels found")
    return max(labels.values()) + 1


def _load_dataset_from_args(args):
    for req in ("features", "labels"):
        if getattr(args, req, None) is None:
            raise InputError(f"--{req} is required for this command")
    num_classes = args.num_classes or _infer_num_classes(args.labels)
    return load_dataset(
        args.graph, args.features, args.labels, num_classes,
        train_path=args.train_split, valid_path=args.valid_split,
        test_path=args.test_split, normalize_features=args.normalize,
    )


def cmd_approximate(args) -> int:
    config = resolve_config(args)
    config.workers = _resolved_workers(config, args)
    if args.print_config:
        print_config(config)
        return 0
    edges, num_nodes = load_edge_list(args.graph)
    graph = build_csr(edges, num_nodes)
    if args.nodes:
        nodes = np.asarray(load_split(args.nodes), dtype=np.int64)
    elif args.train_split:
        labeled = np.asarray(load_split(args.train_split), dtype=np.int64)
        unlabeled = np.setdiff1d(np.arange(num_nodes, dtype=np.int64), labeled)
        size = config.unlabeled_size if config.unlabeled_size is not None else unlabeled.size
        nodes = np.union1d(
            labeled, sample_unlabeled_subset(unlabeled, size, subset_rng(config.seed))
        )
    else:
        nodes = np.arange(num_nodes, dtype=np.int64)
    weights = config.weights()
    start = time.perf_counter()
    panel = build_panel(graph, nodes, weights, config.r_max, config.k,
                        workers=config.workers)
    elapsed = time.perf_counter() - start
    panel.save(args.out)
    print(f"rows={len(panel)} mean_nnz={panel.mean_nnz():.2f} wall_time_s={elapsed:.3f}")
    return 0


def cmd_train(args) -> int:
    config = resolve_config(args)
    config.workers = _resolved_workers(config, args)
    if args.print_config:
        print_config(config)
        return 0
    graph, features, labels = _load_dataset_from_args(args)
    if not labels.train:
        raise InputError("--train-split is required to train")
    panel = SparsifiedPanel.load(args.panel) if args.panel else None
    model, log = train(config, graph, features, labels, panel=panel,
                       log_path=args.log)
    save_model(args.model, model, config.settings())
    preds = infer(model, graph, features, config.settings(),
                  renormalize_ppr=config.renorm_ppr)
    if labels.valid:
        print(f"valid_accuracy={evaluate(preds, labels, labels.valid):.6f}")
    if labels.test:
        print(f"test_accuracy={evaluate(preds, labels, labels.test):.6f}")
    return 0


def _write_predictions(path, preds: Predictions) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for node in range(preds.classes.size):
            probs = " ".join(f"{p:.17g}" for p in preds.probs[node])
            fh.write(f"{node}\t{int(preds.classes[node])}\t{probs}\n")


def read_predictions(path) -> Predictions:
    classes = []
    probs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise ParseError(path, line_no, "expected 'node\\tclass\\tprobs'")
            node, cls, vec = int(parts[0]), int(parts[1]), parts[2]
            if node != line_no - 1:
                raise ParseError(path, line_no, "node ids must be dense and ordered")
            classes.append(cls)
            probs.append([float(x) for x in vec.split()])
    return Predictions(probs=np.asarray(probs, dtype=np.float64),
                       classes=np.asarray(classes, dtype=np.int64))


def cmd_infer(args) -> int:
    model, settings = load_model(args.model)
    edges, num_nodes = load_edge_list(args.graph)
    graph = build_csr(edges, num_nodes)
    features = load_sparse_features(args.features)
    if args.normalize:
        features = features.row_normalize()
    preds = infer(model, graph, features, settings,
                  renormalize_ppr=bool(args.renorm_ppr))
    _write_predictions(args.out, preds)
    return 0


def cmd_eval(args) -> int:
    preds = read_predictions(args.preds)
    num_classes = args.num_classes or _infer_num_classes(args.labels)
    labels = load_labels(args.labels, num_classes)
    split = load_split(args.split)
    print(f"accuracy={evaluate(preds, labels, split):.6f}")
    return 0


def cmd_sweep(args, parser: argparse.ArgumentParser) -> int:
    config = resolve_config(args)
    config.workers = _resolved_workers(config, args)
    if args.print_config:
        print_config(config)
        return 0
    grids = {
        "k": [int(x) for x in args.sweep_k.split(",")] if args.sweep_k else None,
        "r_max": [float(x) for x in args.sweep_rmax.split(",")] if args.sweep_rmax else None,
        "order": [int(x) for x in args.sweep_n.split(",")] if args.sweep_n else None,
        "lam_max": [float(x) for x in args.sweep_lambda_max.split(",")] if args.sweep_lambda_max else None,
        "gamma": [float(x) for x in args.sweep_gamma.split(",")] if args.sweep_gamma else None,
    }
    grids = {name: vals for name, vals in grids.items() if vals}
    if not grids:
        parser.error("sweep needs at least one of --sweep-k/--sweep-rmax/"
                     "--sweep-n/--sweep-lambda-max/--sweep-gamma")
    seeds = [int(x) for x in args.sweep_seeds.split(",")]
    graph, features, labels = _load_dataset_from_args(args)
    if not labels.train or not labels.test:
        raise InputError("sweep needs --train-split and --test-split")

    names = list(grids)
    out_lines = [",".join(["k", "r_max", "N", "lambda_max", "gamma",
                           "mean_accuracy", "mean_runtime_s"])]
    for combo in itertools.product(*(grids[n] for n in names)):
        point = dict(zip(names, combo))
        accs, times = [], []
        for seed in seeds:
            run_cfg = TrainConfig(**{**config.__dict__, **point, "seed": seed})
            start = time.perf_counter()
            model, _log = train(run_cfg, graph, features, labels)
            preds = infer(model, graph, features, run_cfg.settings(),
                          renormalize_ppr=run_cfg.renorm_ppr)
            times.append(time.perf_counter() - start)
            accs.append(evaluate(preds, labels, labels.test))
        gamma = run_cfg.resolved_gamma(labels.num_classes)
        out_lines.append(",".join([
            str(run_cfg.k), f"{run_cfg.r_max:g}", str(run_cfg.order),
            f"{run_cfg.lam_max:g}", f"{gamma:g}",
            f"{float(np.mean(accs)):.6f}", f"{float(np.mean(times)):.3f}",
        ]))
    text = "\n".join(out_lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pushprop",
        description="Approximate-propagation consistency training for "
                    "semi-supervised node classification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_approx = sub.add_parser("approximate", help="pre-compute a sparsified panel")
    _add_shared_flags(p_approx)
    _add_hyper_flags(p_approx)
    p_approx.add_argument("--nodes", help="node-list file (one id per line)")
    p_approx.add_argument("--out", required=True, help="panel output path")

    p_train = sub.add_parser("train", help="train a model end to end")
    _add_shared_flags(p_train)
    _add_hyper_flags(p_train)
    p_train.add_argument("--panel", help="reuse a pre-computed panel file")
    p_train.add_argument("--model", required=True, help="model output path")
    p_train.add_argument("--log", help="training log TSV path")

    p_infer = sub.add_parser("infer", help="exact inference from a saved model")
    p_infer.add_argument("--model", required=True)
    p_infer.add_argument("--graph", required=True)
    p_infer.add_argument("--features", required=True)
    p_infer.add_argument("--out", required=True, help="predictions TSV path")
    p_infer.add_argument("--no-normalize-features", dest="normalize",
                         action="store_false", default=True)
    p_infer.add_argument("--renorm-ppr", dest="renorm_ppr",
                         action=argparse.BooleanOptionalAction)

    p_eval = sub.add_parser("eval", help="score predictions against labels")
    p_eval.add_argument("--preds", required=True, help="predictions TSV")
    p_eval.add_argument("--labels", required=True)
    p_eval.add_argument("--split", required=True)
    p_eval.add_argument("--num-classes", dest="num_classes", type=int)

    p_sweep = sub.add_parser("sweep", help="grid runs, CSV output")
    _add_shared_flags(p_sweep)
    _add_hyper_flags(p_sweep)
    p_sweep.add_argument("--sweep-k")
    p_sweep.add_argument("--sweep-rmax")
    p_sweep.add_argument("--sweep-n")
    p_sweep.add_argument("--sweep-lambda-max")
    p_sweep.add_argument("--sweep-gamma")
    p_sweep.add_argument("--sweep-seeds", default="0")
    p_sweep.add_argument("--out", help="CSV output path (default stdout)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "approximate":
            return cmd_approximate(args)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "infer":
            return cmd_infer(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "sweep":
            return cmd_sweep(args, parser)
        parser.error(f"unknown command {args.command!r}")
    except (InputError, TrainingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
