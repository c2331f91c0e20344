"""Command-line entry point.

Subcommands: run (the continual protocol over seeds and methods),
searchcheck (threshold search vs a dense-grid oracle), gradcheck (analytic
vs finite-difference gradients), loocv (eta estimation only), eval
(re-score a checkpoint to CSV).

Every config field can come from a key=value file (--config) and every field
has a flag override; flags beat the file. OODCAL_DATA_DIR supplies data_dir
when neither flag nor file sets it. Exit codes: 0 success, 1 usage error,
2 data error, 3 assertion/oracle failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from .continual import METHODS, ProtocolConfig, loocv_eta, run_protocol
from .datasets import (
    DataConsistencyError,
    DataFormatError,
    DataLengthError,
    LabeledDataset,
    SyntheticSpec,
    by_class,
    choose_id_classes,
    load_cifar10,
    load_idx_pair,
    make_synthetic,
    orthogonal_cluster_means,
    subset_classes,
)
from .network import (
    CosineMLPClassifier,
    DivergenceError,
    gradient_check_detailed,
    load_checkpoint,
    save_checkpoint,
)
from .reporting import aggregate, emit, emit_aggregate
from .scoring import (
    ClassStats,
    DegenerateScaleError,
    InsufficientDataError,
    ScoreTable,
    build_score_table,
)
from .search import METRICS, cheat_search, grid_search_eta, id_neg_z_values, ood_neg_z_values

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_ORACLE = 3

DATA_DIR_ENV = "OODCAL_DATA_DIR"
DATASETS = ("mnist", "fmnist", "cifar10", "synthetic")
EPOCH_DEFAULTS = {"mnist": 10, "fmnist": 20, "cifar10": 35, "synthetic": 10}
REAL_N_CLASSES = 10

IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_TRAIN = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST = ("test_batch.bin",)


class UsageError(Exception):
    """Bad flag/config value; mapped to exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; the contract reserves 2 for
    # data errors, so remap to 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    return tuple(_parse_int_list(text))


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {text!r}")


# how config-file strings parse, per field; unlisted fields stay strings
FIELD_PARSERS = {
    "n_id_classes": int,
    "n_stream": int,
    "n_classes": int,
    "epochs": int,
    "batch_size": int,
    "dim": int,
    "samples_per_class": int,
    "data_seed": int,
    "seed": int,
    "n_tables": int,
    "n_nets": int,
    "grid_points": int,
    "rho": float,
    "fixed_eta": float,
    "eta": float,
    "learning_rate": float,
    "momentum": float,
    "group_sparsity": float,
    "soft_freeze": float,
    "temperature": float,
    "separation": float,
    "threshold": float,
    "step": float,
    "seeds": _parse_int_list,
    "hidden_sizes": _parse_int_tuple,
    "classes": _parse_int_list,
    "ood": _parse_bool,
}

FIELD_CHOICES = {
    "dataset": DATASETS,
    "metric": METRICS,
    "method": METHODS + ("all",),
    "eta_update": ("pairwise", "cumulative"),
    "format": ("csv", "json"),
    "split": ("train", "test"),
}


def _read_config_file(path: str) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    entries: dict[str, str] = {}
    for lineno, line in enumerate(p.read_text().splitlines(), 1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        if "=" not in text:
            raise UsageError(f"{p}:{lineno}: expected key=value, got {text!r}")
        key, value = text.split("=", 1)
        entries[key.strip().replace("-", "_")] = value.strip()
    return entries


def _effective_config(args, defaults: dict) -> dict:
    """Merge flag > config file > default, parsing file strings by field."""
    file_cfg = _read_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = set(file_cfg) - set(defaults)
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    cfg = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
        elif key in file_cfg:
            parse = FIELD_PARSERS.get(key, str)
            try:
                cfg[key] = parse(file_cfg[key])
            except (ValueError, UsageError) as exc:
                raise UsageError(f"config field {key}: {exc}") from exc
        else:
            cfg[key] = default
    for key, options in FIELD_CHOICES.items():
        if key in cfg and cfg[key] is not None and cfg[key] not in options:
            raise UsageError(f"{key} must be one of {', '.join(options)}, got {cfg[key]!r}")
    return cfg


def _resolve_data_dir(cfg: dict) -> Path | None:
    if cfg.get("data_dir"):
        return Path(cfg["data_dir"])
    env = os.environ.get(DATA_DIR_ENV)
    return Path(env) if env else None


def _find_file(roots: list[Path], name: str) -> Path:
    tried = []
    for root in roots:
        for candidate in (root / name, root / (name + ".gz")):
            if candidate.is_file():
                return candidate
            tried.append(str(candidate))
    raise FileNotFoundError(f"missing {name}; looked at: {', '.join(tried)}")


def _load_real_dataset(name: str, data_dir: Path) -> tuple[LabeledDataset, LabeledDataset]:
    roots = [data_dir, data_dir / name]
    if name == "cifar10":
        roots.append(data_dir / "cifar-10-batches-bin")
        train = load_cifar10([_find_file(roots, f) for f in CIFAR_TRAIN], split="train")
        test = load_cifar10([_find_file(roots, f) for f in CIFAR_TEST], split="test")
        return train, test
    img, lbl = IDX_FILES["train"]
    train = load_idx_pair(_find_file(roots, img), _find_file(roots, lbl), "train", name)
    img, lbl = IDX_FILES["test"]
    test = load_idx_pair(_find_file(roots, img), _find_file(roots, lbl), "test", name)
    return train, test


def _make_synthetic_dataset(cfg: dict, n_total: int) -> tuple[LabeledDataset, LabeledDataset]:
    dim = cfg["dim"]
    if dim < n_total:
        raise UsageError(f"dim must be >= total class count {n_total} for orthogonal cluster means, got {dim}")
    radius = cfg["separation"] / math.sqrt(2.0)  # unit std: pairwise distance = separation
    means = orthogonal_cluster_means(n_total, dim, radius, seed=cfg["data_seed"])
    spec = SyntheticSpec(n_total, dim, means, 1.0, cfg["samples_per_class"], seed=cfg["data_seed"])
    return make_synthetic(spec)


def _load_dataset(cfg: dict, n_total: int) -> tuple[LabeledDataset, LabeledDataset]:
    if cfg["dataset"] == "synthetic":
        return _make_synthetic_dataset(cfg, n_total)
    data_dir = _resolve_data_dir(cfg)
    if data_dir is None:
        raise UsageError(
            f"data_dir is required for dataset {cfg['dataset']!r} "
            f"(use --data-dir, a config entry, or ${DATA_DIR_ENV})"
        )
    return _load_real_dataset(cfg["dataset"], data_dir)


def _model_template(cfg: dict) -> CosineMLPClassifier:
    epochs = cfg["epochs"] if cfg["epochs"] is not None else EPOCH_DEFAULTS[cfg["dataset"]]
    return CosineMLPClassifier(
        hidden_layer_sizes=tuple(cfg["hidden_sizes"]),
        epochs=epochs,
        batch_size=cfg["batch_size"],
        learning_rate=cfg["learning_rate"],
        momentum=cfg["momentum"],
        group_sparsity=cfg["group_sparsity"],
        soft_freeze=cfg["soft_freeze"],
        temperature=cfg["temperature"],
        random_state=0,
    )


def _stream_plan(cfg: dict) -> tuple[int, int]:
    """(total classes, stream length) for the configured dataset."""
    n_id = cfg["n_id_classes"]
    if cfg["dataset"] == "synthetic":
        n_stream = cfg["n_stream"] if cfg["n_stream"] is not None else 2
        return n_id + n_stream, n_stream
    n_stream = cfg["n_stream"] if cfg["n_stream"] is not None else REAL_N_CLASSES - n_id
    if n_id + n_stream > REAL_N_CLASSES:
        raise UsageError(
            f"n_id_classes + n_stream = {n_id + n_stream} exceeds the "
            f"{REAL_N_CLASSES} classes of {cfg['dataset']}"
        )
    return REAL_N_CLASSES, n_stream


RUN_DEFAULTS = {
    "dataset": "synthetic",
    "data_dir": None,
    "n_id_classes": 5,
    "n_stream": None,
    "seeds": list(range(10)),
    "metric": "gmean",
    "method": "all",
    "rho": 0.5,
    "eta_update": "pairwise",
    "fixed_eta": 1.0,
    "epochs": None,
    "batch_size": 32,
    "learning_rate": 1e-2,
    "momentum": 0.9,
    "hidden_sizes": (400, 128),
    "group_sparsity": 1e-4,
    "soft_freeze": 1e-2,
    "temperature": 10.0,
    "dim": 16,
    "samples_per_class": 200,
    "separation": 10.0,
    "data_seed": 0,
    "output": "reports.csv",
    "format": "csv",
    "aggregate_output": None,
    "save_model": None,
}


def cmd_run(args) -> int:
    cfg = _effective_config(args, RUN_DEFAULTS)
    if not cfg["seeds"]:
        raise UsageError("seeds must be nonempty")
    methods = METHODS if cfg["method"] == "all" else (cfg["method"],)
    if cfg["n_id_classes"] < 2:
        raise UsageError("n_id_classes must be >= 2")
    if "dynamic" in methods and cfg["n_id_classes"] < 3:
        raise UsageError("n_id_classes must be >= 3 when the dynamic method runs leave-one-class-out")

    n_total, n_stream = _stream_plan(cfg)
    train, test = _load_dataset(cfg, n_total)
    template = _model_template(cfg)

    save_dir = Path(cfg["save_model"]) if cfg["save_model"] else None
    if save_dir is not None:
        save_dir.mkdir(parents=True, exist_ok=True)

    reports = []
    for seed in cfg["seeds"]:
        id_classes, ood_order = choose_id_classes(n_total, cfg["n_id_classes"], seed)
        stream_classes = ood_order[:n_stream]
        id_train = subset_classes(train, id_classes)
        id_test = subset_classes(test, id_classes + stream_classes)
        stream = [subset_classes(train, [c]) for c in stream_classes]
        pcfg = ProtocolConfig(
            metric=cfg["metric"],
            batch_size=cfg["batch_size"],
            rho=cfg["rho"],
            model=template,
            seed=seed,
            eta_update=cfg["eta_update"],
        )
        for method in methods:
            stage_reports, state = run_protocol(
                id_train, id_test, stream, pcfg, method=method, fixed_eta=cfg["fixed_eta"]
            )
            reports.extend(stage_reports)
            logger.info(
                "seed %d method %s: final eta %.4f over %d stages",
                seed, method, state.eta_running, len(stage_reports),
            )
            if save_dir is not None:
                stem = save_dir / f"model_seed{seed}_{method}"
                save_checkpoint(state.detector.model_, stem.with_suffix(".npz"))
                meta = {
                    "eta": state.detector.eta,
                    "known_classes": state.known_classes,
                    "mu": state.detector.stats_.mu.tolist(),
                    "sigma": state.detector.stats_.sigma.tolist(),
                }
                stem.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2) + "\n")

    reports.sort(key=lambda r: (r.seed, r.stage, r.method))
    out = Path(cfg["output"])
    if out.parent != Path("."):
        out.parent.mkdir(parents=True, exist_ok=True)
    emit(reports, out, cfg["format"])
    print(f"wrote {len(reports)} stage reports to {out}")
    if cfg["aggregate_output"]:
        rows = aggregate(reports)
        emit_aggregate(rows, cfg["aggregate_output"], cfg["format"])
        print(f"wrote {len(rows)} aggregate rows to {cfg['aggregate_output']}")
    return EXIT_OK


SEARCHCHECK_DEFAULTS = {
    "n_tables": 100,
    "seed": 0,
    "grid_points": 100_000,
    "dump": "searchcheck_failure.json",
}


def _random_tables(rng: np.random.Generator, index: int) -> tuple[ScoreTable, ScoreTable, ClassStats]:
    n_classes = int(rng.integers(2, 7))
    if index == 0:
        n_id = n_ood = 1  # minimal case stays in every sweep
    else:
        n_id = int(rng.integers(1, 101))
        n_ood = int(rng.integers(1, 101))
    mu = rng.uniform(-0.5, 0.8, n_classes)
    sigma = rng.uniform(0.05, 0.5, n_classes)
    stats = ClassStats(mu, sigma, np.full(n_classes, 2, dtype=np.int64))
    id_scores = rng.uniform(-1.0, 1.0, (n_id, n_classes))
    if index % 2 == 0:
        true = id_scores.argmax(axis=1)
    else:
        true = rng.integers(0, n_classes, n_id)
        true[0] = id_scores[0].argmax()  # keep at least one correct row
    id_table = ScoreTable.from_scores(id_scores, true_labels=true)
    ood_table = ScoreTable.from_scores(rng.uniform(-1.0, 1.0, (n_ood, n_classes)), ood=True)
    return id_table, ood_table, stats


def cmd_searchcheck(args) -> int:
    cfg = _effective_config(args, SEARCHCHECK_DEFAULTS)
    rng = np.random.default_rng(cfg["seed"])
    worst = 0.0
    for index in range(cfg["n_tables"]):
        id_table, ood_table, stats = _random_tables(rng, index)
        id_z = id_neg_z_values(id_table, stats)
        ood_z = ood_neg_z_values(ood_table, stats)
        for metric in METRICS:
            res = cheat_search(id_table, ood_table, stats, metric=metric)
            grid_eta, grid_val = grid_search_eta(id_z, ood_z, metric, n_points=cfg["grid_points"])
            gap = abs(res.metric_value - grid_val)
            worst = max(worst, gap)
            if gap > 1e-12:
                dump = Path(cfg["dump"])
                dump.write_text(json.dumps({
                    "table_index": index,
                    "metric": metric,
                    "cheat_eta": res.eta_star,
                    "cheat_value": res.metric_value,
                    "grid_eta": grid_eta,
                    "grid_value": grid_val,
                    "mu": stats.mu.tolist(),
                    "sigma": stats.sigma.tolist(),
                    "id_scores": id_table.scores.tolist(),
                    "id_true_labels": id_table.true_labels.tolist(),
                    "ood_scores": ood_table.scores.tolist(),
                }, indent=2) + "\n")
                print(
                    f"searchcheck FAILED at table {index} metric {metric}: "
                    f"cheat {res.metric_value!r} vs grid {grid_val!r}; table dumped to {dump}",
                    file=sys.stderr,
                )
                return EXIT_ORACLE
    print(
        f"searchcheck: {cfg['n_tables']} tables x {len(METRICS)} metrics, "
        f"max |cheat - grid| = {worst:.3e} -> OK"
    )
    return EXIT_OK


GRADCHECK_DEFAULTS = {
    "n_nets": 10,
    "seed": 0,
    "threshold": 1e-4,
    "step": 1e-5,
}

# lambda pairs cycled across nets; zeros exercise the plain-CE path
_LAMBDA_GRID = ((0.0, 0.0), (1e-4, 0.0), (0.0, 1e-2), (1e-4, 1e-2), (1e-3, 1e-1))


def cmd_gradcheck(args) -> int:
    cfg = _effective_config(args, GRADCHECK_DEFAULTS)
    worst = 0.0
    worst_desc = ""
    for i in range(cfg["n_nets"]):
        rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], i]))
        if i == 0:
            hidden = (1,)  # minimal shape stays in every sweep
        else:
            hidden = tuple(int(rng.integers(2, 9)) for _ in range(int(rng.integers(1, 4))))
        n_features = int(rng.integers(3, 11))
        n_classes = int(rng.integers(2, 5))
        gs, sf = _LAMBDA_GRID[i % len(_LAMBDA_GRID)]
        n = int(rng.integers(n_classes + 2, n_classes + 9))
        X = rng.standard_normal((n, n_features))
        y = np.concatenate([np.arange(n_classes), rng.integers(0, n_classes, n - n_classes)])
        clf = CosineMLPClassifier(
            hidden_layer_sizes=hidden, epochs=2, batch_size=4,
            group_sparsity=gs, soft_freeze=sf, random_state=i,
        ).fit(X, y)
        errors = gradient_check_detailed(clf, X, y, step=cfg["step"], seed=i)
        layer = max(errors, key=errors.get)
        print(
            f"net {i}: features={n_features} hidden={hidden} classes={n_classes} "
            f"gs={gs:g} sf={sf:g} max_rel_err={errors[layer]:.3e} ({layer})"
        )
        if errors[layer] > worst:
            worst = errors[layer]
            worst_desc = f"net {i} layer {layer}"
    if worst >= cfg["threshold"]:
        print(
            f"gradcheck FAILED: max relative error {worst:.3e} at {worst_desc} "
            f">= threshold {cfg['threshold']:g}",
            file=sys.stderr,
        )
        return EXIT_ORACLE
    print(f"gradcheck: max relative error {worst:.3e} < {cfg['threshold']:g} -> OK")
    return EXIT_OK


LOOCV_DEFAULTS = {
    "dataset": "synthetic",
    "data_dir": None,
    "n_id_classes": 5,
    "seeds": list(range(10)),
    "metric": "gmean",
    "epochs": None,
    "batch_size": 32,
    "learning_rate": 1e-2,
    "momentum": 0.9,
    "hidden_sizes": (400, 128),
    "group_sparsity": 1e-4,
    "soft_freeze": 1e-2,
    "temperature": 10.0,
    "dim": 16,
    "samples_per_class": 200,
    "separation": 10.0,
    "data_seed": 0,
    "output": None,
}


def cmd_loocv(args) -> int:
    cfg = _effective_config(args, LOOCV_DEFAULTS)
    if not cfg["seeds"]:
        raise UsageError("seeds must be nonempty")
    if cfg["n_id_classes"] < 3:
        raise UsageError("n_id_classes must be >= 3 for leave-one-class-out")
    n_total = max(cfg["n_id_classes"], REAL_N_CLASSES if cfg["dataset"] != "synthetic" else cfg["n_id_classes"])
    train, _ = _load_dataset(cfg, n_total)
    template = _model_template(cfg)
    results = {}
    for seed in cfg["seeds"]:
        id_classes, _ = choose_id_classes(n_total, cfg["n_id_classes"], seed)
        id_train = subset_classes(train, id_classes, relabel=True)
        data = by_class(id_train)
        class_data = [data[c] for c in sorted(data)]
        pcfg = ProtocolConfig(metric=cfg["metric"], model=template, seed=seed)
        eta0, folds = loocv_eta(class_data, pcfg)
        results[seed] = {"eta": eta0, "folds": folds, "id_classes": id_classes}
        print(f"seed {seed}: eta = {eta0:.6f} (folds: {', '.join(f'{e:.4f}' for e in folds)})")
    if cfg["output"]:
        Path(cfg["output"]).write_text(json.dumps(results, indent=2) + "\n")
        print(f"wrote estimates to {cfg['output']}")
    return EXIT_OK


EVAL_DEFAULTS = {
    "model": None,
    "dataset": "synthetic",
    "data_dir": None,
    "split": "test",
    "n_classes": 5,
    "dim": 16,
    "samples_per_class": 200,
    "separation": 10.0,
    "data_seed": 0,
    "classes": None,
    "ood": False,
    "output": "scores.csv",
}


def cmd_eval(args) -> int:
    cfg = _effective_config(args, EVAL_DEFAULTS)
    if not cfg["model"]:
        raise UsageError("eval requires --model pointing at a checkpoint")
    model_path = Path(cfg["model"])
    if not model_path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {model_path}")
    clf = load_checkpoint(model_path)

    known = cfg["classes"]
    if known is None:
        meta_path = model_path.parent / (model_path.stem + ".meta.json")
        if meta_path.is_file():
            known = json.loads(meta_path.read_text()).get("known_classes")
    if known is None:
        known = list(range(clf.n_classes_))

    train, test = _load_dataset(cfg, cfg["n_classes"])
    ds = train if cfg["split"] == "train" else test
    if cfg["ood"]:
        table = build_score_table(clf, ds.X, ood=True)
        kept = len(ds)
    else:
        lookup = {c: i for i, c in enumerate(known)}
        mask = np.isin(ds.y, list(lookup))
        y = np.array([lookup[int(v)] for v in ds.y[mask]], dtype=np.int64)
        table = build_score_table(clf, ds.X[mask], y)
        kept = int(mask.sum())
    table.to_csv(cfg["output"])
    line = f"wrote {len(table)} rows x {clf.n_classes_} scores to {cfg['output']}"
    if not cfg["ood"]:
        acc = float(table.correct.mean()) if len(table) else float("nan")
        line += f" (kept {kept}/{len(ds)} rows, argmax accuracy {acc:.4f})"
    print(line)
    return EXIT_OK


def _add_config_flag(p) -> None:
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")


def _add_dataset_flags(p, with_split: bool = False) -> None:
    p.add_argument("--dataset", choices=DATASETS)
    p.add_argument("--data-dir", dest="data_dir", help=f"dataset root (or ${DATA_DIR_ENV})")
    p.add_argument("--dim", type=int, help="synthetic: feature dimension")
    p.add_argument("--samples-per-class", dest="samples_per_class", type=int)
    p.add_argument("--separation", type=float, help="synthetic: cluster distance in std units")
    p.add_argument("--data-seed", dest="data_seed", type=int)
    if with_split:
        p.add_argument("--split", choices=("train", "test"))


def _add_model_flags(p) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--hidden-sizes", dest="hidden_sizes", type=_parse_int_tuple,
                   help="comma-separated layer widths, e.g. 400,128")
    p.add_argument("--group-sparsity", dest="group_sparsity", type=float)
    p.add_argument("--soft-freeze", dest="soft_freeze", type=float)
    p.add_argument("--temperature", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="oodcal", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run the continual protocol over seeds and methods")
    _add_config_flag(run)
    _add_dataset_flags(run)
    _add_model_flags(run)
    run.add_argument("--n-id-classes", dest="n_id_classes", type=int)
    run.add_argument("--n-stream", dest="n_stream", type=int, help="number of streamed OOD classes")
    run.add_argument("--seeds", type=_parse_int_list, help="comma-separated, e.g. 0,1,2")
    run.add_argument("--metric", choices=METRICS)
    run.add_argument("--method", choices=METHODS + ("all",))
    run.add_argument("--rho", type=float, help="flagged fraction declaring a batch OOD")
    run.add_argument("--eta-update", dest="eta_update", choices=("pairwise", "cumulative"))
    run.add_argument("--fixed-eta", dest="fixed_eta", type=float)
    run.add_argument("--output")
    run.add_argument("--format", choices=("csv", "json"))
    run.add_argument("--aggregate-output", dest="aggregate_output",
                     help="also write per-stage aggregates with significance tests")
    run.add_argument("--save-model", dest="save_model", help="directory for final checkpoints")
    run.set_defaults(func=cmd_run)

    sc = sub.add_parser("searchcheck", help="verify the threshold search against a dense grid")
    _add_config_flag(sc)
    sc.add_argument("--n-tables", dest="n_tables", type=int)
    sc.add_argument("--seed", type=int)
    sc.add_argument("--grid-points", dest="grid_points", type=int)
    sc.add_argument("--dump", help="where to write a failing table")
    sc.set_defaults(func=cmd_searchcheck)

    gc = sub.add_parser("gradcheck", help="verify analytic gradients by finite differences")
    _add_config_flag(gc)
    gc.add_argument("--n-nets", dest="n_nets", type=int)
    gc.add_argument("--seed", type=int)
    gc.add_argument("--threshold", type=float)
    gc.add_argument("--step", type=float)
    gc.set_defaults(func=cmd_gradcheck)

    lo = sub.add_parser("loocv", help="estimate eta by leave-one-class-out only")
    _add_config_flag(lo)
    _add_dataset_flags(lo)
    _add_model_flags(lo)
    lo.add_argument("--n-id-classes", dest="n_id_classes", type=int)
    lo.add_argument("--seeds", type=_parse_int_list)
    lo.add_argument("--metric", choices=METRICS)
    lo.add_argument("--output", help="optional JSON file for the estimates")
    lo.set_defaults(func=cmd_loocv)

    ev = sub.add_parser("eval", help="re-score a checkpoint on a dataset split")
    _add_config_flag(ev)
    _add_dataset_flags(ev, with_split=True)
    ev.add_argument("--model", help="checkpoint written by run --save-model")
    ev.add_argument("--n-classes", dest="n_classes", type=int,
                    help="synthetic: total classes to regenerate")
    ev.add_argument("--classes", type=_parse_int_list,
                    help="original class ids in the model's label order")
    ev.add_argument("--ood", action="store_const", const=True,
                    help="score without labels (OOD batch)")
    ev.add_argument("--output")
    ev.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (
        DataFormatError,
        DataLengthError,
        DataConsistencyError,
        InsufficientDataError,
        DegenerateScaleError,
        FileNotFoundError,
    ) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # config validation from model/protocol constructors (bad epochs,
        # momentum, hidden sizes, ...); must come after the data errors,
        # which subclass ValueError
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_ORACLE


if __name__ == "__main__":
    sys.exit(main())
