"""Config-driven job runner and command-line entry point.

A job trains a reference model, searches for a target sparsity (every
accuracy evaluation is one L-C run), then writes the compressed model,
reports and traces to the output directory.

Exit codes: 0 ok, 1 config error, 2 infeasible search, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import tomli

from netcompress.datasets import GENERATORS, Dataset, load_csv, load_dataset
from netcompress.exceptions import (CompressionError, ConfigError, NumericError, SchemeError,
                                    SearchError, ShapeError, ThinningError)
from netcompress.graph import thin, zero_structure_masks
from netcompress.lc import LcConfig, direct_compression, lc_run, write_trace
from netcompress.metrics import CURVE_DEFAULTS, count_flops, memory_footprint, synthetic_curve
from netcompress.schemes import Scheme, is_structured, scheme_from_config, scheme_to_config
from netcompress.search import BlackBox, LevelSetConfig, TwoStageSearch
from netcompress.seeding import stream_seed
from netcompress.tensor_net import (Model, TrainConfig, evaluate, load_model, mlp, save_model,
                                    small_convnet, train)

log = logging.getLogger("netcompress")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NUMERIC = 0, 1, 2, 3
OBJECTIVES = ("footprint_min", "flops_min")
SEARCH_TRACE_COLUMNS = ("stage", "t", "s", "y", "domain_lo", "acq_value", "feasible")
PROFILE_COLUMNS = ("s", "lc_accuracy", "dc_accuracy", "constraint_gap", "bytes_total",
                   "compression_ratio", "flops_total")
ARCHES = {"mlp": {"hidden"}, "convnet": {"channels", "kernel_size"}}


# ---------------------------------------------------------------------------
# job configuration

@dataclass(frozen=True)
class TaskConfig:
    dataset: str = "blobs"
    n: int = 200
    val_fraction: float = 0.1


@dataclass(frozen=True)
class JobConfig:
    seed: int = 0
    output_dir: str = "netcompress-out"
    task: TaskConfig = field(default_factory=TaskConfig)
    model: dict = field(default_factory=lambda: {"arch": "mlp", "hidden": [16]})
    train: TrainConfig = field(default_factory=TrainConfig)
    scheme: Scheme | None = None
    objective: str = "footprint_min"
    direction: str = "min"
    accuracy: str = "lc"
    level_set: LevelSetConfig = field(default_factory=LevelSetConfig)
    gp: dict = field(default_factory=lambda: {"length_scale": 1.0, "alpha": 0.1, "jitter": 1e-6})
    lc: LcConfig = field(default_factory=LcConfig)

    @property
    def mock_accuracy(self) -> bool:
        return self.accuracy.startswith("synthetic:")


def _section(doc, name, cls):
    """Instantiate dataclass ``cls`` from ``doc[name]``, rejecting unknown keys."""
    raw = doc.get(name, {})
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"[{name}]: unknown keys {unknown}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def _curve_name(spec: str, what: str) -> str:
    name = spec.split(":", 1)[1]
    if name not in CURVE_DEFAULTS:
        raise ConfigError(f"{what}: unknown synthetic curve {name!r}; "
                          f"choose from {sorted(CURVE_DEFAULTS)}")
    return name


def config_from_dict(doc: dict, seed: int | None = None, output_dir: str | None = None) -> JobConfig:
    """Validate a parsed job document. Raises :class:`ConfigError` on any problem."""
    top = {"seed", "output_dir", "accuracy", "task", "model", "train", "scheme", "objective",
           "level_set", "gp", "lc"}
    unknown = sorted(set(doc) - top)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    root = doc.get("seed", 0) if seed is None else seed
    if not isinstance(root, int) or isinstance(root, bool) or not 0 <= root < 2 ** 64:
        raise ConfigError("seed must be an unsigned 64-bit integer")

    task = _section(doc, "task", TaskConfig)
    if task.dataset not in GENERATORS and not task.dataset.endswith(".csv"):
        raise ConfigError(f"unknown dataset {task.dataset!r}; choose from {sorted(GENERATORS)} "
                          "or give a .csv path")
    if task.dataset.endswith(".csv") and not Path(task.dataset).is_file():
        raise ConfigError(f"dataset file {task.dataset!r} not found")
    if not 0 < task.val_fraction < 1:
        raise ConfigError("[task] val_fraction must lie in (0, 1)")

    model = dict(doc.get("model", {"arch": "mlp", "hidden": [16]}))
    arch = model.get("arch")
    if arch not in ARCHES:
        raise ConfigError(f"[model] arch must be one of {sorted(ARCHES)}")
    extra = sorted(set(model) - ARCHES[arch] - {"arch"})
    if extra:
        raise ConfigError(f"[model] unknown keys for {arch}: {extra}")

    train_doc = dict(doc.get("train", {}))
    if "seed" in train_doc:
        raise ConfigError("[train] seed is derived from the top-level seed")
    train_cfg = _section({"train": train_doc}, "train", TrainConfig)
    train_cfg = replace(train_cfg, seed=stream_seed(root, "train"))

    if "scheme" not in doc:
        raise ConfigError("a [scheme] is required")
    try:
        scheme = scheme_from_config(doc["scheme"])
    except (SchemeError, TypeError, ValueError) as exc:
        raise ConfigError(f"[scheme]: {exc}") from None

    obj = doc.get("objective", {"name": "footprint_min"})
    if isinstance(obj, str):
        obj = {"name": obj}
    extra = sorted(set(obj) - {"name", "direction"})
    if extra:
        raise ConfigError(f"[objective] unknown keys {extra}")
    name = obj.get("name", "footprint_min")
    if name.startswith("synthetic:"):
        _curve_name(name, "[objective]")
        direction = obj.get("direction", "max")
    elif name in OBJECTIVES:
        direction = obj.get("direction", "min")
    else:
        raise ConfigError(f"[objective] name must be one of {list(OBJECTIVES)} or synthetic:<curve>")
    if direction not in ("min", "max"):
        raise ConfigError("[objective] direction must be 'min' or 'max'")

    accuracy = doc.get("accuracy", "lc")
    if accuracy.startswith("synthetic:"):
        _curve_name(accuracy, "accuracy")
    elif accuracy != "lc":
        raise ConfigError("accuracy must be 'lc' or synthetic:<curve>")

    level_set = _section(doc, "level_set", LevelSetConfig)
    gp = {"length_scale": 1.0, "alpha": 0.1, "jitter": 1e-6}
    extra = sorted(set(doc.get("gp", {})) - set(gp))
    if extra:
        raise ConfigError(f"[gp] unknown keys {extra}")
    gp.update(doc.get("gp", {}))
    if not (gp["length_scale"] > 0 and gp["alpha"] >= 0 and gp["jitter"] >= 0):
        raise ConfigError("[gp] needs length_scale > 0, alpha >= 0, jitter >= 0")

    lc_doc = dict(doc.get("lc", {}))
    if "seed" in lc_doc:
        raise ConfigError("[lc] seed is derived from the top-level seed")
    lc_cfg = replace(_section({"lc": lc_doc}, "lc", LcConfig), seed=stream_seed(root, "lc"))

    return JobConfig(seed=root, output_dir=output_dir or doc.get("output_dir", "netcompress-out"),
                     task=task, model=model, train=train_cfg, scheme=scheme, objective=name,
                     direction=direction, accuracy=accuracy, level_set=level_set, gp=gp, lc=lc_cfg)


def load_config(path, seed: int | None = None, output_dir: str | None = None) -> JobConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(doc, seed, output_dir)


def config_to_dict(cfg: JobConfig) -> dict:
    """JSON-ready mirror of the job document (derived seeds omitted)."""
    train_doc = asdict(cfg.train)
    lc_doc = asdict(cfg.lc)
    train_doc.pop("seed")
    lc_doc.pop("seed")
    return {"seed": cfg.seed, "output_dir": cfg.output_dir, "accuracy": cfg.accuracy,
            "task": asdict(cfg.task), "model": cfg.model, "train": train_doc,
            "scheme": scheme_to_config(cfg.scheme),
            "objective": {"name": cfg.objective, "direction": cfg.direction},
            "level_set": asdict(cfg.level_set), "gp": dict(cfg.gp), "lc": lc_doc}


# ---------------------------------------------------------------------------
# job building blocks

def build_dataset(cfg: JobConfig) -> Dataset:
    seed = stream_seed(cfg.seed, "data")
    if cfg.task.dataset.endswith(".csv"):
        return load_csv(cfg.task.dataset, val_fraction=cfg.task.val_fraction, seed=seed)
    return load_dataset(cfg.task.dataset, seed=seed, n=cfg.task.n,
                        val_fraction=cfg.task.val_fraction)


def build_model(cfg: JobConfig, dataset: Dataset) -> Model:
    seed = stream_seed(cfg.seed, "init")
    shape = dataset.input_shape
    spec = cfg.model
    if spec["arch"] == "mlp":
        return mlp(int(np.prod(shape)), list(spec.get("hidden", [16])), dataset.num_classes, seed)
    if len(shape) != 3:
        raise ConfigError(f"convnet needs (C, H, W) inputs, dataset has shape {shape}")
    return small_convnet(shape, int(spec.get("channels", 4)), dataset.num_classes, seed,
                         int(spec.get("kernel_size", 3)))


def train_reference(cfg: JobConfig):
    """Returns ``(dataset, reference_model, val_accuracy, history)``."""
    dataset = build_dataset(cfg)
    model, history = train(build_model(cfg, dataset), dataset, cfg.train)
    return dataset, model, evaluate(model, *dataset.val), history


def thinned_model(model: Model) -> Model:
    """Drop all-zero rows/filters of hidden layers (the output layer stays whole)."""
    masks = zero_structure_masks(model)
    masks.pop(model.nodes[-1].name, None)
    return thin(model, masks)


class Evaluator:
    """Compresses the reference at a sparsity once and caches the outcome.

    With ``mock`` set, compression is a single projection and accuracy
    comes from a synthetic curve; otherwise each sparsity costs one L-C run.
    """

    def __init__(self, cfg: JobConfig, reference: Model, dataset: Dataset):
        self.cfg = cfg
        self.reference = reference
        self.dataset = dataset
        self.results: dict[float, dict] = {}
        self.curve = None
        if cfg.mock_accuracy:
            self.curve = synthetic_curve(cfg.accuracy.split(":", 1)[1],
                                         seed=stream_seed(cfg.seed, "search"))

    def compress(self, s: float) -> dict:
        key = round(float(s), 12)
        if key not in self.results:
            t = len(self.results)
            log.info("evaluation %d at s=%.6f", t, s)
            if self.curve is not None:
                model, _ = direct_compression(self.reference, self.cfg.scheme, s, self.dataset)
                acc, trace = self.curve.value(s), None
            else:
                model, acc, trace = lc_run(self.reference, self.cfg.scheme, s, self.dataset,
                                           self.cfg.lc)
            self.results[key] = {"t": t, "s": float(s), "model": model, "accuracy": acc,
                                 "trace": trace}
        return self.results[key]

    def accuracy(self, s: float) -> float:
        return self.compress(s)["accuracy"]

    def objective_fn(self):
        cfg = self.cfg
        if cfg.objective.startswith("synthetic:"):
            return synthetic_curve(cfg.objective.split(":", 1)[1],
                                   seed=stream_seed(cfg.seed, "search"))
        if cfg.objective == "footprint_min":
            return lambda s: memory_footprint(self.compress(s)["model"], self.reference).bytes_total
        return lambda s: count_flops(self.final_model(self.compress(s)["model"])).flops_total

    def final_model(self, model: Model) -> Model:
        return thinned_model(model) if is_structured(self.cfg.scheme) else model


def make_search(cfg: JobConfig) -> TwoStageSearch:
    ls = cfg.level_set
    return TwoStageSearch(epsilon=ls.epsilon, gamma=ls.gamma, T=ls.T, grid_size=ls.grid_size,
                          kappa=ls.kappa, direction=cfg.direction,
                          restrict_domain=ls.restrict_domain, **cfg.gp)


# ---------------------------------------------------------------------------
# artifact writers

def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def write_search_trace(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SEARCH_TRACE_COLUMNS)
        for r in rows:
            writer.writerow([_cell(r[c]) for c in SEARCH_TRACE_COLUMNS])


def _write_json(doc, path) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def model_report(model: Model, reference: Model | None = None) -> dict:
    reference = model if reference is None else reference
    return {"footprint": memory_footprint(model, reference).to_dict(),
            "flops": count_flops(model, reference).to_dict()}


def run_job(cfg: JobConfig, out_dir=None) -> int:
    """Run a full job and write its artifacts. Returns the process exit code."""
    out = Path(out_dir or cfg.output_dir)
    try:
        return _run_job(cfg, out)
    except SearchError:
        return EXIT_INFEASIBLE
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC


def _run_job(cfg: JobConfig, out: Path) -> int:
    dataset = build_dataset(cfg)
    reference = build_model(cfg, dataset)
    out.mkdir(parents=True, exist_ok=True)
    reference, _ = train(reference, dataset, cfg.train)
    save_model(reference, out / "reference.json")

    ev = Evaluator(cfg, reference, dataset)
    baseline = ev.curve.value(0.0) if ev.curve is not None else evaluate(reference, *dataset.val)
    log.info("reference accuracy %.4f", baseline)
    search = make_search(cfg)
    acc_box = BlackBox(ev.accuracy, "accuracy")
    obj_box = BlackBox(ev.objective_fn(), "objective")
    try:
        search.fit(acc_box, obj_box, baseline_accuracy=baseline)
    except SearchError as exc:
        log.error("search infeasible: %s", exc)
        write_search_trace(exc.trace or [], out / "search_trace.csv")
        _write_lc_traces(ev, out)
        raise
    write_search_trace(search.trace_, out / "search_trace.csv")
    _write_lc_traces(ev, out)

    best = ev.compress(search.s_star_)
    save_model(best["model"], out / "compressed.json")
    final = best["model"]
    if is_structured(cfg.scheme):
        final = thinned_model(best["model"])
        save_model(final, out / "thinned.json")
    result = {
        "s_acc": search.s_acc_,
        "s_star": search.s_star_,
        "accuracy": best["accuracy"],
        "objective": obj_box(search.s_star_),
        "objective_name": cfg.objective,
        "direction": cfg.direction,
        "baseline_accuracy": baseline,
        "level": baseline - cfg.level_set.epsilon,
        "evaluations": {"accuracy": acc_box.calls, "objective": obj_box.calls,
                        "compressions": len(ev.results)},
        "report": model_report(final, reference),
        # the output location is left out so identical jobs give identical bytes anywhere
        "config": {k: v for k, v in config_to_dict(cfg).items() if k != "output_dir"},
    }
    _write_json(result, out / "result.json")
    log.info("s_acc=%.6f s_star=%.6f", search.s_acc_, search.s_star_)
    return EXIT_OK


def _write_lc_traces(ev: Evaluator, out: Path) -> None:
    for r in ev.results.values():
        if r["trace"] is not None:
            write_trace(r["trace"], out / f"lc_trace_{r['t']}.csv")


# ---------------------------------------------------------------------------
# subcommands

def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed, args.out)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, model, acc, history = train_reference(cfg)
    save_model(model, out / "reference.json")
    with open(out / "train_history.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=("epoch", "loss", "train_accuracy", "val_accuracy"))
        writer.writeheader()
        writer.writerows({k: _cell(v) for k, v in row.items()} for row in history)
    print(json.dumps({"val_accuracy": acc, "model": str(out / "reference.json")}))
    return EXIT_OK


def profile_row(reference: Model, cfg: JobConfig, dataset: Dataset, s: float) -> tuple[dict, list]:
    model, acc, trace = lc_run(reference, cfg.scheme, s, dataset, cfg.lc)
    _, dc_acc = direct_compression(reference, cfg.scheme, s, dataset)
    final = thinned_model(model) if is_structured(cfg.scheme) else model
    fp = memory_footprint(model, reference)
    row = {"s": float(s), "lc_accuracy": acc, "dc_accuracy": dc_acc,
           "constraint_gap": trace[-1]["constraint_gap"], "bytes_total": fp.bytes_total,
           "compression_ratio": fp.compression_ratio,
           "flops_total": count_flops(final).flops_total}
    return row, trace


def cmd_compress_at(args) -> int:
    cfg = load_config(args.config, args.seed, args.out)
    if args.sparsity:
        grid = [float(s) for s in args.sparsity]
    else:
        grid = [float(s) for s in np.linspace(0.0, args.max_sparsity, args.sweep)]
    if not all(0 <= s < 1 for s in grid):
        raise ConfigError("sparsities must lie in [0, 1)")
    out = Path(cfg.output_dir)
    dataset = build_dataset(cfg)
    if args.model:
        reference = load_model(args.model)
    else:
        reference, _ = train(build_model(cfg, dataset), dataset, cfg.train)
    out.mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=args.workers) as pool:
        results = list(pool.map(lambda s: profile_row(reference, cfg, dataset, s), grid))
    with open(out / "profile.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PROFILE_COLUMNS)
        for i, (row, trace) in enumerate(results):
            writer.writerow([_cell(row[c]) for c in PROFILE_COLUMNS])
            write_trace(trace, out / f"lc_trace_{i}.csv")
    print(out / "profile.csv")
    return EXIT_OK


def load_masks(path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ConfigError("masks file must map layer names to 0/1 lists")
    masks = {}
    for name, values in doc.items():
        arr = np.asarray(values)
        if arr.ndim != 1 or not np.isin(arr, (0, 1)).all():
            raise ConfigError(f"mask for {name!r} must be a flat list of 0/1")
        masks[name] = arr.astype(bool)
    return masks


def cmd_thin(args) -> int:
    if not args.model or not args.masks or not args.out:
        raise ConfigError("thin needs --model, --masks and --out")
    model = load_model(args.model)
    thinned = thin(model, load_masks(args.masks))
    save_model(thinned, args.out)
    print(json.dumps({"parameters_before": model.n_parameters(),
                      "parameters_after": thinned.n_parameters()}))
    return EXIT_OK


def cmd_report(args) -> int:
    if not args.model:
        raise ConfigError("report needs --model")
    model = load_model(args.model)
    reference = load_model(args.reference) if args.reference else None
    print(json.dumps(model_report(model, reference), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_search(args) -> int:
    cfg = load_config(args.config, args.seed, args.out)
    return run_job(cfg)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML job file")
    common.add_argument("--seed", type=int, help="override the job's root seed")
    common.add_argument("--out", help="output directory (thin: output model path)")
    common.add_argument("--verbose", "-v", action="store_true")

    parser = argparse.ArgumentParser(prog="netcompress", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train the reference model")
    p = sub.add_parser("compress-at", parents=[common],
                       help="L-C compression at fixed sparsities, written as a profile CSV")
    p.add_argument("--sparsity", "-s", type=float, action="append",
                   help="sparsity to compress at (repeatable)")
    p.add_argument("--sweep", type=int, default=20, help="evenly spaced sparsities if no -s")
    p.add_argument("--max-sparsity", type=float, default=0.95)
    p.add_argument("--workers", type=int, default=1, help="parallel worker threads")
    p.add_argument("--model", help="reference model JSON (default: train one)")
    p = sub.add_parser("thin", parents=[common], help="remove masked structures from a model")
    p.add_argument("--model")
    p.add_argument("--masks", help="JSON mapping layer name to a 0/1 keep list")
    p = sub.add_parser("report", parents=[common], help="footprint and FLOP report")
    p.add_argument("--model")
    p.add_argument("--reference", help="reference model for the ratios (default: --model)")
    sub.add_parser("search", parents=[common], help="run a full two-stage search job")
    return parser


COMMANDS = {"train": cmd_train, "compress-at": cmd_compress_at, "thin": cmd_thin,
            "report": cmd_report, "search": cmd_search}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command in ("train", "compress-at", "search") and not args.config:
        print(f"error: {args.command} needs --config", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, SchemeError, ThinningError, ShapeError, FileNotFoundError,
            json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SearchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CompressionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
