"""Command-line entry point: ``adfair gen-data|train|eval|audit|report``.

Exit codes: 0 ok, 2 usage or validation error, 3 training aborted,
4 checkpoint/dataset incompatibility.
"""

from __future__ import annotations

import os

# BLAS thread pools are sized at numpy import time, so cap them first.
_THREADS = os.environ.get("ADFAIR_THREADS")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    if _THREADS is not None:
        os.environ[_var] = _THREADS
    else:
        os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import csv  # noqa: E402
import hashlib  # noqa: E402
import io  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
import warnings  # noqa: E402
from pathlib import Path  # noqa: E402

from . import __version__  # noqa: E402
from . import datagen, evalharness, fairmetrics as fm, model, trainer  # noqa: E402

log = logging.getLogger("adfair")

EXIT_OK, EXIT_USAGE, EXIT_TRAIN, EXIT_COMPAT = 0, 2, 3, 4
RUN_MANIFEST = "run_manifest.json"
CONFIG_KEYS = {"preset", "seed", "data", "arch", "train", "eval"}
DIM_FIELDS = ("d_img_in", "d_txt_in", "L_max", "C_cls", "C_attr")


class UsageError(Exception):
    pass


class CompatibilityError(Exception):
    pass


# -- config -------------------------------------------------------------------

def load_config(spec: str | None) -> dict:
    """A JSON file path, or the bare name of a dataset preset."""
    if spec is None:
        return {}
    path = Path(spec)
    if path.is_file():
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    elif spec in datagen.PRESETS:
        doc = {"preset": spec}
    else:
        raise UsageError(f"{spec}: no such config file or preset "
                         f"(presets: {', '.join(sorted(datagen.PRESETS))})")
    if not isinstance(doc, dict):
        raise UsageError(f"{spec}: config must be a JSON object")
    unknown = set(doc) - CONFIG_KEYS
    if unknown:
        raise UsageError(f"{spec}: unknown config keys {sorted(unknown)}")
    return doc


def _build(cls, fields: dict, what: str):
    try:
        return cls(**fields)
    except TypeError as exc:
        raise UsageError(f"{what} config: {exc}") from None


def gen_config(doc: dict, seed: int | None = None) -> datagen.GenConfig:
    """Dataset config from ``doc``. A top-level or ``--seed`` seed replaces
    the data seed with its ``data`` sub-seed."""
    fields = dict(doc.get("data", {}))
    if seed is None:
        seed = doc.get("seed")
    if seed is not None:
        fields["seed"] = trainer.sub_seed(seed, "data")
    if "preset" in doc:
        try:
            return datagen.preset(doc["preset"], **fields)
        except TypeError as exc:
            raise UsageError(f"data config: {exc}") from None
    return _build(datagen.GenConfig, fields, "data")


def train_config(doc: dict, args) -> trainer.TrainConfig:
    fields = dict(doc.get("train", {}))
    name = fields.pop("preset", "desk")
    if name not in trainer.TRAIN_PRESETS:
        raise UsageError(f"train.preset: unknown {name!r}; known: {sorted(trainer.TRAIN_PRESETS)}")
    fields = {**trainer.TRAIN_PRESETS[name], **fields}
    if "seed" in doc and "seed" not in fields:
        fields["seed"] = doc["seed"]
    if args.seed is not None:
        fields["seed"] = args.seed
    if args.alpha is not None:
        fields["alpha"] = args.alpha
    if args.disc_input is not None:
        fields["disc_input_mode"] = args.disc_input
    return _build(trainer.TrainConfig, fields, "train")


def top_seed(doc: dict, args) -> int:
    if args.seed is not None:
        return args.seed
    return int(doc.get("seed", 0))


# -- files --------------------------------------------------------------------

def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_dir(directory: Path, names=None) -> dict:
    if names is None:
        names = sorted(p.name for p in directory.iterdir() if p.is_file() and p.name != RUN_MANIFEST)
    return {n: sha256(directory / n) for n in names}


def write_run_manifest(out: Path, command: str, config: dict, inputs: dict, outputs: dict,
                       timings: dict, status: dict | None = None):
    doc = {
        "tool": "adfair",
        "version": __version__,
        "command": command,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "timings_s": timings,
        "status": status or {"ok": True},
    }
    (out / RUN_MANIFEST).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def verify_dataset(data_dir: Path) -> dict:
    """Dataset file hashes; checked against the generator's run manifest when present."""
    if not (data_dir / "manifest.json").is_file():
        raise UsageError(f"{data_dir}: not a dataset directory (no manifest.json)")
    hashes = hash_dir(data_dir)
    rm = data_dir / RUN_MANIFEST
    if rm.is_file():
        recorded = json.loads(rm.read_text()).get("outputs", {}).get("files", {})
        for name, digest in recorded.items():
            if hashes.get(name) != digest:
                raise UsageError(f"{data_dir / name}: sha256 does not match {rm}")
    return hashes


def resolve_checkpoint(path: Path) -> Path:
    if (path / model.MANIFEST).is_file():
        return path
    if (path / "final" / model.MANIFEST).is_file():
        return path / "final"
    raise UsageError(f"{path}: no checkpoint manifest (expected {model.MANIFEST} or final/)")


def check_compatible(arch: model.ArchConfig, data_cfg: datagen.GenConfig, ckpt: Path, data: Path):
    bad = [f"{k}: checkpoint {getattr(arch, k)} vs dataset {getattr(data_cfg, k)}"
           for k in DIM_FIELDS if getattr(arch, k) != getattr(data_cfg, k)]
    if bad:
        raise CompatibilityError(f"{ckpt} is incompatible with {data}: " + "; ".join(bad))


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    t0 = time.perf_counter()
    doc = load_config(args.config)
    cfg = gen_config(doc, args.seed)
    out = Path(args.out)
    data = datagen.generate(cfg)
    datagen.write_dataset(out, data)
    write_run_manifest(out, "gen-data", {"data": cfg.to_dict()}, {},
                       {"files": hash_dir(out)}, {"total": time.perf_counter() - t0})
    sizes = {k: len(v) for k, v in data.splits.items()}
    print(f"wrote {cfg.name} dataset to {out}: {sizes}")
    return EXIT_OK


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    doc = load_config(args.config)
    tcfg = train_config(doc, args)
    data_dir, out = Path(args.data), Path(args.out)
    data_hashes = verify_dataset(data_dir)
    data = datagen.read_dataset(data_dir)
    try:
        arch = trainer.arch_for(data.config, tcfg.disc_input_mode, **doc.get("arch", {}))
    except TypeError as exc:
        raise UsageError(f"arch config: {exc}") from None
    out.mkdir(parents=True, exist_ok=True)
    provenance = {"data_name": data.config.name, "data_seed": data.config.seed,
                  "data_manifest_sha256": data_hashes["manifest.json"]}
    config_echo = {"train": tcfg.to_dict(), "arch": arch.to_dict()}
    inputs = {"data_dir": str(data_dir), "data_files": data_hashes}
    t1 = time.perf_counter()
    try:
        _, tlog = trainer.train(tcfg, data.splits["train"], data.splits["val"], arch,
                                out_dir=out, provenance=provenance)
    except trainer.TrainingAborted as exc:
        best = out / "best"
        write_run_manifest(
            out, "train", config_echo, inputs,
            {"best": str(best) if (best / model.WEIGHTS).is_file() else None},
            {"total": time.perf_counter() - t0},
            {"ok": False, "failure_step": exc.step, "error": str(exc)},
        )
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    outputs = {
        "best": str(out / "best"),
        "final": str(out / "final"),
        "files": {f"{sub}/{model.WEIGHTS}": sha256(out / sub / model.WEIGHTS)
                  for sub in ("best", "final")},
        "best_step": tlog.best_step,
        "best_val_l_gcl": tlog.best_val,
    }
    write_run_manifest(out, "train", config_echo, inputs, outputs,
                       {"train": time.perf_counter() - t1, "total": time.perf_counter() - t0})
    print(f"trained {len(tlog.steps)} steps; best val l_gcl {tlog.best_val:.4f} "
          f"at step {tlog.best_step}; checkpoints in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    doc = load_config(args.config)
    ckpt = resolve_checkpoint(Path(args.ckpt))
    data_dir, out = Path(args.data), Path(args.out)
    data_hashes = verify_dataset(data_dir)
    data = datagen.read_dataset(data_dir)
    try:
        params, manifest = model.load_checkpoint(ckpt)
    except (model.ConfigurationError, ValueError) as exc:
        raise CompatibilityError(f"{ckpt}: {exc}") from None
    check_compatible(params.arch, data.config, ckpt, data_dir)

    pretrain = manifest.get("provenance", {}).get("data_name")
    if args.scenario == "transfer" and pretrain == data.config.name:
        raise UsageError(
            f"transfer needs a checkpoint pretrained on another preset; {ckpt} was trained on "
            f"{pretrain!r}, the same as {data_dir}"
        )
    ev = dict(doc.get("eval", {}))
    fraction = args.fraction if args.fraction is not None else ev.get("label_fraction", 0.10)
    seed = top_seed(doc, args)
    scenario = evalharness.ScenarioConfig(
        kind=args.scenario,
        label_fraction=fraction,
        probe_steps=int(ev.get("probe_steps", 500)),
        probe_lr=float(ev.get("probe_lr", 0.1)),
        seed=trainer.sub_seed(seed, "probe"),
    )
    datasets = dict(data.splits, prompts=data.prompts)
    probe_acc = evalharness.attribute_probe_accuracy(
        params, data.splits["train"], data.splits["test"], seed=scenario.seed)
    train_cfg = manifest.get("train_config", {})
    extra = {
        "attribute": args.attribute,
        "attribute_probe_acc": probe_acc,
        "checkpoint_sha256": sha256(ckpt / model.WEIGHTS),
        "pretrain_data": pretrain,
        "eval_data": data.config.name,
        "alpha": train_cfg.get("alpha"),
        "disc_input_mode": params.arch.disc_input_mode,
        "seed": seed,
    }
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", fm.DegenerateCellWarning)
        tables = evalharness.run_scenario(scenario, params, datasets, out, args.attribute,
                                          args.gauc_mode, extra)
    _emit_warnings(caught)
    write_run_manifest(out, "eval", {"scenario": vars(scenario), "gauc_mode": args.gauc_mode},
                       {"checkpoint": str(ckpt), "data_dir": str(data_dir), "data_files": data_hashes},
                       {"files": hash_dir(out)}, {"total": time.perf_counter() - t0})
    table = tables[args.attribute]
    print(_csv_text([_table_header(), table.row()]), end="")
    return EXIT_OK


def cmd_audit(args) -> int:
    try:
        preds = fm.read_predictions(args.predictions)
    except FileNotFoundError:
        raise UsageError(f"{args.predictions}: no such file") from None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", fm.DegenerateCellWarning)
        table = fm.metric_table(preds, args.gauc_mode)
    _emit_warnings(caught)
    print(json.dumps(table.to_dict(), indent=2))
    if args.csv:
        Path(args.csv).write_text(_csv_text([_table_header(), table.row()]))
    return EXIT_OK


def collect_rows(run_dirs) -> list[dict]:
    rows = []
    for d in map(Path, run_dirs):
        reports = sorted(d.glob("report_*.json"))
        if not reports:
            warnings.warn(f"{d}: no report_*.json files, skipped")
            continue
        for rp in reports:
            try:
                rep = json.loads(rp.read_text())
            except (OSError, json.JSONDecodeError) as exc:
                warnings.warn(f"{rp}: unreadable report ({exc}), skipped")
                continue
            for attribute, table in sorted(rep.get("tables", {}).items()):
                rows.append({"method": d.name, "attribute": attribute,
                             "scenario": rep.get("scenario", rp.stem[len("report_"):]),
                             "metrics": table})
    return rows


def build_report(rows: list[dict], baseline: str | None) -> list[dict]:
    base = {(r["attribute"], r["scenario"]): r["metrics"] for r in rows if r["method"] == baseline}
    for r in rows:
        ref = base.get((r["attribute"], r["scenario"]))
        r["improvement"] = fm.fairness_improvement(ref, r["metrics"]) if ref else None
    return rows


def cmd_report(args) -> int:
    runs = list(args.runs)
    if args.baseline and args.baseline not in runs:
        runs.append(args.baseline)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rows = collect_rows(runs)
    _emit_warnings(caught)
    if not rows:
        raise UsageError("no completed runs to report")
    baseline = Path(args.baseline).name if args.baseline else None
    rows = build_report(rows, baseline)

    header = ["Method", "Attribute", "Scenario"] + [fm.COLUMN_TITLES[k] for k in fm.METRIC_COLUMNS]
    header.append("Improvement")
    table = [header]
    for r in rows:
        vals = [f"{float(r['metrics'][k]):.2f}" for k in fm.METRIC_COLUMNS]
        imp = "" if r["improvement"] is None else f"{r['improvement']:.2f}"
        table.append([r["method"], r["attribute"], r["scenario"], *vals, imp])
    text = _csv_text(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(text)
        (out / "report.json").write_text(
            json.dumps({"baseline": baseline, "rows": rows}, indent=2, sort_keys=True) + "\n")
    print(text, end="")
    return EXIT_OK


# -- plumbing -----------------------------------------------------------------

def _table_header():
    return [fm.COLUMN_TITLES[k] for k in fm.METRIC_COLUMNS]


def _csv_text(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _emit_warnings(caught):
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adfair", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"adfair {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--config", required=True, help="JSON config file or preset name")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train encoders and discriminator")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--alpha", type=float)
    t.add_argument("--disc-input", choices=("multimodal", "vision_only"))
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one scenario")
    e.add_argument("--config")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--scenario", required=True, choices=evalharness.SCENARIOS)
    e.add_argument("--attribute", default="group")
    e.add_argument("--fraction", type=float)
    e.add_argument("--seed", type=int)
    e.add_argument("--gauc-mode", default="label-free", choices=fm.GAUC_MODES)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("audit", help="fairness metrics for a predictions CSV")
    a.add_argument("predictions")
    a.add_argument("--gauc-mode", default="label-free", choices=fm.GAUC_MODES)
    a.add_argument("--csv", help="also write a one-row CSV table here")
    a.set_defaults(func=cmd_audit)

    r = sub.add_parser("report", help="consolidate eval runs into one table")
    r.add_argument("runs", nargs="+", help="eval output directories")
    r.add_argument("--baseline", help="run directory the improvement column is relative to")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


VALIDATION_ERRORS = (
    UsageError, datagen.GenConfigError, datagen.CellPopulationError, evalharness.ScenarioError,
    evalharness.StratificationError, fm.AuditFormatError, fm.MetricError, model.ConfigurationError,
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CompatibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        where = f"{exc.filename}: " if exc.filename else ""
        print(f"error: {where}{exc.strerror or exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
