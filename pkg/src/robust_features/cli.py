"""Command-line entry point: ``robust-features <command> --config cfg.json --out dir``.

Exit status is 0 iff the run finished and every requested check passed,
1 if a check failed or a stage errored, 2 for an invalid config.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, pipeline
from .attacks import AttackConfig, accuracy_vs_steps, attack_rows, robust_accuracy, write_attack_csv
from .data import SyntheticSpec, generate, load_dataset, load_idx_dataset, save_dataset
from .distill import DistillConfig, build_nonrobust_dataset, build_robust_dataset
from .metrics import eval_accuracy, halfwidth, transfer_rate, write_metrics_csv
from .models import TrainConfig, load_model, save_model, train
from .numerics import RngStream

log = logging.getLogger("robust_features")

COMMANDS = ("theory", "pipeline", "gen-data", "train", "attack", "distill", "transfer", "eval")
# commands whose schema definition name differs from the command
_SCHEMA_NAME = {"train": "train-cmd", "attack": "attack-cmd", "distill": "distill-cmd",
                "transfer": "transfer-cmd", "eval": "eval-cmd"}
# config keys holding file paths (resolved against the config's directory)
_PATH_KEYS = ("dataset", "eval_dataset", "model", "source", "images", "labels")


class ConfigError(ValueError):
    pass


def load_schema(name):
    text = resources.files("robust_features").joinpath("schemas", name).read_text()
    return json.loads(text)


def validate_config(cmd, cfg):
    """Raise ConfigError naming the offending key when cfg breaks the command's schema."""
    defs = load_schema("config.schema.json")["$defs"]
    schema = {"$ref": f"#/$defs/{_SCHEMA_NAME.get(cmd, cmd)}", "$defs": defs}
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {err.message}")


def validate_report(kind, report):
    defs = load_schema("report.schema.json")["$defs"]
    jsonschema.validate(report, {"$ref": f"#/$defs/{kind}", "$defs": defs},
                        cls=jsonschema.Draft202012Validator)


def _resolve_paths(obj, base):
    if isinstance(obj, dict):
        out = {}
        for k, v in obj.items():
            if k in _PATH_KEYS and isinstance(v, str):
                out[k] = str((base / v).resolve())
            elif k in ("targets", "det_models") and isinstance(v, list):
                out[k] = [str((base / p).resolve()) for p in v]
            else:
                out[k] = _resolve_paths(v, base)
        return out
    return obj


def read_config(path, cmd, seed=None):
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if seed is not None:
        cfg["seed"] = seed
    cfg.setdefault("seed", 0)
    validate_config(cmd, cfg)
    return _resolve_paths(cfg, path.parent.resolve())


def _write_json(path, obj):
    Path(path).write_text(pipeline.dumps(obj))


def _write_manifest(out, cfg, seeds, extra=None):
    man = pipeline.run_manifest(cfg, seeds)
    if extra:
        man.update(extra)
    _write_json(out / "manifest.json", man)
    return man


def _print_checks(checks):
    for c in checks:
        status = "PASS" if c["pass"] else "FAIL"
        detail = f" ({c['value']:.4g} {c['op']} {c['threshold']:.4g})" if "value" in c else ""
        print(f"[{status}] {c['name']}{detail}")


# ------------------------------------------------------------- commands


def cmd_theory(cfg, out):
    report, rows, ok = pipeline.run_theory(cfg)
    validate_report("theory_report", report)
    _write_json(out / "theory_report.json", report)
    keys = sorted({k for r in rows for k in r}, key=lambda k: (k != "epsilon", k))
    with open(out / "theory_sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    _write_json(out / "manifest.json", report["manifest"])
    _print_checks(report["checks"])
    return ok


def cmd_pipeline(cfg, out):
    try:
        report, ok = pipeline.run_pipeline(cfg, out, cfg.get("save_artifacts", False))
    except pipeline.StageError as exc:
        partial = exc.partial
        partial["failed_stage"] = exc.stage
        partial["error"] = str(exc.__cause__)
        partial.setdefault("checks", [])
        _write_json(out / "pipeline_report.json", partial)
        _write_json(out / "manifest.json", partial["manifest"])
        print(f"[FAIL] stage {exc.stage}: {exc.__cause__}", file=sys.stderr)
        return False
    validate_report("pipeline_report", report)
    _write_json(out / "pipeline_report.json", report)
    _write_json(out / "manifest.json", report["manifest"])
    chash = report["manifest"]["config_hash"]
    rows = []
    for stage, body in report["stages"].items():
        for name, v in _flatten(body):
            if isinstance(v, dict) and "value" in v:
                rows.append({"metric": f"{stage}.{name}", "value": v["value"], "stderr": v["halfwidth"] / 1.96,
                             "config_hash": chash})
            elif isinstance(v, float):
                rows.append({"metric": f"{stage}.{name}", "value": v, "stderr": "", "config_hash": chash})
    write_metrics_csv(rows, out / "pipeline_metrics.csv")
    if "transfer" in report["stages"]:
        _write_json(out / "transfer_report.json", report["stages"]["transfer"]["report"])
    _print_checks(report["checks"])
    return ok


def _flatten(d, prefix=""):
    for k, v in d.items():
        name = f"{prefix}{k}"
        if isinstance(v, dict) and "value" not in v:
            yield from _flatten(v, name + ".")
        else:
            yield name, v


def cmd_gen_data(cfg, out):
    if "synthetic" in cfg:
        spec = SyntheticSpec(**cfg["synthetic"], seed=cfg["seed"])
        ds = generate(spec)
    else:
        blk = cfg["idx"]
        ds = load_idx_dataset(blk["images"], blk["labels"], blk.get("classes"), blk.get("limit"))
    save_dataset(ds, out / "dataset.rfd")
    _write_manifest(out, cfg, {"generator": cfg["seed"]}, {"dataset_hash": ds.content_hash(), "n": len(ds)})
    return True


def cmd_train(cfg, out):
    ds = load_dataset(cfg["dataset"])
    atk = AttackConfig(**cfg["attack"]) if "attack" in cfg else None
    model = train(ds, cfg["arch"], TrainConfig(seed=cfg["seed"], attack=atk, **cfg.get("train", {})))
    save_model(model, out / "model.rfm")
    acc = eval_accuracy(model, ds)
    _write_json(out / "train_report.json", {"loss_curve": model.loss_curve, "train_accuracy": acc,
                                             "model_hash": model.content_hash()})
    _write_manifest(out, cfg, {"train": cfg["seed"]}, {"model_hash": model.content_hash()})
    return True


def cmd_attack(cfg, out):
    model, ds = load_model(cfg["model"]), load_dataset(cfg["dataset"])
    targeted = cfg.get("targeted", False)
    atk = AttackConfig(**cfg["attack"], mode="targeted" if targeted else "untargeted")
    rng = RngStream(cfg["seed"], 0)
    targets = (ds.labels + 1) % ds.n_classes if targeted else None
    rows = attack_rows(model, ds, atk, targets, rng.clone())
    write_attack_csv(rows, out / "attacks.csv")
    rep = {"success_rate": float(np.mean([r["success"] for r in rows])), "n": len(rows)}
    if not targeted:
        rep["robust_accuracy"] = robust_accuracy(model, ds, atk, rng.clone())
    if cfg.get("step_grid"):
        rep["accuracy_vs_steps"] = accuracy_vs_steps(model, ds, atk, cfg["step_grid"], rng.clone())
    _write_json(out / "attack_report.json", rep)
    _write_manifest(out, cfg, {"attack": cfg["seed"]})
    return True


def cmd_distill(cfg, out):
    model, ds = load_model(cfg["model"]), load_dataset(cfg["dataset"])
    if cfg["kind"] == "robust":
        res = build_robust_dataset(ds, model, DistillConfig(seed=cfg["seed"], **cfg.get("distill", {})))
    else:
        if "attack" not in cfg:
            raise ConfigError("config error at attack: non-robust datasets need a targeted attack block")
        atk = AttackConfig(**cfg["attack"], mode="targeted", clip01=cfg.get("clip01", ds.image_like))
        res = build_nonrobust_dataset(ds, model, atk, cfg["kind"], RngStream(cfg["seed"], 0))
    save_dataset(res, out / "dataset.rfd")
    _write_manifest(out, cfg, {"distill": cfg["seed"]}, {"dataset_hash": res.content_hash()})
    return True


def cmd_transfer(cfg, out):
    source = load_model(cfg["source"])
    targets = [load_model(p) for p in cfg["targets"]]
    det = [load_model(p) for p in cfg["det_models"]] if cfg.get("det_models") else None
    ds = load_dataset(cfg["dataset"])
    eval_ds = load_dataset(cfg["eval_dataset"]) if cfg.get("eval_dataset") else None
    rep = transfer_rate(source, targets, ds, AttackConfig(**cfg["attack"]), cfg.get("targeted", False),
                        det, eval_ds, [Path(p).stem for p in cfg["targets"]], RngStream(cfg["seed"], 0))
    (out / "transfer_report.json").write_text(rep.to_json() + "\n")
    _write_manifest(out, cfg, {"transfer": cfg["seed"]})
    if cfg.get("check_spearman_positive"):
        rho = rep.spearman()
        checks = [{"name": "transfer_spearman_positive", "value": rho, "op": ">", "threshold": 0.0,
                   "pass": bool(rho > 0)}]
        _print_checks(checks)
        return checks[0]["pass"]
    return True


def cmd_eval(cfg, out):
    model, ds = load_model(cfg["model"]), load_dataset(cfg["dataset"])
    acc = eval_accuracy(model, ds, cfg.get("label_map", "identity"))
    rep = {"accuracy": acc, "accuracy_halfwidth": halfwidth(acc, len(ds)), "n": len(ds)}
    if "attack" in cfg:
        rep["robust_accuracy"] = robust_accuracy(model, ds, AttackConfig(**cfg["attack"]), RngStream(cfg["seed"], 0))
    _write_json(out / "eval_report.json", rep)
    _write_manifest(out, cfg, {"eval": cfg["seed"]})
    if "min_accuracy" in cfg:
        chk = {"name": "min_accuracy", "value": acc, "op": ">=", "threshold": cfg["min_accuracy"],
               "pass": acc >= cfg["min_accuracy"]}
        _print_checks([chk])
        return chk["pass"]
    return True


HANDLERS = {"theory": cmd_theory, "pipeline": cmd_pipeline, "gen-data": cmd_gen_data, "train": cmd_train,
            "attack": cmd_attack, "distill": cmd_distill, "transfer": cmd_transfer, "eval": cmd_eval}


def build_parser():
    p = argparse.ArgumentParser(prog="robust-features", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="JSON config file")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        s.add_argument("--threads", type=int, default=1, help="BLAS thread count")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = read_config(args.config, args.command, args.seed)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(limits=args.threads):
        try:
            ok = HANDLERS[args.command](cfg, out)
        except ConfigError as exc:
            print(str(exc), file=sys.stderr)
            return 2
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
