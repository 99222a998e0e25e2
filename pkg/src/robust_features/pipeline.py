"""End-to-end experiments: the robust/non-robust dataset pipeline and the Gaussian theory sweep.

Both entry points take plain dict configs (already schema-validated by the
CLI), return a JSON-serializable report and never record wall-clock times,
so reruns with the same config produce byte-identical reports.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np

from . import __version__, gaussian
from .attacks import AttackConfig, robust_accuracy
from .data import SyntheticSpec, generate, load_idx_dataset, save_dataset
from .distill import DistillConfig, build_nonrobust_dataset, build_robust_dataset
from .metrics import eval_accuracy, halfwidth, transfer_rate
from .models import TrainConfig, save_model, train
from .numerics import RngStream

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``partial`` holds what was computed."""

    def __init__(self, stage, cause, partial):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.partial = partial


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def dumps(obj):
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def run_manifest(cfg, seeds):
    return {"config_hash": config_hash(cfg), "version": __version__, "seeds": seeds}


# ------------------------------------------------------------------ tasks


def load_task(task, seed):
    """(train, test) datasets for a task block of the config."""
    kind = task["kind"]
    if kind == "synthetic":
        spec = dict(task["synthetic"])
        n_test = task.get("n_test", 1000)
        tr = generate(SyntheticSpec(**{**spec, "seed": seed}))
        te = generate(SyntheticSpec(**{**spec, "n": n_test, "seed": seed + 1}))
        return tr, te
    if kind == "idx":
        full = load_idx_dataset(task["images"], task["labels"], task.get("classes"))
        n_train, n_test = task["n_train"], task["n_test"]
        if n_train + n_test > len(full):
            raise ValueError(f"task needs {n_train + n_test} samples, source has {len(full)}")
        tr, te = full.split(n_train, RngStream(seed, 1))
        return tr, te.subset(np.arange(n_test))
    raise ValueError(f"unknown task kind {kind!r}")


def _train_cfg(block, seed, attack=None):
    """TrainConfig from a config block; warmup only matters for adversarial training."""
    return TrainConfig(seed=seed, attack=attack, **block)


def _attack(block, **over):
    return AttackConfig(**{**block, **over})


def _frac(p, n):
    return {"value": p, "halfwidth": halfwidth(p, n)}


# --------------------------------------------------------------- pipeline


STAGES = ("task", "source-models", "robust-datasets", "nonrobust-datasets", "robust-det-control", "transfer")


def run_pipeline(cfg, out_dir=None, save_artifacts=False):
    """Train sources, build the derived datasets, retrain and evaluate.

    Returns (report, ok) where ok is True iff every requested check passed.
    """
    seed = int(cfg["seed"])
    seeds = {"split": seed, "standard": seed + 1, "robust": seed + 2, "distill": seed + 3,
             "nonrobust": seed + 4, "retrain": seed + 5, "transfer": seed + 6}
    report = {"manifest": run_manifest(cfg, seeds), "config": cfg, "stages": {}}
    out = Path(out_dir) if out_dir else None
    arch = cfg["arch"]
    retrain_arch = cfg.get("retrain_arch") or arch
    tblock = cfg["train"]
    atk = _attack(cfg["attack"])
    eval_atk = _attack(cfg["attack"], **cfg.get("eval_attack", {}))
    st = report["stages"]
    ctx = {}

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            st[name] = fn()
        except Exception as exc:  # abort with the stage name, keep what exists
            raise StageError(name, exc, report) from exc
        log.info("stage %s done in %.1fs", name, time.perf_counter() - t0)

    def retrain(ds):
        return train(ds, retrain_arch, _train_cfg(tblock, seeds["retrain"]))

    def acc_pair(model, te):
        return {"clean": _frac(eval_accuracy(model, te), len(te)),
                "robust": _frac(robust_accuracy(model, te, eval_atk), len(te))}

    def s_task():
        tr, te = load_task(cfg["task"], seeds["split"])
        ctx.update(tr=tr, te=te)
        return {"n_train": len(tr), "n_test": len(te), "dim": tr.dim, "n_classes": tr.n_classes,
                "train_hash": tr.content_hash(), "test_hash": te.content_hash()}

    def s_sources():
        tr, te = ctx["tr"], ctx["te"]
        std = train(tr, arch, _train_cfg(tblock, seeds["standard"]))
        rob = train(tr, arch, _train_cfg(tblock, seeds["robust"], atk))
        ctx.update(std=std, rob=rob)
        if out and save_artifacts:
            save_model(std, out / "standard.rfm")
            save_model(rob, out / "robust.rfm")
        return {"standard": {**acc_pair(std, te), "model_hash": std.content_hash()},
                "robust": {**acc_pair(rob, te), "model_hash": rob.content_hash()}}

    def s_robust_sets():
        tr, te = ctx["tr"], ctx["te"]
        dcfg = DistillConfig(seed=seeds["distill"], **cfg["distill"])
        res = {}
        for name, src in (("robust", ctx["rob"]), ("nonrobust", ctx["std"])):
            ds = build_robust_dataset(tr, src, dcfg)
            if out and save_artifacts:
                save_dataset(ds, out / f"D_{name}.rfd")
            m = retrain(ds)
            res[name] = {**acc_pair(m, te),
                         "mean_initial_distance": ds.manifest["mean_initial_distance"],
                         "mean_final_distance": ds.manifest["mean_final_distance"],
                         "dataset_hash": ds.content_hash()}
        return res

    nrf = cfg["nonrobust_attack"]
    nrf_atk = AttackConfig(mode="targeted", clip01=cfg["attack"].get("clip01", False), **nrf)

    def s_nonrobust_sets():
        tr, te = ctx["tr"], ctx["te"]
        res = {}
        for i, mode in enumerate(("random", "deterministic")):
            ds = build_nonrobust_dataset(tr, ctx["std"], nrf_atk, mode, RngStream(seeds["nonrobust"], i))
            if out and save_artifacts:
                save_dataset(ds, out / f"D_{mode}.rfd")
            m = retrain(ds)
            if mode == "deterministic":
                ctx["det"] = ds
            res[mode] = {"accuracy": _frac(eval_accuracy(m, te), len(te)),
                         "accuracy_plus_one": _frac(eval_accuracy(m, te, "plus-one-mod-C"), len(te)),
                         "attack_success": ds.manifest["success_fraction"],
                         "dataset_hash": ds.content_hash()}
        return res

    def s_robust_det():
        tr, te = ctx["tr"], ctx["te"]
        ds = build_nonrobust_dataset(tr, ctx["rob"], nrf_atk, "deterministic", RngStream(seeds["nonrobust"], 2))
        m = retrain(ds)
        return {"accuracy": _frac(eval_accuracy(m, te), len(te)),
                "accuracy_plus_one": _frac(eval_accuracy(m, te, "plus-one-mod-C"), len(te)),
                "attack_success": ds.manifest["success_fraction"]}

    def s_transfer():
        tr, te = ctx["tr"], ctx["te"]
        tcfg = cfg["transfer"]
        archs = tcfg["archs"]
        targets = [train(tr, a, _train_cfg(tblock, seeds["transfer"])) for a in archs]
        det_models = [train(ctx["det"], a, _train_cfg(tblock, seeds["retrain"])) for a in archs]
        ucfg = _attack(cfg["attack"], **tcfg.get("attack", {}))
        rep = transfer_rate(ctx["std"], targets, te, ucfg, targeted=tcfg.get("targeted", False),
                            det_models=det_models, names=archs)
        # the source against itself: exactly 1 by definition of source success
        self_rep = transfer_rate(ctx["std"], [ctx["std"]], te, ucfg, names=["source"])
        return {"report": json.loads(rep.to_json()), "spearman": rep.spearman(),
                "self_transfer": self_rep.entries[0]["transfer_rate"]}

    stage("task", s_task)
    stage("source-models", s_sources)
    if cfg.get("robust_datasets", True):
        stage("robust-datasets", s_robust_sets)
    if cfg.get("nonrobust_datasets", True):
        stage("nonrobust-datasets", s_nonrobust_sets)
        if cfg.get("robust_det_control", True):
            stage("robust-det-control", s_robust_det)
        if cfg.get("transfer"):
            stage("transfer", s_transfer)
    report["checks"] = pipeline_checks(report, cfg.get("checks"))
    ok = all(c["pass"] for c in report["checks"])
    return report, ok


def pipeline_checks(report, names=None):
    """Directional checks on a pipeline report; ``names`` restricts to a subset."""
    st = report["stages"]
    n_classes = st["task"]["n_classes"]
    chance = 1.0 / n_classes
    defs = {}
    src = st.get("source-models")
    if src:
        defs["erm_not_robust"] = (src["standard"]["robust"]["value"], "<", 0.20)
        defs["adversarial_robust"] = (src["robust"]["robust"]["value"], ">=", 0.95)
    rs = st.get("robust-datasets")
    if rs and src:
        defs["robust_dataset_robustness"] = (rs["robust"]["robust"]["value"], ">=",
                                             0.8 * src["robust"]["robust"]["value"])
        defs["nonrobust_control"] = (rs["nonrobust"]["robust"]["value"], "<", 0.05)
        for k in ("robust", "nonrobust"):
            defs[f"inversion_converged_{k}"] = (rs[k]["mean_final_distance"], "<=",
                                                0.1 * rs[k]["mean_initial_distance"])
    ns = st.get("nonrobust-datasets")
    if ns:
        defs["rand_above_3x_chance"] = (ns["random"]["accuracy"]["value"], ">", 3 * chance)
        defs["det_above_3x_chance"] = (ns["deterministic"]["accuracy"]["value"], ">", 3 * chance)
    rd = st.get("robust-det-control")
    if rd:
        defs["robust_det_prefers_permuted"] = (rd["accuracy_plus_one"]["value"], ">", rd["accuracy"]["value"])
    tr = st.get("transfer")
    if tr:
        defs["transfer_spearman_positive"] = (tr["spearman"], ">", 0.0)
        defs["self_transfer_one"] = (tr["self_transfer"], "==", 1.0)
    if names is not None:
        missing = [n for n in names if n not in defs]
        if missing:
            raise ValueError(f"checks not available for this run: {missing}")
        defs = {n: defs[n] for n in names}
    ops = {"<": np.less, "<=": np.less_equal, ">": np.greater, ">=": np.greater_equal, "==": np.equal}
    return [{"name": n, "value": v, "op": op, "threshold": thr, "pass": bool(ops[op](v, thr))}
            for n, (v, op, thr) in defs.items()]


# ----------------------------------------------------------------- theory


def run_theory(cfg):
    """Standard and robust fits over an epsilon grid plus gap / alignment checks.

    Returns (report, sweep_rows, ok).
    """
    mu = np.asarray(cfg["mu_star"], dtype=np.float64)
    ss = np.asarray(cfg["sigma_star"], dtype=np.float64)
    seed = int(cfg["seed"])
    tol = cfg.get("tolerances", {})
    opts = gaussian.RobustFitOptions(**cfg.get("solver", {}))
    c = cfg.get("c_penalty")
    recs, rows, checks = [], [], []
    std = gaussian.GaussianParams(mu, ss)
    for i, eps in enumerate(cfg["epsilons"]):
        try:
            rec = gaussian.theory_record(mu, ss, eps, c=c, n_mc=cfg.get("n_monte_carlo", 100_000),
                                         seed=seed + i, opts=opts)
        except gaussian.SolverError as exc:
            raise gaussian.SolverError(f"theory sweep failed at epsilon={eps}: {exc}",
                                       instance={"mu_star": mu.tolist(), "sigma_star": ss.tolist(),
                                                 "epsilon": eps}, **exc.info) from exc
        recs.append(rec)
        res = rec["residuals"]
        if eps == 0:
            checks.append(("eps0_recovers_mle", rec["sigma_r"] == ss.tolist() and rec["mu_r"] == mu.tolist()))
        else:
            lo, hi = rec["lambda_bounds"]
            checks += [
                (f"mu_recovered[eps={eps}]", res["mu_abs"] <= tol.get("mu", 1e-6)),
                (f"fixed_point[eps={eps}]", res["fixed_point"] <= tol.get("fixed_point", 1e-6)),
                (f"trace_budget[eps={eps}]", res["trace"] <= tol.get("trace", 1e-8)),
                (f"lambda_in_bounds[eps={eps}]", lo <= rec["lambda"] * (1 + 1e-12) and rec["lambda"] <= hi * (1 + 1e-12)),
                (f"alignment_improves[eps={eps}]", rec["kappa_after"] <= rec["kappa_before"] * (1 + 1e-12)),
            ]
        rel = abs(rec["gap_monte_carlo"] / rec["gap_closed_form"] - 1)
        checks.append((f"gap_mc_matches[eps={eps}]", rel <= tol.get("gap_relative", 0.02)))
        rows.append({"epsilon": eps, "lambda": rec["lambda"], "kappa": rec["kappa_after"],
                     **{f"sigma_r_{j}": v for j, v in enumerate(rec["sigma_r"])},
                     **{f"sigma_r_norm_{j}": v for j, v in enumerate(_unit_trace(rec["sigma_r"]))}})
    report = {
        "manifest": run_manifest(cfg, {"monte_carlo": [seed + i for i in range(len(cfg["epsilons"]))]}),
        "config": cfg,
        "standard": {"mu": std.mu.tolist(), "sigma": std.sigma.tolist()},
        "records": recs,
        "checks": [{"name": n, "pass": bool(p)} for n, p in checks],
    }
    return report, rows, all(p for _, p in checks)


def _unit_trace(s):
    """Covariance rescaled to unit trace: how close it is to a multiple of I."""
    s = np.asarray(s)
    return (s / s.sum()).tolist()
