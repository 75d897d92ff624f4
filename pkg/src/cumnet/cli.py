"""Config-driven experiment runner.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .complexity import TRAIN_MULTIPLIER, network_mac, training_complexity, zero_aware_mac
from .curriculum import (CurriculumPlan, MorphDirective, StagePlan, StageReport, TrainConfig, apply_morphs,
                         run_cumulative, split_dataset)
from .data import Dataset, ingest_cifar, ingest_idx, load_digits_dataset, synth_blobs, train_test_split
from .engine import build_vgg, load_checkpoint, reinitialize, save_checkpoint
from .errors import ConfigError, CumnetError, DataParseError, NumericError
from .morph import expand_output, verify_preservation
from .prune import PruneConfig, nonzero_parameter_count, prune_filters
from .robustness import (EnsembleSpec, attack_table, detection_curves, eval_ablation, eval_gaussian_noise, fgsm)
from .svg import write_line_chart

log = logging.getLogger("cumnet")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "runs/default",
    "data": {
        "source": "digits",              # digits | idx | cifar | blobs
        "test_fraction": 0.5,
        "class_order": None,
        "train_images": None, "train_labels": None, "test_images": None, "test_labels": None,
        "cifar_train": [], "cifar_test": [],
        "blobs": {"classes": 10, "samples_per_class": 100, "dims": 16, "separation": 4.0, "spread": 1.0},
    },
    "model": {"cfg": [8, "M", 16, "M"], "hidden": [], "batch_norm": True},
    "train": {"epochs": 40, "batch_size": 32, "lr": 0.01, "momentum": 0.9, "weight_decay": 5e-4,
              "lr_milestones": [], "lr_gamma": 0.1, "patience": 3, "min_delta": 0.002},
    "curriculum": {"stage_classes": [5, 10], "stages": None, "expand_scale": 0.01},
    "baseline": True,
    "prune": {"enabled": True, "R": 0.5, "scope": "layer", "keep_zero_mask": True, "zero_next_input": False},
    "robustness": {
        "enabled": True,
        "sigmas": [0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3],
        "fractions": [0.0, 0.125, 0.25, 0.375, 0.5],
        "ablation_trials": 5,
        "eps": [0.0, 0.005, 0.01, 0.02, 0.05, 0.1],
        "deltas": [round(0.1 * i, 1) for i in range(11)],
        "detect_eps": 0.05,
        "weighting": "accuracy",
    },
    "complexity": {"train_multiplier": TRAIN_MULTIPLIER},
}

# command-line flag -> config key path
FLAG_KEYS = {
    "seed": ("seed",), "output_dir": ("output_dir",), "epochs": ("train", "epochs"),
    "lr": ("train", "lr"), "batch_size": ("train", "batch_size"), "baseline": ("baseline",),
    "source": ("data", "source"),
}


# ---------------------------------------------------------------- config

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()


def _get(cfg, path):
    for k in path:
        if not isinstance(cfg, dict) or k not in cfg:
            return None
        cfg = cfg[k]
    return cfg


def _set(cfg, path, value):
    for k in path[:-1]:
        cfg = cfg.setdefault(k, {})
    cfg[path[-1]] = value


def load_config(path=None, flags: dict | None = None) -> dict:
    """Defaults, then flags, then the config file (which wins on conflict, with a warning)."""
    user = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        try:
            user = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
    cfg = _merge(DEFAULT_CONFIG, {})
    for name, value in (flags or {}).items():
        if value is None:
            continue
        key = FLAG_KEYS[name]
        in_file = _get(user, key)
        if in_file is not None and in_file != value:
            log.warning("--%s=%r conflicts with config %s=%r; using the config file value",
                        name.replace("_", "-"), value, ".".join(key), in_file)
        _set(cfg, key, value)
    cfg = _merge(cfg, user)
    validate_config(cfg)
    return cfg


def _grid(cfg, key, lo, hi):
    vals = cfg["robustness"][key]
    if not isinstance(vals, list) or not vals:
        raise ConfigError(f"robustness.{key} must be a nonempty list")
    for v in vals:
        if not isinstance(v, (int, float)) or not lo <= v <= hi:
            raise ConfigError(f"robustness.{key} value {v!r} outside [{lo}, {hi}]")


def validate_config(cfg: dict) -> None:
    if not isinstance(cfg.get("seed"), int) or isinstance(cfg.get("seed"), bool):
        raise ConfigError("an integer seed is required")
    d = cfg["data"]
    src = d["source"]
    if src == "idx":
        for k in ("train_images", "train_labels"):
            if not d.get(k):
                raise ConfigError(f"data.{k} is required for IDX input")
        files = [d[k] for k in ("train_images", "train_labels", "test_images", "test_labels") if d.get(k)]
        if bool(d.get("test_images")) != bool(d.get("test_labels")):
            raise ConfigError("data.test_images and data.test_labels go together")
    elif src == "cifar":
        files = list(d.get("cifar_train") or []) + list(d.get("cifar_test") or [])
        if not d.get("cifar_train"):
            raise ConfigError("data.cifar_train lists no files")
    elif src in ("digits", "blobs"):
        files = []
    else:
        raise ConfigError(f"unknown data source {src!r}")
    for f in files:
        if not Path(f).is_file():
            raise ConfigError(f"referenced data file {f} does not exist")
    if not 0 < float(d["test_fraction"]) < 1:
        raise ConfigError("data.test_fraction must lie in (0, 1)")
    sc = cfg["curriculum"]["stage_classes"]
    if not isinstance(sc, list) or not sc:
        raise ConfigError("curriculum.stage_classes must be a nonempty list")
    stages = cfg["curriculum"].get("stages")
    if stages is not None and len(stages) != len(sc):
        raise ConfigError("curriculum.stages needs one entry per stage class count")
    _build(TrainConfig, cfg["train"], "train")
    if cfg["prune"].get("enabled"):
        _prune_config(cfg["prune"])
    r = cfg["robustness"]
    _grid(cfg, "sigmas", 0.0, math.inf)
    _grid(cfg, "fractions", 0.0, 1.0)
    _grid(cfg, "eps", 0.0, math.inf)
    _grid(cfg, "deltas", 0.0, 1.0)
    if not isinstance(r["ablation_trials"], int) or r["ablation_trials"] < 1:
        raise ConfigError("robustness.ablation_trials must be a positive integer")
    if r["weighting"] not in ("accuracy", "uniform"):
        raise ConfigError("robustness.weighting must be 'accuracy' or 'uniform'")
    if not float(r["detect_eps"]) >= 0:
        raise ConfigError("robustness.detect_eps must be non-negative")
    if int(cfg["complexity"]["train_multiplier"]) < 1:
        raise ConfigError("complexity.train_multiplier must be positive")


def _build(cls, kwargs: dict, what: str):
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad {what} settings: {exc}") from None


def _prune_config(p: dict) -> PruneConfig:
    return PruneConfig(float(p["R"]), p.get("scope", "global"), bool(p.get("keep_zero_mask", False)),
                       bool(p.get("zero_next_input", False)))


# ---------------------------------------------------------------- building blocks

def load_data(cfg: dict) -> tuple[Dataset, Dataset]:
    d, seed = cfg["data"], cfg["seed"]
    src = d["source"]
    test = None
    if src == "digits":
        full = load_digits_dataset()
    elif src == "blobs":
        b = d["blobs"]
        full = synth_blobs(int(b["classes"]), int(b["samples_per_class"]), int(b["dims"]),
                           float(b["separation"]), seed, float(b.get("spread", 1.0)))
    elif src == "idx":
        full = ingest_idx(d["train_images"], d["train_labels"])
        if d.get("test_images"):
            test = ingest_idx(d["test_images"], d["test_labels"], num_classes=full.num_classes)
    else:
        full = ingest_cifar(d["cifar_train"])
        if d.get("cifar_test"):
            test = ingest_cifar(d["cifar_test"], num_classes=full.num_classes)
    if test is None:
        return train_test_split(full, float(d["test_fraction"]), seed=seed)
    return full, test


def make_split(cfg: dict, train: Dataset, test: Dataset):
    return split_dataset(train, cfg["curriculum"]["stage_classes"], test, cfg["data"].get("class_order"))


def make_plan(cfg: dict) -> CurriculumPlan:
    cur, seed = cfg["curriculum"], cfg["seed"]
    sc = cur["stage_classes"]
    stages_cfg = cur.get("stages")
    if stages_cfg is None:
        stages_cfg = [{}] + [{"morphs": [{"op": "deepen", "site": 0}]} for _ in sc[1:]]
    stages = []
    for k, sc_entry in zip(sc, stages_cfg):
        tc = _build(TrainConfig, {"seed": seed, **_merge(cfg["train"], sc_entry.get("train", {}))}, "train")
        morphs = [_build(MorphDirective, m, "morph") for m in sc_entry.get("morphs", [])]
        prune = _prune_config(sc_entry["prune"]) if sc_entry.get("prune") else None
        stages.append(StagePlan(int(k), morphs, tc, prune, bool(sc_entry.get("keep_zero_mask", False))))
    plan = CurriculumPlan(stages)
    plan.validate()
    return plan


def pruned_plan(cfg: dict, plan: CurriculumPlan) -> CurriculumPlan:
    """Same schedule with pruning (and zero-mask freezing) before every expansion."""
    pc = _prune_config(cfg["prune"])
    stages = [plan.stages[0]] + [StagePlan(s.classes, s.morphs, s.train, pc, pc.keep_zero_mask)
                                 for s in plan.stages[1:]]
    return CurriculumPlan(stages)


def base_network(cfg: dict, input_shape, classes: int):
    m = cfg["model"]
    return build_vgg(m["cfg"], input_shape, classes, seed=cfg["seed"], hidden=tuple(m.get("hidden", ())),
                     batch_norm=bool(m.get("batch_norm", True)))


def stage_costs(cfg: dict, plan: CurriculumPlan) -> list[int]:
    mult = int(cfg["complexity"]["train_multiplier"])
    return [mult * s.train.batch_size for s in plan.stages]


# ---------------------------------------------------------------- outputs

class Outputs:
    """Writes files under the output directory and remembers every one of them."""

    def __init__(self, root):
        self.root = Path(root)
        self.files: list[dict] = []

    def path(self, rel) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def register(self, p, kind: str) -> Path:
        p = Path(p)
        rel = str(p.relative_to(self.root)) if p.is_absolute() or str(p).startswith(str(self.root)) else str(p)
        digest = hashlib.sha256(p.read_bytes()).hexdigest()
        self.files = [f for f in self.files if f["path"] != rel]
        self.files.append({"path": rel, "kind": kind, "sha256": digest})
        return p

    def csv(self, rel, header, rows) -> Path:
        p = self.path(rel)
        with open(p, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(header)
            for r in rows:
                w.writerow(["" if r.get(h) is None else _fmt(r.get(h)) for h in header])
        return self.register(p, "csv")

    def json(self, rel, obj, kind="json") -> Path:
        p = self.path(rel)
        p.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")
        return self.register(p, kind)

    def svg(self, rel, series, **kw) -> Path:
        return self.register(write_line_chart(self.path(rel), series, **kw), "svg")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


STAGE_COLUMNS = ["stage", "accuracy", "handoff_accuracy", "iterations", "macs", "wall_time"]
TABLE1_COLUMNS = ["run", "stage", "classes", "accuracy", "iterations", "macs", "m"]


def write_stage_outputs(out: Outputs, tag: str, reports: list[StageReport], costs: list[int]) -> None:
    out.csv(f"stages_{tag}.csv", STAGE_COLUMNS, [r.row() for r in reports])
    out.json(f"reports/{tag}.json", {"costs": costs, "reports": [r.to_json() for r in reports]},
             kind="stage_reports")
    for r in reports:
        if r.checkpoint_path:
            out.register(r.checkpoint_path, "checkpoint")


def _reports_from_json(obj) -> tuple[list[StageReport], list[int]]:
    return [StageReport(**r) for r in obj["reports"]], [int(c) for c in obj["costs"]]


def complexity_rows(cfg: dict, runs: dict) -> tuple[list[dict], dict]:
    """Complexity summary rows from ``{tag: (reports, costs)}``; ratios are against ``baseline``."""
    rows, totals = [], {}
    for tag, (reports, costs) in runs.items():
        rep = training_complexity(reports, cost_per_iteration=costs)
        totals[tag] = rep.total
        for r, s in zip(reports, rep.stages):
            rows.append({"run": tag, "stage": r.stage, "classes": r.classes, "accuracy": r.accuracy,
                         "iterations": r.iterations, "macs": r.macs, "m": s.product})
        rows.append({"run": f"{tag}_total", "accuracy": reports[-1].accuracy, "m": rep.total})
    summary = {"m": totals}
    if "baseline" in totals:
        for tag, total in totals.items():
            if tag != "baseline" and totals["baseline"]:
                ratio = total / totals["baseline"]
                summary[f"ratio_{tag}"] = ratio
                rows.append({"run": f"ratio_{tag}_vs_baseline", "m": ratio})
    return rows, summary


# ---------------------------------------------------------------- steps

def step_split(cfg, out: Outputs, ctx: dict) -> dict:
    train, test = load_data(cfg)
    split = make_split(cfg, train, test)
    ctx.update(train=train, test=test, split=split)
    rows, prev = [], 0
    for i, k in enumerate(split.stage_classes):
        rows.append({"stage": i + 1, "classes": k, "new_classes": k - prev,
                     "train_samples": len(split.train_indices[i]), "test_samples": len(split.test_indices[i])})
        prev = k
    out.csv("split.csv", ["stage", "classes", "new_classes", "train_samples", "test_samples"], rows)
    return {"stages": rows, "label_histogram": train.label_histogram()}


def step_train(cfg, out: Outputs, ctx: dict) -> dict:
    split = ctx["split"]
    plan = make_plan(cfg)
    plan.validate(split)
    net0 = base_network(cfg, split.train.input_shape, split.stage_classes[0])
    kw = {"expand_scale": float(cfg["curriculum"]["expand_scale"])}
    reports, final = run_cumulative(plan, split, net0, out_dir=out.root / "checkpoints", tag="cumulative", **kw)
    write_stage_outputs(out, "cumulative", reports, stage_costs(cfg, plan))
    ctx["runs"] = {"cumulative": (reports, stage_costs(cfg, plan))}
    ctx.update(plan=plan, cumulative=reports, final=final)
    result = {"cumulative": [r.row() for r in reports]}
    if cfg["baseline"]:
        base = reinitialize(final, cfg["seed"] + 1)
        single = split.final_only()
        bplan = CurriculumPlan([StagePlan(single.stage_classes[0], train=plan.stages[-1].train)])
        breports, bnet = run_cumulative(bplan, single, base, out_dir=out.root / "checkpoints", tag="baseline")
        write_stage_outputs(out, "baseline", breports, stage_costs(cfg, bplan))
        ctx["runs"]["baseline"] = (breports, stage_costs(cfg, bplan))
        ctx.update(baseline=bnet)
        result["baseline"] = [r.row() for r in breports]
    return result


def step_prune(cfg, out: Outputs, ctx: dict) -> dict:
    split, plan = ctx["split"], ctx["plan"]
    pplan = pruned_plan(cfg, plan)
    net0 = base_network(cfg, split.train.input_shape, split.stage_classes[0])
    reports, final = run_cumulative(pplan, split, net0, out_dir=out.root / "checkpoints", tag="pruned",
                                    expand_scale=float(cfg["curriculum"]["expand_scale"]))
    write_stage_outputs(out, "pruned", reports, stage_costs(cfg, pplan))
    ctx["runs"]["pruned"] = (reports, stage_costs(cfg, pplan))
    rows = []
    for tag, net in (("cumulative", ctx["final"]), ("pruned", final)):
        nz, total = nonzero_parameter_count(net, conv_only=True)
        rows.append({"variant": tag, "accuracy": ctx["runs"][tag][0][-1].accuracy, "macs": network_mac(net),
                     "zero_aware_macs": zero_aware_mac(net), "nonzero_conv_params": nz, "conv_params": total})
    out.csv("prune.csv", ["variant", "accuracy", "macs", "zero_aware_macs", "nonzero_conv_params",
                          "conv_params"], rows)
    return {"variants": rows}


def step_report(cfg, out: Outputs, ctx: dict) -> dict:
    runs = ctx.get("runs")
    if runs is None:
        runs = {}
        for tag in ("cumulative", "baseline", "pruned"):
            p = out.root / "reports" / f"{tag}.json"
            if p.is_file():
                runs[tag] = _reports_from_json(json.loads(p.read_text(encoding="utf-8")))
        if not runs:
            raise ConfigError(f"no stage reports under {out.root / 'reports'}; run `train` first")
    rows, summary = complexity_rows(cfg, runs)
    out.csv("table1.csv", TABLE1_COLUMNS, rows)
    return summary


def _final_test(ctx):
    split = ctx["split"]
    return split.stage_data(split.num_stages - 1)


def step_robustness(cfg, out: Outputs, ctx: dict) -> dict:
    r, seed = cfg["robustness"], cfg["seed"]
    train, test = _final_test(ctx)
    final = ctx["final"]
    models = {"cumulative": final}
    if ctx.get("baseline") is not None:
        models["baseline"] = ctx["baseline"]
    result = {}

    noise = {k: eval_gaussian_noise(m, test, r["sigmas"], seed=seed) for k, m in models.items()}
    rows = [{"sigma": s, **{f"acc_{k}": v[i] for k, v in noise.items()}} for i, s in enumerate(r["sigmas"])]
    out.csv("noise.csv", ["sigma"] + [f"acc_{k}" for k in models], rows)
    out.svg("noise.svg", {k: (r["sigmas"], v) for k, v in noise.items()}, title="Gaussian input noise",
            xlabel="sigma", ylabel="accuracy")
    result["noise"] = rows

    if final.conv_layers():
        abl = {k: eval_ablation(m, test, r["fractions"], trials=r["ablation_trials"], seed=seed)
               for k, m in models.items()}
        rows = [{"fraction": f, **{f"acc_{k}": v[i] for k, v in abl.items()}} for i, f in enumerate(r["fractions"])]
        out.csv("ablation.csv", ["fraction"] + [f"acc_{k}" for k in models], rows)
        out.svg("ablation.svg", {k: (r["fractions"], v) for k, v in abl.items()}, title="Feature-map ablation",
                xlabel="fraction zeroed", ylabel="accuracy")
        result["ablation"] = rows

    stage_nets = [load_checkpoint(rep.checkpoint_path) for rep in ctx["cumulative"][:-1]] + [final]
    spec = EnsembleSpec.from_models(stage_nets, validation=train, weighting=r["weighting"])
    result["ensemble_weights"] = spec.weights
    rows = attack_table(spec, ctx.get("baseline"), test, r["eps"])
    cols = ["eps", "acc_mi", "acc_nomi"] + (["acc_baseline"] if "baseline" in models else [])
    out.csv("attack.csv", cols, rows)
    out.svg("attack.svg", {c: ([row["eps"] for row in rows], [row[c] for row in rows]) for c in cols[1:]},
            title="FGSM", xlabel="eps", ylabel="accuracy")
    result["attack"] = rows

    adv = Dataset(fgsm(final, test.x, test.y, float(r["detect_eps"]), test.value_range), test.y,
                  test.num_classes, test.value_range)
    curves = detection_curves(spec, test, adv, r["deltas"])
    rows = []
    for (d, tm, fm), (_, tn, fn) in zip(curves["mi"].points, curves["final_only"].points):
        rows.append({"delta": d, "tnr_mi": tm, "fnr_mi": fm, "tnr_nomi": tn, "fnr_nomi": fn})
    out.csv("detection.csv", ["delta", "tnr_mi", "fnr_mi", "tnr_nomi", "fnr_nomi"], rows)
    out.svg("detection.svg", {"with MI": ([p[2] for p in curves["mi"].points], [p[1] for p in curves["mi"].points]),
                              "final only": ([p[2] for p in curves["final_only"].points],
                                             [p[1] for p in curves["final_only"].points])},
            title="No-decision detection", xlabel="FNR", ylabel="TNR")
    result["detection"] = {k: {"n_negatives": c.n_negatives, "n_positives": c.n_positives,
                               "population": c.population} for k, c in curves.items()}
    return result


def planned_table(cfg: dict) -> list[dict]:
    """Stage table for a dry run: classes, morphs and the planned network cost per stage."""
    train, test = load_data(cfg)
    split = make_split(cfg, train, test)
    plan = make_plan(cfg)
    plan.validate(split)
    net = base_network(cfg, train.input_shape, split.stage_classes[0])
    rows = []
    for i, s in enumerate(plan.stages):
        if i:
            net = apply_morphs(net, s.morphs)
            net, _ = expand_output(net, s.classes - net.num_classes)
        rows.append({"stage": i + 1, "classes": s.classes, "train_samples": len(split.train_indices[i]),
                     "test_samples": len(split.test_indices[i]),
                     "morphs": ";".join(f"{m.op}@{m.site}" for m in s.morphs),
                     "prune": "" if s.prune is None else f"R={s.prune.R}", "macs": network_mac(net),
                     "epochs_cap": s.train.epochs})
    return rows


# ---------------------------------------------------------------- composite run

def _error_code(exc: BaseException) -> int:
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (OSError, DataParseError)):
        return EXIT_IO
    return EXIT_CONFIG


def run(cfg: dict, dry_run: bool = False) -> tuple[dict, int]:
    """Execute the whole pipeline and write ``manifest.json``; returns (manifest, exit code)."""
    if dry_run:
        table = planned_table(cfg)
        return {"dry_run": True, "config_hash": config_hash(cfg), "planned_stages": table}, EXIT_OK
    out = Outputs(cfg["output_dir"])
    out.root.mkdir(parents=True, exist_ok=True)
    manifest = {"tool": f"cumnet {__version__}", "config_hash": config_hash(cfg), "config": cfg,
                "seeds": {"global": cfg["seed"], "baseline_init": cfg["seed"] + 1}, "steps": [], "files": out.files}
    out.json("config.json", cfg, kind="config")
    steps = [("split", step_split, []), ("train", step_train, ["split"])]
    if cfg["prune"].get("enabled"):
        steps.append(("prune", step_prune, ["train"]))
    steps.append(("report", step_report, ["train"]))
    if cfg["robustness"].get("enabled"):
        steps.append(("robustness", step_robustness, ["train"]))
    ctx: dict = {}
    status: dict[str, str] = {}
    code = EXIT_OK
    for name, fn, deps in steps:
        entry = {"step": name}
        if any(status.get(d) != "ok" for d in deps):
            entry["status"] = "skipped"
        else:
            t0 = time.perf_counter()
            try:
                entry["result"] = fn(cfg, out, ctx)
                entry["status"] = "ok"
            except (CumnetError, OSError, ValueError) as exc:
                entry.update(status="failed", error=f"{type(exc).__name__}: {exc}")
                done = getattr(exc, "completed_reports", None)
                if done:
                    entry["completed_stages"] = [r.row() for r in done]
                    for r in done:
                        if r.checkpoint_path:
                            out.register(r.checkpoint_path, "checkpoint")
                code = code or _error_code(exc)
                log.error("step %s failed: %s", name, exc)
            entry["wall_time"] = time.perf_counter() - t0
        status[name] = entry["status"]
        manifest["steps"].append(entry)
    manifest["files"] = out.files
    p = out.path("manifest.json")
    p.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")
    return manifest, code


# ---------------------------------------------------------------- argparse

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def _add_training(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--source", choices=["digits", "idx", "cifar", "blobs"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cumnet", description="Cumulative training with function-preserving "
                                     "network growth, pruning and robustness evaluation.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="write the class-incremental split table")
    _add_common(p)
    _add_training(p)

    p = sub.add_parser("train", help="cumulative run (and scratch baseline)")
    _add_common(p)
    _add_training(p)
    p.add_argument("--baseline", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--dry-run", action="store_true")

    p = sub.add_parser("expand", help="apply one morph to a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("out")
    p.add_argument("--op", choices=["deepen", "widen", "expand_output"], required=True)
    p.add_argument("--site", type=int, default=0, help="weighted-layer ordinal (deepen/widen)")
    p.add_argument("--width", type=int)
    p.add_argument("--classes", type=int, help="new total class count (expand_output)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("prune", help="L1-prune a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("out")
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--scope", choices=["global", "layer"], default="layer")
    p.add_argument("--keep-zero-mask", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")

    for name, helptext in (("eval", "noise and ablation sweeps for one checkpoint"),
                           ("attack", "FGSM table for an ensemble of checkpoints"),
                           ("detect", "TNR/FNR curves for an ensemble of checkpoints")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        p.add_argument("checkpoints", nargs="+", help="stage checkpoints, smallest first")
        if name == "attack":
            p.add_argument("--baseline-checkpoint")

    p = sub.add_parser("report", help="complexity summary CSV (table1.csv) from saved stage reports")
    _add_common(p)

    p = sub.add_parser("run", help="split, train, prune, report and robustness in one go")
    _add_common(p)
    _add_training(p)
    p.add_argument("--baseline", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--dry-run", action="store_true")
    return parser


def _flags(args) -> dict:
    return {k: getattr(args, k) for k in FLAG_KEYS if getattr(args, k, None) is not None}


def _print_rows(rows, file=None):
    file = file or sys.stdout
    if not rows:
        return
    cols = list(rows[0])
    w = csv.writer(file, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in cols])


def _data_for_checkpoints(cfg, paths):
    """Load checkpoints and the (train, test) data restricted to the final checkpoint's classes."""
    train, test = load_data(cfg)
    nets = [load_checkpoint(p) for p in paths]
    k, total = nets[-1].num_classes, train.num_classes
    schedule = [k] if k == total else [k, total]
    split = split_dataset(train, schedule, test, cfg["data"].get("class_order"))
    return nets, split.stage_data(0)


def dispatch(args) -> int:
    cmd = args.command
    if cmd == "expand":
        net = load_checkpoint(args.checkpoint)
        if args.op == "expand_output":
            if args.classes is None or args.classes <= net.num_classes:
                raise ConfigError("--classes must exceed the current class count")
            new, _ = expand_output(net, args.classes - net.num_classes, seed=args.seed)
        else:
            if args.op == "widen" and args.width is None:
                raise ConfigError("widen needs --width")
            new = apply_morphs(net, [MorphDirective(args.op, args.site, args.width, args.seed)])
        cid = save_checkpoint(new, args.out)
        print(json.dumps({"checkpoint": args.out, "id": cid, "preservation_error": verify_preservation(net, new)}))
        return EXIT_OK
    if cmd == "prune":
        net = load_checkpoint(args.checkpoint)
        new, rep = prune_filters(net, PruneConfig(args.ratio, args.scope, args.keep_zero_mask))
        cid = save_checkpoint(new, args.out)
        print(json.dumps({"checkpoint": args.out, "id": cid, "pruned_filters": len(rep.pruned),
                          "nonzero_conv_params": rep.nonzero_conv_params, "conv_params": rep.total_conv_params,
                          "macs": network_mac(new), "zero_aware_macs": zero_aware_mac(new)}))
        return EXIT_OK

    cfg = load_config(args.config, _flags(args))
    out = Outputs(cfg["output_dir"])
    if cmd == "run":
        manifest, code = run(cfg, dry_run=args.dry_run)
        if args.dry_run:
            _print_rows(manifest["planned_stages"])
        else:
            for step in manifest["steps"]:
                print(f"{step['step']}: {step['status']}")
            summary = next((s.get("result") for s in manifest["steps"] if s["step"] == "report"), None) or {}
            for k, v in summary.items():
                if k.startswith("ratio_"):
                    print(f"{k} = {v:.4f}")
            print(f"manifest: {out.root / 'manifest.json'}")
        return code
    if cmd == "train" and args.dry_run:
        _print_rows(planned_table(cfg))
        return EXIT_OK

    ctx: dict = {}
    if cmd == "split":
        _print_rows(step_split(cfg, out, ctx)["stages"])
    elif cmd == "train":
        step_split(cfg, out, ctx)
        res = step_train(cfg, out, ctx)
        step_report(cfg, out, ctx)
        for tag, rows in res.items():
            print(tag)
            _print_rows(rows)
    elif cmd == "report":
        summary = step_report(cfg, out, ctx)
        print(json.dumps(summary, indent=2))
    elif cmd == "eval":
        nets, (_, test) = _data_for_checkpoints(cfg, args.checkpoints)
        r = cfg["robustness"]
        rows = [{"sigma": s, "accuracy": a} for s, a in
                zip(r["sigmas"], eval_gaussian_noise(nets[-1], test, r["sigmas"], seed=cfg["seed"]))]
        out.csv("eval_noise.csv", ["sigma", "accuracy"], rows)
        _print_rows(rows)
        if nets[-1].conv_layers():
            rows = [{"fraction": f, "accuracy": a} for f, a in
                    zip(r["fractions"], eval_ablation(nets[-1], test, r["fractions"], r["ablation_trials"],
                                                      seed=cfg["seed"]))]
            out.csv("eval_ablation.csv", ["fraction", "accuracy"], rows)
            _print_rows(rows)
    elif cmd in ("attack", "detect"):
        nets, (train, test) = _data_for_checkpoints(cfg, args.checkpoints)
        r = cfg["robustness"]
        spec = EnsembleSpec.from_models(nets, validation=train, weighting=r["weighting"])
        if cmd == "attack":
            base = load_checkpoint(args.baseline_checkpoint) if args.baseline_checkpoint else None
            rows = attack_table(spec, base, test, r["eps"])
            cols = ["eps", "acc_mi", "acc_nomi"] + (["acc_baseline"] if base is not None else [])
            out.csv("attack.csv", cols, rows)
        else:
            adv = Dataset(fgsm(nets[-1], test.x, test.y, float(r["detect_eps"]), test.value_range), test.y,
                          test.num_classes, test.value_range)
            curves = detection_curves(spec, test, adv, r["deltas"])
            rows = [{"delta": a[0], "tnr_mi": a[1], "fnr_mi": a[2], "tnr_nomi": b[1], "fnr_nomi": b[2]}
                    for a, b in zip(curves["mi"].points, curves["final_only"].points)]
            out.csv("detection.csv", ["delta", "tnr_mi", "fnr_mi", "tnr_nomi", "fnr_nomi"], rows)
            out.svg("detection.svg", {"with MI": ([x["fnr_mi"] for x in rows], [x["tnr_mi"] for x in rows]),
                                      "final only": ([x["fnr_nomi"] for x in rows], [x["tnr_nomi"] for x in rows])},
                    title="No-decision detection", xlabel="FNR", ylabel="TNR")
        _print_rows(rows)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DataParseError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (CumnetError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
