"""Command-line runner: gen-data, train, estimate-weights, oracle, report.

Every command reads one JSON config. Flags override top-level scalar fields
only. Relative paths resolve under ``$GBLEND_OUTPUT_ROOT`` when it is set.

Exit codes: 0 success, 1 runtime error, 2 config error, 3 oracle check failed.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import __version__
from .datagen import ModalitySpec, SyntheticSpec, balance_multilabel, gen_multimodal, load_dataset, save_dataset, split
from .fusion import MultiHeadNet
from .nn import OptimizerSpec
from .ogr import METRIC_KINDS, ogr_between, write_curves_csv
from .oracle import (GRID_STEPS, GradientScenario, QuadraticLandscape, random_correlated_scenario,
                     random_uncorrelated_scenario, taylor_step_check, verify_closed_form)
from .seeding import rng_for
from .trainers import (TrainConfig, TrainData, baseline, ensure_holdout, gb_estimate, offline_gblend,
                       online_gblend)

log = logging.getLogger("gblend")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_ORACLE = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "GBLEND_OUTPUT_ROOT"
SUMMARY_FORMAT = "gblend.summary"
WEIGHTS_FORMAT = "gblend.weights"
SCHEMA_VERSION = 1

TRAIN_MODES = {
    "uni": "uni_modal",
    "naive": "naive_joint",
    "equal": "equal_weights",
    "dropout": "dropout",
    "pretrain": "pretrain_finetune",
    "offline-gblend": None,
    "online-gblend": None,
}
REPORT_COLUMNS = ("run", "mode", "seed", "train_acc", "holdout_acc", "test_acc", "train_test_gap", "final_ogr")


class ConfigError(Exception):
    pass


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# -- config schemas -----------------------------------------------------------------

class ModalityConfig(Strict):
    name: str
    dim: int = Field(ge=1)
    informative_dim: int = Field(ge=0)
    snr: float = Field(1.0, ge=0)
    label_noise: float = Field(0.0, ge=0, lt=1)
    bait_dim: int = Field(0, ge=0)
    bait_strength: float = Field(1.0, ge=0)

    @model_validator(mode="after")
    def _dims(self):
        if self.informative_dim + self.bait_dim > self.dim:
            raise ValueError("informative_dim + bait_dim exceeds dim")
        return self


class SyntheticConfig(Strict):
    class_count: int = Field(ge=2)
    n_samples: int = Field(ge=1)
    modalities: list[ModalityConfig] = Field(min_length=1)
    multi_label: bool = False
    label_rates: Optional[list[float]] = None


class BalanceConfig(Strict):
    min_volume: int = Field(ge=1)
    target_volume: int = Field(ge=1)


class DataConfig(Strict):
    output: str
    seed: int = 0
    synthetic: SyntheticConfig
    split: list[float] = Field(min_length=2, max_length=3)
    balance: Optional[BalanceConfig] = None

    @model_validator(mode="after")
    def _split(self):
        if any(f < 0 for f in self.split) or sum(self.split) > 1.0 + 1e-12:
            raise ValueError(f"split fractions must be nonnegative and sum to at most 1, got {self.split}")
        return self


class ArchitectureConfig(Strict):
    encoder_hidden: list[int] = Field(default_factory=lambda: [64])
    feature_dim: int = Field(32, ge=1)
    fusion_hidden: int = Field(32, ge=1)


class OptimizerConfig(Strict):
    kind: Literal["sgd_momentum", "adagrad", "adam"] = "sgd_momentum"
    lr: float = Field(0.02, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)


class TrainSection(Strict):
    epochs: int = Field(20, ge=1)
    super_epoch: int = Field(5, ge=1)
    warmup: int = Field(10, ge=1)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    batch_size: int = Field(64, ge=1)
    metric_kind: Literal[METRIC_KINDS] = "accuracy"
    holdout_fraction: float = Field(0.1, gt=0, lt=1)
    tprime_fraction: float = Field(0.1, gt=0, lt=1)
    estimate_fraction: float = Field(1.0, gt=0, le=1)
    dropout_rate: float = Field(0.5, ge=0, lt=1)

    @model_validator(mode="after")
    def _lengths(self):
        if self.super_epoch > self.epochs:
            raise ValueError("super_epoch cannot exceed epochs")
        return self


class ExperimentConfig(Strict):
    dataset: str
    output: str
    seed: int = 0
    mode: Literal[tuple(TRAIN_MODES)] = "naive"
    modality: int = Field(0, ge=0)
    checkpoint: Optional[str] = None
    window: Optional[int] = Field(None, ge=1)
    architecture: ArchitectureConfig = Field(default_factory=ArchitectureConfig)
    train: TrainSection = Field(default_factory=TrainSection)


class TaylorConfig(Strict):
    dim: int = Field(8, ge=1)
    eta: float = Field(1e-3, gt=0)


class OracleConfig(Strict):
    output: str
    kind: Literal["uncorrelated", "correlated", "explicit"] = "uncorrelated"
    k: int = Field(3, ge=1, le=4)
    d: int = Field(32, ge=2)
    trials: int = Field(100_000, ge=1)
    seed: int = 0
    count: int = Field(1, ge=1)
    step: float = 0.01
    tol: float = Field(1e-3, ge=0)
    inner: Optional[list[float]] = None
    Sigma: Optional[list[list[float]]] = None
    override_weights: Optional[list[float]] = None
    taylor: Optional[TaylorConfig] = Field(default_factory=TaylorConfig)

    @model_validator(mode="after")
    def _checks(self):
        if not any(abs(self.step - s) < 1e-12 for s in GRID_STEPS):
            raise ValueError(f"step must be one of {GRID_STEPS}")
        if self.kind == "explicit" and (self.inner is None or self.Sigma is None):
            raise ValueError("explicit scenarios need inner and Sigma")
        if self.kind != "explicit" and self.d <= self.k:
            raise ValueError("d must exceed k")
        return self


# -- helpers ----------------------------------------------------------------------------

def resolve(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def load_config(path: str, model: type[BaseModel], overrides: dict) -> BaseModel:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    for key, value in overrides.items():
        if value is not None:
            doc[key] = value
    try:
        return model.model_validate(doc)
    except ValidationError as exc:
        errs = []
        for e in exc.errors():
            field = ".".join(str(p) for p in e["loc"]) or "<root>"
            errs.append(f"{field}: {e['msg']}")
        raise ConfigError("; ".join(errs)) from exc


def dump_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(epochs=t.epochs, super_epoch=t.super_epoch, warmup=t.warmup,
                       optimizer=OptimizerSpec(**t.optimizer.model_dump()), batch_size=t.batch_size,
                       metric_kind=t.metric_kind, holdout_fraction=t.holdout_fraction,
                       tprime_fraction=t.tprime_fraction, estimate_fraction=t.estimate_fraction,
                       dropout_rate=t.dropout_rate, seed=cfg.seed)


def build_dataset(cfg: DataConfig):
    syn = cfg.synthetic
    spec = SyntheticSpec(syn.class_count, syn.n_samples,
                         [ModalitySpec(**m.model_dump()) for m in syn.modalities],
                         cfg.seed, syn.multi_label, syn.label_rates)
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(f"synthetic: {exc}") from exc
    ds = gen_multimodal(spec)
    if cfg.balance is not None:
        ds = balance_multilabel(ds, cfg.balance.min_volume, cfg.balance.target_volume, cfg.seed)
    return split(ds, cfg.split, cfg.seed)


def prepare(cfg: ExperimentConfig, ds=None):
    """Dataset, TrainData, TrainConfig and initial net for an experiment.

    ``ds`` skips loading ``cfg.dataset`` from disk.
    """
    if ds is None:
        ds_dir = resolve(cfg.dataset)
        if not (ds_dir / "manifest.json").exists():
            raise FileNotFoundError(f"no dataset at {ds_dir}")
        ds = load_dataset(ds_dir)
    ds = ensure_holdout(ds, cfg.train.holdout_fraction, cfg.seed)
    tc = train_config(cfg)
    data = TrainData.from_dataset(ds, tc.tprime_fraction, cfg.seed)
    if cfg.modality >= len(ds.features):
        raise ConfigError(f"modality: {cfg.modality} out of range for {len(ds.features)} modalities")
    if cfg.checkpoint:
        net = MultiHeadNet.load(resolve(cfg.checkpoint))
    else:
        arch = cfg.architecture
        net = MultiHeadNet.build([x.shape[1] for x in ds.features], int(ds.meta["class_count"]),
                                 rng_for(cfg.seed, "init"), encoder_hidden=tuple(arch.encoder_hidden),
                                 feature_dim=arch.feature_dim, fusion_hidden=arch.fusion_hidden)
    return ds, data, tc, net


# -- commands ----------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, DataConfig, {"seed": args.seed, "output": args.output})
    ds = build_dataset(cfg)
    out = save_dataset(ds, resolve(cfg.output), {"config": cfg.model_dump()})
    digest = file_digest(out / "manifest.json")
    print(f"dataset {out}: rows={len(ds)} splits={ds.split_sizes()} modalities={ds.modality_names} "
          f"manifest_sha256={digest}")
    return EXIT_OK


def _final_ogr(result, tc: TrainConfig) -> Optional[float]:
    name = result.state.names[result.eval_head]
    curve = result.state.curves[name]
    start = result.schedule[-1][0]
    first = next(r for r in curve if r.epoch == start)
    if first.epoch >= curve[-1].epoch:
        return None
    return ogr_between(first, curve[-1], tc.metric_kind).ogr


def _window_reports(result, tc: TrainConfig) -> list:
    out = []
    bounds = [s for s, _ in result.schedule] + [result.state.epoch]
    for name, curve in result.state.curves.items():
        by_epoch = {r.epoch: r for r in curve}
        for a, b in zip(bounds, bounds[1:]):
            if a in by_epoch and b in by_epoch and a < b:
                rep = ogr_between(by_epoch[a], by_epoch[b], tc.metric_kind)
                out.append({"head": name, "start": a, "end": b, "O": rep.delta_o, "G": rep.delta_g,
                            "ogr": rep.ogr})
    return out


def run_training(cfg: ExperimentConfig, ds=None):
    ds, data, tc, net = prepare(cfg, ds)
    names = ds.modality_names
    if cfg.mode == "offline-gblend":
        result = offline_gblend(net, data, tc, names)
    elif cfg.mode == "online-gblend":
        result = online_gblend(net, data, tc, names)
    else:
        result = baseline(TRAIN_MODES[cfg.mode], net, data, tc, cfg.modality, names)
    return ds, data, tc, result


def cmd_train(args) -> int:
    cfg = load_config(args.config, ExperimentConfig, {"seed": args.seed, "output": args.output,
                                                      "mode": args.mode, "dataset": args.dataset,
                                                      "modality": args.modality})
    ds, data, tc, result = run_training(cfg)
    out = resolve(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    write_curves_csv(out / "curves.csv", result.state.curves, tc.metric_kind)
    result.net.save(out / "checkpoint.json")
    schedule = [{"start_epoch": s, "weights": list(w.weights)} for s, w in result.schedule]
    if result.estimates:
        dump_json(out / "weights.json", {"format": WEIGHTS_FORMAT, "version": SCHEMA_VERSION, "mode": cfg.mode,
                                         "heads": result.state.names, "schedule": schedule,
                                         "estimates": [e.record() for e in result.estimates]})
    m = result.metrics(data)
    summary = {
        "format": SUMMARY_FORMAT,
        "version": SCHEMA_VERSION,
        "gblend_version": __version__,
        "mode": cfg.mode,
        "seed": cfg.seed,
        "eval_head": result.state.names[result.eval_head],
        "metric_kind": tc.metric_kind,
        "metrics": {k.replace("val_", "holdout_"): v for k, v in m.items()},
        "final_ogr": _final_ogr(result, tc),
        "windows": _window_reports(result, tc),
        "schedule": schedule,
        "config": cfg.model_dump(),
    }
    dump_json(out / "summary.json", summary)
    print(f"{cfg.mode} seed={cfg.seed}: " + " ".join(f"{k}={v:.4f}" for k, v in summary["metrics"].items()))
    return EXIT_OK


def cmd_estimate_weights(args) -> int:
    cfg = load_config(args.config, ExperimentConfig, {"seed": args.seed, "output": args.output,
                                                      "dataset": args.dataset, "checkpoint": args.checkpoint})
    ds, data, tc, net = prepare(cfg)
    n = cfg.window or tc.epochs
    est = gb_estimate(net, data, n, tc, tag="cli", names=ds.modality_names)
    out = resolve(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"format": WEIGHTS_FORMAT, "version": SCHEMA_VERSION, "mode": "estimate",
           "heads": [*ds.modality_names, "fused"],
           "schedule": [{"start_epoch": 0, "weights": list(est.weights.weights)}],
           "estimates": [est.record()]}
    dump_json(out / "weights.json", doc)
    print("weights " + " ".join(f"{h}={w:.4f}" for h, w in zip(doc["heads"], est.weights.weights)))
    return EXIT_OK


def _oracle_scenarios(cfg: OracleConfig):
    if cfg.kind == "explicit":
        k = len(cfg.inner)
        rng = rng_for(cfg.seed, "oracle:true-grad")
        try:
            return [GradientScenario(rng.standard_normal(cfg.d), cfg.inner, np.array(cfg.Sigma), cfg.trials, cfg.seed)]
        except ValueError as exc:
            raise ConfigError(f"Sigma: {exc}") from exc
    make = random_uncorrelated_scenario if cfg.kind == "uncorrelated" else random_correlated_scenario
    return [make(cfg.k, cfg.d, cfg.trials, cfg.seed + i) for i in range(cfg.count)]


def cmd_oracle(args) -> int:
    cfg = load_config(args.config, OracleConfig, {"seed": args.seed, "output": args.output,
                                                  "trials": args.trials})
    reports = [verify_closed_form(sc, cfg.step, cfg.tol, cfg.override_weights) for sc in _oracle_scenarios(cfg)]
    doc = {"format": "gblend.oracle", "version": SCHEMA_VERSION, "config": cfg.model_dump(), "scenarios": reports}
    ok = all(r["passed"] for r in reports)
    if cfg.taylor is not None:
        rng = rng_for(cfg.seed, "oracle:taylor")
        dim = cfg.taylor.dim
        B = rng.standard_normal((dim, dim))
        land = QuadraticLandscape(B @ B.T + np.eye(dim), rng.standard_normal(dim), 0.3 * rng.standard_normal(dim))
        doc["taylor"] = taylor_step_check(land, rng.standard_normal(dim), cfg.taylor.eta)
        ok = ok and doc["taylor"]["passed"]
    doc["passed"] = ok
    out = resolve(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(out / "oracle_report.json", doc)
    for i, r in enumerate(reports):
        failed = [name for name, good in r["checks"].items() if not good]
        print(f"scenario {i} k={r['k']}: {'pass' if r['passed'] else 'FAIL ' + ','.join(failed)} "
              f"ogr2={r['ogr2']['correlated']:.5g} grid={r['ogr2']['grid']:.5g}")
    if "taylor" in doc:
        print(f"taylor residual ratio {doc['taylor']['residual_ratio']:.4f}: "
              f"{'pass' if doc['taylor']['passed'] else 'FAIL'}")
    return EXIT_OK if ok else EXIT_ORACLE


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def report_rows(run_dirs) -> list[dict]:
    rows = []
    for d in run_dirs:
        path = resolve(d) / "summary.json"
        if not path.exists():
            raise FileNotFoundError(f"{resolve(d)}: missing summary.json")
        s = json.loads(path.read_text())
        m = s["metrics"]
        rows.append({"run": str(d), "mode": s["mode"], "seed": s["seed"], "train_acc": m.get("train_acc"),
                     "holdout_acc": m.get("holdout_acc"), "test_acc": m.get("test_acc"),
                     "train_test_gap": (m["train_acc"] - m["test_acc"]) if "test_acc" in m else None,
                     "final_ogr": s.get("final_ogr")})
    return rows


def render_table(rows) -> str:
    cells = [list(REPORT_COLUMNS)] + [[_fmt(r[c]) for c in REPORT_COLUMNS] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(REPORT_COLUMNS))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    rows = report_rows(args.runs)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else ("" if v is None else v)) for k, v in r.items()})
    table = render_table(rows)
    if args.output:
        out = resolve(args.output)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(buf.getvalue())
        (out / "report.txt").write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


# -- entry point -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gblend", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate and split a synthetic dataset")
    g.add_argument("config")
    g.add_argument("--seed", type=int)
    g.add_argument("--output")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model (baseline or G-Blend)")
    t.add_argument("config")
    t.add_argument("--mode", choices=list(TRAIN_MODES))
    t.add_argument("--seed", type=int)
    t.add_argument("--dataset")
    t.add_argument("--modality", type=int)
    t.add_argument("--output")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("estimate-weights", help="estimate blend weights from a checkpoint")
    e.add_argument("config")
    e.add_argument("--checkpoint")
    e.add_argument("--seed", type=int)
    e.add_argument("--dataset")
    e.add_argument("--output")
    e.set_defaults(func=cmd_estimate_weights)

    o = sub.add_parser("oracle", help="verify closed-form blends against brute force")
    o.add_argument("config")
    o.add_argument("--seed", type=int)
    o.add_argument("--trials", type=int)
    o.add_argument("--output")
    o.set_defaults(func=cmd_oracle)

    r = sub.add_parser("report", help="tabulate finished runs")
    r.add_argument("runs", nargs="+")
    r.add_argument("--output")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
