"""Experiment workflows behind the CLI: train, corrupt, adapt, eval, report.

Every command reads a resolved config dict (see :mod:`ibcsc.config`) and
writes plain CSV / JSON artifacts into a run directory. Nothing written
depends on wall-clock time, so reruns with the same config are
byte-identical.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .adapt import AdaptConfig, adapt_lambda, bn_only_adapt, frozen_param_hash, sample_subset
from .config import ConfigError, dump_config
from .data import (CorruptionSpec, DataError, LabeledDataset, SynthSpec, channel_stats, corrupt_gaussian,
                   load_cifar, normalize, save_dataset, synth_dataset, train_test_split)
from .network import Network, build_network, load_checkpoint, save_checkpoint
from .training import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

TRAJECTORY_CSV = "trajectory.csv"
METRICS_CSV = "metrics.csv"
SUMMARY_JSON = "summary.json"
CHECKPOINT = "checkpoint.npz"
ADAPT_REPORT_CSV = "adapt_report.csv"
ADAPT_SUMMARY_CSV = "adapt_summary.csv"
EVAL_CSV = "eval.csv"
CORRUPTION_CSV = "corruption.csv"

ADAPT_REPORT_COLUMNS = ["noise_level", "subset_size", "epoch", "mean_lambda", "eval_accuracy", "stage"]
ADAPT_SUMMARY_COLUMNS = ["noise_level", "sigma", "subset_size", "eval_size", "frozen_accuracy",
                         "bn_only_accuracy", "adapted_accuracy", "frozen_mean_lambda",
                         "adapted_mean_lambda", "adapted_lambdas", "weights_frozen"]


class ReportError(DataError):
    """Report inputs missing; `missing` lists every absent file."""

    def __init__(self, missing: List[str]):
        super().__init__("missing report inputs:\n  " + "\n  ".join(missing))
        self.missing = missing


def _f(v) -> str:
    return "" if v is None else repr(float(v))


# ---------------------------------------------------------------------------
# data and model

@dataclass
class DataBundle:
    train: LabeledDataset  # clean, [0, 1] pixels
    test: LabeledDataset
    mean: np.ndarray
    std: np.ndarray

    def norm(self, ds: LabeledDataset) -> LabeledDataset:
        return normalize(ds, self.mean, self.std)


def load_data(cfg: dict, stats: Optional[dict] = None) -> DataBundle:
    """Build the clean train/test splits; channel stats come from the train split
    unless `stats` (``{"mean": [...], "std": [...]}``, e.g. from a checkpoint) is given."""
    ds_cfg = cfg["dataset"]
    if ds_cfg["source"] == "synthetic":
        spec = SynthSpec(**ds_cfg["synth"])
        full = synth_dataset(ds_cfg["classes"], ds_cfg["per_class"], spec, noise0=ds_cfg["noise0"],
                             seed=ds_cfg["seed"])
        tr, te = train_test_split(full, ds_cfg["test_fraction"], seed=ds_cfg["split_seed"])
    else:
        tr = load_cifar(ds_cfg["train_path"], ds_cfg["num_classes"])
        te = load_cifar(ds_cfg["test_path"], ds_cfg["num_classes"])
        if len(tr) == 0 or len(te) == 0:
            raise DataError("cifar train and test files must hold at least one record each")
    if stats is None:
        mean, std = channel_stats(tr)
    else:
        mean, std = np.asarray(stats["mean"], dtype=np.float64), np.asarray(stats["std"], dtype=np.float64)
    if np.any(std <= 0):
        raise DataError("training split has a constant channel; cannot normalize")
    return DataBundle(tr, te, mean, std)


def build_model(cfg: dict, bundle: DataBundle) -> Network:
    m = cfg["model"]
    c, h, w = bundle.train.sample_shape
    return build_network(m["preset"], in_channels=c, spatial=(h, w), num_classes=bundle.train.num_classes,
                         layer_kind=m["layer_kind"], steps=m["steps"], lam_init=m["lam_init"],
                         seed=cfg["seed"], blocks_per_stage=m["blocks_per_stage"], threshold=m["threshold"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(seed=cfg["seed"], **cfg["train"])


def adapt_config(cfg: dict, subset_size: int, level: int) -> AdaptConfig:
    a = cfg["adapt"]
    return AdaptConfig(subset_size=subset_size, adapt_epochs=a["adapt_epochs"], adapt_lr0=a["adapt_lr0"],
                       beta=a["beta"], momentum=a["momentum"], nesterov=a["nesterov"],
                       batch_size=a["batch_size"], seed=cfg["seed"] * 100 + level)


def corruption_spec(cfg: dict, level: int) -> CorruptionSpec:
    return CorruptionSpec(level=level, seed=cfg["adapt"]["corruption_seed"] * 100 + level)


def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def load_trained(cfg: dict, checkpoint: str):
    """Checkpoint plus the data bundle normalized with the checkpoint's stats."""
    if not os.path.isfile(checkpoint):
        raise ConfigError("checkpoint", f"file not found: {checkpoint}")
    try:
        net, meta = load_checkpoint(checkpoint, expect_preset=cfg["model"]["preset"])
    except ValueError as exc:
        raise ConfigError("model.preset", str(exc)) from None
    stats = meta.get("extra", {}).get("normalization")
    bundle = load_data(cfg, stats)
    if bundle.test.sample_shape != net.input_shape:
        raise ConfigError("dataset", f"data samples {bundle.test.sample_shape} do not match checkpoint "
                                     f"input {net.input_shape}")
    if bundle.test.num_classes != net.num_classes:
        raise ConfigError("dataset", f"{bundle.test.num_classes} classes vs checkpoint {net.num_classes}")
    return net, bundle


# ---------------------------------------------------------------------------
# commands

def cmd_train(cfg: dict, out_dir: str, on_step=None) -> dict:
    """Train, then write the checkpoint, trajectory/metrics CSVs and a summary.

    `on_step` is forwarded to :func:`ibcsc.training.train`.
    """
    _ensure_dir(out_dir)
    dump_config(cfg, os.path.join(out_dir, "config.train.json"))
    bundle = load_data(cfg)
    net = build_model(cfg, bundle)
    tcfg = train_config(cfg)
    net, traj = train(net, bundle.norm(bundle.train), tcfg, test=bundle.norm(bundle.test), on_step=on_step)
    traj.write_csv(os.path.join(out_dir, TRAJECTORY_CSV))
    traj.write_metrics_csv(os.path.join(out_dir, METRICS_CSV))
    norm = {"mean": bundle.mean.tolist(), "std": bundle.std.tolist()}
    save_checkpoint(os.path.join(out_dir, CHECKPOINT), net, extra={"normalization": norm, "seed": cfg["seed"]})
    summary = {
        "seed": cfg["seed"],
        "preset": cfg["model"]["preset"],
        "layer_kind": cfg["model"]["layer_kind"],
        "beta": tcfg.beta,
        "epochs": tcfg.epochs,
        "final_lambdas": traj.lambdas[-1],
        "final_mean_lambda": float(traj.mean_lambda()[-1]),
        "final_train_acc": traj.train_acc[-1],
        "final_test_acc": traj.test_acc[-1],
        "final_loss": traj.loss[-1],
        "min_step_lambda": min(traj.step_min_lambda),
        "train_size": len(bundle.train),
        "test_size": len(bundle.test),
    }
    with open(os.path.join(out_dir, SUMMARY_JSON), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def cmd_corrupt(cfg: dict, out_dir: str, levels: Optional[Sequence[int]] = None) -> List[dict]:
    """Write the corrupted test pools (``corrupted/level_<l>.npz``, [0, 1] pixels)."""
    levels = list(levels or cfg["adapt"]["levels"])
    _ensure_dir(os.path.join(out_dir, "corrupted"))
    dump_config(cfg, os.path.join(out_dir, "config.corrupt.json"))
    bundle = load_data(cfg)
    rows = []
    for level in levels:
        spec = corruption_spec(cfg, level)
        pool = corrupt_gaussian(bundle.test, spec)
        rel = os.path.join("corrupted", f"level_{level}.npz")
        save_dataset(os.path.join(out_dir, rel), pool)
        rows.append({"noise_level": level, "sigma": spec.sigma, "seed": spec.seed, "size": len(pool), "path": rel})
    with open(os.path.join(out_dir, CORRUPTION_CSV), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["noise_level", "sigma", "seed", "size", "path"])
        for r in rows:
            w.writerow([r["noise_level"], _f(r["sigma"]), r["seed"], r["size"], r["path"]])
    return rows


def cmd_adapt(cfg: dict, out_dir: str, checkpoint: str, levels: Optional[Sequence[int]] = None,
              budgets: Optional[Sequence[int]] = None) -> List[dict]:
    """Sparsity correction over the (noise level x subset size) grid.

    For each cell a seeded subset is drawn from the corrupted test pool; the
    remainder is the evaluation split (or the full pool when
    ``adapt.include_subset_in_eval``). Frozen, BN-only and adapted models are
    scored on the same split.
    """
    levels = list(levels or cfg["adapt"]["levels"])
    budgets = list(budgets or cfg["adapt"]["budgets"])
    net, bundle = load_trained(cfg, checkpoint)
    for b in budgets:
        if b >= len(bundle.test):
            raise DataError(f"adapt budget {b} leaves no evaluation samples in a test pool of {len(bundle.test)}")
    _ensure_dir(out_dir)
    dump_config(cfg, os.path.join(out_dir, "config.adapt.json"))
    frozen_hash = frozen_param_hash(net)
    report_rows, summary_rows = [], []
    for level in levels:
        spec = corruption_spec(cfg, level)
        pool = bundle.norm(corrupt_gaussian(bundle.test, spec))
        for budget in budgets:
            subset, rest = sample_subset(pool, budget, seed=cfg["seed"] * 100 + level)
            eval_set = pool if cfg["adapt"]["include_subset_in_eval"] else rest
            acfg = adapt_config(cfg, budget, level)
            adapted, record = adapt_lambda(net, subset, acfg, eval_set=eval_set)
            for row in record.rows:
                report_rows.append({"noise_level": level, "subset_size": budget, **row})
            summary_rows.append({
                "noise_level": level, "sigma": spec.sigma, "subset_size": budget, "eval_size": len(eval_set),
                "frozen_accuracy": evaluate(net, eval_set),
                "bn_only_accuracy": evaluate(bn_only_adapt(net, subset), eval_set),
                "adapted_accuracy": record.rows[-1]["eval_accuracy"],
                "frozen_mean_lambda": net.mean_lambda(),
                "adapted_mean_lambda": adapted.mean_lambda(),
                "adapted_lambdas": adapted.lambda_vector().tolist(),
                "weights_frozen": frozen_param_hash(adapted) == frozen_hash,
            })
            log.info("level %d budget %d: frozen %.4f bn %.4f adapted %.4f", level, budget,
                     summary_rows[-1]["frozen_accuracy"], summary_rows[-1]["bn_only_accuracy"],
                     summary_rows[-1]["adapted_accuracy"])
    with open(os.path.join(out_dir, ADAPT_REPORT_CSV), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ADAPT_REPORT_COLUMNS)
        for r in report_rows:
            w.writerow([r["noise_level"], r["subset_size"], r["epoch"], _f(r["mean_lambda"]),
                        _f(r["eval_accuracy"]), r["stage"]])
    with open(os.path.join(out_dir, ADAPT_SUMMARY_CSV), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ADAPT_SUMMARY_COLUMNS)
        for r in summary_rows:
            w.writerow([r["noise_level"], _f(r["sigma"]), r["subset_size"], r["eval_size"],
                        _f(r["frozen_accuracy"]), _f(r["bn_only_accuracy"]), _f(r["adapted_accuracy"]),
                        _f(r["frozen_mean_lambda"]), _f(r["adapted_mean_lambda"]),
                        " ".join(_f(v) for v in r["adapted_lambdas"]), str(r["weights_frozen"]).lower()])
    return summary_rows


def cmd_eval(cfg: dict, out_dir: str, checkpoint: str, levels: Optional[Sequence[int]] = None) -> List[dict]:
    """Frozen-model accuracy on the clean test split and each corrupted pool."""
    levels = list(levels if levels is not None else cfg["adapt"]["levels"])
    net, bundle = load_trained(cfg, checkpoint)
    _ensure_dir(out_dir)
    dump_config(cfg, os.path.join(out_dir, "config.eval.json"))
    rows = [{"split": "clean", "noise_level": 0, "sigma": 0.0, "size": len(bundle.test),
             "accuracy": evaluate(net, bundle.norm(bundle.test))}]
    for level in levels:
        spec = corruption_spec(cfg, level)
        pool = bundle.norm(corrupt_gaussian(bundle.test, spec))
        rows.append({"split": "corrupted", "noise_level": level, "sigma": spec.sigma, "size": len(pool),
                     "accuracy": evaluate(net, pool)})
    mean_lam = net.mean_lambda()
    with open(os.path.join(out_dir, EVAL_CSV), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "noise_level", "sigma", "size", "accuracy", "mean_lambda"])
        for r in rows:
            w.writerow([r["split"], r["noise_level"], _f(r["sigma"]), r["size"], _f(r["accuracy"]), _f(mean_lam)])
    return rows


# ---------------------------------------------------------------------------
# report

RUN_FIELDS = ["beta", "preset", "layer_kind", "epochs", "seed", "final_mean_lambda", "final_train_acc",
              "final_test_acc", "final_loss", "final_lambdas"]


def _read_csv(path) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _cell(v) -> str:
    """Stored values as text; floats via repr so they round-trip exactly."""
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return " ".join(_cell(x) for x in v)
    return "" if v is None else str(v)


def _names(run_dirs):
    base = [os.path.basename(os.path.normpath(d)) for d in run_dirs]
    if len(set(base)) == len(base):
        return base
    return [os.path.normpath(d) for d in run_dirs]


def cmd_report(run_dirs: Sequence[str], out_dir: str) -> dict:
    """Aggregate stored run outputs; values are copied, never recomputed.

    A run directory needs ``summary.json`` (train run) and/or
    ``adapt_summary.csv`` (adapt run). Writes ``report_runs.csv``,
    ``report_adapt.csv`` and a text table ``report.txt``.
    """
    if not run_dirs:
        raise ReportError(["<no run directories given>"])
    missing = []
    for d in run_dirs:
        if not os.path.isdir(d):
            missing.append(f"{d} (directory)")
        elif not any(os.path.isfile(os.path.join(d, f)) for f in (SUMMARY_JSON, ADAPT_SUMMARY_CSV)):
            missing += [os.path.join(d, SUMMARY_JSON), os.path.join(d, ADAPT_SUMMARY_CSV)]
    if missing:
        raise ReportError(missing)
    names = _names(run_dirs)
    runs, adapt_rows = [], []
    for name, d in zip(names, run_dirs):
        sp = os.path.join(d, SUMMARY_JSON)
        if os.path.isfile(sp):
            with open(sp) as fh:
                s = json.load(fh)
            runs.append({"run": name, **{k: _cell(s.get(k)) for k in RUN_FIELDS}})
        ap = os.path.join(d, ADAPT_SUMMARY_CSV)
        if os.path.isfile(ap):
            adapt_rows += [{"run": name, **row} for row in _read_csv(ap)]
    _ensure_dir(out_dir)
    with open(os.path.join(out_dir, "report_runs.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, ["run"] + RUN_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(runs)
    with open(os.path.join(out_dir, "report_adapt.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, ["run"] + ADAPT_SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(adapt_rows)
    text = render_report(runs, adapt_rows)
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write(text)
    return {"runs": runs, "adapt": adapt_rows, "text": text}


def _table(header: List[str], rows: List[List[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    fmt = lambda r: "  ".join(str(c).ljust(wd) for c, wd in zip(r, widths)).rstrip()
    sep = "  ".join("-" * wd for wd in widths)
    return "\n".join([fmt(header), sep] + [fmt(r) for r in rows]) + "\n"


def render_report(runs: List[dict], adapt_rows: List[dict]) -> str:
    """Runs side by side (one column per model), then the adaptation grid."""
    parts = []
    if runs:
        fields = [f for f in RUN_FIELDS if f != "final_lambdas"]
        parts.append("Training runs\n")
        parts.append(_table(["field"] + [r["run"] for r in runs], [[f] + [r[f] for r in runs] for f in fields]))
    if adapt_rows:
        cols = ["run", "noise_level", "sigma", "subset_size", "frozen_accuracy", "bn_only_accuracy",
                "adapted_accuracy", "adapted_mean_lambda", "weights_frozen"]
        parts.append("\nAdaptation grid\n")
        parts.append(_table(cols, [[r[c] for c in cols] for r in adapt_rows]))
    return "".join(parts)
