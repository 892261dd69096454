import csv
import json
import os
import time

import numpy as np
import pytest

from ibcsc.config import resolve_config
from ibcsc.pipeline import cmd_adapt, cmd_train

# Noise levels spanning the corruption protocol: lowest, middle, highest.
BENCH_LEVELS = [1, 3, 5]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class BenchRun:
    """One training run of the default synthetic benchmark."""

    def __init__(self, out_dir, cfg, step_min, seconds):
        self.dir = str(out_dir)
        self.cfg = cfg
        self.step_min = step_min  # min lambda seen by an independent per-step hook
        self.seconds = seconds
        with open(os.path.join(self.dir, "summary.json")) as fh:
            self.summary = json.load(fh)
        self.metrics = read_csv(os.path.join(self.dir, "metrics.csv"))
        self.trajectory = read_csv(os.path.join(self.dir, "trajectory.csv"))

    def lambdas(self):
        """(epochs, layers) array from the long-format trajectory CSV."""
        epochs = max(int(r["epoch"]) for r in self.trajectory)
        layers = max(int(r["layer_index"]) for r in self.trajectory) + 1
        out = np.zeros((epochs, layers))
        for r in self.trajectory:
            out[int(r["epoch"]) - 1, int(r["layer_index"])] = float(r["lambda"])
        return out

    def train_acc(self):
        return np.array([float(r["train_acc"]) for r in self.metrics])

    def loss(self):
        return np.array([float(r["loss"]) for r in self.metrics])


def _run(tmp_path_factory, name, overrides):
    cfg = resolve_config({}, overrides)
    out = tmp_path_factory.mktemp(name)
    mins = []

    def hook(net, epoch, step):
        mins.append(float(net.lambda_vector().min()))

    t0 = time.perf_counter()
    cmd_train(cfg, str(out), on_step=hook)
    return BenchRun(out, cfg, mins, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def bench_excited(tmp_path_factory):
    """Default benchmark, beta = 0.001."""
    return _run(tmp_path_factory, "bench_beta1e-3", [])


@pytest.fixture(scope="session")
def bench_plain(tmp_path_factory):
    """Same benchmark with beta = 0."""
    return _run(tmp_path_factory, "bench_beta0", ["train.beta=0"])


@pytest.fixture(scope="session")
def bench_adapt(bench_excited):
    """Adaptation of the beta = 0.001 model at BENCH_LEVELS with budget 100."""
    cfg = dict(bench_excited.cfg)
    t0 = time.perf_counter()
    out = os.path.join(bench_excited.dir, "adapt")
    rows = cmd_adapt(cfg, out, os.path.join(bench_excited.dir, "checkpoint.npz"), BENCH_LEVELS, [100])
    return {"rows": rows, "seconds": time.perf_counter() - t0, "dir": out,
            "summary_csv": read_csv(os.path.join(out, "adapt_summary.csv"))}


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
