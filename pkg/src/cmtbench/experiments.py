"""Sweep drivers for the three ablation axes of the benchmark.

Each driver trains one model per cell on an existing dataset and appends one
CSV row per cell carrying the test-split AUC and accuracy, so the axes can be
compared side by side:

  * attention sparsity: k in {1, 4, 16, 64, dense} with dense = every view
    token (training and evaluation use the same view count so the dense cell
    stays dense at test time)
  * view counts: models trained with N_train in {5, 10}, each evaluated with
    N_test in {5, 10, 15, 20}
  * loss ablation: {none, qv, vv, both} alignment-term combinations

Every cell starts from the same parameter initialization (the train config's
seed) so the cells differ only along the swept axis.
"""

from __future__ import annotations

import dataclasses
import os

import numpy as np

from . import dataset as ds
from .evaluation import evaluate
from .model import CMT, ModelConfig
from .training import TrainConfig, train

K_CHOICES = (1, 4, 16, 64, "dense")
VIEW_TRAIN_CHOICES = (5, 10)
VIEW_TEST_CHOICES = (5, 10, 15, 20)
ABLATION_CHOICES = ("none", "qv", "vv", "both")


def _train_cell(root, manifest, model_cfg, train_cfg, work_dir):
    """Train one fresh model; returns it together with its run directory."""
    os.makedirs(work_dir, exist_ok=True)
    model = CMT(model_cfg, np.random.default_rng(train_cfg.seed))
    train(root, model, train_cfg, work_dir)
    return model


def ablation_train_cfg(base: TrainConfig, name: str) -> TrainConfig:
    """The four alignment-loss settings; disabled terms keep zero weight."""
    if name not in ABLATION_CHOICES:
        raise ValueError(f"unknown ablation {name!r}; pick from {ABLATION_CHOICES}")
    return dataclasses.replace(base, use_qv=name in ("qv", "both"), use_vv=name in ("vv", "both"))


def run_k_sweep(root, out_csv, model_cfg: ModelConfig, train_cfg: TrainConfig) -> list[dict]:
    manifest = ds.load_manifest(root)
    cfg = dataclasses.replace(train_cfg, n_test_views=train_cfg.n_train_views)
    dense = cfg.n_train_views * model_cfg.n_patches
    rows = []
    for choice in K_CHOICES:
        k = dense if choice == "dense" else choice
        mcfg = dataclasses.replace(model_cfg, top_k=k)
        work = os.path.join(os.path.dirname(os.path.abspath(out_csv)), f"k{k}")
        model = _train_cell(root, manifest, mcfg, cfg, work)
        report = evaluate(root, manifest, "test", model, n_views=cfg.n_test_views)
        rows.append({"k": k, "auc": report.auc, "accuracy": report.accuracy})
    _write_csv(out_csv, ("k", "auc", "accuracy"), rows)
    return rows


def run_view_sweep(root, out_csv, model_cfg: ModelConfig, train_cfg: TrainConfig) -> list[dict]:
    """Two trainings (one per N_train), each scored at every N_test."""
    manifest = ds.load_manifest(root)
    rows = []
    for n_train in VIEW_TRAIN_CHOICES:
        cfg = dataclasses.replace(train_cfg, n_train_views=n_train, n_test_views=n_train)
        work = os.path.join(os.path.dirname(os.path.abspath(out_csv)), f"views{n_train}")
        model = _train_cell(root, manifest, model_cfg, cfg, work)
        for n_test in VIEW_TEST_CHOICES:
            report = evaluate(root, manifest, "test", model, n_views=n_test)
            rows.append(
                {"n_train": n_train, "n_test": n_test, "auc": report.auc, "accuracy": report.accuracy}
            )
    _write_csv(out_csv, ("n_train", "n_test", "auc", "accuracy"), rows)
    return rows


def run_loss_ablation(root, out_csv, model_cfg: ModelConfig, train_cfg: TrainConfig) -> list[dict]:
    manifest = ds.load_manifest(root)
    rows = []
    for name in ABLATION_CHOICES:
        cfg = ablation_train_cfg(train_cfg, name)
        work = os.path.join(os.path.dirname(os.path.abspath(out_csv)), f"loss_{name}")
        model = _train_cell(root, manifest, model_cfg, cfg, work)
        report = evaluate(root, manifest, "test", model, n_views=cfg.n_test_views)
        rows.append({"config": name, "auc": report.auc, "accuracy": report.accuracy})
    _write_csv(out_csv, ("config", "auc", "accuracy"), rows)
    return rows


def _write_csv(path, header, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(row[h]) if isinstance(row[h], float) else str(row[h]) for h in header) + "\n")


SWEEP_AXES = {
    "k": run_k_sweep,
    "views": run_view_sweep,
    "loss": run_loss_ablation,
}
