"""Command-line entry point: one verb per workbench stage.

Verbs: generate, validate, train, eval, viewpoint, sweep, inspect.
Exit codes: 0 success, 1 domain failure (invalid dataset, failed run),
2 usage error (unknown verb/flag, malformed config).

Config files are JSON.  ``--set key=value`` overrides individual keys with
dotted paths (``--set train.epochs=3 --set model.top_k=4``); values are
parsed as JSON when possible, else kept as strings.  Every command writes a
``run.json`` into its output directory echoing the fully resolved settings,
so a run can be reproduced from that file alone.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import autodiff as ad
from . import dataset as ds
from . import experiments as ex
from .evaluation import evaluate, viewpoint_report, write_roc_csv, write_roc_svg
from .model import CMT, ModelConfig, QueryOnlyModel, load_model
from .training import TrainConfig, TrainingError, train


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config plumbing


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return obj


def _build_config(cls, data: dict, path: str):
    """Strict dataclass construction; unknown keys name their full path."""
    fields = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            raise UsageError(f"unknown config key: {path}.{key}")
    try:
        return cls.from_json(data) if hasattr(cls, "from_json") else cls(**data)
    except (ValueError, ad.ShapeError, TypeError) as exc:
        raise UsageError(f"bad value under {path}: {exc}") from exc


def _parse_set(pairs) -> dict:
    """--set a.b=v flags -> nested dict {a: {b: parsed v}}."""
    tree: dict = {}
    for raw in pairs or ():
        if "=" not in raw:
            raise UsageError(f"--set expects key=value, got {raw!r}")
        key, _, val = raw.partition("=")
        try:
            parsed = json.loads(val)
        except json.JSONDecodeError:
            parsed = val
        node = tree
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise UsageError(f"--set path {key!r} conflicts with an earlier value")
        node[parts[-1]] = parsed
    return tree


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _data_root(arg: str) -> str:
    """Accepts the dataset directory or a path to its manifest.json."""
    if arg.endswith(".json"):
        return os.path.dirname(arg) or "."
    return arg


def _train_configs(ns) -> tuple[ModelConfig, TrainConfig]:
    merged = {"model": {}, "train": {}}
    if getattr(ns, "config", None):
        merged = _merge(merged, _load_json(ns.config))
    merged = _merge(merged, _parse_set(getattr(ns, "set", None)))
    for key in merged:
        if key not in ("model", "train"):
            raise UsageError(f"unknown config key: {key}")
    if getattr(ns, "seed", None) is not None:
        merged["train"]["seed"] = ns.seed
    model_cfg = _build_config(ModelConfig, merged["model"], "model")
    train_cfg = _build_config(TrainConfig, merged["train"], "train")
    return model_cfg, train_cfg


def _write_run_json(out_dir, payload: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# verbs


def _cmd_generate(ns) -> int:
    merged = {}
    if ns.config:
        merged = _load_json(ns.config)
    merged = _merge(merged, _parse_set(ns.set))  # generation keys are flat
    cfg = _build_config(ds.GenConfig, merged, "gen")
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(f"bad value under gen: {exc}") from exc
    _write_run_json(ns.out, {"verb": "generate", "seed": ns.seed, "out": ns.out, "gen": cfg.to_json()})
    manifest = ds.build_dataset(cfg, ns.out, np.random.default_rng(ns.seed))
    n = {s: len(v) for s, v in manifest["samples"].items()}
    print(f"dataset written to {ns.out}: {n}")
    return 0


def _cmd_validate(ns) -> int:
    root = _data_root(ns.data)
    _write_run_json(ns.out, {"verb": "validate", "data": root})
    errors = ds.validate_dataset(root)
    for e in errors:
        print(e, file=sys.stderr)
    print(f"{len(errors)} problem(s) found")
    return 1 if errors else 0


def _cmd_train(ns) -> int:
    root = _data_root(ns.data)
    model_cfg, train_cfg = _train_configs(ns)
    _write_run_json(
        ns.out,
        {
            "verb": "train",
            "data": root,
            "out": ns.out,
            "seed": train_cfg.seed,
            "baseline": ns.baseline,
            "resume": ns.resume,
            "model": model_cfg.to_json(),
            "train": train_cfg.to_json(),
        },
    )
    rng = np.random.default_rng(train_cfg.seed)
    model = QueryOnlyModel(model_cfg, rng) if ns.baseline else CMT(model_cfg, rng)
    result = train(root, model, train_cfg, ns.out, resume_from=ns.resume)
    last = result["history"][-1] if result["history"] else {}
    print(f"trained {result['epochs_run']} epoch(s); final: {last}")
    return 0


def _cmd_eval(ns) -> int:
    root = _data_root(ns.data)
    model = load_model(ns.ckpt)
    views = ns.views if ns.views is not None else 20
    _write_run_json(
        ns.out,
        {"verb": "eval", "data": root, "ckpt": ns.ckpt, "split": ns.split, "views": views, "out": ns.out},
    )
    manifest = ds.load_manifest(root)
    report = evaluate(root, manifest, ns.split, model, n_views=views)
    with open(os.path.join(ns.out, "report.json"), "w") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_roc_csv(os.path.join(ns.out, "roc.csv"), report.roc)
    write_roc_svg(os.path.join(ns.out, "roc.svg"), report.roc)
    print(f"auc={report.auc:.4f} accuracy={report.accuracy:.4f} ap50={report.ap50} n={report.n_samples}")
    return 0


def _cmd_viewpoint(ns) -> int:
    root = _data_root(ns.data)
    model = load_model(ns.ckpt)
    if not isinstance(model, CMT):
        raise UsageError("viewpoint prediction needs a conditional-model checkpoint")
    _write_run_json(
        ns.out, {"verb": "viewpoint", "data": root, "ckpt": ns.ckpt, "split": ns.split, "out": ns.out}
    )
    manifest = ds.load_manifest(root)
    rep = viewpoint_report(root, manifest, ns.split, model)
    with open(os.path.join(ns.out, "viewpoint.json"), "w") as fh:
        json.dump(rep, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"viewpoint top-1 accuracy: {rep['accuracy']:.4f} over {rep['n']} queries")
    return 0


def _cmd_sweep(ns) -> int:
    root = _data_root(ns.data)
    model_cfg, train_cfg = _train_configs(ns)
    _write_run_json(
        ns.out,
        {
            "verb": "sweep",
            "axis": ns.axis,
            "data": root,
            "out": ns.out,
            "seed": train_cfg.seed,
            "model": model_cfg.to_json(),
            "train": train_cfg.to_json(),
        },
    )
    out_csv = os.path.join(ns.out, f"sweep_{ns.axis}.csv")
    rows = ex.SWEEP_AXES[ns.axis](root, out_csv, model_cfg, train_cfg)
    print(f"{len(rows)} cell(s) written to {out_csv}")
    return 0


def _cmd_inspect(ns) -> int:
    _write_run_json(ns.out, {"verb": "inspect", "data": ns.data, "ckpt": ns.ckpt})
    info: dict = {}
    if ns.data:
        root = _data_root(ns.data)
        manifest = ds.load_manifest(root)
        kinds: dict = {}
        for split, samples in manifest["samples"].items():
            anom = sum(1 for s in samples if s["label"])
            info[split] = {"samples": len(samples), "anomalous": anom}
            for s in samples:
                if s["anomaly"]:
                    kinds[s["anomaly"]["kind"]] = kinds.get(s["anomaly"]["kind"], 0) + 1
        info["kinds"] = kinds
        info["shapes"] = len(manifest["shapes"])
        info["config"] = manifest["config"]
    if ns.ckpt:
        state = ad.load_tensors(ns.ckpt)
        info["checkpoint"] = {
            "tensors": len(state),
            "parameters": int(sum(np.asarray(v.data).size for v in state.values())),
        }
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser / dispatch


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmtbench", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("generate", help="build a benchmark dataset")
    g.add_argument("--config", help="JSON file of generation settings")
    g.add_argument("--out", required=True, help="dataset output directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--set", action="append", metavar="KEY=VALUE")

    v = sub.add_parser("validate", help="check an on-disk dataset")
    v.add_argument("--data", required=True, help="dataset dir or manifest.json")
    v.add_argument("--out", default=".")

    t = sub.add_parser("train", help="train the conditional model or the baseline")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help='JSON file with "model" and "train" sections')
    t.add_argument("--seed", type=int)
    t.add_argument("--baseline", action="store_true", help="query-only model, no reference views")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--set", action="append", metavar="KEY=VALUE")

    e = sub.add_parser("eval", help="score a checkpoint on a split")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--views", type=int)
    e.add_argument("--out", required=True)

    w = sub.add_parser("viewpoint", help="predict reference views for a split")
    w.add_argument("--data", required=True)
    w.add_argument("--ckpt", required=True)
    w.add_argument("--split", default="test", choices=("train", "val", "test"))
    w.add_argument("--out", required=True)

    s = sub.add_parser("sweep", help="run one ablation axis")
    s.add_argument("--data", required=True)
    s.add_argument("--axis", required=True, choices=sorted(ex.SWEEP_AXES))
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--set", action="append", metavar="KEY=VALUE")

    i = sub.add_parser("inspect", help="summarize a dataset and/or checkpoint")
    i.add_argument("--data")
    i.add_argument("--ckpt")
    i.add_argument("--out", default=".")
    return p


_COMMANDS = {
    "generate": _cmd_generate,
    "validate": _cmd_validate,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "viewpoint": _cmd_viewpoint,
    "sweep": _cmd_sweep,
    "inspect": _cmd_inspect,
}


def dispatch(argv) -> int:
    try:
        ns = _build_parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    try:
        return _COMMANDS[ns.verb](ns)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ds.DatasetBuildError, TrainingError, ad.ShapeError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
