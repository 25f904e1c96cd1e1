"""Command-line entry point: ``maria {synth,train,eval,grid,report}``.

Exit codes: 0 success, 2 config/input error, 3 runtime failure or
divergence, 4 infeasible missingness injection.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import DEFAULT_SYNTH, ConfigError, RunConfig, load_config, validate_synth
from .data import (DatasetError, MultimodalDataset, Preprocessor, apply_preprocessor, fit_preprocessor,
                   load_dataset, stratified_splits, synthesize_dataset, write_dataset)
from .evaluation import derive_seed, imputer_label, model_name, run_grid, score_model
from .masking import SCENARIOS, InfeasibleInjection, MissingnessPlan, inject_mcar
from .model import FUSION_MODES, build_model, load_model, save_model
from .report import build_tables, read_records, write_tables
from .training import DivergenceError, train

log = logging.getLogger("maria")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_INFEASIBLE = 0, 2, 3, 4


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serializable: {type(o)}")


def _load_data(cfg: RunConfig) -> MultimodalDataset:
    if cfg.manifest is not None:
        return load_dataset(cfg.manifest)
    s = cfg.synth
    return synthesize_dataset(s["seed"], s["n_samples"], s["modality_widths"], s["class_count"], s["signal"])


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.output_dir = Path(args.out)
    if getattr(args, "fusion", None):
        cfg.fusion = args.fusion
    if getattr(args, "scenario", None):
        cfg.scenario = args.scenario
    if getattr(args, "workers", None):
        cfg.workers = args.workers
    return cfg


def _provenance(cfg: RunConfig) -> dict:
    return {"config": cfg.to_dict(), "config_hash": cfg.hash(), "seed": cfg.seed}


# ---------------------------------------------------------------------- commands


def cmd_synth(spec_path, out_dir, seed: int | None = None) -> Path:
    if spec_path:
        p = Path(spec_path)
        if not p.exists():
            raise ConfigError(f"synth spec not found: {p}")
        try:
            spec = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: invalid JSON ({e})") from None
    else:
        spec = dict(DEFAULT_SYNTH)
    if seed is not None:
        spec["seed"] = seed
    spec = validate_synth(spec)
    try:
        ds = synthesize_dataset(spec["seed"], spec["n_samples"], spec["modality_widths"],
                                spec["class_count"], spec["signal"])
    except DatasetError as e:
        raise ConfigError(str(e)) from None
    manifest = write_dataset(ds, out_dir)
    (Path(out_dir) / "synth_spec.json").write_text(_dump(spec), encoding="utf-8")
    return manifest


def _fold0(cfg: RunConfig, ds: MultimodalDataset):
    splits = stratified_splits(ds, cfg.grid.folds, cfg.grid.val_fraction, derive_seed(cfg.seed, "splits"))
    return splits[0]


def cmd_train(cfg: RunConfig) -> tuple[Path, Path]:
    ds = _load_data(cfg)
    train_idx, val_idx, test_idx = _fold0(cfg, ds)
    prep = fit_preprocessor(ds, train_idx)
    data = apply_preprocessor(prep, ds)
    model = build_model(cfg.fusion, ds.schemas, ds.n_classes, cfg.model, derive_seed(cfg.seed, "model"))
    tcfg = replace(cfg.train, seed=derive_seed(cfg.seed, "train-loop"))
    model, report = train(model, data, (train_idx, val_idx), tcfg)
    test = _inject_test(cfg, ds.subset(test_idx), prep)
    metrics = score_model(model, test)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    extra = {**_provenance(cfg), "preprocessor": prep.to_dict(), "test_indices": test_idx.tolist()}
    ckpt = save_model(model, out / "model.npz", extra)
    rep = out / "train_report.json"
    rep.write_text(_dump({**_provenance(cfg), "report": report.to_dict(), "test_metrics": metrics,
                          "test_scenario": cfg.scenario, "test_rate": cfg.test_rate}), encoding="utf-8")
    return ckpt, rep


def _inject_test(cfg: RunConfig, test: MultimodalDataset, prep: Preprocessor) -> MultimodalDataset:
    plan = MissingnessPlan(cfg.scenario, cfg.test_rate, derive_seed(cfg.seed, "eval", cfg.test_rate), "test")
    return apply_preprocessor(prep, inject_mcar(test, plan))


def cmd_eval(cfg: RunConfig, checkpoint) -> dict:
    if not Path(checkpoint).exists():
        raise ConfigError(f"checkpoint not found: {checkpoint}")
    model, extra = load_model(checkpoint)
    ds = _load_data(cfg)
    prep = Preprocessor.from_dict(extra["preprocessor"])
    test = _inject_test(cfg, ds.subset(extra["test_indices"]), prep)
    result = {**_provenance(cfg), "checkpoint": str(checkpoint), "scenario": cfg.scenario,
              "test_rate": cfg.test_rate, "metrics": score_model(model, test)}
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(_dump(result), encoding="utf-8")
    return result


def cmd_grid(cfg: RunConfig, metrics=("auc", "mcc")) -> tuple[Path, list[Path]]:
    ds = _load_data(cfg)
    grid = run_grid(ds, cfg.grid, cfg.model, cfg.train, cfg.seed, cfg.workers)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [(f, model_name(f), imputer_label(i))
            for f in cfg.grid.fusion_modes for i in cfg.grid.imputers]
    meta = {"type": "meta", **_provenance(cfg), "omega": grid.omega, "aliases": grid.aliases,
            "rows": [list(r) for r in rows]}
    records = out / "grid_records.jsonl"
    with open(records, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(meta, sort_keys=True, default=_jsonable) + "\n")
        for r in grid.records:
            fh.write(json.dumps({"type": "result", **r}, sort_keys=True, default=_jsonable) + "\n")
    tables = write_tables(build_tables(grid.records, rows, metrics), out, _table_header(meta))
    return records, tables


def _table_header(meta: dict) -> str:
    lines = [f"# seed: {meta.get('seed')}  config_hash: {meta.get('config_hash')}"]
    for scenario, alias in sorted(meta.get("aliases", {}).items()):
        if alias:
            om = meta.get("omega", {}).get(scenario, 0.0)
            pairs = ", ".join(f"{k} -> {v}" for k, v in sorted(alias.items()))
            lines.append(f"# {scenario}: pre-existing missing rate {om * 100:.2f}%; collapsed: {pairs}")
    return "\n".join(lines) + "\n"


def cmd_report(records_path, out_dir, metrics=("auc", "mcc")) -> list[Path]:
    if not Path(records_path).exists():
        raise ConfigError(f"record file not found: {records_path}")
    meta, results = read_records(records_path)
    rows = [tuple(r) for r in meta["rows"]] if meta.get("rows") else None
    return write_tables(build_tables(results, rows, metrics), out_dir, _table_header(meta) if meta else "")


# ---------------------------------------------------------------------- argparse


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maria", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset (CSVs, schema, manifest)")
    s.add_argument("--config", help="JSON synthesis spec (defaults used when omitted)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)

    for name, help_ in (("train", "train one model on fold 0 and save a checkpoint"),
                        ("eval", "score a checkpoint on its held-out fold"),
                        ("grid", "run the cross-validated missing-rate grid")):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--config", required=True)
        c.add_argument("--seed", type=int)
        c.add_argument("--out")
        c.add_argument("--fusion", choices=FUSION_MODES)
        c.add_argument("--scenario", choices=SCENARIOS)
        if name == "eval":
            c.add_argument("--checkpoint", required=True)
        if name == "grid":
            c.add_argument("--workers", type=int)
            c.add_argument("--metric", choices=("auc", "mcc", "both"), default="both")

    r = sub.add_parser("report", help="render tables from a grid record file")
    r.add_argument("--records", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--metric", choices=("auc", "mcc", "both"), default="both")
    return p


def _metrics(flag: str) -> tuple[str, ...]:
    return ("auc", "mcc") if flag == "both" else (flag,)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            print(cmd_synth(args.config, args.out, args.seed))
        elif args.command == "report":
            for path in cmd_report(args.records, args.out, _metrics(args.metric)):
                print(path)
        else:
            cfg = _apply_overrides(load_config(args.config), args)
            if args.command == "grid":
                if args.fusion:
                    cfg.grid = replace(cfg.grid, fusion_modes=(args.fusion,))
                if args.scenario:
                    cfg.grid = replace(cfg.grid, scenarios=(args.scenario,))
                records, tables = cmd_grid(cfg, _metrics(args.metric))
                for path in [records, *tables]:
                    print(path)
            elif args.command == "train":
                for path in cmd_train(cfg):
                    print(path)
            else:
                print(json.dumps(cmd_eval(cfg, args.checkpoint)["metrics"], sort_keys=True))
    except (ConfigError, DatasetError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleInjection as e:
        print(f"infeasible injection: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (DivergenceError, RuntimeError, ValueError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
