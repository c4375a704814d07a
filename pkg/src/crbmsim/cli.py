"""Command-line entry point: ``crbmsim <command> [options]``.

Commands run one lifecycle stage each (synth, ingest, train, simulate,
baselines, evaluate) and write their outputs, plus a ``manifest.json``, to
``--out``.  On failure an ``error.json`` record is written there instead
and the exit code is nonzero.

Options may also come from the environment: ``CRBMSIM_CONFIG``,
``CRBMSIM_SEED``, ``CRBMSIM_THREADS`` and ``CRBMSIM_OUT`` fill in flags that
are not given on the command line.

The global ``--seed`` is split into per-module seeds with
``sha256(f"{seed}:{module}")`` (first 8 bytes, big endian, modulo 2**63), so
adding a module never shifts the seeds of the others.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np
import pandas as pd
import yaml
from threadpoolctl import threadpool_limits

from . import __version__
from . import baselines as bl
from . import model_io
from . import pipeline as pl
from . import report as rp
from . import schema as sc
from . import simulate as sim
from . import synthgen as sg
from . import training as tr
from .layout import VisibleLayout

log = logging.getLogger("crbmsim")

ENV_PREFIX = "CRBMSIM_"
EXIT_CODES = {"ConfigInvalid": 2, "MissingInput": 3, "SchemaMismatch": 4}


class CliError(Exception):
    pass


class ConfigInvalid(CliError):
    pass


class MissingInput(CliError):
    pass


class SchemaMismatch(CliError):
    pass


def derive_seed(seed: int, module: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{module}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % 2 ** 63


# --- config handling -------------------------------------------------------------

def load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"config file {path} not found")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigInvalid(f"{path}: {e}") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigInvalid(f"{path}: top level must be a mapping")
    return doc


def _check_keys(cfg: dict, allowed, what: str):
    extra = set(cfg) - set(allowed)
    if extra:
        raise ConfigInvalid(f"unknown {what} config keys: {sorted(extra)}")


def _config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _need(path, what: str) -> Path:
    if path is None:
        raise MissingInput(f"{what} is required")
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"{what} {path} not found")
    return path


# --- dataset directory ---------------------------------------------------------------

def save_dataset(ds: pl.Dataset, out: Path, config: dict) -> list[Path]:
    pl.write_store(ds.cohort, out / "store")
    splits = pd.DataFrame({"patient_id": ds.cohort.patient_ids,
                           "split": [ds.splits[p] for p in ds.cohort.patient_ids]})
    splits.to_csv(out / "splits.csv", index=False)
    (out / "encoder.json").write_text(json.dumps(ds.encoder.to_dict(), indent=1, sort_keys=True))
    (out / "dataset.yaml").write_text(yaml.safe_dump(config, sort_keys=True))
    return [out / "store", out / "splits.csv", out / "encoder.json", out / "dataset.yaml"]


def load_dataset(path) -> pl.Dataset:
    path = _need(path, "dataset directory")
    for name in ("store/manifest.json", "splits.csv", "encoder.json"):
        if not (path / name).exists():
            raise MissingInput(f"dataset directory lacks {name}")
    cohort = pl.read_store(path / "store")
    splits = pd.read_csv(path / "splits.csv", dtype=str)
    enc = sc.Encoder.from_dict(cohort.schema, json.loads((path / "encoder.json").read_text()))
    return pl.Dataset(cohort, dict(zip(splits["patient_id"], splits["split"])), enc)


def load_model(path, dataset: pl.Dataset | None = None) -> model_io.ModelBundle:
    bundle = model_io.load(_need(path, "model file"))
    if dataset is not None:
        try:
            bundle.check_schema(dataset.cohort.schema)
        except model_io.SchemaMismatch as e:
            raise SchemaMismatch(str(e)) from None
    if bundle.encoder is None:
        raise ConfigInvalid("model file carries no fitted transforms")
    return bundle


# --- commands ------------------------------------------------------------------------

def cmd_synth(args, cfg, seeds, out: Path):
    _check_keys(cfg, [f.name for f in fields(sg.SynthConfig)], "synth")
    cfg = {"seed": seeds["synthgen"], **cfg}
    try:
        config = sg.SynthConfig(**cfg)
    except (TypeError, ValueError) as e:
        raise ConfigInvalid(str(e)) from None
    events, sidecar = sg.generate_cohort(config)
    paths = [out / "events.csv", out / "sidecar.csv"]
    sg.write_cohort(events, sidecar, *paths)
    return paths, {"config": config.to_dict()}


def cmd_ingest(args, cfg, seeds, out: Path):
    _check_keys(cfg, ("variables", "split_seed", "select"), "dataset")
    events = pl.read_events(_need(args.input, "event file"))
    cfg = {"split_seed": seeds["pipeline"], **cfg}
    config = pl.DatasetConfig(**cfg)
    schema = sc.build_schema()
    try:
        cohort = pl.bucket_events(events, schema)
        ds = pl.assemble_dataset(cohort, config)
    except sc.SchemaError as e:
        raise ConfigInvalid(str(e)) from None
    paths = save_dataset(ds, out, cfg)
    counts = {s: len(ds.ids(s)) for s in pl.SPLITS}
    return paths, {"config": cfg, "schema_hash": ds.cohort.schema.hash(), "split_counts": counts}


def cmd_train(args, cfg, seeds, out: Path):
    try:
        config = tr.TrainingConfig.from_dict({"seed": seeds["training"], **cfg})
    except (TypeError, ValueError) as e:
        raise ConfigInvalid(str(e)) from None
    ds = load_dataset(args.dataset)
    train, val = ds.samples("train", seed=seeds["pairs"]), ds.samples("validation", seed=seeds["pairs"])
    layout = VisibleLayout.for_schema(ds.cohort.schema)

    def checkpoint(epoch, model):
        model_io.save(model_io.ModelBundle(model, ds.cohort.schema, ds.encoder, {"epoch": epoch}),
                      out / "checkpoints" / f"model_{epoch:05d}.npz")

    res = tr.fit(layout, train.v, train.mask, config, val.v, val.mask, checkpoint=checkpoint)
    meta = {"training": config.to_dict(), "n_train_samples": len(train), "epochs_run": config.epochs}
    bundle = model_io.ModelBundle(res.model, ds.cohort.schema, ds.encoder, meta)
    paths = [model_io.save(bundle, out / "model.npz"), tr.write_monitor(res.monitor, out / "monitor.csv")]
    (out / "model.json").write_text(model_io.export_json(bundle))
    paths.append(out / "model.json")
    return paths, {"config": config.to_dict(), "schema_hash": ds.cohort.schema.hash()}


SIM_KEYS = ("mode", "n", "n_draws", "split", "horizon", "write_trajectories")


def _write_long(ens: sim.TrajectoryEnsemble, path: Path, block: int = 25):
    # chunked so that large ensembles never materialize one giant frame
    with path.open("w", newline="") as fh:
        for s in range(0, len(ens.patient_ids), block):
            part = sim.TrajectoryEnsemble(ens.patient_ids[s:s + block], ens.temporal[s:s + block],
                                          ens.static[s:s + block], ens.post_dropout[s:s + block],
                                          ens.provenance, ens.schema)
            part.to_long().to_csv(fh, index=False, header=s == 0, lineterminator="\n")
    return path


def cmd_simulate(args, cfg, seeds, out: Path):
    _check_keys(cfg, SIM_KEYS, "simulate")
    flags = {k: getattr(args, k) for k in SIM_KEYS if getattr(args, k, None) is not None}
    opts = {"mode": "conditional", "n_draws": sim.N_DRAWS, "split": "test", "horizon": pl.N_TIMES - 1,
            "write_trajectories": True, **cfg, **flags}
    if opts["mode"] not in ("conditional", "generative"):
        raise ConfigInvalid(f"mode must be conditional or generative, not {opts['mode']!r}")
    ds = load_dataset(args.dataset) if args.dataset else None
    bundle = load_model(args.model, ds)
    rng = np.random.default_rng(seeds["simulate"])
    if opts["mode"] == "generative":
        n = opts.get("n")
        if n is None:
            if ds is None:
                raise ConfigInvalid("generative mode needs --n or a dataset to size the cohort")
            n = len(ds.ids(opts["split"]))
        ens = sim.simulate_generative(bundle.model, bundle.encoder, int(n), int(opts["horizon"]), rng=rng)
    else:
        if ds is None:
            raise MissingInput("conditional mode needs --dataset for the baselines")
        part = ds.part(opts["split"])
        if opts.get("n") is not None:
            part = part.subset(part.patient_ids[:int(opts["n"])])
        ens = sim.simulate_conditional(bundle.model, bundle.encoder, part.temporal[:, 0], part.static,
                                       part.patient_ids, int(opts["n_draws"]), int(opts["horizon"]), rng=rng)
    paths = [rp.write_csv(ens.summary(), out / "summary.csv")]
    if opts["write_trajectories"]:
        paths.append(_write_long(ens, out / "trajectories.csv"))
    return paths, {"options": opts}


BASELINE_KEYS = ("kinds", "rf_trees", "forecasters")


def cmd_baselines(args, cfg, seeds, out: Path):
    _check_keys(cfg, BASELINE_KEYS, "baselines")
    ds = load_dataset(args.dataset)
    kinds = tuple(cfg.get("kinds", ("ridge", "random_forest", "mlp")))
    bad = set(kinds) - {"ridge", "random_forest", "mlp"}
    if bad:
        raise ConfigInvalid(f"unknown baseline kinds {sorted(bad)}")
    seed = seeds["baselines"] % 2 ** 31
    trees = int(cfg.get("rf_trees", 100))
    adas = bl.adas_change_baselines(ds, kinds, seed=seed, n_trees=trees)
    paths = [rp.write_csv(adas, out / "adas_change_rms.csv")]
    if cfg.get("forecasters", True):
        frames = [bl.cells_to_frame(bl.per_variable_forecasters(ds, seed=seed, n_trees=trees), "rf"),
                  bl.cells_to_frame(bl.global_forecaster(ds, seed=seed, n_trees=trees), "rf_global")]
        paths.append(rp.write_csv(pd.concat(frames, ignore_index=True), out / "forecast_error_ratios.csv"))
    return paths, {"config": cfg}


EVAL_KEYS = ("n_draws", "n_virtual", "rf_trees", "progressor_target")


def cmd_evaluate(args, cfg, seeds, out: Path):
    _check_keys(cfg, EVAL_KEYS, "evaluate")
    ds = load_dataset(args.dataset)
    bundle = load_model(args.model, ds)
    outputs = rp.evaluate_all(bundle.model, bundle.encoder, ds, seed=seeds["evaluate"] % 2 ** 31,
                              n_draws=int(cfg.get("n_draws", sim.N_DRAWS)), n_virtual=cfg.get("n_virtual"),
                              rf_trees=int(cfg.get("rf_trees", 100)),
                              progressor_target=int(cfg.get("progressor_target", rp.PROGRESSOR_TARGET)))
    paths = rp.write_outputs(outputs, out)
    return paths, {"config": cfg, "parity": outputs.parity}


COMMANDS = {"synth": cmd_synth, "ingest": cmd_ingest, "train": cmd_train, "simulate": cmd_simulate,
            "baselines": cmd_baselines, "evaluate": cmd_evaluate}
MODULE_SEEDS = ("synthgen", "pipeline", "pairs", "training", "simulate", "baselines", "evaluate")


# --- argument parsing ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file for the command")
    common.add_argument("--seed", type=int, help="global seed (default 0)")
    common.add_argument("--threads", type=int, help="cap on native thread pools")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="crbmsim", description="Conditional RBM patient trajectory simulator")
    p.add_argument("--version", action="version", version=f"crbmsim {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic cohort")
    s = sub.add_parser("ingest", parents=[common], help="bucket raw events and build datasets")
    s.add_argument("--input", help="raw event CSV (patient_id,variable,day,value)")
    s = sub.add_parser("train", parents=[common], help="train a CRBM")
    s.add_argument("--dataset", help="dataset directory from ingest")
    s = sub.add_parser("simulate", parents=[common], help="simulate trajectories")
    s.add_argument("--model")
    s.add_argument("--dataset")
    s.add_argument("--mode", choices=("conditional", "generative"))
    s.add_argument("--n", type=int, help="virtual patients (generative) or first n patients (conditional)")
    s.add_argument("--n-draws", dest="n_draws", type=int)
    s.add_argument("--split", choices=pl.SPLITS)
    s.add_argument("--horizon", type=int)
    s = sub.add_parser("baselines", parents=[common], help="fit and score supervised comparators")
    s.add_argument("--dataset")
    s = sub.add_parser("evaluate", parents=[common], help="compute every metric table")
    s.add_argument("--model")
    s.add_argument("--dataset")
    return p


def _apply_env(args, environ):
    for name, conv in (("config", str), ("seed", int), ("threads", int), ("out", str)):
        if getattr(args, name) is None and f"{ENV_PREFIX}{name.upper()}" in environ:
            raw = environ[f"{ENV_PREFIX}{name.upper()}"]
            try:
                setattr(args, name, conv(raw))
            except ValueError:
                raise ConfigInvalid(f"{ENV_PREFIX}{name.upper()}={raw!r} is not a valid {name}") from None
    if args.seed is None:
        args.seed = 0
    if args.out is None:
        args.out = f"out_{args.command}"
    return args


def _write_json(path: Path, doc: dict):
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n")


def main(argv=None, environ=None) -> int:
    environ = os.environ if environ is None else environ
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    started = time.time()
    out = None
    try:
        args = _apply_env(args, environ)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "error.json").unlink(missing_ok=True)
        cfg = load_config(args.config)
        seeds = {m: derive_seed(args.seed, m) for m in MODULE_SEEDS}
        with threadpool_limits(limits=args.threads):
            paths, extra = COMMANDS[args.command](args, cfg, seeds, out)
    except Exception as e:
        if isinstance(e, FileNotFoundError):
            kind = "MissingInput"
        else:
            kind = type(e).__name__
        record = {"command": args.command, "error": kind, "message": str(e), "argv": argv}
        if out is not None:
            _write_json(out / "error.json", record)
        print(f"crbmsim {args.command}: {kind}: {e}", file=sys.stderr)
        return EXIT_CODES.get(kind, 1)

    manifest = {
        "command": args.command,
        "argv": argv,
        "tool_version": __version__,
        "schema_version": sc.SCHEMA_VERSION,
        "schema_hash": sc.build_schema().hash(),
        "seed": args.seed,
        "module_seeds": seeds,
        "threads": args.threads,
        "config_file": args.config,
        "config_hash": _config_hash(cfg),
        "inputs": {k: getattr(args, k) for k in ("input", "dataset", "model") if getattr(args, k, None)},
        "outputs": sorted(str(p) for p in paths),
        "started": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        **extra,
    }
    _write_json(out / "manifest.json", manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
