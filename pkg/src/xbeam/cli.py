"""Command line interface.

Every verb writes its outputs into a run directory together with a
``manifest.json`` recording the verb, its arguments, the resolved
configuration (and its hash), the seeds, the input file digests, the
output file digests and the package versions. ``xbeam replay`` re-runs a
manifest into a fresh run directory; outputs are reproduced bit-exactly
because every random draw is keyed on the recorded seeds.

Scenario keys are exposed as flags of the same name (``--L_max 8``).
Channel and training keys are set with ``--set channel.rician_k_db=3``
or ``--set train.steps=500``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import (ClusteredChannelParams, ScenarioConfig, TrainConfig, config_hash,
                     load_config, parse_overrides, save_config, to_dict)
from .errors import ConfigError, InvalidArgument, XbeamError
from .harness import (SOURCES, build_user_pool, collect_finetune_data, finetune_model,
                      load_pool, save_pool, summarize, train_model)
from .network import Xbm, load_checkpoint, save_checkpoint
from .sweep import (AXES, ENVIRONMENTS, METRICS, environment, read_rows, run_episodes, sweep,
                    write_report, write_rows)

logger = logging.getLogger("xbeam.cli")

MANIFEST = "manifest.json"
MANIFEST_SCHEMA = "xbeam-manifest/1"
VERBS = ("gen-data", "train", "finetune", "eval", "sweep", "report")
# arguments that change how a run executes but never what it produces
EXECUTION_ARGS = ("run_dir", "workers", "log_level", "config", "manifest")


# --------------------------------------------------------------------------
# manifest helpers
# --------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def versions() -> dict:
    return {"xbeam": __version__, "numpy": np.__version__, "torch": torch.__version__,
            "python": platform.python_version()}


def records_from_dict(d: dict):
    """Inverse of :func:`config.to_dict` for the three configuration records."""
    sc = dict(d["ScenarioConfig"])
    sc["ssb_slots"] = tuple(sc["ssb_slots"])
    return (ScenarioConfig(**sc), ClusteredChannelParams(**d["ClusteredChannelParams"]),
            TrainConfig(**d["TrainConfig"]))


def write_manifest(run_dir: Path, verb: str, args: dict, cfg, ch, tc, seeds: dict,
                   inputs: dict, outputs: list[str]) -> dict:
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "command": verb,
        "args": args,
        "config": to_dict(cfg, ch, tc),
        "config_hash": config_hash(cfg, ch, tc),
        "seeds": seeds,
        "inputs": {k: {"path": str(p), "sha256": sha256_file(p)} for k, p in inputs.items()},
        "outputs": {name: sha256_file(run_dir / name) for name in sorted(outputs)},
        "versions": versions(),
    }
    text = json.dumps(manifest, indent=1, sort_keys=True) + "\n"
    (run_dir / MANIFEST).write_text(text, encoding="utf-8")
    return manifest


def _write_history(path: Path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "ssb_loss", "csi_loss", "grad_norm", "lr", "rejected"])
        for i, d in enumerate(history):
            w.writerow([i, repr(d.loss), repr(d.ssb_loss), repr(d.csi_loss), repr(d.grad_norm),
                        repr(d.lr), int(d.rejected)])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _parse_values(axis: str, text: str) -> list:
    """``4,16,64`` for scalar axes, ``16x4,32x8`` for pair axes, ``A,B`` for environments."""
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise InvalidArgument("--values is empty")
    try:
        if axis in ("N_CSI_U", "B_g_L_csi"):
            return [tuple(int(v) for v in t.lower().split("x")) for t in items]
        if axis == "environment":
            return items
        return [int(t) for t in items]
    except ValueError as exc:
        raise InvalidArgument(f"bad --values for axis {axis}: {text!r}") from exc


# --------------------------------------------------------------------------
# verbs
# --------------------------------------------------------------------------

def _load_model(path, cfg: ScenarioConfig, tc: TrainConfig) -> Xbm:
    model = load_checkpoint(path, cfg=cfg)
    model.train_cfg = tc
    return model


def cmd_gen_data(a: dict, cfg, ch, tc, run_dir: Path, workers: int):
    n = a["users"] if a["users"] is not None else tc.dataset_users
    env_ch = environment(ch, a["env"])
    pool = build_user_pool(cfg, env_ch, n, first_id=a["first_id"])
    save_pool(run_dir / "dataset.xbmd", pool, {"env": a["env"], "first_id": a["first_id"],
                                                "config_hash": config_hash(cfg, env_ch)})
    return ["dataset.xbmd"], {"first_user_id": a["first_id"], "users": n}, {}


def cmd_train(a: dict, cfg, ch, tc, run_dir: Path, workers: int):
    seed = tc.seed if a["seed"] is None else a["seed"]
    steps = tc.steps if a["steps"] is None else a["steps"]
    inputs = {}
    if a["dataset"]:
        pool, _ = load_pool(a["dataset"])
        if (pool.nx, pool.ny) != (cfg.nx_phys, cfg.ny_phys):
            raise InvalidArgument(f"dataset array {pool.nx}x{pool.ny} does not match the "
                                  f"configured {cfg.nx_phys}x{cfg.ny_phys}")
        inputs["dataset"] = a["dataset"]
    else:
        pool = build_user_pool(cfg, environment(ch, a["env"]), tc.dataset_users)
    model = Xbm(cfg, tc, seed=seed)
    t0 = time.time()
    history = train_model(model, pool, steps=steps, seed=seed, log_every=a["log_every"])
    logger.info("trained %d steps in %.1f s", len(history), time.time() - t0)
    save_checkpoint(run_dir / "model.ckpt", model, {"seed": seed})
    _write_history(run_dir / "history.csv", history)
    return ["model.ckpt", "history.csv"], {"train": seed, "steps": steps}, inputs


def cmd_finetune(a: dict, cfg, ch, tc, run_dir: Path, workers: int):
    seed = tc.seed if a["seed"] is None else a["seed"]
    steps = tc.finetune_steps if a["steps"] is None else a["steps"]
    model = _load_model(a["checkpoint"], cfg, tc)
    torch.manual_seed(seed)
    env_ch = environment(ch, a["env"])
    seeds = range(a["first_episode"], a["first_episode"] + a["episodes"])
    data = collect_finetune_data(cfg, env_ch, model, seeds)
    history = finetune_model(model, data, steps, seed=seed)
    save_checkpoint(run_dir / "model.ckpt", model, {"seed": seed, "finetuned": True})
    _write_history(run_dir / "history.csv", history)
    seeds_rec = {"finetune": seed, "first_episode": a["first_episode"],
                 "episodes": a["episodes"], "steps": steps}
    return ["model.ckpt", "history.csv"], seeds_rec, {"checkpoint": a["checkpoint"]}


def _maybe_model(a: dict, cfg, tc):
    if a["source"] == "dft":
        return None, {}
    if not a["checkpoint"]:
        raise InvalidArgument(f"source {a['source']!r} needs --checkpoint")
    return _load_model(a["checkpoint"], cfg, tc), {"checkpoint": a["checkpoint"]}


def cmd_eval(a: dict, cfg, ch, tc, run_dir: Path, workers: int):
    model, inputs = _maybe_model(a, cfg, tc)
    seeds = range(a["seed"], a["seed"] + a["episodes"])
    rows = run_episodes(cfg, environment(ch, a["env"]), a["source"], seeds, model, workers)
    for i, r in enumerate(rows):
        r.update(point="eval", episode=i, env=a["env"], nx=cfg.nx_phys, ny=cfg.ny_phys,
                 L_max=cfg.L_max, N_CSI=cfg.N_CSI, B_g=cfg.B_g, L_csi=cfg.L_csi)
    write_rows(run_dir / "episodes.csv", rows)
    _write_json(run_dir / "summary.json",
                {m: summarize([r[m] for r in rows]) for m in METRICS})
    return ["episodes.csv", "summary.json"], {"first_episode": a["seed"],
                                              "episodes": a["episodes"]}, inputs


def cmd_sweep(a: dict, cfg, ch, tc, run_dir: Path, workers: int):
    model, inputs = _maybe_model(a, cfg, tc)
    values = _parse_values(a["axis"], a["values"])
    rows, summaries = sweep(cfg, environment(ch, a["env"]), a["axis"], values, a["source"],
                            model, a["episodes"], a["seed"], workers)
    write_rows(run_dir / "sweep.csv", rows)
    _write_json(run_dir / "summary.json", summaries)
    return ["sweep.csv", "summary.json"], {"first_episode": a["seed"],
                                           "episodes": a["episodes"]}, inputs


def cmd_report(a: dict, cfg, ch, tc, run_dir: Path, workers: int):
    rows, inputs = [], {}
    for i, path in enumerate(a["inputs"]):
        rows.extend(read_rows(path))
        inputs[f"input{i}"] = path
    write_report(rows, run_dir)
    return ["report.json", "cdf.csv"], {}, inputs


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "finetune": cmd_finetune,
            "eval": cmd_eval, "sweep": cmd_sweep, "report": cmd_report}


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _common_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("run")
    g.add_argument("--config", help="INI configuration file (default: $XBM_CONFIG)")
    g.add_argument("--run-dir", dest="run_dir", required=True, help="output directory")
    g.add_argument("--workers", type=int, default=1, help="episode worker processes")
    g.add_argument("--log-level", dest="log_level", default="INFO")
    g.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override a channel/train/scenario key")
    s = p.add_argument_group("scenario keys")
    for f in dataclasses.fields(ScenarioConfig):
        s.add_argument(f"--{f.name}", dest=f"scenario.{f.name}", metavar="VALUE", default=None)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xbeam", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"xbeam {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common_parser()
    env_help = f"channel environment {ENVIRONMENTS}"

    p = sub.add_parser("gen-data", parents=[common], help="generate a training user pool")
    p.add_argument("--users", type=int, default=None, help="default: train.dataset_users")
    p.add_argument("--first-id", dest="first_id", type=int, default=0)
    p.add_argument("--env", default="A", choices=ENVIRONMENTS, help=env_help)

    p = sub.add_parser("train", parents=[common], help="supervised training")
    p.add_argument("--dataset", default=None, help="user pool from gen-data (else generated)")
    p.add_argument("--steps", type=int, default=None, help="default: train.steps")
    p.add_argument("--seed", type=int, default=None, help="default: train.seed")
    p.add_argument("--env", default="A", choices=ENVIRONMENTS, help=env_help)
    p.add_argument("--log-every", dest="log_every", type=int, default=100)

    p = sub.add_parser("finetune", parents=[common],
                       help="fine-tune on reconstructed CSI only")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--env", default="B", choices=ENVIRONMENTS, help=env_help)
    p.add_argument("--episodes", type=int, default=64, help="episodes of reported CSI")
    p.add_argument("--first-episode", dest="first_episode", type=int, default=0)
    p.add_argument("--steps", type=int, default=None, help="default: train.finetune_steps")
    p.add_argument("--seed", type=int, default=None, help="default: train.seed")

    for name, helptext in (("eval", "evaluate a codebook source"),
                           ("sweep", "sweep one evaluation axis")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--source", default="dft", choices=SOURCES)
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--episodes", type=int, default=200)
        p.add_argument("--seed", type=int, default=0, help="first episode seed")
        p.add_argument("--env", default="A", choices=ENVIRONMENTS, help=env_help)
        if name == "sweep":
            p.add_argument("--axis", required=True, choices=AXES)
            p.add_argument("--values", required=True,
                           help="comma list; pairs as 16x4 for N_CSI_U and B_g_L_csi")

    p = sub.add_parser("report", parents=[common], help="CDF and heatmap data from CSVs")
    p.add_argument("inputs", nargs="*", help="episodes.csv or sweep.csv files")

    p = sub.add_parser("replay", help="re-run a manifest into a new run directory")
    p.add_argument("manifest")
    p.add_argument("--run-dir", dest="run_dir", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--log-level", dest="log_level", default="INFO")
    return parser


def resolve_config(ns: dict):
    """Configuration file (or ``$XBM_CONFIG``) plus flag overrides."""
    cfg, ch, tc = load_config(ns.get("config"))
    records = {"scenario": cfg, "channel": ch, "train": tc}
    pending: dict[str, dict[str, str]] = {k: {} for k in records}
    for key, value in ns.items():
        if key.startswith("scenario.") and value is not None:
            pending["scenario"][key.split(".", 1)[1]] = value
    for item in ns.get("overrides", []):
        head, sep, value = item.partition("=")
        section, dot, key = head.partition(".")
        if not sep or not dot or section not in records:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE with SECTION in "
                              f"{sorted(records)}, got {item!r}")
        pending[section][key] = value
    for section, pairs in pending.items():
        if pairs:
            rec = records[section]
            try:
                records[section] = dataclasses.replace(rec, **parse_overrides(type(rec), pairs))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{section}]: {exc}") from exc
    return records["scenario"], records["channel"], records["train"]


def execute(verb: str, args: dict, cfg, ch, tc, run_dir, workers: int = 1) -> dict:
    """Run a verb with resolved configuration; returns the written manifest."""
    if verb not in COMMANDS:
        raise InvalidArgument(f"unknown command {verb!r}")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)
    t0 = time.time()
    outputs, seeds, inputs = COMMANDS[verb](args, cfg, ch, tc, run_dir, workers)
    save_config(run_dir / "config.ini", cfg, ch, tc)
    outputs = list(outputs) + ["config.ini"]
    manifest = write_manifest(run_dir, verb, args, cfg, ch, tc, seeds, inputs, outputs)
    logger.info("%s finished in %.1f s; outputs in %s", verb, time.time() - t0, run_dir)
    return manifest


def replay(manifest_path, run_dir, workers: int = 1) -> dict:
    """Re-run a recorded command; input files must still match their digests."""
    m = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    if m.get("schema") != MANIFEST_SCHEMA:
        raise InvalidArgument(f"{manifest_path} is not an xbeam manifest")
    for name, rec in m["inputs"].items():
        if sha256_file(rec["path"]) != rec["sha256"]:
            raise InvalidArgument(f"input {name} ({rec['path']}) changed since the recorded run")
    cfg, ch, tc = records_from_dict(m["config"])
    return execute(m["command"], m["args"], cfg, ch, tc, run_dir, workers)


def main(argv=None) -> int:
    ns = vars(build_parser().parse_args(argv))
    logging.basicConfig(level=getattr(logging, str(ns["log_level"]).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if ns["command"] == "replay":
            replay(ns["manifest"], ns["run_dir"], ns["workers"])
            return 0
        cfg, ch, tc = resolve_config(ns)
        args = {k: v for k, v in ns.items()
                if k not in EXECUTION_ARGS and k not in ("command", "overrides")
                and not k.startswith("scenario.")}
        execute(ns["command"], args, cfg, ch, tc, ns["run_dir"], ns["workers"])
    except (XbeamError, OSError) as exc:
        logger.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
