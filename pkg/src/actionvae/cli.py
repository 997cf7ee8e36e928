"""Command-line entry point for the full pipeline.

Exit codes: 0 success, 1 usage error, 2 data/model error, 3 training
divergence.  All errors are written to stderr as a single line with the
stable prefix ``actionvae: error: <Category>:``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import __version__
from .errors import (CheckpointError, ConfigError, ContractViolation,
                     DataFormatError, DegeneratePosterior,
                     InitializationError, TrainingDivergence)
from .evaluation import (ActionPrediction, Prediction, cluster_agreement,
                         effective_actions, export_plots, holdout_elbo,
                         mean_fan_spread, min_ade, predict)
from .gaussmath import sigma_points
from .model import ModelState
from .synthdata import (FamilySpec, GenConfig, generate_dataset,
                        read_dataset, write_dataset)
from .training import (TrainConfig, build_from_config, init_mixture,
                       load_checkpoint, pretrain_vae, save_checkpoint,
                       train_base, train_dual, train_unified,
                       write_training_log)

LOCK_NAME = ".actionvae.lock"
_ERROR_PREFIX = "actionvae: error:"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems via exit code 1."""

    def error(self, message):
        raise _UsageError(message)


def load_config(path):
    """Read the JSON config file into (TrainConfig, GenConfig or None)."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: "
                          f"{exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    try:
        train = TrainConfig(**raw.get("train", {}))
    except TypeError as exc:
        raise ConfigError(f"bad train section: {exc}") from exc
    gen = None
    if "generator" in raw:
        g = dict(raw["generator"])
        try:
            fams = [FamilySpec(f["name"], f["weight"],
                               dict(f.get("params", {})))
                    for f in g.pop("families")]
            gen = GenConfig(families=fams, **g)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad generator section: {exc}") from exc
    return train, gen


def write_manifest(out_dir, command, args, config: TrainConfig):
    manifest = {
        "command": command,
        "config_path": os.path.abspath(args.config),
        "seed": config.seed,
        "inputs": {name: os.path.abspath(v) for name, v in vars(args).items()
                   if name in ("data", "holdout", "checkpoint")
                   and v is not None},
        "output_dir": os.path.abspath(out_dir),
        "tool_version": __version__,
        "config_digest": config.digest(),
    }
    with open(os.path.join(out_dir, f"manifest-{command}.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


class _OutputDir:
    """Creates the output directory and holds its lock while running."""

    def __init__(self, path):
        self.path = path
        self.lock = os.path.join(path, LOCK_NAME)

    def __enter__(self):
        os.makedirs(self.path, exist_ok=True)
        try:
            fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            os.close(fd)
        except FileExistsError:
            raise ContractViolation(
                f"output directory {self.path} is locked by another run "
                f"(remove {self.lock} if stale)") from None
        return self.path

    def __exit__(self, *exc_info):
        try:
            os.remove(self.lock)
        except FileNotFoundError:
            pass
        return False


def _apply_seed(config: TrainConfig, args) -> TrainConfig:
    if args.seed is not None:
        config = TrainConfig(**{**asdict(config), "seed": args.seed})
    return config


def _load_model(args, config: TrainConfig, required_stages=None):
    try:
        m, ck_config, stage, _ = load_checkpoint(args.checkpoint,
                                                 expected_config=config)
    except FileNotFoundError:
        raise CheckpointError(
            f"checkpoint {args.checkpoint} not found") from None
    if required_stages is not None and stage not in required_stages:
        raise CheckpointError(
            f"checkpoint {args.checkpoint} holds stage {stage!r}; this "
            f"command requires one of {sorted(required_stages)}")
    return m, stage


# ---------------------------------------------------------------------------
# Subcommands.
# ---------------------------------------------------------------------------

def cmd_generate_data(args):
    train_cfg, gen_cfg = load_config(args.config)
    train_cfg = _apply_seed(train_cfg, args)
    if gen_cfg is None:
        raise ConfigError("config has no generator section")
    dataset = generate_dataset(gen_cfg, train_cfg.seed)
    # Deterministic 90/10 train/holdout split.
    rng = np.random.default_rng([train_cfg.seed, 11])
    perm = rng.permutation(len(dataset))
    cut = max(1, int(0.9 * len(dataset)))
    with _OutputDir(args.out) as out:
        write_dataset(dataset.subset(perm[:cut]),
                      os.path.join(out, "train.jsonl"))
        write_dataset(dataset.subset(perm[cut:]),
                      os.path.join(out, "holdout.jsonl"))
        write_manifest(out, "generate-data", args, train_cfg)
    return 0


def cmd_pretrain(args):
    config = _apply_seed(load_config(args.config)[0], args)
    data = read_dataset(args.data).training_view()
    m = build_from_config(config)
    logs = pretrain_vae(m, data, config)
    with _OutputDir(args.out) as out:
        save_checkpoint(m, config, "pretrain",
                        os.path.join(out, "model.ckpt"))
        write_training_log(logs, os.path.join(out, "training_log.csv"))
        write_manifest(out, "pretrain", args, config)
    return 0


def cmd_init_clusters(args):
    config = _apply_seed(load_config(args.config)[0], args)
    data = read_dataset(args.data).training_view()
    m, _ = _load_model(args, config, required_stages={"pretrain"})
    init_mixture(m, data, config)
    with _OutputDir(args.out) as out:
        save_checkpoint(m, config, "init", os.path.join(out, "model.ckpt"))
        write_manifest(out, "init-clusters", args, config)
    return 0


_STAGE_PREREQS = {"base": {"init"}, "dual": {"base"},
                  "unified": {"init", "base"}}
_STAGE_RUNNERS = {"base": train_base, "dual": train_dual,
                  "unified": train_unified}


def cmd_train(args):
    config = _apply_seed(load_config(args.config)[0], args)
    data = read_dataset(args.data).training_view()
    m, _ = _load_model(args, config,
                       required_stages=_STAGE_PREREQS[args.stage])
    logs = _STAGE_RUNNERS[args.stage](m, data, config)
    with _OutputDir(args.out) as out:
        save_checkpoint(m, config, args.stage,
                        os.path.join(out, "model.ckpt"))
        write_training_log(logs, os.path.join(out, "training_log.csv"))
        write_manifest(out, "train", args, config)
    return 0


def cmd_predict(args):
    config = _apply_seed(load_config(args.config)[0], args)
    m, _ = _load_model(args, config)
    dataset = read_dataset(args.data)
    if not 0 <= args.index < len(dataset):
        raise ContractViolation(
            f"--index {args.index} out of range for {len(dataset)} samples")
    sample = dataset.samples[args.index]
    pred = predict(m, sample.scenario.values, mode=args.mode,
                   threshold=args.threshold)
    with _OutputDir(args.out) as out:
        export_plots(pred, os.path.join(out, "prediction.csv"),
                     os.path.join(out, "prediction.svg"),
                     ground_truth=sample.trajectory.waypoints)
        write_manifest(out, "predict", args, config)
    return 0


def cmd_eval(args):
    config = _apply_seed(load_config(args.config)[0], args)
    m, stage = _load_model(args, config)
    dataset = read_dataset(args.data)
    holdout = read_dataset(args.holdout) if args.holdout else dataset
    view = dataset.training_view()
    qy_mode = "unified" if stage == "unified" else "base"
    agreement = cluster_agreement(m, holdout, qy_mode=qy_mode)
    active = sorted(effective_actions(m, view, config.action_threshold))
    hv = holdout.training_view()
    metrics = {
        "stage": stage,
        "nmi": agreement["nmi"],
        "purity": agreement["purity"],
        "degenerate": agreement["degenerate"],
        "effective_action_count": len(active),
        "effective_actions": active,
        "min_ade_prior": min_ade(m, holdout, mode="prior", top_m=3),
        "min_ade_posterior": min_ade(m, holdout, mode="posterior", top_m=3),
        "holdout_elbo_base": holdout_elbo(m, hv, objective="base",
                                          seed=config.seed),
        "sigma_spread_prior": mean_fan_spread(
            m, hv, mode="prior", threshold=config.action_threshold),
        "sigma_spread_posterior": mean_fan_spread(
            m, hv, mode="posterior", threshold=config.action_threshold),
    }
    with _OutputDir(args.out) as out:
        with open(os.path.join(out, "metrics.json"), "w") as fh:
            json.dump(metrics, fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_manifest(out, "eval", args, config)
    return 0


def cmd_export_actions(args):
    config = _apply_seed(load_config(args.config)[0], args)
    m, _ = _load_model(args, config)
    actions = []
    for k in range(m.n_actions):
        fans = [m.decode_z(p.coords).reshape(-1, 2)
                for p in sigma_points(m.mixture_component(k))]
        actions.append(ActionPrediction(
            action=k, probability=1.0 / m.n_actions,
            mean_trajectory=fans[0], sigma_trajectories=fans,
            source="prior-conditioned"))
    pred = Prediction(actions=actions, mode="prior", threshold=0.0)
    with _OutputDir(args.out) as out:
        export_plots(pred, os.path.join(out, "actions.csv"),
                     os.path.join(out, "actions.svg"))
        write_manifest(out, "export-actions", args, config)
    return 0


# ---------------------------------------------------------------------------
# Argument wiring and dispatch.
# ---------------------------------------------------------------------------

def _build_parser() -> _Parser:
    parser = _Parser(prog="actionvae", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, checkpoint=False):
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True)
        if data:
            p.add_argument("--data", required=True)
        if checkpoint:
            p.add_argument("--checkpoint", required=True)

    common(sub.add_parser("generate-data"), data=False)
    common(sub.add_parser("pretrain"))
    common(sub.add_parser("init-clusters"), checkpoint=True)
    p = sub.add_parser("train")
    p.add_argument("--stage", required=True,
                   choices=("base", "dual", "unified"))
    common(p, checkpoint=True)
    p = sub.add_parser("predict")
    p.add_argument("--mode", default="posterior",
                   choices=("prior", "posterior"))
    p.add_argument("--threshold", type=float, default=0.05)
    p.add_argument("--index", type=int, default=0)
    common(p, checkpoint=True)
    p = sub.add_parser("eval")
    p.add_argument("--holdout", default=None)
    common(p, checkpoint=True)
    common(sub.add_parser("export-actions"), data=False, checkpoint=True)
    return parser


_COMMANDS = {
    "generate-data": cmd_generate_data,
    "pretrain": cmd_pretrain,
    "init-clusters": cmd_init_clusters,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "export-actions": cmd_export_actions,
}


def dispatch(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"{_ERROR_PREFIX} usage: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except TrainingDivergence as exc:
        print(f"{_ERROR_PREFIX} divergence: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, DataFormatError, CheckpointError,
            ContractViolation, DegeneratePosterior, InitializationError,
            OSError) as exc:
        print(f"{_ERROR_PREFIX} {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse --version/--help paths
        return int(exc.code or 0)


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))
