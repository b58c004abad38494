"""Command-line entry point: ``python -m inboxrec <command>``.

Commands: ``prepare``, ``train``, ``eval``, ``synth``, ``export-projection``.

Exit status: 0 success, 2 configuration error, 3 data error, 4 numeric
divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .data import load_dataset, read_manifest, write_manifest
from .errors import (ContractError, CorruptCheckpointError, DivergedStepError, InBoxError,
                     ParseError, RangeError, ValidationError)
from .evaluation import evaluate_all
from .model import checkpoint_load, checkpoint_save
from .projection import concept_projection, write_projection_csv
from .synthbench import SynthConfig, generate_synthetic, write_dataset
from .training import TrainConfig, run_pipeline

log = logging.getLogger("inboxrec")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

ABLATION_FLAGS = {
    "--no-pretrain": "no_pretrain",
    "--only-irt": "only_irt",
    "--no-intersection": "no_intersection",
    "--maxmin": "maxmin",
    "--no-user-bias": "no_user_bias",
    "--only-user-bias": "only_user_bias",
    "--literal-loss": "literal_loss",
}
# non-TrainConfig keys a run config may carry
RUN_KEYS = ("data", "out")


class ConfigError(InBoxError, ValueError):
    pass


def _read_json(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: expected a flat JSON object")
    return cfg


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_prepare(args):
    ds = load_dataset(args.dataset_dir)
    man = ds.manifest()
    if man["n_iri"] + man["n_trt"] + man["n_irt"] == 0:
        log.warning("kg_final.txt holds no triplets")
    out = args.out or os.path.join(args.dataset_dir, "manifest.json")
    write_manifest(out, man)
    print(f"users {man['n_users']}  items {man['n_items']}  interactions {man['n_interactions']}")
    print(f"tags {man['n_tags']}  relations {man['n_relations_raw']} "
          f"(augmented {man['n_relations_aug']})")
    for k in ("iri", "trt", "irt"):
        print(f"{k.upper()} {man['n_' + k]} {man['pct_' + k]:.2f}%")
    if args.expected:
        want = read_manifest(args.expected)
        bad = {k: (v, man.get(k)) for k, v in want.items()
               if k in man and not k.startswith("pct_") and man[k] != v}
        if bad:
            msg = ", ".join(f"{k}: expected {a}, got {b}" for k, (a, b) in sorted(bad.items()))
            raise ValidationError(f"manifest mismatch: {msg}")
        print(f"manifest matches {args.expected}")
    return EXIT_OK


def train_config_from_args(args):
    """Merge config file values with command-line overrides."""
    cfg = _read_json(args.config) if args.config else {}
    for key in RUN_KEYS:
        if getattr(args, key, None) is not None:
            cfg[key] = getattr(args, key)
    for flag, key in ABLATION_FLAGS.items():
        if getattr(args, key):
            cfg[key] = True
    for key in ("dim", "seed", "batch_size", "n_negatives", "base_lr", "gamma", "alpha",
                "max_concepts", "history_limit"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    if args.epochs is not None:
        cfg["epochs"] = list(args.epochs)
    missing = [k for k in RUN_KEYS if k not in cfg]
    if missing:
        raise ConfigError(f"missing required setting(s): {', '.join(missing)}")
    run = {k: cfg.pop(k) for k in RUN_KEYS}
    try:
        tc = TrainConfig.from_dict(cfg)
    except (TypeError, ContractError) as exc:
        raise ConfigError(str(exc)) from None
    return run, tc


def cmd_train(args):
    run, cfg = train_config_from_args(args)
    ds = load_dataset(run["data"], cfg.max_concepts)
    os.makedirs(run["out"], exist_ok=True)
    _write_json(os.path.join(run["out"], "config.json"), {**run, **cfg.to_dict()})
    store, logs = run_pipeline(ds, cfg, out_dir=run["out"])
    checkpoint_save(store, os.path.join(run["out"], "model.ckpt"))
    for s in logs:
        print(f"{s.stage}: {s.epochs_run} epochs, final loss "
              f"{s.losses[-1] if s.losses else float('nan'):.6f}")
    rep = evaluate_all(store, ds, cfg.eval_k, cfg.variant, cfg.box_mode, cfg.history_limit,
                       cfg.inside_weight)
    rep.write(os.path.join(run["out"], "report.json"))
    for line in rep.lines():
        print(line)
    return EXIT_OK


def _eval_settings(args):
    """Intersection variant / box mode: explicit flags, else the run's config.json."""
    cfg = {}
    side = os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "config.json")
    if os.path.exists(side):
        cfg = _read_json(side)
    for key in ("maxmin", "no_user_bias", "only_user_bias"):
        if getattr(args, key):
            cfg[key] = True
    keep = {k: cfg[k] for k in ("maxmin", "no_user_bias", "only_user_bias", "history_limit",
                                "max_concepts", "inside_weight") if k in cfg}
    try:
        return TrainConfig(**keep)
    except ContractError as exc:
        raise ConfigError(str(exc)) from None


def _check_shapes(store, ds):
    pairs = [("users", store.n_users, ds.n_users), ("items", store.n_items, ds.n_items),
             ("tags", store.n_tags, max(ds.kg.n_tags, 1)),
             ("relations", store.n_relations, max(ds.kg.n_relations_aug, 1))]
    for name, a, b in pairs:
        if a != b:
            raise ValidationError(f"checkpoint has {a} {name} but the dataset has {b}")


def cmd_eval(args):
    cfg = _eval_settings(args)
    store = checkpoint_load(args.checkpoint)
    ds = load_dataset(args.data, cfg.max_concepts)
    _check_shapes(store, ds)
    rep = evaluate_all(store, ds, args.k, cfg.variant, cfg.box_mode, cfg.history_limit,
                       cfg.inside_weight)
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)),
                                   f"eval_k{args.k}.json")
    rep.write(out)
    for line in rep.lines():
        print(line)
    return EXIT_OK


def cmd_synth(args):
    cfg = _read_json(args.config) if args.config else {}
    for key in ("n_concepts", "n_items", "n_users", "d_true", "concepts_per_interest",
                "items_per_user", "noise", "seed"):
        v = getattr(args, key)
        if v is not None:
            cfg[key] = v
    try:
        sc = SynthConfig(**cfg)
    except (TypeError, ContractError) as exc:
        raise ConfigError(str(exc)) from None
    graph, kg, truth = generate_synthetic(sc)
    write_dataset(args.out, graph, kg, truth)
    print(f"wrote {args.out}: {graph.n_users} users, {graph.n_items} items, "
          f"{graph.n_train + graph.n_test} interactions, {len(kg.irt)} IRT, {len(kg.trt)} TRT")
    return EXIT_OK


def cmd_export_projection(args):
    store = checkpoint_load(args.checkpoint)
    ds = load_dataset(args.data)
    _check_shapes(store, ds)
    rows = concept_projection(store, ds, args.relation, args.tag, args.n_random,
                              np.random.default_rng(args.seed))
    write_projection_csv(args.out, rows)
    n = sum(r[3] == "concept" for r in rows)
    print(f"wrote {args.out}: {n} concept items, {len(rows) - n} random items")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="inboxrec", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--deterministic", action="store_true",
                   help="single worker (all commands are single-process already)")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="validate a dataset directory and write its manifest")
    sp.add_argument("dataset_dir")
    sp.add_argument("--expected", help="manifest JSON whose counts must match")
    sp.add_argument("--out", help="manifest path (default: <dataset_dir>/manifest.json)")
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="run the staged training pipeline")
    sp.add_argument("--config", help="flat JSON config; flags below override it")
    sp.add_argument("--data", help="dataset directory")
    sp.add_argument("--out", help="run directory")
    for flag, key in ABLATION_FLAGS.items():
        sp.add_argument(flag, dest=key, action="store_true")
    sp.add_argument("--dim", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--n-negatives", type=int)
    sp.add_argument("--base-lr", type=float)
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--max-concepts", type=int)
    sp.add_argument("--history-limit", type=int)
    sp.add_argument("--epochs", type=int, nargs=3, metavar=("PRETRAIN", "INTERSECT", "REC"))
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="all-ranking evaluation of a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("-k", "--k", type=int, default=20)
    sp.add_argument("--out")
    for key in ("maxmin", "no_user_bias", "only_user_bias"):
        sp.add_argument("--" + key.replace("_", "-"), dest=key, action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("synth", help="generate a synthetic dataset with planted concepts")
    sp.add_argument("--out", required=True)
    sp.add_argument("--config")
    for key, typ in (("n_concepts", int), ("n_items", int), ("n_users", int), ("d_true", int),
                     ("concepts_per_interest", int), ("items_per_user", int),
                     ("noise", float), ("seed", int)):
        sp.add_argument("--" + key.replace("_", "-"), dest=key, type=typ)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("export-projection", help="2-D PCA of a concept's items as CSV")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--relation", type=int, required=True)
    sp.add_argument("--tag", type=int, required=True, help="tag entity id")
    sp.add_argument("--n-random", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export_projection)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, ParseError, RangeError, CorruptCheckpointError,
            ValidationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergedStepError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
