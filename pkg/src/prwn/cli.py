"""Command-line entry point: ``prwn gen-data | train | eval | analyze``.

Run configuration document (JSON). Every key is optional except ``data``;
unknown keys are rejected. Precedence: built-in defaults < document < flags.

    {
      "data": "d/",                      dataset directory written by gen-data
      "out": "runs/prwn",                output directory
      "split": {"train_classes": 32, "val_classes": 0, "label_fraction": 0.4, "seed": 0},
      "episode": {"n_classes": 5, "shots": 1, "unlabeled_per_class": 10,
                  "queries_per_class": 5, "distractor_classes": 0},
      "prw": {"tau": 3, "alpha": 0.7, "lam": 0.5},
      "model": {"hidden": [64, 64], "embed_dim": 32},
      "optim": {"lr": 0.001, "halve_every": 1000, "beta1": 0.9, "beta2": 0.99, "eps": 1e-8},
      "episodes": 4000, "val_every": 500, "val_episodes": 200, "seed": 0
    }

Training uses the first ``train_classes`` classes of the dataset (stored
order) and validates on the next ``val_classes``. Outputs are tagged
``prwn`` or, when ``lam`` is 0, ``pn-baseline``:
``<tag>.ckpt``, ``<tag>_metrics.csv`` and ``<tag>_summary.json``.

Exit codes: 0 success, 3 configuration/contract, 4 capacity, 5 numeric,
6 file I/O, 1 anything else from this package.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

from . import protonet as pn
from .analysis import (diagnose_split, evaluate_split, higher_way_sweep, landing_curve,
                       mean_p_clean, write_csv, write_json, write_records_csv)
from .episodes import (Dataset, EpisodeSpec, generate_synthetic_dataset, load_dataset,
                       save_dataset, split_dataset)
from .errors import ConfigError, PRWNError, StorageError
from .inference import MODES
from .prw import PRWConfig
from .trainer import TrainConfig, train

log = logging.getLogger("prwn")

DEFAULT_RUN = {
    "data": None,
    "out": "runs/prwn",
    "split": {"train_classes": 32, "val_classes": 0, "label_fraction": 0.4, "seed": 0},
    "episode": {"n_classes": 5, "shots": 1, "unlabeled_per_class": 10, "queries_per_class": 5,
                "distractor_classes": 0},
    "prw": {"tau": 3, "alpha": 0.7, "lam": 0.5},
    "model": {"hidden": [64, 64], "embed_dim": 32},
    "optim": {"lr": 1e-3, "halve_every": 1000, "beta1": 0.9, "beta2": 0.99, "eps": 1e-8},
    "episodes": 4000,
    "val_every": 500,
    "val_episodes": 200,
    "seed": 0,
}


def _merge(base: dict, doc: dict, prefix: str = "") -> dict:
    """Overlay ``doc`` on ``base``; rejects keys and value kinds ``base`` does not know."""
    out = copy.deepcopy(base)
    for key, value in doc.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{path}'")
        ref = base[key]
        if isinstance(ref, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{path}' must be an object")
            out[key] = _merge(ref, value, path + ".")
        elif ref is None or isinstance(ref, str):
            if not isinstance(value, str):
                raise ConfigError(f"config key '{path}' must be a string")
            out[key] = value
        elif isinstance(ref, list):
            if not isinstance(value, list) or not all(_is_int(v) for v in value):
                raise ConfigError(f"config key '{path}' must be a list of integers")
            out[key] = list(value)
        elif isinstance(ref, int):
            if not _is_int(value):
                raise ConfigError(f"config key '{path}' must be an integer")
            out[key] = value
        else:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"config key '{path}' must be a number")
            out[key] = float(value)
    return out


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def load_run_config(path: str | Path | None, overrides: dict) -> dict:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as e:
            raise StorageError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
    run = _merge(DEFAULT_RUN, doc)
    run = _merge(DEFAULT_RUN, _nest_overrides(run, overrides))
    if not run["data"]:
        raise ConfigError("config key 'data' is required")
    return run


def _nest_overrides(run: dict, overrides: dict) -> dict:
    out = copy.deepcopy(run)
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = out
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node[p]
        node[leaf] = value
    return out


def train_config_from_run(run: dict) -> TrainConfig:
    ep = run["episode"]
    return TrainConfig(
        episode=EpisodeSpec(ep["n_classes"], ep["shots"], ep["unlabeled_per_class"],
                            ep["queries_per_class"], ep["distractor_classes"]),
        prw=PRWConfig(run["prw"]["tau"], run["prw"]["alpha"], run["prw"]["lam"]),
        hidden=tuple(run["model"]["hidden"]), embed_dim=run["model"]["embed_dim"],
        episodes=run["episodes"], val_every=run["val_every"], val_episodes=run["val_episodes"],
        seed=run["seed"], **run["optim"])


def _class_slice(ds: Dataset, spec: str | None) -> Dataset:
    if not spec:
        return ds
    try:
        lo, hi = (int(v) if v else None for v in spec.split(":"))
    except ValueError as e:
        raise ConfigError(f"--classes expects START:STOP, got '{spec}'") from e
    picked = ds.classes[lo:hi]
    if not picked:
        raise ConfigError(f"--classes {spec} selects no classes")
    return Dataset(picked)


# --- commands --------------------------------------------------------------

def cmd_gen_data(args) -> int:
    ds = generate_synthetic_dataset(args.classes, args.per_class, args.latent_dim, args.input_dim,
                                    args.warp_depth, args.seed, cluster_std=args.cluster_std,
                                    separation=args.separation, nuisance_std=args.nuisance_std)
    out = save_dataset(ds, args.out, force=args.force)
    print(json.dumps({"out": str(out), "classes": len(ds.classes), "dim": ds.dim}))
    return 0


def cmd_train(args) -> int:
    overrides = {"data": args.data, "out": args.out, "prw.lam": args.lam, "prw.tau": args.tau,
                 "prw.alpha": args.alpha, "episode.distractor_classes": args.distractors,
                 "episodes": args.episodes, "seed": args.seed}
    run = load_run_config(args.config, overrides)
    cfg = train_config_from_run(run)
    tag = "pn-baseline" if cfg.prw.lam == 0 else "prwn"
    out = Path(run["out"])
    paths = {k: out / f"{tag}{suffix}" for k, suffix in
             (("ckpt", ".ckpt"), ("metrics", "_metrics.csv"), ("summary", "_summary.json"))}
    existing = [str(p) for p in paths.values() if p.exists()]
    if existing and not args.force:
        raise StorageError(f"refusing to overwrite {existing[0]} (use --force)")

    ds = load_dataset(run["data"])
    sp = run["split"]
    n_train, n_val = sp["train_classes"], sp["val_classes"]
    parts = ds.partition(n_train, n_val) if n_val else ds.partition(n_train)
    train_split = split_dataset(parts[0], sp["label_fraction"], sp["seed"])
    val_split = split_dataset(parts[1], sp["label_fraction"], sp["seed"]) if n_val else None

    res = train(cfg, train_split, val_split, metrics_path=paths["metrics"],
                checkpoint_path=paths["ckpt"], meta={"run_tag": tag})
    last = res.history[-1] if res.history else {}
    summary = {"model": tag, "config": run, "checkpoint": str(paths["ckpt"]),
               "metrics": str(paths["metrics"]), "best_val_accuracy": res.best_val,
               "best_episode": res.best_episode, "final_total_loss": last.get("total")}
    write_json(paths["summary"], summary)
    print(json.dumps({"model": tag, "checkpoint": str(paths["ckpt"]),
                      "best_val_accuracy": res.best_val}))
    return 0


def _eval_split(args):
    net, header = pn.load_checkpoint(args.checkpoint)
    ds = _class_slice(load_dataset(args.data), args.classes)
    split = split_dataset(ds, args.label_fraction, args.split_seed)
    spec = EpisodeSpec(args.ways, args.shots, args.unlabeled, args.queries, args.distractors)
    return net, header, split, spec


def cmd_eval(args) -> int:
    net, header, split, spec = _eval_split(args)
    res = evaluate_split(net, split, spec, args.episodes, args.seed, args.mode)
    report = {"mode": args.mode, "ways": args.ways, "episodes": res.n, "accuracy": res.mean,
              "ci95": res.ci95, "model": header.get("meta", {}).get("model")}
    if args.out:
        write_json(args.out, report)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_analyze(args) -> int:
    net, header, split, spec = _eval_split(args)
    out = Path(args.out)
    written = {}
    if not (args.landing or args.export_embeddings or args.higher_way):
        raise ConfigError("analyze needs at least one of --landing, --export-embeddings, "
                          "--higher-way")
    if args.landing:
        recs = diagnose_split(net, split, spec, args.episodes, args.seed, args.tau_max, args.mode)
        written["episodes"] = str(write_records_csv(recs, out / "episode_metrics.csv"))
        curve = landing_curve(recs)
        written["landing"] = str(write_csv(out / "landing.csv", ["tau", "landing_probability"],
                                           list(enumerate(curve))))
        p_clean = mean_p_clean(recs)
        if p_clean is not None:
            written["p_clean"] = p_clean
    if args.export_embeddings:
        rows = []
        for rec in split.dataset.classes:
            emb = pn.embed(net, rec.points).data
            rows.extend([rec.id, *map(float, e)] for e in emb)
        header_row = ["class_id"] + [f"e{k}" for k in range(net.out_dim)]
        written["embeddings"] = str(write_csv(out / "embeddings.csv", header_row, rows))
    if args.higher_way:
        try:
            ways = [int(w) for w in args.higher_way.split(",")]
        except ValueError as e:
            raise ConfigError(f"--higher-way expects comma-separated integers: {e}") from e
        baseline = pn.load_checkpoint(args.baseline)[0] if args.baseline else None
        rows = higher_way_sweep(net, split, ways, spec, args.episodes, args.seed, args.mode,
                                baseline)
        cols = ["way", "accuracy", "ci95"] + (["baseline_accuracy", "relative_improvement"]
                                              if baseline is not None else [])
        written["higher_way"] = str(write_csv(out / "higher_way.csv", cols,
                                              ([r[c] for c in cols] for r in rows)))
    print(json.dumps(written, sort_keys=True))
    return 0


# --- parser ----------------------------------------------------------------

def _episode_flags(p: argparse.ArgumentParser, episodes: int) -> None:
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--classes", help="START:STOP slice of the dataset's classes (default: all)")
    p.add_argument("--label-fraction", type=float, default=0.4)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--mode", choices=MODES, default="plain")
    p.add_argument("--ways", type=int, default=5)
    p.add_argument("--shots", type=int, default=1)
    p.add_argument("--unlabeled", type=int, default=10, help="unlabeled points per class")
    p.add_argument("--queries", type=int, default=5)
    p.add_argument("--distractors", type=int, default=0, help="distractor classes per episode")
    p.add_argument("--episodes", type=int, default=episodes)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prwn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic warped-cluster dataset")
    g.add_argument("--classes", type=int, default=40)
    g.add_argument("--per-class", type=int, default=40)
    g.add_argument("--latent-dim", type=int, default=4)
    g.add_argument("--input-dim", type=int, default=32)
    g.add_argument("--warp-depth", type=int, default=2)
    g.add_argument("--cluster-std", type=float, default=0.5)
    g.add_argument("--separation", type=float, default=1.0)
    g.add_argument("--nuisance-std", type=float, default=2.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="meta-train an embedding network")
    t.add_argument("--config", help="JSON run configuration")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--lam", type=float, help="random-walk loss weight; 0 trains the baseline")
    t.add_argument("--tau", type=int)
    t.add_argument("--alpha", type=float)
    t.add_argument("--distractors", type=int, help="distractor classes per training episode")
    t.add_argument("--episodes", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--force", action="store_true", help="overwrite existing outputs")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="few-shot accuracy with a 95%% confidence interval")
    _episode_flags(e, 3000)
    e.add_argument("--out", help="also write the report as JSON")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="landing curves, embedding export, higher-way sweeps")
    _episode_flags(a, 300)
    a.add_argument("--landing", action="store_true")
    a.add_argument("--tau-max", type=int, default=5)
    a.add_argument("--export-embeddings", action="store_true")
    a.add_argument("--higher-way", help="comma-separated way counts, e.g. 5,10,20")
    a.add_argument("--baseline", help="baseline checkpoint for relative improvement")
    a.add_argument("--out", required=True, help="output directory for CSVs")
    a.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PRWNError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return StorageError.exit_code


if __name__ == "__main__":
    sys.exit(main())
