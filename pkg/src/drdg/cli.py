"""Command-line entry point: ``drdg train | eval | ablate | plot``.

Configuration is merged from dataclass defaults, an optional JSON or TOML
file, and command-line overrides, in that order.  The merged result is
echoed to ``config.json`` in the output directory together with the source
of every field, and the echo can be passed back through ``--config``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from .errors import ConfigError, ContractViolation, TrainingAborted

logger = logging.getLogger("drdg")

# command-line flag -> dotted config key
OVERRIDES = {
    "seed": "train.seed",
    "steps": "train.steps",
    "K": "train.K",
    "lambda1": "train.lambda1",
    "lambda2": "train.lambda2",
}


def _load_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text()
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        data = tomllib.loads(text)
    else:
        data = json.loads(text)
    data.pop("sources", None)
    unknown = set(data) - {"train", "data"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}; expected 'train' and 'data'")
    return data


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and k in ("train", "data", "arch"):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _defaults():
    from .syndata import BenchmarkConfig
    from .trainer import TrainConfig

    data = json.loads(json.dumps(asdict(BenchmarkConfig())))
    train = json.loads(json.dumps(asdict(TrainConfig())))
    return {"train": train, "data": data}


def _set(tree, dotted, value):
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node[k]
    node[keys[-1]] = value


def merge_config(config_path=None, overrides=None):
    """Return ``(merged_tree, sources)`` where ``sources`` maps each dotted key to its origin."""
    tree = _defaults()
    sources = {k: "default" for k in _flatten(tree)}
    if config_path:
        for key, value in _flatten(_load_file(config_path)).items():
            if key not in sources:
                raise ConfigError(f"unknown config field {key!r}")
            _set(tree, key, value)
            sources[key] = "file"
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        _set(tree, key, value)
        sources[key] = "cli"
    return tree, sources


def build_configs(tree):
    """Turn a merged tree into ``(TrainConfig, BenchmarkConfig)`` with shapes kept consistent."""
    from .syndata import BenchmarkConfig
    from .trainer import TrainConfig

    try:
        data = BenchmarkConfig(**tree["data"])
    except TypeError as exc:
        raise ConfigError(f"data: {exc}") from None
    train = dict(tree["train"])
    arch = dict(train.get("arch", {}))
    # the data section owns image and depth geometry
    arch.update(image_size=list(data.image_size), depth_size=list(data.depth_size))
    train["arch"] = arch
    train["n_domains"] = len(data.domains) - 1
    try:
        cfg = TrainConfig(**train)
    except TypeError as exc:
        raise ConfigError(f"train: {exc}") from None
    return cfg, data


def effective_tree(cfg, data):
    return json.loads(json.dumps({"train": asdict(cfg), "data": asdict(data)}))


def write_echo(out_dir, tree, sources):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sources = {k: sources.get(k, "derived") for k in _flatten(tree)}
    echo = {**tree, "sources": {k: {"value": v, "source": sources[k]} for k, v in _flatten(tree).items()}}
    (out_dir / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")


def _run_root():
    return Path(os.environ.get("DRDG_RUN_ROOT", "runs"))


def _prepare(args, command):
    overrides = {key: getattr(args, flag, None) for flag, key in OVERRIDES.items()}
    tree, sources = merge_config(args.config, overrides)
    cfg, data = build_configs(tree)
    resolved = effective_tree(cfg, data)
    # fields rewritten by build_configs count as derived unless the user set them
    for k, v in _flatten(resolved).items():
        if _flatten(tree).get(k) != v and sources.get(k) == "default":
            sources[k] = "derived"
    out = Path(args.out) if args.out else _run_root() / f"{command}_seed{cfg.seed}"
    return cfg, data, resolved, sources, out


def cmd_train(args):
    from .syndata import make_benchmark
    from .trainer import train

    cfg, data, tree, sources, out = _prepare(args, "train")
    write_echo(out, tree, sources)
    sources_data, target = make_benchmark(data)
    held_in = [s for d in sources_data for s in d[: max(1, len(d) // 4)]]
    eval_sets = {"target": target, "source": held_in}
    try:
        train(cfg, sources_data, eval_sets=eval_sets, run_dir=out)
    except TrainingAborted as exc:
        logger.error("training aborted: %s", exc)
        return 3
    print(out)
    return 0


def _run_dir_of(checkpoint: Path):
    # <run>/checkpoints/<name>
    parent = checkpoint.parent
    return parent.parent if parent.name == "checkpoints" else parent


def cmd_eval(args):
    from . import evalkit
    from . import model as M
    from .syndata import make_benchmark

    ckpt = Path(args.checkpoint).with_suffix("")
    if not ckpt.with_suffix(".json").exists():
        raise ConfigError(f"checkpoint {ckpt} not found")
    config_path = args.config
    if config_path is None and (_run_dir_of(ckpt) / "config.json").exists():
        config_path = _run_dir_of(ckpt) / "config.json"
    args.config = config_path
    cfg, data, tree, sources, _ = _prepare(args, "eval")
    state = M.load_checkpoint(ckpt)
    if tuple(state.cfg.image_size) != tuple(data.image_size):
        raise ContractViolation(f"checkpoint expects {tuple(state.cfg.image_size)} images, "
                                f"data config gives {tuple(data.image_size)}")
    seed = json.loads(ckpt.with_suffix(".json").read_text()).get("seed", cfg.seed)
    out = Path(args.out) if args.out else _run_dir_of(ckpt) / "eval"
    sources_data, target = make_benchmark(data)
    samples = {"target": target, "source": [s for d in sources_data for s in d]}[args.split]
    policy = args.threshold
    if policy != "eer":
        try:
            policy = float(policy)
        except ValueError:
            raise ConfigError(f"--threshold must be 'eer' or a number, got {policy!r}") from None
    s = evalkit.score_samples(state, samples, use_frm=cfg.use_frm)
    write_echo(out, tree, sources)
    metrics = evalkit.write_metrics(out, s, policy, extra={
        "seed": seed, "checkpoint": str(ckpt), "split": args.split, "threshold_policy": args.threshold})
    print(json.dumps({k: metrics[k] for k in ("auc", "hter", "n")}))
    return 0


def parse_seeds(text, base, count):
    if text:
        try:
            return [int(x) for x in text.split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"--seeds must be a comma list of integers, got {text!r}") from None
    return [base + i for i in range(count)]


def cmd_ablate(args):
    from . import evalkit
    from .syndata import make_benchmark

    names = [v.strip() for v in args.variants.split(",") if v.strip()] if args.variants else list(evalkit.VARIANTS)
    variants = [evalkit.AblationVariant(n) for n in names]
    cfg, data, tree, sources, out = _prepare(args, "ablate")
    seeds = parse_seeds(args.seeds, cfg.seed, args.n_seeds)
    write_echo(out, tree, sources)
    sources_data, target = make_benchmark(data)
    rows = []
    for v in variants:
        rows.append(evalkit.run_ablation(v, cfg, sources_data, target, seeds))
        logger.info("%s AUC %.4f HTER %.4f", v.name, rows[-1]["AUC"], rows[-1]["HTER"])
    path = evalkit.write_ablation_table(out / "ablation.csv", rows)
    print(path.read_text(), end="")
    return 0


def cmd_plot(args):
    from . import plots

    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()] if args.kinds else list(plots.KINDS)
    bad = [k for k in kinds if k not in plots.KINDS]
    if bad:
        raise ConfigError(f"unknown plot kinds {bad}; valid: {', '.join(plots.KINDS)}")
    run = Path(args.run_dir)
    if not run.is_dir():
        raise ConfigError(f"run directory {run} does not exist")
    written = plots.make_plots(run, kinds, out_dir=Path(args.out) if args.out else None)
    for p in written:
        print(p)
    return 0


def _add_common(p):
    p.add_argument("--config", help="JSON or TOML file with 'train' and 'data' sections")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--out", help="output directory (default: $DRDG_RUN_ROOT/<command>_seed<seed>)")


def build_parser():
    parser = argparse.ArgumentParser(prog="drdg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on the synthetic benchmark")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint and write HTER/AUC/ROC files")
    p.add_argument("checkpoint")
    _add_common(p)
    p.add_argument("--split", choices=("target", "source"), default="target")
    p.add_argument("--threshold", default="eer", help="'eer' or a fixed threshold in (0, 1)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the six-variant ablation table")
    _add_common(p)
    p.add_argument("--variants", help="comma list of variant names (default: all six)")
    p.add_argument("--seeds", help="comma list of seeds (overrides --n-seeds)")
    p.add_argument("--n-seeds", type=int, default=7)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="render figures from a run directory")
    p.add_argument("run_dir")
    p.add_argument("--kinds", help="comma list of roc, weight_hist, feature_scatter, channel_attn")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
