"""Command-line entry point: train, eval, ablate, synth, gradcheck, params.

Exit codes: 0 ok, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, config_from_dict, load_config, tiny_config
from .episodes import DatasetError, SyntheticSpec, directory_digest, generate_synthetic, load_dataset

log = logging.getLogger("tdsnet")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
ALIASES = {"n_way": ["--way"], "k_shot": ["--shot"], "lam": ["--lambda"], "q_per": ["--queries"],
           "data_root": ["--data"], "output_dir": ["--out"]}


class UsageError(Exception):
    pass


def _emit(msg: str) -> None:
    print(f"[tdsnet] {msg}", file=sys.stderr)


def add_config_flags(parser: argparse.ArgumentParser, only: set[str] | None = None) -> None:
    group = parser.add_argument_group("config overrides")
    for f in dataclasses.fields(RunConfig):
        if only is not None and f.name not in only:
            continue
        names = [f"--{f.name.replace('_', '-')}"] + ALIASES.get(f.name, [])
        group.add_argument(*names, dest=f"cfg_{f.name}", default=None, metavar="VALUE",
                           help=f"(default: {f.default})")


def config_overrides(args: argparse.Namespace) -> dict:
    return {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}


def _dataset(root: str):
    if not root:
        raise UsageError("no dataset given (use --data or set data_root)")
    return load_dataset(root)


# -- commands -------------------------------------------------------------------

def cmd_train(args) -> int:
    from .training import Trainer

    if args.resume:
        if not Path(args.resume).exists():
            raise UsageError(f"checkpoint not found: {args.resume}")
        from .training import read_checkpoint

        header, cfg, _, _ = read_checkpoint(args.resume)
        over = config_overrides(args)
        if over:
            cfg = config_from_dict({**cfg.to_dict(), **over})
        index = _dataset(cfg.data_root)
        trainer = Trainer.resume(args.resume, index, args.output or Path(args.resume).parent,
                                 cache_dir=args.cache, cfg_overrides=dataclasses.asdict(cfg))
    else:
        cfg = load_config(args.config, overrides=config_overrides(args))
        index = _dataset(cfg.data_root)
        trainer = Trainer(cfg, index, args.output or cfg.output_dir, cache_dir=args.cache)
    _emit(f"config digest {trainer.cfg.digest()} seed {trainer.cfg.seed}")
    result = trainer.run()
    _emit(f"trained {result.episodes} episodes in {result.seconds:.1f}s; "
          f"{len(result.checkpoints)} checkpoints under {result.output_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate_model
    from .episodes import ImageBank
    from .training import read_checkpoint

    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    _, cfg, model, _ = read_checkpoint(args.checkpoint)
    cfg = config_from_dict({**cfg.to_dict(), **config_overrides(args)})
    if args.episodes is not None:
        cfg = cfg.replace(eval_episodes=args.episodes)
    model.cfg = cfg
    index = _dataset(cfg.data_root)
    bank = ImageBank(index, cfg.image_size, args.cache)
    _emit(f"config digest {cfg.digest()} seed {cfg.seed}")
    report = evaluate_model(model, index, bank, "test", cfg.n_way, cfg.k_shot, cfg.eval_q_per,
                            cfg.eval_episodes, cfg.seed)
    print(report.line())
    out = Path(args.report) if args.report else Path(args.checkpoint).with_suffix(".eval.json")
    out.write_text(report.to_json() + "\n")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .evaluation import (ABLATION_ROWS, ablation_config, ablation_json, ablation_suite,
                             format_ablation_table)
    from .training import Trainer

    base = load_config(args.config, overrides=config_overrides(args))
    index = _dataset(base.data_root)
    out_dir = Path(args.output or base.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoints: dict[str, Path | None] = {}
    for item in args.checkpoint or []:
        key, _, path = item.partition("=")
        if key not in {k for k, _, _ in ABLATION_ROWS} or not path:
            raise UsageError(f"bad --checkpoint {item!r}; expected ROW=PATH with ROW in a-d")
        checkpoints[key] = Path(path)
    _emit(f"config digest {base.digest()} seed {base.seed}")
    for key, _, _ in ABLATION_ROWS:
        if key in checkpoints:
            continue
        path = out_dir / f"row_{key}" / "latest.ckpt"
        if args.train and not path.exists():
            cfg = ablation_config(base, key)
            log.info("training row %s (%s)", key, cfg.digest())
            Trainer(cfg, index, path.parent, cache_dir=args.cache).run()
        checkpoints[key] = path if path.exists() else None
    episodes = args.episodes if args.episodes is not None else base.eval_episodes
    rows = ablation_suite(checkpoints, index, episodes, base.n_way, base.k_shot, base.eval_q_per,
                          base.seed, cache_dir=args.cache)
    table = format_ablation_table(rows, f"{base.n_way}-way {base.k_shot}-shot")
    print(table)
    (out_dir / "ablation.txt").write_text(table + "\n")
    (out_dir / "ablation.json").write_text(ablation_json(rows) + "\n")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SyntheticSpec(seed=args.seed if args.seed is not None else 0)
    changes = {k: v for k, v in (("n_classes", args.classes), ("n_auxiliary", args.auxiliary),
                                  ("n_val", args.val), ("images_per_class", args.images_per_class),
                                  ("image_size", args.size)) if v is not None}
    spec = dataclasses.replace(spec, **changes)
    if args.no_nuisance:
        spec = spec.without_nuisance()
    generate_synthetic(spec, args.output)
    print(directory_digest(args.output))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import COMPONENTS, finite_difference_check

    cfg = tiny_config(**({"seed": int(args.seed)} if args.seed is not None else {}))
    _emit(f"config digest {cfg.digest()} seed {cfg.seed}")
    result = finite_difference_check(cfg, seed=cfg.seed, freeze_stop_gradients=not args.no_freeze)
    for c in COMPONENTS:
        status = "ok" if result.max_rel_err[c] <= args.tol else "FAIL"
        print(f"{c:<11} max_rel_err={result.max_rel_err[c]:.3e}  {status}")
    print(f"{result.n_params} parameters, {result.seconds:.1f}s")
    return EXIT_OK if result.passed(args.tol) else EXIT_FAILURE


def cmd_params(args) -> int:
    from .evaluation import count_parameters, format_parameter_table
    from .model import TDSNet
    from .tensor import precision

    if args.checkpoint:
        if not Path(args.checkpoint).exists():
            raise UsageError(f"checkpoint not found: {args.checkpoint}")
        counts = count_parameters(args.checkpoint)
    else:
        cfg = load_config(args.config, overrides=config_overrides(args))
        _emit(f"config digest {cfg.digest()} seed {cfg.seed}")
        with precision(cfg.precision):
            counts = count_parameters(TDSNet(cfg))
    print(format_parameter_table(counts))
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tdsnet", description="Few-shot fine-grained classification with global and task-aware local similarity")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="episodic training")
    t.add_argument("--config", help="TOML config file")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--output", help="output directory (overrides output_dir)")
    t.add_argument("--cache", help="preprocessed image cache directory")
    add_config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="test-split evaluation with 95%% confidence interval")
    e.add_argument("checkpoint")
    e.add_argument("--episodes", type=int)
    e.add_argument("--report", help="report JSON path (default: <checkpoint>.eval.json)")
    e.add_argument("--cache")
    add_config_flags(e, {"n_way", "k_shot", "eval_q_per", "seed", "eval_attention_mode", "data_root"})
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train/evaluate the four ablation rows")
    a.add_argument("--config")
    a.add_argument("--checkpoint", action="append", help="ROW=PATH, repeatable (rows a-d)")
    a.add_argument("--train", action="store_true", help="train rows without a checkpoint")
    a.add_argument("--episodes", type=int)
    a.add_argument("--output")
    a.add_argument("--cache")
    add_config_flags(a)
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("synth", help="write a synthetic fine-grained dataset")
    s.add_argument("--output", "--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--classes", type=int)
    s.add_argument("--auxiliary", type=int)
    s.add_argument("--val", type=int)
    s.add_argument("--images-per-class", type=int)
    s.add_argument("--size", type=int)
    s.add_argument("--no-nuisance", action="store_true")
    s.set_defaults(func=cmd_synth)

    g = sub.add_parser("gradcheck", help="64-bit finite-difference check of every loss component")
    g.add_argument("--seed", type=int)
    g.add_argument("--tol", type=float, default=1e-3)
    g.add_argument("--no-freeze", action="store_true",
                   help="do not hold gradient-stopped quantities fixed while differencing")
    g.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("params", help="trainable parameter counts per module")
    c.add_argument("--checkpoint")
    c.add_argument("--config")
    add_config_flags(c)
    c.set_defaults(func=cmd_params)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, DatasetError) as exc:
        print(f"tdsnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_FAILURE
    except Exception as exc:  # noqa: BLE001
        log.exception("command failed")
        print(f"tdsnet: failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
