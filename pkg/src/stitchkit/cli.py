"""``stitchkit`` command line: data generation, model training, stitching, BC, evaluation, sweeps."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from stitchkit import __version__
from stitchkit.bc import Policy, train_bc, train_bc_gaussian, train_weighted_bc
from stitchkit.config import ExperimentConfig, PRESETS, resolve_config, write_resolved
from stitchkit.data import load_dataset, save_dataset
from stitchkit.dynamics import load_ensemble, save_ensemble, train_dynamics
from stitchkit.envs import generate_mixture_dataset
from stitchkit.errors import ConfigurationError, DatasetParseError, IntegrityError, StitchkitError
from stitchkit.evaluation import evaluate_policy
from stitchkit.inverse import InverseCVAE, train_cvae
from stitchkit.nn import load_json, save_json
from stitchkit.pipeline import dataset_rng, run_pipeline
from stitchkit.reward import RewardGAN, train_wgan
from stitchkit.stitch import StitchModels, StitchRunError, run_ts
from stitchkit.value import TwinValue, train_value

log = logging.getLogger("stitchkit")

MODEL_NAMES = ("dynamics", "inverse", "reward", "value")
EXIT_OK, EXIT_FAULT, EXIT_BAD_INPUT = 0, 1, 2


def _sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".config")


def _config(args, **overrides) -> ExperimentConfig:
    overrides.setdefault("seed", getattr(args, "seed", None))
    overrides.setdefault("workers", getattr(args, "workers", None))
    return resolve_config(args.preset, args.config, overrides)


def _write_model(obj, path):
    save_json(obj.to_dict(), path)


def cmd_gen_data(args) -> int:
    cfg = _config(args, expert_fraction=args.expert_frac, n_trajectories=args.trajs, noise_std=args.noise_std)
    write_resolved(cfg, _sidecar(args.out))
    ds = generate_mixture_dataset(cfg.env(), cfg.expert(), cfg.mixture(), dataset_rng(cfg.seed, cfg.expert_fraction))
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} trajectories ({len(ds.expert_ids)} expert) to {args.out}")
    return EXIT_OK


def cmd_train_models(args) -> int:
    cfg = _config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out / "config.txt")
    ds = load_dataset(args.data)
    mc = cfg.model_configs()
    skip = set(args.skip or ())
    if "dynamics" not in skip:
        mc.dynamics.seed = cfg.seed
        save_ensemble(train_dynamics(ds, mc.dynamics), out / "dynamics")
    if "inverse" not in skip:
        mc.inverse.seed = cfg.seed
        _write_model(train_cvae(ds, mc.inverse), out / "inverse.json")
    if "reward" not in skip:
        mc.reward.seed = cfg.seed
        _write_model(train_wgan(ds, mc.reward), out / "reward.json")
    if "value" not in skip:
        mc.value.seed = cfg.seed
        _write_model(train_value(ds, mc.value), out / "value.json")
    print("trained " + ", ".join(n for n in MODEL_NAMES if n not in skip) + f" into {out}")
    return EXIT_OK


def load_models(directory) -> StitchModels:
    directory = Path(directory)
    missing = [n for n, p in (("dynamics", directory / "dynamics" / "manifest.json"),
                              ("inverse", directory / "inverse.json"),
                              ("reward", directory / "reward.json")) if not p.exists()]
    if missing:
        raise ConfigurationError(f"stitching needs the {', '.join(missing)} model(s); none found in {directory}")
    return StitchModels(
        load_ensemble(directory / "dynamics"),
        InverseCVAE.from_dict(load_json(directory / "inverse.json")),
        RewardGAN.from_dict(load_json(directory / "reward.json")),
    )


def cmd_stitch(args) -> int:
    cfg = _config(args, stitch_iterations=args.iterations, accept_threshold=args.accept_threshold,
                  epsilon=args.epsilon, max_stitches=args.max_stitches, latent_mode=args.latent_mode)
    write_resolved(cfg, _sidecar(args.out))
    ds = load_dataset(args.data)
    models = load_models(args.models)
    report_path = Path(args.report_path) if args.report_path else Path(str(args.out) + ".report.json")
    try:
        final, report = run_ts(ds, cfg.stitch_config(), cfg.model_configs(), models=models)
    except StitchRunError as exc:
        save_json(exc.report.to_dict(), report_path)
        raise
    save_dataset(final, args.out)
    save_json(report.to_dict(), report_path)
    accepted = sum(it.accepted for it in report.iterations)
    print(f"{accepted} trajectories replaced over {len(report.iterations)} iterations; wrote {args.out}")
    return EXIT_OK


def _selector(cfg: ExperimentConfig):
    env = cfg.env()

    def select(policy):
        return evaluate_policy(env, policy, cfg.select_episodes, 1, base_seed=cfg.seed * 1000 + 12)[0]
    return select


def cmd_train_bc(args) -> int:
    cfg = _config(args)
    write_resolved(cfg, _sidecar(args.out))
    ds = load_dataset(args.data)
    bc_cfg = cfg.bc_config(cfg.seed)
    select = None if args.no_select else _selector(cfg)
    if args.weighted:
        if not args.value:
            raise ConfigurationError("--weighted needs --value")
        value = TwinValue.from_dict(load_json(args.value))
        policy, train_log = train_weighted_bc(ds, value, bc_cfg, select, cfg.weighted_delta)
    elif args.gaussian:
        policy, train_log = train_bc_gaussian(ds, bc_cfg, select), None
    else:
        policy, train_log = train_bc(ds, bc_cfg, select)
    _write_model(policy, args.out)
    if train_log is not None:
        save_json(train_log.to_dict(), Path(str(args.out) + ".log.json"))
    print(f"wrote {policy.variant} policy to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args, eval_episodes=args.episodes, eval_seeds=args.seeds)
    policy = Policy.from_dict(load_json(args.policy))
    mean, std = evaluate_policy(cfg.env(), policy, cfg.eval_episodes, cfg.eval_seeds, base_seed=cfg.seed)
    result = {"policy": str(args.policy), "episodes": cfg.eval_episodes, "seeds": cfg.eval_seeds,
              "return_mean": mean, "return_std": std}
    if args.out:
        write_resolved(cfg, _sidecar(args.out))
        save_json(result, args.out)
    print(json.dumps(result))
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _config(args, fractions=args.fractions)
    out = Path(args.out_dir)
    write_resolved(cfg, out / "config.txt")
    metrics = run_pipeline(cfg, out, curve_fractions=tuple(args.curve_fractions))
    for i, f in enumerate(metrics["fractions"]):
        print(f"{f:6g}%  BC {metrics['bc']['returns'][i]:9.3f}  TS+BC {metrics['tsbc']['returns'][i]:9.3f}  "
              f"weighted BC {metrics['weighted_bc']['returns'][i]:9.3f}")
    return EXIT_OK


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--preset", default="default", choices=sorted(PRESETS))
    common.add_argument("--seed", type=int, help="global seed (falls back to $STITCHKIT_SEED)")
    common.add_argument("--workers", type=int, help="stitching threads (0 = all cores)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="stitchkit", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="synthesise an expert/noisy mixture dataset")
    p.add_argument("--expert-frac", type=float, help="percentage of expert trajectories")
    p.add_argument("--trajs", type=int, help="number of trajectories")
    p.add_argument("--noise-std", type=float, help="action noise of the noisy trajectories")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-models", parents=[common], help="fit dynamics, inverse, reward and value models")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--skip", action="append", choices=MODEL_NAMES, help="model to leave out (repeatable)")
    p.set_defaults(func=cmd_train_models)

    p = sub.add_parser("stitch", parents=[common], help="run iterated trajectory stitching")
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True, help="directory written by train-models")
    p.add_argument("--out", required=True)
    p.add_argument("--report-path")
    p.add_argument("--iterations", type=int)
    p.add_argument("--accept-threshold", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--max-stitches", type=int)
    p.add_argument("--latent-mode", choices=("sample", "mean"))
    p.set_defaults(func=cmd_stitch)

    p = sub.add_parser("train-bc", parents=[common], help="behavioural cloning")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--weighted", action="store_true", help="value-weighted loss (needs --value)")
    p.add_argument("--value")
    p.add_argument("--gaussian", action="store_true", help="Gaussian policy trained by likelihood")
    p.add_argument("--no-select", action="store_true", help="keep the final checkpoint")
    p.set_defaults(func=cmd_train_bc)

    p = sub.add_parser("eval", parents=[common], help="mean return of a policy on the point-mass env")
    p.add_argument("--policy", required=True)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", parents=[common], help="expert-fraction sweep with metrics JSON + CSV")
    p.add_argument("--fractions", type=_floats)
    p.add_argument("--curve-fractions", type=_floats, default=[10.0],
                   help="fractions that also get the per-iteration BC curve")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigurationError, DatasetParseError, IntegrityError, FileNotFoundError, IsADirectoryError,
            json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except (StitchkitError, RuntimeError, FloatingPointError, ValueError) as exc:
        print(f"fault: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
