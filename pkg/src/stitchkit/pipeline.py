"""Expert-fraction sweep: BC vs TS+BC vs value-weighted BC on the point-mass mixtures."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from stitchkit.bc import train_bc, train_bc_gaussian, train_weighted_bc
from stitchkit.config import ExperimentConfig
from stitchkit.data import Dataset
from stitchkit.envs import generate_mixture_dataset
from stitchkit.evaluation import (action_mse, evaluate_policy, expert_rollout_states, kl_divergence_estimate,
                                  scaled_kl_difference)
from stitchkit.nn import save_json
from stitchkit.stitch import run_ts, train_models
from stitchkit.value import train_value

log = logging.getLogger(__name__)

# offsets that keep the rng streams of different stages apart
_DATA_STREAM = 11
_SELECT_STREAM = 12
_EVAL_SEED = 20_000
_KL_SEED = 30_000


def fraction_key(fraction: float) -> str:
    return f"{fraction:g}"


def dataset_rng(seed: int, fraction: float) -> np.random.Generator:
    return np.random.default_rng([seed, _DATA_STREAM, int(round(fraction * 1000))])


@dataclass
class PolicyScores:
    returns: list = field(default_factory=list)
    kls: list = field(default_factory=list)
    mses: list = field(default_factory=list)

    def summary(self) -> dict:
        r = np.asarray(self.returns)
        out = {
            "return": float(r.mean()),
            "return_std": float(r.std(ddof=1)) if len(r) > 1 else 0.0,
            "return_se": float(r.std(ddof=1) / np.sqrt(len(r))) if len(r) > 1 else 0.0,
            "returns": [float(x) for x in r],
        }
        if self.kls:
            out["kl"] = float(np.mean(self.kls))
        if self.mses:
            out["mse"] = float(np.mean(self.mses))
        return out


class _Scorer:
    """Trains the BC variants on a dataset and scores them against the expert."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.env = cfg.env()
        self.expert = cfg.expert()
        self.mse_states, _ = expert_rollout_states(self.env, self.expert, cfg.eval_episodes, cfg.seed + _EVAL_SEED)

    def select(self, policy) -> float:
        # checkpoint selection rolls out from start states the final evaluation never sees
        cfg = self.cfg
        return evaluate_policy(self.env, policy, cfg.select_episodes, 1, base_seed=cfg.seed * 1000 + _SELECT_STREAM)[0]

    def evaluate(self, policy) -> float:
        cfg = self.cfg
        return evaluate_policy(self.env, policy, cfg.eval_episodes, cfg.eval_seeds, base_seed=cfg.seed + _EVAL_SEED)[0]

    def score(self, dataset: Dataset, scores: PolicyScores, seed: int, with_kl: bool = True, value=None):
        cfg = self.cfg
        if value is None:
            policy, _ = train_bc(dataset, cfg.bc_config(seed), self.select)
        else:
            policy, _ = train_weighted_bc(dataset, value, cfg.bc_config(seed), self.select, cfg.weighted_delta)
        scores.returns.append(self.evaluate(policy))
        scores.mses.append(action_mse(self.expert, policy, self.mse_states))
        if with_kl:
            gauss = train_bc_gaussian(dataset, cfg.bc_config(seed))
            kl, _ = kl_divergence_estimate(self.expert, gauss, self.env, cfg.kl_episodes, cfg.seed + _KL_SEED)
            scores.kls.append(kl)


def run_fraction(cfg: ExperimentConfig, fraction: float, curve: bool = False, report_dir=None) -> dict:
    """All methods on one mixture dataset; returns the per-fraction metrics block."""
    env, expert = cfg.env(), cfg.expert()
    data = generate_mixture_dataset(env, expert, cfg.mixture(fraction), dataset_rng(cfg.seed, fraction))
    scorer = _Scorer(cfg)
    mc = cfg.model_configs()

    bc = PolicyScores()
    for b in range(cfg.bc_seeds):
        scorer.score(data, bc, b)

    value = train_value(data, replace(mc.value, seed=cfg.seed))
    weighted = PolicyScores()
    for b in range(cfg.bc_seeds):
        scorer.score(data, weighted, b, with_kl=False, value=value)

    tsbc = PolicyScores()
    per_iteration = {0: list(bc.returns)}
    stitch_summary = []
    for t in range(cfg.ts_seeds):
        ts_seed = cfg.seed * 100 + t
        snapshots = {}
        models = train_models(data, mc, ts_seed)
        final, report = run_ts(data, cfg.stitch_config(ts_seed), mc, models=models,
                               on_iteration=lambda k, ds: snapshots.__setitem__(k, ds))
        if report_dir is not None:
            save_json(report.to_dict(), Path(report_dir) / f"stitch_f{fraction_key(fraction)}_s{t}.json")
        stitch_summary.append({
            "ts_seed": ts_seed,
            "accepted": [it.accepted for it in report.iterations],
            "events": [it.events_accepted for it in report.iterations],
            "dataset_return": float(final.returns().mean()),
        })
        for b in range(cfg.bc_seeds):
            scorer.score(final, tsbc, b)
        if curve:
            per_iteration.setdefault(len(snapshots), []).extend(tsbc.returns[-cfg.bc_seeds:])
            for k in range(1, len(snapshots)):
                it_scores = PolicyScores()
                for b in range(cfg.bc_seeds):
                    scorer.score(snapshots[k], it_scores, b, with_kl=False)
                per_iteration.setdefault(k, []).extend(it_scores.returns)
        log.info("fraction %g, TS seed %d: %s", fraction, t, stitch_summary[-1])

    out = {
        "dataset_return": float(data.returns().mean()),
        "bc": bc.summary(),
        "tsbc": tsbc.summary(),
        "weighted_bc": weighted.summary(),
        "stitching": stitch_summary,
    }
    if curve:
        out["iterations"] = {str(k): [float(x) for x in v] for k, v in sorted(per_iteration.items())}
    return out


def run_pipeline(cfg: ExperimentConfig, out_dir, fractions=None, curve_fractions=(10.0,)) -> dict:
    """Sweep ``fractions`` and write metrics.json, metrics.csv and iterations.csv to ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fractions = tuple(cfg.fractions if fractions is None else fractions)
    blocks = {}
    for f in fractions:
        log.info("fraction %g%%", f)
        blocks[f] = run_fraction(cfg, f, curve=cfg.iteration_curve and f in curve_fractions,
                                 report_dir=out_dir / "reports")
    metrics = build_metrics(fractions, blocks)
    save_json(metrics, out_dir / "metrics.json")
    write_csv(metrics, out_dir)
    return metrics


def build_metrics(fractions, blocks: dict) -> dict:
    metrics = {"fractions": [float(f) for f in fractions]}
    for method in ("bc", "tsbc", "weighted_bc"):
        metrics[method] = {
            "returns": [blocks[f][method]["return"] for f in fractions],
            "returns_se": [blocks[f][method]["return_se"] for f in fractions],
            "returns_by_seed": [blocks[f][method]["returns"] for f in fractions],
            "kl": [blocks[f][method].get("kl") for f in fractions],
            "mse": [blocks[f][method]["mse"] for f in fractions],
        }
    metrics["scaled_kl_difference"] = scaled_kl_difference(metrics["bc"]["kl"], metrics["tsbc"]["kl"]).tolist()
    metrics["dataset_return"] = [blocks[f]["dataset_return"] for f in fractions]
    metrics["stitching"] = {fraction_key(f): blocks[f]["stitching"] for f in fractions}
    metrics["iterations"] = {fraction_key(f): blocks[f]["iterations"] for f in fractions if "iterations" in blocks[f]}
    return metrics


def write_csv(metrics: dict, out_dir) -> None:
    out_dir = Path(out_dir)
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fraction", "method", "return", "return_se", "kl", "mse"])
        for i, f in enumerate(metrics["fractions"]):
            for method in ("bc", "tsbc", "weighted_bc"):
                m = metrics[method]
                kl = m["kl"][i]
                w.writerow([f"{f:g}", method, repr(m["returns"][i]), repr(m["returns_se"][i]),
                            "" if kl is None else repr(kl), repr(m["mse"][i])])
    with open(out_dir / "iterations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fraction", "iteration", "return_mean", "return_std", "n"])
        for key, curve in metrics["iterations"].items():
            for k, vals in sorted(curve.items(), key=lambda kv: int(kv[0])):
                v = np.asarray(vals)
                w.writerow([key, k, repr(float(v.mean())), repr(float(v.std(ddof=1)) if len(v) > 1 else 0.0),
                            len(v)])


def load_metrics(path) -> dict:
    return json.loads(Path(path).read_text())
