"""Command-line front end: ``ecl {make-dataset,train,eval,landscape}``.

Experiments are described by a flat ``key = value`` file with dotted
section prefixes::

    seed = 3
    dataset.gamma = 100
    train.alpha = 0.6

Every run writes into ``<out_dir>/<run_name>/``.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import expertnet as xn
from .collab import NumericalAbort, TrainConfig, fit, model_config_for, predictor_logits
from .losses import KDConfig, posthoc_adjust
from .ltdata import (
    ClassPrior,
    DataError,
    LongTailSpec,
    build_synthetic_lt_dataset,
    group_classes,
    load_dataset,
    make_class_counts,
    save_counts,
    save_dataset,
)
from .metrics import (
    ece,
    evaluate,
    pairwise_feature_distance,
    predictor_loss_acc,
    report_json,
    scan_predictor,
)

log = logging.getLogger("ecl")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULTS = {
    "run_name": "ecl",
    "out_dir": "runs",
    "seed": 0,
    "dataset.num_classes": 10,
    "dataset.n_max": 500,
    "dataset.gamma": 100.0,
    "dataset.feature_dim": 16,
    "dataset.separation": 2.0,
    "dataset.test_per_class": 100,
    "dataset.path": "",
    "model.hidden": (64, 64),
    "model.d_prime": 32,
    "model.queue_size": 1024,
    "model.momentum": 0.999,
    "train.K": 3,
    "train.epochs": 50,
    "train.batch_size": 64,
    "train.learning_rate": 0.05,
    "train.optimizer": "momentum",
    "train.sgd_momentum": 0.9,
    "train.weight_decay": 5e-4,
    "train.alpha": 0.6,
    "train.beta": 1.0,
    "train.tau_kd": 1.0,
    "train.tau_con": 1.0,
    "train.tau_bc": 1.0,
    "train.prob_floor": 1e-6,
    "train.jitter_sigma": 0.1,
    "train.bkt_scope": "student",
    "train.kd_feature_weighted": False,
    "prior.target": "uniform",
    "eval.posthoc_tau": 0.0,
    "eval.ece_bins": 15,
    "eval.expert": "ensemble",
    "eval.landscape_levels": (0.0, 0.2, 0.4, 0.6, 0.8, 1.0),
    "eval.landscape_repeats": 5,
}


class ConfigError(ValueError):
    pass


def _parse_value(key, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0])
            return tuple(kind(v) for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict

    @classmethod
    def from_text(cls, text: str, overrides: dict | None = None) -> "ExperimentConfig":
        values = dict(DEFAULTS)
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, raw = (p.strip() for p in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(key, raw)
        for key, val in (overrides or {}).items():
            values[key] = val
        return cls(values)

    @classmethod
    def load(cls, path, overrides=None) -> "ExperimentConfig":
        if path is None:
            return cls.from_text("", overrides)
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, overrides)

    def __getitem__(self, key):
        return self.values[key]

    def resolved_text(self) -> str:
        return "".join(f"{k} = {_format_value(self.values[k])}\n" for k in sorted(self.values))

    @property
    def run_dir(self) -> Path:
        return Path(self["out_dir"]) / self["run_name"]

    @property
    def dataset_path(self) -> Path:
        return Path(self["dataset.path"]) if self["dataset.path"] else self.run_dir / "dataset.csv"

    def long_tail_spec(self) -> LongTailSpec:
        try:
            return LongTailSpec(
                self["dataset.num_classes"], self["dataset.n_max"], self["dataset.gamma"],
                self["seed"],
            )
        except DataError as exc:
            raise ConfigError(str(exc)) from exc

    def prior(self, counts, tau_bc=None) -> ClassPrior:
        tau = self["train.tau_bc"] if tau_bc is None else tau_bc
        target = self["prior.target"]
        if target == "uniform":
            p_t = None
        else:
            try:
                p_t = np.array([float(v) for v in target.split(",")])
            except ValueError as exc:
                raise ConfigError(f"bad prior.target {target!r}") from exc
            p_t = p_t / p_t.sum()
        try:
            return ClassPrior.from_counts(counts, tau, p_t)
        except DataError as exc:
            raise ConfigError(str(exc)) from exc

    def model_config(self, dataset) -> xn.ModelConfig:
        return model_config_for(
            dataset,
            hidden=self["model.hidden"],
            d_prime=self["model.d_prime"],
            queue_size=self["model.queue_size"],
            momentum=self["model.momentum"],
        )

    def train_config(self, prior: ClassPrior) -> TrainConfig:
        kd = KDConfig(
            tau_kd=self["train.tau_kd"],
            alpha=self["train.alpha"],
            beta=self["train.beta"],
            tau_con=self["train.tau_con"],
            prob_floor=self["train.prob_floor"],
        )
        return TrainConfig(
            prior=prior,
            K=self["train.K"],
            epochs=self["train.epochs"],
            batch_size=self["train.batch_size"],
            learning_rate=self["train.learning_rate"],
            optimizer=self["train.optimizer"],
            sgd_momentum=self["train.sgd_momentum"],
            weight_decay=self["train.weight_decay"],
            kd=kd,
            seed=self["seed"],
            jitter_sigma=self["train.jitter_sigma"],
            bkt_scope=self["train.bkt_scope"],
            kd_feature_weighted=self["train.kd_feature_weighted"],
        )


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _r(x) -> str:
    return repr(float(x))


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _jsonable(arr):
    return [None if (isinstance(v, float) and math.isnan(v)) else v for v in np.asarray(arr).tolist()]


def _history_csv(rows) -> str:
    lines = ["epoch,sup,kd_logit,kd_feature,con,total"]
    for i, bd in enumerate(rows, start=1):
        lines.append(",".join([str(i)] + [_r(v) for v in bd.as_row()]))
    return "\n".join(lines) + "\n"


def _matrix_csv(mat, fmt) -> str:
    c = mat.shape[0]
    lines = ["true\\pred," + ",".join(str(j) for j in range(c))]
    for i in range(c):
        lines.append(",".join([str(i)] + [fmt(v) for v in mat[i]]))
    return "\n".join(lines) + "\n"


def _load_run_inputs(cfg: ExperimentConfig, checkpoint, dataset_path):
    ds_path = Path(dataset_path) if dataset_path else cfg.dataset_path
    dataset = load_dataset(ds_path)
    ck_path = Path(checkpoint) if checkpoint else cfg.run_dir / "ckpt.bin"
    if not ck_path.exists():
        raise DataError(f"checkpoint not found: {ck_path}")
    ck = xn.load_checkpoint(ck_path)
    if ck.manifest["C"] != dataset.num_classes or ck.manifest["in_dim"] != dataset.feature_dim:
        raise DataError("checkpoint and dataset disagree on class count or input dimension")
    return dataset, ck


def _select_expert(args, cfg: ExperimentConfig, k_count: int):
    if getattr(args, "ensemble", False):
        return None
    if getattr(args, "expert", None) is not None:
        k = args.expert
    elif cfg["eval.expert"] == "ensemble":
        return None
    else:
        try:
            k = int(cfg["eval.expert"])
        except ValueError as exc:
            raise ConfigError(f"bad eval.expert {cfg['eval.expert']!r}") from exc
    if not 0 <= k < k_count:
        raise DataError(f"expert index {k} out of range (K={k_count})")
    return k


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_make_dataset(cfg: ExperimentConfig, args=None) -> int:
    spec = cfg.long_tail_spec()
    try:
        dataset = build_synthetic_lt_dataset(
            spec, cfg["dataset.feature_dim"], cfg["dataset.separation"],
            cfg["dataset.test_per_class"],
        )
    except DataError as exc:
        raise ConfigError(str(exc)) from exc
    out = cfg.run_dir
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, cfg.dataset_path)
    save_counts(make_class_counts(spec), spec.gamma, out / "counts.json")
    _write(out / "config.resolved", cfg.resolved_text())
    groups = group_classes(dataset.counts)
    print(json.dumps({"counts": dataset.counts.tolist(), "groups": groups.as_dict()}))
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args=None) -> int:
    dataset = load_dataset(cfg.dataset_path)
    prior = cfg.prior(dataset.counts)
    config = cfg.train_config(prior)
    model = cfg.model_config(dataset)
    out = cfg.run_dir
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.resolved", cfg.resolved_text())
    try:
        state = fit(dataset, config, model)
    except NumericalAbort as exc:
        log.error("numerical abort: %s", exc)
        return EXIT_NUMERIC
    xn.save_checkpoint(out / "ckpt.bin", state.experts, state.twins, state.queues)
    _write(out / "history.csv", _history_csv(state.epoch_history))
    if state.epoch_history:
        log.info("final epoch loss %s", state.epoch_history[-1])
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    dataset, ck = _load_run_inputs(cfg, args.checkpoint, args.dataset)
    tau = cfg["eval.posthoc_tau"] if args.posthoc_tau is None else args.posthoc_tau
    expert = _select_expert(args, cfg, len(ck.experts))
    prior = cfg.prior(dataset.counts)
    x, y = dataset.x_test, dataset.y_test
    probs = posthoc_adjust(predictor_logits(ck.experts, x, expert), prior, tau)
    groups = group_classes(dataset.counts)
    report = evaluate(probs, y, groups)
    report.ece, bins, report.ece_binned = ece(probs, y, cfg["eval.ece_bins"])
    loss, acc = predictor_loss_acc(ck.experts, x, y, prior, expert, tau)
    feats = [xn.encode(e, x) for e in ck.experts]
    dist = pairwise_feature_distance(feats, y, dataset.num_classes)
    dist_json = {k: _jsonable(v) for k, v in dist.items()}
    mean_dist = float(np.mean([np.nanmean(v) for v in dist.values()])) if dist else None

    out = cfg.run_dir
    _write(
        out / "metrics.json",
        report_json(
            report,
            bins,
            loss=loss,
            groups=groups.as_dict(),
            feature_distance=dist_json,
            mean_feature_distance=mean_dist,
        ),
    )
    _write(out / "reliability.csv", bins.to_csv())
    _write(out / "confusion.csv", _matrix_csv(report.confusion, lambda v: str(int(v))))
    _write(out / "confusion_log.csv", _matrix_csv(np.log1p(report.confusion), _r))
    hist = ["class,count"] + [f"{i},{int(n)}" for i, n in enumerate(report.pred_histogram)]
    _write(out / "pred_histogram.csv", "\n".join(hist) + "\n")
    for k, f in enumerate(feats):
        lines = ["class," + ",".join(f"f{j}" for j in range(f.shape[1]))]
        lines += [",".join([str(int(c))] + [_r(v) for v in row]) for c, row in zip(y, f)]
        _write(out / f"features_expert{k}.csv", "\n".join(lines) + "\n")
    print(json.dumps({"top1": report.top1, "loss": loss, "ece": report.ece,
                      "acc_many": report.acc_many, "acc_medium": report.acc_medium,
                      "acc_few": report.acc_few}))
    return EXIT_OK


def cmd_landscape(cfg: ExperimentConfig, args) -> int:
    dataset, ck = _load_run_inputs(cfg, args.checkpoint, args.dataset)
    tau = cfg["eval.posthoc_tau"] if args.posthoc_tau is None else args.posthoc_tau
    expert = _select_expert(args, cfg, len(ck.experts))
    levels = cfg["eval.landscape_levels"]
    if args.levels is not None:
        try:
            levels = [float(v) for v in args.levels.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad --levels {args.levels!r}") from exc
    repeats = cfg["eval.landscape_repeats"] if args.repeats is None else args.repeats
    prior = cfg.prior(dataset.counts)
    try:
        scan = scan_predictor(ck.experts, dataset.x_test, dataset.y_test, prior, levels,
                              repeats, cfg["seed"], expert, tau)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _write(cfg.run_dir / "landscape.csv", scan.to_csv())
    print(scan.to_csv(), end="")
    return EXIT_OK


COMMANDS = {
    "make-dataset": cmd_make_dataset,
    "train": cmd_train,
    "eval": cmd_eval,
    "landscape": cmd_landscape,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="key = value config file")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output root (overrides out_dir)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="ecl", parents=[common], description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("make-dataset", parents=[common], help="generate a synthetic long-tailed dataset")
    sub.add_parser("train", parents=[common], help="train the collaborative experts")
    for name, text in (("eval", "evaluate a checkpoint"), ("landscape", "perturbation landscape scan")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--dataset", default=None)
        grp = p.add_mutually_exclusive_group()
        grp.add_argument("--expert", type=int, default=None)
        grp.add_argument("--ensemble", action="store_true")
        p.add_argument("--posthoc-tau", type=float, default=None)
        if name == "landscape":
            p.add_argument("--levels", default=None, help="comma-separated noise levels")
            p.add_argument("--repeats", type=int, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    overrides = {}
    if hasattr(args, "out"):
        overrides["out_dir"] = args.out
    if hasattr(args, "seed"):
        overrides["seed"] = args.seed
    try:
        cfg = ExperimentConfig.load(getattr(args, "config", None), overrides)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataError, OSError, IndexError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except NumericalAbort as exc:
        log.error("numerical abort: %s", exc)
        return EXIT_NUMERIC
    except ValueError as exc:
        # invalid spec values surface from the domain constructors
        log.error("config error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
