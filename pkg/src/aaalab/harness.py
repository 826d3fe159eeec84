"""Experiment orchestration behind the CLI: train, calibrate, attack, sweep, trace.

Configuration is a flat ``key = value`` text file (``#`` starts a comment)
plus ``--set key=value`` overrides. Every random draw derives from the master
seed through :class:`~aaalab.numkit.RngStream` keys:

* dataset and training: ``seed`` directly (see :func:`~aaalab.model.make_blobs`)
* data split: key ``(SPLIT_TAG,)``
* attack on test sample ``i`` with method ``m``: key ``(ATTACK_TAG, METHODS.index(m), i)``;
  the same stream is used under every defense
* target class for sample ``i``: key ``(TARGET_TAG, i)``
* RND evaluation noise for sample ``i``: key ``(RND_EVAL_TAG, i)``

so any single sample can be rerun in isolation.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from aaalab.attacks import LOSS_KINDS, METHODS, NORMS, AttackConfig, AttackTrace, audit_trace, greedy_loop
from aaalab.defense import DEFAULT_TEMPERATURE_GRID, AaaConfig, DefendedModel, tune_temperature
from aaalab.metrics import adversarial_accuracy, average_queries, ece
from aaalab.model import (
    LabeledDataset,
    MlpWeights,
    accuracy,
    forward,
    load_weights,
    make_blobs,
    quantize8,
    save_weights,
    train_mlp,
)
from aaalab.numkit import RngStream, softmax_rows

log = logging.getLogger(__name__)

SPLIT_TAG = 1
ATTACK_TAG = 2
TARGET_TAG = 3
RND_EVAL_TAG = 4

DEFENSES = ("none", "aaa", "rnd")
SWEEP_PARAMS = {"t": "t", "alpha": "alpha", "beta": "beta"}


class ConfigError(ValueError):
    """Bad key, value or path in the experiment configuration (exit code 1)."""


class InvariantViolation(RuntimeError):
    """An emitted trace broke a loop invariant (exit code 2)."""


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _names(s: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in s.split(",") if v.strip())


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_float(s: str):
    return None if s.strip().lower() in ("", "none", "auto") else float(s)


def _temperature(s: str):
    return "auto" if s.strip().lower() == "auto" else float(s)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    # data
    n_per_class: int = 1000
    classes: int = 3
    dim: int = 128
    spread: float = 0.2
    val_frac: float = 0.2
    test_frac: float = 0.4
    # model
    hidden: tuple = (32, 32)
    epochs: int = 30
    train_lr: float = 1e-2
    batch_size: int = 32
    model_path: str = ""
    logit_scale: float = 1.0
    # defenses
    defenses: tuple = DEFENSES
    aaa_t: float = 6.0
    aaa_alpha: float = 1.0
    aaa_beta: float = 5.0
    aaa_temperature: object = "auto"
    aaa_iterations: int = 100
    aaa_lr: float = 0.1
    aaa_kappa: float = 1e-3
    temperature_grid: tuple = DEFAULT_TEMPERATURE_GRID
    rnd_sigma: float = 0.02
    # attacks
    methods: tuple = METHODS
    norm: str = "linf"
    eps: float = 0.3
    budget: int = 500
    loss: str = "logit-margin"
    targeted: bool = False
    n_attack: int = 100
    square_p: float = 0.05
    simba_step: float | None = None
    nes_delta: float = 0.01
    nes_lr: float = 0.02
    nes_q: int = 20
    # metrics
    checkpoints: tuple = (100, 500)
    bins: int = 15
    # sweep / trace
    sweep_param: str = "alpha"
    sweep_grid: tuple = (0.0, 0.5, 1.0, 2.0)
    trace_sample: int = 0
    trace_method: str = "square"
    trace_defense: str = "aaa"
    out: str = "runs"

    def validate(self) -> "ExperimentConfig":
        bad = [d for d in self.defenses if d not in DEFENSES]
        bad += [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown defense/method names: {bad}")
        if self.norm not in NORMS or self.loss not in LOSS_KINDS:
            raise ConfigError(f"bad norm {self.norm!r} or loss {self.loss!r}")
        if list(self.checkpoints) != sorted(self.checkpoints) or any(c < 0 for c in self.checkpoints):
            raise ConfigError("checkpoints must be non-negative and ascending")
        if not (0 < self.val_frac and 0 < self.test_frac and self.val_frac + self.test_frac < 1):
            raise ConfigError("need 0 < val_frac, test_frac with val_frac + test_frac < 1")
        if self.sweep_param not in SWEEP_PARAMS:
            raise ConfigError(f"sweep.param must be one of {sorted(SWEEP_PARAMS)}")
        if self.trace_method not in METHODS or self.trace_defense not in DEFENSES:
            raise ConfigError("bad trace.method or trace.defense")
        if self.model_path and not Path(self.model_path).exists():
            raise ConfigError(f"model.path {self.model_path!r} does not exist")
        return self


# config-file key -> (field name, parser)
KEYS = {
    "seed": ("seed", int),
    "data.n_per_class": ("n_per_class", int),
    "data.classes": ("classes", int),
    "data.dim": ("dim", int),
    "data.spread": ("spread", float),
    "data.val_frac": ("val_frac", float),
    "data.test_frac": ("test_frac", float),
    "model.hidden": ("hidden", _ints),
    "model.epochs": ("epochs", int),
    "model.lr": ("train_lr", float),
    "model.batch_size": ("batch_size", int),
    "model.path": ("model_path", str),
    "model.logit_scale": ("logit_scale", float),
    "defenses": ("defenses", _names),
    "aaa.t": ("aaa_t", float),
    "aaa.alpha": ("aaa_alpha", float),
    "aaa.beta": ("aaa_beta", float),
    "aaa.temperature": ("aaa_temperature", _temperature),
    "aaa.iterations": ("aaa_iterations", int),
    "aaa.lr": ("aaa_lr", float),
    "aaa.kappa": ("aaa_kappa", float),
    "aaa.temperature_grid": ("temperature_grid", _floats),
    "rnd.sigma": ("rnd_sigma", float),
    "attack.methods": ("methods", _names),
    "attack.norm": ("norm", str),
    "attack.eps": ("eps", float),
    "attack.budget": ("budget", int),
    "attack.loss": ("loss", str),
    "attack.targeted": ("targeted", _bool),
    "attack.n_samples": ("n_attack", int),
    "attack.square_p": ("square_p", float),
    "attack.simba_step": ("simba_step", _opt_float),
    "attack.nes_delta": ("nes_delta", float),
    "attack.nes_lr": ("nes_lr", float),
    "attack.nes_q": ("nes_q", int),
    "metrics.checkpoints": ("checkpoints", _ints),
    "metrics.bins": ("bins", int),
    "sweep.param": ("sweep_param", str),
    "sweep.grid": ("sweep_grid", _floats),
    "trace.sample": ("trace_sample", int),
    "trace.method": ("trace_method", str),
    "trace.defense": ("trace_defense", str),
    "out": ("out", str),
}


def parse_pairs(pairs, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply ``(key, value)`` string pairs on top of ``base``."""
    updates = {}
    for key, value in pairs:
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        name, parse = KEYS[key]
        try:
            updates[name] = parse(value.strip())
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    return replace(base or ExperimentConfig(), **updates)


def read_config_file(path) -> list[tuple[str, str]]:
    pairs = []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def config_to_text(cfg: ExperimentConfig) -> str:
    lines = []
    for key, (name, _) in KEYS.items():
        v = getattr(cfg, name)
        if isinstance(v, tuple):
            v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        elif v is None:
            v = "none"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- data/model


@dataclass(frozen=True)
class Splits:
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset


def make_splits(cfg: ExperimentConfig) -> Splits:
    data = make_blobs(cfg.n_per_class, cfg.classes, cfg.dim, cfg.spread, cfg.seed)
    data = LabeledDataset(quantize8(data.x), data.y, data.classes)
    n = len(data)
    order = RngStream(cfg.seed, key=(SPLIT_TAG,)).permutation(n)
    n_val = int(round(cfg.val_frac * n))
    n_test = int(round(cfg.test_frac * n))
    return Splits(
        train=data.subset(order[n_val + n_test :]),
        val=data.subset(order[:n_val]),
        test=data.subset(order[n_val : n_val + n_test]),
    )


def _model_file(cfg: ExperimentConfig) -> Path:
    return Path(cfg.model_path) if cfg.model_path else Path(cfg.out) / "model.txt"


def _train(cfg: ExperimentConfig, splits: Splits) -> tuple[MlpWeights, float]:
    return train_mlp(splits.train, cfg.hidden, cfg.epochs, cfg.seed, cfg.batch_size, cfg.train_lr)


def obtain_model(cfg: ExperimentConfig, splits: Splits) -> MlpWeights:
    """Load the configured weights (training them first if the file is absent).

    ``logit_scale`` is applied after loading; it is the overconfidence knob.
    """
    path = _model_file(cfg)
    if path.exists():
        w = load_weights(path)
    else:
        w, _ = _train(cfg, splits)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_weights(w, path)
    return w.scaled_output(cfg.logit_scale) if cfg.logit_scale != 1.0 else w


def aaa_config(cfg: ExperimentConfig, temperature: float = 1.0) -> AaaConfig:
    return AaaConfig(
        t=cfg.aaa_t,
        alpha=cfg.aaa_alpha,
        beta=cfg.aaa_beta,
        temperature=temperature,
        iterations=cfg.aaa_iterations,
        lr=cfg.aaa_lr,
        kappa=cfg.aaa_kappa,
    )


def resolve_temperature(cfg: ExperimentConfig, weights: MlpWeights, splits: Splits) -> float:
    if cfg.aaa_temperature != "auto":
        return float(cfg.aaa_temperature)
    return tune_temperature(forward(weights, splits.val.x), splits.val.y, aaa_config(cfg), cfg.temperature_grid, cfg.bins)


def build_defended(cfg: ExperimentConfig, weights: MlpWeights, mode: str, temperature: float) -> DefendedModel:
    return DefendedModel(weights, mode, aaa_config(cfg, temperature), cfg.rnd_sigma)


def attack_config(cfg: ExperimentConfig, method: str, target=None) -> AttackConfig:
    return AttackConfig(
        method=method,
        norm=cfg.norm,
        epsilon=cfg.eps,
        budget=cfg.budget,
        targeted=cfg.targeted,
        target=target,
        loss_kind=cfg.loss,
        seed=cfg.seed,
        square_p=cfg.square_p,
        simba_step=cfg.simba_step,
        nes_delta=cfg.nes_delta,
        nes_lr=cfg.nes_lr,
        nes_q=cfg.nes_q,
    )


def target_for(cfg: ExperimentConfig, i: int, label: int) -> int | None:
    if not cfg.targeted:
        return None
    wrong = [k for k in range(cfg.classes) if k != label]
    return wrong[int(RngStream(cfg.seed, key=(TARGET_TAG, i)).integers(0, len(wrong)))]


def attack_stream(cfg: ExperimentConfig, method: str, i: int) -> RngStream:
    return RngStream(cfg.seed, key=(ATTACK_TAG, METHODS.index(method), i))


# ---------------------------------------------------------------- evaluation


def defended_predictions(cfg: ExperimentConfig, model: DefendedModel, data: LabeledDataset):
    """``(pred, confidence)`` of the defended model on clean samples."""
    if model.mode == "rnd":
        z = np.vstack([model.logits(x, RngStream(cfg.seed, key=(RND_EVAL_TAG, i))) for i, x in enumerate(data.x)])
    else:
        z = model.logits(data.x)
    p = softmax_rows(z)
    return np.argmax(z, axis=1), p.max(axis=1)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_predictions(path: Path, labels, pred, conf) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "label", "pred", "confidence"])
        for i, (y, p, c) in enumerate(zip(labels, pred, conf)):
            w.writerow([i, int(y), int(p), _fmt(c)])


def read_predictions(path: Path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    labels = np.array([int(r[1]) for r in rows])
    pred = np.array([int(r[2]) for r in rows])
    conf = np.array([float(r[3]) for r in rows])
    return labels, pred, conf


def cell_metrics(traces, labels, pred, conf, checkpoints, bins) -> dict:
    adv = {str(b): adversarial_accuracy(traces, b) for b in checkpoints}
    return {
        "clean_accuracy": float(np.mean(pred == labels)),
        "ece": ece(conf, pred == labels, bins).ece,
        "attack_clean_accuracy": adversarial_accuracy(traces, 0),
        "adversarial_accuracy": adv,
        "average_queries": average_queries(traces),
        "n_samples": len(traces),
    }


def run_cell(cfg: ExperimentConfig, model: DefendedModel, method: str, data: LabeledDataset, trace_dir: Path | None):
    """Attack the first ``n_attack`` samples of ``data``; audit and save each trace."""
    traces = []
    n = min(cfg.n_attack, len(data))
    for i in range(n):
        y = int(data.y[i])
        acfg = attack_config(cfg, method, target_for(cfg, i, y))
        tr = greedy_loop(model, data.x[i], y, acfg, attack_stream(cfg, method, i), record_candidates=True)
        problems = audit_trace(tr, data.x[i], acfg.norm, acfg.epsilon)
        if problems:
            raise InvariantViolation(f"{model.mode}/{method} sample {i}: {problems[0]}")
        tr.candidates = None
        if trace_dir is not None:
            tr.write_csv(trace_dir / f"trace_{i:05d}.csv")
        traces.append(tr)
    return traces


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def cmd_train(cfg: ExperimentConfig) -> dict:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = make_splits(cfg)
    w, train_acc = _train(cfg, splits)
    path = _model_file(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_weights(w, path)
    report = {
        "model_path": str(path),
        "train_accuracy": train_acc,
        "val_accuracy": accuracy(w, splits.val),
        "test_accuracy": accuracy(w, splits.test),
        "sizes": {"train": len(splits.train), "val": len(splits.val), "test": len(splits.test)},
    }
    _dump_json(out / "train_report.json", report)
    return report


def cmd_calibrate(cfg: ExperimentConfig) -> dict:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = make_splits(cfg)
    w = obtain_model(cfg, splits)
    base = aaa_config(cfg)
    t_star = tune_temperature(forward(w, splits.val.x), splits.val.y, base, cfg.temperature_grid, cfg.bins)

    def split_eces(data):
        z = forward(w, data.x)
        p = softmax_rows(z)
        none = ece(p.max(axis=1), np.argmax(z, axis=1) == data.y, cfg.bins).ece
        res = {"none": none}
        for name, temp in (("aaa_t1", 1.0), ("aaa_tstar", t_star)):
            dm = DefendedModel(w, "aaa", replace(base, temperature=temp))
            pred, conf = defended_predictions(cfg, dm, data)
            res[name] = ece(conf, pred == data.y, cfg.bins).ece
        return res

    report = {"temperature": t_star, "val": split_eces(splits.val), "test": split_eces(splits.test)}
    _dump_json(out / "calibration.json", report)
    return report


def run_attack(cfg: ExperimentConfig, out: Path, splits: Splits | None = None, weights: MlpWeights | None = None) -> dict:
    """Attack x defense grid; writes traces, predictions and ``report.json`` under ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    splits = splits or make_splits(cfg)
    weights = weights if weights is not None else obtain_model(cfg, splits)
    temperature = resolve_temperature(cfg, weights, splits) if "aaa" in cfg.defenses else 1.0
    (out / "config.txt").write_text(config_to_text(cfg))
    report = {"temperature": temperature, "budget": cfg.budget, "checkpoints": list(cfg.checkpoints), "cells": {}}
    for defense in cfg.defenses:
        model = build_defended(cfg, weights, defense, temperature)
        ddir = out / defense
        ddir.mkdir(exist_ok=True)
        pred, conf = defended_predictions(cfg, model, splits.test)
        write_predictions(ddir / "predictions.csv", splits.test.y, pred, conf)
        for method in cfg.methods:
            mdir = ddir / method
            mdir.mkdir(exist_ok=True)
            traces = run_cell(cfg, model, method, splits.test, mdir)
            cell = cell_metrics(traces, splits.test.y, pred, conf, cfg.checkpoints, cfg.bins)
            report["cells"][f"{defense}/{method}"] = cell
            log.info("%s/%s: %s", defense, method, cell["adversarial_accuracy"])
    _dump_json(out / "report.json", report)
    return report


def cmd_attack(cfg: ExperimentConfig) -> dict:
    return run_attack(cfg, Path(cfg.out) / "attack")


def recompute_report(run_dir, cfg: ExperimentConfig) -> dict:
    """Rebuild ``report.json`` cells from emitted trace and prediction files."""
    run_dir = Path(run_dir)
    cells = {}
    for defense in cfg.defenses:
        labels, pred, conf = read_predictions(run_dir / defense / "predictions.csv")
        for method in cfg.methods:
            files = sorted((run_dir / defense / method).glob("trace_*.csv"))
            traces = [AttackTrace.read_csv(f, cfg.budget) for f in files]
            cells[f"{defense}/{method}"] = cell_metrics(traces, labels, pred, conf, cfg.checkpoints, cfg.bins)
    return cells


def cmd_sweep(cfg: ExperimentConfig) -> list[dict]:
    out = Path(cfg.out) / "sweep"
    out.mkdir(parents=True, exist_ok=True)
    splits = make_splits(cfg)
    weights = obtain_model(cfg, splits)
    field_name = "aaa_" + SWEEP_PARAMS[cfg.sweep_param]
    rows = []
    for value in cfg.sweep_grid:
        point = replace(cfg, **{field_name: float(value)})
        rep = run_attack(point, out / f"{cfg.sweep_param}={value!r}", splits, weights)
        for cell_name, cell in rep["cells"].items():
            row = {
                "param": cfg.sweep_param,
                "value": float(value),
                "cell": cell_name,
                "temperature": rep["temperature"],
                "clean_accuracy": cell["clean_accuracy"],
                "ece": cell["ece"],
            }
            for cp, acc in cell["adversarial_accuracy"].items():
                row[f"adv_acc@{cp}"] = acc
            row["average_queries"] = cell["average_queries"]
            rows.append(row)
    with open(out / f"sweep_{cfg.sweep_param}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) if isinstance(v, float) else v for k, v in row.items()})
    return rows


def cmd_trace(cfg: ExperimentConfig) -> Path:
    """Attack one test sample and write its defended/undefended loss trace."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = make_splits(cfg)
    weights = obtain_model(cfg, splits)
    temperature = resolve_temperature(cfg, weights, splits) if cfg.trace_defense == "aaa" else 1.0
    model = build_defended(cfg, weights, cfg.trace_defense, temperature)
    i = cfg.trace_sample
    if not 0 <= i < len(splits.test):
        raise ConfigError(f"trace.sample {i} outside the test split")
    x, y = splits.test.x[i], int(splits.test.y[i])
    acfg = attack_config(cfg, cfg.trace_method, target_for(cfg, i, y))
    tr = greedy_loop(model, x, y, acfg, attack_stream(cfg, cfg.trace_method, i), record_candidates=True)
    problems = audit_trace(tr, x, acfg.norm, acfg.epsilon)
    if problems:
        raise InvariantViolation(problems[0])
    path = out / f"trace_{cfg.trace_defense}_{cfg.trace_method}_{i:05d}.csv"
    tr.write_csv(path)
    return path
