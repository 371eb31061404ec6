"""Command-line entry point.

Subcommands::

    bkd train-teacher  --config FILE [--key value ...]
    bkd distill        --config FILE [--key value ...]
    bkd gen-aux        --config FILE [--key value ...]
    bkd eval           --config FILE --checkpoint PATH [--key value ...]
    bkd export-curve   --config FILE [--key value ...]

The config file holds ``key = value`` lines (``#`` starts a comment). Every
key can also be given as a flag, and flags win over the file. Each run
writes ``config.txt`` (the resolved config, itself a valid config file),
``report.csv``, ``summary.txt`` and checkpoints into the output directory.

CSV columns:

* ``report.csv``: epoch, phase, rows, train_loss, accuracy | mse
* ``aux.csv`` (gen-aux): origin, x0..x{d-1}, bkd_before, bkd_after
* ``metrics.csv`` (eval): metric, value
* ``curve.csv`` (export-curve): x, teacher, student, bkd

Exit codes: 0 success, 1 config error, 2 data error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import data, distill, experiments, nn
from .auxgen import SingularTransformError, compute_transform, generate_auxiliary
from .auxgen import generate_auxiliary_embedding
from .data import Dataset, DataFormatError
from .losses import KdHyperParams
from .nn import CheckpointError
from .tensor import NumericError, Tensor

log = logging.getLogger("bkd")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
TASKS = ("mnist", "synthetic", "token")
MODES = ("scratch", "vanilla_kd", "backward_kd")
KD_KEYS = tuple(f.name for f in fields(KdHyperParams))


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """Everything a run needs. KD keys left unset fall back to the task recipe."""

    task: str = "mnist"
    mode: str = "backward_kd"
    seed: int = 0
    data_dir: str = "data/mnist"
    output_dir: str = ""
    teacher: str = ""
    student: str = ""
    epochs: int = 0
    few_sample: float = 1.0
    activation: str = "relu"
    teacher_epochs: int = 0
    # synthetic task
    teacher_degree: int = 20
    student_degree: int = 15
    n_points: int = 8
    interval: tuple = (-1.0, 1.0)
    spacing: str = "random"
    grid_points: int = 1000
    # token task
    vocab: int = 20
    seq_len: int = 4
    n_train: int = 10000
    n_test: int = 2000
    n_transfer: int = 100
    student_init: str = "teacher_svd"
    teacher_dim: int = 8
    teacher_hidden: int = 64
    student_dim: int = 4
    student_hidden: int = 8
    kd: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.task == "synthetic" and self.mode == "scratch":
            raise ConfigError("mode=scratch is not defined for the synthetic task")
        if not 0.0 < self.few_sample <= 1.0:
            raise ConfigError("few_sample must lie in (0, 1]")
        if self.activation not in nn.ACTIVATIONS:
            raise ConfigError(f"activation must be one of {nn.ACTIVATIONS}")
        if self.student_init not in ("teacher_svd", "random"):
            raise ConfigError("student_init must be teacher_svd or random")
        try:
            self.hyper_params()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def hyper_params(self) -> KdHyperParams:
        if self.task == "mnist":
            base = experiments.MnistRecipe().kd
        elif self.task == "synthetic":
            base = self.synthetic_recipe().kd
        else:
            base = experiments.TokenRecipe().kd
        return base.replace(**{"seed": self.seed, **self.kd})

    def synthetic_recipe(self) -> experiments.SyntheticRecipe:
        return experiments.SyntheticRecipe(self.teacher_degree, self.student_degree,
                                           self.n_points, tuple(self.interval), self.spacing,
                                           self.grid_points)

    def token_recipe(self) -> experiments.TokenRecipe:
        r = experiments.TokenRecipe(self.vocab, self.seq_len, self.n_train, self.n_test,
                                    self.n_transfer, self.teacher_dim, self.teacher_hidden,
                                    self.student_dim, self.student_hidden)
        r.student_init = self.student_init
        if self.teacher_epochs:
            r.teacher_epochs = self.teacher_epochs
        r.kd = self.hyper_params()
        return r

    def mnist_recipe(self) -> experiments.MnistRecipe:
        r = experiments.MnistRecipe(activation=self.activation)
        if self.teacher_epochs:
            r.teacher_epochs = self.teacher_epochs
        r.kd = self.hyper_params()
        return r

    def echo(self) -> str:
        lines = []
        for f in fields(self):
            if f.name != "kd":
                lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        for k, v in self.hyper_params().as_dict().items():
            if k != "seed":
                lines.append(f"{k} = {_format(v)}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# parsing

_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig) if f.name != "kd"}
_KD_TYPES = {f.name: f.type for f in fields(KdHyperParams)}


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ",".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(key: str, text: str, type_name: str):
    text = text.strip()
    if "tuple" in type_name:
        if text.lower() == "none" and "Optional" in type_name:
            return None
        parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
        if len(parts) != 2:
            raise ConfigError(f"{key} expects 'lo,hi', got {text!r}")
        return (float(parts[0]), float(parts[1]))
    if type_name == "int":
        return int(text)
    if type_name == "float":
        return float(text)
    return text


def _assign(cfg: ExperimentConfig, key: str, text: str) -> None:
    key = key.strip().replace("-", "_")
    if key == "seed":
        cfg.seed = int(text)
    elif key in _FIELD_TYPES:
        setattr(cfg, key, _convert(key, text, str(_FIELD_TYPES[key])))
    elif key in _KD_TYPES:
        cfg.kd[key] = _convert(key, text, str(_KD_TYPES[key]))
    else:
        raise ConfigError(f"unknown key {key!r}")


def parse_config_text(text: str, source: str = "<config>",
                      cfg: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    cfg = cfg or ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        try:
            _assign(cfg, key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key.strip()}: {exc}") from None
    return cfg


def load_config(path: Optional[str], overrides: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        parse_config_text(p.read_text(), str(p), cfg)
    for key, value in overrides.items():
        try:
            _assign(cfg, key, value)
        except ValueError as exc:
            raise ConfigError(f"--{key}: {exc}") from None
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# data and models


def _load_model(path: str, what: str):
    if not path:
        raise ConfigError(f"{what} checkpoint path is not set")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} checkpoint not found: {p}")
    return nn.load(p)


def _datasets(cfg: ExperimentConfig, teacher=None,
              transfer: bool = True) -> tuple[Dataset, Optional[Dataset]]:
    """Training and held-out data. For the token task ``transfer`` selects the KD subset."""
    if cfg.task == "mnist":
        train, test = experiments.load_mnist(cfg.data_dir)
        if cfg.few_sample < 1.0:
            train = data.subsample(train, cfg.few_sample, cfg.seed, stratified=True)
        return train, test
    if cfg.task == "token":
        recipe = cfg.token_recipe()
        train, test = experiments.token_data(cfg.seed, recipe)
        if transfer:
            train = experiments.token_transfer(train, recipe)
        if cfg.few_sample < 1.0:
            train = data.subsample(train, cfg.few_sample, cfg.seed, stratified=True)
        return train, test
    if teacher is None:
        raise ConfigError("the synthetic task needs a teacher checkpoint")
    r = cfg.synthetic_recipe()
    X = data.gen_synthetic(teacher, r.n_points, r.interval, cfg.seed, r.spacing)
    grid = np.linspace(r.interval[0], r.interval[1], r.grid_points).reshape(-1, 1)
    y = teacher.forward(Tensor(grid)).data.ravel()
    return X, Dataset(grid, y, "regression", note="teacher on uniform grid")


def _new_student(cfg: ExperimentConfig, teacher=None):
    if cfg.task == "mnist":
        return experiments.mnist_student(cfg.seed, cfg.activation)
    if cfg.task == "token":
        recipe = cfg.token_recipe()
        if recipe.student_init == "teacher_svd" and teacher is None:
            teacher = _load_model(cfg.teacher, "teacher")
        return experiments.token_student(cfg.seed, recipe, teacher)
    hw = max(abs(v) for v in cfg.interval)
    return nn.init_polynomial(cfg.student_degree, cfg.seed, hw)


def _out_dir(cfg: ExperimentConfig, command: str) -> Path:
    if cfg.output_dir:
        out = Path(cfg.output_dir)
    else:
        out = experiments.output_root() / f"{command}-{cfg.task}-{cfg.mode}-seed{cfg.seed}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run(out: Path, cfg: ExperimentConfig, report: Optional[distill.TrainReport]) -> None:
    (out / "config.txt").write_text(cfg.echo())
    if report is not None:
        (out / "report.csv").write_text(report.to_csv())
        (out / "summary.txt").write_text(report.summary() + "\n")
        print(report.summary())


# ---------------------------------------------------------------------------
# commands


def cmd_train_teacher(cfg: ExperimentConfig) -> Path:
    out = _out_dir(cfg, "teacher")
    if cfg.task == "mnist":
        train, test = _datasets(cfg)
        teacher, report = experiments.train_mnist_teacher(train, test, cfg.seed,
                                                          cfg.mnist_recipe())
    elif cfg.task == "token":
        train, test = _datasets(cfg, transfer=False)
        teacher, report = experiments.token_teacher(train, test, cfg.seed, cfg.token_recipe())
    else:
        teacher = experiments.synthetic_teacher(cfg.teacher_degree, cfg.seed,
                                                tuple(cfg.interval))
        X, _ = _datasets(cfg, teacher)
        report = distill.TrainReport(cfg.hyper_params().as_dict(), metric_name="mse")
        report.final = distill.evaluate(teacher, X)
    nn.save(teacher, out / "teacher.bkd")
    _write_run(out, cfg, report)
    return out


def cmd_distill(cfg: ExperimentConfig) -> Path:
    teacher = None if cfg.mode == "scratch" else _load_model(cfg.teacher, "teacher")
    out = _out_dir(cfg, "distill")
    train, test = _datasets(cfg, teacher)
    p = cfg.hyper_params()
    S = _new_student(cfg, teacher)
    epochs = cfg.epochs or None
    ckpt = out / "checkpoints"
    token = cfg.task == "token"
    if cfg.mode == "scratch":
        budget = epochs or p.train_epochs * (p.hyper_epochs + 2)
        S, report = distill.train_scratch(S, train, p, budget, test, ckpt)
    elif cfg.mode == "vanilla_kd":
        fn = distill.vanilla_kd_embedding if token else distill.vanilla_kd
        S, report = fn(S, teacher, train, p, epochs, test, checkpoint_dir=ckpt)
    else:
        fn = distill.backward_kd_embedding if token else distill.backward_kd
        S, report = fn(S, teacher, train, p, test, checkpoint_dir=ckpt)
    nn.save(S, out / "student.bkd")
    _write_run(out, cfg, report)
    return out


def cmd_gen_aux(cfg: ExperimentConfig) -> Path:
    teacher = _load_model(cfg.teacher, "teacher")
    student = _load_model(cfg.student, "student")
    out = _out_dir(cfg, "aux")
    train, _ = _datasets(cfg, teacher)
    p = cfg.hyper_params()
    if cfg.task == "token":
        transform = compute_transform(student.W.data, teacher.W.data)
        Z_S = student.embed(train.inputs).data
        aux = generate_auxiliary_embedding(Z_S, student, teacher, transform, p)
    else:
        aux = generate_auxiliary(train.inputs, student, teacher, p,
                                 classification=cfg.task != "synthetic")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    d = aux.inputs.shape[1]
    w.writerow(["origin", *[f"x{i}" for i in range(d)], "bkd_before", "bkd_after"])
    for i in range(len(aux)):
        w.writerow([int(aux.origin[i]), *[repr(float(v)) for v in aux.inputs[i]],
                    repr(float(aux.origin_divergence[i])), repr(float(aux.divergence[i]))])
    (out / "aux.csv").write_text(buf.getvalue())
    (out / "config.txt").write_text(cfg.echo())
    print(f"aux samples={len(aux)} divergence={aux.mean_origin_divergence:.6g}"
          f"->{aux.mean_divergence:.6g} aborted={int(aux.aborted.sum())}")
    return out


def cmd_eval(cfg: ExperimentConfig, checkpoint: str) -> Path:
    model = _load_model(checkpoint, "model")
    teacher = _load_model(cfg.teacher, "teacher") if cfg.task == "synthetic" else None
    out = _out_dir(cfg, "eval")
    _, test = _datasets(cfg, teacher)
    metrics = distill.evaluate(model, test)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    for k, v in sorted(metrics.items()):
        w.writerow([k, repr(v)])
        print(f"{k}={v:.6g}")
    (out / "metrics.csv").write_text(buf.getvalue())
    (out / "config.txt").write_text(cfg.echo())
    return out


def cmd_export_curve(cfg: ExperimentConfig) -> Path:
    teacher = _load_model(cfg.teacher, "teacher")
    student = _load_model(cfg.student, "student")
    out = _out_dir(cfg, "curve")
    if teacher.in_dim != 1 or student.in_dim != 1:
        raise ConfigError("export-curve needs models with a scalar input")
    g = np.linspace(cfg.interval[0], cfg.interval[1], cfg.grid_points).reshape(-1, 1)
    t = teacher.forward(Tensor(g)).data
    s = student.forward(Tensor(g)).data
    bkd = np.sum((s - t) ** 2, axis=1)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "teacher", "student", "bkd"])
    for i in range(len(g)):
        w.writerow([repr(float(g[i, 0])), repr(float(t[i, 0])), repr(float(s[i, 0])),
                    repr(float(bkd[i]))])
    (out / "curve.csv").write_text(buf.getvalue())
    (out / "config.txt").write_text(cfg.echo())
    print(f"curve points={len(g)} mean_bkd={bkd.mean():.6g}")
    return out


# ---------------------------------------------------------------------------
# entry point

_COMMANDS = ("train-teacher", "distill", "gen-aux", "eval", "export-curve")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bkd", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    keys = [*_FIELD_TYPES, *(k for k in KD_KEYS if k != "seed")]
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        if name == "eval":
            p.add_argument("--checkpoint", required=True)
        for key in keys:
            p.add_argument(f"--{key.replace('_', '-')}", dest=f"set_{key}",
                           default=argparse.SUPPRESS, metavar="VALUE")
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("set_")}
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "train-teacher":
            out = cmd_train_teacher(cfg)
        elif args.command == "distill":
            out = cmd_distill(cfg)
        elif args.command == "gen-aux":
            out = cmd_gen_aux(cfg)
        elif args.command == "eval":
            out = cmd_eval(cfg, args.checkpoint)
        else:
            out = cmd_export_curve(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, distill.TrainingDiverged, SingularTransformError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"output: {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
