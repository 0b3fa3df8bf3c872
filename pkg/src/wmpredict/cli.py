"""Command-line entry point.

    wmpredict ingest | synth | train | compare-measures | ensemble | gradcheck

Options come from built-in defaults, then an optional INI file (``--config``;
sections ``[config]``, ``[run]`` and ``[<command>]`` in increasing priority),
then command-line flags. Every run that has an output directory writes a
``manifest.txt`` whose ``[config]`` section can be fed back via ``--config``.

Exit codes: 0 success, 2 input validation failure, 3 numerical failure,
4 configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import logging
import platform
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .features import (
    ALL_MEASURES,
    N_FEATURES,
    AtlasLayout,
    MeasureId,
    SchemaError,
    bundle_paths,
    measure_path,
    parse_measure_list,
    read_labels_file,
    read_layout_file,
    read_measure_file,
    write_bundle,
)
from .models import ModelSpec, Task, Variant, build
from .nn import grad_check, make_rng
from .synth import generate, planted_spec
from .training import (
    Dataset,
    Hyperparams,
    TrainingDivergence,
    cross_validate,
    cross_validate_ensemble,
    plan_folds,
    spec_with_dropout,
    write_fold_reports,
)

log = logging.getLogger("wmpredict")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_CONFIG = 0, 2, 3, 4
COMMANDS = ("ingest", "synth", "train", "compare-measures", "ensemble", "gradcheck")


class ConfigError(Exception):
    pass


class InputError(Exception):
    def __init__(self, violations):
        self.violations = [violations] if isinstance(violations, str) else list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class RunConfig:
    data: str = ""
    out: str = ""
    task: str = "sex"
    variant: str = "cnn1d"
    measures: str = ""  # empty: every measure file present in the bundle
    folds: int = 5
    epochs: int = 300
    lr: float = 0.1
    batch_size: int = 8
    dropout: float = 0.5
    lr_decay_step: int = 0
    lr_decay_gamma: float = 0.1
    seed: int = 0
    workers: int = 1
    strict_atlas: bool = False
    stratify: bool = False
    save_models: bool = False
    # synth
    subjects: int = 200
    bilateral: int = 0  # 0: command default (synth 24, gradcheck full atlas)
    commissural: int = 0
    sex_positions: int = 8
    age_positions: int = 8
    delta_over_noise: float = 5.0
    age_weight: float = 1.0
    sigma: float = 0.5
    noise_sd: float = 0.05
    missing_rate: float = 0.01
    signal_measures: str = ""
    # gradcheck
    epsilon: float = 1e-5
    tolerance: float = 1e-4
    max_entries: int = 10

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(
            batch_size=self.batch_size,
            lr=self.lr,
            epochs=self.epochs,
            dropout=self.dropout,
            k_folds=self.folds,
            seed=self.seed,
            lr_decay_step=self.lr_decay_step,
            lr_decay_gamma=self.lr_decay_gamma,
        )

    @property
    def task_enum(self) -> Task:
        return Task(self.task)

    @property
    def variant_enum(self) -> Variant:
        return Variant(self.variant)

    def measure_list(self) -> list[MeasureId] | None:
        return parse_measure_list(self.measures) if self.measures.strip() else None

    def to_ini(self) -> str:
        lines = ["[config]"]
        for k, v in asdict(self).items():
            lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode("utf-8")).hexdigest()


_FIELD_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def _coerce(key: str, raw, source: str):
    kind = _FIELD_TYPES[key]
    if isinstance(raw, kind) and not (kind is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if kind is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigError(f"{source}: {key} = {text!r} is not a valid {kind.__name__}") from None


def read_config_file(path: str, command: str) -> dict:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    values = {}
    for section in ("config", "run", command):
        if not parser.has_section(section):
            continue
        for key, raw in parser.items(section):
            key = key.replace("-", "_")
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{path} [{section}]: unknown key {key!r}")
            values[key] = _coerce(key, raw, f"{path} [{section}]")
    return values


def resolve_config(command: str, args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config, command))
    for key in _FIELD_TYPES:
        if hasattr(args, key):
            values[key] = _coerce(key, getattr(args, key), "command line")
    cfg = RunConfig(**values)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.task not in {t.value for t in Task}:
        raise ConfigError(f"task must be sex or age, got {cfg.task!r}")
    if cfg.variant not in {v.value for v in Variant}:
        raise ConfigError(f"variant must be cnn1d or cnn2d, got {cfg.variant!r}")
    try:
        cfg.measure_list()
        if cfg.signal_measures.strip():
            parse_measure_list(cfg.signal_measures)
        cfg.hyperparams()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    if cfg.max_entries < 0 or cfg.epsilon <= 0 or cfg.tolerance <= 0:
        raise ConfigError("epsilon and tolerance must be > 0, max_entries >= 0")


# --------------------------------------------------------------------------
# Bundle loading and validation
# --------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _header_columns(path: Path) -> list[str]:
    with open(path, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), [])
    return [h.strip() for h in header[1:]]


@dataclass
class Bundle:
    layout: AtlasLayout | None
    labels: object
    tables: dict
    violations: list[str]
    census: list[str]
    inputs: dict[str, str]  # path -> sha256


def inspect_bundle(data: str, measures: list[MeasureId] | None, strict: bool) -> Bundle:
    """Read and validate a bundle, collecting every violation instead of stopping at the first."""
    if not data:
        raise ConfigError("--data is required")
    root = Path(data)
    if not root.is_dir():
        raise InputError(f"data directory {root} does not exist")
    paths = bundle_paths(root)
    violations, census, inputs = [], [], {}
    layout = labels = None
    tables = {}

    for key in ("atlas", "labels"):
        if not paths[key].is_file():
            violations.append(f"missing {paths[key].name}")
    if paths["atlas"].is_file():
        inputs[str(paths["atlas"])] = _sha256(paths["atlas"])
        try:
            layout = read_layout_file(paths["atlas"])
        except SchemaError as exc:
            violations.extend(exc.violations)
        else:
            if strict:
                violations.extend(f"atlas: {p}" for p in layout.strict_problems())
    if paths["labels"].is_file():
        inputs[str(paths["labels"])] = _sha256(paths["labels"])
        try:
            labels = read_labels_file(paths["labels"])
        except SchemaError as exc:
            violations.extend(exc.violations)

    if measures is None:
        measures = [m for m in ALL_MEASURES if measure_path(paths["measures"], m).is_file()]
        if not measures:
            violations.append(f"no measure files under {paths['measures']}")
    for m in measures:
        path = measure_path(paths["measures"], m)
        if not path.is_file():
            violations.append(f"{m}: missing file {path.name}")
            continue
        inputs[str(path)] = _sha256(path)
        if strict:
            n_cols = len(_header_columns(path))
            if n_cols != N_FEATURES:
                violations.append(f"{m}: expected {N_FEATURES} cluster columns, found {n_cols}")
        if layout is None:
            continue
        try:
            table = read_measure_file(path, layout, m)
        except SchemaError as exc:
            violations.extend(exc.violations)
            continue
        tables[m] = table
        per_cluster = table.missing_per_cluster()
        cells = table.values.size
        census.append(
            f"{m}: {len(table.subjects)} subjects x {len(layout)} clusters, "
            f"{table.n_missing} missing cells ({100.0 * table.n_missing / max(cells, 1):.2f}%), "
            f"{int(np.count_nonzero(per_cluster))} clusters with missing values"
        )

    if tables:
        subject_sets = {m: set(t.subjects) for m, t in tables.items()}
        first_m, first = next(iter(subject_sets.items()))
        for m, s in subject_sets.items():
            if s != first:
                violations.append(f"{m}: subject set differs from {first_m} ({len(s ^ first)} subjects differ)")
        if labels is not None:
            unlabeled = sorted(first - set(labels.rows))
            if unlabeled:
                violations.append(f"labels: {len(unlabeled)} subjects without labels, e.g. {unlabeled[:3]}")
    return Bundle(layout, labels, tables, violations, census, inputs)


def load_dataset(cfg: RunConfig) -> tuple[Dataset, dict[str, str]]:
    bundle = inspect_bundle(cfg.data, cfg.measure_list(), cfg.strict_atlas)
    if bundle.violations:
        raise InputError(bundle.violations)
    # labels for subjects absent from the measure files are not needed
    subjects = next(iter(bundle.tables.values())).subjects
    labels = type(bundle.labels)({s: bundle.labels.rows[s] for s in subjects})
    try:
        return Dataset(bundle.tables, labels), bundle.inputs
    except ValueError as exc:
        raise InputError(str(exc)) from None


# --------------------------------------------------------------------------
# Output helpers
# --------------------------------------------------------------------------


def _out_dir(cfg: RunConfig) -> Path:
    if not cfg.out:
        raise ConfigError("--out is required")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, command: str, cfg: RunConfig, inputs: dict[str, str]) -> Path:
    lines = [
        "[manifest]",
        f"command = {command}",
        f"config_sha256 = {cfg.digest()}",
        f"seed = {cfg.seed}",
        f"wmpredict = {__version__}",
        f"python = {platform.python_version()}",
        f"numpy = {np.__version__}",
        f"platform = {platform.system()}-{platform.machine()}",
        "",
        cfg.to_ini().rstrip("\n"),
        "",
        "[inputs]",
    ]
    lines += [f"{p} = {h}" for p, h in sorted(inputs.items())]
    path = out / "manifest.txt"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _open_csv(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", newline="", encoding="utf-8")


def _model_spec(cfg: RunConfig, layout: AtlasLayout) -> ModelSpec:
    spec = ModelSpec.for_layout(cfg.variant_enum, cfg.task_enum, layout)
    return spec_with_dropout(spec, cfg.hyperparams())


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_ingest(cfg: RunConfig) -> int:
    bundle = inspect_bundle(cfg.data, cfg.measure_list(), cfg.strict_atlas)
    lines = [f"bundle: {cfg.data}"]
    if bundle.layout is not None:
        lay = bundle.layout
        lines.append(
            f"layout: {len(lay)} feature positions ({lay.n_bilateral} bilateral x 2 + {lay.n_commissural} commissural)"
        )
    if bundle.labels is not None:
        lines.append(f"labels: {len(bundle.labels)} subjects")
    lines += bundle.census
    lines.append(f"{len(bundle.violations)} violations")
    lines += [f"  {v}" for v in bundle.violations]
    report = "\n".join(lines) + "\n"
    sys.stdout.write(report)
    if cfg.out:
        out = _out_dir(cfg)
        (out / "reports").mkdir(exist_ok=True)
        (out / "reports" / "ingest.txt").write_text(report, encoding="utf-8")
        write_manifest(out, "ingest", cfg, bundle.inputs)
    return EXIT_INVALID if bundle.violations else EXIT_OK


def cmd_synth(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    layout = AtlasLayout.from_counts(cfg.bilateral or 24, cfg.commissural or 8)
    measures = cfg.measure_list() or [MeasureId.parse("FA1-mean")]
    signal = parse_measure_list(cfg.signal_measures) if cfg.signal_measures.strip() else None
    try:
        spec = planted_spec(
            n_subjects=cfg.subjects,
            layout=layout,
            n_sex_positions=cfg.sex_positions,
            delta_over_noise=cfg.delta_over_noise,
            n_age_positions=cfg.age_positions,
            age_weight=cfg.age_weight,
            sigma=cfg.sigma,
            seed=cfg.seed,
            noise_sd=cfg.noise_sd,
            missing_rate=cfg.missing_rate,
            measures=tuple(measures),
            signal_measures=tuple(signal) if signal else None,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    tables, labels = generate(spec)
    write_bundle(out, tables, labels)
    planted = [
        f"delta = {spec.delta!r}",
        f"noise_sd = {spec.noise_sd!r}",
        f"sigma = {spec.sigma!r}",
        f"sex_positions = {','.join(map(str, spec.sex_positions))}",
        f"age_positions = {','.join(map(str, spec.age_weights))}",
        f"age_weight = {cfg.age_weight!r}",
        f"signal_measures = {','.join(m.name for m in spec.signal_measures) if spec.signal_measures else 'all'}",
    ]
    (out / "planted.txt").write_text("\n".join(planted) + "\n", encoding="utf-8")
    write_manifest(out, "synth", cfg, {})
    print(f"wrote {cfg.subjects} subjects x {len(measures)} measures to {out}")
    return EXIT_OK


def _run_cv(cfg: RunConfig, command: str, save_models: bool) -> int:
    out = _out_dir(cfg)
    dataset, inputs = load_dataset(cfg)
    hp = cfg.hyperparams()
    spec = _model_spec(cfg, dataset.layout)
    plan = plan_folds(dataset, hp, stratify=cfg.stratify)
    reports_dir = out / "reports"
    with _open_csv(reports_dir / "fold_plan.csv") as fh:
        plan.to_csv(fh)
    reports = []
    for m in dataset.measures:
        log.info("%s: %d-fold cross-validation", m, plan.k)
        report = cross_validate(spec, dataset, hp, m, plan=plan, workers=cfg.workers, keep_models=save_models)
        reports.append(report)
        for f in report.folds:
            with _open_csv(reports_dir / "histories" / m.name / f"fold{f.fold}.csv") as fh:
                f.history.to_csv(fh)
            if save_models:
                f.model.save(out / "models" / m.name / f"fold{f.fold}")
        print(f"{m.name}: best {report.mean:.4f} +/- {report.sd:.4f}  final {report.final_mean:.4f} +/- {report.final_sd:.4f}")
    with _open_csv(reports_dir / "folds.csv") as ff, _open_csv(reports_dir / "summary.csv") as fs:
        write_fold_reports(reports, ff, fs)
    with _open_csv(reports_dir / "final_folds.csv") as ff, _open_csv(reports_dir / "final_summary.csv") as fs:
        write_fold_reports(reports, ff, fs, final=True)
    if command == "compare-measures":
        better = max if cfg.task_enum is Task.SEX else min
        ranked = sorted(reports, key=lambda r: r.mean, reverse=better is max)
        with _open_csv(reports_dir / "ranking.csv") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rank", "measure", "mean", "sd"])
            for i, r in enumerate(ranked, start=1):
                w.writerow([i, r.measure.name, repr(r.mean), repr(r.sd)])
    write_manifest(out, command, cfg, inputs)
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    return _run_cv(cfg, "train", save_models=True)


def cmd_compare_measures(cfg: RunConfig) -> int:
    return _run_cv(cfg, "compare-measures", save_models=cfg.save_models)


def cmd_ensemble(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    dataset, inputs = load_dataset(cfg)
    hp = cfg.hyperparams()
    spec = _model_spec(cfg, dataset.layout)
    plan = plan_folds(dataset, hp, stratify=cfg.stratify)
    report = cross_validate_ensemble(dataset.measures, spec, dataset, hp, plan=plan, workers=cfg.workers)
    with _open_csv(out / "reports" / "fold_plan.csv") as fh:
        plan.to_csv(fh)
    with _open_csv(out / "reports" / "ensemble_folds.csv") as fh:
        report.write(fh)
    with _open_csv(out / "reports" / "ensemble_summary.csv") as fh:
        report.write_summary(fh)
    for f in report.folds:
        for model in f.models:
            model.save(out / "models" / f"fold{f.fold}" / model.measure.name)
    combined = report.combined_metrics
    mean = float(np.mean(combined))
    print(f"ensemble of {', '.join(m.name for m in report.measures)}: {mean:.4f} over {len(combined)} folds")
    write_manifest(out, "ensemble", cfg, inputs)
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    if cfg.bilateral or cfg.commissural:
        layout = AtlasLayout.from_counts(cfg.bilateral, cfg.commissural)
    else:
        layout = AtlasLayout.full()
    spec = _model_spec(cfg, layout)
    rng = make_rng(cfg.seed)
    net = build(spec, rng)
    x = rng.random((2, 1) + spec.input_shape)
    if spec.task is Task.SEX:
        targets, loss = np.array([0, 1]), "ce"
    else:
        targets, loss = rng.uniform(22, 37, 2), "mse"
    report = grad_check(
        net,
        x,
        targets,
        loss=loss,
        epsilon=cfg.epsilon,
        tolerance=cfg.tolerance,
        max_entries=cfg.max_entries or None,
        seed=cfg.seed,
        name=f"{spec.variant.value}/{spec.task.value}",
    )
    text = "\n".join(report.lines()) + "\n" + report.summary() + "\n"
    sys.stdout.write(text)
    if cfg.out:
        out = _out_dir(cfg)
        (out / "reports").mkdir(exist_ok=True)
        (out / "reports" / "gradcheck.txt").write_text(text, encoding="utf-8")
        write_manifest(out, "gradcheck", cfg, {})
    return EXIT_OK if report.passed else EXIT_NUMERIC


HANDLERS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "train": cmd_train,
    "compare-measures": cmd_compare_measures,
    "ensemble": cmd_ensemble,
    "gradcheck": cmd_gradcheck,
}


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add(p, flag, kind=str, help=None, **kw):
    p.add_argument(flag, type=kind, default=argparse.SUPPRESS, help=help, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wmpredict", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"wmpredict {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    common = _Parser(add_help=False)
    _add(common, "--config", help="INI file; flags override its keys")
    _add(common, "--data", help="bundle directory (atlas.csv, labels.csv, measures/)")
    _add(common, "--out", help="output directory")
    _add(common, "--seed", int)
    _add(common, "--task", choices=["sex", "age"])
    _add(common, "--variant", choices=["cnn1d", "cnn2d"])
    _add(common, "--measures", help="comma list of names or 1-based numbers, or 'all'")
    _add(common, "--folds", int)
    _add(common, "--epochs", int)
    _add(common, "--workers", int)
    common.add_argument("--strict-atlas", action="store_true", default=argparse.SUPPRESS,
                        help="require the full 800-cluster atlas (1516 features)")

    training = _Parser(add_help=False)
    _add(training, "--lr", float)
    _add(training, "--batch-size", int)
    _add(training, "--dropout", float)
    _add(training, "--lr-decay-step", int, help="multiply lr by the decay gamma every N epochs (0: off)")
    _add(training, "--lr-decay-gamma", float)
    training.add_argument("--stratify", action="store_true", default=argparse.SUPPRESS,
                          help="balance sex across folds")

    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("ingest", parents=[common], help="validate a data bundle")
    p = sub.add_parser("synth", parents=[common], help="write a synthetic bundle with planted signal")
    _add(p, "--subjects", int)
    _add(p, "--bilateral", int)
    _add(p, "--commissural", int)
    _add(p, "--sex-positions", int)
    _add(p, "--age-positions", int)
    _add(p, "--delta-over-noise", float)
    _add(p, "--age-weight", float)
    _add(p, "--sigma", float)
    _add(p, "--noise-sd", float)
    _add(p, "--missing-rate", float)
    _add(p, "--signal-measures")
    sub.add_parser("train", parents=[common, training], help="cross-validate one model per measure")
    p = sub.add_parser("compare-measures", parents=[common, training], help="rank measures by CV metric")
    p.add_argument("--save-models", action="store_true", default=argparse.SUPPRESS)
    sub.add_parser("ensemble", parents=[common, training], help="cross-validate a multi-measure ensemble")
    p = sub.add_parser("gradcheck", parents=[common, training], help="finite-difference check of a fresh model")
    _add(p, "--bilateral", int)
    _add(p, "--commissural", int)
    _add(p, "--epsilon", float)
    _add(p, "--tolerance", float)
    _add(p, "--max-entries", int, help="coordinates sampled per tensor (0: all)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = resolve_config(args.command, args)
        return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, SchemaError) as exc:
        for v in exc.violations:
            print(f"invalid input: {v}", file=sys.stderr)
        return EXIT_INVALID
    except TrainingDivergence as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
