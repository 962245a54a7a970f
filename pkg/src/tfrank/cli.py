"""Command-line front end: reproducible scoring, evaluation, synthesis,
and reporting runs driven by a declarative config plus mirrored flags.

Every command reads an optional JSON config file, applies flag
overrides (flags mirror config keys one-to-one), resolves the seed from
flag > config > TFR_SEED > 0, and exits with 0 on success, 2 on
validation problems, 3 on metric preconditions, 4 on numeric failures.
"""

import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from .baselines import leep, logme, nleep, parc
from .data import (
    CandidateBundle,
    EvalReport,
    GroundTruthTable,
    ScoreTable,
    TargetSet,
    load_bundle,
    load_ground_truth,
    load_metric_table,
    load_target_set,
    save_bundle,
    save_ground_truth,
    save_target_set,
)
from .errors import (
    ConfigError,
    MissingSourceProbs,
    NumericError,
    ParseError,
    PreconditionError,
    TfrankError,
    ValidationError,
)
from .micronet import (
    GeneratorSpec,
    HyperGrid,
    SplitSpec,
    ZooSourceSpec,
    make_micro_zoo,
    target_set_from_dataset,
    make_dataset,
)
from .rankeval import (
    TIE_AVERAGE,
    TIE_ORDINAL,
    RankConfig,
    evaluate,
    evaluate_tau_matrix,
)
from .score import CombineMode, KnnConfig, TripletConfig, combined_score

METRICS = ("ours", "ours-sum", "leep", "nleep", "logme", "parc")

_EXIT_VALIDATION = 2
_EXIT_PRECONDITION = 3
_EXIT_NUMERIC = 4


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _run(fn):
    """Execute a command body and translate errors to exit codes."""
    try:
        fn()
    except ValidationError as e:
        _fail(_EXIT_VALIDATION, str(e))
    except PreconditionError as e:
        _fail(_EXIT_PRECONDITION, str(e))
    except NumericError as e:
        _fail(_EXIT_NUMERIC, str(e))
    except TfrankError as e:
        _fail(_EXIT_VALIDATION, str(e))


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return raw


def _merge_config(file_cfg: dict, overrides: dict, allowed: dict) -> dict:
    """File config + non-None flag overrides, with unknown keys rejected."""
    unknown = set(file_cfg) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    merged = dict(allowed)
    merged.update(file_cfg)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def _resolve_seed(value) -> int:
    if value is not None:
        return int(value)
    env = os.environ.get("TFR_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"TFR_SEED={env!r} is not an integer") from None
    return 0


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _write_json(path, obj) -> None:
    Path(path).write_text(_canonical_json(obj), encoding="utf-8")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- score ----------------------------------------------------------------------

def _load_pool(bundles_dir) -> list:
    root = Path(bundles_dir)
    if not root.is_dir():
        raise ConfigError(f"bundle directory {root} does not exist")
    paths = sorted(p for p in root.iterdir()
                   if p.is_file() and p.suffix == ".tfb")
    if not paths:
        raise ConfigError(f"no .tfb bundles found in {root}")
    return [load_bundle(p) for p in paths]


def _score_one_metric(metric: str, target: TargetSet, bundles: list,
                      mode: str, knn_k: int, seed: int) -> ScoreTable:
    y = target.labels
    if metric in ("ours", "ours-sum"):
        variant = "product" if metric == "ours" else "sum"
        return combined_score(
            target, bundles, mode=CombineMode(variant=variant, direction=mode),
            knn_cfg=KnnConfig(k=knn_k))
    scores = {}
    for b in bundles:
        if metric == "leep":
            if b.source_probs is None:
                raise MissingSourceProbs(
                    f"bundle {b.model_id!r} carries no source_probs, "
                    "which leep requires")
            scores[b.model_id] = leep(b.source_probs, y)
        elif metric == "nleep":
            scores[b.model_id] = nleep(b.embeddings, y, seed=seed)
        elif metric == "logme":
            scores[b.model_id] = logme(b.embeddings, y)
        elif metric == "parc":
            scores[b.model_id] = parc(b.embeddings, y)
        else:
            raise ConfigError(
                f"unknown metric {metric!r}; choose from {', '.join(METRICS)}")
    return ScoreTable(metric_name=metric, scores=scores, mode=mode)


_SCORE_DEFAULTS = {
    "target": None, "bundles": None, "out_dir": None,
    "metrics": list(METRICS), "mode": "in_domain", "knn_k": 5, "seed": None,
}


def _cmd_score(cfg: dict) -> None:
    for key in ("target", "bundles", "out_dir"):
        if cfg[key] is None:
            raise ConfigError(f"score needs {key!r} (config key or flag)")
    metrics = cfg["metrics"]
    if isinstance(metrics, str):
        metrics = [m.strip() for m in metrics.split(",") if m.strip()]
    bad = [m for m in metrics if m not in METRICS]
    if bad:
        raise ConfigError(
            f"unknown metrics {bad}; choose from {', '.join(METRICS)}")
    seed = _resolve_seed(cfg["seed"])
    target = load_target_set(cfg["target"])
    bundles = _load_pool(cfg["bundles"])
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    for metric in metrics:
        table = _score_one_metric(
            metric, target, bundles, cfg["mode"], int(cfg["knn_k"]), seed)
        _write_json(out_dir / f"score_{metric}.json", table.to_json_dict())
        best = table.argmax_model()
        click.echo(f"{metric}: best candidate {best} "
                   f"(score {table.scores[best]:.6g})")


@click.group()
def main() -> None:
    """Transferability scoring and rank evaluation toolkit."""


@main.command(name="score")
@click.option("--config", type=click.Path(), default=None,
              help="JSON config file.")
@click.option("--target", type=click.Path(), default=None,
              help="Target-set container file.")
@click.option("--bundles", type=click.Path(), default=None,
              help="Directory of candidate .tfb bundles.")
@click.option("--out-dir", type=click.Path(), default=None,
              help="Directory for score_<metric>.json outputs.")
@click.option("--metrics", default=None,
              help="Comma-separated metric list.")
@click.option("--mode", type=click.Choice(["in_domain", "cross_domain"]),
              default=None, help="Normalization direction.")
@click.option("--knn-k", type=int, default=None,
              help="Neighborhood size for the label term.")
@click.option("--seed", type=int, default=None, help="Global seed.")
def score_command(config, **flags):
    """Score a candidate pool with the requested metrics."""
    def body():
        cfg = _merge_config(_load_config_file(config), flags, _SCORE_DEFAULTS)
        _cmd_score(cfg)
    _run(body)


# --- eval -----------------------------------------------------------------------

_EVAL_DEFAULTS = {
    "tau_table": None, "scores_dir": None, "ground_truth": None,
    "out": None, "csv_out": None, "tie_mode": "ordinal", "alpha": 0.05,
    "seed": None,
}


def _collect_score_tables(scores_dir) -> dict:
    """scores_dir/<target>/score_*.json -> {target: [ScoreTable, ...]}."""
    root = Path(scores_dir)
    if not root.is_dir():
        raise ConfigError(f"scores directory {root} does not exist")
    out = {}
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        tables = []
        for path in sorted(sub.glob("score_*.json")):
            try:
                raw = json.loads(path.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as e:
                raise ParseError(f"cannot parse score table {path}: {e}") from e
            tables.append(ScoreTable.from_json_dict(raw))
        if tables:
            out[sub.name] = tables
    if not out:
        raise ConfigError(f"no score tables found under {root}")
    return out


def _eval_csv_lines(report: EvalReport) -> list:
    lines = ["target," + ",".join(report.metrics)]
    for t in report.targets:
        cells = []
        for m in report.metrics:
            v = report.per_target_tau[(t, m)]
            cells.append("" if v is None else repr(float(v)))
        lines.append(",".join([t] + cells))
    return lines


_TIE_MODES = {"ordinal": TIE_ORDINAL, "average": TIE_AVERAGE}


def _cmd_eval(cfg: dict) -> None:
    if cfg["out"] is None:
        raise ConfigError("eval needs 'out' (config key or flag)")
    if cfg["tie_mode"] not in _TIE_MODES:
        raise ConfigError(
            f"unknown tie_mode {cfg['tie_mode']!r}; choose ordinal or average")
    rank_cfg = RankConfig(tie_mode=_TIE_MODES[cfg["tie_mode"]],
                          alpha=float(cfg["alpha"]))
    if cfg["tau_table"] is not None:
        targets, metrics, values = load_metric_table(cfg["tau_table"])
        report = evaluate_tau_matrix(targets, metrics, values, rank_cfg)
    else:
        if cfg["scores_dir"] is None or cfg["ground_truth"] is None:
            raise ConfigError(
                "eval needs either 'tau_table' or both 'scores_dir' "
                "and 'ground_truth'")
        truth = load_ground_truth(cfg["ground_truth"])
        tables = _collect_score_tables(cfg["scores_dir"])
        report = evaluate(tables, truth, rank_cfg)
    _write_json(cfg["out"], report.to_json_dict())
    if cfg["csv_out"] is not None:
        Path(cfg["csv_out"]).write_text(
            "\n".join(_eval_csv_lines(report)) + "\n", encoding="utf-8")
    ordered = sorted(report.metrics, key=lambda m: report.avg_ranks[m])
    click.echo("avg ranks: " + ", ".join(
        f"{m}={report.avg_ranks[m]:.2f}" for m in ordered))
    click.echo(f"friedman chi2={report.friedman_chi2:.4f} "
               f"p={report.friedman_p:.4g} CD={report.critical_difference:.4f}")


@main.command(name="eval")
@click.option("--config", type=click.Path(), default=None,
              help="JSON config file.")
@click.option("--tau-table", type=click.Path(), default=None,
              help="Precomputed target x metric correlation CSV.")
@click.option("--scores-dir", type=click.Path(), default=None,
              help="Directory holding <target>/score_<metric>.json files.")
@click.option("--ground-truth", type=click.Path(), default=None,
              help="Source x target AUC CSV.")
@click.option("--out", type=click.Path(), default=None,
              help="Evaluation report JSON output path.")
@click.option("--csv-out", type=click.Path(), default=None,
              help="Optional correlation-table CSV output path.")
@click.option("--tie-mode", type=click.Choice(["ordinal", "average"]),
              default=None, help="Rank tie handling.")
@click.option("--alpha", type=float, default=None,
              help="Significance level for the critical difference.")
@click.option("--seed", type=int, default=None, help="Global seed.")
def eval_command(config, **flags):
    """Rank metrics against ground truth and test significance."""
    def body():
        cfg = _merge_config(_load_config_file(config), flags, _EVAL_DEFAULTS)
        _cmd_eval(cfg)
    _run(body)


# --- synth ----------------------------------------------------------------------

def _default_synth_sources() -> list:
    base = dict(n=48, class_count=3, texture_strength=1.0,
                blob_strength=0.7, noise_sigma=0.8)
    return [
        {"name": f"src_f{f:g}", "epochs": 6, "lr": 0.05,
         "generator": dict(base, frequency=f, seed=0)}
        for f in (4.0, 5.0, 6.0, 7.5, 9.0)
    ]


def _default_synth_targets() -> list:
    return [{"name": "T1",
             "generator": dict(n=60, class_count=3, texture_strength=1.0,
                               blob_strength=0.7, noise_sigma=1.4,
                               frequency=4.0, seed=1000)}]


_SYNTH_DEFAULTS = {
    "out_dir": None, "seed": None, "sources": None, "targets": None,
    "split": None, "hyper_grid": None, "triplet": None,
}


def _strict_kwargs(raw: dict, allowed: tuple, what: str) -> dict:
    unknown = set(raw) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    return dict(raw)


def _parse_source(raw: dict) -> ZooSourceSpec:
    d = _strict_kwargs(raw, ("name", "epochs", "lr", "generator"), "source")
    if "name" not in d or "generator" not in d:
        raise ConfigError("every source needs 'name' and 'generator'")
    gen = GeneratorSpec.from_dict(d["generator"])
    return ZooSourceSpec(name=d["name"], generator=gen,
                         epochs=int(d.get("epochs", 25)),
                         lr=float(d.get("lr", 0.05)))


def _cmd_synth(cfg: dict) -> None:
    if cfg["out_dir"] is None:
        raise ConfigError("synth needs 'out_dir' (config key or flag)")
    seed = _resolve_seed(cfg["seed"])
    sources_raw = cfg["sources"] or _default_synth_sources()
    targets_raw = cfg["targets"] or _default_synth_targets()
    specs = [_parse_source(s) for s in sources_raw]
    targets = []
    for raw in targets_raw:
        d = _strict_kwargs(raw, ("name", "generator"), "target")
        if "name" not in d or "generator" not in d:
            raise ConfigError("every target needs 'name' and 'generator'")
        targets.append((d["name"], make_dataset(
            GeneratorSpec.from_dict(d["generator"]))))

    split = SplitSpec(**_strict_kwargs(
        cfg["split"] or {}, ("train_frac", "val_frac"), "split"))
    grid_raw = _strict_kwargs(cfg["hyper_grid"] or {},
                              ("learning_rates", "epochs", "batch_size"),
                              "hyper_grid")
    if "learning_rates" in grid_raw:
        grid_raw["learning_rates"] = tuple(grid_raw["learning_rates"])
    if "epochs" in grid_raw:
        grid_raw["epochs"] = tuple(grid_raw["epochs"])
    grid = HyperGrid(**grid_raw)
    trip_raw = _strict_kwargs(cfg["triplet"] or {},
                              ("margin", "triplets_per_anchor", "seed",
                               "reduction"), "triplet")
    triplet = TripletConfig(**trip_raw) if trip_raw else None

    bundles, truth = make_micro_zoo(specs, targets, seed=seed,
                                    triplet_config=triplet,
                                    split_spec=split, hyper_grid=grid)

    out = Path(cfg["out_dir"])
    bundle_dirs = {}
    written = []
    for t_name, per_target in bundles.items():
        bdir = out / "bundles" / t_name
        bdir.mkdir(parents=True, exist_ok=True)
        bundle_dirs[t_name] = bdir
        for b in per_target:
            path = bdir / f"{b.model_id}.tfb"
            save_bundle(b, path)
            written.extend([path, path.with_name(path.name + ".meta.json")])
    for t_name, t_data in targets:
        tpath = out / f"target_{t_name}.tft"
        save_target_set(target_set_from_dataset(t_name, t_data), tpath)
        written.extend([tpath, tpath.with_name(tpath.name + ".meta.json")])
    truth_path = out / "ground_truth.csv"
    save_ground_truth(truth, truth_path)
    written.append(truth_path)

    config_used = {
        "seed": seed,
        "sources": sources_raw,
        "targets": targets_raw,
        "split": dataclasses.asdict(split),
        "hyper_grid": {"learning_rates": list(grid.learning_rates),
                       "epochs": list(grid.epochs),
                       "batch_size": grid.batch_size},
        "triplet": dataclasses.asdict(triplet) if triplet else None,
    }
    manifest = {
        "schema_version": 1,
        "seed": seed,
        "config": config_used,
        "config_sha256": hashlib.sha256(
            _canonical_json(config_used).encode()).hexdigest(),
        "artifacts": {
            str(p.relative_to(out)): _sha256(p) for p in sorted(written)},
    }
    _write_json(out / "manifest.json", manifest)
    click.echo(f"wrote {len(written)} artifacts + manifest to {out}")


@main.command(name="synth")
@click.option("--config", type=click.Path(), default=None,
              help="JSON config file.")
@click.option("--out-dir", type=click.Path(), default=None,
              help="Output directory for the synthetic zoo.")
@click.option("--seed", type=int, default=None, help="Global seed.")
def synth_command(config, **flags):
    """Generate a synthetic model zoo with fine-tuned ground truth."""
    def body():
        cfg = _merge_config(_load_config_file(config), flags, _SYNTH_DEFAULTS)
        _cmd_synth(cfg)
    _run(body)


# --- report ---------------------------------------------------------------------

_REPORT_DEFAULTS = {
    "ground_truth": None, "eval_report": None, "compare": None,
    "best_source_for": None, "out": None, "seed": None,
}


def _format_table(header: list, rows: list) -> list:
    widths = [max(len(str(r[i])) for r in [header] + rows)
              for i in range(len(header))]
    def fmt(row):
        return "  ".join(str(c).rjust(w) for c, w in zip(row, widths))
    return [fmt(header)] + [fmt(r) for r in rows]


def _report_truth_lines(truth: GroundTruthTable, compare,
                        best_source_for) -> list:
    lines = []
    queries = ([best_source_for] if best_source_for
               else list(truth.columns))
    lines.append("Best source per target:")
    for t in queries:
        if t not in truth.columns:
            raise ConfigError(f"unknown target {t!r} in ground truth")
        src, val = truth.best_source(t)
        lines.append(f"  best source for {t}: {src} ({val:.2f})")
    if compare is not None:
        a, b = compare
        for name in (a, b):
            if name not in truth.rows:
                raise ConfigError(f"unknown source {name!r} in ground truth")
        wins = total = 0
        for t in truth.columns:
            if t in (a, b):
                continue
            va, vb = truth.get(a, t), truth.get(b, t)
            if va is None or vb is None:
                continue
            total += 1
            wins += va > vb
        lines.append(f"{a} beats {b} on {wins} of {total} targets "
                     "(self targets excluded)")
    return lines


def _report_eval_lines(report: EvalReport) -> list:
    header = ["target"] + [str(m) for m in report.metrics]
    rows = []
    for t in report.targets:
        row = [t]
        for m in report.metrics:
            v = report.per_target_tau[(t, m)]
            row.append("-" if v is None else f"{v:.3f}")
        rows.append(row)
    rank_row = ["avg rank"] + [f"{report.avg_ranks[m]:.2f}"
                               for m in report.metrics]
    lines = ["Per-target rank correlation:"]
    lines.extend(_format_table(header, rows + [rank_row]))
    lines.append(f"Friedman chi2 = {report.friedman_chi2:.4f}, "
                 f"p = {report.friedman_p:.4g}")
    lines.append(
        f"critical difference (K={len(report.metrics)}, "
        f"N={len(report.targets)}) = {report.critical_difference:.4f}; "
        "metric pairs closer than this are statistically indistinguishable")
    return lines


def _cmd_report(cfg: dict) -> None:
    if cfg["ground_truth"] is None and cfg["eval_report"] is None:
        raise ConfigError(
            "report needs 'ground_truth' and/or 'eval_report'")
    lines = []
    if cfg["ground_truth"] is not None:
        truth = load_ground_truth(cfg["ground_truth"])
        compare = cfg["compare"]
        if isinstance(compare, str):
            compare = [s.strip() for s in compare.split(",") if s.strip()]
        if compare is not None and len(compare) != 2:
            raise ConfigError("'compare' needs exactly two source names")
        lines.extend(_report_truth_lines(
            truth, compare, cfg["best_source_for"]))
    if cfg["eval_report"] is not None:
        path = Path(cfg["eval_report"])
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ParseError(f"cannot parse report {path}: {e}") from e
        try:
            report = EvalReport.from_json_dict(raw)
        except (KeyError, TypeError) as e:
            raise ParseError(f"malformed report {path}: {e}") from e
        lines.extend(_report_eval_lines(report))
    text = "\n".join(lines) + "\n"
    if cfg["out"] is not None:
        Path(cfg["out"]).write_text(text, encoding="utf-8")
    click.echo(text, nl=False)


@main.command(name="report")
@click.option("--config", type=click.Path(), default=None,
              help="JSON config file.")
@click.option("--ground-truth", type=click.Path(), default=None,
              help="Source x target AUC CSV.")
@click.option("--eval-report", type=click.Path(), default=None,
              help="Evaluation report JSON from the eval command.")
@click.option("--compare", default=None,
              help="Two source names, comma separated: count head-to-head "
                   "wins excluding self targets.")
@click.option("--best-source-for", default=None,
              help="Report the best source for one target only.")
@click.option("--out", type=click.Path(), default=None,
              help="Also write the rendered report to this file.")
@click.option("--seed", type=int, default=None, help="Global seed.")
def report_command(config, **flags):
    """Render ground-truth and evaluation artifacts as text tables."""
    def body():
        cfg = _merge_config(_load_config_file(config), flags, _REPORT_DEFAULTS)
        _cmd_report(cfg)
    _run(body)


# --- validate -------------------------------------------------------------------

def _sniff_kind(path: Path):
    """(kind, loader) candidates for a path by extension."""
    if path.suffix == ".tfb":
        return [("candidate bundle", load_bundle)]
    if path.suffix == ".tft":
        return [("target set", load_target_set)]
    if path.suffix == ".csv":
        return [("ground-truth table", load_ground_truth),
                ("correlation table", load_metric_table)]
    if path.suffix == ".json":
        def _load_json(p):
            raw = json.loads(Path(p).read_text(encoding="utf-8"))
            if "scores" in raw:
                return ScoreTable.from_json_dict(raw)
            if "per_target_tau" in raw:
                return EvalReport.from_json_dict(raw)
            raise ParseError(f"{p}: not a score table or evaluation report")
        return [("report/score JSON", _load_json)]
    return []


@main.command(name="validate")
@click.argument("paths", nargs=-1, required=True,
                type=click.Path(exists=False))
def validate_command(paths):
    """Check that artifact files load and satisfy their invariants."""
    failures = 0
    for name in paths:
        path = Path(name)
        if not path.exists():
            click.echo(f"{path}: missing")
            failures += 1
            continue
        candidates = _sniff_kind(path)
        if not candidates:
            click.echo(f"{path}: unrecognized artifact type")
            failures += 1
            continue
        last_error = None
        for kind, loader in candidates:
            try:
                loader(path)
            except (TfrankError, json.JSONDecodeError, KeyError,
                    TypeError) as e:
                last_error = e
                continue
            click.echo(f"{path}: OK ({kind})")
            break
        else:
            click.echo(f"{path}: INVALID ({last_error})")
            failures += 1
    if failures:
        sys.exit(_EXIT_VALIDATION)
