"""Command-line entry point: simulate, train, eval, impute, de.

Every command is driven by a TOML config file plus flag overrides; every leaf
key has a mirror flag (``--section.key value``). Outputs land under the
configured output directory and embed the resolved config hash and seed, so a
rerun with the same config and seed reproduces them byte for byte.

Exit codes: 0 ok, 2 config error (malformed config, bad values, referenced
paths missing), 3 data error (unparseable inputs, checkpoint/data dimension
mismatch), 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

try:
    import tomllib  # python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from . import data as data_mod
from .data import (
    ExpressionMatrix,
    SimulationSpec,
    build_covariates,
    load_covariates_csv,
    load_csv,
    load_mtx,
    save_covariates_csv,
    save_csv,
    select_variable_genes,
    simulate,
)
from .diffexpr import de_test, write_de_csv
from .errors import ConfigError, DataError, NumericalError
from .evaluation import (
    BenchmarkReport,
    CorruptionConfig,
    calibrate_decay,
    corrupt,
    heldout_marginal_ll,
    impute,
    posterior_mean_decode,
    qc_correlation,
    silhouette,
    write_reports_csv,
    write_reports_json,
)
from .model import ModelConfig, encode, load_checkpoint
from .training import TrainingConfig, train, write_loss_trace

COMMANDS = ("simulate", "train", "eval", "impute", "de")

# every config leaf: (type tag, default). Type tags: int, float, str, bool,
# floatlist, strlist. Flags mirror these keys one-to-one.
SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "run": {
        "seed": ("int", 0),
        "out": ("str", "out"),
        "threads": ("int", 1),
    },
    "data": {
        "format": ("str", "csv"),  # csv | mtx
        "counts": ("str", ""),
        "matrix": ("str", ""),
        "genes": ("str", ""),
        "cells": ("str", ""),
        "covariates": ("str", ""),
        "variable_genes": ("int", 0),  # 0 = keep all
        "heldout_fraction": ("float", 0.0),
        "split_seed": ("int", 0),
    },
    "checkpoint": {
        "path": ("str", ""),
    },
    "model": {
        "latent_dim": ("int", 10),
        "hidden_width": ("int", 128),
        "hidden_depth": ("int", 3),
        "dropout_rate": ("float", 0.1),
        "dispersion_mode": ("str", "per-gene"),
        "latent_mode": ("str", "stochastic"),
        "use_covariates": ("bool", False),
        "encoder_sees_covariates": ("bool", False),
    },
    "training": {
        "learning_rate": ("float", 1e-3),
        "beta1": ("float", 0.9),
        "beta2": ("float", 0.999),
        "adam_eps": ("float", 1e-8),
        "batch_size": ("int", 128),
        "epochs": ("int", 100),
        "shuffle": ("bool", True),
    },
    "simulate": {
        "n_cells": ("int", 1000),
        "n_genes": ("int", 100),
        "latent_dim": ("int", 2),
        "n_groups": ("int", 1),
        "group_separation": ("float", 3.0),
        "theta_range": ("floatlist", [2.0, 20.0]),
        "pi_range": ("floatlist", [0.1, 0.4]),
        "baseline_log_mean_range": ("floatlist", [0.0, 2.0]),
        "loading_scale": ("float", 0.6),
        "n_batches": ("int", 1),
        "batch_effect_scale": ("float", 0.0),
    },
    "corruption": {
        "decay": ("float", 0.0),  # 0 = calibrate to target_fraction
        "target_fraction": ("float", 0.1),
    },
    "eval": {
        "metrics": ("strlist", ["heldout_ll", "imputation", "silhouette", "qc_correlation"]),
        "n_importance_samples": ("int", 1000),
    },
    "de": {
        "group_a": ("str", ""),
        "group_b": ("str", ""),
        "n_pairs": ("int", 10_000),
        "n_mc": ("int", 1),
    },
}


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------


def default_config() -> dict:
    return {section: {k: v for k, (_, v) in keys.items()} for section, keys in SCHEMA.items()}


def _parse_flag_value(tag: str, raw: str, flag: str):
    try:
        if tag == "int":
            return int(raw)
        if tag == "float":
            return float(raw)
        if tag == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"expected true/false, got {raw!r}")
        if tag == "floatlist":
            return [float(v) for v in raw.split(",") if v != ""]
        if tag == "strlist":
            return [v for v in raw.split(",") if v != ""]
        return raw
    except ValueError as err:
        raise ConfigError(f"bad value for {flag}: {err}") from err


def _check_type(section: str, key: str, value, tag: str):
    ok = {
        "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
        "float": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        "bool": lambda v: isinstance(v, bool),
        "str": lambda v: isinstance(v, str),
        "floatlist": lambda v: isinstance(v, list) and all(isinstance(x, (int, float)) for x in v),
        "strlist": lambda v: isinstance(v, list) and all(isinstance(x, str) for x in v),
    }[tag]
    if not ok(value):
        raise ConfigError(f"config key {section}.{key} has wrong type (expected {tag})")
    if tag == "float":
        return float(value)
    if tag == "floatlist":
        return [float(x) for x in value]
    return value


def resolve_config(config_path: str | None, overrides: dict[str, str]) -> dict:
    """Defaults <- config file <- flag overrides, with full key/type checks."""
    cfg = default_config()
    if config_path:
        if not os.path.exists(config_path):
            raise ConfigError(f"config file not found: {config_path}")
        try:
            with open(config_path, "rb") as fh:
                loaded = tomllib.load(fh)
        except tomllib.TOMLDecodeError as err:
            raise ConfigError(f"malformed config {config_path}: {err}") from err
        for section, keys in loaded.items():
            if section not in SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            if not isinstance(keys, dict):
                raise ConfigError(f"config section [{section}] must be a table")
            for key, value in keys.items():
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                cfg[section][key] = _check_type(section, key, value, SCHEMA[section][key][0])
    for dotted, raw in overrides.items():
        section, _, key = dotted.partition(".")
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {dotted}")
        cfg[section][key] = _parse_flag_value(SCHEMA[section][key][0], raw, f"--{dotted}")
    return cfg


def config_hash(command: str, cfg: dict) -> str:
    """Hash of everything that determines behavior. run.out is excluded: it
    chooses where outputs land, not what they contain."""
    hashed = {s: dict(keys) for s, keys in cfg.items()}
    hashed["run"] = {k: v for k, v in hashed["run"].items() if k != "out"}
    payload = json.dumps({"command": command, "config": hashed}, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


def _write_resolved_config(out_dir: str, command: str, cfg: dict, digest: str):
    payload = {
        "command": command,
        "config": cfg,
        "config_hash": digest,
        "seed": cfg["run"]["seed"],
    }
    with open(os.path.join(out_dir, "resolved_config.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _stamp(cfg: dict, digest: str) -> str:
    return f"config_hash={digest} seed={cfg['run']['seed']}"


# ---------------------------------------------------------------------------
# shared data flow
# ---------------------------------------------------------------------------


def _require_path(path: str, what: str) -> str:
    if not path:
        raise ConfigError(f"{what} path is not set in the config")
    if not os.path.exists(path):
        raise ConfigError(f"{what} path does not exist: {path}")
    return path


def _load_dataset(cfg: dict) -> ExpressionMatrix:
    d = cfg["data"]
    if d["format"] == "csv":
        matrix = load_csv(_require_path(d["counts"], "data.counts"))
    elif d["format"] == "mtx":
        matrix = load_mtx(
            _require_path(d["matrix"], "data.matrix"),
            _require_path(d["genes"], "data.genes"),
            _require_path(d["cells"], "data.cells"),
        )
    else:
        raise ConfigError(f"data.format must be csv or mtx, got {d['format']!r}")
    if d["covariates"]:
        matrix = load_covariates_csv(_require_path(d["covariates"], "data.covariates"), matrix)
    if d["variable_genes"]:
        if d["variable_genes"] > matrix.n_genes:
            raise DataError(
                f"variable_genes={d['variable_genes']} exceeds {matrix.n_genes} genes"
            )
        matrix = select_variable_genes(matrix, d["variable_genes"])
    return matrix


def _assemble_covariates(matrix: ExpressionMatrix, cfg: dict):
    if not cfg["model"]["use_covariates"]:
        return None, []
    cov, names = build_covariates(matrix)
    if cov is None:
        raise ConfigError("model.use_covariates is set but the data carries no batch/QC columns")
    return cov, names


def _load_model(cfg: dict):
    path = _require_path(cfg["checkpoint"]["path"], "checkpoint.path")
    return load_checkpoint(path)


def _check_dims(params, matrix: ExpressionMatrix, covariates):
    if params.config.n_genes != matrix.n_genes:
        raise DataError(
            f"checkpoint expects {params.config.n_genes} genes, data has {matrix.n_genes}"
        )
    cov_dim = 0 if covariates is None else covariates.shape[1]
    if params.config.covariate_dim != cov_dim:
        raise DataError(
            f"checkpoint expects {params.config.covariate_dim} covariate columns, got {cov_dim}"
        )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(cfg: dict, out_dir: str, digest: str) -> int:
    s = cfg["simulate"]
    spec = SimulationSpec(
        n_cells=s["n_cells"],
        n_genes=s["n_genes"],
        latent_dim=s["latent_dim"],
        n_groups=s["n_groups"],
        group_separation=s["group_separation"],
        theta_range=tuple(s["theta_range"]),
        pi_range=tuple(s["pi_range"]),
        baseline_log_mean_range=tuple(s["baseline_log_mean_range"]),
        loading_scale=s["loading_scale"],
        n_batches=s["n_batches"],
        batch_effect_scale=s["batch_effect_scale"],
    )
    rng = np.random.default_rng(cfg["run"]["seed"])
    matrix, truth = simulate(spec, rng)
    stamp = _stamp(cfg, digest)
    save_csv(matrix, os.path.join(out_dir, "counts.csv"), header_comment=stamp)
    save_covariates_csv(matrix, os.path.join(out_dir, "covariates.csv"), header_comment=stamp)
    truth.save(os.path.join(out_dir, "truth.bin"))
    print(f"simulate: wrote {matrix.n_cells} cells x {matrix.n_genes} genes to {out_dir}")
    return 0


def cmd_train(cfg: dict, out_dir: str, digest: str) -> int:
    matrix = _load_dataset(cfg)
    covariates, _ = _assemble_covariates(matrix, cfg)
    stamp = _stamp(cfg, digest)
    if cfg["data"]["heldout_fraction"] > 0:
        train_idx, held_idx = data_mod.split_indices(
            matrix.n_cells, cfg["data"]["heldout_fraction"], cfg["data"]["split_seed"]
        )
        heldout = matrix.subset_cells(held_idx)
        save_csv(heldout, os.path.join(out_dir, "heldout.csv"), header_comment=stamp)
        if heldout.batch_ids is not None or heldout.labels is not None or heldout.qc is not None:
            save_covariates_csv(
                heldout, os.path.join(out_dir, "heldout_covariates.csv"), header_comment=stamp
            )
        matrix = matrix.subset_cells(train_idx)
        covariates = covariates[train_idx] if covariates is not None else None
    m = cfg["model"]
    model_config = ModelConfig(
        n_genes=matrix.n_genes,
        latent_dim=m["latent_dim"],
        hidden_width=m["hidden_width"],
        hidden_depth=m["hidden_depth"],
        dropout_rate=m["dropout_rate"],
        covariate_dim=0 if covariates is None else covariates.shape[1],
        dispersion_mode=m["dispersion_mode"],
        latent_mode=m["latent_mode"],
        encoder_sees_covariates=m["encoder_sees_covariates"],
    )
    t = cfg["training"]
    training_config = TrainingConfig(
        learning_rate=t["learning_rate"],
        beta1=t["beta1"],
        beta2=t["beta2"],
        adam_eps=t["adam_eps"],
        batch_size=t["batch_size"],
        epochs=t["epochs"],
        seed=cfg["run"]["seed"],
        shuffle=t["shuffle"],
    )
    ckpt = os.path.join(out_dir, "checkpoint.bin")
    _, trace = train(matrix, covariates, model_config, training_config, checkpoint_path=ckpt)
    write_loss_trace(trace, os.path.join(out_dir, "loss_trace.csv"), header_comment=stamp)
    final = f", final mean neg-ELBO {trace[-1]:.3f}" if trace else ""
    print(f"train: {training_config.epochs} epochs on {matrix.n_cells} cells{final}")
    return 0


def cmd_eval(cfg: dict, out_dir: str, digest: str) -> int:
    params = _load_model(cfg)
    matrix = _load_dataset(cfg)
    covariates, _ = _assemble_covariates(matrix, cfg)
    _check_dims(params, matrix, covariates)
    seed = cfg["run"]["seed"]
    dataset_id = cfg["data"]["counts"] or cfg["data"]["matrix"]
    reports: list[BenchmarkReport] = []
    metrics = cfg["eval"]["metrics"]
    known = {"heldout_ll", "imputation", "silhouette", "qc_correlation"}
    unknown = set(metrics) - known
    if unknown:
        raise ConfigError(f"unknown eval metrics: {sorted(unknown)}")

    def report(metric, value):
        reports.append(BenchmarkReport(metric, float(value), dataset_id, digest, seed))

    if "heldout_ll" in metrics:
        ll = heldout_marginal_ll(
            params, matrix, covariates, cfg["eval"]["n_importance_samples"], np.random.default_rng(seed)
        )
        report("heldout_ll", ll)
    if "imputation" in metrics:
        decay = cfg["corruption"]["decay"] or calibrate_decay(
            matrix, cfg["corruption"]["target_fraction"]
        )
        corrupted, mask = corrupt(matrix, CorruptionConfig(decay=decay, seed=seed))
        result = impute(params, corrupted, covariates, mask)
        baseline = float(np.median(np.abs(corrupted.counts.mean() - mask.true_values)))
        report("imputation_median_abs_error", result.median_abs_error)
        report("imputation_mean_abs_error", result.mean_abs_error)
        report("imputation_baseline_median_abs_error", baseline)
        report("dropout_identification_bce", result.dropout_bce)
        report("corruption_decay", decay)
    if "silhouette" in metrics or "qc_correlation" in metrics:
        q = encode(matrix.counts, covariates, params, mode="eval")
        latent = q.mean
        if "silhouette" in metrics:
            if matrix.labels is None:
                raise ConfigError("silhouette metric needs labels in the covariates CSV")
            report("silhouette", silhouette(latent, matrix.labels))
        if "qc_correlation" in metrics:
            qc_cols, _ = build_covariates(matrix)
            if qc_cols is None:
                raise ConfigError("qc_correlation metric needs batch or QC columns")
            report("qc_correlation", qc_correlation(latent, qc_cols))
    write_reports_csv(reports, os.path.join(out_dir, "report.csv"))
    write_reports_json(reports, os.path.join(out_dir, "report.json"))
    for r in reports:
        print(f"eval: {r.metric} = {r.value:.6g}")
    return 0


def cmd_impute(cfg: dict, out_dir: str, digest: str) -> int:
    params = _load_model(cfg)
    matrix = _load_dataset(cfg)
    covariates, _ = _assemble_covariates(matrix, cfg)
    _check_dims(params, matrix, covariates)
    seed = cfg["run"]["seed"]
    decay = cfg["corruption"]["decay"] or calibrate_decay(matrix, cfg["corruption"]["target_fraction"])
    corrupted, mask = corrupt(matrix, CorruptionConfig(decay=decay, seed=seed))
    result = impute(params, corrupted, covariates, mask)
    stamp = _stamp(cfg, digest)
    with open(os.path.join(out_dir, "imputed_entries.csv"), "w", encoding="utf-8") as fh:
        fh.write(f"# {stamp}\n")
        fh.write("cell_id,gene,true,imputed,pi\n")
        for r, c, t, v, p in zip(
            mask.rows, mask.cols, mask.true_values, result.imputed, result.pi
        ):
            fh.write(
                f"{matrix.cell_ids[r]},{matrix.gene_names[c]},{int(t)},{v!r},{p!r}\n"
            )
    dataset_id = cfg["data"]["counts"] or cfg["data"]["matrix"]
    reports = [
        BenchmarkReport("imputation_median_abs_error", result.median_abs_error, dataset_id, digest, seed),
        BenchmarkReport("imputation_mean_abs_error", result.mean_abs_error, dataset_id, digest, seed),
        BenchmarkReport("dropout_identification_bce", result.dropout_bce, dataset_id, digest, seed),
        BenchmarkReport("corruption_decay", decay, dataset_id, digest, seed),
        BenchmarkReport("masked_entries", float(len(mask)), dataset_id, digest, seed),
    ]
    write_reports_csv(reports, os.path.join(out_dir, "imputation_report.csv"))
    write_reports_json(reports, os.path.join(out_dir, "imputation_report.json"))
    print(
        f"impute: {len(mask)} masked entries, median abs error "
        f"{result.median_abs_error:.4g}, BCE {result.dropout_bce:.4g}"
    )
    return 0


def cmd_de(cfg: dict, out_dir: str, digest: str) -> int:
    params = _load_model(cfg)
    matrix = _load_dataset(cfg)
    covariates, _ = _assemble_covariates(matrix, cfg)
    _check_dims(params, matrix, covariates)
    if matrix.labels is None:
        raise ConfigError("de needs labels in the covariates CSV")
    group_a, group_b = cfg["de"]["group_a"], cfg["de"]["group_b"]
    if not group_a or not group_b:
        raise ConfigError("de.group_a and de.group_b must be set")
    labels = np.asarray(matrix.labels)
    idx_a = np.nonzero(labels == group_a)[0]
    idx_b = np.nonzero(labels == group_b)[0]
    if len(idx_a) == 0 or len(idx_b) == 0:
        raise DataError(
            f"empty cell set for DE groups ({group_a}: {len(idx_a)}, {group_b}: {len(idx_b)})"
        )
    results = de_test(
        params,
        matrix.subset_cells(idx_a),
        covariates[idx_a] if covariates is not None else None,
        matrix.subset_cells(idx_b),
        covariates[idx_b] if covariates is not None else None,
        gene_names=matrix.gene_names,
        n_pairs=cfg["de"]["n_pairs"],
        n_mc=cfg["de"]["n_mc"],
        seed=cfg["run"]["seed"],
    )
    write_de_csv(results, os.path.join(out_dir, "de_results.csv"), header_comment=_stamp(cfg, digest))
    top = max(results, key=lambda r: abs(r.log_bayes_factor_corrected))
    print(
        f"de: {len(results)} genes, |A|={len(idx_a)} |B|={len(idx_b)}, "
        f"top |log BF| {abs(top.log_bayes_factor_corrected):.3g} ({top.gene})"
    )
    return 0


# ---------------------------------------------------------------------------
# argument parsing / entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zinbvae",
        description="Zero-inflated NB variational autoencoder: simulate, train, evaluate, impute, test differential expression.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        p = sub.add_parser(command, help=f"run the {command} step")
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--out", help="override run.out (output directory)")
        p.add_argument("--threads", type=int, help="override run.threads (recorded; math is single-threaded)")
        for section, keys in SCHEMA.items():
            for key in keys:
                p.add_argument(f"--{section}.{key}", dest=f"set::{section}.{key}", metavar="V")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = {
            name.split("::", 1)[1]: value
            for name, value in vars(args).items()
            if name.startswith("set::") and value is not None
        }
        if args.seed is not None:
            overrides["run.seed"] = str(args.seed)
        if args.out is not None:
            overrides["run.out"] = args.out
        if args.threads is not None:
            overrides["run.threads"] = str(args.threads)
        cfg = resolve_config(args.config, overrides)
        digest = config_hash(args.command, cfg)
        out_dir = cfg["run"]["out"]
        os.makedirs(out_dir, exist_ok=True)
        _write_resolved_config(out_dir, args.command, cfg, digest)
        handler = {
            "simulate": cmd_simulate,
            "train": cmd_train,
            "eval": cmd_eval,
            "impute": cmd_impute,
            "de": cmd_de,
        }[args.command]
        return handler(cfg, out_dir, digest)
    except ConfigError as err:
        print(f"error: kind=config exit=2 message={err}", file=sys.stderr)
        return 2
    except DataError as err:
        print(f"error: kind=data exit=3 message={err}", file=sys.stderr)
        return 3
    except NumericalError as err:
        print(f"error: kind=numerical exit=4 message={err}", file=sys.stderr)
        return 4
    except ValueError as err:
        print(f"error: kind=config exit=2 message={err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
