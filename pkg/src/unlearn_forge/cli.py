"""Experiment harness: config parsing, orchestration, persistence, replay.

Subcommands
-----------
``run``             learn -> delete -> unlearn -> certify -> bound on one draw
``certify``         the same pipeline, stopping after the certificate
``sweep``           repeat a run along one scalar config axis
``validate-bounds`` replay the pipeline over many draws and count violations
``gen-data``        write a dataset CSV drawn from the population spec

All randomness flows from the config's single root seed through labelled
stage derivations, so identical configs give byte-identical result files
(the manifest additionally records wall-clock timings, which vary).  Floats
are printed with ``repr`` in both JSON and CSV, so shared fields agree to
full round-trip precision.
"""

import argparse
import copy
import csv
import dataclasses
import hashlib
import io
import json
import os
import sys
import time

import jsonschema
import numpy as np

from . import __version__
from .bayes import ConjugateModel, make_statistic
from .core import (
    LossKind,
    PopulationSpec,
    generate_dataset,
    write_dataset_csv,
)
from .errors import ConfigError, UnlearnForgeError
from .gaussian import GaussianDist, GaussianMixture
from .pacbayes import (
    BoundInstantiation,
    PipelineConfig,
    avu_instantiation,
    bound_trial,
    estimate_xi_for,
    fl_instantiation,
    generic_instantiation,
    run_unlearning,
    run_validity_experiment,
)
from .seeding import derive_seed
from .unlearn import (
    AmortizedMechanism,
    OptimOptions,
    ScrubMechanism,
    certify_epsilon,
    scrub_marginal_exact,
    sweep_forgetting_lagrangian,
    train_amortized,
)

SCHEMA_VERSION = 1
SWEEP_AXES = ("lambda", "beta", "delta", "m", "n")

_GAUSSIAN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["mean", "cov_factor_rows"],
    "properties": {
        "mean": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "cov_factor_rows": {
            "type": "array",
            "items": {"type": "array", "items": {"type": "number"}},
            "minItems": 1,
        },
    },
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "seed", "model", "population", "n", "m", "method"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["task", "prior", "noise_variance"],
            "properties": {
                "task": {"enum": ["gaussian-mean", "linear-regression"]},
                "prior": _GAUSSIAN_SCHEMA,
                "noise_variance": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "population": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "true_params", "noise_variance"],
            "properties": {
                "kind": {"enum": ["gaussian-mean", "linear-regression"]},
                "true_params": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                "noise_variance": {"type": "number", "exclusiveMinimum": 0},
                "feature_distribution": _GAUSSIAN_SCHEMA,
            },
        },
        "n": {"type": "integer", "minimum": 1},
        "m": {"type": "integer", "minimum": 1},
        "method": {"enum": ["retrain", "noop", "eubo", "avu", "scrub"]},
        "statistic_level": {"enum": ["full-posterior", "summary"]},
        "loss": {"enum": ["squared-error", "gaussian-negative-log-likelihood"]},
        "certificate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["marginal", "conditional-worst", "conditional-avg"]},
                "threshold": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "n_mc": {"type": "integer", "minimum": 100},
            },
        },
        "bound": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "delta"],
            "properties": {
                "kind": {"enum": ["generic", "avu", "fl"]},
                "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "beta": {"type": "number", "exclusiveMinimum": 0},
                "prior_rule": {"enum": ["posterior", "model-prior"]},
                "n_outer": {"type": "integer", "minimum": 10},
                "n_inner": {"type": "integer", "minimum": 10},
            },
        },
        "optimizer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "step_size": {"type": "number", "exclusiveMinimum": 0},
                "max_steps": {"type": "integer", "minimum": 1},
                "grad_tolerance": {"type": "number", "exclusiveMinimum": 0},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "mc": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "k_components": {"type": "integer", "minimum": 1},
                "log_loss_clamp": {"type": ["number", "null"], "exclusiveMinimum": 0},
            },
        },
        "scrub": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lambda": {"type": "number", "exclusiveMinimum": 0},
                "marginal_mode": {"enum": ["mc", "moment-match"]},
                "reference_noise_scale": {"type": "number", "exclusiveMinimum": 0},
                "optimize": {"type": "boolean"},
                "n_mc": {"type": "integer", "minimum": 100},
            },
        },
        "amortized": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mechanism_path": {"type": ["string", "null"]},
                "train_tasks": {"type": "integer", "minimum": 1},
            },
        },
        "validity": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"n_trials": {"type": "integer", "minimum": 100}},
        },
    },
}

_DEFAULTS = {
    "output_dir": "runs/out",
    "statistic_level": "summary",
    "loss": "squared-error",
    "certificate": {"mode": "marginal", "threshold": None, "n_mc": 20000},
    "optimizer": {"step_size": 0.25, "max_steps": 20000, "grad_tolerance": 1e-8, "seed": 0},
    "mc": {"k_components": 64, "log_loss_clamp": 50.0},
    "scrub": {
        "lambda": 1.0,
        "marginal_mode": "moment-match",
        "reference_noise_scale": 0.25,
        "optimize": True,
        "n_mc": 2000,
    },
    "amortized": {"mechanism_path": None, "train_tasks": 256},
    "validity": {"n_trials": 1000},
}


def _json_path(error) -> str:
    parts = []
    for piece in error.absolute_path:
        parts.append(f"[{piece}]" if isinstance(piece, int) else f".{piece}")
    return "$" + "".join(parts)


def load_config(path: str) -> dict:
    """Read, schema-validate and default-fill an experiment config."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            config = json.load(handle)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    problems = sorted(validator.iter_errors(config), key=lambda e: list(e.absolute_path))
    if problems:
        details = "; ".join(f"at {_json_path(e)}: {e.message}" for e in problems)
        raise ConfigError(f"invalid config: {details}")
    merged = copy.deepcopy(config)
    for key, value in _DEFAULTS.items():
        if isinstance(value, dict):
            section = dict(value)
            section.update(merged.get(key, {}))
            merged[key] = section
        else:
            merged.setdefault(key, value)
    if not merged["m"] < merged["n"]:
        raise ConfigError(f"at $.m: m must be smaller than n (m={merged['m']}, n={merged['n']})")
    bound = merged.get("bound")
    if bound is not None:
        bound.setdefault("beta", 1.0)
        bound.setdefault("prior_rule", "posterior")
        bound.setdefault("n_outer", 800)
        bound.setdefault("n_inner", 256)
        if bound["kind"] == "fl":
            implied = 1.0 / bound["beta"]
            stated = config.get("scrub", {}).get("lambda")
            if stated is not None and abs(stated - implied) > 1e-9 * max(1.0, implied):
                raise ConfigError(
                    "at $.scrub.lambda: a forgetting-objective bound requires lambda = 1/beta "
                    f"(lambda={stated}, beta={bound['beta']})"
                )
            merged["scrub"]["lambda"] = implied
    return merged


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def build_model(config: dict) -> ConjugateModel:
    section = config["model"]
    return ConjugateModel(
        prior=GaussianDist.from_json_dict(section["prior"]),
        noise_variance=section["noise_variance"],
        task=section["task"],
    )


def build_spec(config: dict) -> PopulationSpec:
    section = config["population"]
    feature = section.get("feature_distribution")
    return PopulationSpec(
        kind=section["kind"],
        true_params=np.asarray(section["true_params"], dtype=float),
        noise_variance=section["noise_variance"],
        feature_distribution=GaussianDist.from_json_dict(feature) if feature else None,
    )


def _build_optimizer(config: dict) -> OptimOptions:
    section = config["optimizer"]
    return OptimOptions(
        step_size=section["step_size"],
        max_steps=section["max_steps"],
        grad_tolerance=section["grad_tolerance"],
        seed=section["seed"],
    )


def _resolve_amortized(config: dict, model, spec, seed, out_dir) -> AmortizedMechanism:
    section = config["amortized"]
    if section["mechanism_path"]:
        with open(section["mechanism_path"], "r", encoding="utf-8") as handle:
            return AmortizedMechanism.from_json_dict(json.load(handle))
    dim = model.param_dim
    init = AmortizedMechanism(
        np.zeros((dim, dim)), np.zeros(dim), 0.3 * np.eye(dim), config["statistic_level"]
    )
    mech = train_amortized(
        init,
        model,
        spec,
        config["n"],
        config["m"],
        n_tasks=section["train_tasks"],
        opts=OptimOptions(
            step_size=0.5, max_steps=40000, grad_tolerance=1e-10,
            seed=derive_seed(seed, "amortized-training"),
        ),
    )
    if out_dir is not None:
        write_json_atomic(os.path.join(out_dir, "mechanism.json"), mech.to_json_dict())
    return mech


def build_pipeline(config: dict, seed: int, out_dir=None) -> PipelineConfig:
    model = build_model(config)
    spec = build_spec(config)
    amortized = None
    if config["method"] == "avu":
        amortized = _resolve_amortized(config, model, spec, seed, out_dir)
    bound = config.get("bound") or {}
    return PipelineConfig(
        model=model,
        spec=spec,
        n=config["n"],
        m=config["m"],
        method=config["method"],
        statistic_level=config["statistic_level"],
        k_components=config["mc"]["k_components"],
        optimizer=_build_optimizer(config),
        loss=LossKind(config["loss"]),
        prior_rule=bound.get("prior_rule", "posterior"),
        scrub_lambda=config["scrub"]["lambda"],
        marginal_mode=config["scrub"]["marginal_mode"],
        scrub_n_mc=config["scrub"]["n_mc"],
        scrub_optimize=config["scrub"]["optimize"],
        reference_noise_scale=config["scrub"]["reference_noise_scale"],
        amortized=amortized,
        log_loss_clamp=config["mc"]["log_loss_clamp"],
    )


def build_instantiation(config: dict) -> BoundInstantiation:
    bound = config.get("bound")
    if bound is None:
        return None
    if bound["kind"] == "avu":
        return avu_instantiation(config["m"], bound["delta"])
    if bound["kind"] == "fl":
        return fl_instantiation(bound["beta"], bound["delta"])
    return generic_instantiation(bound["beta"], bound["delta"])


# ---------------------------------------------------------------------------
# deterministic writers
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return str(value)


def write_json_atomic(path: str, obj) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    payload = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as handle:
        handle.write(payload)
    os.replace(tmp, path)


def write_csv_atomic(path: str, header, rows) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    buffer = io.StringIO()
    writer = csv.writer(buffer)
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(row.get(column)) for column in header])
    tmp = path + ".tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as handle:
        handle.write(buffer.getvalue())
    os.replace(tmp, path)


class _StageClock:
    def __init__(self):
        self.times = {}

    def stage(self, name):
        clock = self

        class _Timer:
            def __enter__(self):
                self.start = time.perf_counter()

            def __exit__(self, *exc):
                clock.times[name] = clock.times.get(name, 0.0) + time.perf_counter() - self.start
                return False

        return _Timer()


def _write_manifest(out_dir, config, root_seed, stage_seeds, outputs, clock) -> None:
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "config_hash": config_hash(config),
        "root_seed": root_seed,
        "stage_seeds": stage_seeds,
        "outputs": sorted(outputs),
        "wall_clock_seconds": {k: round(v, 6) for k, v in clock.times.items()},
    }
    write_json_atomic(os.path.join(out_dir, "manifest.json"), manifest)


def _cert_json(cert) -> dict:
    return {
        "epsilon_estimate": cert.epsilon_estimate,
        "stderr": cert.stderr,
        "mode": cert.mode,
        "passed_at": cert.passed_at,
    }


def _xi_json(xi) -> dict:
    return {
        "log_xi": xi.log_xi,
        "stderr_log": xi.stderr_log,
        "n_outer": xi.n_outer,
        "n_inner": xi.n_inner,
        "kind": xi.kind,
        "overflow": xi.overflow,
    }


def _bound_json(report, xi) -> dict:
    return {
        "lhs": report.lhs,
        "lhs_stderr": report.lhs_stderr,
        "training_term": report.training_term,
        "kl_term": report.kl_term,
        "slack_term": report.slack_term,
        "rhs": report.rhs,
        "holds": report.holds,
        "low_confidence": report.low_confidence,
        "inst": {
            "kind": report.inst.kind,
            "a_components": list(report.inst.a_components),
            "beta_or_m": report.inst.beta_or_m,
            "delta": report.inst.delta,
        },
        "xi": _xi_json(xi),
    }


# ---------------------------------------------------------------------------
# pipeline execution shared by run / certify / sweep
# ---------------------------------------------------------------------------


def _execute_run(config, seed, out_dir, with_bound, clock):
    stage_seeds = {
        "pipeline": derive_seed(seed, "pipeline"),
        "certificate": derive_seed(seed, "certificate"),
        "xi": derive_seed(seed, "xi"),
    }
    with clock.stage("unlearn"):
        pipeline = build_pipeline(config, seed, out_dir)
        pieces = run_unlearning(pipeline, stage_seeds["pipeline"])
    cert_cfg = config["certificate"]
    with clock.stage("certify"):
        cert = certify_epsilon(
            pieces.mixture,
            pieces.retrained,
            cert_cfg["mode"],
            cert_cfg["n_mc"],
            stage_seeds["certificate"],
            cert_cfg["threshold"],
        )
    report = xi = None
    if with_bound:
        inst = build_instantiation(config)
        if inst is not None:
            bound_cfg = config["bound"]
            with clock.stage("xi"):
                xi = estimate_xi_for(
                    inst, pipeline, bound_cfg["n_outer"], bound_cfg["n_inner"], stage_seeds["xi"]
                )
            with clock.stage("bound"):
                report = bound_trial(inst, pipeline, xi, stage_seeds["pipeline"])
    summary = {
        "method": config["method"],
        "n": config["n"],
        "m": config["m"],
        "seed": seed,
        "cert_mode": cert.mode,
        "cert_estimate": cert.epsilon_estimate,
        "cert_stderr": cert.stderr,
        "cert_passed_at": cert.passed_at,
    }
    if report is not None:
        summary.update(
            lhs=report.lhs,
            lhs_stderr=report.lhs_stderr,
            training_term=report.training_term,
            kl_term=report.kl_term,
            slack_term=report.slack_term,
            rhs=report.rhs,
            holds=report.holds,
        )
    return pipeline, pieces, cert, report, xi, summary, stage_seeds


SUMMARY_COLUMNS = [
    "method", "n", "m", "seed",
    "cert_mode", "cert_estimate", "cert_stderr", "cert_passed_at",
    "lhs", "lhs_stderr", "training_term", "kl_term", "slack_term", "rhs", "holds",
]


def cmd_run(config_path, out=None, seed=None, jobs=1, with_bound=True) -> int:
    config = load_config(config_path)
    root_seed = config["seed"] if seed is None else seed
    out_dir = out or config["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    clock = _StageClock()
    _, _, cert, report, xi, summary, stage_seeds = _execute_run(
        config, root_seed, out_dir, with_bound, clock
    )
    outputs = ["cert_result.json", "run_summary.csv"]
    write_json_atomic(os.path.join(out_dir, "cert_result.json"), _cert_json(cert))
    if report is not None:
        write_json_atomic(os.path.join(out_dir, "bound_report.json"), _bound_json(report, xi))
        outputs.append("bound_report.json")
    write_csv_atomic(os.path.join(out_dir, "run_summary.csv"), SUMMARY_COLUMNS, [summary])
    _write_manifest(out_dir, config, root_seed, stage_seeds, outputs, clock)
    return 0


def cmd_certify(config_path, out=None, seed=None, jobs=1) -> int:
    return cmd_run(config_path, out=out, seed=seed, jobs=jobs, with_bound=False)


def cmd_gen_data(config_path, out=None, seed=None, jobs=1) -> int:
    config = load_config(config_path)
    root_seed = config["seed"] if seed is None else seed
    out_dir = out or config["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    clock = _StageClock()
    stage_seeds = {"data": derive_seed(root_seed, "data")}
    with clock.stage("gen-data"):
        data = generate_dataset(build_spec(config), config["n"], stage_seeds["data"])
        target = os.path.join(out_dir, "dataset.csv")
        tmp = target + ".tmp"
        write_dataset_csv(data, tmp)
        os.replace(tmp, target)
    _write_manifest(out_dir, config, root_seed, stage_seeds, ["dataset.csv"], clock)
    return 0


def _parse_values(raw: str) -> list:
    values = [piece for piece in raw.split(",") if piece.strip() != ""]
    return [float(piece) for piece in values]


def _patch_axis(config: dict, axis: str, value: float) -> dict:
    patched = copy.deepcopy(config)
    if axis == "lambda":
        patched["scrub"]["lambda"] = value
    elif axis == "beta":
        if patched.get("bound") is None:
            raise ConfigError("sweeping beta requires a bound section")
        patched["bound"]["beta"] = value
        if patched["bound"]["kind"] == "fl":
            patched["scrub"]["lambda"] = 1.0 / value
    elif axis == "delta":
        if patched.get("bound") is None:
            raise ConfigError("sweeping delta requires a bound section")
        patched["bound"]["delta"] = value
    elif axis == "m":
        patched["m"] = int(value)
    elif axis == "n":
        patched["n"] = int(value)
    else:
        raise ConfigError(f"axis must be one of {SWEEP_AXES}, got {axis!r}")
    if not patched["m"] < patched["n"]:
        raise ConfigError(f"sweep value leaves m >= n (m={patched['m']}, n={patched['n']})")
    return patched


def _sweep_scrub_lambda(config, values, root_seed, out_dir, clock):
    """Warm-started multiplier sweep with a shared candidate pool.

    All multipliers share one dataset draw; each reported row is the best
    candidate for its multiplier, which makes the loss and KL columns
    monotone in closed-form mode.
    """
    pipeline = build_pipeline(config, root_seed, out_dir)
    pipeline_seed = derive_seed(root_seed, "pipeline")
    base = dataclasses.replace(pipeline, scrub_optimize=False)
    with clock.stage("sweep"):
        pieces = run_unlearning(base, pipeline_seed)
        init = ScrubMechanism.identity(
            pipeline.model.param_dim, pipeline.reference().noise_cov_factor
        )
        rows = sweep_forgetting_lagrangian(
            init,
            pieces.learned,
            pieces.retrained,
            pipeline.reference(),
            pieces.remaining,
            values,
            pipeline.scrub_n_mc,
            derive_seed(root_seed, "scrub-sweep"),
            pipeline.marginal_mode,
            pipeline.optimizer,
            pipeline.k_components,
        )
        out = []
        for row in rows:
            cert_cfg = config["certificate"]
            mixture = GaussianMixture.single(
                scrub_marginal_exact(row["scrub"], pieces.learned)
            )
            cert = certify_epsilon(
                mixture,
                pieces.retrained,
                cert_cfg["mode"],
                cert_cfg["n_mc"],
                derive_seed(root_seed, f"cert-{row['lambda']}"),
                cert_cfg["threshold"],
            )
            out.append(
                {
                    "lambda": row["lambda"],
                    "fl_loss_term": row["loss_term"],
                    "fl_kl_term": row["kl_term"],
                    "fl_objective": row["objective"],
                    "cert_estimate": cert.epsilon_estimate,
                    "cert_stderr": cert.stderr,
                }
            )
    return out, {"pipeline": pipeline_seed}


def cmd_sweep(config_path, axis, values, out=None, seed=None, jobs=1) -> int:
    config = load_config(config_path)
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis must be one of {SWEEP_AXES}, got {axis!r}")
    if not values:
        raise ConfigError("sweep values must be a non-empty list")
    root_seed = config["seed"] if seed is None else seed
    out_dir = out or config["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    clock = _StageClock()
    if axis == "lambda" and config["method"] == "scrub":
        rows, stage_seeds = _sweep_scrub_lambda(config, values, root_seed, out_dir, clock)
        header = ["lambda", "fl_loss_term", "fl_kl_term", "fl_objective",
                  "cert_estimate", "cert_stderr"]
    else:
        rows = []
        stage_seeds = {}
        header = ["axis_value"] + SUMMARY_COLUMNS
        for value in values:
            patched = _patch_axis(config, axis, value)
            sub_dir = os.path.join(out_dir, f"{axis}={value:g}")
            os.makedirs(sub_dir, exist_ok=True)
            sub_seed = derive_seed(root_seed, f"sweep-{axis}-{value!r}")
            stage_seeds[f"{axis}={value:g}"] = sub_seed
            with clock.stage(f"{axis}={value:g}"):
                _, _, cert, report, xi, summary, _ = _execute_run(
                    patched, sub_seed, sub_dir, True, clock
                )
                write_json_atomic(os.path.join(sub_dir, "cert_result.json"), _cert_json(cert))
                if report is not None:
                    write_json_atomic(
                        os.path.join(sub_dir, "bound_report.json"), _bound_json(report, xi)
                    )
            rows.append({"axis_value": value, **summary})
    write_csv_atomic(os.path.join(out_dir, "sweep.csv"), header, rows)
    _write_manifest(out_dir, config, root_seed, stage_seeds, ["sweep.csv"], clock)
    return 0


TRIAL_COLUMNS = ["seed", "lhs", "lhs_stderr", "training_term", "kl_term",
                 "slack_term", "rhs", "holds"]


def cmd_validate_bounds(config_path, out=None, seed=None, jobs=1) -> int:
    config = load_config(config_path)
    if config.get("bound") is None:
        raise ConfigError("at $.bound: validate-bounds requires a bound section")
    root_seed = config["seed"] if seed is None else seed
    out_dir = out or config["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    clock = _StageClock()
    pipeline = build_pipeline(config, root_seed, out_dir)
    inst = build_instantiation(config)
    bound_cfg = config["bound"]
    stage_seeds = {
        "trials": derive_seed(root_seed, "trials"),
        "xi": derive_seed(root_seed, "xi"),
    }
    with clock.stage("xi"):
        xi = estimate_xi_for(
            inst, pipeline, bound_cfg["n_outer"], bound_cfg["n_inner"], stage_seeds["xi"]
        )
    with clock.stage("trials"):
        report = run_validity_experiment(
            inst,
            pipeline,
            config["validity"]["n_trials"],
            stage_seeds["trials"],
            jobs=jobs,
            xi=xi,
        )
    if report.resolution_warning:
        print(
            f"warning: delta * n_trials = {inst.delta * report.n_trials:g} < 5; "
            "too few trials to resolve the advertised failure rate",
            file=sys.stderr,
        )
    payload = {
        "n_trials": report.n_trials,
        "n_violations": report.n_violations,
        "delta": report.delta,
        "binomial_ci": list(report.binomial_ci),
        "violation_rate": report.violation_rate,
        "within_tolerance": report.within_tolerance(),
        "resolution_warning": report.resolution_warning,
        "xi": _xi_json(report.xi),
    }
    write_json_atomic(os.path.join(out_dir, "validity_report.json"), payload)
    write_csv_atomic(os.path.join(out_dir, "trials.csv"), TRIAL_COLUMNS, report.trial_rows)
    _write_manifest(
        out_dir, config, root_seed, stage_seeds,
        ["validity_report.json", "trials.csv"], clock,
    )
    return 0 if report.within_tolerance() else 1


def _default_jobs() -> int:
    raw = os.environ.get("UNLEARN_FORGE_JOBS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="unlearn-forge",
        description="Bayesian machine-unlearning workbench with exact retraining oracles",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="root seed override")
        p.add_argument("--jobs", type=int, default=_default_jobs(),
                       help="worker processes (default: UNLEARN_FORGE_JOBS or 1)")

    add_common(sub.add_parser("run", help="full pipeline: learn, delete, unlearn, certify, bound"))
    add_common(sub.add_parser("certify", help="pipeline up to the unlearning certificate"))
    add_common(sub.add_parser("gen-data", help="write a dataset CSV from the population spec"))
    add_common(sub.add_parser("validate-bounds", help="replay trials and count bound violations"))
    sweep = sub.add_parser("sweep", help="repeat the run along one scalar config axis")
    add_common(sweep)
    sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sweep.add_argument("--values", required=True,
                       help="comma-separated numeric values for the axis")

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out, args.seed, args.jobs)
        if args.command == "certify":
            return cmd_certify(args.config, args.out, args.seed, args.jobs)
        if args.command == "gen-data":
            return cmd_gen_data(args.config, args.out, args.seed, args.jobs)
        if args.command == "validate-bounds":
            return cmd_validate_bounds(args.config, args.out, args.seed, args.jobs)
        if args.command == "sweep":
            return cmd_sweep(
                args.config, args.axis, _parse_values(args.values),
                args.out, args.seed, args.jobs,
            )
        parser.error(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except UnlearnForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
