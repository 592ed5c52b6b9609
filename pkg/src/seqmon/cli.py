"""Command-line entry points: interim analysis, simulation grids, boundaries.

Exit codes: 0 success, 2 configuration problems, 3 data problems, 4
numerical failures. All runs are driven by a JSON config plus a handful of
flags; reports echo the resolved configuration so a run can be reproduced
from its own output.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .boundaries import (
    BoundaryConfig,
    BoundaryResult,
    compute_boundary,
    interim_decision,
)
from .datasets import (
    LongitudinalDataset,
    assign_membership_by_counts,
    read_dataset_csv,
)
from .exceptions import ConfigError, DataError, NumericalError, SeqmonError
from .gee import ModelSpec, TimeFactor, fit_gee
from .hypotheses import (
    BUILTIN_HYPOTHESES,
    HypothesisSpec,
    builtin_hypothesis,
    reference_pvalue,
    wald_statistic,
)
from .imputation import (
    ImputationConfig,
    compound_from_pooled,
    impute_and_fit,
    pooled_wald,
)
from .seqcov import CompoundCovariance, InterimSchedule, scale_blocks
from .simulate import SimScenario, run_operating_characteristics

RATE_COLUMNS = ("naive", "pocock_static", "pocock_dynamic", "obf_static", "obf_dynamic")


# -- config helpers ----------------------------------------------------------


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}")


def model_from_config(section: dict) -> ModelSpec:
    if not isinstance(section, dict) or "link" not in section:
        raise ConfigError("model section needs at least a 'link'")
    tf = None
    if section.get("time_factor") is not None:
        tf_raw = section["time_factor"]
        try:
            tf = TimeFactor(
                levels=tuple(float(x) for x in tf_raw["levels"]),
                baseline=float(tf_raw["baseline"]),
                interact_with=tuple(tf_raw.get("interact_with", ())),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad time_factor section: {exc}")
    terms = tuple(
        tuple(t) if isinstance(t, (list, tuple)) else str(t)
        for t in section.get("terms", ())
    )
    return ModelSpec(link=section["link"], terms=terms, time_factor=tf)


def hypothesis_from_config(section: dict) -> HypothesisSpec:
    if "builtin" in section:
        return builtin_hypothesis(section["builtin"])
    if "contrast" in section:
        return HypothesisSpec.linear(section["contrast"], section.get("gamma"))
    raise ConfigError(
        f"hypothesis section needs 'builtin' (one of {sorted(BUILTIN_HYPOTHESES)}) "
        "or a 'contrast' matrix"
    )


def schedule_counts_from_config(section: dict) -> tuple[int, ...]:
    if "group_counts" in section:
        return tuple(int(c) for c in section["group_counts"])
    if "fractions" in section and "n" in section:
        return InterimSchedule.from_fractions(int(section["n"]), section["fractions"]).counts
    raise ConfigError("schedule section needs 'group_counts' or 'fractions' plus 'n'")


def boundary_config_from_config(section: dict, seed: int | None) -> BoundaryConfig:
    return BoundaryConfig(
        rule=section.get("rule", "pocock"),
        alpha=float(section.get("alpha", 0.05)),
        n_draws=int(section.get("draws", 1_000_000)),
        seed=int(section["seed"]) if "seed" in section else int(seed or 0),
        tol=float(section.get("tol", 1e-3)),
    )


def imputation_config_from_config(section: dict, seed: int | None) -> ImputationConfig:
    try:
        methods = dict(section["methods"])
    except KeyError:
        raise ConfigError("imputation section needs a 'methods' column map")
    return ImputationConfig(
        count=int(section.get("count", 30)),
        methods=methods,
        seed=int(section["seed"]) if "seed" in section else int(seed or 0),
        sweeps=int(section.get("sweeps", 10)),
    )


# -- boundary persistence ----------------------------------------------------


def persist_boundary(result: BoundaryResult, path) -> None:
    """Write a calibrated boundary to JSON (validated on the way out)."""
    result.validate()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(result.to_dict(), fh, indent=2)
        fh.write("\n")


def load_boundary(path) -> BoundaryResult:
    """Read a boundary JSON, refusing records that fail validation."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read boundary file {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise DataError(f"boundary file {path} is not valid JSON: {exc}")
    return BoundaryResult.from_dict(data)


# -- interim mode ------------------------------------------------------------


def _ensure_outdir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _membership_counts(planned: tuple[int, ...], m: int, n_file: int) -> tuple[int, ...]:
    """Planned counts up to analysis m, with the current count realized."""
    counts = list(planned[: m - 1]) + [n_file]
    if any(b <= a for a, b in zip(counts, counts[1:])):
        raise DataError(
            f"dataset has {n_file} groups, inconsistent with planned counts "
            f"{planned} at analysis {m}"
        )
    return tuple(counts)


def run_interim(args) -> dict:
    cfg = load_config(args.config)
    if args.dataset is None:
        raise ConfigError("interim mode needs --dataset")
    if args.interim is None:
        raise ConfigError("interim mode needs --interim")
    m = int(args.interim)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)

    dataset = read_dataset_csv(args.dataset)
    model = model_from_config(cfg.get("model", {}))
    hyp = hypothesis_from_config(cfg.get("hypothesis", {}))
    corr = cfg.get("correlation", {}).get("structure", "independence") \
        if isinstance(cfg.get("correlation"), dict) else cfg.get("correlation", "independence")
    planned = schedule_counts_from_config(cfg.get("schedule", {}))
    M = len(planned)
    if not 1 <= m <= M:
        raise ConfigError(f"--interim {m} outside the schedule's 1..{M}")

    n_file = dataset.n_groups
    member_counts = _membership_counts(planned, m, n_file)
    dataset = assign_membership_by_counts(dataset, member_counts)
    # realized prefix, planned future
    schedule = InterimSchedule(member_counts + planned[m:])

    bsection = dict(cfg.get("boundary", {}))
    decision_mode = bsection.pop("mode", "dynamic")
    if decision_mode not in ("static", "dynamic"):
        raise ConfigError(f"boundary mode must be static or dynamic: {decision_mode!r}")
    bcfg = boundary_config_from_config(bsection, seed)

    imputed_meta = None
    gaps = not bool(dataset.observed.all())
    if gaps:
        if "imputation" not in cfg:
            raise DataError(
                "dataset has missing cells; add an 'imputation' section to the config"
            )
        icfg = imputation_config_from_config(cfg["imputation"], seed)
        pooled = impute_and_fit(dataset, model, corr, m, icfg)
        wald = pooled_wald(pooled, hyp)
        cc = compound_from_pooled(pooled, schedule)
        beta = pooled.beta
        se = np.sqrt(np.diag(pooled.total))
        imputed_meta = {"count": pooled.count, "replaced": pooled.replaced}
    else:
        fit = fit_gee(dataset, model, corr, interim=m)
        wald = wald_statistic(fit, hyp)
        cc = scale_blocks(fit, schedule)
        beta = fit.beta
        se = fit.robust_se

    dynamic = compute_boundary(cc, hyp, bcfg)
    static = None
    if args.boundary_in:
        static = load_boundary(args.boundary_in)
        if static.M != M:
            raise ConfigError(
                f"stored boundary has {static.M} analyses, schedule has {M}"
            )
        if static.rule != bcfg.rule:
            raise ConfigError(
                f"stored boundary rule {static.rule!r} differs from configured {bcfg.rule!r}"
            )
    elif m == 1:
        static = dynamic
    if args.boundary_out:
        if m != 1 and args.boundary_in:
            raise ConfigError("--boundary-out only makes sense when computing a boundary")
        persist_boundary(static if m == 1 else dynamic, args.boundary_out)

    if decision_mode == "static":
        if static is None:
            raise ConfigError(
                "static decisions past the first analysis need --boundary-in"
            )
        decision = interim_decision(wald, static, m)
    else:
        decision = interim_decision(wald, dynamic, m)

    report = {
        "version": __version__,
        "mode": "interim",
        "interim": m,
        "n_groups": n_file,
        "schedule": list(schedule.counts),
        "seed": seed,
        "coefficients": {
            "names": list(model.column_names()),
            "estimate": beta.tolist(),
            "robust_se": se.tolist(),
        },
        "test": {
            "statistic": wald.statistic,
            "df": wald.df,
            "regime": wald.regime,
            "nu": wald.nu,
            "p_value": reference_pvalue(wald),
        },
        "boundary": {
            "rule": bcfg.rule,
            "decision_mode": decision_mode,
            "dynamic": dynamic.to_dict(),
            "static": None if static is None else static.to_dict(),
        },
        "imputation": imputed_meta,
        "decision": decision.value,
        "config_echo": cfg,
        "compound_covariance": cc.to_dict(),
    }
    out = _ensure_outdir(args)
    with open(out / "interim_report.json", "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    (out / "interim_report.txt").write_text(_format_interim_text(report))
    return report


def _format_interim_text(report: dict) -> str:
    lines = [
        f"interim analysis {report['interim']} of {len(report['schedule'])} "
        f"({report['n_groups']} groups)",
        "",
        f"{'coefficient':<20}{'estimate':>12}{'robust se':>12}",
    ]
    coef = report["coefficients"]
    for name, est, se in zip(coef["names"], coef["estimate"], coef["robust_se"]):
        lines.append(f"{name:<20}{est:>12.3f}{se:>12.3f}")
    test = report["test"]
    lines += [
        "",
        f"test statistic {test['statistic']:.3f} on {test['df']} df "
        f"(p = {test['p_value']:.3f}, {test['regime']})",
    ]
    b = report["boundary"]
    dyn = b["dynamic"]
    lines.append(
        f"dynamic {b['rule']} threshold at this analysis: "
        f"{dyn['thresholds'][report['interim'] - 1]:.3f} (tau* = {dyn['tau_star']:.3f})"
    )
    if b["static"] is not None:
        st = b["static"]
        lines.append(
            f"static {b['rule']} threshold at this analysis: "
            f"{st['thresholds'][report['interim'] - 1]:.3f} (tau* = {st['tau_star']:.3f})"
        )
    if report["imputation"] is not None:
        imp = report["imputation"]
        lines.append(
            f"imputations: {imp['count']} (regenerated {imp['replaced']})"
        )
    lines += ["", f"decision ({b['decision_mode']}): {report['decision']}", ""]
    return "\n".join(lines)


# -- boundary-only mode ------------------------------------------------------


def run_boundary_only(args) -> dict:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    hyp = hypothesis_from_config(cfg.get("hypothesis", {}))
    counts = schedule_counts_from_config(cfg.get("schedule", {}))
    schedule = InterimSchedule(counts)
    bcfg = boundary_config_from_config(cfg.get("boundary", {}), seed)
    if "sigma" in cfg:
        sigma = np.asarray(cfg["sigma"], dtype=float)
    else:
        if not hyp.is_linear:
            raise ConfigError("boundary_only with a general restriction needs 'sigma'")
        sigma = np.eye(hyp.contrast.shape[1])
    cc = CompoundCovariance.from_marginal(sigma, schedule, source_interim=None)
    result = compute_boundary(cc, hyp, bcfg)
    out = _ensure_outdir(args)
    path = args.boundary_out or (out / "boundary.json")
    persist_boundary(result, path)
    summary = {
        "version": __version__,
        "mode": "boundary_only",
        "schedule": list(counts),
        "boundary": result.to_dict(),
        "config_echo": cfg,
    }
    with open(out / "boundary_report.json", "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    print(
        f"{bcfg.rule} boundary for {len(counts)} analyses: tau* = {result.tau_star:.3f}, "
        "thresholds "
        + ", ".join(f"{t:.3f}" for t in result.thresholds)
    )
    return summary


# -- simulate mode -----------------------------------------------------------


def _scenario_from_config(section: dict, defaults: dict, index: int, seed: int, threads: int) -> SimScenario:
    merged = {**defaults, **section}
    return SimScenario(
        time_model=merged.get("time_model", "continuous"),
        n=int(merged["n"]),
        replicates=int(merged.get("replicates", 1000)),
        seed=int(merged["seed"]) if "seed" in merged else seed + index,
        effect=float(merged.get("effect", 0.0)),
        working=merged.get("working", "independence"),
        missingness=merged.get("missingness", "none"),
        fractions=tuple(merged.get("fractions", (1.0 / 3.0, 2.0 / 3.0, 1.0))),
        alpha=float(merged.get("alpha", 0.05)),
        boundary_draws=int(merged.get("boundary_draws", 10_000)),
        imputations=int(merged.get("imputations", 30)),
        sweeps=int(merged.get("sweeps", 10)),
        threads=threads,
    )


def _cell_id(scenario: SimScenario) -> str:
    payload = json.dumps(
        {
            "time_model": scenario.time_model,
            "n": scenario.n,
            "replicates": scenario.replicates,
            "seed": scenario.seed,
            "effect": scenario.effect,
            "working": scenario.working,
            "missingness": scenario.missingness,
            "fractions": list(scenario.fractions),
            "alpha": scenario.alpha,
            "boundary_draws": scenario.boundary_draws,
            "imputations": scenario.imputations,
            "sweeps": scenario.sweeps,
        },
        sort_keys=True,
    )
    digest = hashlib.sha256(payload.encode()).hexdigest()[:12]
    return (
        f"{scenario.time_model}_n{scenario.n}_{scenario.working}"
        f"_{scenario.missingness}_e{scenario.effect:g}_{digest}"
    )


def run_simulation(args) -> dict:
    cfg = load_config(args.config)
    if "scenarios" not in cfg or not cfg["scenarios"]:
        raise ConfigError("simulate mode needs a nonempty 'scenarios' list")
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    threads = _resolve_threads(args, cfg)
    defaults = cfg.get("defaults", {})
    out = _ensure_outdir(args)
    cells_dir = out / "cells"
    cells_dir.mkdir(exist_ok=True)

    t0 = time.perf_counter()
    rows = []
    completed, resumed = 0, 0
    for idx, section in enumerate(cfg["scenarios"]):
        scenario = _scenario_from_config(section, defaults, idx, seed, threads)
        marker = cells_dir / f"{_cell_id(scenario)}.json"
        if marker.exists():
            with open(marker) as fh:
                row = json.load(fh)
            resumed += 1
        else:
            oc = run_operating_characteristics(scenario)
            row = oc.to_dict()
            with open(marker, "w") as fh:
                json.dump(row, fh, indent=2)
                fh.write("\n")
            completed += 1
        rows.append(row)

    csv_path = out / "results.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = [
            "time_model", "n", "working", "missingness", "effect",
            "replicates", "replicates_used", "failures", "replaced_imputations",
        ]
        for key in RATE_COLUMNS:
            header += [key, f"{key}_se"]
        writer.writerow(header)
        for row in rows:
            line = [
                row["time_model"], row["n"], row["working"], row["missingness"],
                row["effect"], row["replicates"], row["replicates_used"],
                row["failures"], row["replaced_imputations"],
            ]
            for key in RATE_COLUMNS:
                rate = row["rates"].get(key)
                se = row["mc_se"].get(key)
                line += ["" if rate is None else repr(rate), "" if se is None else repr(se)]
            writer.writerow(line)

    metadata = {
        "version": __version__,
        "mode": "simulate",
        "seed": seed,
        "threads": threads,
        "cells_completed": completed,
        "cells_resumed": resumed,
        "wall_seconds": time.perf_counter() - t0,
        "config_echo": cfg,
    }
    with open(out / "metadata.json", "w") as fh:
        json.dump(metadata, fh, indent=2)
        fh.write("\n")
    return metadata


# -- entry point -------------------------------------------------------------


def _resolve_threads(args, cfg: dict) -> int:
    if args.threads is not None:
        return int(args.threads)
    env = os.environ.get("SEQMON_THREADS")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"SEQMON_THREADS must be an integer: {env!r}")
    return int(cfg.get("threads", 1))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seqmon",
        description="Group-sequential monitoring with robust marginal models",
    )
    parser.add_argument("--mode", required=True,
                        choices=("interim", "simulate", "boundary_only"))
    parser.add_argument("--config", required=True, help="JSON configuration file")
    parser.add_argument("--dataset", help="long-format CSV (interim mode)")
    parser.add_argument("--interim", type=int, help="1-based analysis index (interim mode)")
    parser.add_argument("--boundary-in", dest="boundary_in",
                        help="stored boundary JSON to reuse")
    parser.add_argument("--boundary-out", dest="boundary_out",
                        help="where to persist the computed boundary JSON")
    parser.add_argument("--out", help="output directory (default: current)")
    parser.add_argument("--seed", type=int, help="master seed (overrides config)")
    parser.add_argument("--threads", type=int,
                        help="worker count (default: SEQMON_THREADS or config or 1)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.mode == "interim":
            run_interim(args)
        elif args.mode == "simulate":
            run_simulation(args)
        else:
            run_boundary_only(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except SeqmonError as exc:  # pragma: no cover - catch-all for new subtypes
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
