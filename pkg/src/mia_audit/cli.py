"""Command-line front end: ``mia-audit <command> [options]``.

Exit codes: 0 success, 1 domain error (bad data, failed check), 2 usage error.
Outputs go to ``--out`` (default ``$MIA_AUDIT_OUT`` or ``mia-audit-out``);
raw datasets are read from ``--data`` (default ``$MIA_AUDIT_DATA`` or
``data/raw``). Every output file starts with a metadata block, and outputs
depend only on flags, input files and seed.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from mia_audit import __version__
from mia_audit import adversary as adv
from mia_audit import constructions, experiments, ingest
from mia_audit.core import EvaluationSet, FrequencyTable, build_evaluation_set, read_audit_csv
from mia_audit.errors import AuditError, PreconditionError, ValidationError
from mia_audit.overfit import (IDENTITY_TOL, geo_no_bias_implication_check,
                               identity_residuals, profile_to_dict)

DEFAULT_OUT = "mia-audit-out"
DEFAULT_DATA = os.path.join("data", "raw")


class UsageError(Exception):
    pass


# -- helpers ---------------------------------------------------------------------------

def _out_dir(args) -> str:
    out = args.out or os.environ.get("MIA_AUDIT_OUT") or DEFAULT_OUT
    os.makedirs(out, exist_ok=True)
    return out


def _data_path(args) -> str:
    return args.data or os.environ.get("MIA_AUDIT_DATA") or DEFAULT_DATA


def _config_echo(args) -> dict:
    skip = {"func", "corrupt"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _metadata(args, **extra) -> dict:
    meta = {"tool": "mia-audit", "version": __version__, "command": args.command,
            "config": _config_echo(args)}
    meta.update(extra)
    return meta


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, allow_nan=False, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _nan_to_none(obj):
    if isinstance(obj, float) and np.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_nan_to_none(v) for v in obj]
    return obj


def _grid(text: str):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"grid must be comma-separated integers, got {text!r}") from None
    if not values:
        raise UsageError("grid is empty")
    return values


def _load_population(args):
    """Population from ``--dataset``, ``--population`` or ``--spec``."""
    if getattr(args, "dataset", None):
        population, _ = ingest.load_dataset(args.dataset, _data_path(args))
        return population
    if getattr(args, "population", None):
        return ingest.read_population_csv(args.population)
    if getattr(args, "spec", None):
        return experiments.synth_generate(_read_spec(args.spec))
    raise UsageError("give one of --dataset, --population, --spec or --input-csv")


def _read_spec(path) -> experiments.SyntheticSpec:
    try:
        with open(path, encoding="utf-8") as fh:
            return experiments.SyntheticSpec.from_json(fh.read())
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        raise ValidationError(f"{path}: cannot read synthetic spec: {exc}") from None


def _recipe(args):
    if args.model == "dp-logreg" and args.epsilon is None:
        raise UsageError("--epsilon is required with --model dp-logreg")
    return experiments.recipe_from_name(args.model, args.epsilon)


def _input_csv_set(args) -> EvaluationSet:
    population, conf, m = read_audit_csv(args.input_csv)
    if m is None:
        raise ValidationError(f"{args.input_csv}: an m column is required to audit")
    members = np.flatnonzero(m == 1)
    nonmembers = np.flatnonzero(m == 0)
    eval_set, _ = build_evaluation_set((population.subset(members), conf[members]),
                                       (population.subset(nonmembers), conf[nonmembers]),
                                       args.bins, args.seed)
    return eval_set


def _run_study(args) -> experiments.ShuffleStudy:
    return experiments.run_shuffle_study(_load_population(args), _recipe(args),
                                         n_shuffles=args.shuffles, base_seed=args.seed,
                                         B=args.bins, test_fraction=args.test_fraction)


# -- commands --------------------------------------------------------------------------

def cmd_ingest(args):
    population, manifest = ingest.load_dataset(args.dataset, _data_path(args))
    out = _out_dir(args)
    csv_path = os.path.join(out, f"{args.dataset}.csv")
    ingest.write_population_csv(population, csv_path)
    meta = _metadata(args, digest=ingest.population_digest(population))
    manifest_dict = dict(vars(manifest))
    manifest_dict["subgroup_sizes"] = np.bincount(population.z, minlength=population.k).tolist()
    _write_json(os.path.join(out, f"{args.dataset}.manifest.json"),
                {"metadata": meta, "manifest": manifest_dict})
    print(f"{manifest.name}: {manifest.n_examples} examples, {manifest.n_features} features, "
          f"{manifest.dropped_rows} dropped -> {csv_path}")
    return 0


def cmd_datagen(args):
    if args.spec:
        spec = _read_spec(args.spec)
    else:
        if not args.sizes:
            raise UsageError("give --spec or --sizes")
        sizes = _grid(args.sizes)
        spec = experiments.SyntheticSpec.isotropic(
            k=len(sizes), p=args.classes, dim=args.dim, sizes=sizes,
            separation=args.separation, scale=args.scale, seed=args.seed)
    population = experiments.synth_generate(spec)
    out = _out_dir(args)
    with open(os.path.join(out, "spec.json"), "w", encoding="utf-8") as fh:
        fh.write(spec.to_json() + "\n")
    ingest.write_population_csv(population, os.path.join(out, "population.csv"))
    _write_json(os.path.join(out, "population.meta.json"),
                {"metadata": _metadata(args, digest=ingest.population_digest(population)),
                 "n_examples": len(population), "k": spec.k, "p": spec.p})
    print(f"wrote {len(population)} examples to {out}")
    return 0


def _write_study(args, out, study):
    p, k = study.shuffles[0].eval_set.p, study.k
    meta = _metadata(args, B=study.B, p=p, k=k, subgroups=list(study.subgroup_names))
    experiments.write_study_csv(study, os.path.join(out, "study.csv"), meta)
    experiments.write_records_csv(study, os.path.join(out, "records.csv"), meta)
    aggregates = study.aggregates()
    _write_json(os.path.join(out, "aggregate.json"),
                {"metadata": meta, "n_shuffles": study.n_shuffles,
                 "aggregates": _nan_to_none(aggregates)})
    profiles = []
    for s in study.shuffles:
        profile, gaps = s.profile()
        profiles.append(_nan_to_none(profile_to_dict(profile, gaps)))
    _write_json(os.path.join(out, "profile.json"), {"metadata": meta, "shuffles": profiles})
    return aggregates


def cmd_audit(args):
    out = _out_dir(args)
    if args.input_csv:
        eval_set = _input_csv_set(args)
        result = experiments.audit_evaluation_set(eval_set, seed=args.seed)
        study = experiments.ShuffleStudy("input-csv", args.seed, args.bins, (result,))
        _write_study(args, out, study)
        with open(os.path.join(out, "report.json"), "w", encoding="utf-8") as fh:
            fh.write(adv.report_to_json(result.report, eval_set, _metadata(args)) + "\n")
        print(json.dumps(result.report.to_dict(), sort_keys=True))
        return 0

    study = _run_study(args)
    aggregates = _write_study(args, out, study)
    for name in experiments.ShuffleStudy.METRICS:
        a = aggregates[name]
        print(f"{name:30s} {100 * a['mean']:6.2f} +- {100 * a['std']:5.2f}")
    return 0


def _print_checks(label, checks):
    failed = []
    for check in checks:
        ok = check.passed(IDENTITY_TOL)
        print(f"{'ok  ' if ok else 'FAIL'} {label} {check.name}: {check.residual:.3e}")
        if not ok:
            failed.append(f"{label} {check.name}")
    return failed


def _corrupt(eval_set: EvaluationSet) -> FrequencyTable:
    """Table with one member moved to another bin, so it no longer matches the records."""
    counts = eval_set.counts().copy()
    m, y, z, b = (int(v[0]) for v in np.nonzero(counts[1:]))
    counts[1, y, z, b] -= 1
    counts[1, y, z, (b + 1) % eval_set.B] += 1
    return FrequencyTable(counts)


def cmd_verify_identities(args):
    if args.input_csv:
        eval_sets = [("input", _input_csv_set(args))]
    else:
        study = _run_study(args)
        eval_sets = [(f"shuffle {s.index}", s.eval_set) for s in study.shuffles]
    failed = []
    for label, eval_set in eval_sets:
        table = _corrupt(eval_set) if args.corrupt else None
        checks = identity_residuals(eval_set, table)
        failed += _print_checks(label, checks)
        if len(np.unique(eval_set.z)) == 1:
            report = adv.audit(eval_set)
            gap = abs(report.v_discriminating - report.v_regular)
            print(f"{'ok  ' if gap <= IDENTITY_TOL else 'FAIL'} {label} dominance: single "
                  f"subgroup, equality branch, |V_D - V_R| = {gap:.3e}")
            if gap > IDENTITY_TOL:
                failed.append(f"{label} dominance equality")

    rng = np.random.default_rng(args.seed)
    for i in range(args.geo_tables):
        p, k, B = constructions.random_shape(rng, B=args.bins)
        equal_bias = bool(i % 2)
        counts = constructions.geo_counts(rng, p, k, B, equal_class_bias=equal_bias)
        eval_set = EvaluationSet.from_counts(counts)
        report = adv.audit(eval_set)
        gap = float(np.nanmax(np.abs(report.v_regular_by_subgroup
                                     - report.v_discriminating_by_subgroup)))
        label = f"geo table {i}"
        ok = gap <= IDENTITY_TOL
        print(f"{'ok  ' if ok else 'FAIL'} {label} regular equals discriminating: {gap:.3e}")
        if not ok:
            failed.append(label)
        if equal_bias:
            try:
                geo_no_bias_implication_check(FrequencyTable(counts), tol=IDENTITY_TOL)
                print(f"ok   {label} zero disparity without class bias")
            except (PreconditionError, AuditError) as exc:
                print(f"FAIL {label} zero disparity without class bias: {exc}")
                failed.append(label + " disparity")
    if failed:
        print(f"{len(failed)} identity check(s) failed: {', '.join(failed[:10])}")
        return 1
    print("all identities hold")
    return 0


def cmd_sweep(args):
    grid = _grid(args.grid)
    spec = _read_spec(args.spec)
    recipe = _recipe(args)
    if args.kind == "size":
        if args.target is None:
            raise UsageError("--target is required for a size sweep")
        result = experiments.subgroup_size_sweep(spec, args.target, grid, recipe,
                                                 args.shuffles, args.seed, args.bins)
    else:
        result = experiments.equal_representation_sweep(spec, grid, recipe, args.shuffles,
                                                        args.seed, args.bins)
    out = _out_dir(args)
    meta = _metadata(args, spec_fingerprint=result.fingerprints[0])
    experiments.write_sweep_csv(result, os.path.join(out, "sweep.csv"), meta)
    curves = result.curves(args.adversary)
    print("grid  " + "  ".join(f"z={z:<5d}" for z in range(curves.shape[1])))
    for g, row in zip(result.grid, curves):
        print(f"{g:<5d} " + "  ".join(f"{100 * v:7.2f}" for v in row))
    return 0


def cmd_significance(args):
    study_dir = args.study
    records = os.path.join(study_dir, "records.csv")
    aggregate = os.path.join(study_dir, "aggregate.json")
    for path in (records, aggregate):
        if not os.path.exists(path):
            raise ValidationError(f"missing study artifact {path}; run `mia-audit audit` first")
    with open(aggregate, encoding="utf-8") as fh:
        meta = json.load(fh)["metadata"]
    eval_sets = experiments.read_records_csv(records, meta["B"], meta["p"], meta["k"])
    if args.statistic == "max":
        p = experiments.permutation_disparity_test(eval_sets, None, args.adversary,
                                                   args.permutations, args.seed)
        result = {"adversary": args.adversary, "statistic": "max-disparity",
                  "n_permutations": args.permutations, "alpha": experiments.SIGNIFICANCE_LEVEL,
                  "p_value": p, "decision": int(p < experiments.SIGNIFICANCE_LEVEL)}
        print(f"max-disparity p = {p:.4g}")
    else:
        result = experiments.pairwise_significance(eval_sets, args.adversary, args.permutations,
                                                   args.seed)
        names = meta.get("subgroups") or []
        for row in result["pairs"]:
            if names:
                row["names"] = [names[row["z"]], names[row["z2"]]]
            print(f"z={row['z']} vs z={row['z2']}: p = {row['p_value']:.4g} "
                  f"decision = {row['decision']}")
    out = args.out or study_dir
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "significance.json"),
                {"metadata": _metadata(args, study=meta), "result": result})
    return 0


# -- parser ------------------------------------------------------------------------------

def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _bins(text):
    value = int(text)
    if value < 2:
        raise argparse.ArgumentTypeError("bins must be at least 2")
    return value


def _add_common(p):
    p.add_argument("--out", help="output directory (default $MIA_AUDIT_OUT or mia-audit-out)")
    p.add_argument("--seed", type=int, default=0, help="base seed")


def _add_study(p, input_csv=True):
    src = p.add_mutually_exclusive_group()
    src.add_argument("--dataset", choices=sorted(ingest.LOADERS))
    src.add_argument("--population", help="population CSV written by ingest or datagen")
    src.add_argument("--spec", help="synthetic spec JSON")
    if input_csv:
        src.add_argument("--input-csv", help="precomputed outputs id,y,z,m,conf_0..")
    p.add_argument("--data", help="raw data directory (default $MIA_AUDIT_DATA or data/raw)")
    p.add_argument("--model", choices=experiments.RECIPE_NAMES, default="logreg")
    p.add_argument("--epsilon", type=float, help="privacy budget for dp-logreg")
    p.add_argument("--bins", type=_bins, default=experiments.DEFAULT_BINS)
    p.add_argument("--shuffles", type=_positive_int, default=experiments.DEFAULT_SHUFFLES)
    p.add_argument("--test-fraction", type=float, default=0.5)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mia-audit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mia-audit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load a raw dataset and write the canonical CSV")
    p.add_argument("--dataset", choices=sorted(ingest.LOADERS), required=True)
    p.add_argument("--data")
    _add_common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("datagen", help="generate a synthetic Gaussian population")
    p.add_argument("--spec", help="synthetic spec JSON")
    p.add_argument("--sizes", help="comma-separated subgroup sizes")
    p.add_argument("--classes", type=_positive_int, default=2)
    p.add_argument("--dim", type=_positive_int, default=5)
    p.add_argument("--separation", type=float, default=1.0)
    p.add_argument("--scale", type=float, default=1.0)
    _add_common(p)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("audit", help="run a shuffle study and write reports")
    _add_study(p)
    _add_common(p)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("verify-identities", help="check the closed-form identities")
    _add_study(p)
    p.add_argument("--geo-tables", type=int, default=20,
                   help="number of constructed tables with equal subgroup output distributions")
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    _add_common(p)
    p.set_defaults(func=cmd_verify_identities)

    p = sub.add_parser("sweep", help="subgroup-size or equal-representation sweep")
    p.add_argument("--kind", choices=("size", "equal"), required=True)
    p.add_argument("--spec", required=True, help="synthetic spec JSON")
    p.add_argument("--target", type=int, help="subgroup whose size varies (size sweep)")
    p.add_argument("--grid", required=True, help="comma-separated increasing integers")
    p.add_argument("--model", choices=experiments.RECIPE_NAMES, default="mlp100")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--bins", type=_bins, default=experiments.DEFAULT_BINS)
    p.add_argument("--shuffles", type=_positive_int, default=1)
    p.add_argument("--adversary", choices=adv.KINDS, default=adv.DISCRIMINATING)
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("significance", help="permutation tests on a finished study")
    p.add_argument("--study", required=True, help="directory written by `audit`")
    p.add_argument("--permutations", type=int, default=9999)
    p.add_argument("--statistic", choices=("pair", "max"), default="pair")
    p.add_argument("--adversary", choices=adv.KINDS, default=adv.DISCRIMINATING)
    _add_common(p)
    p.set_defaults(func=cmd_significance)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mia-audit {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (AuditError, OSError) as exc:
        print(f"mia-audit {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
