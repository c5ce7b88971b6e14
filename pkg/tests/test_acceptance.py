"""Acceptance criteria 1-16, each reported as one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (add ``-m "not slow"``
to skip the dataset-level studies). The summary lines appear at the end of
the pytest output.
"""
import sys

import numpy as np
import pytest

from mia_audit import adversary as adv
from mia_audit import experiments as ex
from mia_audit import models
from mia_audit.constructions import geo_counts, no_overfit_counts, random_counts, random_shape
from mia_audit.core import EvaluationSet, FrequencyTable
from mia_audit.overfit import (closed_form_subgroup_vulnerability, closed_form_vulnerability,
                               compute_gaps, compute_profile, disparity_residuals)

from conftest import needs_adult, needs_compas

RESULTS = {}
TOL = 1e-12


def record(number, ok, detail):
    RESULTS[number] = (bool(ok), detail)
    assert ok, f"criterion {number}: {detail}"


def random_tables(n, seed, max_p=4, max_k=4, B=10):
    rng = np.random.default_rng(seed)
    tables = []
    while len(tables) < n:
        p, k, B = random_shape(rng, max_p, max_k, B)
        counts = random_counts(rng, p, k, B)
        if counts.sum():
            tables.append(counts)
    return tables


@pytest.fixture(scope="module")
def audited_tables():
    out = []
    for counts in random_tables(1000, seed=2024):
        table = FrequencyTable(counts)
        gaps = compute_gaps(table)
        profile = compute_profile(table, gaps)
        out.append((counts, adv.audit(EvaluationSet.from_counts(counts)), profile, gaps))
    return out


# -- exact identity suite -------------------------------------------------------------

def test_criterion_01_overall_closed_forms(audited_tables):
    worst = 0.0
    for _, report, profile, _ in audited_tables:
        vr, vd = closed_form_vulnerability(profile)
        worst = max(worst, abs(vr - report.v_regular), abs(vd - report.v_discriminating))
    record(1, worst <= TOL, f"max |measured - closed form| = {worst:.2e} over 1000 tables")


def test_criterion_02_subgroup_closed_forms(audited_tables):
    worst = 0.0
    for _, report, profile, gaps in audited_tables:
        sub_r, sub_d = closed_form_subgroup_vulnerability(profile, gaps)
        for cf, measured in ((sub_r, report.v_regular_by_subgroup),
                             (sub_d, report.v_discriminating_by_subgroup)):
            assert np.array_equal(np.isnan(cf), np.isnan(measured))
            if np.any(~np.isnan(cf)):
                worst = max(worst, np.nanmax(np.abs(cf - measured)))
    record(2, worst <= TOL, f"max per-subgroup residual = {worst:.2e}")


def test_criterion_03_disparity_residuals(audited_tables):
    worst, pairs = 0.0, 0
    for _, report, profile, gaps in audited_tables:
        present = np.flatnonzero(profile.present)
        for i, z in enumerate(present):
            for z2 in present[i + 1:]:
                res_d, res_r = disparity_residuals(profile, gaps, z, z2)
                dd = report.disparity_matrix(adv.DISCRIMINATING)[z, z2]
                dr = report.disparity_matrix(adv.REGULAR)[z, z2]
                worst = max(worst, abs(0.5 * abs(res_d) - dd), abs(0.5 * abs(res_r) - dr))
                pairs += 1
    record(3, worst <= TOL, f"max |half residual - disparity| = {worst:.2e} over {pairs} pairs")


def test_criterion_04_dominance(audited_tables):
    violations = sum(r.v_discriminating < r.v_regular for _, r, _, _ in audited_tables)
    record(4, violations == 0, f"{violations} tables with V_D < V_R")


def test_criterion_05_geo_equal_adversaries():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        p, k, B = random_shape(rng)
        report = adv.audit(EvaluationSet.from_counts(geo_counts(rng, p, k, B)))
        diff = np.abs(report.v_regular_by_subgroup - report.v_discriminating_by_subgroup)
        worst = max(worst, np.nanmax(diff))
    record(5, worst <= TOL, f"max |V_R_z - V_D_z| = {worst:.2e} over 100 tables")


def test_criterion_06_geo_no_class_bias_zero_disparity():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        p, k, B = random_shape(rng)
        report = adv.audit(EvaluationSet.from_counts(
            geo_counts(rng, p, k, B, equal_class_bias=True)))
        for kind in adv.KINDS:
            worst = max(worst, np.nanmax(report.disparity_matrix(kind)))
    record(6, worst <= TOL, f"max disparity entry = {worst:.2e} over 100 tables")


def test_criterion_07_no_overfitting():
    rng = np.random.default_rng(7)
    bad = 0
    for _ in range(200):
        p, k, B = random_shape(rng)
        counts = no_overfit_counts(rng, p, k, B)
        if counts.sum() == 0:
            continue
        assert np.all(compute_profile(FrequencyTable(counts)).tau_z == 0)
        r = adv.audit(EvaluationSet.from_counts(counts))
        ok = (r.v_regular == 0.5 and r.v_discriminating == 0.5
              and all(np.all(r.by_subgroup(kd)[~np.isnan(r.by_subgroup(kd))] == 0.5)
                      for kd in adv.KINDS)
              and r.max_disparity(adv.REGULAR) == 0 and r.max_disparity(adv.DISCRIMINATING) == 0)
        bad += not ok
    record(7, bad == 0, f"{bad} of 200 zero-distance tables deviate from 0.5 / zero disparity")


def _best_rule_correct(n1, n0):
    """Exhaustive maximum of correct decisions over all 2^cells rules."""
    cells = len(n1)
    patterns = (np.arange(2 ** cells)[:, None] >> np.arange(cells)) & 1
    return int((patterns @ (n1 - n0)).max() + n0.sum())


def test_criterion_08_brute_force_optimality():
    rng = np.random.default_rng(8)
    checked = mismatches = 0
    while checked < 200:
        p, k, B = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(2, 5))
        if p * k * B > 16:
            continue
        counts = random_counts(rng, p, k, B, max_cell=8)
        if counts.sum() == 0:
            continue
        e = EvaluationSet.from_counts(counts)
        report = adv.audit(e)
        n = len(e)
        reg = counts.sum(axis=2)
        best_r = _best_rule_correct(reg[1].ravel(), reg[0].ravel())
        best_d = _best_rule_correct(counts[1].ravel(), counts[0].ravel())
        mismatches += (round(report.v_regular * n) != best_r
                       or round(report.v_discriminating * n) != best_d)
        checked += 1
    record(8, mismatches == 0, f"{mismatches} of 200 tiny tables where the fitted rule "
                               "is not the exhaustive optimum")


# -- dataset-level reproduction ---------------------------------------------------------

N_SHUFFLES = 35
MLP500_SHUFFLES = 10


@pytest.fixture(scope="session")
def compas_population(compas):
    return compas[0]


@pytest.fixture(scope="session")
def compas_logreg(compas_population):
    return ex.run_shuffle_study(compas_population, ex.recipe_from_name("logreg"), N_SHUFFLES, 0)


@pytest.fixture(scope="session")
def adult_logreg(adult):
    return ex.run_shuffle_study(adult[0], ex.recipe_from_name("logreg"), N_SHUFFLES, 0)


def pp(study, metric):
    return 100 * float(np.mean(study.metric(metric)))


@pytest.mark.slow
@needs_compas
def test_criterion_09_compas_logreg(compas_logreg):
    md = pp(compas_logreg, "max_disparity_discriminating")
    vd = pp(compas_logreg, "v_discriminating")
    ok = abs(md - 29.03) <= 10 and abs(vd - 60.10) <= 8
    record(9, ok, f"max-disparity {md:.2f} (29.03 +- 10), V_D {vd:.2f} (60.10 +- 8)")


@pytest.mark.slow
@needs_adult
def test_criterion_10_adult_logreg(adult_logreg):
    md = pp(adult_logreg, "max_disparity_discriminating")
    vr = pp(adult_logreg, "v_regular")
    acc = pp(adult_logreg, "test_accuracy")
    ok = abs(md - 5.07) <= 2.5 and abs(vr - 50.55) <= 1.5 and abs(acc - 87.22) <= 4
    record(10, ok, f"max-disparity {md:.2f} (5.07 +- 2.5), V_R {vr:.2f} (50.55 +- 1.5), "
                   f"accuracy {acc:.2f} (87.22 +- 4)")


@pytest.mark.slow
@needs_adult
def test_criterion_11_adult_overfitting(adult, adult_logreg):
    study = ex.run_shuffle_study(adult[0], ex.recipe_from_name("mlp500"), MLP500_SHUFFLES, 0)
    vr_mlp, vr_lr = pp(study, "v_regular"), pp(adult_logreg, "v_regular")
    gap = pp(study, "overfitting")
    ok = vr_mlp - vr_lr >= 2 and gap > 0
    record(11, ok, f"V_R mlp500 {vr_mlp:.2f} vs logreg {vr_lr:.2f} (need +2), "
                   f"overfitting {gap:.2f}")


@pytest.mark.slow
@needs_compas
def test_criterion_12_dp_trend(compas_population, compas_logreg):
    study = ex.run_shuffle_study(compas_population, ex.recipe_from_name("dp-logreg", 1.0),
                                 N_SHUFFLES, 0)
    md_dp, md_lr = (pp(s, "max_disparity_discriminating") for s in (study, compas_logreg))
    acc_dp, acc_lr = (pp(s, "test_accuracy") for s in (study, compas_logreg))
    ok = md_lr - md_dp >= 5 and acc_dp < acc_lr
    record(12, ok, f"max-disparity eps=1 {md_dp:.2f} vs {md_lr:.2f} (need -5), "
                   f"accuracy {acc_dp:.2f} vs {acc_lr:.2f}")


@pytest.mark.slow
@needs_compas
def test_criterion_13_eo_trend(compas_population, compas_logreg):
    study = ex.run_shuffle_study(compas_population, ex.recipe_from_name("eo-logreg"),
                                 N_SHUFFLES, 0)
    md_eo, md_lr = (pp(s, "max_disparity_discriminating") for s in (study, compas_logreg))
    vr_eo, vr_lr = (pp(s, "v_regular") for s in (study, compas_logreg))
    ok = md_eo < md_lr and vr_eo >= vr_lr
    record(13, ok, f"max-disparity EO {md_eo:.2f} vs {md_lr:.2f} (must drop), "
                   f"V_R EO {vr_eo:.2f} vs {vr_lr:.2f} (must not drop)")


# -- synthetic behavioural checks ---------------------------------------------------------

def test_criterion_14_size_sweep():
    spec = ex.SyntheticSpec.isotropic(k=3, p=2, dim=10, sizes=[1000, 1000, 1600], seed=3)
    grid = [25, 50, 100, 200, 400, 800]
    result = ex.subgroup_size_sweep(spec, 2, grid, ex.recipe_from_name("mlp100"), n_shuffles=3)
    curves = 100 * result.curves(adv.DISCRIMINATING)
    rho = ex.spearman(grid, curves[:, 2])
    spread = np.ptp(curves[:, :2], axis=0)
    ok = rho < 0 and np.all(spread < 3)
    record(14, ok, f"Spearman {rho:.2f}, non-target ranges "
                   + ", ".join(f"{s:.2f}" for s in spread) + " p.p.")


def test_criterion_15_permutation_calibration():
    p_values = []
    for i in range(50):
        spec = ex.SyntheticSpec.isotropic(k=2, p=2, dim=5, sizes=[300, 300], seed=100 + i,
                                          include_subgroup_feature=False)
        study = ex.run_shuffle_study(ex.synth_generate(spec), ex.recipe_from_name("mlp6"), 3, i)
        p_values.append(ex.permutation_disparity_test(study, n_permutations=199, seed=i))
    fpr = float(np.mean(np.array(p_values) < 0.05))

    counts = np.zeros((2, 2, 2, 10), int)
    for y in range(2):
        counts[1, y, 0, 9], counts[1, y, 0, 5], counts[0, y, 0, 5] = 100, 150, 250
        counts[1, y, 1, 5] = counts[0, y, 1, 5] = 250
    planted = EvaluationSet.from_counts(counts)
    report = adv.audit(planted)
    effect = 100 * report.max_disparity(adv.DISCRIMINATING)
    p_planted = ex.permutation_disparity_test([planted], n_permutations=999, seed=0)
    ok = 0.01 <= fpr <= 0.12 and p_planted < 0.005 and len(planted) == 2000
    record(15, ok, f"null FPR {fpr:.2f} in [0.01, 0.12]; planted {effect:.0f} p.p. on "
                   f"{len(planted)} records p = {p_planted:.4f}")


def _relative_error(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


def _numeric(f, arrays, h=1e-6):
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + h
            up = f()
            a[idx] = old - h
            down = f()
            a[idx] = old
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def test_criterion_16_gradient_check():
    rng = np.random.default_rng(16)
    worst = 0.0
    for i in range(20):
        n, d, p = int(rng.integers(5, 20)), int(rng.integers(1, 6)), int(rng.integers(2, 5))
        X = rng.standard_normal((n, d))
        y = rng.integers(0, p, n)
        l2 = float(rng.uniform(0, 1))
        if i % 2 == 0:
            rows = 1 if p == 2 else p
            W, b = rng.standard_normal((rows, d)), rng.standard_normal(rows)
            _, dW, db = models.logreg_loss_grad(W, b, X, y, l2)
            analytic = [dW, db]
            numeric = _numeric(lambda: models.logreg_loss_grad(W, b, X, y, l2)[0], [W, b])
        else:
            h = int(rng.integers(2, 8))
            params = [rng.standard_normal(s) for s in [(h, d), (h,), (p, h), (p,)]]
            _, analytic = models.mlp_loss_grad(params, X, y, l2)
            numeric = _numeric(lambda: models.mlp_loss_grad(params, X, y, l2)[0], params)
        worst = max(worst, max(_relative_error(a, m) for a, m in zip(analytic, numeric)))
    record(16, worst <= 1e-5, f"max relative error {worst:.2e} over 20 instances")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
