"""Distributional overfitting and the closed forms it gives for vulnerability.

Quantities computed from a :class:`~mia_audit.core.FrequencyTable`:

* model-output gaps ``gamma[b, y] = Pr[b | y, in] - Pr[b | y, out]`` and the
  subgroup version ``gamma_z[b, y, z]``;
* distributional-overfitting distances ``tau[y]`` / ``tau_z[y, z]`` (total
  variation between member and non-member output distributions);
* class bias ``rho_z[y, z] = Pr[y | z]``.

On an empirical table with exact (y, z) stratification, the adversary
accuracies measured in :mod:`mia_audit.adversary` coincide with the closed
forms below up to floating point. :func:`identity_residuals` checks all of
them at once.
"""
from __future__ import annotations

import csv
import dataclasses
import json

import numpy as np

from mia_audit import adversary as adv
from mia_audit.core import EvaluationSet, FrequencyTable, estimate_tables
from mia_audit.errors import IdentityError, PreconditionError, ValidationError

IDENTITY_TOL = 1e-9


@dataclasses.dataclass(frozen=True, eq=False)
class GapTensor:
    """Signed gaps indexed ``gamma[b, y]`` and ``gamma_z[b, y, z]``.

    ``defined[y]`` / ``defined_z[y, z]`` flag cells where both member and
    non-member conditionals exist; elsewhere the gap is stored as 0.
    """

    gamma: np.ndarray
    gamma_z: np.ndarray
    defined: np.ndarray
    defined_z: np.ndarray


@dataclasses.dataclass(frozen=True, eq=False)
class OverfitProfile:
    tau: np.ndarray
    tau_z: np.ndarray
    rho_z: np.ndarray
    pr_y: np.ndarray
    pr_z: np.ndarray
    coverage: float

    @property
    def present(self) -> np.ndarray:
        """Subgroups with at least one record."""
        return self.pr_z > 0


def compute_gaps(table: FrequencyTable) -> GapTensor:
    if not table.usable:
        raise ValidationError("cannot compute gaps of an empty frequency table")
    cond, cond_z = table.cond, table.cond_z
    defined = ~np.isnan(cond).any(axis=(0, 2))
    defined_z = ~np.isnan(cond_z).any(axis=(0, 3))
    gamma = np.nan_to_num(cond[1] - cond[0], nan=0.0)
    gamma_z = np.nan_to_num(cond_z[1] - cond_z[0], nan=0.0)
    return GapTensor(
        gamma=np.moveaxis(gamma, -1, 0),
        gamma_z=np.moveaxis(gamma_z, -1, 0),
        defined=defined,
        defined_z=defined_z,
    )


def compute_profile(table: FrequencyTable, gaps: GapTensor | None = None) -> OverfitProfile:
    gaps = compute_gaps(table) if gaps is None else gaps
    tau = 0.5 * np.abs(gaps.gamma).sum(axis=0)
    tau_z = 0.5 * np.abs(gaps.gamma_z).sum(axis=0)
    pr_yz, pr_z = table.pr_yz, table.pr_z
    with np.errstate(invalid="ignore", divide="ignore"):
        rho_z = np.where(pr_z > 0, pr_yz / np.where(pr_z > 0, pr_z, 1), 0.0)
    populated = table.counts_z.sum(axis=(0, 3)) > 0
    coverage = float(gaps.defined_z[populated].mean()) if populated.any() else 0.0
    return OverfitProfile(tau=tau, tau_z=tau_z, rho_z=rho_z, pr_y=table.pr_y, pr_z=pr_z,
                          coverage=coverage)


def closed_form_vulnerability(profile: OverfitProfile):
    """``(V_R, V_D)`` as averages of distributional-overfitting distances."""
    v_reg = 0.5 + 0.5 * float(np.sum(profile.pr_y * profile.tau))
    v_disc = 0.5 + 0.5 * float(np.sum(profile.pr_z[None, :] * profile.rho_z * profile.tau_z))
    return v_reg, v_disc


def closed_form_subgroup_vulnerability(profile: OverfitProfile, gaps: GapTensor):
    """Per-subgroup ``(V_R_z, V_D_z)``; NaN for subgroups absent from the table.

    The regular form weights the subgroup gaps by the *global* decision
    ``1[gamma > 0]``, the discriminating one by the subgroup's own.
    """
    v_disc = 0.5 + 0.5 * np.sum(profile.rho_z * profile.tau_z, axis=0)
    global_rule = (gaps.gamma > 0).astype(float)[:, :, None]
    v_reg = 0.5 + 0.5 * np.sum(profile.rho_z * np.sum(global_rule * gaps.gamma_z, axis=0), axis=0)
    absent = ~profile.present
    v_reg = np.where(absent, np.nan, v_reg)
    v_disc = np.where(absent, np.nan, v_disc)
    return v_reg, v_disc


def disparity_residuals(profile: OverfitProfile, gaps: GapTensor, z: int, z2: int):
    """Signed no-disparity residuals for subgroups ``z`` and ``z2``.

    Returns ``(residual_disc, residual_reg)``; half the absolute value of each
    equals the measured disparity for that adversary.
    """
    k = len(profile.pr_z)
    for g in (z, z2):
        if not (0 <= g < k) or not profile.present[g]:
            raise ValidationError(f"subgroup {g} is absent from the table")
    weighted = profile.rho_z * profile.tau_z
    residual_disc = float(np.sum(weighted[:, z] - weighted[:, z2]))
    rule = (gaps.gamma > 0).astype(float)
    contrib = profile.rho_z[None, :, :] * gaps.gamma_z
    residual_reg = float(np.sum(rule * (contrib[:, :, z] - contrib[:, :, z2])))
    return residual_disc, residual_reg


@dataclasses.dataclass(frozen=True)
class GeoResult:
    holds: bool
    max_deviation: float
    witness: tuple | None  # (y, b, m, z, z') of the largest deviation


def geo_check(table: FrequencyTable, tol: float = 0.0) -> GeoResult:
    """Test equality of ``Pr[b | y, z, m]`` across subgroups within ``tol``.

    Only (y, z, m) cells that were observed take part.
    """
    if tol < 0:
        raise ValidationError("tolerance must be non-negative")
    cond_z = table.cond_z  # [m, y, z, b]
    best, witness = 0.0, None
    k = table.k
    for z in range(k):
        for z2 in range(z + 1, k):
            diff = np.abs(cond_z[:, :, z, :] - cond_z[:, :, z2, :])  # [m, y, b]
            if np.all(np.isnan(diff)):
                continue
            idx = np.unravel_index(np.nanargmax(diff), diff.shape)
            if diff[idx] > best or witness is None:
                m, y, b = (int(i) for i in idx)
                best, witness = float(diff[idx]), (y, b, m, z, z2)
    return GeoResult(best <= tol, best, witness)


def class_bias_equal(table: FrequencyTable, tol: float = 1e-12) -> bool:
    profile_rho = compute_profile(table).rho_z
    present = table.pr_z > 0
    rho = profile_rho[:, present]
    return bool(np.all(np.abs(rho - rho[:, :1]) <= tol)) if rho.size else True


def geo_no_bias_implication_check(table: FrequencyTable, tol: float = 1e-12) -> bool:
    """Confirm zero disparity for tables satisfying GEO without class bias.

    Raises:
        PreconditionError: GEO or equal class bias does not hold; ``failed``
            lists which.
        IdentityError: preconditions hold but a disparity is nonzero.
    """
    failed = []
    if not geo_check(table, 0.0).holds:
        failed.append("geo")
    if not class_bias_equal(table):
        failed.append("class_bias")
    if failed:
        raise PreconditionError(f"preconditions not met: {', '.join(failed)}", failed)
    report = adv.audit(EvaluationSet.from_counts(table.counts_z))
    for kind in adv.KINDS:
        worst = np.nanmax(report.disparity_matrix(kind))
        if worst > tol:
            raise IdentityError(f"{kind} disparity {worst:.3e} is not zero")
    return True


# -- identity suite -----------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class IdentityCheck:
    name: str
    residual: float

    def passed(self, tol: float = IDENTITY_TOL) -> bool:
        return bool(self.residual <= tol)


def _max_abs(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape or not np.array_equal(np.isnan(a), np.isnan(b)):
        return float("inf")
    d = np.abs(a - b)[~np.isnan(a)]
    return float(d.max()) if d.size else 0.0


def identity_residuals(eval_set: EvaluationSet, table: FrequencyTable | None = None):
    """Residuals of every closed-form identity on one evaluation set.

    The measured side is computed by running the fitted rules over the
    records; the closed-form side only ever sees ``table``. Passing a
    ``table`` that was not estimated from ``eval_set`` makes the
    corresponding identities fail, which is how a corrupted input shows up.
    """
    table = estimate_tables(eval_set) if table is None else table
    measured = adv.audit(eval_set)
    gaps = compute_gaps(table)
    profile = compute_profile(table, gaps)
    cf_reg, cf_disc = closed_form_vulnerability(profile)
    sub_reg, sub_disc = closed_form_subgroup_vulnerability(profile, gaps)

    checks = [
        IdentityCheck("overall/regular", abs(cf_reg - measured.v_regular)),
        IdentityCheck("overall/discriminating", abs(cf_disc - measured.v_discriminating)),
        IdentityCheck("subgroup/regular", _max_abs(sub_reg, measured.v_regular_by_subgroup)),
        IdentityCheck("subgroup/discriminating",
                      _max_abs(sub_disc, measured.v_discriminating_by_subgroup)),
        IdentityCheck("dominance", max(0.0, measured.v_regular - measured.v_discriminating)),
    ]
    worst_disc = worst_reg = 0.0
    present = np.flatnonzero(profile.present)
    for i, z in enumerate(present):
        for z2 in present[i + 1:]:
            res_disc, res_reg = disparity_residuals(profile, gaps, z, z2)
            d_disc = abs(measured.v_discriminating_by_subgroup[z]
                         - measured.v_discriminating_by_subgroup[z2])
            d_reg = abs(measured.v_regular_by_subgroup[z] - measured.v_regular_by_subgroup[z2])
            worst_disc = max(worst_disc, abs(0.5 * abs(res_disc) - d_disc))
            worst_reg = max(worst_reg, abs(0.5 * abs(res_reg) - d_reg))
    checks.append(IdentityCheck("disparity/discriminating", worst_disc))
    checks.append(IdentityCheck("disparity/regular", worst_reg))
    return checks


# -- export -------------------------------------------------------------------

def profile_to_dict(profile: OverfitProfile, gaps: GapTensor, checks=()) -> dict:
    return {
        "gamma": gaps.gamma.tolist(),
        "gamma_z": gaps.gamma_z.tolist(),
        "tau": profile.tau.tolist(),
        "tau_z": profile.tau_z.tolist(),
        "rho_z": profile.rho_z.tolist(),
        "pr_y": profile.pr_y.tolist(),
        "pr_z": profile.pr_z.tolist(),
        "coverage": profile.coverage,
        "identity_residuals": {c.name: c.residual for c in checks},
    }


def write_profile_json(path, profile, gaps, checks=(), metadata=None):
    payload = {"metadata": metadata or {}, "profile": profile_to_dict(profile, gaps, checks)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def write_gaps_csv(path, gaps: GapTensor):
    B, p, k = gaps.gamma_z.shape
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["y", "z", "b", "gamma_z"])
        for y in range(p):
            for z in range(k):
                for b in range(B):
                    writer.writerow([y, z, b, repr(float(gaps.gamma_z[b, y, z]))])
