"""Bayes membership adversaries estimated from frequency tables.

The regular adversary sees ``(y, b)``; the discriminating adversary also sees
the subgroup ``z``. Both predict "member" exactly when the member output
distribution puts strictly more mass on the observed bin than the non-member
one; ties and cells never observed predict "non-member".
"""
from __future__ import annotations

import dataclasses
import json

import numpy as np

from mia_audit.core import EvaluationSet, FrequencyTable, estimate_tables
from mia_audit.errors import ValidationError

REGULAR = "regular"
DISCRIMINATING = "discriminating"
KINDS = (REGULAR, DISCRIMINATING)


@dataclasses.dataclass(frozen=True, eq=False)
class DecisionRule:
    """Membership decisions per (y, b) or per (y, z, b).

    ``decisions`` has shape (p, B) for the regular kind and (p, k, B) for the
    discriminating kind. Unseen or tied cells hold 0.
    """

    kind: str
    decisions: np.ndarray

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown adversary kind {self.kind!r}")
        d = np.array(self.decisions, dtype=np.int8, copy=True)
        if d.ndim != (2 if self.kind == REGULAR else 3):
            raise ValidationError(f"{self.kind} decisions have wrong rank {d.ndim}")
        if np.any((d != 0) & (d != 1)):
            raise ValidationError("decisions must be 0 or 1")
        d.setflags(write=False)
        object.__setattr__(self, "decisions", d)

    def decide(self, y, b, z=None) -> np.ndarray:
        y, b = np.asarray(y), np.asarray(b)
        if self.kind == REGULAR:
            return self.decisions[y, b]
        if z is None:
            raise ValidationError("the discriminating adversary needs subgroups")
        return self.decisions[y, np.asarray(z), b]


def fit_regular_adversary(table: FrequencyTable) -> DecisionRule:
    gap = table.cond[1] - table.cond[0]
    return DecisionRule(REGULAR, np.nan_to_num(gap, nan=0.0) > 0)


def fit_discriminating_adversary(table: FrequencyTable) -> DecisionRule:
    gap = table.cond_z[1] - table.cond_z[0]
    return DecisionRule(DISCRIMINATING, np.nan_to_num(gap, nan=0.0) > 0)


def fit_adversary(table: FrequencyTable, kind: str) -> DecisionRule:
    if kind == REGULAR:
        return fit_regular_adversary(table)
    if kind == DISCRIMINATING:
        return fit_discriminating_adversary(table)
    raise ValidationError(f"unknown adversary kind {kind!r}")


def correctness(rule: DecisionRule, eval_set: EvaluationSet) -> np.ndarray:
    """Per-record indicator ``1[A = m]``."""
    return (rule.decide(eval_set.y, eval_set.b, eval_set.z) == eval_set.m).astype(np.int8)


def disparity_matrix(by_subgroup) -> np.ndarray:
    """Pairwise ``|V_z - V_z'|``; NaN wherever either subgroup is undefined."""
    v = np.asarray(by_subgroup, dtype=float)
    return np.abs(v[:, None] - v[None, :])


def max_disparity(by_subgroup) -> float:
    v = np.asarray(by_subgroup, dtype=float)
    v = v[~np.isnan(v)]
    if len(v) < 2:
        return 0.0
    return float(v.max() - v.min())


@dataclasses.dataclass(frozen=True, eq=False)
class VulnerabilityReport:
    """Overall and per-subgroup vulnerability for one or both adversaries.

    Values are raw probabilities; :meth:`to_dict` renders percentage points.
    Fields of an adversary that was not evaluated are None. An empty
    subgroup has vulnerability NaN and is left out of max-disparity.
    """

    v_regular: float | None = None
    v_discriminating: float | None = None
    v_regular_by_subgroup: np.ndarray | None = None
    v_discriminating_by_subgroup: np.ndarray | None = None
    subgroup_sizes: np.ndarray | None = None

    def vulnerability(self, kind: str) -> float:
        return getattr(self, f"v_{kind}")

    def by_subgroup(self, kind: str) -> np.ndarray:
        return getattr(self, f"v_{kind}_by_subgroup")

    def disparity_matrix(self, kind: str) -> np.ndarray:
        return disparity_matrix(self.by_subgroup(kind))

    def max_disparity(self, kind: str) -> float:
        return max_disparity(self.by_subgroup(kind))

    def merge(self, other: "VulnerabilityReport") -> "VulnerabilityReport":
        fields = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        for name, value in fields.items():
            if value is None:
                fields[name] = getattr(other, name)
        return VulnerabilityReport(**fields)

    def to_dict(self) -> dict:
        def pp(x):
            return None if x is None or np.isnan(x) else round(100.0 * float(x), 2)

        out = {"units": "percentage points"}
        for kind in KINDS:
            if self.vulnerability(kind) is None:
                continue
            groups = self.by_subgroup(kind)
            out[kind] = {
                "vulnerability": pp(self.vulnerability(kind)),
                "by_subgroup": [pp(v) for v in groups],
                "disparity_matrix": [[pp(v) for v in row] for row in self.disparity_matrix(kind)],
                "max_disparity": pp(self.max_disparity(kind)),
            }
        return out


def evaluate_vulnerability(rule: DecisionRule, eval_set: EvaluationSet) -> VulnerabilityReport:
    """Accuracy of ``rule`` on ``eval_set`` overall and per subgroup."""
    correct = correctness(rule, eval_set)
    sizes = np.bincount(eval_set.z, minlength=eval_set.k)
    hits = np.bincount(eval_set.z, weights=correct, minlength=eval_set.k)
    with np.errstate(invalid="ignore", divide="ignore"):
        by_group = np.where(sizes > 0, hits / np.where(sizes > 0, sizes, 1), np.nan)
    overall = float(correct.mean()) if len(correct) else float("nan")
    return VulnerabilityReport(**{
        f"v_{rule.kind}": overall,
        f"v_{rule.kind}_by_subgroup": by_group,
        "subgroup_sizes": sizes,
    })


def audit(eval_set: EvaluationSet, table: FrequencyTable | None = None) -> VulnerabilityReport:
    """Fit both adversaries on ``eval_set`` (or a supplied table) and score them on it."""
    table = estimate_tables(eval_set) if table is None else table
    regular = evaluate_vulnerability(fit_regular_adversary(table), eval_set)
    discriminating = evaluate_vulnerability(fit_discriminating_adversary(table), eval_set)
    return regular.merge(discriminating)


def compare_adversaries(table: FrequencyTable, eval_set: EvaluationSet):
    """``(V_R, V_D, V_D - V_R)`` for adversaries fitted and scored on the same set.

    Raises:
        ValidationError: ``table`` was not estimated from ``eval_set``.
    """
    if table.shape != (eval_set.p, eval_set.k, eval_set.B) or not np.array_equal(
            table.counts_z, eval_set.counts()):
        raise ValidationError("frequency table does not match the evaluation set")
    report = audit(eval_set, table)
    return report.v_regular, report.v_discriminating, report.v_discriminating - report.v_regular


def report_to_json(report: VulnerabilityReport, eval_set: EvaluationSet, extra=None) -> str:
    cells = eval_set.counts().sum(axis=3)
    metadata = {
        "seed": eval_set.seed,
        "B": eval_set.B,
        "p": eval_set.p,
        "k": eval_set.k,
        "cell_counts": [
            {"y": y, "z": z, "m": m, "count": int(cells[m, y, z])}
            for y in range(eval_set.p) for z in range(eval_set.k) for m in (0, 1)
        ],
    }
    if extra:
        metadata.update(extra)
    return json.dumps({"metadata": metadata, "report": report.to_dict()}, indent=2, sort_keys=True)
