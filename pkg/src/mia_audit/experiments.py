"""Experimental protocols: repeated-shuffle audits, permutation tests, sweeps.

A *shuffle* is one stratified train/test split: the model is trained on the
train half, and members (train) and non-members (test) are matched per
(y, z) cell into an evaluation set on which both adversaries are fitted and
scored. Shuffle ``i`` uses seed ``base_seed + i`` everywhere, so shuffles are
independent and reproducible in any order.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from mia_audit import adversary as adv
from mia_audit import models
from mia_audit.core import EvaluationSet, Population, build_evaluation_set, estimate_tables
from mia_audit.errors import AuditError, ValidationError
from mia_audit.overfit import compute_gaps, compute_profile

DEFAULT_SHUFFLES = 35
DEFAULT_BINS = 10
SIGNIFICANCE_LEVEL = 0.005
MIN_PERMUTATIONS = 99


# -- model recipes ---------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class ModelRecipe:
    """Named training procedure; ``fit(train, seed)`` returns a fitted model.

    ``make_config(n_train, seed)`` builds the :class:`~mia_audit.models.TrainConfig`
    and ``trainer`` consumes it.
    """

    name: str
    trainer: Callable
    make_config: Callable

    def fit(self, train: Population, seed: int):
        return self.trainer(train, self.make_config(len(train), seed))


def _logreg_config(n, seed, C=0.01):
    return models.TrainConfig(l2=1.0 / (C * n), epochs=1000, seed=seed)


def _mlp_config(hidden, alpha, epochs, batch=200):
    def make(n, seed):
        return models.TrainConfig(l2=alpha / min(batch, n), epochs=epochs, seed=seed,
                                  hidden=hidden, optimizer="adam", batch_size=batch)
    return make


def recipe_from_name(name: str, epsilon: float | None = None) -> ModelRecipe:
    """Recipes: ``logreg``, ``mlp6``, ``mlp100``, ``mlp500``, ``dp-logreg``, ``eo-logreg``."""
    if name == "logreg":
        return ModelRecipe(name, models.train_logreg, _logreg_config)
    if name == "mlp6":
        return ModelRecipe(name, models.train_mlp, _mlp_config(6, 0.01, 100))
    if name == "mlp100":
        return ModelRecipe(name, models.train_mlp, _mlp_config(100, 1e-4, 200))
    if name == "mlp500":
        return ModelRecipe(name, models.train_mlp, _mlp_config(500, 1e-4, 200))
    if name == "dp-logreg":
        if epsilon is None:
            raise ValidationError("dp-logreg needs an epsilon")

        def make(n, seed):
            return models.TrainConfig(l2=1.0 / (0.01 * n), epochs=1000, seed=seed,
                                      dp_epsilon=epsilon)
        return ModelRecipe(f"dp-logreg(eps={epsilon:g})", models.train_dp_logreg, make)
    if name == "eo-logreg":
        return ModelRecipe(name, models.train_eo_logreg, _logreg_config)
    raise ValidationError(f"unknown model recipe {name!r}")


RECIPE_NAMES = ("logreg", "mlp6", "mlp100", "mlp500", "dp-logreg", "eo-logreg")


# -- splitting -----------------------------------------------------------------------

def stratified_split(population: Population, test_fraction: float, seed: int):
    """Indices ``(train, test)`` with every (y, z) cell split at ``test_fraction``.

    A fractional share of a cell is resolved by a coin flip, so odd cells
    alternate sides across seeds instead of always favouring one. Each cell
    has its own random stream.
    """
    if not 0 < test_fraction < 1:
        raise ValidationError("test_fraction must lie strictly between 0 and 1")
    train, test = [], []
    for y in range(population.p):
        for z in range(population.k):
            rng = np.random.default_rng([seed, y, z])
            idx = np.flatnonzero((population.y == y) & (population.z == z))
            if not len(idx):
                continue
            idx = rng.permutation(idx)
            share = len(idx) * test_fraction
            n_test = int(math.floor(share)) + int(rng.random() < share - math.floor(share))
            test.append(idx[:n_test])
            train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


# -- shuffle studies ------------------------------------------------------------------

@dataclasses.dataclass(frozen=True, eq=False)
class ShuffleResult:
    index: int
    seed: int
    report: adv.VulnerabilityReport
    eval_set: EvaluationSet
    correct_regular: np.ndarray
    correct_discriminating: np.ndarray
    train_accuracy: float
    test_accuracy: float
    dropped_cells: tuple = ()

    @property
    def overfitting(self) -> float:
        return self.train_accuracy - self.test_accuracy

    def profile(self):
        table = estimate_tables(self.eval_set)
        gaps = compute_gaps(table)
        return compute_profile(table, gaps), gaps


def _mean_std(values):
    values = np.asarray(values, dtype=float)
    std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return float(values.mean()), std


@dataclasses.dataclass(frozen=True, eq=False)
class ShuffleStudy:
    recipe: str
    base_seed: int
    B: int
    shuffles: tuple
    subgroup_names: tuple = ()

    @property
    def n_shuffles(self) -> int:
        return len(self.shuffles)

    @property
    def k(self) -> int:
        return self.shuffles[0].eval_set.k

    def metric(self, name: str) -> np.ndarray:
        """Per-shuffle values of ``test_accuracy``, ``train_accuracy``,
        ``overfitting``, ``v_<kind>`` or ``max_disparity_<kind>``."""
        out = []
        for s in self.shuffles:
            if name.startswith("max_disparity_"):
                out.append(s.report.max_disparity(name[len("max_disparity_"):]))
            elif name.startswith("v_"):
                out.append(s.report.vulnerability(name[2:]))
            else:
                out.append(getattr(s, name))
        return np.asarray(out, dtype=float)

    def subgroup_vulnerabilities(self, kind: str) -> np.ndarray:
        """(n_shuffles, k) matrix; NaN where a subgroup was absent."""
        return np.vstack([s.report.by_subgroup(kind) for s in self.shuffles])

    METRICS = ("test_accuracy", "train_accuracy", "overfitting", "v_regular",
               "v_discriminating", "max_disparity_regular", "max_disparity_discriminating")

    def aggregates(self) -> dict:
        out = {}
        for name in self.METRICS:
            mean, std = _mean_std(self.metric(name))
            out[name] = {"mean": mean, "std": std}
        for kind in adv.KINDS:
            v = self.subgroup_vulnerabilities(kind)
            with np.errstate(invalid="ignore"):
                out[f"v_{kind}_by_subgroup"] = {
                    "mean": [None if np.all(np.isnan(c)) else float(np.nanmean(c)) for c in v.T],
                }
        return out


def _accuracy(model, population: Population, seed: int) -> float:
    pred = models.predict(model, population.X, population.z, rng=np.random.default_rng(seed))
    return float(np.mean(pred == population.y))


def run_shuffle(population: Population, recipe: ModelRecipe, index: int, base_seed: int,
                B: int = DEFAULT_BINS, test_fraction: float = 0.5) -> ShuffleResult:
    seed = base_seed + index
    train_idx, test_idx = stratified_split(population, test_fraction, seed)
    train, test = population.subset(train_idx), population.subset(test_idx)
    model = recipe.fit(train, seed)
    conf_train = models.predict_confidence(model, train.X, train.z)
    conf_test = models.predict_confidence(model, test.X, test.z)
    eval_set, dropped = build_evaluation_set((train, conf_train), (test, conf_test), B, seed)
    return audit_evaluation_set(eval_set, index, seed, _accuracy(model, train, seed),
                                _accuracy(model, test, seed + 1), tuple(dropped))


def audit_evaluation_set(eval_set: EvaluationSet, index: int = 0, seed: int | None = None,
                         train_accuracy: float = float("nan"),
                         test_accuracy: float = float("nan"), dropped_cells=()) -> ShuffleResult:
    """Fit both adversaries on ``eval_set`` and keep per-record correctness."""
    table = estimate_tables(eval_set)
    regular = adv.fit_regular_adversary(table)
    discriminating = adv.fit_discriminating_adversary(table)
    report = adv.evaluate_vulnerability(regular, eval_set).merge(
        adv.evaluate_vulnerability(discriminating, eval_set))
    return ShuffleResult(
        index=index, seed=seed, report=report, eval_set=eval_set,
        correct_regular=adv.correctness(regular, eval_set),
        correct_discriminating=adv.correctness(discriminating, eval_set),
        train_accuracy=train_accuracy, test_accuracy=test_accuracy,
        dropped_cells=tuple(dropped_cells),
    )


def check_study_population(population: Population):
    populated = [z for z in range(population.k)
                 if len(np.unique(population.y[population.z == z])) >= 2]
    if len(populated) < 2:
        raise ValidationError("a study needs at least two subgroups with every class present")


def run_shuffle_study(population: Population, recipe: ModelRecipe,
                      n_shuffles: int = DEFAULT_SHUFFLES, base_seed: int = 0,
                      B: int = DEFAULT_BINS, test_fraction: float = 0.5,
                      progress: Callable | None = None) -> ShuffleStudy:
    """Train and audit ``n_shuffles`` models on independent stratified splits.

    Raises:
        AuditError: a shuffle failed; the message names its index.
    """
    if n_shuffles < 1:
        raise ValidationError("n_shuffles must be at least 1")
    check_study_population(population)
    results = []
    for i in range(n_shuffles):
        try:
            results.append(run_shuffle(population, recipe, i, base_seed, B, test_fraction))
        except AuditError as exc:
            raise AuditError(f"shuffle {i}: {exc}") from exc
        if progress is not None:
            progress(i, results[-1])
    return ShuffleStudy(recipe.name, base_seed, B, tuple(results), population.subgroup_names)


# -- permutation test -----------------------------------------------------------------

def _permuted_block(cells, n_permutations, rng):
    """Random tables with the margins of ``cells`` (rows x groups), ``(n_perm, rows, k)``.

    Reassigning group labels uniformly at random while keeping group sizes
    yields a random contingency table with fixed margins; it is drawn row by
    row with hypergeometric splits.
    """
    rows, k = cells.shape
    remaining = np.tile(cells.sum(axis=0), (n_permutations, 1))
    out = np.zeros((n_permutations, rows, k), dtype=np.int64)
    for r, n_r in enumerate(cells.sum(axis=1)):
        if n_r == 0:
            continue
        left = np.full(n_permutations, n_r, dtype=np.int64)
        for g in range(k - 1):
            others = remaining[:, g + 1:].sum(axis=1)
            draw = rng.hypergeometric(remaining[:, g], others, left)
            out[:, r, g] = draw
            left = left - draw
        out[:, r, k - 1] = left
        remaining -= out[:, r, :]
    return out


def _permuted_tables(counts, n_permutations, rng):
    """Subgroup tables ``(n_perm, 2, p, k, B)`` with subgroup labels permuted
    among records sharing (membership, label).

    Restricting the permutation to these strata keeps every permuted set
    balanced per (y, z) and leaves the regular adversary's table unchanged.
    """
    two, p, k, B = counts.shape
    out = np.zeros((n_permutations,) + counts.shape, dtype=np.int64)
    for m in range(two):
        for y in range(p):
            block = _permuted_block(counts[m, y].T, n_permutations, rng)  # (n, B, k)
            out[:, m, y] = block.transpose(0, 2, 1)
    return out


def _group_correct(tables, regular_rule):
    """Correct-decision counts per subgroup for both adversaries.

    ``tables`` has shape (..., 2, p, k, B). The regular rule is fixed; the
    discriminating adversary is refitted on each table (posterior argmax,
    ties to non-member).
    """
    n0, n1 = tables[..., 0, :, :, :], tables[..., 1, :, :, :]
    d = regular_rule[:, None, :].astype(bool)
    reg = np.where(d, n1, n0).sum(axis=(-3, -1))
    disc = np.where(n1 > n0, n1, n0).sum(axis=(-3, -1))
    return reg, disc


def _statistic(correct, sizes, pair):
    with np.errstate(invalid="ignore", divide="ignore"):
        v = correct / sizes
    present = sizes > 0
    if pair is None:
        vp = v[..., present]
        if vp.shape[-1] < 2:
            return np.zeros(v.shape[:-1])
        return vp.max(axis=-1) - vp.min(axis=-1)
    z, z2 = pair
    if not (present[z] and present[z2]):
        return None
    return np.abs(v[..., z] - v[..., z2])


def permutation_disparity_test(study, pair=None, adversary: str = adv.DISCRIMINATING,
                               n_permutations: int = 999, seed: int = 0) -> float:
    """P-value for subgroup disparity, permuting subgroup labels within each shuffle.

    Labels move only among records with the same membership bit and class.

    The statistic is the across-shuffle mean of max-disparity (``pair=None``)
    or of ``|V_z - V_z'|`` for ``pair=(z, z')``. ``study`` is a
    :class:`ShuffleStudy` or a sequence of evaluation sets.

    Returns ``(1 + #{permuted >= observed}) / (1 + n_permutations)``.
    """
    if n_permutations < MIN_PERMUTATIONS:
        raise ValidationError(f"n_permutations must be at least {MIN_PERMUTATIONS}")
    if adversary not in adv.KINDS:
        raise ValidationError(f"unknown adversary {adversary!r}")
    eval_sets = [s.eval_set for s in study.shuffles] if isinstance(study, ShuffleStudy) \
        else list(study)
    rng = np.random.default_rng(seed)
    observed, permuted, used = 0.0, np.zeros(n_permutations), 0
    for eval_set in eval_sets:
        counts = eval_set.counts()
        rule = adv.fit_regular_adversary(estimate_tables(eval_set)).decisions
        sizes = counts.sum(axis=(0, 1, 3))
        obs_correct = _group_correct(counts, rule)[adversary == adv.DISCRIMINATING]
        obs = _statistic(obs_correct, sizes, pair)
        if obs is None:
            continue
        perm_correct = _group_correct(_permuted_tables(counts, n_permutations, rng), rule)
        observed += float(obs)
        permuted += _statistic(perm_correct[adversary == adv.DISCRIMINATING], sizes, pair)
        used += 1
    if used == 0:
        raise ValidationError("the requested subgroups never appear together in a shuffle")
    observed /= used
    permuted /= used
    exceed = int(np.sum(permuted >= observed - 1e-12))
    return (1 + exceed) / (1 + n_permutations)


def pairwise_significance(study, adversary=adv.DISCRIMINATING, n_permutations=9999, seed=0,
                          alpha=SIGNIFICANCE_LEVEL):
    """P-values for every subgroup pair with Bonferroni-adjusted decisions at ``alpha``."""
    eval_sets = [s.eval_set for s in study.shuffles] if isinstance(study, ShuffleStudy) \
        else list(study)
    k = eval_sets[0].k
    present = sorted({int(z) for e in eval_sets for z in np.unique(e.z)})
    pairs = [(a, b) for i, a in enumerate(present) for b in present[i + 1:]]
    threshold = alpha / max(len(pairs), 1)
    rows = []
    for j, (a, b) in enumerate(pairs):
        p = permutation_disparity_test(eval_sets, (a, b), adversary, n_permutations, seed + j)
        rows.append({"z": a, "z2": b, "p_value": p, "decision": int(p < threshold)})
    return {"adversary": adversary, "alpha": alpha, "bonferroni_threshold": threshold,
            "n_permutations": n_permutations, "k": k, "pairs": rows}


# -- synthetic populations ------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian mixture population: one spherical component per (subgroup, class).

    ``means`` is (k, p, dim), ``scales`` (k, p), ``sizes`` (k,), ``rho`` (k, p)
    with rows summing to one. With ``include_subgroup_feature`` the one-hot
    subgroup is appended to the features.
    """

    means: tuple
    scales: tuple
    sizes: tuple
    rho: tuple
    seed: int = 0
    include_subgroup_feature: bool = True

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        scales = np.asarray(self.scales, dtype=float)
        sizes = np.asarray(self.sizes)
        rho = np.asarray(self.rho, dtype=float)
        if means.ndim != 3:
            raise ValidationError("means must have shape (k, p, dim)")
        k, p, _ = means.shape
        if scales.shape != (k, p) or rho.shape != (k, p) or sizes.shape != (k,):
            raise ValidationError("scales/rho must be (k, p) and sizes (k,)")
        if np.any(sizes < 0) or np.any(scales < 0) or np.any(rho < 0):
            raise ValidationError("sizes, scales and rho must be non-negative")
        if not np.allclose(rho.sum(axis=1), 1.0, atol=1e-9):
            raise ValidationError("each rho row must sum to 1")
        object.__setattr__(self, "means", tuple(map(tuple, map(tuple, means.tolist()))))
        object.__setattr__(self, "scales", tuple(map(tuple, scales.tolist())))
        object.__setattr__(self, "sizes", tuple(int(s) for s in sizes))
        object.__setattr__(self, "rho", tuple(map(tuple, rho.tolist())))

    @property
    def k(self):
        return len(self.sizes)

    @property
    def p(self):
        return len(self.rho[0])

    @property
    def dim(self):
        return len(self.means[0][0])

    def with_size(self, z: int, size: int) -> "SyntheticSpec":
        sizes = list(self.sizes)
        sizes[z] = size
        return dataclasses.replace(self, sizes=tuple(sizes))

    def fingerprint(self, exclude_size_of: int | None = None) -> str:
        data = dataclasses.asdict(self)
        if exclude_size_of is not None:
            data["sizes"] = [s for i, s in enumerate(self.sizes) if i != exclude_size_of]
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SyntheticSpec":
        return cls(**json.loads(text))

    @classmethod
    def isotropic(cls, k, p, dim, sizes, separation=1.0, scale=1.0, rho=None, seed=0,
                  scales=None, include_subgroup_feature=True):
        """Class means at ``separation`` times distinct random unit directions,
        shared by all subgroups."""
        rng = np.random.default_rng(seed)
        directions = rng.standard_normal((p, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        means = np.broadcast_to(separation * directions, (k, p, dim))
        rho = np.full((k, p), 1.0 / p) if rho is None else rho
        scales = np.full((k, p), scale) if scales is None else scales
        return cls(means, scales, sizes, rho, seed, include_subgroup_feature)


def synth_generate(spec: SyntheticSpec) -> Population:
    """Draw a population: per subgroup, class counts ~ Multinomial(size, rho_z)."""
    rng = np.random.default_rng(spec.seed)
    means = np.asarray(spec.means)
    X, ys, zs = [], [], []
    for z in range(spec.k):
        counts = rng.multinomial(spec.sizes[z], spec.rho[z])
        for y in range(spec.p):
            n = int(counts[y])
            X.append(means[z, y] + spec.scales[z][y] * rng.standard_normal((n, spec.dim)))
            ys.append(np.full(n, y))
            zs.append(np.full(n, z))
    X = np.vstack(X) if X else np.empty((0, spec.dim))
    y = np.concatenate(ys).astype(np.int64)
    z = np.concatenate(zs).astype(np.int64)
    if spec.include_subgroup_feature:
        X = np.hstack([X, np.eye(spec.k)[z]])
    ids = np.array([f"syn:{i}" for i in range(len(y))], dtype=str)
    return Population(ids, X, y, z, spec.p, spec.k)


# -- sweeps ------------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True, eq=False)
class SweepResult:
    kind: str
    grid: tuple
    studies: tuple  # one ShuffleStudy per grid value
    fingerprints: tuple

    def curves(self, adversary: str) -> np.ndarray:
        """(len(grid), k) matrix of mean subgroup vulnerability per grid value."""
        rows = []
        for study in self.studies:
            v = study.subgroup_vulnerabilities(adversary)
            with np.errstate(invalid="ignore"):
                rows.append(np.nanmean(v, axis=0))
        return np.vstack(rows)

    def rows(self):
        for g, study in zip(self.grid, self.studies):
            for s in study.shuffles:
                for kind in adv.KINDS:
                    for z, v in enumerate(s.report.by_subgroup(kind)):
                        yield {"grid": g, "shuffle": s.index, "subgroup": z,
                               "adversary": kind, "vulnerability": v}


def _check_grid(grid):
    grid = [int(g) for g in grid]
    if not grid:
        raise ValidationError("the grid must contain at least one value")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValidationError("grid values must be strictly increasing")
    if grid[0] < 1:
        raise ValidationError("grid values must be positive")
    return grid


def _nested_subset(population: Population, quotas: dict, seed: int) -> Population:
    """Keep the first ``quotas[z]`` examples of each subgroup under a fixed order."""
    order = np.random.default_rng(seed).permutation(len(population))
    keep = []
    for z, quota in quotas.items():
        members = order[population.z[order] == z]
        if quota > len(members):
            raise ValidationError(f"subgroup {z} has {len(members)} examples, {quota} requested")
        keep.append(members[:quota])
    return population.subset(np.sort(np.concatenate(keep)))


def subgroup_size_sweep(spec: SyntheticSpec, target: int, grid: Sequence[int],
                        recipe: ModelRecipe, n_shuffles: int = 1, base_seed: int = 0,
                        B: int = DEFAULT_BINS) -> SweepResult:
    """Vary the number of ``target`` examples; every other subgroup stays as drawn.

    ``spec.sizes[target]`` is the pool the grid samples from (nested subsets).
    """
    grid = _check_grid(grid)
    if grid[-1] > spec.sizes[target]:
        raise ValidationError(f"grid value {grid[-1]} exceeds the target pool "
                              f"of {spec.sizes[target]}")
    pool = synth_generate(spec)
    studies, fingerprints = [], []
    for size in grid:
        quotas = {z: (size if z == target else spec.sizes[z]) for z in range(spec.k)}
        population = _nested_subset(pool, quotas, spec.seed)
        studies.append(run_shuffle_study(population, recipe, n_shuffles, base_seed, B))
        fingerprints.append(spec.with_size(target, size).fingerprint(exclude_size_of=target))
    if len(set(fingerprints)) != 1:
        raise AuditError("non-target parameters changed between grid points")
    return SweepResult("size", tuple(grid), tuple(studies), tuple(fingerprints))


def equal_representation_sweep(spec: SyntheticSpec, grid: Sequence[int], recipe: ModelRecipe,
                               n_shuffles: int = 1, base_seed: int = 0,
                               B: int = DEFAULT_BINS) -> SweepResult:
    """Train on ``K`` examples of every subgroup and audit against ``K`` more per subgroup."""
    grid = _check_grid(grid)
    pool = synth_generate(spec)
    studies = []
    for K in grid:
        population = _nested_subset(pool, {z: 2 * K for z in range(spec.k)}, spec.seed)
        studies.append(run_shuffle_study(population, recipe, n_shuffles, base_seed, B))
    fp = spec.fingerprint()
    return SweepResult("equal", tuple(grid), tuple(studies), tuple(fp for _ in grid))


def spearman(x, y) -> float:
    return float(stats.spearmanr(x, y).statistic)


# -- export ---------------------------------------------------------------------------------

def _fmt(v):
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else repr(float(v))


def write_metadata_header(fh, metadata: dict):
    for key in sorted(metadata):
        fh.write(f"# {key}: {json.dumps(metadata[key], sort_keys=True)}\n")


def write_study_csv(study: ShuffleStudy, path, metadata=None):
    """One row per (shuffle, subgroup, adversary)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        write_metadata_header(fh, metadata or {})
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["shuffle", "subgroup", "adversary", "vulnerability", "subgroup_size"])
        for s in study.shuffles:
            for kind in adv.KINDS:
                for z, v in enumerate(s.report.by_subgroup(kind)):
                    writer.writerow([s.index, z, kind, _fmt(v), int(s.report.subgroup_sizes[z])])


def write_records_csv(study: ShuffleStudy, path, metadata=None):
    """Per-record audit outcomes, the input of the significance command."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        write_metadata_header(fh, metadata or {})
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["shuffle", "id", "y", "z", "m", "bin",
                         "correct_regular", "correct_discriminating"])
        for s in study.shuffles:
            e = s.eval_set
            for i in range(len(e)):
                writer.writerow([s.index, e.ids[i], int(e.y[i]), int(e.z[i]), int(e.m[i]),
                                 int(e.b[i]), int(s.correct_regular[i]),
                                 int(s.correct_discriminating[i])])


def read_records_csv(path, B, p, k):
    """Evaluation sets per shuffle from :func:`write_records_csv` output."""
    import pandas as pd

    df = pd.read_csv(path, comment="#", dtype={"id": str})
    expected = ["shuffle", "id", "y", "z", "m", "bin", "correct_regular", "correct_discriminating"]
    if list(df.columns) != expected:
        raise ValidationError(f"{path}: unexpected columns {list(df.columns)}")
    sets = []
    for _, g in df.groupby("shuffle", sort=True):
        sets.append(EvaluationSet(g["id"].to_numpy(str), g["y"].to_numpy(), g["z"].to_numpy(),
                                  g["m"].to_numpy(), g["bin"].to_numpy(), B, p, k))
    return sets


def write_sweep_csv(result: SweepResult, path, metadata=None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        write_metadata_header(fh, metadata or {})
        writer = csv.writer(fh, lineterminator="\n")
        column = "subgroup_size" if result.kind == "size" else "K"
        writer.writerow([column, "shuffle", "subgroup", "adversary", "vulnerability"])
        for row in result.rows():
            writer.writerow([row["grid"], row["shuffle"], row["subgroup"], row["adversary"],
                             _fmt(row["vulnerability"])])
