"""Domain types, confidence binning, evaluation-set construction and frequency tables.

Everything downstream (adversaries, overfitting analysis, experiments) works
from two objects built here:

* :class:`EvaluationSet` - a balanced, (y, z)-stratified collection of
  member / non-member records whose model outputs are already binned.
* :class:`FrequencyTable` - exact tallies ``n[m, y, z, b]`` of such a set and
  the empirical conditionals derived from them.

Arrays stored on the frozen dataclasses are marked read-only.
"""
from __future__ import annotations

import csv
import dataclasses
from typing import Iterator, Sequence

import numpy as np

from mia_audit.errors import ValidationError

NORMALIZATION_TOL = 1e-9


def _frozen(a, dtype=None):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclasses.dataclass(frozen=True)
class LabeledExample:
    id: str
    features: np.ndarray
    y: int
    z: int


@dataclasses.dataclass(frozen=True)
class AuditRecord:
    id: str
    y: int
    z: int
    m: int
    b: int


@dataclasses.dataclass(frozen=True, eq=False)
class Population:
    """Columnar store of labeled examples with declared class/subgroup counts."""

    ids: np.ndarray
    X: np.ndarray
    y: np.ndarray
    z: np.ndarray
    p: int
    k: int
    subgroup_names: tuple = ()

    def __post_init__(self):
        ids = _frozen(self.ids, dtype=str)
        X = _frozen(self.X, dtype=float)
        y = _frozen(self.y, dtype=np.int64)
        z = _frozen(self.z, dtype=np.int64)
        if X.ndim != 2:
            raise ValidationError(f"features must be a 2-D array, got shape {X.shape}")
        n = len(ids)
        if not (X.shape[0] == len(y) == len(z) == n):
            raise ValidationError("ids, features, labels and subgroups differ in length")
        if n and (y.min() < 0 or y.max() >= self.p):
            raise ValidationError(f"labels must lie in 0..{self.p - 1}")
        if n and (z.min() < 0 or z.max() >= self.k):
            raise ValidationError(f"subgroups must lie in 0..{self.k - 1}")
        if self.subgroup_names and len(self.subgroup_names) != self.k:
            raise ValidationError("subgroup_names must have one entry per subgroup")
        for name, value in (("ids", ids), ("X", X), ("y", y), ("z", z)):
            object.__setattr__(self, name, value)
        object.__setattr__(self, "subgroup_names", tuple(self.subgroup_names))

    def __len__(self):
        return len(self.ids)

    @property
    def n_features(self):
        return self.X.shape[1]

    def subset(self, index) -> "Population":
        index = np.asarray(index)
        if index.dtype != bool:
            index = index.astype(np.intp)
        return Population(self.ids[index], self.X[index], self.y[index], self.z[index],
                          self.p, self.k, self.subgroup_names)

    def examples(self) -> Iterator[LabeledExample]:
        for i in range(len(self)):
            yield LabeledExample(str(self.ids[i]), self.X[i], int(self.y[i]), int(self.z[i]))

    @classmethod
    def from_examples(cls, examples: Sequence[LabeledExample], p, k, subgroup_names=()):
        examples = list(examples)
        if not examples:
            return cls(np.empty(0, str), np.empty((0, 0)), np.empty(0, int), np.empty(0, int),
                       p, k, subgroup_names)
        widths = {len(e.features) for e in examples}
        if len(widths) != 1:
            raise ValidationError(f"feature vectors have differing lengths {sorted(widths)}")
        return cls(
            np.array([e.id for e in examples], dtype=str),
            np.vstack([np.asarray(e.features, dtype=float) for e in examples]),
            np.array([e.y for e in examples]),
            np.array([e.z for e in examples]),
            p, k, subgroup_names,
        )

    def cell_counts(self) -> np.ndarray:
        """(p, k) matrix of example counts per (label, subgroup)."""
        counts = np.zeros((self.p, self.k), dtype=np.int64)
        np.add.at(counts, (self.y, self.z), 1)
        return counts


def _check_confidences(conf, p=None):
    conf = np.asarray(conf, dtype=float)
    if conf.ndim == 1:
        conf = conf[None, :]
    if p is not None and conf.shape[1] != p:
        raise ValidationError(f"confidence vectors have {conf.shape[1]} entries, expected {p}")
    if np.any(conf < -NORMALIZATION_TOL) or np.any(conf > 1 + NORMALIZATION_TOL):
        raise ValidationError("confidence entries must lie in [0, 1]")
    sums = conf.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > NORMALIZATION_TOL)
    if bad.size:
        raise ValidationError(
            f"confidence vector {bad[0]} is not normalized: entries sum to {float(sums[bad[0]])!r}")
    return conf


def discretize_confidence(conf, true_label: int, B: int) -> int:
    """Bin index of the confidence assigned to ``true_label``.

    Bins are uniform on [0, 1]; ``s = 1.0`` falls into the last bin.

    >>> discretize_confidence([0.45, 0.55], 1, 10)
    5
    """
    conf = _check_confidences(conf)[0]
    if B < 2:
        raise ValidationError(f"bin count must be >= 2, got {B}")
    return int(discretize(conf[None, :], np.array([true_label]), B)[0])


def discretize(conf, labels, B: int) -> np.ndarray:
    """Vectorised :func:`discretize_confidence` over the rows of ``conf``."""
    conf = _check_confidences(conf)
    labels = np.asarray(labels, dtype=np.int64)
    s = np.clip(conf[np.arange(len(labels)), labels], 0.0, 1.0)
    return np.minimum(np.floor(s * B).astype(np.int64), B - 1)


@dataclasses.dataclass(frozen=True, eq=False)
class EvaluationSet:
    """Balanced member/non-member records with binned model outputs.

    Construction validates both assumptions exactly: as many members as
    non-members overall and inside every (y, z) cell.
    """

    ids: np.ndarray
    y: np.ndarray
    z: np.ndarray
    m: np.ndarray
    b: np.ndarray
    B: int
    p: int
    k: int
    seed: int | None = None

    def __post_init__(self):
        ids = _frozen(self.ids, dtype=str)
        arrays = {name: _frozen(getattr(self, name), dtype=np.int64) for name in "yzmb"}
        n = len(ids)
        if any(len(a) != n for a in arrays.values()):
            raise ValidationError("record columns differ in length")
        y, z, m, b = arrays["y"], arrays["z"], arrays["m"], arrays["b"]
        if n:
            if m.min() < 0 or m.max() > 1:
                raise ValidationError("membership bits must be 0 or 1")
            if b.min() < 0 or b.max() >= self.B:
                raise ValidationError(f"bins must lie in 0..{self.B - 1}")
            if y.min() < 0 or y.max() >= self.p or z.min() < 0 or z.max() >= self.k:
                raise ValidationError("label or subgroup index out of range")
        if len(np.unique(ids)) != n:
            raise ValidationError("record ids must be unique")
        cell = np.zeros((2, self.p, self.k), dtype=np.int64)
        np.add.at(cell, (m, y, z), 1)
        if not np.array_equal(cell[0], cell[1]):
            bad = np.argwhere(cell[0] != cell[1])[0]
            raise ValidationError(
                f"cell (y={bad[0]}, z={bad[1]}) has {cell[1][tuple(bad)]} members and "
                f"{cell[0][tuple(bad)]} non-members")
        object.__setattr__(self, "ids", ids)
        for name, value in arrays.items():
            object.__setattr__(self, name, value)

    def __len__(self):
        return len(self.ids)

    @property
    def records(self) -> list[AuditRecord]:
        return [AuditRecord(str(i), int(y), int(z), int(m), int(b))
                for i, y, z, m, b in zip(self.ids, self.y, self.z, self.m, self.b)]

    @classmethod
    def from_records(cls, records: Sequence[AuditRecord], B, p, k, seed=None):
        return cls(np.array([r.id for r in records], dtype=str),
                   np.array([r.y for r in records], dtype=np.int64),
                   np.array([r.z for r in records], dtype=np.int64),
                   np.array([r.m for r in records], dtype=np.int64),
                   np.array([r.b for r in records], dtype=np.int64),
                   B, p, k, seed)

    @classmethod
    def from_counts(cls, counts) -> "EvaluationSet":
        """Expand a count tensor ``n[m, y, z, b]`` into one record per count."""
        counts = np.asarray(counts, dtype=np.int64)
        _, p, k, B = counts.shape
        m, y, z, b = np.unravel_index(np.repeat(np.arange(counts.size), counts.ravel()),
                                      counts.shape)
        ids = np.array([f"r{i}" for i in range(len(m))], dtype=str)
        return cls(ids, y, z, m, b, B, p, k)

    def counts(self) -> np.ndarray:
        return tally(self.y, self.z, self.m, self.b, self.p, self.k, self.B)


def tally(y, z, m, b, p, k, B) -> np.ndarray:
    """Counts ``n[m, y, z, b]`` as an int64 array of shape (2, p, k, B)."""
    flat = ((np.asarray(m) * p + np.asarray(y)) * k + np.asarray(z)) * B + np.asarray(b)
    return np.bincount(flat.astype(np.int64), minlength=2 * p * k * B).reshape(2, p, k, B)


def _split_pool(pool):
    population, conf = pool
    conf = np.asarray(conf, dtype=float)
    if conf.ndim != 2 or conf.shape[0] != len(population):
        raise ValidationError("each pool needs one confidence vector per example")
    return population, conf


def build_evaluation_set(member_pool, nonmember_pool, B: int, seed: int):
    """Stratified, balanced evaluation set from member and non-member pools.

    Each pool is a ``(Population, confidences)`` pair. Inside every (y, z)
    cell, ``min(n_member, n_nonmember)`` examples are drawn without
    replacement from each side.

    Returns:
        ``(evaluation_set, dropped_cells)`` where ``dropped_cells`` lists the
        ``(y, z)`` cells populated on exactly one side.
    """
    members, conf_in = _split_pool(member_pool)
    nonmembers, conf_out = _split_pool(nonmember_pool)
    if len(members) == 0 or len(nonmembers) == 0:
        raise ValidationError("member and non-member pools must both be non-empty")
    if (members.p, members.k) != (nonmembers.p, nonmembers.k):
        raise ValidationError("pools declare different class/subgroup counts")
    if B < 2:
        raise ValidationError(f"bin count must be >= 2, got {B}")
    p, k = members.p, members.k
    bins_in = discretize(conf_in, members.y, B)
    bins_out = discretize(conf_out, nonmembers.y, B)

    chosen_in, chosen_out, dropped = [], [], []
    for y in range(p):
        for z in range(k):
            rng = np.random.default_rng([seed, y, z])  # per-cell stream
            idx_in = np.flatnonzero((members.y == y) & (members.z == z))
            idx_out = np.flatnonzero((nonmembers.y == y) & (nonmembers.z == z))
            n = min(len(idx_in), len(idx_out))
            if n == 0:
                if len(idx_in) or len(idx_out):
                    dropped.append((y, z))
                continue
            chosen_in.append(np.sort(rng.choice(idx_in, size=n, replace=False)))
            chosen_out.append(np.sort(rng.choice(idx_out, size=n, replace=False)))
    if not chosen_in:
        raise ValidationError("no (y, z) cell is populated in both pools")
    sel_in = np.concatenate(chosen_in)
    sel_out = np.concatenate(chosen_out)
    eval_set = EvaluationSet(
        ids=np.concatenate([members.ids[sel_in], nonmembers.ids[sel_out]]),
        y=np.concatenate([members.y[sel_in], nonmembers.y[sel_out]]),
        z=np.concatenate([members.z[sel_in], nonmembers.z[sel_out]]),
        m=np.concatenate([np.ones(len(sel_in), np.int64), np.zeros(len(sel_out), np.int64)]),
        b=np.concatenate([bins_in[sel_in], bins_out[sel_out]]),
        B=B, p=p, k=k, seed=seed,
    )
    return eval_set, dropped


def _conditional(counts):
    # normalise over the last (bin) axis; undefined where the cell is empty
    totals = counts.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        cond = np.where(totals > 0, counts / np.where(totals > 0, totals, 1), np.nan)
    return cond


@dataclasses.dataclass(frozen=True, eq=False)
class FrequencyTable:
    """Exact tallies of an evaluation set and the distributions derived from them.

    Attributes:
        counts_z: ``n[m, y, z, b]``, shape (2, p, k, B).
        counts: ``n[m, y, b]`` = counts_z summed over z.
        cond: ``Pr[b | y, m]`` indexed ``[m, y, b]``; NaN on empty (y, m) cells.
        cond_z: ``Pr[b | y, z, m]`` indexed ``[m, y, z, b]``; NaN likewise.
        pr_y, pr_z, pr_yz: label, subgroup and joint marginals of the whole set.
    """

    counts_z: np.ndarray

    def __post_init__(self):
        counts_z = np.asarray(self.counts_z)
        if counts_z.ndim != 4 or counts_z.shape[0] != 2:
            raise ValidationError(f"count tensor must have shape (2, p, k, B), got {counts_z.shape}")
        if np.any(counts_z < 0):
            raise ValidationError("counts must be non-negative")
        object.__setattr__(self, "counts_z", _frozen(counts_z, dtype=np.int64))

    @property
    def shape(self):
        _, p, k, B = self.counts_z.shape
        return p, k, B

    @property
    def p(self):
        return self.counts_z.shape[1]

    @property
    def k(self):
        return self.counts_z.shape[2]

    @property
    def B(self):
        return self.counts_z.shape[3]

    @property
    def n_total(self) -> int:
        return int(self.counts_z.sum())

    @property
    def usable(self) -> bool:
        return self.n_total > 0

    @property
    def counts(self) -> np.ndarray:
        return self.counts_z.sum(axis=2)

    @property
    def cond(self) -> np.ndarray:
        return _conditional(self.counts)

    @property
    def cond_z(self) -> np.ndarray:
        return _conditional(self.counts_z)

    @property
    def pr_yz(self) -> np.ndarray:
        n = self.n_total
        joint = self.counts_z.sum(axis=(0, 3)).astype(float)
        return joint / n if n else joint

    @property
    def pr_y(self) -> np.ndarray:
        return self.pr_yz.sum(axis=1)

    @property
    def pr_z(self) -> np.ndarray:
        return self.pr_yz.sum(axis=0)

    def cell_sizes(self) -> np.ndarray:
        """Record counts per (y, z, m) cell, shape (p, k, 2)."""
        return np.moveaxis(self.counts_z.sum(axis=3), 0, -1)


def estimate_tables(eval_set: EvaluationSet) -> FrequencyTable:
    """Frequency table of ``eval_set``; an empty set gives an unusable table."""
    return FrequencyTable(eval_set.counts())


# -- CSV interfaces ---------------------------------------------------------

def read_audit_csv(path, p=None, k=None):
    """Parse an audit input file ``id,y,z[,m],conf_0..conf_{p-1}``.

    Returns ``(population, conf, m)``; ``m`` is None when the column is absent.
    The population carries no features (zero-width matrix).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValidationError(f"{path}: empty file")
        header = [h.strip() for h in header]
        conf_cols = [i for i, h in enumerate(header) if h.startswith("conf_")]
        expected = [f"conf_{j}" for j in range(len(conf_cols))]
        if header[:3] != ["id", "y", "z"] or [header[i] for i in conf_cols] != expected:
            raise ValidationError(f"{path}: header must be id,y,z[,m],conf_0..conf_(p-1)")
        has_m = "m" in header
        rows = list(reader)
    ids, ys, zs, ms, confs = [], [], [], [], []
    for lineno, row in enumerate(rows, start=2):
        try:
            ids.append(row[0])
            ys.append(int(row[1]))
            zs.append(int(row[2]))
            if has_m:
                ms.append(int(row[header.index("m")]))
            confs.append([float(row[i]) for i in conf_cols])
        except (ValueError, IndexError) as exc:
            raise ValidationError(f"{path}: unreadable row {lineno}: {exc}") from None
    p = p if p is not None else len(conf_cols)
    k = k if k is not None else (max(zs) + 1 if zs else 1)
    conf = _check_confidences(np.array(confs, dtype=float).reshape(len(ids), len(conf_cols)), p)
    population = Population(np.array(ids, dtype=str), np.zeros((len(ids), 0)),
                            np.array(ys), np.array(zs), p, k)
    return population, conf, (np.array(ms, dtype=np.int64) if has_m else None)


def write_evaluation_set_csv(eval_set: EvaluationSet, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "y", "z", "m", "bin"])
        for r in zip(eval_set.ids, eval_set.y, eval_set.z, eval_set.m, eval_set.b):
            writer.writerow([str(r[0]), *(int(v) for v in r[1:])])


def read_evaluation_set_csv(path, B, p, k, seed=None) -> EvaluationSet:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["id", "y", "z", "m", "bin"]:
            raise ValidationError(f"{path}: header must be id,y,z,m,bin")
        rows = list(reader)
    return EvaluationSet(
        np.array([r["id"] for r in rows], dtype=str),
        np.array([int(r["y"]) for r in rows], dtype=np.int64),
        np.array([int(r["z"]) for r in rows], dtype=np.int64),
        np.array([int(r["m"]) for r in rows], dtype=np.int64),
        np.array([int(r["bin"]) for r in rows], dtype=np.int64),
        B, p, k, seed,
    )
