"""Loaders for the ADULT (census income) and COMPAS (ProPublica) datasets.

Both loaders keep the sensitive attribute among the features, one-hot encode
categoricals and leave numeric columns unscaled; models scale their inputs.

ADULT (``adult.data`` + ``adult.test``, 48,842 rows, no drops): numeric
``age, education-num, capital-gain, capital-loss, hours-per-week``; one-hot
``workclass, marital-status, occupation, relationship, race, sex,
native-country`` with ``?`` kept as its own category. ``fnlwgt`` (a census
sampling weight) and ``education`` (duplicated by ``education-num``) are
dropped. That gives 5 + 86 = 91 features.

COMPAS (``compas-scores-two-years.csv``): rows with unknown recidivism
(``is_recid == -1``), ordinary-traffic charges (``c_charge_degree == "O"``)
or an arrest more than 30 days from screening are dropped (6,172 remain).
Numeric ``age, priors_count, days_b_screening_arrest``; one-hot
``c_charge_degree, race (5 groups), age_cat, sex`` = 15 features. Risk-score
columns are never read.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import os

import numpy as np
import pandas as pd

from mia_audit.core import Population
from mia_audit.errors import ValidationError

ADULT_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education-num", "marital-status",
    "occupation", "relationship", "race", "sex", "capital-gain", "capital-loss",
    "hours-per-week", "native-country", "income",
]
ADULT_NUMERIC = ["age", "education-num", "capital-gain", "capital-loss", "hours-per-week"]
ADULT_CATEGORICAL = ["workclass", "marital-status", "occupation", "relationship", "race",
                     "sex", "native-country"]
ADULT_RACES = {"White": "WH", "Black": "BL", "Asian-Pac-Islander": "AI",
               "Amer-Indian-Eskimo": "AE", "Other": "OT"}

COMPAS_REQUIRED = ["id", "age", "age_cat", "sex", "race", "priors_count",
                   "days_b_screening_arrest", "c_charge_degree", "is_recid", "two_year_recid"]
COMPAS_NUMERIC = ["age", "priors_count", "days_b_screening_arrest"]
COMPAS_CATEGORICAL = ["c_charge_degree", "race", "age_cat", "sex"]
COMPAS_RACES = {"African-American": "AA", "Caucasian": "CA", "Hispanic": "HI",
                "Native American": "NA", "Other": "OT", "Asian": "OT"}


@dataclasses.dataclass(frozen=True)
class DatasetManifest:
    name: str
    n_raw: int
    n_examples: int
    n_features: int
    label_column: str
    subgroup_column: str
    subgroups: tuple  # subgroup short names, index = subgroup id
    feature_names: tuple
    dropped_rows: int = 0

    def __post_init__(self):
        if len(set(self.subgroups)) != len(self.subgroups):
            raise ValidationError("subgroup names must be distinct")

    def subgroup_index(self, name: str) -> int:
        return self.subgroups.index(name)


def _one_hot(df, numeric, categorical):
    parts = [df[numeric].astype(float)]
    names = list(numeric)
    for col in categorical:
        levels = sorted(df[col].unique())
        for level in levels:
            parts.append((df[col] == level).astype(float).rename(f"{col}={level}"))
            names.append(f"{col}={level}")
    return pd.concat(parts, axis=1).to_numpy(dtype=float), names


def _read_adult_file(path, skiprows):
    try:
        df = pd.read_csv(path, header=None, names=ADULT_COLUMNS, skipinitialspace=True,
                         skiprows=skiprows, dtype=str, keep_default_na=False, comment=None)
    except (OSError, pd.errors.ParserError) as exc:
        raise ValidationError(f"{path}: {exc}") from None
    df = df[df["age"].str.strip() != ""]
    if df["income"].isna().any() or (df["income"] == "").any():
        bad = df.index[(df["income"] == "") | df["income"].isna()].tolist()
        raise ValidationError(f"{path}: rows {bad[:5]} have too few fields")
    return df


def load_adult(path):
    """Load ADULT from a directory holding ``adult.data``/``adult.test`` or a single file.

    Returns ``(population, manifest)``.
    """
    if os.path.isdir(path):
        files = [(os.path.join(path, "adult.data"), 0), (os.path.join(path, "adult.test"), 1)]
        files = [(f, s) for f, s in files if os.path.exists(f)]
        if not files:
            raise ValidationError(f"{path}: no adult.data or adult.test found")
    else:
        with open(path, encoding="utf-8") as fh:
            first = fh.readline()
        files = [(path, 1 if first.startswith("|") else 0)]
    frames = []
    for fname, skip in files:
        df = _read_adult_file(fname, skip)
        df.insert(0, "source_id", [f"{os.path.basename(fname)}:{i}" for i in range(len(df))])
        frames.append(df)
    df = pd.concat(frames, ignore_index=True)
    n_raw = len(df)
    for col in ADULT_NUMERIC:
        df[col] = pd.to_numeric(df[col], errors="coerce")
    missing = df[ADULT_NUMERIC].isna().any(axis=1)
    df = df[~missing].reset_index(drop=True)
    unknown_race = sorted(set(df["race"]) - set(ADULT_RACES))
    if unknown_race:
        raise ValidationError(f"unexpected race categories {unknown_race}")
    income = df["income"].str.rstrip(".")
    if not set(income) <= {"<=50K", ">50K"}:
        raise ValidationError(f"unexpected income labels {sorted(set(income))}")
    X, names = _one_hot(df, ADULT_NUMERIC, ADULT_CATEGORICAL)
    subgroups = tuple(ADULT_RACES.values())
    z = df["race"].map(lambda r: subgroups.index(ADULT_RACES[r])).to_numpy()
    y = (income == ">50K").astype(int).to_numpy()
    population = Population(df["source_id"].to_numpy(dtype=str), X, y, z, 2, len(subgroups),
                            subgroups)
    manifest = DatasetManifest("adult", n_raw, len(population), X.shape[1], "income", "race",
                               subgroups, tuple(names), int(missing.sum()))
    return population, manifest


def load_compas(path):
    """Load the ProPublica two-year COMPAS file. Returns ``(population, manifest)``."""
    if os.path.isdir(path):
        path = os.path.join(path, "compas-scores-two-years.csv")
    try:
        header = pd.read_csv(path, nrows=0).columns
    except (OSError, pd.errors.ParserError) as exc:
        raise ValidationError(f"{path}: {exc}") from None
    missing_cols = [c for c in COMPAS_REQUIRED if c not in header]
    if missing_cols:
        raise ValidationError(f"{path}: missing columns {missing_cols}")
    df = pd.read_csv(path, usecols=COMPAS_REQUIRED)
    n_raw = len(df)
    keep = (
        df["days_b_screening_arrest"].between(-30, 30)
        & (df["is_recid"] != -1)
        & df["c_charge_degree"].notna()
        & (df["c_charge_degree"] != "O")
        & df["two_year_recid"].notna()
    )
    df = df[keep].reset_index(drop=True)
    unknown_race = sorted(set(df["race"]) - set(COMPAS_RACES))
    if unknown_race:
        raise ValidationError(f"unexpected race categories {unknown_race}")
    subgroups = ("AA", "CA", "HI", "NA", "OT")
    df["race"] = df["race"].map(COMPAS_RACES)
    X, names = _one_hot(df, COMPAS_NUMERIC, COMPAS_CATEGORICAL)
    z = df["race"].map(subgroups.index).to_numpy()
    y = df["two_year_recid"].astype(int).to_numpy()
    ids = np.array([f"compas:{i}" for i in df["id"]], dtype=str)
    population = Population(ids, X, y, z, 2, len(subgroups), subgroups)
    manifest = DatasetManifest("compas", n_raw, len(population), X.shape[1], "two_year_recid",
                               "race", subgroups, tuple(names), int(n_raw - len(df)))
    return population, manifest


LOADERS = {"adult": load_adult, "compas": load_compas}


def load_dataset(name: str, path):
    try:
        loader = LOADERS[name]
    except KeyError:
        raise ValidationError(f"unknown dataset {name!r}; choose from {sorted(LOADERS)}") from None
    return loader(path)


def population_digest(population: Population) -> str:
    h = hashlib.sha256()
    for a in (population.ids.astype("U"), population.X, population.y, population.z):
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def write_population_csv(population: Population, path):
    """Canonical cache format ``id,y,z,f_0..f_{d-1}``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "y", "z"] + [f"f_{j}" for j in range(population.n_features)])
        for i in range(len(population)):
            writer.writerow([population.ids[i], int(population.y[i]), int(population.z[i])]
                            + [repr(float(v)) for v in population.X[i]])


def read_population_csv(path, p=None, k=None, subgroup_names=()):
    df = pd.read_csv(path, dtype={"id": str}, comment="#")
    if list(df.columns[:3]) != ["id", "y", "z"]:
        raise ValidationError(f"{path}: header must start with id,y,z")
    features = [c for c in df.columns[3:]]
    if features != [f"f_{j}" for j in range(len(features))]:
        raise ValidationError(f"{path}: feature columns must be f_0..f_(d-1)")
    y = df["y"].to_numpy(dtype=np.int64)
    z = df["z"].to_numpy(dtype=np.int64)
    p = int(y.max()) + 1 if p is None else p
    k = int(z.max()) + 1 if k is None else k
    return Population(df["id"].to_numpy(dtype=str), df[features].to_numpy(dtype=float),
                      y, z, p, k, subgroup_names)
