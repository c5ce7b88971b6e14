import csv
import json
import os

import numpy as np
import pytest

from mia_audit import experiments as ex
from mia_audit.cli import main

from conftest import needs_compas


def run(argv, capsys=None):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out if capsys else ""
    return code, out


def write_spec(path, **kw):
    spec = ex.SyntheticSpec.isotropic(**kw)
    path.write_text(spec.to_json())
    return path


def data_rows(path):
    with open(path, encoding="utf-8") as fh:
        return list(csv.DictReader(l for l in fh if not l.startswith("#")))


@pytest.fixture
def spec_file(tmp_path):
    return write_spec(tmp_path / "spec.json", k=2, p=2, dim=4, sizes=[300, 200], seed=1)


def write_planted_csv(path, n=2000, seed=0):
    """Precomputed outputs where group 0 members are partly recognisable."""
    rng = np.random.default_rng(seed)
    rows = ["id,y,z,m,conf_0,conf_1"]
    for i in range(n):
        y, z, m = i % 2, (i // 2) % 2, (i // 4) % 2
        s = 0.55
        if z == 0 and m == 1 and rng.random() < 0.4:
            s = 0.97
        conf = [s, 1 - s] if y == 0 else [1 - s, s]
        rows.append(f"r{i},{y},{z},{m},{conf[0]!r},{conf[1]!r}")
    path.write_text("\n".join(rows) + "\n")
    return path


class TestAudit:
    def test_synthetic(self, spec_file, tmp_path, capsys):
        out = tmp_path / "o"
        code, text = run(["audit", "--spec", spec_file, "--shuffles", 2, "--out", out], capsys)
        assert code == 0 and "v_discriminating" in text
        agg = json.loads((out / "aggregate.json").read_text())
        assert agg["n_shuffles"] == 2
        assert agg["metadata"]["config"]["seed"] == 0
        assert (out / "study.csv").read_text().startswith("# ")
        rows = data_rows(out / "study.csv")
        assert len(rows) == 2 * 2 * 2
        assert all(0 <= float(r["vulnerability"]) <= 1 for r in rows)
        assert json.loads((out / "profile.json").read_text())["shuffles"][0]["tau_z"]

    def test_single_shuffle(self, spec_file, tmp_path):
        code, _ = run(["audit", "--spec", spec_file, "--shuffles", 1, "--out", tmp_path / "o"])
        assert code == 0
        assert json.loads((tmp_path / "o" / "aggregate.json").read_text())["n_shuffles"] == 1

    def test_byte_identical_reruns(self, spec_file, tmp_path, monkeypatch):
        for name in ("a", "b"):
            monkeypatch.setenv("MIA_AUDIT_OUT", str(tmp_path / name))
            assert run(["audit", "--spec", spec_file, "--shuffles", 2, "--model", "mlp6",
                        "--seed", 4])[0] == 0
        for f in ("study.csv", "records.csv", "aggregate.json", "profile.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    @needs_compas
    def test_compas_smoke(self, tmp_path, data_dir):
        out = tmp_path / "c"
        code, _ = run(["audit", "--dataset", "compas", "--data", data_dir, "--model", "logreg",
                       "--shuffles", 35, "--seed", 7, "--out", out])
        assert code == 0
        agg = json.loads((out / "aggregate.json").read_text())
        assert agg["metadata"]["subgroups"] == ["AA", "CA", "HI", "NA", "OT"]
        for kind in ("regular", "discriminating"):
            assert 0 <= agg["aggregates"][f"v_{kind}"]["mean"] <= 1

    def test_input_csv(self, tmp_path, capsys):
        path = write_planted_csv(tmp_path / "in.csv", n=400)
        code, text = run(["audit", "--input-csv", path, "--out", tmp_path / "o"], capsys)
        assert code == 0
        report = json.loads((tmp_path / "o" / "report.json").read_text())
        assert report["report"]["discriminating"]["by_subgroup"][0] > 60

    def test_dp_needs_epsilon(self, spec_file, tmp_path):
        assert run(["audit", "--spec", spec_file, "--model", "dp-logreg",
                    "--out", tmp_path])[0] == 2

    def test_bad_bins_usage(self, spec_file):
        with pytest.raises(SystemExit) as info:
            main(["audit", "--spec", str(spec_file), "--bins", "1"])
        assert info.value.code == 2

    def test_missing_file_domain_error(self, tmp_path):
        assert run(["audit", "--population", tmp_path / "nope.csv", "--out", tmp_path])[0] == 1


class TestVerifyIdentities:
    def test_passes(self, spec_file, tmp_path, capsys):
        code, text = run(["verify-identities", "--spec", spec_file, "--shuffles", 2,
                          "--geo-tables", 6, "--out", tmp_path], capsys)
        assert code == 0
        assert "overall/discriminating" in text and "geo table 5" in text
        assert "all identities hold" in text

    def test_corrupted_table_fails(self, spec_file, tmp_path, capsys):
        code, text = run(["verify-identities", "--spec", spec_file, "--shuffles", 1,
                          "--geo-tables", 0, "--corrupt", "--out", tmp_path], capsys)
        assert code == 1
        assert "FAIL shuffle 0" in text

    def test_single_subgroup_equality(self, tmp_path, capsys):
        rows = ["id,y,z,m,conf_0,conf_1"]
        rng = np.random.default_rng(0)
        for i in range(200):
            s = rng.random()
            rows.append(f"r{i},{i % 2},0,{(i // 2) % 2},{1 - s!r},{s!r}")
        (tmp_path / "k1.csv").write_text("\n".join(rows) + "\n")
        code, text = run(["verify-identities", "--input-csv", tmp_path / "k1.csv",
                          "--geo-tables", 0, "--out", tmp_path], capsys)
        assert code == 0
        assert "single subgroup, equality branch" in text


class TestSweep:
    def test_size_sweep_decreasing(self, tmp_path):
        spec = write_spec(tmp_path / "s.json", k=3, p=2, dim=10, sizes=[1000, 1000, 1600],
                          seed=3)
        out = tmp_path / "o"
        code, _ = run(["sweep", "--kind", "size", "--spec", spec, "--target", 2,
                       "--grid", "25,100,400,800", "--model", "mlp100", "--shuffles", 3,
                       "--out", out])
        assert code == 0
        rows = data_rows(out / "sweep.csv")
        target = {}
        for r in rows:
            if r["subgroup"] == "2" and r["adversary"] == "discriminating":
                target.setdefault(int(r["subgroup_size"]), []).append(float(r["vulnerability"]))
        means = [np.mean(target[g]) for g in sorted(target)]
        assert means[0] > means[-1]

    def test_empty_grid(self, spec_file, tmp_path):
        assert run(["sweep", "--kind", "equal", "--spec", spec_file, "--grid", ",",
                    "--out", tmp_path])[0] == 2

    def test_size_needs_target(self, spec_file, tmp_path):
        assert run(["sweep", "--kind", "size", "--spec", spec_file, "--grid", "10",
                    "--out", tmp_path])[0] == 2

    def test_deterministic(self, spec_file, tmp_path, monkeypatch):
        for name in ("a", "b"):
            monkeypatch.setenv("MIA_AUDIT_OUT", str(tmp_path / name))
            assert run(["sweep", "--kind", "equal", "--spec", spec_file, "--grid", "40,80",
                        "--model", "logreg"])[0] == 0
        assert (tmp_path / "a" / "sweep.csv").read_bytes() == \
            (tmp_path / "b" / "sweep.csv").read_bytes()


class TestSignificance:
    def test_planted_pair_flagged(self, tmp_path):
        study = tmp_path / "study"
        assert run(["audit", "--input-csv", write_planted_csv(tmp_path / "p.csv"),
                    "--out", study])[0] == 0
        assert run(["significance", "--study", study, "--permutations", 999])[0] == 0
        result = json.loads((study / "significance.json").read_text())["result"]
        assert result["pairs"][0]["decision"] == 1

    def test_null_studies_rarely_flag(self, tmp_path):
        flagged = 0
        for rep in range(20):
            spec = write_spec(tmp_path / f"n{rep}.json", k=2, p=2, dim=4, sizes=[300, 300],
                              seed=100 + rep, include_subgroup_feature=False)
            study = tmp_path / f"s{rep}"
            assert run(["audit", "--spec", spec, "--model", "mlp6", "--shuffles", 3,
                        "--seed", rep, "--out", study])[0] == 0
            assert run(["significance", "--study", study, "--permutations", 199,
                        "--seed", rep])[0] == 0
            result = json.loads((study / "significance.json").read_text())["result"]
            flagged += any(p["decision"] for p in result["pairs"])
        assert flagged <= 1  # all decisions 0 in >= 95% of repetitions

    def test_max_statistic(self, tmp_path, capsys):
        study = tmp_path / "study"
        run(["audit", "--input-csv", write_planted_csv(tmp_path / "p.csv", n=400),
             "--out", study])
        code, text = run(["significance", "--study", study, "--statistic", "max",
                          "--permutations", 99], capsys)
        assert code == 0 and "p = 0.01" in text

    def test_too_few_permutations(self, tmp_path):
        study = tmp_path / "study"
        run(["audit", "--input-csv", write_planted_csv(tmp_path / "p.csv", n=400),
             "--out", study])
        assert run(["significance", "--study", study, "--permutations", 50])[0] == 1

    def test_missing_study(self, tmp_path, capsys):
        code = main(["significance", "--study", str(tmp_path / "none")])
        assert code == 1
        assert "missing study artifact" in capsys.readouterr().err


class TestIngestDatagen:
    def test_datagen(self, tmp_path):
        out = tmp_path / "g"
        assert run(["datagen", "--sizes", "30,40", "--dim", 3, "--seed", 2, "--out", out])[0] == 0
        code, _ = run(["audit", "--population", out / "population.csv", "--shuffles", 1,
                       "--out", tmp_path / "a"])
        assert code == 0
        spec = ex.SyntheticSpec.from_json((out / "spec.json").read_text())
        assert spec.sizes == (30, 40)

    def test_datagen_needs_input(self, tmp_path):
        assert run(["datagen", "--out", tmp_path])[0] == 2

    @needs_compas
    def test_ingest_compas(self, tmp_path, data_dir, monkeypatch):
        monkeypatch.setenv("MIA_AUDIT_DATA", data_dir)
        assert run(["ingest", "--dataset", "compas", "--out", tmp_path])[0] == 0
        manifest = json.loads((tmp_path / "compas.manifest.json").read_text())
        assert manifest["manifest"]["n_examples"] == 6172
        assert manifest["metadata"]["digest"]
        assert os.path.exists(tmp_path / "compas.csv")

    def test_missing_data_dir(self, tmp_path):
        assert run(["ingest", "--dataset", "compas", "--data", tmp_path / "x",
                    "--out", tmp_path])[0] == 1


def test_no_command_is_usage_error():
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 2
