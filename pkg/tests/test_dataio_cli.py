import csv
import json
from importlib import resources

import numpy as np
import pytest
from scipy.stats import chi2

from smartlmm import cli
from smartlmm.config import SIM_PRESETS, load_config, parse_config
from smartlmm.dataio import export, ingest, read_long_csv
from smartlmm.design import DtrIndex, SubjectRecord, autism_design
from smartlmm.errors import SchemaError, ValidationError
from smartlmm.model import INTERCEPT_ONLY, autism_mean_model, build_X

AUT = autism_mean_model()
BETA_AUT = np.array([28.0, 1.2, -0.5, 0.2, 0.1, 0.3, -2.0])


def autism_subjects(n, seed):
    """Autism-shaped data from the three-DTR design with a random intercept and slope."""
    rng = np.random.default_rng(seed)
    times = np.array([0.0, 12.0, 24.0, 36.0])
    out = []
    for i in range(n):
        a1 = int(rng.choice([1, -1]))
        r = int(rng.random() < 0.4)
        a2 = int(rng.choice([1, -1])) if (a1 == 1 and r == 0) else None
        age = float(rng.normal(0.0, 1.0))
        dtr = DtrIndex(a1, a2 if a2 is not None else (1 if a1 == 1 else None))
        mean = build_X(AUT, times, dtr, {"age": age}) @ BETA_AUT
        b = rng.multivariate_normal([0.0, 0.0], [[16.0, 0.1], [0.1, 0.04]])
        y = mean + b[0] + b[1] * times + rng.normal(0.0, 3.0, len(times))
        if rng.random() < 0.1:
            y[-1] = np.nan
        out.append(SubjectRecord(f"s{i}", times, y, a1, r, a2, {"age": age}))
    return out


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------- data I/O


def test_export_ingest_round_trip(tmp_path):
    subs = autism_subjects(30, 0)
    export(subs, tmp_path / "d.csv")
    back = ingest(tmp_path / "d.csv", covariates=["age"], center=False, design=autism_design())
    assert [s.id for s in back] == [s.id for s in subs]
    for a, b in zip(subs, back):
        np.testing.assert_array_equal(a.times, b.times)
        np.testing.assert_array_equal(a.observed, b.observed)
        np.testing.assert_array_equal(a.y[a.observed], b.y[b.observed])
        assert (a.a1, a.r, a.a2, a.covariates) == (b.a1, b.r, b.a2, b.covariates)


def test_ingest_sorts_times_and_centers(tmp_path):
    write_rows(tmp_path / "d.csv", ["id", "time", "y", "a1", "r", "a2", "age", "extra"], [
        ["a", 2, 5.0, 1, 0, -1, 10, "x"],
        ["a", 0, 1.0, 1, 0, -1, 10, "y"],
        ["b", 0, 2.0, -1, 1, "", 4, "z"],
    ])
    res = read_long_csv(tmp_path / "d.csv", covariates=["age"])
    a, b = res.subjects
    np.testing.assert_array_equal(a.times, [0.0, 2.0])
    np.testing.assert_array_equal(a.y, [1.0, 5.0])
    assert res.covariate_means == {"age": 7.0}
    assert a.covariates == {"age": 3.0} and b.covariates == {"age": -3.0}
    assert b.a2 is None


@pytest.mark.parametrize(
    "rows,match",
    [
        ([["a", 0, 1, 1, 0, 1], ["a", "x", 1, 1, 0, 1]], "row 3"),
        ([["a", 0, 1, 1, 0, 1], ["a", 1, 1, 2, 0, 1]], "row 3: a1"),
        ([["a", 0, 1, 1, 0, 1], ["a", 1, 1, 1, 0, -1]], "rows 2 and 3"),
        ([["a", 0, 1, 1, 0, 1], ["a", 0, 2, 1, 0, 1]], "row 3: subject 'a' repeats time 0"),
        ([["a", 0, 1, 1, "", 1]], "row 2: subject 'a' has no responder status"),
        ([["", 0, 1, 1, 0, 1]], "row 2: empty id"),
        ([["a", 0, "", 1, 0, 1]], "no observed outcome"),
    ],
)
def test_ingest_errors_name_the_row(tmp_path, rows, match):
    write_rows(tmp_path / "d.csv", ["id", "time", "y", "a1", "r", "a2"], rows)
    with pytest.raises(ValidationError, match=match):
        ingest(tmp_path / "d.csv")


def test_ingest_schema_and_empty(tmp_path):
    write_rows(tmp_path / "d.csv", ["id", "time", "y", "a1"], [["a", 0, 1, 1]])
    with pytest.raises(SchemaError, match="'r'"):
        ingest(tmp_path / "d.csv")
    (tmp_path / "e.csv").write_text("")
    with pytest.raises(ValidationError, match="empty"):
        ingest(tmp_path / "e.csv")
    (tmp_path / "h.csv").write_text("id,time,y,a1,r,a2\n")
    with pytest.raises(ValidationError, match="no data rows"):
        ingest(tmp_path / "h.csv")


def test_design_check_on_ingest(tmp_path):
    # a responder to a1=-1 carrying an a2 code is inconsistent with the autism design
    write_rows(tmp_path / "d.csv", ["id", "time", "y", "a1", "r", "a2"], [["a", 0, 1, -1, 0, 1]])
    with pytest.raises(ValidationError):
        ingest(tmp_path / "d.csv", design=autism_design())


# ---------------------------------------------------------------- config


def test_yaml_config_parsing(tmp_path):
    (tmp_path / "c.yaml").write_text(
        "design: autism\n"
        "model: {preset: autism-eq3.2, covariates: [age], random_effects: intercept-only}\n"
        "estimator: gee-exchangeable\n"
        "data: {path: sub/data.csv}\n"
        "contrasts: {pairs: [['1,1', '-1,.']], times: [0, 36], omnibus_auc: [0, 36]}\n"
        "level: 0.9\n"
    )
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.design.name == "autism"
    assert cfg.model.covariate_names == ("age",)
    assert cfg.re_spec == INTERCEPT_ONLY
    assert cfg.estimator == "gee-exchangeable"
    assert cfg.data_path == tmp_path / "sub" / "data.csv"
    assert cfg.pairs == [(DtrIndex(1, 1), DtrIndex(-1, None))]
    assert cfg.times == (0.0, 36.0) and cfg.omnibus_auc == (0.0, 36.0) and cfg.level == 0.9


@pytest.mark.parametrize("doc", [
    {"estimator": "ols"},
    {"model": {"preset": "nope"}},
    {"model": {"terms": ["1"]}},
    {"design": 3},
    {"simulation": {"preset": "simulation9"}},
    {"simulation": {"dropout": "yes"}},
    {"level": 1.5},
])
def test_config_errors(doc):
    with pytest.raises(ValidationError):
        parse_config(doc)


def test_shipped_configs_load():
    names = sorted(p.name for p in resources.files("smartlmm").joinpath("configs").iterdir() if p.name.endswith(".yaml"))
    assert {"simulation1-d0.2.yaml", "simulation1-d0.8.yaml", "simulation2.yaml"} <= set(names)
    for name in names:
        with resources.as_file(resources.files("smartlmm").joinpath("configs", name)) as path:
            cfg = load_config(path)
        if cfg.simulation is not None:
            preset = name[: -len(".yaml")].replace("simulation3-dropout", "simulation2")
            assert cfg.simulation.generative == SIM_PRESETS[preset]()
    assert load_config(resources.files("smartlmm").joinpath("configs", "simulation3-dropout.yaml")).simulation.dropout


# ---------------------------------------------------------------- formatting


def test_six_significant_digits():
    assert cli.fmt6(10.3213456) == "10.3213"
    assert cli.fmt6(0.000123456789) == "0.000123457"
    assert cli.fmt6(28.9) == "28.9"
    assert cli.fmt6(np.float64(-1234567.0)) == "-1.23457e+06"
    assert cli.fmt6(float("nan")) == "NA" and cli.fmt6(None) == "" and cli.fmt6(3) == "3"


def test_omnibus_reference_value_format():
    """The reported omnibus statistic (10.32 on 2 dof for three DTRs) renders as in the text, and its
    p-value is the quoted 0.006.  Format check only: the statistic itself is not recomputable."""
    stat = 10.32
    p = chi2.sf(stat, 2)
    assert cli.fmt6(stat) == "10.32"
    assert f"{p:.3f}" == "0.006"
    assert len(autism_design().dtrs) - 1 == 2


# ---------------------------------------------------------------- CLI


@pytest.fixture(scope="module")
def autism_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("autism")
    export(autism_subjects(160, 1), d / "autism.csv")
    src = resources.files("smartlmm").joinpath("configs", "autism-fit.yaml").read_text()
    (d / "autism-fit.yaml").write_text(src)
    return d


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_cli_fit_table_format(autism_run):
    d = autism_run
    assert cli.main(["fit", "--config", str(d / "autism-fit.yaml"), "--out", str(d / "fit")]) == 0
    rows = read_csv(d / "fit.csv")
    assert rows[0] == ["Coefficient", "Estimate", "SE", "95% CI"]
    assert [r[0] for r in rows[1:]] == list(AUT.column_names)
    for r in rows[1:]:
        for cell in r[1:3]:
            assert len(cell.replace("-", "").replace(".", "").lstrip("0")) <= 6
        lo, hi = (float(v) for v in r[3].strip("()").split(","))
        assert lo <= float(r[1]) <= hi
    doc = json.loads((d / "fit.json").read_text())
    assert [c["coefficient"] for c in doc["coefficients"]] == list(AUT.column_names)
    assert doc["diagnostics"]["converged"] is True
    assert len(doc["covariance"]) == AUT.p
    # the CSV is the rounded JSON
    for r, c in zip(rows[1:], doc["coefficients"]):
        assert float(r[1]) == pytest.approx(c["estimate"], rel=5e-6)
    meta = json.loads((d / "fit.meta.json").read_text())
    assert "created" in meta and meta["argv"][0] == "fit"


def test_cli_outputs_are_byte_identical(autism_run, tmp_path):
    d = autism_run
    for k in (1, 2):
        assert cli.main(["fit", "--config", str(d / "autism-fit.yaml"), "--out", str(tmp_path / f"run{k}")]) == 0
    for ext in (".csv", ".json"):
        a, b = (tmp_path / f"run1{ext}").read_bytes(), (tmp_path / f"run2{ext}").read_bytes()
        assert a == b
        assert b"created" not in a and b"2026" not in a


def test_cli_contrast(autism_run):
    d = autism_run
    assert cli.main(["contrast", "--config", str(d / "autism-fit.yaml"), "--out", str(d / "con")]) == 0
    rows = read_csv(d / "con.csv")
    assert rows[0][:3] == ["label", "time", "estimate"]
    labels = {r[0] for r in rows[1:]}
    assert "(1,1) - (-1,.)" in labels
    omni = [r for r in rows[1:] if r[7] == "2"]
    assert len(omni) == 1
    stat, p = float(omni[0][6]), float(omni[0][8])
    assert p == pytest.approx(chi2.sf(stat, 2), rel=1e-5)


def test_cli_predict(autism_run):
    d = autism_run
    assert cli.main(["predict", "--config", str(d / "autism-fit.yaml"), "--out", str(d / "pred"), "--grid", "0,36,5"]) == 0
    rows = read_csv(d / "pred.csv")
    assert rows[0] == ["id", "dtr", "time", "fitted"]
    doc = json.loads((d / "pred.json").read_text())
    assert len(doc["subjects"]) == 160


def test_cli_simulate_small(tmp_path):
    (tmp_path / "s.yaml").write_text(
        "simulation: {preset: simulation1-d0.8, sizes: [120], replicates: 3, seed: 5, estimators: [gee-independence]}\n"
    )
    args = ["simulate", "--config", str(tmp_path / "s.yaml"), "--out", str(tmp_path / "sim")]
    assert cli.main(args) == 0
    rows = read_csv(tmp_path / "sim.csv")
    assert rows[0][:4] == ["N", "Method", "Bias", "Monte Carlo SD"]
    assert rows[1][0] == "120"
    first = (tmp_path / "sim.csv").read_bytes()
    assert cli.main(args) == 0
    assert (tmp_path / "sim.csv").read_bytes() == first


def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main([]) == cli.EXIT_USAGE
    assert cli.main(["fit"]) == cli.EXIT_USAGE
    (tmp_path / "c.yaml").write_text("design: autism\nmodel: {preset: autism-eq3.2}\n")
    (tmp_path / "empty.csv").write_text("")
    rc = cli.main(["fit", "--config", str(tmp_path / "c.yaml"), "--data", str(tmp_path / "empty.csv"),
                   "--out", str(tmp_path / "o")])
    assert rc == cli.EXIT_VALIDATION
    assert "empty" in capsys.readouterr().err
    rc = cli.main(["fit", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path / "o")])
    assert rc == cli.EXIT_VALIDATION
    # every subject on a1 = +1 leaves the a1 columns unidentified -> numerical failure
    subs = [s for s in autism_subjects(80, 3) if s.a1 == 1]
    export(subs, tmp_path / "one.csv")
    (tmp_path / "c2.yaml").write_text("design: autism\nmodel: {preset: autism-eq3.2, covariates: [age]}\n")
    rc = cli.main(["fit", "--config", str(tmp_path / "c2.yaml"), "--data", str(tmp_path / "one.csv"),
                   "--out", str(tmp_path / "o")])
    assert rc == cli.EXIT_NUMERICAL
