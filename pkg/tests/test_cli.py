import json

import jsonschema
import numpy as np
import pytest

from civmed import __version__
from civmed.cli import main
from civmed.data import Dataset
from civmed.report import load_schema
from civmed.simulation import DgpSpec, OutcomeDgpSpec, generate_dataset, generate_outcome_dataset

SCHEMA = load_schema()
OUTCOME_ARGS = ["--outcome", "Y", "--error-prone", "C1", "--exposure", "Z"]
MEDIATION_ARGS = ["--outcome", "Y", "--exposure", "A", "--mediator", "Z", "--clean", "C"]


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    out = root / "outcome.csv"
    generate_outcome_dataset(OutcomeDgpSpec(n=600, seed=1)).dataset.to_csv(out)
    med = root / "mediation.csv"
    generate_dataset(DgpSpec(n=400, seed=2)).dataset.to_csv(med)
    rng = np.random.default_rng(5)
    z = rng.integers(0, 2, 200).astype(float)
    c1 = z + rng.standard_normal(200)
    col = root / "collinear.csv"
    Dataset({"Y": 1 + c1 + z + rng.standard_normal(200), "Z": z, "C1": c1}).to_csv(col)
    return {"outcome": str(out), "mediation": str(med), "collinear": str(col), "root": root}


def run(capsys, argv):
    code = main(argv)
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def run_json(capsys, argv):
    code, out, err = run(capsys, argv)
    assert code == 0, err
    doc = json.loads(out)
    jsonschema.validate(doc, SCHEMA)
    return doc


class TestCommands:
    def test_fit_outcome(self, capsys, files):
        doc = run_json(capsys, ["fit-outcome", "--data", files["outcome"], *OUTCOME_ARGS])
        assert doc["version"] == __version__
        assert doc["config"]["builder"] == "efficient_star"
        theta = dict(zip(doc["result"]["labels"], doc["result"]["theta"]))
        assert theta["Z"] == pytest.approx(1.5, abs=0.3)

    def test_fit_outcome_contrast(self, capsys, files):
        doc = run_json(capsys, ["fit-outcome", "--data", files["outcome"], *OUTCOME_ARGS,
                                "--contrast", "2,1"])
        assert "contrast" in doc["result"]

    def test_me_variance(self, capsys, files):
        doc = run_json(capsys, ["me-variance", "--data", files["outcome"], *OUTCOME_ARGS,
                                "--builder", "simple", "--s-terms", "Z^2"])
        assert doc["result"]["estimate"]["source_model"] == "outcome"

    def test_fit_mediation_sandwich(self, capsys, files):
        doc = run_json(capsys, ["fit-mediation", "--data", files["mediation"],
                                *MEDIATION_ARGS, "--pipeline", "NAIVE",
                                "--pipeline", "IVZ_IVY", "--inference", "sandwich"])
        assert set(doc["result"]["pipelines"]) == {"NAIVE", "IVZ_IVY"}

    def test_fit_mediation_bootstrap_is_byte_identical(self, capsys, files):
        argv = ["fit-mediation", "--data", files["mediation"], *MEDIATION_ARGS,
                "--pipeline", "MOM_SENS(0.7)", "--B", "100", "--seed", "3"]
        first = run(capsys, argv)
        second = run(capsys, argv)
        assert first[0] == 0 and first[1] == second[1]
        jsonschema.validate(json.loads(first[1]), SCHEMA)

    def test_bootstrap_needs_seed(self, capsys, files):
        code, _, err = run(capsys, ["fit-mediation", "--data", files["mediation"],
                                    *MEDIATION_ARGS, "--B", "100"])
        assert code == 1
        assert json.loads(err.splitlines()[-1])["exit_code"] == 1

    def test_f_test_json(self, capsys, files):
        doc = run_json(capsys, ["f-test", "--data", files["outcome"], "--response", "C1",
                                "--small", "Z", "--large", "Z,Z^2"])
        assert doc["result"]["df_num"] == 1

    def test_f_test_text(self, capsys, files):
        code, out, _ = run(capsys, ["f-test", "--data", files["outcome"], "--response",
                                    "C1", "--small", "Z", "--large", "Z,Z^2",
                                    "--format", "text"])
        assert code == 0
        assert out.startswith("F = ") and "df = (1, 597)" in out and "weak = " in out

    def test_f_test_infers_response(self, capsys, files):
        # Columns Y, Z, C1 with terms over Z and C1 leave Y as the response.
        doc = run_json(capsys, ["f-test", "--data", files["outcome"], "--small", "Z",
                                "--large", "Z,C1"])
        assert doc["result"]["response"] == "Y"

    def test_simulate_formats(self, capsys, files):
        base = ["simulate", "--grid", "quick", "--R", "2", "--seed", "1",
                "--pipeline", "NAIVE"]
        doc = run_json(capsys, base)
        assert doc["result"]["R"] == 2
        code, out, _ = run(capsys, [*base, "--format", "markdown"])
        assert code == 0 and out.startswith("| scenario")
        code, out, _ = run(capsys, [*base, "--format", "csv"])
        assert code == 0 and out.startswith("scenario,")

    def test_simulate_writes_files(self, capsys, files):
        out = files["root"] / "sim.json"
        md = files["root"] / "sim.md"
        code, stdout, _ = run(capsys, ["simulate", "--grid", "quick", "--R", "2", "--seed",
                                       "1", "--pipeline", "NAIVE", "--out", str(out),
                                       "--markdown", str(md)])
        assert code == 0 and stdout == ""
        jsonschema.validate(json.loads(out.read_text()), SCHEMA)
        assert md.read_text().startswith("| scenario")
        assert "out" not in json.loads(out.read_text())["config"]


class TestErrors:
    def test_simulate_needs_seed(self, capsys):
        code, _, err = run(capsys, ["simulate", "--grid", "quick", "--R", "2"])
        assert code == 1 and "--seed" in err

    def test_unknown_flag_prints_usage(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["simulate", "--bogus"])
        assert info.value.code == 1
        assert "usage" in capsys.readouterr().err

    def test_no_subcommand(self, capsys):
        code, _, err = run(capsys, [])
        assert code == 1 and "usage" in err

    def test_missing_file(self, capsys, files):
        code, _, err = run(capsys, ["fit-outcome", "--data", "/nonexistent.csv",
                                    *OUTCOME_ARGS])
        assert code == 1
        assert json.loads(err)["stage"] == "io"

    def test_missing_column_is_user_error(self, capsys, files):
        code, _, err = run(capsys, ["fit-outcome", "--data", files["outcome"],
                                    "--outcome", "Q", "--error-prone", "C1"])
        payload = json.loads(err)
        assert code == 1 and payload["stage"] == "load" and "Q" in payload["message"]

    @pytest.mark.parametrize("builder", [["--builder", "simple", "--s-terms", "Z^2"], []])
    def test_collinear_instrument_exits_2_with_f_test_advice(self, capsys, files, builder):
        code, _, err = run(capsys, ["fit-outcome", "--data", files["collinear"],
                                    *OUTCOME_ARGS, *builder])
        payload = json.loads(err)
        assert code == 2
        assert payload["error"] == "RankError" and payload["stage"] == "outcome_fit"
        assert "F test" in payload["message"] and "f-test" in payload["message"]

    def test_negative_variance_is_numerical(self, capsys, files):
        # Seed 0 at reliability 1 gives a negative estimated error variance.
        path = files["root"] / "error_free.csv"
        generate_dataset(DgpSpec(n=1000, reliability=1.0, seed=0)).dataset.to_csv(path)
        code, _, err = run(capsys, ["fit-mediation", "--data", str(path), *MEDIATION_ARGS,
                                    "--pipeline", "GMMZ_IVY", "--inference", "none"])
        assert code == 2 and json.loads(err.splitlines()[-1])["error"] == "NegativeVarianceError"


class TestConfig:
    def test_toml_config_with_flag_override(self, capsys, files):
        cfg = files["root"] / "run.toml"
        cfg.write_text(f'data = "{files["outcome"]}"\noutcome = "Y"\n'
                       'error-prone = "C1"\nexposure = "Z"\nbuilder = "simple"\n'
                       's_terms = ["Z^2"]\nweak_threshold = 5.0\n')
        doc = run_json(capsys, ["fit-outcome", "--config", str(cfg)])
        assert doc["config"]["builder"] == "simple"
        assert doc["config"]["weak_threshold"] == 5.0
        doc = run_json(capsys, ["fit-outcome", "--config", str(cfg),
                                "--weak-threshold", "20"])
        assert doc["config"]["weak_threshold"] == 20.0
        assert doc["config"]["error_prone"] == ["C1"]

    def test_json_config(self, capsys, files):
        cfg = files["root"] / "run.json"
        cfg.write_text(json.dumps({"grid": "quick", "R": 2, "seed": 4,
                                   "pipeline": ["NAIVE"]}))
        doc = run_json(capsys, ["simulate", "--config", str(cfg)])
        assert doc["result"]["seed"] == 4
        doc = run_json(capsys, ["simulate", "--config", str(cfg), "--seed", "5"])
        assert doc["result"]["seed"] == 5

    def test_grid_file(self, capsys, files):
        grid = files["root"] / "grid.toml"
        grid.write_text('reliabilities = [0.9]\nn = 200\npipelines = ["NAIVE"]\n')
        doc = run_json(capsys, ["simulate", "--grid", str(grid), "--R", "2", "--seed", "1"])
        assert doc["result"]["grid"]["reliabilities"] == [0.9]

    def test_unknown_config_key(self, capsys, files):
        cfg = files["root"] / "bad.json"
        cfg.write_text(json.dumps({"seed": 1, "colour": "red"}))
        code, _, err = run(capsys, ["simulate", "--config", str(cfg)])
        assert code == 1 and "colour" in err

    def test_unparsable_config(self, capsys, files):
        cfg = files["root"] / "broken.toml"
        cfg.write_text("seed = = 1\n")
        code, _, _ = run(capsys, ["simulate", "--config", str(cfg)])
        assert code == 1
