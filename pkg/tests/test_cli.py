import json
import subprocess
import sys

import numpy as np
import pytest

from qussteal import blackbox, cli, config, model, rfio
from qussteal.patches import PatchSet


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def pipeline(workdir):
    """simulate -> train-victim -> calibrate -> extract, all through the CLI."""
    d = workdir
    steps = [
        ["simulate", "--machine", "victim", "--phantom", "phantom1", "--frames", 3, "--out", d / "v0.usrf"],
        ["simulate", "--machine", "victim", "--phantom", "phantom2", "--frames", 3, "--out", d / "v1.usrf"],
        ["train-victim", "--data", d / "v0.usrf", d / "v1.usrf", "--epochs", 1, "--min-steps", 0,
         "--out", d / "victim.bin"],
        ["simulate", "--machine", "victim", "--phantom", "calibration", "--calibration", "stable",
         "--frames", 2, "--seed", 5, "--out", d / "cv.usrf"],
        ["simulate", "--machine", "perpetrator", "--phantom", "calibration", "--calibration", "stable",
         "--frames", 2, "--seed", 5, "--out", d / "cp.usrf"],
        ["calibrate", "--victim", d / "cv.usrf", "--perp", d / "cp.usrf", "--out", d / "tf.ustf"],
        ["simulate", "--machine", "perpetrator", "--phantom", "phantom1", "--frames", 1, "--seed", 100,
         "--out", d / "p0.usrf"],
        ["simulate", "--machine", "perpetrator", "--phantom", "phantom2", "--frames", 1, "--seed", 100,
         "--out", d / "p1.usrf"],
        ["extract", "--oracle", d / "victim.bin", "--unlabeled", d / "p0.usrf", d / "p1.usrf",
         "--tf", d / "tf.ustf", "--iterations", 1, "--min-steps", 0, "--out", d / "perp.bin"],
    ]
    for argv in steps:
        code = cli.main([str(a) for a in argv])
        assert code == 0, argv
    return d


class TestPipeline:
    def test_simulate_output(self, pipeline):
        ds = rfio.read_dataset(pipeline / "p0.usrf")
        assert ds.samples.shape == (1, 1300, 128) and ds.fs == 50.0
        assert rfio.read_dataset(pipeline / "v1.usrf").labels.tolist() == [1, 1, 1]

    def test_extract_reports_queries(self, pipeline, capsys):
        code, out, _ = run(capsys, "extract", "--oracle", pipeline / "victim.bin", "--unlabeled",
                           pipeline / "p0.usrf", pipeline / "p1.usrf", "--tf", "identity",
                           "--iterations", 1, "--min-steps", 0, "--out", pipeline / "perp_id.bin")
        assert code == 0 and json.loads(out)["oracle_queries"] == 2 * 81

    def test_evaluate(self, pipeline, capsys):
        code, out, _ = run(capsys, "evaluate", "--model", pipeline / "perp.bin",
                           "--data", pipeline / "p0.usrf", pipeline / "p1.usrf")
        res = json.loads(out)
        assert code == 0 and res["patches"] == 162
        assert 0 <= res["accuracy"] <= 100 and 0 <= res["auc"] <= 1

    def test_evaluate_needs_labels(self, pipeline, capsys):
        code, _, err = run(capsys, "evaluate", "--model", pipeline / "victim.bin", "--data", pipeline / "cv.usrf")
        assert code == cli.EXIT_CODES["format"] and err.startswith("error[format]")

    def test_oracle_score_round_trip(self, pipeline, capsys):
        params = model.load_params(pipeline / "victim.bin")
        x = np.random.default_rng(0).normal(size=(7, 100, 13))
        ps = PatchSet(x, [(i, 0, 0) for i in range(7)], [(0, 0)] * 7, 40.0)
        rfio.write_dataset(rfio.RFDataset.from_patches(ps), pipeline / "q.usrf")
        code, out, _ = run(capsys, "oracle", "score", "--model", pipeline / "victim.bin",
                           "--in", pipeline / "q.usrf", "--out", pipeline / "s.txt")
        assert code == 0 and json.loads(out) == {"scored": 7, "query_count": 7}
        direct = blackbox.Oracle(params).score(rfio.read_dataset(pipeline / "q.usrf").patches())
        assert np.allclose(rfio.read_scores(pipeline / "s.txt"), direct, rtol=1e-8, atol=1e-12)

    def test_oracle_rejects_foreign_geometry(self, pipeline, capsys):
        code, _, err = run(capsys, "oracle", "score", "--model", pipeline / "victim.bin",
                           "--in", pipeline / "p0.usrf", "--out", pipeline / "bad.txt")
        assert code == cli.EXIT_CODES["interface"] and err.startswith("error[interface]")


class TestErrors:
    def test_missing_input(self, tmp_path, capsys):
        code, _, err = run(capsys, "evaluate", "--model", tmp_path / "nope.bin", "--data", tmp_path / "x.usrf")
        assert code == cli.EXIT_CODES["format"] and err.startswith("error[format]:")

    def test_bad_argument_value(self, tmp_path, capsys):
        code, _, err = run(capsys, "simulate", "--frames", 0, "--out", tmp_path / "x.usrf")
        assert code == cli.EXIT_CODES["argument"] and err.startswith("error[argument]:")

    def test_unknown_command_exits_nonzero(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["frobnicate"])
        assert exc.value.code == 2

    def test_bad_config_section(self, tmp_path, capsys):
        (tmp_path / "c.ini").write_text("[nonsense]\nx = 1\n")
        code, _, err = run(capsys, "experiment", "ablation_tf", "--config", tmp_path / "c.ini")
        assert code == cli.EXIT_CODES["configuration"] and err.startswith("error[configuration]:")

    def test_bad_config_value(self, tmp_path, capsys):
        (tmp_path / "c.ini").write_text("[extraction]\nepsilon = lots\n")
        code, _, err = run(capsys, "experiment", "ablation_tf", "--config", tmp_path / "c.ini")
        assert code == cli.EXIT_CODES["configuration"] and "epsilon" in err

    def test_distinct_codes(self):
        assert len(set(cli.EXIT_CODES.values())) == len(cli.EXIT_CODES)
        assert 0 not in cli.EXIT_CODES.values()

    def test_console_script_module(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "qussteal.cli", "simulate", "--frames", "0",
                               "--out", str(tmp_path / "x.usrf")], capture_output=True, text=True)
        assert proc.returncode == 2 and proc.stderr.startswith("error[argument]")


class TestConfig:
    def test_sections_map_to_fields(self, tmp_path):
        (tmp_path / "c.ini").write_text(
            "[harness]\nrepeats = 3\nperp_frames = 20\niterations = 2, 5\n"
            "[calibration]\nsnr = 50\ncalibration_frames = 4\n"
            "[extraction]\nepsilon = 30\n"
            "[model]\nepochs = 4\n"
            "[blackbox]\nlearning_rate = 0.01\n")
        spec = config.experiment_spec("priors_noiserate", config.load(tmp_path / "c.ini"))
        assert (spec.repeats, spec.perp_frames, spec.iterations) == (3, 20, (2, 5))
        assert spec.base.snr == 50.0 and spec.calibration_frames == 4 and spec.base.epsilon == 30.0
        assert spec.base.inner_train.epochs == 4 and spec.victim_train.learning_rate == 0.01
        assert spec.grid == (10, 20, 30)

    def test_defaults_without_file(self):
        assert config.experiment_spec("ablation_tf") == config.experiment_spec("ablation_tf", None)

    def test_unknown_key(self, tmp_path):
        (tmp_path / "c.ini").write_text("[harness]\nrepeatz = 3\n")
        with pytest.raises(Exception, match="repeatz"):
            config.experiment_spec("ablation_tf", config.load(tmp_path / "c.ini"))

    def test_output_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv(config.OUTPUT_ENV, str(tmp_path / "out"))
        assert config.out_path("r.csv") == tmp_path / "out" / "r.csv"
        assert config.out_path(tmp_path / "abs.csv") == tmp_path / "abs.csv"


class TestExperimentCommand:
    def test_writes_reports_under_output_dir(self, tmp_path, monkeypatch, capsys):
        (tmp_path / "c.ini").write_text(
            "[harness]\nrepeats = 1\nvictim_frames = 4\nperp_frames = 4\ncalibration_frames = 2\n"
            "iterations = 1\n[model]\nepochs = 1\nmin_steps = 0\n[blackbox]\nepochs = 1\nmin_steps = 0\n")
        monkeypatch.setenv(config.OUTPUT_ENV, str(tmp_path / "out"))
        code, out, _ = run(capsys, "experiment", "ablation_tf", "--config", tmp_path / "c.ini")
        assert code == 0
        assert (tmp_path / "out" / "ablation_tf.csv").exists() and (tmp_path / "out" / "ablation_tf.json").exists()
        assert out.splitlines()[0].split() == ["cell", "iter=1"]
        code, table, _ = run(capsys, "report", "--in", tmp_path / "out" / "ablation_tf.json")
        assert code == 0 and table == out
        code, csv_text, _ = run(capsys, "report", "--in", tmp_path / "out" / "ablation_tf.json", "--format", "csv")
        assert csv_text == (tmp_path / "out" / "ablation_tf.csv").read_text()
