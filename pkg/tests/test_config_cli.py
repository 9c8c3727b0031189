import json
from pathlib import Path

import pytest

from locood import cli, harness, report
from locood.config import REFERENCE_CONFIG, load_config, parse_config
from locood.errors import ConfigError
from locood.harness import ResultRow

TINY = """
[experiment]
methods = softmax, energy, ddu
ood_classes = 2, 3
master_seed = 5

[scorers]
mc_passes = 5

[extractor]
hidden1_dim = 16
embed_dim = 8
max_epochs = 15

[synth]
n_subjects = 2
trials_per_class = 16
n_channels = 2
n_samples = 4
"""

FIXTURE = [0.91, 0.55, 0.73, 0.62, 0.88, 0.47, 0.69, 0.81, 0.58, 0.77,
           0.64, 0.95, 0.52, 0.71, 0.86, 0.60, 0.79, 0.66, 0.84, 0.50]


def write(tmp_path, text, name="cfg.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def rows_for(values, method="softmax", react=False):
    return [ResultRow(f"S{i:02d}", "c0", "c1+c2", method, react, v, 0.9, 1)
            for i, v in enumerate(values)]


class TestConfig:
    def test_reference_config_matches_defaults(self):
        cfg = load_config(REFERENCE_CONFIG)
        default = harness.ExperimentConfig()
        assert cfg.experiment.methods == default.methods
        assert cfg.experiment.scorer == default.scorer
        assert cfg.experiment.duq_search == default.duq_search
        assert cfg.experiment.duq_training == default.duq_training
        assert cfg.synth is not None and cfg.n_subjects == 4

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="mc_pases"):
            parse_config("[scorers]\nmc_pases = 3\n")
        with pytest.raises(ConfigError, match="unknown section"):
            parse_config("[scorer]\nmc_passes = 3\n")

    def test_invalid_mode_names_key(self):
        with pytest.raises(ConfigError, match=r"\[synth\].*mode"):
            parse_config("[synth]\nmode = fourier\n")
        with pytest.raises(ConfigError, match="react"):
            parse_config("[experiment]\nreact = sometimes\n")
        with pytest.raises(ConfigError, match="methods"):
            parse_config("[experiment]\nmethods = softmax, odin\n")

    def test_typed_values(self):
        cfg = parse_config("[experiment]\nreact_limit = inf\nood_classes = 0, 3\n"
                           "id_class_count = 2\n[duq_search]\ncentroid_sizes = 32\n")
        assert cfg.experiment.react_limit_override == float("inf")
        assert cfg.experiment.ood_classes == (0, 3)
        assert cfg.experiment.id_class_count == 2
        assert cfg.experiment.duq_search.centroid_sizes == (32,)
        with pytest.raises(ConfigError, match="master_seed"):
            parse_config("[experiment]\nmaster_seed = x\n")

    def test_seed_override(self, tmp_path):
        cfg = load_config(write(tmp_path, TINY)).with_seed(99)
        assert cfg.experiment.master_seed == 99 and cfg.synth.seed == 99

    def test_exclusive_sources(self):
        with pytest.raises(ConfigError):
            parse_config("[run]\ndata = a\n[synth]\nn_subjects = 2\n")


class TestCommands:
    def test_synth_writes_directories(self, tmp_path, capsys):
        cfg = write(tmp_path, TINY.replace("n_subjects = 2", "n_subjects = 4"))
        assert cli.main(["synth", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
        assert cli.main(["synth", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
        dirs = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert dirs == ["S0", "S1", "S2", "S3"]
        for d in dirs:
            for f in ("manifest.json", "epochs.f32", "labels.u32"):
                assert (tmp_path / "a" / d / f).read_bytes() == (tmp_path / "b" / d / f).read_bytes()

    def test_run_and_report(self, tmp_path, capsys):
        cfg = write(tmp_path, TINY)
        out = tmp_path / "out"
        assert cli.main(["run", "--config", cfg, "--out", str(out), "--jobs", "1"]) == 0
        lines = (out / "results.csv").read_text().splitlines()
        assert lines[0] == ",".join(report.RESULTS_HEADER)
        assert len(lines) - 1 == 2 * 2 * 3  # both subjects kept: no tuned method
        summary = json.loads((out / "summary.json").read_text())
        assert {e["method"] for e in summary["methods"]} == {"softmax", "energy", "ddu"}
        for key in ("median", "iqr", "rho_correlation", "p_correlation", "median_by_ood_class"):
            assert key in summary["methods"][0]
        capsys.readouterr()
        assert cli.main(["report", str(out / "results.csv"), "--format", "json", "--by-class"]) == 0
        rendered = json.loads(capsys.readouterr().out)
        assert len(rendered["table"]) == 3
        assert set(rendered["tests"]["by_class"]) == {"softmax", "energy", "ddu"}
        assert all("p_holm" in t for t in rendered["tests"]["by_class"].values())

    def test_react_both_doubles_rows(self, tmp_path):
        off = tmp_path / "off"
        both = tmp_path / "both"
        assert cli.main(["run", "--config", write(tmp_path, TINY), "--out", str(off),
                         "--jobs", "1"]) == 0
        text = TINY.replace("master_seed = 5", "master_seed = 5\nreact = both")
        assert cli.main(["run", "--config", write(tmp_path, text, "b.ini"), "--out", str(both),
                         "--jobs", "1"]) == 0
        n_off = len(report.read_results_csv(off / "results.csv"))
        assert len(report.read_results_csv(both / "results.csv")) == 2 * n_off

    def test_run_from_disk_with_tuning(self, tmp_path):
        cfg = write(tmp_path, TINY.replace("softmax, energy, ddu", "dknn").replace(
            "ood_classes = 2, 3", "ood_classes = 3"))
        data = tmp_path / "data"
        assert cli.main(["synth", "--config", cfg, "--out", str(data)]) == 0
        out = tmp_path / "out"
        assert cli.main(["run", "--config", cfg, "--data", str(data), "--out", str(out),
                         "--jobs", "1"]) == 0
        rows = report.read_results_csv(out / "results.csv")
        assert {r.subject for r in rows} == {"S1"}
        tuned = json.loads((out / "tuned.json").read_text())
        assert list(tuned["dknn_k"]) == ["3:0,1,2"]
        out2 = tmp_path / "out2"
        assert cli.main(["run", "--config", cfg, "--data", str(data), "--out", str(out2),
                         "--jobs", "1", "--tuned", str(out / "tuned.json")]) == 0
        assert (out / "results.csv").read_bytes() == (out2 / "results.csv").read_bytes()

    def test_exit_codes(self, tmp_path, monkeypatch, capsys):
        bad = write(tmp_path, "[scorers]\nnope = 1\n", "bad.ini")
        assert cli.main(["run", "--config", bad, "--out", str(tmp_path)]) == cli.EXIT_CONFIG
        assert cli.main(["run", "--config", str(tmp_path / "missing.ini")]) == cli.EXIT_CONFIG
        cfg = write(tmp_path, TINY)
        assert cli.main(["run", "--config", cfg, "--data", str(tmp_path / "none"),
                         "--out", str(tmp_path / "o")]) == cli.EXIT_DATA

        def explode(*args, **kwargs):
            raise RuntimeError("no")

        monkeypatch.setattr(harness, "run_cell", explode)
        out = tmp_path / "fail"
        assert cli.main(["run", "--config", cfg, "--out", str(out), "--jobs", "1"]) == cli.EXIT_RUN
        assert json.loads((out / "summary.json").read_text())["failures"]


class TestReport:
    def test_parse_error_has_line_number(self, tmp_path, capsys):
        path = tmp_path / "results.csv"
        report.write_results_csv(rows_for([0.5, 0.6]), path)
        text = path.read_text().splitlines()
        text[2] = text[2].replace("0.6", "zero-point-six")
        path.write_text("\n".join(text) + "\n")
        with pytest.raises(report.ResultsParseError) as info:
            report.read_results_csv(path)
        assert info.value.line == 3
        assert cli.main(["report", str(path)]) == cli.EXIT_DATA
        assert ":3:" in capsys.readouterr().err

    def test_single_method_one_row(self):
        rep = report.build_report(rows_for([0.5, 0.6, 0.7]))
        assert len(rep["table"]) == 1

    def test_identical_react_columns(self):
        rows = rows_for(FIXTURE) + rows_for(FIXTURE, react=True)
        rep = report.build_report(rows, react=True)
        assert rep["tests"]["react"]["softmax"]["p"] == 1.0
        assert rep["table"][0]["p_react"] == 1.0

    def test_fixture_median_iqr(self, tmp_path):
        # spreadsheet QUARTILE.INC on the 20 fixture values: 0.595, 0.7, 0.8175
        path = tmp_path / "r.csv"
        report.write_results_csv(rows_for(FIXTURE), path)
        entry = report.summarize(report.read_results_csv(path))["methods"][0]
        assert entry["median"] == pytest.approx(0.7, abs=1e-12)
        assert entry["q1"] == pytest.approx(0.595, abs=1e-12)
        assert entry["q3"] == pytest.approx(0.8175, abs=1e-12)
        assert entry["iqr"] == pytest.approx(0.2225, abs=1e-12)

    def test_round_trip_and_sorting(self, tmp_path):
        rows = rows_for([0.25, 1 / 3])[::-1]
        path = tmp_path / "r.csv"
        report.write_results_csv(rows, path)
        back = report.read_results_csv(path)
        assert [r.auroc for r in back] == [0.25, 1 / 3]

    def test_compare_id_classes_and_formats(self):
        rows = rows_for([0.6, 0.7, 0.8, 0.9, 0.65])
        two = [ResultRow(r.subject, r.ood_class, "c1", r.method, False, r.auroc - 0.2, 0.8, 1)
               for r in rows]
        for r in two:
            r.id_classes = "c1+c2"
        three = [ResultRow(r.subject, r.ood_class, "c1+c2+c3", r.method, False, r.auroc, 0.8, 1)
                 for r in rows]
        rep = report.build_report(two + three, id_classes=True)
        test = rep["tests"]["id_classes"]["softmax"]
        assert test["n_3_id"] == 5 and test["n_2_id"] == 5
        assert 0 <= test["p"] <= 1
        md = report.render_report(rep, "md")
        assert md.startswith("| method |")
        assert report.render_report(rep, "csv").splitlines()[0].startswith("method,")


def test_parser_lists_subcommands():
    parser = cli.build_parser()
    with pytest.raises(SystemExit):
        parser.parse_args(["frobnicate"])
    args = parser.parse_args(["run", "--config", "x", "--data", "a", "--data", "b", "--jobs", "3"])
    assert args.data == ["a", "b"] and args.jobs == 3
    assert Path(REFERENCE_CONFIG).exists()
