import json
import shutil

import pytest

from acceptance_support import cli_pipeline, output_bytes
from rtworkflow.cli import build_parser, main

EXPECTED = {
    "gen-design": ["design.csv", "design.json", "data.csv", "truth.json"],
    "prior-predict": ["prior_predictive_statistics.csv", "prior_predictive_histogram_band.csv",
                      "prior_predictive.json", "prior_predictive.svg"],
    "fit": ["draws.csv", "draws.csv.json", "fixed_effects.csv", "fit.json", "mapping.csv"],
    "sbc": ["sbc_ranks.csv", "sbc_summary.json", "sbc_beta1.svg"],
    "sensitivity": ["sensitivity.csv", "sensitivity_summary.json"],
    "ppc": ["ppc_statistics.csv", "ppc_histogram_band.csv", "ppc.json", "ppc.svg"],
    "bf": ["bf.json"],
    "report": ["report.json", "report.md"],
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    run = root / "run"
    codes = cli_pipeline(run)
    first = output_bytes(run)
    shutil.copytree(run, root / "first")
    shutil.rmtree(run)
    codes_again = cli_pipeline(run)
    return run, codes, codes_again, first, output_bytes(run)


def test_every_subcommand_succeeds(pipeline):
    run, codes, codes_again, _, _ = pipeline
    assert codes == {k: 0 for k in EXPECTED}
    assert codes_again == codes
    for cmd, files in EXPECTED.items():
        for f in files:
            assert (run / f).exists(), (cmd, f)


def test_outputs_are_byte_identical_across_runs(pipeline):
    _, _, _, first, second = pipeline
    assert first.keys() == second.keys()
    assert len(first) >= 15
    for name in first:
        assert first[name] == second[name], name


def test_fit_table_and_probability(pipeline, capsys):
    run = pipeline[0]
    fit = json.loads((run / "fit.json").read_text())
    assert 0.0 <= fit["p_beta1_negative"] <= 1.0
    assert [r["term"] for r in fit["fixed_effects"]] == ["Intercept", "so"]
    header = (run / "fixed_effects.csv").read_text().splitlines()[0]
    for col in ("Estimate", "Est.Error", "Q2.5", "Q97.5"):
        assert col in header


def test_report_follows_stage_order(pipeline):
    text = (pipeline[0] / "report.md").read_text()
    heads = [line[3:] for line in text.splitlines() if line.startswith("## ")]
    assert heads == ["prior_predictive", "sbc", "sensitivity", "fit", "ppc", "bf"]


def test_sbc_output_columns(pipeline):
    lines = (pipeline[0] / "sbc_ranks.csv").read_text().splitlines()
    assert lines[0] == "sim_index,parameter,true_value,rank,excluded_flag"
    assert len(lines) == 1 + 4


def test_parallel_ensemble_matches_serial(tmp_path):
    argv = ["sbc", "--seed", "3", "--subjects", "6", "--items", "4", "--iter", "300", "--chains", "2",
            "--n-sims", "3"]
    assert main(argv + ["--out", str(tmp_path / "a"), "--jobs", "1"]) == 0
    assert main(argv + ["--out", str(tmp_path / "b"), "--jobs", "2"]) == 0
    a = (tmp_path / "a" / "sbc_ranks.csv").read_bytes()
    assert a == (tmp_path / "b" / "sbc_ranks.csv").read_bytes()


@pytest.mark.parametrize("argv,needle", [
    (["fit"], "needs data"),
    (["fit", "--data", "missing.csv"], "does not exist"),
    (["prior-predict", "--prior", "flat"], "unknown prior"),
    (["sbc", "--iter", "100", "--warmup", "200"], "warmup"),
    (["report"], "no stage outputs"),
])
def test_errors_exit_nonzero_with_a_message(tmp_path, capsys, argv, needle):
    assert main(argv + ["--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and needle in err


def test_bad_data_file_reports_line(tmp_path, capsys):
    p = tmp_path / "d.csv"
    p.write_text("subj,item,so,rt\n1,1,0,300\n")
    assert main(["fit", "--data", str(p), "--out", str(tmp_path)]) == 1
    assert "line 2" in capsys.readouterr().err


def test_help_lists_every_subcommand():
    text = build_parser().format_help()
    for cmd in EXPECTED:
        assert cmd in text
