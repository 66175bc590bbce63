"""End-to-end checks of the ``nlmemboot`` command, run in-process through ``main``."""
import json
import shutil

import numpy as np
import pytest

from nlmemboot.bootstrap import percentile_ci
from nlmemboot.cli import EXIT_INPUT, EXIT_MISSING, EXIT_OK, main
from nlmemboot.model import sig_emax_spec
from nlmemboot.report import read_bootstrap_csv
from nlmemboot.study import read_table_csv


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    """A simulated rich dataset fitted once with 20 conditional draws per subject."""
    out = tmp_path_factory.mktemp("fitted")
    assert main(["simulate", "--seed", "1", "--out", str(out), "-q"]) == EXIT_OK
    assert main(["fit", "--data", str(out / "data.csv"), "--seed", "7", "--M", "20",
                 "--out", str(out), "-q"]) == EXIT_OK
    return out


def _copy(src, dst):
    shutil.copytree(src, dst)
    return dst


def test_fit_writes_estimates_and_standard_errors(fitted):
    doc = json.loads((fitted / "fit.json").read_text())
    spec = sig_emax_spec()
    assert doc["names"] == list(spec.theta_names)
    assert len(doc["theta"]) == len(doc["se"]) == spec.n_theta
    assert all(np.isfinite(doc["se"]))
    assert (fitted / "conditional.npz").exists()


def test_fit_is_reproducible_for_a_fixed_seed(fitted, tmp_path):
    args = ["fit", "--data", str(fitted / "data.csv"), "--seed", "7", "--M", "20", "-q"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    assert (tmp_path / "a" / "fit.json").read_bytes() == (tmp_path / "b" / "fit.json").read_bytes()
    assert (tmp_path / "a" / "fit.json").read_bytes() == (fitted / "fit.json").read_bytes()


def test_non_numeric_response_names_the_row(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("id,x,y\n1,0,3.1\n1,100,abc\n")
    assert main(["fit", "--data", str(bad), "--out", str(tmp_path / "o")]) == EXIT_INPUT
    err = capsys.readouterr().err
    assert "row 3" in err and "abc" in err


def test_missing_data_file_is_an_input_error(tmp_path):
    assert main(["fit", "--data", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == EXIT_INPUT


def test_case_bootstrap_writes_one_row_per_replicate(fitted, tmp_path):
    out = _copy(fitted, tmp_path / "run")
    assert main(["bootstrap", "--scheme", "case", "--B", "10", "--out", str(out), "-q"]) == EXIT_OK
    names, status, values = read_bootstrap_csv((out / "bootstrap_case.csv").read_text())
    assert len(status) == 10 and values.shape == (10, len(names))


def test_summary_intervals_match_the_replicate_table(fitted, tmp_path):
    # The CSV carries 6 significant digits, so the recomputed interval agrees to that precision.
    out = _copy(fitted, tmp_path / "run")
    assert main(["bootstrap", "--scheme", "par", "--B", "10", "--out", str(out), "-q"]) == EXIT_OK
    names, _, values = read_bootstrap_csv((out / "bootstrap_par.csv").read_text())
    summary = json.loads((out / "bootstrap_par_summary.json").read_text())
    for j, name in enumerate(names):
        lo, hi = percentile_ci(values[:, j], 0.1)
        np.testing.assert_allclose(summary["parameters"][name]["ci90"], [lo, hi], rtol=1e-5)


def test_cnp_bootstrap_uses_stored_conditional_draws(fitted, tmp_path):
    out = _copy(fitted, tmp_path / "run")
    assert main(["bootstrap", "--scheme", "cnp", "--B", "3", "--M", "20", "--out", str(out), "-q"]) == EXIT_OK
    summary = json.loads((out / "bootstrap_cnp_summary.json").read_text())
    assert summary["config"]["M"] == 20 and summary["n_success"] == 3


def test_cnp_without_conditional_draws_is_a_missing_prerequisite(fitted, tmp_path, capsys):
    out = tmp_path / "nocond"
    assert main(["fit", "--data", str(fitted / "data.csv"), "--no-conditional", "--out", str(out), "-q"]) == EXIT_OK
    assert main(["bootstrap", "--scheme", "cnp", "--B", "2", "--out", str(out)]) == EXIT_MISSING
    assert "without --no-conditional" in capsys.readouterr().err


def test_bootstrap_without_fit_is_a_missing_prerequisite(tmp_path, capsys):
    assert main(["bootstrap", "--scheme", "case", "--B", "2", "--out", str(tmp_path)]) == EXIT_MISSING
    assert "nlmemboot fit" in capsys.readouterr().err


def test_output_directory_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("NLMEMBOOT_OUT", str(tmp_path / "env"))
    assert main(["simulate", "--seed", "1", "-q"]) == EXIT_OK
    assert main(["simulate", "--seed", "1", "--out", str(tmp_path / "flag"), "-q"]) == EXIT_OK
    assert (tmp_path / "env" / "data.csv").read_bytes() == (tmp_path / "flag" / "data.csv").read_bytes()


def test_unknown_scenario_lists_the_catalog(tmp_path, capsys):
    assert main(["study", "--scenario", "nope", "--out", str(tmp_path)]) == EXIT_INPUT
    err = capsys.readouterr().err
    assert "rich_emax" in err and "sparse_hill" in err


def test_bad_arguments_exit_with_input_code(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["bootstrap", "--scheme", "jackknife", "--out", str(tmp_path)])
    assert exc.value.code == EXIT_INPUT
    with pytest.raises(SystemExit) as exc:
        main(["study", "--alpha", "1.5", "--out", str(tmp_path)])
    assert exc.value.code == EXIT_INPUT


def test_small_study_and_report(tmp_path):
    out = tmp_path / "study"
    assert main(["study", "--scenario", "rich_emax", "--K", "2", "--B", "2", "--M", "10",
                 "--out", str(out), "-q"]) == EXIT_OK
    cov = read_table_csv((out / "coverage.csv").read_text())
    bias = read_table_csv((out / "bias.csv").read_text())
    assert {r["method"] for r in cov} == {"Asymptotic", "Case", "Par", "NP", "CNP"}
    assert {r["alpha"] for r in cov} == {0.1, 0.05}
    assert len(bias) == 5 * 9
    svg = out / "coverage_rich_emax_alpha0.1.svg"
    first = svg.read_text()
    assert first.count('class="series"') == 5
    svg.unlink()
    assert main(["report", "--in", str(out), "-q"]) == EXIT_OK
    assert svg.read_text() == first


def test_report_without_study_is_a_missing_prerequisite(tmp_path):
    assert main(["report", "--in", str(tmp_path)]) == EXIT_MISSING
