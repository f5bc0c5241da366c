import json
import logging

import numpy as np
import pytest

from dollo.cli import main
from dollo.io import (ParseError, parse_calibrations, parse_trait_matrix, write_calibrations,
                      write_trait_matrix)
from dollo.likelihood import DataError, ObservationModel, TraitMatrix
from dollo.mcmc import ChainTrace
from dollo.tree import CalibrationSet, CladeConstraint, LeafAgeInterval

from .conftest import TEN_TAXA
from .test_analysis import MINIATURE


def test_miniature_matrix_roundtrip(tmp_path):
    path = tmp_path / "m.csv"
    write_trait_matrix(MINIATURE, path)
    back = parse_trait_matrix(path)
    assert back == MINIATURE
    assert back.n_traits == 6
    assert [set(s) for s in back.leaf_sets()] == [set(s) for s in MINIATURE.leaf_sets()]


def test_class_row_roundtrip(tmp_path):
    d = TraitMatrix.from_sets(["A", "B"], [{"A"}, {"A", "B"}], classes=["hand", "foot"])
    path = tmp_path / "m.csv"
    write_trait_matrix(d, path)
    assert parse_trait_matrix(path).classes == ["hand", "foot"]


def test_gap_becomes_absent_with_warning(tmp_path, caplog):
    path = tmp_path / "m.csv"
    path.write_text("taxon,c1,c2\nA,1,?\nB,1,1\n")
    with caplog.at_level(logging.WARNING):
        d = parse_trait_matrix(path)
    assert d.n_gaps == 1
    assert d.presence.tolist() == [[True, True], [False, True]]
    assert "1 missing" in caplog.text


@pytest.mark.parametrize("text, match", [
    ("taxon,c1\nA,2\n", "column 2"),
    ("taxon,c1\nA,1\nA,0\n", "duplicate"),
    ("taxon,c1,c2\nA,1\n", "expected 2"),
    ("", "empty"),
])
def test_matrix_parse_errors(tmp_path, text, match):
    path = tmp_path / "m.csv"
    path.write_text(text)
    with pytest.raises(ParseError, match=match):
        parse_trait_matrix(path)


def test_all_zero_column_rejected_under_noabsent(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("taxon,c1,c2\nA,1,0\nB,0,0\n")
    d = parse_trait_matrix(path)
    with pytest.raises(DataError):
        d.validate(ObservationModel.NOABSENT)


def test_calibration_roundtrip(tmp_path):
    cal = CalibrationSet([CladeConstraint("AB", {"A", "B"}, 700.0, 900.0),
                          CladeConstraint("CD", {"C", "D"}, None, 1200.0)],
                         {"E": LeafAgeInterval("E", 3300.0, 3700.0)})
    path = tmp_path / "cal.txt"
    write_calibrations(cal, path)
    back = parse_calibrations(path, list("ABCDE"))
    assert back.clades == cal.clades and back.leaf_ages == cal.leaf_ages


def test_calibration_parse_errors(tmp_path):
    path = tmp_path / "cal.txt"
    path.write_text("# comment\nAB; A,Z; 1; 2\n")
    with pytest.raises(ParseError, match="unknown taxa"):
        parse_calibrations(path, ["A", "B"])
    path.write_text("AB; A,B; 5; 2\n")
    with pytest.raises(ParseError, match="line 1"):
        parse_calibrations(path)
    path.write_text("A; 5\n")
    with pytest.raises(ParseError):
        parse_calibrations(path)


def test_two_leaf_command(capsys):
    assert main(["two-leaf", "--n1", "3", "--n2", "1", "--n12", "4", "--mu", "1"]) == 0
    assert capsys.readouterr().out.strip() == "0.4055"


def test_two_leaf_curve(tmp_path, capsys):
    out = tmp_path / "curve.tsv"
    assert main(["two-leaf", "--n1", "40", "--n2", "35", "--n12", "120", "--mu", "1e-3",
                 "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# mle:")
    rows = np.array([ln.split("\t") for ln in lines[2:]], dtype=float)
    assert np.trapezoid(rows[:, 2], rows[:, 0]) == pytest.approx(1.0, rel=1e-6)


def test_infer_refuses_without_upper_bound(tmp_path):
    m = tmp_path / "m.csv"
    write_trait_matrix(MINIATURE, m)
    assert main(["infer", "--data", str(m), "--seed", "1", "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o" / "trace.tsv").exists()


def test_invalid_input_exit_code(tmp_path):
    bad = tmp_path / "m.csv"
    bad.write_text("taxon,c1\nA,x\n")
    assert main(["infer", "--data", str(bad), "--seed", "1", "--out", str(tmp_path)]) == 1
    assert main(["simulate", "--tree", TEN_TAXA, "--scenario", "S/Q/U1", "--mu", "1e-3",
                 "--seed", "1", "--out", str(tmp_path)]) == 1


def test_pipeline(tmp_path, capsys):
    sim = tmp_path / "sim"
    assert main(["simulate", "--tree", TEN_TAXA, "--scenario", "S/T/U150", "--mu", "2e-4",
                 "--seed", "3", "--out", str(sim)]) == 0
    truth = json.loads((sim / "truth.json").read_text())
    assert truth["root_age"] == 4000.0
    manifest = json.loads((sim / "manifest.json").read_text())
    assert manifest["command"] == "simulate" and manifest["seed"] == 3

    cal = tmp_path / "cal.txt"
    cal.write_text("AB; A,B; 700; 900\nGH; G,H; 900; 1100\n")
    run = tmp_path / "run"
    assert main(["infer", "--data", str(sim / "matrix.csv"), "--calibrations", str(cal),
                 "--iterations", "4000", "--seed", "2", "--out", str(run)]) == 0
    trace = ChainTrace.read_tsv(run / "trace.tsv")
    assert len(trace) > 10 and trace.meta["obs"] == "NOUNIQUE"
    inputs = json.loads((run / "manifest.json").read_text())["inputs"]
    assert len(inputs) == 2 and all(len(h) == 64 for h in inputs.values())

    summ = tmp_path / "summ"
    assert main(["summarize", "--trace", str(run / "trace.tsv"), "--clades", str(cal),
                 "--out", str(summ)]) == 0
    table = (summ / "clades.tsv").read_text().splitlines()
    assert table[1].startswith("AB\t") and any(r.startswith("root\t") for r in table)
    assert (summ / "consensus.nwk").read_text().strip().endswith(";")

    ppc = tmp_path / "ppc"
    assert main(["ppc", "--trace", str(run / "trace.tsv"), "--data", str(sim / "matrix.csv"),
                 "--reps", "40", "--out", str(ppc)]) == 0
    assert len((ppc / "ppc.tsv").read_text().splitlines()) == 21

    diag = tmp_path / "diag"
    assert main(["diagnose", "--trace", str(run / "trace.tsv"), "--out", str(diag)]) == 0
    assert (diag / "diagnostics.tsv").read_text().startswith("series\tn")
    assert (diag / "acf.tsv").exists()
    assert "acceptance node_age" in capsys.readouterr().out
