import json
import math

import pytest

from uqtab.report import CSV_HEADER, ExperimentReport, rows_to_csv, summarize, write_report


def _report():
    rep = ExperimentReport("perturbation", 7, 2, {"factors": [10.0]})
    rep.add_ood("NN", "entropy", "10", [0.6, 0.8])
    rep.add_ood("PPCA", "novelty", "10", [1.0])
    rep.add_mortality("NN", "test", [0.7, float("nan"), 0.9])
    return rep


def test_summarize():
    s = summarize([1.0, 3.0])
    assert s == {"mean": 2.0, "std": math.sqrt(2.0), "n": 2}
    assert summarize([5.0]) == {"mean": 5.0, "n": 1}
    assert summarize([float("nan"), None]) == {"mean": None, "n": 0}
    v = 0.8493150684931507
    assert summarize([v] * 5)["std"] == 0.0


def test_json_round_trip_and_key_order():
    rep = _report()
    text = rep.to_json()
    assert list(json.loads(text)) == ["kind", "master_seed", "n_runs", "config", "groups", "mortality", "ood"]
    back = ExperimentReport.from_json(text)
    assert back.to_json() == text
    assert back.lookup("NN", "entropy", 10)["mean"] == pytest.approx(0.7)
    assert back.mortality_for("NN")["n"] == 2
    with pytest.raises(KeyError):
        back.lookup("NN", "std", "10")


def test_csv_schema():
    text = _report().to_csv()
    lines = text.splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert lines[1].startswith("perturbation,NN,entropy,10,0.7")
    assert lines[2] == "perturbation,PPCA,novelty,10,1.0,,1"
    assert lines[3].startswith("perturbation,NN,mortality_auc,test,0.8")
    assert rows_to_csv([]) == ",".join(CSV_HEADER) + "\n"


def test_write_report(tmp_path):
    js, cs = write_report(_report(), tmp_path)
    assert js.name == "perturbation_seed7.json" and cs.name == "perturbation_seed7.csv"
    assert js.read_text() == _report().to_json()
    assert not [p for p in tmp_path.iterdir() if p.suffix == ".tmp"]


def test_write_report_missing_dir(tmp_path):
    with pytest.raises(NotADirectoryError):
        write_report(_report(), tmp_path / "nope")


def test_nan_never_serialised():
    rep = ExperimentReport("x", 0, 1)
    rep.add_ood("m", "k", "g", [float("nan")])
    assert "NaN" not in rep.to_json()
