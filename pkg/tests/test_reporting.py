import json
import os

import numpy as np
import pytest

from qshrink.errors import SchemaError
from qshrink.reporting import emit_report, load_report, render
from qshrink.simlab import PMAD_COLUMNS, ExperimentReport


def _pmad_report():
    rows = [
        {"tau": 0.25, "estimator": "FM", "case": 1, "gamma": 0.1, "mean": 0.335, "se": 0.012},
        {"tau": 0.25, "estimator": "SM", "case": 1, "gamma": 0.1, "mean": np.float64(0.106), "se": 0.004},
        {"tau": None, "estimator": "LSE", "case": 1, "gamma": 0.1, "mean": 1 / 3, "se": float("nan")},
    ]
    return ExperimentReport(PMAD_COLUMNS, rows, {"seed": 1, "grid": (0.0, 1.0), "flag": np.bool_(True)})


def test_empty_report_header_only_csv():
    assert render(ExperimentReport(("a", "b"), []), "csv") == "a,b\n"


def test_pmad_csv_columns():
    lines = render(_pmad_report(), "csv").splitlines()
    assert lines[0] == "tau,estimator,case,gamma,mean,se"
    assert lines[2] == "0.25,SM,1,0.1,0.106,0.004"
    assert lines[3].startswith(",LSE,1,0.1,0.3333333333333333,")


def test_table_is_aligned():
    lines = render(_pmad_report(), "table").splitlines()
    assert len({len(s) for s in lines}) == 1


@pytest.mark.parametrize("fmt", ["csv", "table", "json"])
def test_byte_stable(tmp_path, fmt):
    a = emit_report(_pmad_report(), fmt, tmp_path / f"a.{fmt}")
    b = emit_report(_pmad_report(), fmt, tmp_path / f"b.{fmt}")
    assert a.read_bytes() == b.read_bytes()


def test_json_round_trip(tmp_path):
    rep = _pmad_report()
    back = load_report(emit_report(rep, "json", tmp_path / "r.json"))
    assert back == rep
    assert render(back, "json") == render(rep, "json")


def test_directory_target(tmp_path):
    assert emit_report(_pmad_report(), "csv", tmp_path).name == "report.csv"


def test_unknown_format():
    with pytest.raises(SchemaError):
        render(_pmad_report(), "xlsx")


def test_load_rejects_garbage(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("not json")
    with pytest.raises(SchemaError):
        load_report(p)
    p.write_text(json.dumps({"rows": []}))
    with pytest.raises(SchemaError):
        load_report(p)


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        emit_report(_pmad_report(), "csv", tmp_path / "missing" / "r.csv")
    if os.geteuid() != 0:
        ro = tmp_path / "ro"
        ro.mkdir()
        ro.chmod(0o500)
        with pytest.raises(OSError):
            emit_report(_pmad_report(), "csv", ro / "r.csv")
