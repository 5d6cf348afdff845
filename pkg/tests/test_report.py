import csv
import json

import pytest

from ptnet import metrics as M
from ptnet import report as R

LOG = [
    {"epoch": 1, "L_c": 3.0, "L_d": 0.5, "L_a": 2.0, "lambda_c": 1.0, "lambda_d": 1.0, "lr": 1e-3,
     "lr_slow": 1e-4, "steps": 4, "grad_norm": 2.5},
    {"epoch": 2, "L_c": 2.0, "L_d": 0.4, "L_a": None, "lambda_c": 1.1, "lambda_d": 0.9, "lr": 9e-4,
     "lr_slow": 9e-5, "steps": 4, "grad_norm": 1.5, "val": {"B4": 0.1}},
]


def test_training_report_files(tmp_path):
    paths = R.write_training_report(LOG, tmp_path)
    names = {p.rsplit("/", 1)[-1] for p in paths}
    assert names == {"log.csv", "losses.svg", "losses.png", "loss_weights.svg", "loss_weights.png"}
    for p in paths:
        assert (tmp_path / p.rsplit("/", 1)[-1]).stat().st_size > 0
    rows = list(csv.DictReader(open(tmp_path / "log.csv")))
    assert [r["epoch"] for r in rows] == ["1", "2"]
    assert rows[1]["L_a"] == "" and float(rows[0]["L_c"]) == 3.0
    assert (tmp_path / "losses.svg").read_text().lstrip().startswith("<?xml")


def test_training_report_empty_log(tmp_path):
    assert [p.rsplit("/", 1)[-1] for p in R.write_training_report([], tmp_path)] == ["log.csv"]


def test_read_log_round_trip(tmp_path):
    p = tmp_path / "log.jsonl"
    p.write_text("".join(json.dumps(r) + "\n" for r in LOG) + "\n")
    assert R.read_log(p) == LOG


def _report():
    rep = M.MetricReport(**M.caption_scores([["a", "b"]], [[["a", "b"]]]))
    rep.F1, rep.IoU, rep.type_accuracy = 0.8, 2 / 3, 1.0
    rep.per_sample.append({"id": "0001", "caption": "a b", "change_type": "none",
                           "type_correct": True, "F1": 1.0, "IoU": 1.0, "CIDEr_D": 0.0, "B4": 1.0})
    return rep


def test_eval_report_schema_and_plots(tmp_path):
    paths = R.write_eval_report(_report(), tmp_path, {"split": "test", "n": 1}, plots=True)
    assert {p.rsplit("/", 1)[-1] for p in paths} == {"report.json", "metrics.csv",
                                                    "per_sample.csv", "metrics.svg", "metrics.png"}
    doc = json.loads((tmp_path / "report.json").read_text())
    assert set(doc["metrics"]) == set(R.SUMMARY_KEYS)
    assert doc["split"] == "test" and doc["metrics"]["F1"] == 0.8
    assert doc["metric_params"] == M.METRIC_PARAMS
    rows = {r["metric"]: float(r["value"]) for r in csv.DictReader(open(tmp_path / "metrics.csv"))}
    assert rows["IoU"] == pytest.approx(2 / 3)
    per = list(csv.DictReader(open(tmp_path / "per_sample.csv")))
    assert per[0]["id"] == "0001"


def test_eval_report_is_byte_stable(tmp_path):
    R.write_eval_report(_report(), tmp_path / "a", {"split": "test"})
    R.write_eval_report(_report(), tmp_path / "b", {"split": "test"})
    for name in ("report.json", "metrics.csv", "per_sample.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
