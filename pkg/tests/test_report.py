import json

import pytest

from notetraj.report import MetricReport, emit_report, format_mean_std, read_table_csv, render_table


def sample_report():
    rep = MetricReport()
    for fold, (a, b) in enumerate([(0.41, 0.30), (0.43, 0.31), (0.42, 0.29)]):
        for k in (20, 40, 60):
            rep.add("concat", fold, k, a * 20 / k, b + k / 1000)
            rep.add("doctorai", fold, k, a / 2, b / 2)
    return rep


def test_format_mean_std():
    assert format_mean_std(0.425, 0.005) == "0.425(5)"
    assert format_mean_std(0.3, 0.0) == "0.300(0)"
    assert format_mean_std(0.5123, 0.0121) == "0.512(12)"


def test_single_fold_report_shows_zero_std(tmp_path):
    rep = MetricReport()
    rep.add("mean", 0, 20, 0.5, 0.25)
    paths = emit_report(rep, tmp_path)
    text = paths["txt"].read_text()
    assert "0.250(0)" in text and "0.500(0)" in text
    assert len(read_table_csv(paths["csv"])) == 1


def test_emit_report_writes_all_files(tmp_path):
    paths = emit_report(sample_report(), tmp_path)
    for key in ("csv", "txt", "map_plot", "mar_plot", "json"):
        assert paths[key].exists() and paths[key].stat().st_size > 0
    assert paths["map_plot"].read_bytes()[:4] == b"\x89PNG"


def test_csv_round_trip_equals_in_memory(tmp_path):
    rep = sample_report()
    paths = emit_report(rep, tmp_path)
    parsed = read_table_csv(paths["csv"])
    assert set(parsed) == set(rep.models)
    for model in rep.models:
        for k in rep.ks:
            for metric in ("MAP", "MAR"):
                assert parsed[model][(metric, k)] == rep.aggregate(model, k, metric)


def test_json_round_trip(tmp_path):
    rep = sample_report()
    paths = emit_report(rep, tmp_path)
    back = MetricReport.from_dict(json.loads(paths["json"].read_text()))
    assert back.records == rep.records


def test_render_table_layout():
    text = render_table(sample_report())
    lines = text.splitlines()
    assert "K = 20" in lines[0] and "K = 60" in lines[0]
    assert lines[1].split() == ["Model"] + ["MAR", "MAP"] * 3
    assert lines[2].startswith("concat") and lines[3].startswith("doctorai")


def test_aggregate_interval_contains_mean():
    agg = sample_report().aggregate("concat", 20, "MAP")
    assert agg.low <= agg.mean <= agg.high
    assert agg.mean == pytest.approx(0.42)
