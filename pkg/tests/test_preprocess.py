import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from notetraj.errors import MappingError
from notetraj.preprocess import (
    CodeMappingTable,
    build_cohort,
    build_pairs,
    load_mapping_dir,
    map_codes,
    normalize_note_text,
    prune_infrequent,
    run_pipeline,
    target_ordering,
)
from notetraj.records import PatientRecord, Visit
from notetraj.synth import CohortGenerator, GeneratorConfig, mapping_table, write_mapping_tables

from normalization_cases import NORMALIZATION_CASES
from oracles import brute_pipeline, fold_text


@pytest.mark.parametrize("raw,expected", NORMALIZATION_CASES)
def test_normalization_table(raw, expected):
    assert normalize_note_text(raw) == expected


def test_normalization_table_size():
    assert len(NORMALIZATION_CASES) >= 50


@settings(max_examples=300, deadline=None)
@given(st.text(alphabet=st.sampled_from(list("abhrsxyo/()., æøåÆØÅéüñ ﬁ0123456789\n")), max_size=40))
def test_normalization_idempotent_and_folded(text):
    once = normalize_note_text(text)
    assert normalize_note_text(once) == once
    assert once == once.lower()
    assert fold_text(once) == once


def v(t, dx=(), px=(), rx=(), note=""):
    return Visit(t, frozenset(dx), frozenset(px), frozenset(rx), note)


def test_build_cohort_filters_and_sorts():
    records = [
        PatientRecord("one", [v(1, ["D1"], ["P1"], ["M1"])]),
        PatientRecord("nodrug", [v(1, ["D1"], ["P1"]), v(2, ["D1"], ["P1"]), v(3, ["D2"])]),
        PatientRecord("ok", [v(9, ["D2"], [], ["M1"]), v(3, ["D1"], ["P1"], [])]),
    ]
    cohort = build_cohort(records)
    assert [p.patient_id for p in cohort.patients] == ["ok"]
    assert [x.timestamp for x in cohort.patients[0].visits] == [3, 9]
    assert build_cohort(records[:2]).patients == []


def test_map_codes_collapses_and_errors():
    rec = PatientRecord("a", [v(1, ["D12", "D13"], ["P1"], ["M9"]), v(2, ["D12"], ["P1"], ["M9"])])
    cohort = build_cohort([rec])
    tables = [
        CodeMappingTable("diagnosis", {"D12": "C5", "D13": "C5"}),
        CodeMappingTable("procedure", {"P1": "Q1"}),
    ]
    mapped = map_codes(cohort, tables)
    assert mapped.patients[0].visits[0].diagnoses == frozenset({"C5"})
    assert mapped.patients[0].visits[0].drugs == frozenset({"M9"})
    identity = [CodeMappingTable("diagnosis", {"D12": "D12", "D13": "D13"}), CodeMappingTable("procedure", {"P1": "P1"})]
    assert map_codes(cohort, identity).patients == cohort.patients
    with pytest.raises(MappingError, match="D13"):
        map_codes(cohort, [CodeMappingTable("diagnosis", {"D12": "C5"})])


def _boundary_records():
    # D4 occurs in 4 visits, D5 in 5 visits
    recs = []
    for i in range(5):
        dx = ["D5"] + (["D4"] if i < 4 else [])
        recs.append(PatientRecord(f"p{i}", [v(1, dx, ["P"], ["M"]), v(2, ["D5" if i == 0 else "DX"], ["P"], ["M"])]))
    return recs


def test_prune_threshold_boundary():
    cohort = build_cohort(_boundary_records())
    pruned = prune_infrequent(cohort, 5)
    assert "D4" not in pruned.vocabularies["diagnosis"]
    assert "D5" in pruned.vocabularies["diagnosis"]
    assert prune_infrequent(cohort, 0).patients == cohort.patients


def test_build_pairs_counts_and_empty_targets():
    rec5 = PatientRecord("five", [v(t, ["D1"], ["P"], ["M"]) for t in range(5)])
    gap = PatientRecord("gap", [v(0, ["D1"], ["P"], ["M"]), v(1, ["D1"]), v(2, [], ["P"]), v(3, ["D1"])])
    two = PatientRecord("two", [v(0, ["D1"], ["P"], ["M"]), v(1, ["D2"])])
    pairs = build_pairs(build_cohort([rec5, gap, two]))
    by = {}
    for p in pairs:
        by.setdefault(p.patient_id, []).append(p)
    assert len(by["five"]) == 4 and len(by["two"]) == 1
    assert [p.pair_id for p in by["gap"]] == ["gap:1", "gap:3"]
    for p in pairs:
        assert p.source_visits and p.target_codes
        assert p.target_timestamp > p.source_visits[-1].timestamp


def test_max_source_visits_keeps_most_recent():
    rec = PatientRecord("a", [v(t, ["D1"], ["P"], ["M"]) for t in range(10)])
    pairs = build_pairs(build_cohort([rec]), max_source_visits=3)
    assert [x.timestamp for x in pairs[-1].source_visits] == [6, 7, 8]
    single = build_pairs(build_cohort([rec]), mode="single")
    assert all(len(p.source_visits) == 1 for p in single)


def test_target_ordering_rule():
    from collections import Counter

    assert target_ordering({"rare", "common"}, Counter(common=5, rare=1)) == ["common", "rare"]
    assert target_ordering({"c2", "c10"}, Counter(c2=3, c10=3)) == ["c10", "c2"]


def test_pipeline_matches_brute_force(tmp_path):
    gen = CohortGenerator(GeneratorConfig(seed=21, n_patients=200))
    records = gen.generate()
    write_mapping_tables(gen, tmp_path, ratio=3)
    tables = load_mapping_dir(tmp_path)
    result = run_pipeline(records, tables, threshold=5, max_source_visits=16)
    mapping = {t.code_type: t.entries for t in tables}
    pids, vocab, pairs = brute_pipeline(records, mapping, 5, 16)
    assert [p.patient_id for p in result.cohort.patients] == pids
    assert result.cohort.vocabularies == vocab
    got = [
        (p.pair_id, p.patient_id, tuple(x.timestamp for x in p.source_visits), tuple(p.target_codes), p.target_timestamp)
        for p in result.pairs
    ]
    assert got == pairs


def test_three_to_one_mapping_shrinks_vocabulary(tmp_path):
    gen = CohortGenerator(GeneratorConfig(seed=4, n_patients=300))
    records = gen.generate()
    write_mapping_tables(gen, tmp_path, ratio=3)
    tables = load_mapping_dir(tmp_path)
    cohort = build_cohort(records)
    raw = {c for p in cohort.patients for x in p.visits for c in x.diagnoses}
    mapped = map_codes(cohort, tables)
    cats = {c for p in mapped.patients for x in p.visits for c in x.diagnoses}
    table = {t.code_type: t.entries for t in tables}["diagnosis"]
    assert cats == {table[c] for c in raw}
    assert 2.0 < len(raw) / len(cats) <= 3.0


def test_mapping_table_helper_is_many_to_one():
    table = mapping_table([f"D{i}" for i in range(7)], 3, "C")
    assert len(set(table.values())) == 3


def test_missing_mapping_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_mapping_dir(tmp_path)


def test_pipeline_invariants(tmp_path):
    gen = CohortGenerator(GeneratorConfig(seed=5, n_patients=300))
    write_mapping_tables(gen, tmp_path)
    result = run_pipeline(gen.generate(), load_mapping_dir(tmp_path))
    freq = result.cohort.frequencies("diagnosis")
    assert min(freq.values()) >= 5
    vocab = set(result.cohort.vocabularies["diagnosis"])
    assert all(set(p.target_codes) <= vocab for p in result.pairs)
    assert all(normalize_note_text(x.note) == x.note for p in result.pairs for x in p.source_visits)
