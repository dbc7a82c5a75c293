"""Cohort preprocessing: filtering, code mapping, pruning, note cleanup, pair building.

Pipeline order is ``build_cohort -> map_codes -> prune_infrequent -> build_pairs``.
Mapping happens before pruning so that frequency thresholds act on the
mapped categories (the label space the models predict).
"""

from __future__ import annotations

import csv
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import InputError, MappingError
from .records import CODE_FIELDS, CODE_TYPES, PatientRecord, TrajectoryPair

MAPPED_TYPES = ("diagnosis", "procedure")


@dataclass
class CodeMappingTable:
    code_type: str
    entries: dict[str, str]

    def __post_init__(self):
        if self.code_type not in MAPPED_TYPES:
            raise InputError(f"mapping tables exist for {MAPPED_TYPES}, got {self.code_type!r}")

    @classmethod
    def read_csv(cls, path: str | Path, code_type: str) -> "CodeMappingTable":
        entries = {}
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                entries[row["source_code"]] = row["category"]
        return cls(code_type, entries)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["source_code", "category"])
            for src in sorted(self.entries):
                w.writerow([src, self.entries[src]])


def load_mapping_dir(mapping_dir: str | Path) -> list[CodeMappingTable]:
    """Read ``diagnosis.csv`` and ``procedure.csv`` from a directory."""
    mapping_dir = Path(mapping_dir)
    tables = []
    for ct in MAPPED_TYPES:
        path = mapping_dir / f"{ct}.csv"
        if not path.is_file():
            raise FileNotFoundError(f"missing mapping table {path}")
        tables.append(CodeMappingTable.read_csv(path, ct))
    return tables


@dataclass
class Cohort:
    patients: list[PatientRecord]
    vocabularies: dict[str, list[str]]
    provenance: list[dict] = field(default_factory=list)

    def frequencies(self, code_type: str) -> Counter:
        return code_frequencies(self.patients, code_type)


def code_frequencies(patients: list[PatientRecord], code_type: str) -> Counter:
    """Number of visits each code occurs in (codes are sets within a visit)."""
    counts: Counter = Counter()
    for p in patients:
        for v in p.visits:
            counts.update(v.codes(code_type))
    return counts


def ordered_vocabulary(counts: Counter) -> list[str]:
    """Descending frequency, ties broken lexicographically."""
    return sorted(counts, key=lambda c: (-counts[c], c))


def _vocabularies(patients: list[PatientRecord]) -> dict[str, list[str]]:
    return {ct: ordered_vocabulary(code_frequencies(patients, ct)) for ct in CODE_TYPES}


def build_cohort(records: list[PatientRecord], min_visits: int = 2) -> Cohort:
    """Keep patients with >= ``min_visits`` visits and all three code types present.

    Visits are re-sorted by timestamp. Filtering can produce an empty cohort.
    """
    kept = []
    for rec in records:
        if len(rec.visits) < min_visits:
            continue
        if not all(any(v.codes(ct) for v in rec.visits) for ct in CODE_TYPES):
            continue
        kept.append(PatientRecord(rec.patient_id, sorted(rec.visits, key=lambda v: v.timestamp)))
    return Cohort(
        kept,
        _vocabularies(kept),
        [{"step": "build_cohort", "min_visits": min_visits, "input": len(records), "kept": len(kept)}],
    )


def map_codes(cohort: Cohort, tables: list[CodeMappingTable]) -> Cohort:
    """Replace diagnosis/procedure codes by their categories; drugs pass through."""
    by_type = {t.code_type: t.entries for t in tables}

    def mapped(codes: frozenset[str], code_type: str) -> frozenset[str]:
        table = by_type.get(code_type)
        if table is None:
            return codes
        out = set()
        for c in codes:
            try:
                out.add(table[c])
            except KeyError:
                raise MappingError(c, code_type) from None
        return frozenset(out)

    patients = [
        PatientRecord(
            p.patient_id,
            [
                replace(
                    v,
                    diagnoses=mapped(v.diagnoses, "diagnosis"),
                    procedures=mapped(v.procedures, "procedure"),
                )
                for v in p.visits
            ],
        )
        for p in cohort.patients
    ]
    step = {"step": "map_codes", "tables": sorted(by_type)}
    return Cohort(patients, _vocabularies(patients), cohort.provenance + [step])


def prune_infrequent(cohort: Cohort, threshold: int = 5) -> Cohort:
    """Drop every code occurring in fewer than ``threshold`` visits (keep iff count >= threshold)."""
    if threshold < 0:
        raise InputError("threshold must be >= 0")
    keep = {
        ct: {c for c, n in code_frequencies(cohort.patients, ct).items() if n >= threshold}
        for ct in CODE_TYPES
    }
    patients = [
        PatientRecord(
            p.patient_id,
            [
                replace(v, **{CODE_FIELDS[ct]: v.codes(ct) & keep[ct] for ct in CODE_TYPES})
                for v in p.visits
            ],
        )
        for p in cohort.patients
    ]
    step = {"step": "prune_infrequent", "threshold": threshold}
    return Cohort(patients, _vocabularies(patients), cohort.provenance + [step])


@lru_cache(maxsize=1)
def abbreviation_table() -> dict[str, str]:
    text = resources.files("notetraj.resources").joinpath("abbreviations.txt").read_text("utf-8")
    table = {}
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        abbr, expansion = line.split("\t")
        table[abbr.strip()] = expansion.strip()
    return table


@lru_cache(maxsize=1)
def _abbreviation_pattern() -> re.Pattern:
    keys = sorted(abbreviation_table(), key=lambda k: (-len(k), k))
    return re.compile(r"(?<!\w)(" + "|".join(re.escape(k) for k in keys) + r")(?!\w)")


_TRANSLIT = str.maketrans({"æ": "ae", "ø": "oe", "å": "aa", "Æ": "ae", "Ø": "oe", "Å": "aa"})


def _fold(text: str) -> str:
    text = text.lower().translate(_TRANSLIT)
    text = unicodedata.normalize("NFKD", text)
    return "".join(ch for ch in text if not unicodedata.combining(ch)).lower()


def normalize_note_text(text: str) -> str:
    """Lowercase, transliterate Danish letters, strip accents, expand abbreviations.

    >>> normalize_note_text("Pt stable for 2 hr(s)")
    'pt stable for 2 hours'
    """
    table = abbreviation_table()
    pattern = _abbreviation_pattern()
    # a few unicode letters only settle after a second fold, so run to a fixed point
    for _ in range(8):
        out = pattern.sub(lambda m: table[m.group(1)], _fold(text))
        if out == text:
            break
        text = out
    return text


def target_ordering(codes, frequencies: Counter) -> list[str]:
    """Deterministic target order: descending corpus frequency, ties lexicographic."""
    return sorted(set(codes), key=lambda c: (-frequencies.get(c, 0), c))


def build_pairs(
    cohort: Cohort,
    max_source_visits: int = 16,
    mode: str = "prefix",
    normalize_notes: bool = True,
) -> list[TrajectoryPair]:
    """Expand each patient into (history -> next-visit diagnoses) pairs.

    ``mode="prefix"`` uses visits 1..i as the source of the pair targeting visit
    i+1; ``mode="single"`` uses visit i alone. Sources keep the most recent
    ``max_source_visits`` visits. Pairs whose target visit has no diagnoses are dropped.
    """
    if mode not in ("prefix", "single"):
        raise InputError(f"unknown pair mode {mode!r}")
    freq = cohort.frequencies("diagnosis")
    pairs = []
    for p in cohort.patients:
        visits = p.visits
        if normalize_notes:
            visits = [replace(v, note=normalize_note_text(v.note)) for v in visits]
        for i in range(1, len(visits)):
            target = visits[i]
            if not target.diagnoses:
                continue
            source = visits[:i] if mode == "prefix" else visits[i - 1:i]
            source = source[-max_source_visits:]
            pairs.append(
                TrajectoryPair(
                    pair_id=f"{p.patient_id}:{i}",
                    patient_id=p.patient_id,
                    source_visits=source,
                    target_codes=target_ordering(target.diagnoses, freq),
                    target_timestamp=target.timestamp,
                )
            )
    return pairs


def code_statistics(patients: list[PatientRecord]) -> dict:
    """Distinct codes and mean/std of codes per visit, per code type."""
    out = {}
    for ct in CODE_TYPES:
        per_visit = [len(v.codes(ct)) for p in patients for v in p.visits]
        arr = np.asarray(per_visit, dtype=float) if per_visit else np.zeros(1)
        out[ct] = {
            "distinct": len(code_frequencies(patients, ct)),
            "mean": round(float(arr.mean()), 4),
            "std": round(float(arr.std()), 4),
        }
    return out


@dataclass
class PipelineResult:
    cohort: Cohort
    pairs: list[TrajectoryPair]
    stats: dict


def run_pipeline(
    records: list[PatientRecord],
    tables: list[CodeMappingTable],
    threshold: int = 5,
    max_source_visits: int = 16,
    pair_mode: str = "prefix",
) -> PipelineResult:
    cohort = build_cohort(records)
    cohort = map_codes(cohort, tables)
    cohort = prune_infrequent(cohort, threshold)
    pairs = build_pairs(cohort, max_source_visits=max_source_visits, mode=pair_mode)
    stats = {
        "at_loading": code_statistics(records),
        "after_preprocessing": code_statistics(cohort.patients),
        "patients": {"at_loading": len(records), "after_preprocessing": len(cohort.patients)},
        "pairs": len(pairs),
        "provenance": cohort.provenance,
    }
    return PipelineResult(cohort, pairs, stats)


def format_stats_table(stats: dict) -> str:
    """Plain-text rendering in the two-row-per-code-type layout."""
    lines = [f"{'Code Type':<18}{'At loading':>18}{'After preprocessing':>24}"]
    for ct in ("procedure", "diagnosis", "drug"):
        a, b = stats["at_loading"][ct], stats["after_preprocessing"][ct]
        lines.append(f"{ct.capitalize() + ' codes':<18}{a['distinct']:>18}{b['distinct']:>24}")
        lines.append(
            f"{'':<18}{a['mean']:>10.2f} ± {a['std']:<5.2f}{b['mean']:>16.2f} ± {b['std']:<5.2f}"
        )
    return "\n".join(lines)


def visit_notes(cohort: Cohort) -> list[str]:
    return [normalize_note_text(v.note) for p in cohort.patients for v in p.visits]

