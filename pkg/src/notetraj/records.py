"""Record types shared by the generator, the preprocessing pipeline and the models.

Everything here round-trips through JSON-Lines. Code sets are serialized as
sorted lists so that equal records always produce equal bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

CODE_TYPES = ("diagnosis", "procedure", "drug")
# attribute name on Visit for each code type
CODE_FIELDS = {"diagnosis": "diagnoses", "procedure": "procedures", "drug": "drugs"}


@dataclass
class Visit:
    timestamp: int
    diagnoses: frozenset[str] = frozenset()
    procedures: frozenset[str] = frozenset()
    drugs: frozenset[str] = frozenset()
    note: str = ""
    # generator-internal; only written to the debug sidecar
    latent_state: int | None = None

    def codes(self, code_type: str) -> frozenset[str]:
        return getattr(self, CODE_FIELDS[code_type])

    def to_dict(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "diagnoses": sorted(self.diagnoses),
            "procedures": sorted(self.procedures),
            "drugs": sorted(self.drugs),
            "note": self.note,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Visit":
        return cls(
            timestamp=int(d["timestamp"]),
            diagnoses=frozenset(d.get("diagnoses", ())),
            procedures=frozenset(d.get("procedures", ())),
            drugs=frozenset(d.get("drugs", ())),
            note=d.get("note", ""),
        )


@dataclass
class PatientRecord:
    patient_id: str
    visits: list[Visit] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"patient_id": self.patient_id, "visits": [v.to_dict() for v in self.visits]}

    @classmethod
    def from_dict(cls, d: dict) -> "PatientRecord":
        return cls(str(d["patient_id"]), [Visit.from_dict(v) for v in d["visits"]])


@dataclass
class TrajectoryPair:
    """One supervised example: visit history -> next-visit diagnosis list."""

    pair_id: str
    patient_id: str
    source_visits: list[Visit]
    target_codes: list[str]
    target_timestamp: int
    fold_id: int | None = None

    def to_dict(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "patient_id": self.patient_id,
            "source_visits": [v.to_dict() for v in self.source_visits],
            "target_codes": list(self.target_codes),
            "target_timestamp": self.target_timestamp,
            "fold_id": self.fold_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryPair":
        return cls(
            pair_id=str(d["pair_id"]),
            patient_id=str(d["patient_id"]),
            source_visits=[Visit.from_dict(v) for v in d["source_visits"]],
            target_codes=list(d["target_codes"]),
            target_timestamp=int(d["target_timestamp"]),
            fold_id=d.get("fold_id"),
        )


@dataclass
class RankedPrediction:
    """Ordered, duplicate-free diagnosis ranking for one target visit."""

    codes: list[str]
    scores: list[float]
    pair_id: str | None = None

    def __post_init__(self):
        if len(self.codes) != len(self.scores):
            raise ValueError("codes and scores must have equal length")
        if len(set(self.codes)) != len(self.codes):
            raise ValueError("ranked prediction contains duplicate codes")

    def to_dict(self) -> dict:
        return {"pair_id": self.pair_id, "codes": self.codes, "scores": self.scores}

    @classmethod
    def from_dict(cls, d: dict) -> "RankedPrediction":
        return cls(list(d["codes"]), [float(s) for s in d["scores"]], d.get("pair_id"))


def dumps(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_jsonl(path: str | Path, items: Iterable) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for item in items:
            fh.write(dumps(item if isinstance(item, dict) else item.to_dict()))
            fh.write("\n")


def iter_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def read_records(path: str | Path) -> list[PatientRecord]:
    return [PatientRecord.from_dict(d) for d in iter_jsonl(path)]


def read_pairs(path: str | Path) -> list[TrajectoryPair]:
    return [TrajectoryPair.from_dict(d) for d in iter_jsonl(path)]


def read_predictions(path: str | Path) -> list[RankedPrediction]:
    return [RankedPrediction.from_dict(d) for d in iter_jsonl(path)]
