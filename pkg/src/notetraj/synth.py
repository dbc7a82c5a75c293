"""Synthetic EHR cohort generator.

Produces patients whose visits carry diagnosis, procedure and drug codes plus a
free-text note. Default code statistics follow published ICU cohort summary figures
(vocabularies of 762 / 470 / 1609 codes; per-visit means 13.18 / 2.99 / 24.12).

Each visit also draws a hidden latent class. The class of visit ``i`` fixes a
small bundle of diagnosis codes that will appear at visit ``i + 1``. The class
is never visible in the codes; with probability ``latent_signal_strength`` the
visit note names it through a marker phrase. That gives the note-fusion models
an exclusive signal to exploit, and turning the knob to 0 removes it.
"""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .records import CODE_TYPES, PatientRecord, Visit, dumps, write_jsonl

logger = logging.getLogger(__name__)

CODE_PREFIX = {"diagnosis": "D", "procedure": "P", "drug": "M"}

DEFAULT_VOCAB_SIZES = {"diagnosis": 762, "procedure": 470, "drug": 1609}
DEFAULT_COUNT_PARAMS = {
    "diagnosis": (13.18, 8.58),
    "procedure": (2.99, 2.77),
    "drug": (24.12, 28.19),
}

# Deliberately messy surface forms: abbreviations, accents, Danish letters, mixed case.
NOTE_TEMPLATES = [
    "Pt seen for follow-up, stable for {n} hr(s).",
    "Patient reports fatigue for {n} hrs, no fever.",
    "Hx of Sjögren syndrome noted in chart.",
    "Vitals reviewed: BP {a}/{b}, HR {c} bpm.",
    "Discharged after {n} HRS of observation.",
    "Family at bedside; Søren (brother) updated on plan.",
    "Tolerating diet, blåbær juice with breakfast.",
    "Café-au-lait macules unchanged since last visit.",
    "Pain controlled on current regimen, reassess in {n} hr.",
    "Æther-like odor reported by pt, no acute distress.",
    "Ambulating independently, PT consult placed.",
    "Labs pending, will follow up in {n} Hrs.",
    "Señora translator present for the interview.",
    "Wound clean, dry and intact; dressing changed.",
    "Sleep improved, denies chest pain or dyspnea.",
    "Medication reconciliation completed with naïve pt.",
]

_MARKER_ROOTS = [
    "velorin", "castrel", "mubaxis", "dornith", "quelpar", "sabrith", "tolvane", "grenvic",
    "halspur", "ovidrel", "pantrex", "ruvosk", "fendral", "jaskirn", "lomprey", "zentari",
]
_MARKER_SECOND = ["ferrosis", "gliatony", "mexeritis", "pulvadema"]
MAX_LATENT_CLASSES = len(_MARKER_ROOTS) * len(_MARKER_SECOND)


def marker_phrase(latent_class: int) -> str:
    """Deterministic marker phrase naming one latent class."""
    root = _MARKER_ROOTS[latent_class % len(_MARKER_ROOTS)]
    second = _MARKER_SECOND[latent_class // len(_MARKER_ROOTS)]
    return f"{root} {second}"


def marker_class(text: str, n_classes: int) -> int | None:
    """Return the latent class whose marker phrase occurs in ``text``, if any."""
    lowered = text.lower()
    for c in range(n_classes):
        if re.search(r"\b" + re.escape(marker_phrase(c)) + r"\b", lowered):
            return c
    return None


def code_id(code_type: str, index: int, vocab_size: int) -> str:
    width = max(4, len(str(vocab_size - 1)))
    return f"{CODE_PREFIX[code_type]}{index:0{width}d}"


@dataclass
class GeneratorConfig:
    seed: int = 7
    n_patients: int = 1000
    vocab_sizes: dict = field(default_factory=lambda: dict(DEFAULT_VOCAB_SIZES))
    # per code type: (mean, std) of the number of codes per visit
    per_visit_count_params: dict = field(default_factory=lambda: dict(DEFAULT_COUNT_PARAMS))
    # truncated zeta: P(n) proportional to n ** -shape for 1 <= n <= max_visits
    visit_count_distribution: dict = field(
        default_factory=lambda: {"shape": 2.5, "max_visits": 40}
    )
    note_template_count: int = len(NOTE_TEMPLATES)
    latent_signal_strength: float = 1.0
    n_latent_classes: int = 8
    bundle_size: int = 4
    # share of background diagnoses re-drawn from the patient's own history
    history_repeat_prob: float = 0.35
    zipf_exponent: float = 1.0

    def __post_init__(self):
        self.vocab_sizes = {k: int(v) for k, v in self.vocab_sizes.items()}
        self.per_visit_count_params = {
            k: tuple(float(x) for x in v) for k, v in self.per_visit_count_params.items()
        }
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.n_patients < 0:
            problems.append("n_patients must be >= 0")
        for ct in CODE_TYPES:
            if self.vocab_sizes.get(ct, 0) <= 0:
                problems.append(f"vocab_sizes.{ct} must be > 0")
            mean, std = self.per_visit_count_params.get(ct, (0.0, 0.0))
            if mean <= 0:
                problems.append(f"per_visit_count_params.{ct} mean must be > 0")
            if std < 0:
                problems.append(f"per_visit_count_params.{ct} std must be >= 0")
        if not 0.0 <= self.latent_signal_strength <= 1.0:
            problems.append("latent_signal_strength must lie in [0, 1]")
        if not 1 <= self.n_latent_classes <= MAX_LATENT_CLASSES:
            problems.append(f"n_latent_classes must lie in [1, {MAX_LATENT_CLASSES}]")
        if self.bundle_size < 1:
            problems.append("bundle_size must be >= 1")
        reserved = self.n_latent_classes * self.bundle_size
        if self.vocab_sizes.get("diagnosis", 0) <= reserved:
            problems.append("diagnosis vocabulary must exceed n_latent_classes * bundle_size")
        if not 1 <= self.note_template_count <= len(NOTE_TEMPLATES):
            problems.append(f"note_template_count must lie in [1, {len(NOTE_TEMPLATES)}]")
        vcd = self.visit_count_distribution
        if vcd.get("shape", 0) <= 0 or vcd.get("max_visits", 0) < 1:
            problems.append("visit_count_distribution needs shape > 0 and max_visits >= 1")
        if not 0.0 <= self.history_repeat_prob <= 1.0:
            problems.append("history_repeat_prob must lie in [0, 1]")
        if problems:
            raise ConfigError("; ".join(problems))

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown generator keys: {unknown}")
        return cls(**known)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_visit_count_params"] = {k: list(v) for k, v in self.per_visit_count_params.items()}
        return d


def _count_sampler(mean: float, std: float):
    """Moment-matched count distribution: negative binomial, Poisson if not overdispersed."""
    var = std * std
    if var > mean:
        p = mean / var
        r = mean * mean / (var - mean)
        return lambda rng: int(rng.negative_binomial(r, p))
    return lambda rng: int(rng.poisson(mean))


def generate_note(
    visit: Visit,
    latent_state: int | None,
    rng: np.random.Generator,
    *,
    signal_strength: float,
    template_count: int = len(NOTE_TEMPLATES),
) -> str:
    """Write the free-text note for one visit.

    The marker sentence for ``latent_state`` is included with probability
    ``signal_strength``; otherwise the note is built from neutral templates only.
    """
    templates = NOTE_TEMPLATES[:template_count]
    n_sentences = int(rng.integers(2, 5))
    picks = rng.choice(len(templates), size=min(n_sentences, len(templates)), replace=False)
    sentences = [
        templates[i].format(
            n=int(rng.integers(1, 49)),
            a=int(rng.integers(95, 170)),
            b=int(rng.integers(55, 100)),
            c=int(rng.integers(50, 120)),
        )
        for i in picks
    ]
    # draw unconditionally so the random stream does not depend on the knob
    mention = rng.random() < signal_strength
    slot = int(rng.integers(0, len(sentences) + 1))
    if latent_state is not None and mention:
        phrase = marker_phrase(latent_state)
        sentences.insert(slot, f"Findings consistent with {phrase.title()}.")
    return f"Admission date: day {visit.timestamp}. " + " ".join(sentences)


class CohortGenerator:
    """Holds the code "world" (vocabularies, popularity weights, bundles) for one config."""

    def __init__(self, config: GeneratorConfig):
        config.validate()
        self.config = config
        self.codes = {
            ct: [code_id(ct, i, config.vocab_sizes[ct]) for i in range(config.vocab_sizes[ct])]
            for ct in CODE_TYPES
        }
        n_bundle = config.n_latent_classes * config.bundle_size
        diag = self.codes["diagnosis"]
        self.bundles = [
            diag[c * config.bundle_size:(c + 1) * config.bundle_size]
            for c in range(config.n_latent_classes)
        ]
        self.bundle_codes = frozenset(diag[:n_bundle])
        self.background = {ct: list(self.codes[ct]) for ct in CODE_TYPES}
        self.background["diagnosis"] = diag[n_bundle:]

        world = np.random.default_rng(np.random.SeedSequence([config.seed, 0xC0DE]))
        self.weights = {}
        for ct in CODE_TYPES:
            n = len(self.background[ct])
            w = 1.0 / np.arange(1, n + 1) ** config.zipf_exponent
            w = w[world.permutation(n)]
            self.weights[ct] = w / w.sum()
        self._bg_index = {c: i for i, c in enumerate(self.background["diagnosis"])}
        self._samplers = {
            ct: _count_sampler(*config.per_visit_count_params[ct]) for ct in CODE_TYPES
        }
        vcd = config.visit_count_distribution
        support = np.arange(1, int(vcd["max_visits"]) + 1)
        pmf = support.astype(float) ** -float(vcd["shape"])
        self.visit_count_pmf = pmf / pmf.sum()

    def _draw(self, code_type: str, k: int, rng, exclude=()) -> list[str]:
        pool = self.background[code_type]
        k = min(k, len(pool) - len(exclude))
        if k <= 0:
            return []
        w = self.weights[code_type]
        if exclude:
            w = w.copy()
            idx = [self._bg_index[c] for c in exclude] if code_type == "diagnosis" else []
            w[idx] = 0.0
            w /= w.sum()
        picked = rng.choice(len(pool), size=k, replace=False, p=w)
        return [pool[i] for i in picked]

    def next_visit_diagnoses(
        self,
        latent_state: int | None,
        history: list[frozenset[str]],
        rng: np.random.Generator,
        n_background: int,
    ) -> set[str]:
        """Diagnoses of the next visit.

        The bundle of ``latent_state`` is always present. ``n_background`` extra
        codes follow: each comes from the patient's own non-bundle history with
        probability ``history_repeat_prob``, otherwise from the global
        popularity distribution. ``n_background=0`` returns exactly the bundle.
        """
        out: set[str] = set()
        if latent_state is not None:
            out.update(self.bundles[latent_state])
        if n_background <= 0:
            return out
        past = sorted(set().union(*history) - self.bundle_codes) if history else []
        n_hist = int(rng.binomial(n_background, self.config.history_repeat_prob)) if past else 0
        n_hist = min(n_hist, len(past))
        if n_hist:
            out.update(past[i] for i in rng.choice(len(past), size=n_hist, replace=False))
        chosen = sorted(out - self.bundle_codes)
        out.update(self._draw("diagnosis", n_background - n_hist, rng, exclude=chosen))
        return out

    def _patient(self, index: int, seed_seq: np.random.SeedSequence) -> PatientRecord:
        cfg = self.config
        rng = np.random.default_rng(seed_seq)
        n_visits = int(rng.choice(len(self.visit_count_pmf), p=self.visit_count_pmf)) + 1
        t = int(rng.integers(0, 3650))
        visits: list[Visit] = []
        prev_latent = None
        for v in range(n_visits):
            if v:
                t += int(rng.integers(1, 366))
            latent = int(rng.integers(cfg.n_latent_classes))
            n_diag = max(1, self._samplers["diagnosis"](rng))
            history = [x.diagnoses for x in visits]
            if prev_latent is None:
                diagnoses = set(self._draw("diagnosis", n_diag, rng))
            elif n_diag >= cfg.bundle_size:
                diagnoses = self.next_visit_diagnoses(
                    prev_latent, history, rng, n_diag - cfg.bundle_size
                )
            else:
                # very small visits keep a prefix of the bundle only
                diagnoses = set(self.bundles[prev_latent][:n_diag])
            procedures = self._draw("procedure", self._samplers["procedure"](rng), rng)
            drugs = self._draw("drug", self._samplers["drug"](rng), rng)
            visit = Visit(
                timestamp=t,
                diagnoses=frozenset(diagnoses),
                procedures=frozenset(procedures),
                drugs=frozenset(drugs),
                latent_state=latent,
            )
            visit.note = generate_note(
                visit,
                latent,
                rng,
                signal_strength=cfg.latent_signal_strength,
                template_count=cfg.note_template_count,
            )
            visits.append(visit)
            prev_latent = latent
        return PatientRecord(patient_id=f"p{index:06d}", visits=visits)

    def generate(self) -> list[PatientRecord]:
        n = self.config.n_patients
        # one independent substream per patient
        streams = np.random.SeedSequence(self.config.seed).spawn(n)
        return [self._patient(i, s) for i, s in enumerate(streams)]


def generate_cohort(config: GeneratorConfig) -> list[PatientRecord]:
    return CohortGenerator(config).generate()


class OraclePredictor:
    """Generator-internal ranking of next-visit diagnoses.

    Scores every diagnosis code by its approximate inclusion probability under
    the generating process. With ``use_notes`` the latent class is read off the
    last source note (when the marker is present), otherwise bundle codes get
    the uninformed prior ``1 / n_latent_classes``.
    """

    def __init__(self, generator: CohortGenerator, use_notes: bool):
        self.gen = generator
        self.use_notes = use_notes
        cfg = generator.config
        mean = cfg.per_visit_count_params["diagnosis"][0]
        self.n_background = max(mean - cfg.bundle_size, 0.0)

    def rank(self, history: list[Visit], k: int) -> list[str]:
        cfg = self.gen.config
        scores: dict[str, float] = {}
        past = set().union(*(v.diagnoses for v in history)) - self.gen.bundle_codes
        repeat = cfg.history_repeat_prob if past else 0.0
        for code, w in zip(self.gen.background["diagnosis"], self.gen.weights["diagnosis"]):
            scores[code] = self.n_background * (1 - repeat) * w
        for code in past:
            scores[code] += self.n_background * repeat / len(past)
        known = marker_class(history[-1].note, cfg.n_latent_classes) if self.use_notes else None
        for c, bundle in enumerate(self.gen.bundles):
            p = (1.0 if c == known else 0.0) if known is not None else 1.0 / cfg.n_latent_classes
            for code in bundle:
                scores[code] = p
        ordered = sorted(scores, key=lambda c: (-scores[c], c))
        return ordered[:k]


def mapping_table(codes: list[str], ratio: int, prefix: str) -> dict[str, str]:
    """Many-to-one grouping of consecutive codes, ``ratio`` codes per category."""
    if ratio < 1:
        raise ConfigError("mapping ratio must be >= 1")
    ordered = sorted(codes)
    n_cat = (len(ordered) + ratio - 1) // ratio
    width = max(4, len(str(n_cat)))
    return {c: f"{prefix}{i // ratio:0{width}d}" for i, c in enumerate(ordered)}


def write_mapping_tables(generator: CohortGenerator, out_dir: str | Path, ratio: int = 1) -> None:
    """Write ``diagnosis.csv`` and ``procedure.csv`` (source_code, category).

    The default ratio of 1 gives a one-to-one relabelling into category ids.
    Bundle codes are grouped among themselves only, so a coarse table never
    mixes a latent bundle with background codes.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for ct, prefix in (("diagnosis", "DX"), ("procedure", "PR")):
        if ct == "diagnosis":
            table = mapping_table(sorted(generator.bundle_codes), ratio, "DXB")
            table.update(mapping_table(generator.background[ct], ratio, prefix))
        else:
            table = mapping_table(generator.codes[ct], ratio, prefix)
        with open(out_dir / f"{ct}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["source_code", "category"])
            for src in sorted(table):
                w.writerow([src, table[src]])


def write_cohort(records: list[PatientRecord], out: str | Path, debug_sidecar: str | Path | None = None):
    write_jsonl(out, records)
    if debug_sidecar is not None:
        write_jsonl(
            debug_sidecar,
            (
                {"patient_id": r.patient_id, "latent_states": [v.latent_state for v in r.visits]}
                for r in records
            ),
        )


def cohort_bytes(records: list[PatientRecord]) -> bytes:
    return "".join(dumps(r.to_dict()) + "\n" for r in records).encode("utf-8")
