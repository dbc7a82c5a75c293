import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import numpy as np
import pytest

from notetraj.preprocess import load_mapping_dir, run_pipeline
from notetraj.synth import CohortGenerator, GeneratorConfig, write_mapping_tables


@pytest.fixture(scope="session")
def small_pairs(tmp_path_factory):
    """Preprocessed pairs from a seeded 300-patient synthetic cohort."""
    gen = CohortGenerator(GeneratorConfig(seed=13, n_patients=300))
    out = tmp_path_factory.mktemp("maps")
    write_mapping_tables(gen, out)
    return run_pipeline(gen.generate(), load_mapping_dir(out)).pairs


@pytest.fixture(scope="session")
def random_bank(small_pairs):
    """NoteBank-style vectors [6, 8] per visit drawn from a fixed RNG."""
    from notetraj.seq2seq import NoteBank

    rng = np.random.default_rng(0)
    keys = sorted({(p.patient_id, v.timestamp) for p in small_pairs for v in p.source_visits})
    return NoteBank({k: rng.normal(size=(6, 8)).astype(np.float32) for k in keys})


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
