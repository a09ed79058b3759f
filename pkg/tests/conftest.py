import numpy as np
import pytest

from spkid.audio_io import load_manifest
from spkid.synthgen import MANIFEST_NAME, synth_corpus


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """3 speakers x 10 clips x 1 s; splits 8/1/1 per speaker."""
    out = tmp_path_factory.mktemp("corpus3")
    synth_corpus(3, 10, 1.0, out, seed=3)
    return load_manifest(out / MANIFEST_NAME)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = {}


@pytest.fixture
def verdict():
    """Record ``(criterion, part, ok, detail)`` for the end-of-run summary."""
    def record(criterion, part, ok, detail):
        ACCEPTANCE.setdefault(criterion, []).append((part, bool(ok), detail))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance")
    for criterion in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[criterion]
        ok = all(p[1] for p in parts)
        detail = "; ".join(f"{p[0]}{' ' if p[0] else ''}{'ok' if p[1] else 'MISS'}: {p[2]}"
                           for p in parts)
        terminalreporter.write_line(f"{criterion} {'PASS' if ok else 'FAIL'}  {detail}")
