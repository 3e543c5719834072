import numpy as np
import pytest

from inctkg.data import SnapshotConfig, make_tasks, write_bundle
from inctkg.synth import SynthConfig, generate

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_corpus():
    cfg = SynthConfig(n_entities=60, n_relations=5, n_quads=1500, n_days=40, seed=3)
    return generate(cfg)


@pytest.fixture(scope="session")
def small_tasks(small_corpus):
    quads, vocab = small_corpus
    return make_tasks(quads, SnapshotConfig(0.5, 5)), vocab


@pytest.fixture
def small_bundle(tmp_path, small_corpus):
    quads, vocab = small_corpus
    out = tmp_path / "bundle"
    write_bundle(str(out), quads, vocab, SnapshotConfig(0.5, 5))
    return str(out)


def random_quads(rng, n, n_entities=10, n_relations=3, n_days=10):
    q = np.stack([rng.integers(0, n_entities, n), rng.integers(0, n_relations, n),
                  rng.integers(0, n_entities, n), rng.integers(0, n_days, n)], axis=1)
    return q[np.argsort(q[:, 3], kind="stable")].astype(np.int64)
