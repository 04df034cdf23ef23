"""Shared fixtures: a small synthetic cohort on disk and in memory."""

import numpy as np
import pytest

from lungsound.corpus import curate, ingest_corpus
from lungsound.synthcohort import SynthSpec, write_synth_cohort


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("cohort")
    write_synth_cohort(SynthSpec(n_patients=24, seed=613), root)
    return root


@pytest.fixture(scope="session")
def small_corpus(synth_root):
    return curate(ingest_corpus(synth_root))


TINY_RUN_CONFIG = {
    "seed": 11,
    "fast": True,
    "synth": {"n_patients": 30, "seed": 11},
    "stack": {"k_folds": 3, "n_trials": 2},
    "bootstrap": {"n_replicates": 25},
}


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """A complete small pipeline run, shared read-mostly across tests."""
    from lungsound import pipeline as P

    root = tmp_path_factory.mktemp("tiny_run")
    run = P.RunDirectory(root, P.RunConfig(dict(TINY_RUN_CONFIG)))
    P.stage_synth(run)
    P.stage_preprocess(run)
    P.stage_embed(run)
    P.stage_train_base(run)
    P.stage_stack(run)
    P.stage_aggregate(run)
    P.stage_evaluate(run)
    P.stage_report(run)
    return run


@pytest.fixture
def rng():
    return np.random.default_rng(20260815)


@pytest.fixture
def random_simplex(rng):
    """Factory for (n, k) rows that sum to one."""

    def make(n, k, generator=None):
        g = generator if generator is not None else rng
        return g.dirichlet(np.ones(k), size=n)

    return make


def pytest_terminal_summary(terminalreporter):
    # echo the acceptance checklist past stdout capture
    try:
        from test_acceptance import CHECKLIST
    except ImportError:
        return
    if CHECKLIST:
        terminalreporter.section("acceptance checklist")
        for line in CHECKLIST:
            terminalreporter.write_line(line)
