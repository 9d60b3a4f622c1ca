import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from varietyid.dataset import SyntheticConfig, build_splits, manifest_from_utterances, synthesize  # noqa: E402
from varietyid.training import corpus_data_in_memory  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    """4 regions x 3 cities, split in memory."""
    cfg = SyntheticConfig(n_regions=4, cities_per_region=3, sentences=4, repeats=4,
                          feature_dim=8, latent_dim=4, frames_mean=6, frames_jitter=2,
                          sigma_region=2.0, sigma_city=0.2, sigma_noise=0.5, seed=3)
    utts = synthesize(cfg)
    manifest = build_splits(manifest_from_utterances(utts, cfg.feature_dim), seed=3)
    return corpus_data_in_memory(utts, manifest)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
