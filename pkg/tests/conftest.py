import sys

import numpy as np
import pytest

from attriclean import sepmodel
from attriclean.synthdata import CorpusSpec, build_corpus


@pytest.fixture(scope="session")
def small_corpus():
    """24 one-second songs: 12 clean, 6 label-noise, 6 bleeding."""
    return build_corpus(CorpusSpec(12, 6, 6, 0, song_length=1.0, master_seed=11))


@pytest.fixture(scope="session")
def small_refs():
    return build_corpus(CorpusSpec(4, 0, 0, 0, song_length=1.0, master_seed=12, prefix="ref"))


@pytest.fixture(scope="session")
def small_feats(small_corpus):
    return sepmodel.corpus_features(small_corpus)


@pytest.fixture(scope="session")
def small_ref_feats(small_refs):
    return sepmodel.corpus_features(small_refs)


@pytest.fixture(scope="session")
def trained(small_feats, small_ref_feats):
    """Per-target models trained for a few epochs on the small corpus."""
    cfg = sepmodel.TrainConfig(epochs=15, seed=5)
    return {t: sepmodel.train_target(small_feats, t, cfg, small_ref_feats).params
            for t in ("vocals", "bass", "drums", "other")}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)



def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"ACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}")
