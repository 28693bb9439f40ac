import numpy as np
import pytest

from dtmgibbs.model import Hyperparams
from dtmgibbs.synthetic import generate_synthetic


@pytest.fixture(scope="session")
def small_synthetic():
    """A small learnable corpus shared by the engine/cluster/eval tests."""
    hyper = Hyperparams(K=4, sigma2=0.1, beta2=0.1, psi2=0.1)
    corpus, params = generate_synthetic(hyper, v=40, n_slices=3,
                                        docs_per_slice=25, doc_len=30, seed=17)
    return hyper, corpus, params


@pytest.fixture
def tiny_corpus_file(tmp_path):
    path = tmp_path / "tiny.txt"
    path.write_text("1\ta b a\n2\tb c\n", encoding="utf-8")
    return path


def enumerate_alias_measure(table):
    """Exact draw probabilities: uniform column choice x threshold coin."""
    k = table.k
    p = np.zeros(k)
    for j in range(k):
        p[j] += table.prob[j] / k
        p[table.alias[j]] += (1.0 - table.prob[j]) / k
    return p


def states_equal(a, b) -> bool:
    """Bitwise equality of two model states, token assignments included."""
    if len(a.slices) != len(b.slices):
        return False
    for x, y in zip(a.slices, b.slices):
        if not (np.array_equal(x.alpha, y.alpha)
                and np.array_equal(x.phi, y.phi)
                and np.array_equal(x.eta, y.eta)
                and len(x.z) == len(y.z)
                and all(np.array_equal(za, zb) for za, zb in zip(x.z, y.z))):
            return False
    return True
