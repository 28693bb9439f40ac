"""Synthetic corpora drawn from the model's own generative process.

Used as the oracle for learning tests: the chain and emission variances
are known, so a trainer that works must beat the uniform baseline and
keep improving with iterations.  The chain start values (scale of the
time-zero topic rows and slice mean) control how much signal the data
carries; the defaults give well-separated topics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Corpus, Document, TimeSlice, Vocabulary
from .kernels import rng_for, softmax
from .model import Hyperparams


@dataclass(frozen=True)
class SyntheticParams:
    """Ground-truth parameters the corpus was drawn from."""

    alpha: np.ndarray   # (T, K)
    phi: np.ndarray     # (T, K, V)
    eta: tuple          # per slice: (D_t, K)


def generate_synthetic(hyper: Hyperparams, v: int, n_slices: int,
                       docs_per_slice: int, doc_len: int, seed: int,
                       alpha0_scale: float = 1.0,
                       phi0_scale: float = 2.0) -> tuple[Corpus, SyntheticParams]:
    """Draw a corpus: Gaussian chains for the slice means and topic rows,
    then per-document parameters, topic assignments and words.

    ``phi0_scale`` is the entrywise standard deviation of the time-zero
    topic rows; larger values mean peakier topics and lower attainable
    perplexity.  Documents are ``doc_len`` tokens each.
    """
    k = hyper.K
    rng = rng_for(seed, "synthetic")
    vocab = Vocabulary.from_terms(f"w{i:04d}" for i in range(v))

    alpha = np.empty((n_slices, k))
    phi = np.empty((n_slices, k, v))
    a_prev = alpha0_scale * rng.standard_normal(k)
    p_prev = phi0_scale * rng.standard_normal((k, v))
    for t in range(n_slices):
        a_prev = a_prev + np.sqrt(hyper.sigma2) * rng.standard_normal(k)
        p_prev = p_prev + np.sqrt(hyper.beta2) * rng.standard_normal((k, v))
        alpha[t] = a_prev
        phi[t] = p_prev

    slices = []
    etas = []
    for t in range(n_slices):
        soft_phi = np.stack([softmax(phi[t, kk]) for kk in range(k)])
        eta_t = alpha[t][None, :] + np.sqrt(hyper.psi2) * rng.standard_normal((docs_per_slice, k))
        docs = []
        for d in range(docs_per_slice):
            theta = softmax(eta_t[d])
            z = rng.choice(k, size=doc_len, p=theta)
            w = np.empty(doc_len, dtype=np.int32)
            for kk in range(k):
                mask = z == kk
                if mask.any():
                    w[mask] = rng.choice(v, size=int(mask.sum()), p=soft_phi[kk])
            docs.append(Document(tokens=w, doc_id=f"{t + 1}:{d}"))
        etas.append(eta_t)
        slices.append(TimeSlice(slice_index=t + 1, docs=tuple(docs)))
    corpus = Corpus(vocabulary=vocab, slices=tuple(slices))
    return corpus, SyntheticParams(alpha=alpha, phi=phi, eta=tuple(etas))
