"""Model state: per-slice parameters, count matrices, checkpoints.

State is partitioned by time slice; exactly one worker owns a slice.
Within a worker the sampler blocks read a frozen snapshot of the
previous iteration and write disjoint fields, so nothing here needs
locks.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Corpus
from .kernels import log_sum_exp, rng_for

CHECKPOINT_MAGIC = b"DTMC"
CHECKPOINT_VERSION = 1

PHI_INIT_VARIANCE = 0.01  # small symmetric-breaking noise; exact zero would
                          # leave every topic identical under the doc-proposal


@dataclass(frozen=True)
class Hyperparams:
    """Topic count and the three chain/emission variances."""

    K: int
    sigma2: float = 0.1  # drift variance of the slice-level mean chain
    beta2: float = 0.1   # drift variance of the per-topic term chains
    psi2: float = 0.1    # spread of document parameters around the slice mean

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if min(self.sigma2, self.beta2, self.psi2) <= 0:
            raise ValueError("variances must be positive")


class CountSet:
    """Topic-count tallies over one mini-batch of documents.

    c_doc[d][k]        times topic k appears in document d (minibatch docs only)
    c_word_topic[k,w]  times word w carries topic k
    c_topic[k]         total tokens assigned to topic k
    """

    __slots__ = ("c_doc", "c_word_topic", "c_topic", "n_tokens")

    def __init__(self, k: int, v: int):
        self.c_doc: dict[int, np.ndarray] = {}
        self.c_word_topic = np.zeros((k, v), dtype=np.int32)
        self.c_topic = np.zeros(k, dtype=np.int64)
        self.n_tokens = 0

    def validate(self, tokens=None) -> None:
        """Assert the conservation invariants; cheap, used in debug runs."""
        if np.any(self.c_word_topic < 0) or np.any(self.c_topic < 0):
            raise AssertionError("negative counts")
        if not np.array_equal(self.c_word_topic.sum(axis=1), self.c_topic):
            raise AssertionError("c_word_topic rows do not sum to c_topic")
        if int(self.c_topic.sum()) != self.n_tokens:
            raise AssertionError("c_topic does not sum to n_tokens")
        if tokens is not None:
            for d, cd in self.c_doc.items():
                if int(cd.sum()) != len(tokens[d]):
                    raise AssertionError(f"c_doc[{d}] does not sum to doc length")

    def equals(self, other: "CountSet") -> bool:
        return (self.n_tokens == other.n_tokens
                and np.array_equal(self.c_word_topic, other.c_word_topic)
                and np.array_equal(self.c_topic, other.c_topic)
                and set(self.c_doc) == set(other.c_doc)
                and all(np.array_equal(self.c_doc[d], other.c_doc[d]) for d in self.c_doc))


class SliceState:
    """All sampled parameters of one time slice.

    Keeps the log-normalizers of eta rows and phi rows cached; the
    gradient and likelihood code reads them instead of recomputing
    log-sum-exp per use.  Writers must call the refresh helpers.
    """

    __slots__ = ("slice_index", "tokens", "alpha", "phi", "eta", "z",
                 "eta_log_norm", "phi_log_norm")

    def __init__(self, slice_index: int, tokens, alpha, phi, eta, z):
        self.slice_index = slice_index
        self.tokens = tokens          # list of int32 arrays, shared with the corpus
        self.alpha = alpha            # (K,)
        self.phi = phi                # (K, V)
        self.eta = eta                # (D_t, K)
        self.z = z                    # list of int32 arrays, aligned with tokens
        self.eta_log_norm = np.empty(eta.shape[0])
        self.phi_log_norm = np.empty(phi.shape[0])
        self.refresh_eta_norm()
        self.refresh_phi_norm()

    @property
    def n_docs(self) -> int:
        return self.eta.shape[0]

    @property
    def k(self) -> int:
        return self.phi.shape[0]

    @property
    def v(self) -> int:
        return self.phi.shape[1]

    def refresh_eta_norm(self, docs=None) -> None:
        rows = range(self.n_docs) if docs is None else docs
        for d in rows:
            m = self.eta[d].max() if self.eta.shape[1] else 0.0
            self.eta_log_norm[d] = m + np.log(np.exp(self.eta[d] - m).sum())

    def refresh_phi_norm(self, topics=None) -> None:
        rows = range(self.k) if topics is None else topics
        for kk in rows:
            m = self.phi[kk].max()
            self.phi_log_norm[kk] = m + np.log(np.exp(self.phi[kk] - m).sum())

    def validate_normalizers(self, atol: float = 1e-9) -> None:
        for d in range(self.n_docs):
            if abs(self.eta_log_norm[d] - log_sum_exp(self.eta[d])) > atol:
                raise AssertionError(f"stale eta normalizer for doc {d}")
        for kk in range(self.k):
            if abs(self.phi_log_norm[kk] - log_sum_exp(self.phi[kk])) > atol:
                raise AssertionError(f"stale phi normalizer for topic {kk}")


@dataclass
class ModelState:
    hyper: Hyperparams
    slices: list            # SliceState, index t-1 holds slice t
    counts: list            # CountSet per slice, refreshed each iteration
    vocabulary_size: int = field(default=0)

    @property
    def n_slices(self) -> int:
        return len(self.slices)


def init_state(corpus: Corpus, hyper: Hyperparams, seed: int) -> ModelState:
    """Fresh state: zero means, small-noise topics, uniform assignments."""
    v = corpus.vocabulary.size
    k = hyper.K
    slices = []
    counts = []
    for sl in corpus.slices:
        t = sl.slice_index
        tokens = [doc.tokens for doc in sl.docs]
        phi = rng_for(seed, "init-phi", t).normal(0.0, np.sqrt(PHI_INIT_VARIANCE), size=(k, v))
        eta = np.zeros((sl.n_docs, k))
        zrng = rng_for(seed, "init-z", t)
        z = [zrng.integers(0, k, size=len(w)).astype(np.int32) for w in tokens]
        state = SliceState(t, tokens, np.zeros(k), phi, eta, z)
        slices.append(state)
        counts.append(accumulate_counts(state, range(sl.n_docs)))
    return ModelState(hyper=hyper, slices=slices, counts=counts, vocabulary_size=v)


def accumulate_counts(slice_state: SliceState, doc_subset) -> CountSet:
    """Tally counts over a document subset only (the mini-batch)."""
    k, v = slice_state.k, slice_state.v
    cs = CountSet(k, v)
    subset = list(doc_subset)
    if not subset:
        return cs
    z_all = np.concatenate([slice_state.z[d] for d in subset])
    w_all = np.concatenate([slice_state.tokens[d] for d in subset])
    np.add.at(cs.c_word_topic, (z_all, w_all), 1)
    cs.c_topic = np.bincount(z_all, minlength=k).astype(np.int64)
    cs.n_tokens = int(z_all.shape[0])
    for d in subset:
        cs.c_doc[d] = np.bincount(slice_state.z[d], minlength=k).astype(np.int64)
    return cs


def apply_z_update(slice_state: SliceState, counts: CountSet, d: int, n: int,
                   z_old: int, z_new: int) -> None:
    """Point a single token at a new topic, maintaining all counts.

    Equivalent to re-running accumulate_counts after the change; a
    decrement that would go negative means the caller's bookkeeping is
    broken and raises.
    """
    if slice_state.z[d][n] != z_old:
        raise AssertionError(f"z[{d}][{n}] is {slice_state.z[d][n]}, expected {z_old}")
    if z_old == z_new:
        return
    w = int(slice_state.tokens[d][n])
    cd = counts.c_doc[d]
    if cd[z_old] <= 0 or counts.c_word_topic[z_old, w] <= 0 or counts.c_topic[z_old] <= 0:
        raise AssertionError("count underflow: stale z_old")
    slice_state.z[d][n] = z_new
    cd[z_old] -= 1
    cd[z_new] += 1
    counts.c_word_topic[z_old, w] -= 1
    counts.c_word_topic[z_new, w] += 1
    counts.c_topic[z_old] -= 1
    counts.c_topic[z_new] += 1


# ---------------------------------------------------------------------------
# Checkpoints: one versioned binary file per slice, little-endian throughout.
# Layout: magic, version, master_seed u64, iteration u32, T u32, K u32, V u32,
# D_t u32, slice_index u32, alpha (K f8), phi (K*V f8), eta (D_t*K f8),
# doc lengths (D_t u32), z (sum(lengths) i32).
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sBQIIIIII")


def checkpoint_path(directory, slice_index: int) -> Path:
    return Path(directory) / f"slice_{slice_index:04d}.dtmc"


def write_slice_checkpoint(directory, sl: SliceState, master_seed: int,
                           iteration: int, t_total: int) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    k, v, d_t = sl.k, sl.v, sl.n_docs
    lengths = np.asarray([len(z) for z in sl.z], dtype=np.uint32)
    z_flat = (np.concatenate(sl.z).astype("<i4") if d_t else np.empty(0, "<i4"))
    with open(checkpoint_path(directory, sl.slice_index), "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                              master_seed, iteration, t_total, k, v, d_t,
                              sl.slice_index))
        fh.write(sl.alpha.astype("<f8").tobytes())
        fh.write(sl.phi.astype("<f8").tobytes())
        fh.write(sl.eta.astype("<f8").tobytes())
        fh.write(lengths.astype("<u4").tobytes())
        fh.write(z_flat.tobytes())


def write_checkpoint(directory, state: ModelState, master_seed: int, iteration: int) -> None:
    for sl in state.slices:
        write_slice_checkpoint(directory, sl, master_seed, iteration, state.n_slices)


def read_slice_checkpoint(path) -> dict:
    """Decode one slice file into a dict of arrays plus header fields."""
    blob = Path(path).read_bytes()
    magic, version, master_seed, iteration, t_total, k, v, d_t, slice_index = \
        _HEADER.unpack_from(blob, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = _HEADER.size
    alpha = np.frombuffer(blob, "<f8", count=k, offset=off).copy()
    off += 8 * k
    phi = np.frombuffer(blob, "<f8", count=k * v, offset=off).reshape(k, v).copy()
    off += 8 * k * v
    eta = np.frombuffer(blob, "<f8", count=d_t * k, offset=off).reshape(d_t, k).copy()
    off += 8 * d_t * k
    lengths = np.frombuffer(blob, "<u4", count=d_t, offset=off).copy()
    off += 4 * d_t
    z_flat = np.frombuffer(blob, "<i4", count=int(lengths.sum()), offset=off)
    z = []
    pos = 0
    for n in lengths:
        z.append(z_flat[pos:pos + int(n)].astype(np.int32))
        pos += int(n)
    return {"master_seed": master_seed, "iteration": iteration, "T": t_total,
            "K": k, "V": v, "D_t": d_t, "slice_index": slice_index,
            "alpha": alpha, "phi": phi, "eta": eta, "z": z}


def load_checkpoint(directory, corpus: Corpus, hyper: Hyperparams) -> tuple[ModelState, int, int]:
    """Rebuild a ModelState from per-slice files; returns (state, seed, iteration).

    Dimensions must match the corpus and hyperparameters exactly.
    """
    directory = Path(directory)
    slices = []
    counts = []
    master_seed = None
    iteration = None
    for sl in corpus.slices:
        data = read_slice_checkpoint(checkpoint_path(directory, sl.slice_index))
        if data["K"] != hyper.K or data["V"] != corpus.vocabulary.size:
            raise ValueError(f"checkpoint dims (K={data['K']}, V={data['V']}) do not match "
                             f"model (K={hyper.K}, V={corpus.vocabulary.size})")
        if data["T"] != corpus.n_slices or data["D_t"] != sl.n_docs:
            raise ValueError(f"checkpoint slice {sl.slice_index} does not match corpus shape")
        tokens = [doc.tokens for doc in sl.docs]
        for zd, wd in zip(data["z"], tokens):
            if zd.shape[0] != wd.shape[0]:
                raise ValueError("checkpoint z lengths do not match corpus documents")
        state = SliceState(sl.slice_index, tokens, data["alpha"], data["phi"],
                           data["eta"], data["z"])
        slices.append(state)
        counts.append(accumulate_counts(state, range(sl.n_docs)))
        master_seed = data["master_seed"]
        iteration = data["iteration"]
    model = ModelState(hyper=hyper, slices=slices, counts=counts,
                       vocabulary_size=corpus.vocabulary.size)
    return model, int(master_seed), int(iteration)
