"""Per-slice training loop: mini-batch selection, the Jacobi-relaxed
block updates (eta | phi | z in parallel against a frozen snapshot),
then the exact alpha draw.

Every random draw comes from a stream keyed by logical coordinates
(seed, block, slice, iteration, unit), so the result is identical for
any thread count and for a resumed run.
"""

from __future__ import annotations

import csv
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus
from .kernels import SgldSchedule, rng_for
from .model import (CountSet, Hyperparams, ModelState, SliceState,
                    accumulate_counts, init_state, write_checkpoint)
from .samplers import (NeighborContext, grad_log_post_eta, grad_log_post_phi,
                       mh_sweep_document, rebuild_proposals, sample_alpha,
                       sgld_update_eta, sgld_update_phi)

METRICS_FIELDS = ("iteration", "slice", "ms_counts", "ms_eta", "ms_phi",
                  "ms_z", "ms_alpha", "log_joint", "eps_eta", "eps_phi")


class NumericError(RuntimeError):
    """A parameter block went non-finite; names the block for diagnosis."""

    def __init__(self, block: str, slice_index: int, iteration: int):
        super().__init__(f"non-finite values in block '{block}' "
                         f"(slice {slice_index}, iteration {iteration})")
        self.block = block
        self.slice_index = slice_index
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 60
    minibatch_size: int = 60
    schedule_eta: SgldSchedule = field(default_factory=lambda: SgldSchedule(0.5, 100, 0.8))
    schedule_phi: SgldSchedule = field(default_factory=lambda: SgldSchedule(0.5, 100, 0.8))
    threads_per_slice: int = 3
    seed: int = 0
    checkpoint_every: int = 0          # 0: only the final checkpoint
    checkpoint_dir: str | None = None
    metrics_path: str | None = None
    debug_checks: bool = False

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.minibatch_size < 1:
            raise ValueError("minibatch_size must be >= 1")
        if self.threads_per_slice < 1:
            raise ValueError("threads_per_slice must be >= 1")


@dataclass(frozen=True)
class IterationSnapshot:
    """Frozen inputs of one iteration: previous-iteration slice values
    plus the mini-batch counts tallied from them.  Nothing in here is
    written during the iteration."""

    state: SliceState
    counts: CountSet
    minibatch: np.ndarray


def select_minibatch(n_docs: int, d_m: int, rng: np.random.Generator) -> np.ndarray:
    """d_m distinct uniform doc indices, ascending; all docs if d_m >= D_t."""
    if n_docs <= 0:
        return np.empty(0, dtype=np.int64)
    if d_m >= n_docs:
        return np.arange(n_docs, dtype=np.int64)
    return np.sort(rng.choice(n_docs, size=d_m, replace=False)).astype(np.int64)


def _chunks(items, n_chunks: int):
    items = list(items)
    if not items:
        return []
    n_chunks = min(n_chunks, len(items))
    return [list(c) for c in np.array_split(np.asarray(items, dtype=np.int64), n_chunks)]


def run_iteration(prev: SliceState, neighbors_alpha: NeighborContext,
                  neighbors_phi: NeighborContext, hyper: Hyperparams,
                  cfg: TrainConfig, iteration: int) -> tuple[SliceState, CountSet, dict]:
    """Advance one slice by one iteration against its frozen snapshot.

    Block order: counts, then (eta | phi | z) which read only the
    snapshot and may run on separate threads, then alpha from the
    post-update eta mean.  Returns the next slice state, the mini-batch
    counts, and a metrics row.
    """
    t = prev.slice_index
    seed = cfg.seed
    d_t = prev.n_docs

    t0 = time.perf_counter()
    minibatch = select_minibatch(d_t, cfg.minibatch_size, rng_for(seed, "minibatch", t, iteration))
    snapshot = IterationSnapshot(state=prev,
                                 counts=accumulate_counts(prev, minibatch),
                                 minibatch=minibatch)
    ms_counts = (time.perf_counter() - t0) * 1e3
    if cfg.debug_checks:
        snapshot.counts.validate(prev.tokens)

    # every block below reads only the snapshot and writes only its own
    # output arrays; that is what lets them run on separate threads
    snap = snapshot.state
    counts = snapshot.counts

    eps_eta = cfg.schedule_eta.step(iteration)
    eps_phi = cfg.schedule_phi.step(iteration)
    batch_scale = (d_t / minibatch.shape[0]) if minibatch.shape[0] else 0.0

    eta_next = snap.eta.copy()
    phi_next = np.empty_like(snap.phi)
    z_next = list(snap.z)
    timings = {}
    timings_lock = threading.Lock()

    def add_timing(key, start):
        with timings_lock:
            timings[key] = timings.get(key, 0.0) + (time.perf_counter() - start)

    def eta_block(docs):
        start = time.perf_counter()
        try:
            for d in docs:
                g = grad_log_post_eta(snap.eta[d], snap.alpha, counts.c_doc[d],
                                      len(snap.tokens[d]), hyper.psi2,
                                      snap.eta_log_norm[d])
                eta_next[d] = sgld_update_eta(snap.eta[d], g, eps_eta,
                                              rng_for(seed, "eta", t, iteration, d))
        except FloatingPointError as exc:
            raise NumericError("eta", t, iteration) from exc
        add_timing("eta", start)

    def phi_block(rows):
        start = time.perf_counter()
        try:
            for k in rows:
                g = grad_log_post_phi(snap.phi[k], neighbors_phi.row(k),
                                      counts.c_word_topic[k], int(counts.c_topic[k]),
                                      hyper.beta2, batch_scale, snap.phi_log_norm[k])
                phi_next[k] = sgld_update_phi(snap.phi[k], g, eps_phi,
                                              rng_for(seed, "phi", t, iteration, k))
        except FloatingPointError as exc:
            raise NumericError("phi", t, iteration) from exc
        add_timing("phi", start)

    start_z = time.perf_counter()
    proposals = rebuild_proposals(snap, minibatch, iteration,
                                  rng_for(seed, "tables", t, iteration))
    ms_tables = time.perf_counter() - start_z

    def z_block(docs):
        start = time.perf_counter()
        for d in docs:
            z_next[d] = mh_sweep_document(snap, d, proposals,
                                          rng_for(seed, "z", t, iteration, d))
        add_timing("z", start)

    n_threads = cfg.threads_per_slice
    if n_threads == 1:
        eta_block(minibatch)
        phi_block(range(hyper.K))
        z_block(minibatch)
    else:
        per_block = max(1, n_threads // 3)
        tasks = ([(eta_block, c) for c in _chunks(minibatch, per_block)]
                 + [(phi_block, c) for c in _chunks(range(hyper.K), per_block)]
                 + [(z_block, c) for c in _chunks(minibatch, per_block)])
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            futures = [pool.submit(fn, chunk) for fn, chunk in tasks]
            for f in futures:
                f.result()

    if not np.all(np.isfinite(eta_next)):
        raise NumericError("eta", t, iteration)
    if not np.all(np.isfinite(phi_next)):
        raise NumericError("phi", t, iteration)

    t0 = time.perf_counter()
    if minibatch.shape[0]:
        eta_bar = eta_next[minibatch].mean(axis=0)
    else:
        eta_bar = np.zeros(hyper.K)
    # the likelihood precision uses the true D_t; eta_bar is the batch estimate
    alpha_next = sample_alpha(neighbors_alpha, eta_bar, d_t, hyper,
                              rng_for(seed, "alpha", t, iteration))
    ms_alpha = (time.perf_counter() - t0) * 1e3
    if not np.all(np.isfinite(alpha_next)):
        raise NumericError("alpha", t, iteration)

    nxt = SliceState(t, snap.tokens, alpha_next, phi_next, eta_next, z_next)
    if cfg.debug_checks:
        recheck = accumulate_counts(snap, minibatch)
        if not recheck.equals(counts):
            raise AssertionError("snapshot counts were mutated during the iteration")
        nxt.validate_normalizers()

    lj = log_joint_proxy(nxt, neighbors_alpha, neighbors_phi, minibatch, hyper)
    row = {"iteration": iteration, "slice": t,
           "ms_counts": round(ms_counts, 3),
           "ms_eta": round(timings.get("eta", 0.0) * 1e3, 3),
           "ms_phi": round(timings.get("phi", 0.0) * 1e3, 3),
           "ms_z": round((timings.get("z", 0.0) + ms_tables) * 1e3, 3),
           "ms_alpha": round(ms_alpha, 3),
           "log_joint": lj, "eps_eta": eps_eta, "eps_phi": eps_phi}
    return nxt, counts, row


def log_joint_proxy(state: SliceState, neighbors_alpha: NeighborContext,
                    neighbors_phi: NeighborContext, minibatch, hyper: Hyperparams) -> float:
    """Unnormalized log posterior over the mini-batch, for trend monitoring.

    Chain priors plus the mini-batch document priors and token
    likelihoods, the latter two rescaled to full-slice size.
    """
    lj = 0.0
    for nb in (neighbors_alpha.left, neighbors_alpha.right):
        if nb is not None:
            lj -= float(((state.alpha - nb) ** 2).sum()) / (2 * hyper.sigma2)
    for nb in (neighbors_phi.left, neighbors_phi.right):
        if nb is not None:
            lj -= float(((state.phi - nb) ** 2).sum()) / (2 * hyper.beta2)
    mb = np.asarray(minibatch, dtype=np.int64)
    if mb.shape[0] == 0:
        return lj
    scale = state.n_docs / mb.shape[0]
    diff = state.eta[mb] - state.alpha[None, :]
    lj -= scale * float((diff ** 2).sum()) / (2 * hyper.psi2)
    tok = 0.0
    for d in mb:
        z = state.z[d]
        w = state.tokens[d]
        tok += float((state.eta[d][z] - state.eta_log_norm[d]).sum())
        tok += float((state.phi[z, w] - state.phi_log_norm[z]).sum())
    return lj + scale * tok


@dataclass
class TrainResult:
    state: ModelState
    metrics: list
    iterations_done: int


def _neighbor_contexts(alphas, phis, t: int, n_slices: int):
    """Neighbor values for slice t (1-based); t=1 sees the zero anchor."""
    k, v = phis[0].shape
    a_left = alphas[t - 2] if t > 1 else np.zeros(k)
    p_left = phis[t - 2] if t > 1 else np.zeros((k, v))
    a_right = alphas[t] if t < n_slices else None
    p_right = phis[t] if t < n_slices else None
    return (NeighborContext(left=a_left, right=a_right),
            NeighborContext(left=p_left, right=p_right))


def train(corpus: Corpus, hyper: Hyperparams, cfg: TrainConfig, *,
          state: ModelState | None = None, start_iteration: int = 0,
          metrics_sink=None) -> TrainResult:
    """Run cfg.iterations blockwise iterations over all slices in-process.

    Slices advance in lockstep: every slice's update reads its
    neighbors' previous-iteration values, exactly as the distributed
    runner does, so both paths produce identical states.  Pass ``state``
    and ``start_iteration`` to resume.
    """
    if state is None:
        state = init_state(corpus, hyper, cfg.seed)
    metrics: list[dict] = []
    writer = _MetricsWriter(cfg.metrics_path, append=start_iteration > 0)
    n = state.n_slices
    try:
        for i in range(start_iteration, start_iteration + cfg.iterations):
            alphas = [sl.alpha for sl in state.slices]
            phis = [sl.phi for sl in state.slices]
            for idx in range(n):
                t = idx + 1
                nb_alpha, nb_phi = _neighbor_contexts(alphas, phis, t, n)
                nxt, counts, row = run_iteration(state.slices[idx], nb_alpha,
                                                 nb_phi, hyper, cfg, i)
                state.slices[idx] = nxt
                state.counts[idx] = counts
                metrics.append(row)
                writer.write(row)
                if metrics_sink is not None:
                    metrics_sink(row)
            if (cfg.checkpoint_dir and cfg.checkpoint_every
                    and (i + 1 - start_iteration) % cfg.checkpoint_every == 0):
                write_checkpoint(cfg.checkpoint_dir, state, cfg.seed, i + 1)
        if cfg.checkpoint_dir:
            write_checkpoint(cfg.checkpoint_dir, state, cfg.seed,
                             start_iteration + cfg.iterations)
    finally:
        writer.close()
    return TrainResult(state=state, metrics=metrics,
                       iterations_done=start_iteration + cfg.iterations)


class _MetricsWriter:
    """Appends metrics rows to a CSV file as they are produced."""

    def __init__(self, path, append: bool = False):
        self._fh = None
        self._writer = None
        if path:
            exists = append
            self._fh = open(path, "a" if append else "w", newline="")
            self._writer = csv.DictWriter(self._fh, fieldnames=METRICS_FIELDS)
            if not exists:
                self._writer.writeheader()

    def write(self, row: dict) -> None:
        if self._writer is not None:
            self._writer.writerow(row)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def metrics_to_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_FIELDS)
        w.writeheader()
        for row in sorted(rows, key=lambda r: (r["iteration"], r["slice"])):
            w.writerow(row)
