"""Held-out perplexity via partially observed documents, plus topic
top-word extraction and trend export.

A test document's parameter is inferred from its observed half with the
model frozen, then the held-out half is scored under the induced
mixture p(w) = sum_k pi(eta)_k * pi(phi_k)_w.  The model is read-only
here, so test documents can be scored in parallel.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .corpus import HoldoutSplit, Vocabulary
from .kernels import (SgldSchedule, build_alias_table, refill_pool, rng_for,
                      softmax, softmax_rows)
from .model import Hyperparams, ModelState, SliceState
from .samplers import (MhProposalState, grad_log_post_eta, mh_sweep_document,
                       sgld_update_eta)


@dataclass(frozen=True)
class EvalConfig:
    inner_steps: int = 50
    schedule: SgldSchedule = field(default_factory=lambda: SgldSchedule(0.5, 100, 0.8))
    seed: int = 0
    posterior_mean: bool = False   # average pi(eta) over the last half of the
                                   # inner loop instead of taking the last sample


@dataclass(frozen=True)
class PerplexityReport:
    per_slice: tuple          # (slice_index, n_heldout, perplexity)
    overall: float            # exp of token-weighted mean negative log-likelihood
    slice_mean: float         # unweighted mean of per-slice perplexities
    n_heldout_tokens: int
    skipped_slices: tuple     # slices with no held-out tokens

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["slice", "n_heldout", "perplexity"])
            for t, n, p in self.per_slice:
                w.writerow([t, n, f"{p:.6f}"])
            w.writerow(["overall", self.n_heldout_tokens, f"{self.overall:.6f}"])
            w.writerow(["slice_mean", self.n_heldout_tokens, f"{self.slice_mean:.6f}"])

    def __str__(self) -> str:
        lines = [f"slice {t}: perplexity {p:.3f} over {n} held-out tokens"
                 for t, n, p in self.per_slice]
        lines.append(f"overall (token-weighted): {self.overall:.3f} "
                     f"over {self.n_heldout_tokens} tokens")
        lines.append(f"slice mean: {self.slice_mean:.3f}")
        for t in self.skipped_slices:
            lines.append(f"slice {t}: skipped (no held-out tokens)")
        return "\n".join(lines)


@dataclass(frozen=True)
class TopicTrend:
    topic: int
    per_slice_top_words: tuple  # (slice_index, ((term, probability), ...))


def _doc_proposals(eta: np.ndarray, word_prob, word_alias, rng) -> MhProposalState:
    table = build_alias_table(np.exp(eta - eta.max()))
    refill_pool(table, rng)
    return MhProposalState({0: table}, [], word_prob, word_alias, 0)


def infer_doc_eta(observed_tokens, phi_t: np.ndarray, alpha_t: np.ndarray,
                  hyper: Hyperparams, schedule: SgldSchedule, steps: int,
                  rng: np.random.Generator, word_tables=None,
                  posterior_mean: bool = False) -> np.ndarray:
    """Infer a document parameter from observed tokens with phi, alpha fixed.

    Runs the token-resampling + Langevin sub-loop for ``steps``
    iterations with the step-size schedule restarted at 0 (a cold
    document needs the early large steps).  ``steps == 0`` returns the
    initialization eta = alpha.
    """
    observed = np.asarray(observed_tokens, dtype=np.int32)
    if observed.size == 0:
        raise ValueError("cannot infer a document parameter from no tokens")
    eta = np.asarray(alpha_t, dtype=np.float64).copy()
    if steps == 0:
        return eta
    if word_tables is None:
        word_tables = build_word_tables(phi_t)
    word_prob, word_alias = word_tables
    n_d = observed.shape[0]
    z = rng.integers(0, hyper.K, size=n_d).astype(np.int32)

    # one-document state reusing the sweep machinery with phi frozen
    doc = SliceState(0, [observed], alpha_t.copy(), phi_t, eta[None, :].copy(), [z])
    pi_sum = np.zeros(hyper.K)
    n_avg = 0
    for i in range(steps):
        proposals = _doc_proposals(doc.eta[0], word_prob, word_alias, rng)
        doc.z[0] = mh_sweep_document(doc, 0, proposals, rng)
        c_doc = np.bincount(doc.z[0], minlength=hyper.K)
        g = grad_log_post_eta(doc.eta[0], alpha_t, c_doc, n_d, hyper.psi2,
                              doc.eta_log_norm[0])
        doc.eta[0] = sgld_update_eta(doc.eta[0], g, schedule.step(i), rng)
        doc.refresh_eta_norm([0])
        if posterior_mean and i >= steps // 2:
            pi_sum += softmax(doc.eta[0])
            n_avg += 1
    if posterior_mean and n_avg:
        # return the log of the averaged simplex point; downstream only
        # ever looks at softmax(eta), for which this is the average
        return np.log(pi_sum / n_avg)
    return doc.eta[0]


def build_word_tables(phi_t: np.ndarray):
    """Stacked word-proposal tables for a frozen phi (built once, shared)."""
    from .kernels import build_alias_matrix
    col_max = phi_t.max(axis=0)
    return build_alias_matrix(np.exp(phi_t - col_max).T)


def perplexity(split: HoldoutSplit, model: ModelState, eval_cfg: EvalConfig) -> PerplexityReport:
    """Score every held-out token under the partially-observed-document scheme.

    Per slice: exp(-sum(log p)/N_heldout); slices with no held-out
    tokens are omitted and listed separately.  Documents whose observed
    part is empty cannot be inferred and are skipped the same way.
    """
    by_slice: dict[int, list] = {}
    for td in split.test:
        by_slice.setdefault(td.slice_index, []).append(td)

    per_slice = []
    skipped = []
    total_ll = 0.0
    total_n = 0
    for t in sorted(by_slice):
        sl = model.slices[t - 1]
        soft_phi = softmax_rows(sl.phi)             # (K, V)
        word_tables = build_word_tables(sl.phi)
        ll = 0.0
        n = 0
        for j, td in enumerate(by_slice[t]):
            if td.heldout.size == 0 or td.observed.size == 0:
                continue
            rng = rng_for(eval_cfg.seed, "eval", t, j)
            eta_hat = infer_doc_eta(td.observed, sl.phi, sl.alpha, model.hyper,
                                    eval_cfg.schedule, eval_cfg.inner_steps, rng,
                                    word_tables=word_tables,
                                    posterior_mean=eval_cfg.posterior_mean)
            mix = softmax(eta_hat) @ soft_phi       # (V,)
            ll += float(np.log(mix[td.heldout]).sum())
            n += int(td.heldout.size)
        if n == 0:
            skipped.append(t)
            continue
        per_slice.append((t, n, float(np.exp(-ll / n))))
        total_ll += ll
        total_n += n
    if total_n == 0:
        raise ValueError("no held-out tokens anywhere in the split")
    overall = float(np.exp(-total_ll / total_n))
    slice_mean = float(np.mean([p for _, _, p in per_slice]))
    return PerplexityReport(per_slice=tuple(per_slice), overall=overall,
                            slice_mean=slice_mean, n_heldout_tokens=total_n,
                            skipped_slices=tuple(skipped))


def top_words(model: ModelState, vocabulary: Vocabulary, t: int, k: int,
              n: int) -> list:
    """Top-n (term, probability) of topic k at slice t, ties broken by word id."""
    sl = model.slices[t - 1]
    if n > sl.v:
        raise ValueError(f"n={n} exceeds vocabulary size {sl.v}")
    p = softmax(sl.phi[k])
    order = np.lexsort((np.arange(p.shape[0]), -p))[:n]
    return [(vocabulary.terms[int(w)], float(p[w])) for w in order]


def topic_trend(model: ModelState, vocabulary: Vocabulary, topic: int, n: int) -> TopicTrend:
    rows = tuple((sl.slice_index, tuple(top_words(model, vocabulary, sl.slice_index, topic, n)))
                 for sl in model.slices)
    return TopicTrend(topic=topic, per_slice_top_words=rows)


def export_trends(model: ModelState, vocabulary: Vocabulary, topics, n: int,
                  out_path) -> None:
    """CSV rows (topic, slice, rank, term, probability) for external plotting."""
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["topic", "slice", "rank", "term", "probability"])
        for k in topics:
            trend = topic_trend(model, vocabulary, k, n)
            for t, words in trend.per_slice_top_words:
                for rank, (term, p) in enumerate(words, start=1):
                    w.writerow([k, t, rank, term, f"{p:.12g}"])
