"""Linear-chain CRF over frozen per-page scores.

The encoder is used purely as a feature extractor: its saved logits become
log-softmax emissions, and only the CRF's own parameters (start scores, a
transition matrix, and one positive emission scale) are fit, by gradient
ascent on the regularized sequence log-likelihood.  No gradient ever reaches
the encoder.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(eq=False)
class CrfModel:
    """transition[i, j] scores label j following label i; no end scores."""

    transition: np.ndarray
    start: np.ndarray
    emission_scale: float = 1.0

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.start = np.asarray(self.start, dtype=np.float64)
        n = self.start.shape[0]
        if self.transition.shape != (n, n):
            raise ValueError("transition must be n x n matching start")
        if not (np.all(np.isfinite(self.transition))
                and np.all(np.isfinite(self.start))
                and np.isfinite(self.emission_scale)):
            raise ValueError("CRF parameters must be finite")

    @property
    def n(self) -> int:
        return self.start.shape[0]


def emissions_from_logits(logits: np.ndarray) -> np.ndarray:
    """Log-softmax emissions from frozen per-page score vectors (l x n)."""
    logits = np.asarray(logits, dtype=np.float64)
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _logsumexp(x, axis=None):
    if axis is None:
        m = float(np.max(x))
        return m + float(np.log(np.sum(np.exp(x - m))))
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def crf_path_score(model: CrfModel, emissions: np.ndarray,
                   labels: Sequence[int]) -> float:
    """Unnormalized score of one label path."""
    labels = list(labels)
    s = model.start[labels[0]] + model.emission_scale * emissions[0, labels[0]]
    for t in range(1, len(labels)):
        s += model.transition[labels[t - 1], labels[t]]
        s += model.emission_scale * emissions[t, labels[t]]
    return float(s)


def crf_log_forward(model: CrfModel, emissions: np.ndarray) -> float:
    """log Z by the forward recursion (log-sum-exp over all n^l paths)."""
    emissions = np.asarray(emissions, dtype=np.float64)
    alpha = model.start + model.emission_scale * emissions[0]
    for t in range(1, emissions.shape[0]):
        alpha = model.emission_scale * emissions[t] + \
            _logsumexp(alpha[:, None] + model.transition, axis=0)
    return float(_logsumexp(alpha))


def crf_viterbi(model: CrfModel, emissions: np.ndarray) -> tuple[list[int], float]:
    """Best label path and its score; ties break toward the lower label index
    at every backpointer (argmax picks the first maximum)."""
    emissions = np.asarray(emissions, dtype=np.float64)
    length = emissions.shape[0]
    delta = model.start + model.emission_scale * emissions[0]
    pointers = np.zeros((length, model.n), dtype=np.int64)
    for t in range(1, length):
        candidates = delta[:, None] + model.transition
        pointers[t] = np.argmax(candidates, axis=0)
        delta = model.emission_scale * emissions[t] + np.max(candidates, axis=0)
    best_last = int(np.argmax(delta))
    path = [best_last]
    for t in range(length - 1, 0, -1):
        path.append(int(pointers[t, path[-1]]))
    path.reverse()
    return path, float(np.max(delta))


def crf_forward_backward(model: CrfModel, emissions: np.ndarray):
    """Posterior unary marginals (l x n), pairwise marginals ((l-1) x n x n),
    and log Z, all in a numerically stable log-space recursion."""
    emissions = np.asarray(emissions, dtype=np.float64)
    length, n = emissions.shape
    scaled = model.emission_scale * emissions
    alpha = np.zeros((length, n))
    alpha[0] = model.start + scaled[0]
    for t in range(1, length):
        alpha[t] = scaled[t] + _logsumexp(alpha[t - 1][:, None] + model.transition,
                                          axis=0)
    beta = np.zeros((length, n))
    for t in range(length - 2, -1, -1):
        beta[t] = _logsumexp(model.transition + scaled[t + 1] + beta[t + 1],
                             axis=1)
    log_z = float(_logsumexp(alpha[-1]))
    unary = np.exp(alpha + beta - log_z)
    pair = np.zeros((max(length - 1, 0), n, n))
    for t in range(length - 1):
        joint = alpha[t][:, None] + model.transition + scaled[t + 1] + beta[t + 1]
        pair[t] = np.exp(joint - log_z)
    return unary, pair, log_z


def crf_log_likelihood_and_grad(model: CrfModel,
                                emission_seqs: Sequence[np.ndarray],
                                gold_seqs: Sequence[Sequence[int]],
                                l2: float = 0.0):
    """Sum over sequences of [gold path score - log Z] minus l2 * ||T||^2,
    with its gradient w.r.t. (transition, start, emission_scale).

    The gradient is empirical-minus-expected feature counts from the
    forward-backward marginals.
    """
    if len(emission_seqs) != len(gold_seqs):
        raise ValueError("emissions and gold label sequences must align")
    n = model.n
    ll = 0.0
    grad_t = np.zeros((n, n))
    grad_start = np.zeros(n)
    grad_scale = 0.0
    for emissions, gold in zip(emission_seqs, gold_seqs):
        emissions = np.asarray(emissions, dtype=np.float64)
        gold = list(gold)
        if emissions.shape[0] != len(gold):
            raise ValueError("emission/label length mismatch")
        unary, pair, log_z = crf_forward_backward(model, emissions)
        ll += crf_path_score(model, emissions, gold) - log_z
        grad_start[gold[0]] += 1.0
        grad_start -= unary[0]
        for t in range(1, len(gold)):
            grad_t[gold[t - 1], gold[t]] += 1.0
        grad_t -= pair.sum(axis=0)
        gold_emission = sum(emissions[t, y] for t, y in enumerate(gold))
        grad_scale += gold_emission - float((unary * emissions).sum())
    ll -= l2 * float((model.transition ** 2).sum())
    grad_t -= 2.0 * l2 * model.transition
    return ll, grad_t, grad_start, grad_scale


def crf_fit(emission_seqs: Sequence[np.ndarray],
            gold_seqs: Sequence[Sequence[int]],
            n_classes: int,
            l2: float = 0.0,
            tol: float = 1e-6,
            max_iter: int = 1000) -> CrfModel:
    """Maximize the regularized log-likelihood by gradient ascent with
    Barzilai-Borwein step sizes safeguarded by a backtracking line search
    (the objective is concave in all parameters).

    Converges when the gradient max-norm falls under ``tol``; otherwise a
    non-convergence warning is emitted and the last iterate returned.
    The emission scale is floored at a small positive value.
    """
    def pack(m):
        return np.concatenate([m.transition.ravel(), m.start, [m.emission_scale]])

    def unpack(x):
        t = x[:n_classes * n_classes].reshape(n_classes, n_classes)
        return CrfModel(transition=t, start=x[n_classes * n_classes:-1],
                        emission_scale=float(x[-1]))

    def objective(x):
        m = unpack(x)
        ll, g_t, g_s, g_e = crf_log_likelihood_and_grad(
            m, emission_seqs, gold_seqs, l2)
        return ll, np.concatenate([g_t.ravel(), g_s, [g_e]])

    x = pack(CrfModel(transition=np.zeros((n_classes, n_classes)),
                      start=np.zeros(n_classes), emission_scale=1.0))
    ll, g = objective(x)
    step = 1.0 / max(1, len(gold_seqs))
    prev_x = prev_g = None
    for _ in range(max_iter):
        # projected gradient: a downhill scale direction at the floor is inactive
        proj = g.copy()
        if x[-1] <= 1e-6 and proj[-1] < 0:
            proj[-1] = 0.0
        grad_norm = float(np.abs(proj).max())
        if grad_norm <= tol:
            return unpack(x)
        if prev_x is not None:
            s = x - prev_x
            y = g - prev_g
            sy = float(s @ y)       # negative for a concave objective
            if sy < 0:
                step = float(s @ s) / -sy
            step = min(max(step, 1e-12), 1e4)
        sq_norm = float(proj @ proj)
        accepted = False
        trial = step
        while trial >= 1e-15:
            cand = x + trial * proj
            cand[-1] = max(cand[-1], 1e-6)  # keep the scale at or above its floor
            new_ll, new_g = objective(cand)
            if new_ll >= ll + 1e-4 * trial * sq_norm:
                prev_x, prev_g = x, g
                x, ll, g = cand, new_ll, new_g
                accepted = True
                break
            trial *= 0.5
        if not accepted:
            warnings.warn("CRF line search stalled before reaching tolerance")
            return unpack(x)
    warnings.warn(f"CRF fit did not converge in {max_iter} iterations "
                  f"(gradient max-norm {grad_norm:.3e})")
    return unpack(x)


def decode_documents(model: CrfModel,
                     emission_seqs: Sequence[np.ndarray]) -> list[list[int]]:
    return [crf_viterbi(model, e)[0] for e in emission_seqs]
