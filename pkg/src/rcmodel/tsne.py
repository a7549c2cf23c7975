"""Exact t-SNE.

Per-point Gaussian bandwidths are found by bisection on the precision so
that each conditional distribution has entropy log2(perplexity) bits.  The
2-D layout is optimised by gradient descent with momentum and per-parameter
gains on KL(P || Q), with early exaggeration over the first iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class TSNEResult:
    embedding: np.ndarray
    entropies: np.ndarray  # bits, per point
    betas: np.ndarray
    kl_history: list = field(default_factory=list)  # (iteration, KL)

    @property
    def initial_kl(self) -> float:
        return self.kl_history[0][1]

    @property
    def final_kl(self) -> float:
        return self.kl_history[-1][1]


def _sq_distances(x):
    sq = (x * x).sum(1)
    d = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def _row_entropy(d_row, beta):
    """Conditional probabilities and their entropy in bits for one row (self excluded)."""
    logits = -beta * (d_row - d_row.min())
    p = np.exp(logits)
    s = p.sum()
    p /= s
    # H = log(s) + beta * E[d - dmin], converted to bits
    h = (np.log(s) + beta * np.dot(p, d_row - d_row.min())) / np.log(2.0)
    return p, h


def conditional_affinities(x, perplexity: float, tol: float = 1e-6, max_iter: int = 200):
    """Row-stochastic P_{j|i} calibrated to ``perplexity``.

    Returns ``(P, entropies_in_bits, betas)``.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if not 1.0 <= perplexity < n:
        raise ValueError(f"perplexity must lie in [1, {n}), got {perplexity}")
    d = _sq_distances(x)
    target = np.log2(perplexity)
    P = np.zeros((n, n))
    ents = np.zeros(n)
    betas = np.ones(n)
    scale = np.median(d[d > 0]) if np.any(d > 0) else 1.0
    for i in range(n):
        row = np.delete(d[i], i)
        lo, hi = 0.0, np.inf
        beta = 1.0 / scale
        for _ in range(max_iter):
            p, h = _row_entropy(row, beta)
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (beta + lo) / 2.0
        P[i, np.arange(n) != i] = p
        ents[i] = h
        betas[i] = beta
    return P, ents, betas


def kl_divergence(P, Y) -> float:
    num = 1.0 / (1.0 + _sq_distances(Y))
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / num.sum(), 1e-300)
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))


def tsne(x, perplexity: float = 30.0, iterations: int = 1000, seed: int = 0,
         learning_rate: float | None = None, exaggeration: float = 12.0,
         exaggeration_iters: int = 250, kl_every: int = 50) -> TSNEResult:
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < 3:
        raise ValueError("t-SNE needs at least 3 points")
    cond, ents, betas = conditional_affinities(x, perplexity)
    P = (cond + cond.T) / (2.0 * n)
    P = np.maximum(P, 1e-300)
    np.fill_diagonal(P, 0.0)
    if learning_rate is None:
        learning_rate = max(n / exaggeration / 4.0, 50.0)

    rng = np.random.default_rng(seed)
    Y = rng.normal(0.0, 1e-4, size=(n, 2))
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    result = TSNEResult(Y, ents, betas, [(0, kl_divergence(P, Y))])
    for it in range(1, iterations + 1):
        exag = exaggeration if it <= exaggeration_iters else 1.0
        momentum = 0.5 if it <= exaggeration_iters else 0.8
        num = 1.0 / (1.0 + _sq_distances(Y))
        np.fill_diagonal(num, 0.0)
        Q = num / num.sum()
        W = (exag * P - Q) * num
        grad = 4.0 * (W.sum(1)[:, None] * Y - W @ Y)
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.clip(gains, 0.01, None, out=gains)
        update = momentum * update - learning_rate * gains * grad
        Y = Y + update
        Y = Y - Y.mean(0)
        if it % kl_every == 0 or it == iterations:
            result.kl_history.append((it, kl_divergence(P, Y)))
    result.embedding = Y
    return result
