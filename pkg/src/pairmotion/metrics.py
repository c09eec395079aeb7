"""Distribution and retrieval metrics computed on evaluator embeddings."""
from __future__ import annotations

import numpy as np

from .errors import DatasetTooSmall, ShapeMismatch

COV_EPS = 1e-6


def _as2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatch(f"expected (count, dim), got {x.shape}")
    return x


def _psd_sqrt(mat):
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def fid_from_stats(mu1, sigma1, mu2, sigma2, eps: float = COV_EPS) -> float:
    """Frechet distance between two Gaussians.

    The trace of ``(S1 S2)^(1/2)`` is evaluated as the trace of the square root of
    the symmetric matrix ``S1^(1/2) S2 S1^(1/2)``; both covariances get ``eps*I``.
    """
    mu1, mu2 = np.asarray(mu1, dtype=np.float64), np.asarray(mu2, dtype=np.float64)
    s1 = np.asarray(sigma1, dtype=np.float64) + eps * np.eye(len(mu1))
    s2 = np.asarray(sigma2, dtype=np.float64) + eps * np.eye(len(mu2))
    r1 = _psd_sqrt(s1)
    vals = np.linalg.eigvalsh(r1 @ s2 @ r1)
    tr_covmean = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(s1) + np.trace(s2) - 2 * tr_covmean)


def fid(real_embs, gen_embs) -> float:
    real, gen = _as2d(real_embs), _as2d(gen_embs)
    if len(real) < 2 or len(gen) < 2:
        raise DatasetTooSmall("FID needs at least two embeddings per set")
    return fid_from_stats(real.mean(0), np.cov(real, rowvar=False), gen.mean(0), np.cov(gen, rowvar=False))


def r_precision(text_embs, motion_embs, pool_size: int = 32, top_k=(1, 2, 3), rng=None) -> dict[int, float]:
    """Fraction of motions whose own caption ranks within ``k`` among ``pool_size - 1`` random distractors.

    Ranking is by Euclidean distance; the rank is the number of distractors
    strictly closer than the matched caption.
    """
    text, motion = _as2d(text_embs), _as2d(motion_embs)
    if text.shape != motion.shape:
        raise ShapeMismatch("text and motion embeddings must be matched row-for-row")
    n = len(text)
    if n < pool_size:
        raise DatasetTooSmall(f"need at least {pool_size} samples, got {n}")
    rng = np.random.default_rng(rng)
    ranks = np.empty(n, dtype=np.int64)
    for i in range(n):
        others = rng.choice(n - 1, size=pool_size - 1, replace=False)
        others = others + (others >= i)
        true_d = np.linalg.norm(motion[i] - text[i])
        ranks[i] = np.sum(np.linalg.norm(text[others] - motion[i], axis=-1) < true_d)
    return {k: float(np.mean(ranks < k)) for k in top_k}


def mm_dist(text_embs, motion_embs) -> float:
    text, motion = _as2d(text_embs), _as2d(motion_embs)
    if text.shape != motion.shape:
        raise ShapeMismatch("text and motion embeddings must be matched row-for-row")
    return float(np.linalg.norm(text - motion, axis=-1).mean())


def _all_pairs_mean(embs) -> float:
    i, j = np.triu_indices(len(embs), k=1)
    return float(np.linalg.norm(embs[i] - embs[j], axis=-1).mean())


def diversity(embs, n_pairs: int | None = 300, rng=None) -> float:
    """Mean distance over ``n_pairs`` random pairs; ``n_pairs=None`` averages every distinct pair."""
    embs = _as2d(embs)
    if len(embs) < 2:
        raise DatasetTooSmall("diversity needs at least two embeddings")
    if n_pairs is None:
        return _all_pairs_mean(embs)
    if len(embs) < n_pairs:
        raise DatasetTooSmall(f"need at least {n_pairs} embeddings, got {len(embs)}")
    rng = np.random.default_rng(rng)
    a = rng.choice(len(embs), n_pairs, replace=False)
    b = rng.choice(len(embs), n_pairs, replace=False)
    return float(np.linalg.norm(embs[a] - embs[b], axis=-1).mean())


def multimodality(per_prompt_embs, n_pairs: int | None = 10, rng=None) -> float:
    """Mean distance between generations for the same prompt.

    ``per_prompt_embs`` is a sequence of ``(samples, dim)`` arrays, one per prompt.
    """
    groups = [_as2d(g) for g in per_prompt_embs]
    if not groups or any(len(g) < 2 for g in groups):
        raise DatasetTooSmall("every prompt needs at least two generations")
    if n_pairs is None:
        return float(np.mean([_all_pairs_mean(g) for g in groups]))
    rng = np.random.default_rng(rng)
    dists = []
    for g in groups:
        a = rng.integers(0, len(g), n_pairs)
        b = (a + rng.integers(1, len(g), n_pairs)) % len(g)
        dists.append(np.linalg.norm(g[a] - g[b], axis=-1))
    return float(np.mean(dists))
