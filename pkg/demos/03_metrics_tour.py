"""Evaluation metrics on synthetic embeddings with known answers.

    python demos/03_metrics_tour.py
"""
import numpy as np

from pairmotion.metrics import diversity, fid, fid_from_stats, mm_dist, multimodality, r_precision


def unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def main():
    rng = np.random.default_rng(0)
    real = rng.normal(size=(500, 8))
    print(f"FID(real, real)            = {fid(real, real):.2e}")
    print(f"FID(real, real + 1)        = {fid(real, real + 1.0):.3f}   (mean shift of 1 in 8 dims ~ 8)")
    s1, s2 = np.diag([1.0, 0.0]), np.diag([4.0, 0.0])
    print(f"N(0,1) vs N(1,4) closed form = {fid_from_stats(np.zeros(2), s1, np.array([1.0, 0]), s2):.6f}  (2)")

    text = unit(rng.normal(size=(64, 16)))
    noisy = unit(text + rng.normal(scale=0.5, size=text.shape))
    print("R-precision aligned      ", r_precision(text, text, rng=0))
    print("R-precision noisy        ", r_precision(text, noisy, rng=0))
    print("R-precision unrelated    ", r_precision(text, unit(rng.normal(size=text.shape)), rng=0), "(chance 1/32)")
    print(f"MM-Dist noisy            = {mm_dist(text, noisy):.3f}")
    print(f"diversity (all pairs)    = {diversity(text, n_pairs=None):.3f}  (unit vectors in 16-d ~ sqrt 2)")
    groups = [unit(t + rng.normal(scale=0.1, size=(5, 16))) for t in text[:10]]
    print(f"multimodality (tight)    = {multimodality(groups, n_pairs=None):.3f}")


if __name__ == "__main__":
    main()
