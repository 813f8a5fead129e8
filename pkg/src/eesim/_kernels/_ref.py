"""Pure-numpy reference kernels for the exit-decision scan.

Used when the compiled extension is unavailable, and as the ground truth
the compiled kernels are checked against. Semantics: a record exits at the
earliest ramp index j with score[n, j] strictly below thresholds[j].
"""

from __future__ import annotations

import numpy as np

# Rows of the threshold matrix processed per block; bounds peak memory at
# roughly block * N * R bytes of booleans.
_BLOCK = 2048


def exit_sites(scores: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Per-record exit index for one config; R (== no exit) when no ramp fires."""
    n, r = scores.shape
    if r == 0:
        return np.zeros(n, dtype=np.int64)
    hit = scores < thresholds[np.newaxis, :]
    first = hit.argmax(axis=1)
    none = ~hit.any(axis=1)
    out = first.astype(np.int64)
    out[none] = r
    return out


def eval_thresholds(
    scores: np.ndarray,
    correct_ext: np.ndarray,
    serve: np.ndarray,
    vanilla: float,
    thresholds: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Accuracy and mean latency savings for each row of `thresholds`.

    scores:      (N, R) per-record per-ramp decision scores
    correct_ext: (N, R+1) correctness of releasing at ramp j; column R is the
                 no-exit case (always 1.0)
    serve:       (R+1,) serve time when exiting at ramp j; entry R is no exit
    thresholds:  (C, R) configurations to evaluate
    """
    n, r = scores.shape
    c = thresholds.shape[0]
    acc = np.empty(c)
    savings = np.empty(c)
    if r == 0:
        acc[:] = 1.0
        savings[:] = vanilla - serve[0]
        return acc, savings
    rows = np.arange(n)
    for lo in range(0, c, _BLOCK):
        th = thresholds[lo : lo + _BLOCK]
        hit = scores[np.newaxis, :, :] < th[:, np.newaxis, :]
        first = hit.argmax(axis=2)
        none = ~hit.any(axis=2)
        sites = np.where(none, r, first)
        acc[lo : lo + _BLOCK] = correct_ext[rows[np.newaxis, :], sites].mean(axis=1)
        savings[lo : lo + _BLOCK] = vanilla - serve[sites].mean(axis=1)
    return acc, savings
