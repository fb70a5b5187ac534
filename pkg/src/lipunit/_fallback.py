"""Pure-Python/numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np


def levenshtein(ref, hyp) -> int:
    ref, hyp = list(ref), list(hyp)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j - 1] + (r != h), prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[-1]


def assign_nearest(x, centroids, chunk=4096):
    # accumulate over the feature axis in order so sums match the compiled loop bit-for-bit
    n = x.shape[0]
    labels = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=np.float64)
    for start in range(0, n, chunk):
        xs = x[start:start + chunk]
        acc = np.zeros((xs.shape[0], centroids.shape[0]))
        for j in range(x.shape[1]):
            diff = xs[:, j:j + 1] - centroids[None, :, j]
            acc += diff * diff
        lab = np.argmin(acc, axis=1)  # first minimum -> lowest index on ties
        labels[start:start + chunk] = lab
        dist[start:start + chunk] = acc[np.arange(len(lab)), lab]
    return labels, dist


def centroid_sums(x, labels, k):
    sums = np.zeros((k, x.shape[1]))
    counts = np.zeros(k, dtype=np.int64)
    for i in range(x.shape[0]):
        c = labels[i]
        counts[c] += 1
        sums[c] += x[i]
    return sums, counts
