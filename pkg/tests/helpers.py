"""Shared test utilities: central finite differences as the gradient oracle.

The checker is deliberately independent of the package's backward functions;
it only calls forward code.
"""

import numpy as np


def central_diff(f, x, h=1e-6):
    """Numeric gradient of scalar f with respect to array x, one coordinate
    at a time, using central differences. x must be float64."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_err(analytic, numeric):
    """Max elementwise relative error with a floor so near-zero pairs compare
    on absolute terms."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-4)
    return float(np.max(np.abs(a - n) / denom))


def nearest_centroid_war(features, manifest, fold):
    """Held-out accuracy of a nearest-centroid classifier on per-clip mean
    MFCC vectors: the reference baseline a sequence model has to beat."""
    by_id = {fm.clip_id: fm for fm in features}
    pooled = np.stack([by_id[e.path].frames[:by_id[e.path].true_len].mean(axis=0)
                       for e in manifest.entries])
    labels = np.array([manifest.label_set.index(e.label)
                       for e in manifest.entries])
    train_idx, test_idx = np.array(fold[0]), np.array(fold[1])
    centroids = np.stack([pooled[train_idx][labels[train_idx] == c].mean(axis=0)
                          for c in range(len(manifest.label_set))])
    dists = ((pooled[test_idx][:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    return float((dists.argmin(axis=1) == labels[test_idx]).mean())
