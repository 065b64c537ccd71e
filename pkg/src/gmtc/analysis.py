"""Interpretability tools: activation map export, 2-D image entropy, and a
small autoencoder that projects pooled high-level features to 2-D.

Maps and entropies are computed on the real (unpadded) frames of each clip;
the autoencoder instead consumes the same GAP-pooled vectors the classifier
head sees, so projections reflect the trained decision space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .dsp import FeatureMatrix, unpad
from .errors import DataError
from .model import ModelConfig, forward_with_maps

AE_WIDTH = 39
# encoder 39->64->16->8->2, decoder 2->8->16->128->39; the 128-wide decoder
# stage is intentional even though the output is only 39 wide
AE_LAYERS = [(39, 64), (64, 16), (16, 8), (8, 2),
             (2, 8), (8, 16), (16, 128), (128, 39)]
AE_BOTTLENECK_INDEX = 3  # output of this layer is the 2-D code, kept linear
AE_MIN_SAMPLES = 10


@dataclass
class FeatureMap:
    values: np.ndarray  # (T, C) raw activations
    u8: np.ndarray      # per-map min-max normalized view
    source: str         # input | gcb_i | gtcm_output


def normalize_u8(values: np.ndarray) -> np.ndarray:
    """Min-max normalize one map to [0, 255]; constant maps go to zero."""
    lo = float(values.min())
    hi = float(values.max())
    if hi == lo:
        return np.zeros(values.shape, dtype=np.uint8)
    scaled = (values.astype(np.float64) - lo) * (255.0 / (hi - lo))
    return np.rint(scaled).astype(np.uint8)


def export_feature_maps(cfg: ModelConfig, params: dict,
                        fm: FeatureMatrix) -> list[FeatureMap]:
    """Per-stage activation maps of one clip: the input features, each
    block's output, and the post-activation skip output (n_gcb + 2 maps)."""
    x = unpad(fm).astype(np.float32)
    _, maps = forward_with_maps(x, cfg, params)
    tags = ["input"] + [f"gcb_{i}" for i in range(1, cfg.n_gcb + 1)] + ["gtcm_output"]
    return [FeatureMap(values=m, u8=normalize_u8(m), source=tag)
            for m, tag in zip(maps, tags)]


def entropy_2d(img: np.ndarray) -> float:
    """2-D Shannon entropy of a u8 image in bits.

    Each pixel m pairs with n = round(mean of its non-padding 3x3
    neighbors); the entropy is taken over the joint (m, n) histogram
    normalized by the pixel count.
    """
    img = np.asarray(img)
    if img.ndim != 2 or min(img.shape) < 2:
        raise DataError(f"entropy needs a 2-D image at least 2x2, got {img.shape}")
    if img.dtype != np.uint8:
        if np.issubdtype(img.dtype, np.integer) and img.min() >= 0 and img.max() <= 255:
            img = img.astype(np.uint8)
        else:
            raise DataError("entropy expects u8 pixel values")
    w, h = img.shape
    vals = img.astype(np.float64)
    padded = np.pad(vals, 1)
    ones = np.pad(np.ones_like(vals), 1)
    window = np.zeros_like(vals)
    count = np.zeros_like(vals)
    for di in range(3):
        for dj in range(3):
            window += padded[di : di + w, dj : dj + h]
            count += ones[di : di + w, dj : dj + h]
    neighbor_mean = (window - vals) / (count - 1)
    n = np.rint(neighbor_mean).astype(np.int64)
    m = img.astype(np.int64)
    joint = np.bincount((m * 256 + n).ravel(), minlength=256 * 256)
    p = joint[joint > 0] / (w * h)
    return float(-(p * np.log2(p)).sum())


def pgm_bytes(img: np.ndarray) -> bytes:
    """Binary PGM (P5) encoding of a u8 image; rows become image rows."""
    if img.dtype != np.uint8 or img.ndim != 2:
        raise DataError("PGM export needs a 2-D u8 image")
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def map_csv(values: np.ndarray) -> str:
    return "\n".join(",".join(repr(float(v)) for v in row) for row in values) + "\n"


@dataclass
class AeModel:
    params: dict[str, np.ndarray]


def _ae_init(seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for i, (c_in, c_out) in enumerate(AE_LAYERS):
        params[f"l{i}.w"] = ops.xavier_uniform((c_out, c_in), c_in, c_out, rng)
        params[f"l{i}.b"] = np.zeros(c_out, dtype=np.float32)
    return params


def _ae_forward(params: dict, x: np.ndarray, upto: int = len(AE_LAYERS)):
    h = x
    cache = []
    for i in range(upto):
        z = ops.dense(h, params[f"l{i}.w"], params[f"l{i}.b"])
        linear = i in (AE_BOTTLENECK_INDEX, len(AE_LAYERS) - 1)
        cache.append((h, z, linear))
        h = z if linear else ops.relu(z)
    return h, cache


def ae_mse(model: AeModel, data: np.ndarray) -> float:
    recon, _ = _ae_forward(model.params, data.astype(np.float32))
    return float(np.mean((recon - data.astype(np.float32)) ** 2))


def _check_ae_input(data: np.ndarray) -> np.ndarray:
    data = np.asarray(data)
    if data.ndim != 2 or data.shape[1] != AE_WIDTH:
        raise DataError(f"autoencoder input must be (N, {AE_WIDTH}), got {data.shape}")
    return data.astype(np.float32)


def ae_train(pooled: np.ndarray, seed: int, epochs: int = 200,
             batch_size: int = 64) -> AeModel:
    """Fit the projector on pooled features by MSE reconstruction.

    Args:
        pooled: (N, 39) array, N >= 10.
        seed: controls init and batch order; same seed, same model.

    Returns:
        trained AeModel.
    """
    data = _check_ae_input(pooled)
    n = data.shape[0]
    if n < AE_MIN_SAMPLES:
        raise DataError(f"autoencoder needs >= {AE_MIN_SAMPLES} samples, got {n}")
    params = _ae_init(seed)
    state = ops.init_adam(params)
    rng = np.random.default_rng(seed + 1)
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            batch = data[order[lo : lo + batch_size]]
            recon, cache = _ae_forward(params, batch)
            grad = (2.0 / recon.size) * (recon - batch)
            grads = {}
            g = grad
            for i in reversed(range(len(AE_LAYERS))):
                h, z, linear = cache[i]
                if not linear:
                    g = ops.relu_backward(z, g)
                g, gw, gb = ops.dense_backward(h, params[f"l{i}.w"], g)
                grads[f"l{i}.w"] = gw
                grads[f"l{i}.b"] = gb
            ops.adam_step(params, grads, state)
    return AeModel(params=params)


def ae_project(model: AeModel, features: np.ndarray) -> np.ndarray:
    """Encoder output for each row: (N, 39) -> (N, 2)."""
    data = _check_ae_input(features)
    code, _ = _ae_forward(model.params, data, upto=AE_BOTTLENECK_INDEX + 1)
    return code


def pooled_features(cfg: ModelConfig, params: dict, fm: FeatureMatrix) -> np.ndarray:
    """The 39-D vector the classifier head consumes for one clip, computed
    on the padded frames exactly as in training."""
    _, maps = forward_with_maps(fm.frames.astype(np.float32), cfg, params)
    return ops.global_avg_pool(maps[-1])


def utterance_entropy(cfg: ModelConfig, params: dict, fm: FeatureMatrix) -> float:
    """Entropy of the clip's normalized high-level (post-skip) map."""
    maps = export_feature_maps(cfg, params, fm)
    return entropy_2d(maps[-1].u8)
