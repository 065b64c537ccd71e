"""The gated multi-scale temporal convolutional network.

Layout: an entry kernel-1 causal convolution, then a stack of gated causal
blocks (GCBs). Each GCB applies `gating_levels` chained gating levels; a
level is the mean of `n_gscb` gated sub-blocks (GSCBs) sharing the level's
dilation, and a GSCB is relu(conv(u)) * sigmoid(relu(conv(u))) with separate
value/gate convolutions. Block i adds a residual H_i = F_i + G_i that feeds
the next block, while the skip path sums the block outputs F_i (multi_scale)
or takes the last one (max_scale); leaky-relu, mean-over-time pooling and a
dense softmax head follow.

Dilations grow per block: with the "ours" scheme level l of block i uses
2^(i-1) * 2^(l-1) (capped at 2^n_gcb); the "raw" scheme keeps a block-wide
constant 2^(i-1).

The reverse pass is hand-wired for this fixed topology; there is no general
autodiff. Checkpoints are a little-endian binary format, magic "GMCK".
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from typing import Iterator

import numpy as np

from . import ops
from .errors import DataError

CKPT_MAGIC = b"GMCK"
CKPT_VERSION = 1

DRD_SCHEMES = ("ours", "raw")
SKIP_MODES = ("multi_scale", "max_scale")


@dataclass
class ModelConfig:
    channels: int = 39
    kernel_size: int = 2
    n_gcb: int = 7
    gating_levels: int = 2
    n_gscb: int = 3
    drd_scheme: str = "ours"
    skip_mode: str = "multi_scale"
    leaky_alpha: float = 0.05
    n_classes: int = 6
    seq_len: int = 256

    def __post_init__(self):
        if self.kernel_size not in (1, 2):
            raise DataError(f"kernel_size must be 1 or 2, got {self.kernel_size}")
        for name in ("channels", "n_gcb", "gating_levels", "n_gscb", "seq_len"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1")
        if self.n_classes < 2:
            raise DataError("n_classes must be >= 2")
        if self.drd_scheme not in DRD_SCHEMES:
            raise DataError(f"unknown drd_scheme {self.drd_scheme!r}")
        if self.skip_mode not in SKIP_MODES:
            raise DataError(f"unknown skip_mode {self.skip_mode!r}")
        if not 0 <= self.leaky_alpha < 1:
            raise DataError("leaky_alpha must be in [0, 1)")


def config_text(cfg: ModelConfig) -> str:
    """Canonical flat key=value rendering, keys sorted, one per line."""
    lines = [f"{f.name}={getattr(cfg, f.name)}"
             for f in sorted(fields(ModelConfig), key=lambda f: f.name)]
    return "\n".join(lines) + "\n"


def parse_config_text(text: str, base: ModelConfig | None = None) -> ModelConfig:
    """Parse key=value lines into a config; unknown keys are a DataError.
    Keys absent from the text keep the base (or default) values."""
    kinds = {f.name: f.type for f in fields(ModelConfig)}
    values = {f.name: getattr(base, f.name) for f in fields(ModelConfig)} if base else {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"bad config line {line!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in kinds:
            raise DataError(f"unknown config key {key!r}")
        if kinds[key] in ("int", int):
            values[key] = int(val)
        elif kinds[key] in ("float", float):
            values[key] = float(val)
        else:
            values[key] = val.strip("'\"")
    return ModelConfig(**values)


def dilation_for(cfg: ModelConfig, block: int, level: int) -> int:
    """Dilation of gating level `level` in block `block` (both 1-based)."""
    if cfg.drd_scheme == "raw":
        return 2 ** (block - 1)
    return min(2 ** (block - 1) * 2 ** (level - 1), 2 ** cfg.n_gcb)


def param_specs(cfg: ModelConfig) -> Iterator[tuple[str, tuple[int, ...], int, int]]:
    """Yield (name, shape, fan_in, fan_out) in canonical order."""
    c, k = cfg.channels, cfg.kernel_size
    yield "entry.kernel", (c, c, 1), c, c
    yield "entry.bias", (c,), 0, 0
    for i in range(1, cfg.n_gcb + 1):
        for l in range(1, cfg.gating_levels + 1):
            for j in range(1, cfg.n_gscb + 1):
                for branch in ("value", "gate"):
                    prefix = f"gcb{i}.level{l}.sub{j}.{branch}"
                    yield f"{prefix}.kernel", (c, c, k), c * k, c * k
                    yield f"{prefix}.bias", (c,), 0, 0
    yield "head.weight", (cfg.n_classes, c), c, cfg.n_classes
    yield "head.bias", (cfg.n_classes,), 0, 0


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {name: shape for name, shape, _, _ in param_specs(cfg)}


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Seeded xavier-uniform kernels and zero biases, float32."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape, fan_in, fan_out in param_specs(cfg):
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            params[name] = ops.xavier_uniform(shape, fan_in, fan_out, rng)
    return params


def param_count(cfg: ModelConfig) -> int:
    """Closed-form trainable parameter count; must match the actual store."""
    c, k = cfg.channels, cfg.kernel_size
    entry = c * c * 1 + c
    per_gscb = 2 * (c * c * k + c)
    blocks = cfg.n_gcb * cfg.gating_levels * cfg.n_gscb * per_gscb
    head = c * cfg.n_classes + cfg.n_classes
    return entry + blocks + head


def receptive_field(cfg: ModelConfig) -> tuple[int, int]:
    """(nominal, actual) receptive field in frames.

    Nominal is kernel_size * max dilation (the naming convention for model
    variants); actual is 1 + (kernel_size - 1) * sum of dilations along the
    deepest path.
    """
    dils = [dilation_for(cfg, i, l)
            for i in range(1, cfg.n_gcb + 1)
            for l in range(1, cfg.gating_levels + 1)]
    nominal = cfg.kernel_size * max(dils)
    actual = 1 + (cfg.kernel_size - 1) * sum(dils)
    return nominal, actual


def _conv_at(params, prefix, dilation):
    return ops.ConvParams(params[prefix + ".kernel"], params[prefix + ".bias"], dilation)


def _forward(x, cfg, params, need_cache=False, need_maps=False):
    if x.shape[-1] != cfg.channels:
        raise DataError(f"input has {x.shape[-1]} channels, model wants {cfg.channels}")
    entry = _conv_at(params, "entry", 1)
    g_cur = ops.conv1d_causal(x, entry)
    f_sum = None
    f_last = None
    maps = [x] if need_maps else None
    gcb_caches = []
    for i in range(1, cfg.n_gcb + 1):
        u = g_cur
        level_caches = []
        for l in range(1, cfg.gating_levels + 1):
            d = dilation_for(cfg, i, l)
            u_in = u
            acc = None
            subs = []
            for j in range(1, cfg.n_gscb + 1):
                prefix = f"gcb{i}.level{l}.sub{j}"
                av = ops.conv1d_causal(u_in, _conv_at(params, prefix + ".value", d))
                ag = ops.conv1d_causal(u_in, _conv_at(params, prefix + ".gate", d))
                out = ops.relu(av) * ops.sigmoid(ops.relu(ag))
                acc = out if acc is None else acc + out
                if need_cache:
                    subs.append((av, ag))
            u = acc / cfg.n_gscb
            if need_cache:
                level_caches.append((u_in, subs))
        f_i = u
        if need_maps:
            maps.append(f_i)
        f_sum = f_i if f_sum is None else f_sum + f_i
        f_last = f_i
        g_cur = f_i + g_cur  # residual H_i, feeds the next block (unused after the last)
        if need_cache:
            gcb_caches.append(level_caches)
    s = f_sum if cfg.skip_mode == "multi_scale" else f_last
    a = ops.leaky_relu(s, cfg.leaky_alpha)
    if need_maps:
        maps.append(a)
    pooled = ops.global_avg_pool(a)
    logits = ops.dense(pooled, params["head.weight"], params["head.bias"])
    cache = {"x": x, "s": s, "pooled": pooled, "gcbs": gcb_caches} if need_cache else None
    return logits, cache, maps


def forward(x: np.ndarray, cfg: ModelConfig, params: dict) -> np.ndarray:
    """Logits for input features x: (T, C) -> (K,) or (B, T, C) -> (B, K)."""
    logits, _, _ = _forward(x, cfg, params)
    return logits


def forward_with_cache(x, cfg, params):
    logits, cache, _ = _forward(x, cfg, params, need_cache=True)
    return logits, cache


def forward_with_maps(x, cfg, params):
    """Logits plus the per-stage activation maps of one utterance:
    [input, F_1..F_n, post-leaky skip output]."""
    if x.ndim != 2:
        raise DataError("maps are exported per utterance, pass (T, C)")
    logits, _, maps = _forward(x, cfg, params, need_maps=True)
    return logits, maps


def backward(cfg: ModelConfig, params: dict, cache: dict,
             grad_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients for a forward_with_cache pass."""
    grads: dict[str, np.ndarray] = {}
    g_pooled, gw, gb = ops.dense_backward(cache["pooled"], params["head.weight"], grad_logits)
    grads["head.weight"] = gw
    grads["head.bias"] = gb
    s = cache["s"]
    g_a = ops.global_avg_pool_backward(s.shape, g_pooled)
    g_s = ops.leaky_relu_backward(s, cfg.leaky_alpha, g_a)
    g_next = None  # grad flowing into H_i from the block above
    for i in range(cfg.n_gcb, 0, -1):
        g_h = g_next
        if cfg.skip_mode == "multi_scale" or i == cfg.n_gcb:
            g_f = g_s if g_h is None else g_s + g_h
        else:
            g_f = g_h
        g_u = g_f
        for l in range(cfg.gating_levels, 0, -1):
            u_in, subs = cache["gcbs"][i - 1][l - 1]
            d = dilation_for(cfg, i, l)
            g_share = g_u / cfg.n_gscb
            g_u_in = None
            for j, (av, ag) in enumerate(subs, start=1):
                h = ops.relu(av)
                sg = ops.sigmoid(ops.relu(ag))
                g_av = ops.relu_backward(av, g_share * sg)
                g_ag = ops.relu_backward(ag, ops.sigmoid_backward(sg, g_share * h))
                prefix = f"gcb{i}.level{l}.sub{j}"
                gx_v, gk_v, gb_v = ops.conv1d_causal_backward(
                    u_in, _conv_at(params, prefix + ".value", d), g_av)
                gx_g, gk_g, gb_g = ops.conv1d_causal_backward(
                    u_in, _conv_at(params, prefix + ".gate", d), g_ag)
                grads[prefix + ".value.kernel"] = gk_v
                grads[prefix + ".value.bias"] = gb_v
                grads[prefix + ".gate.kernel"] = gk_g
                grads[prefix + ".gate.bias"] = gb_g
                g_u_in = gx_v + gx_g if g_u_in is None else g_u_in + gx_v + gx_g
            g_u = g_u_in
        g_next = g_u if g_h is None else g_u + g_h
    gx, gk, gb = ops.conv1d_causal_backward(
        cache["x"], _conv_at(params, "entry", 1), g_next)
    grads["entry.kernel"] = gk
    grads["entry.bias"] = gb
    return grads


def _meta_text(meta: dict[str, str]) -> str:
    return "".join(f"{k}={v}\n" for k, v in sorted(meta.items()))


def _parse_meta(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if line:
            k, _, v = line.partition("=")
            out[k] = v
    return out


def checkpoint_save(path, cfg: ModelConfig, params: dict,
                    meta: dict[str, str] | None = None) -> None:
    """Binary checkpoint: magic "GMCK", version, canonical config text,
    training meta text, then named float32 tensors with explicit shapes."""
    cfg_bytes = config_text(cfg).encode("utf-8")
    meta_bytes = _meta_text(meta or {}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(params)))
        for name, value in params.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", value.ndim))
            fh.write(struct.pack(f"<{value.ndim}I", *value.shape))
            fh.write(np.ascontiguousarray(value, dtype="<f4").tobytes())


def checkpoint_load(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict[str, str]]:
    """Load and validate a checkpoint; every tensor must match the shape the
    stored config implies, with no tensors missing or extra."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise DataError(f"truncated checkpoint {path}")
        chunk = blob[off : off + n]
        off += n
        return chunk

    if take(4) != CKPT_MAGIC:
        raise DataError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != CKPT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack("<I", take(4))
    cfg = parse_config_text(take(n).decode("utf-8"))
    (n,) = struct.unpack("<I", take(4))
    meta = _parse_meta(take(n).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        params[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).copy()
    if off != len(blob):
        raise DataError(f"trailing bytes in checkpoint {path}")
    expect = expected_shapes(cfg)
    if set(params) != set(expect):
        missing = sorted(set(expect) - set(params))
        extra = sorted(set(params) - set(expect))
        raise DataError(f"checkpoint tensors do not match config "
                        f"(missing {missing[:3]}, extra {extra[:3]})")
    for name, shape in expect.items():
        if params[name].shape != shape:
            raise DataError(f"checkpoint tensor {name} has shape "
                            f"{params[name].shape}, config implies {shape}")
    return cfg, params, meta
