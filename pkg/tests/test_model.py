import numpy as np
import pytest

from gmtc import model, ops
from gmtc.errors import DataError
from helpers import central_diff, rel_err


def cfg_variant(scheme, n_gcb, **kw):
    return model.ModelConfig(drd_scheme=scheme, n_gcb=n_gcb, **kw)


def tiny_cfg(**kw):
    base = dict(channels=5, n_gcb=2, gating_levels=2, n_gscb=2,
                n_classes=3, seq_len=8)
    base.update(kw)
    return model.ModelConfig(**base)


def test_param_count_variant_table():
    # families named by nominal receptive field, six classes
    assert model.param_count(cfg_variant("ours", 7)) == 260_604
    assert model.param_count(cfg_variant("ours", 6)) == 223_632
    assert model.param_count(cfg_variant("raw", 7)) == 260_604
    assert model.param_count(cfg_variant("raw", 8)) == 297_576


def test_param_count_matches_store():
    for cfg in (cfg_variant("ours", 7), cfg_variant("raw", 8),
                tiny_cfg(), cfg_variant("ours", 3, n_classes=4, n_gscb=1)):
        params = model.init_params(cfg, seed=0)
        assert sum(v.size for v in params.values()) == model.param_count(cfg)


def test_receptive_fields():
    assert model.receptive_field(cfg_variant("ours", 7)) == (256, 382)
    assert model.receptive_field(cfg_variant("ours", 6)) == (128, 190)
    assert model.receptive_field(cfg_variant("raw", 8)) == (256, 511)
    assert model.receptive_field(cfg_variant("raw", 7)) == (128, 255)


def test_dilation_schedule():
    ours = cfg_variant("ours", 7)
    assert [model.dilation_for(ours, i, 1) for i in range(1, 8)] == [1, 2, 4, 8, 16, 32, 64]
    assert [model.dilation_for(ours, i, 2) for i in range(1, 8)] == [2, 4, 8, 16, 32, 64, 128]
    raw = cfg_variant("raw", 7)
    for i in range(1, 8):
        assert model.dilation_for(raw, i, 1) == model.dilation_for(raw, i, 2) == 2 ** (i - 1)
    # deeper gating levels keep doubling but cap at the scheme maximum
    deep = model.ModelConfig(n_gcb=3, gating_levels=4)
    assert model.dilation_for(deep, 3, 4) == 8  # 2^5 capped at 2^3
    assert model.dilation_for(deep, 1, 3) == 4


def test_init_deterministic_and_zero_biases():
    cfg = tiny_cfg()
    a = model.init_params(cfg, seed=7)
    b = model.init_params(cfg, seed=7)
    c = model.init_params(cfg, seed=8)
    for name in a:
        assert np.array_equal(a[name], b[name])
        assert a[name].dtype == np.float32
        if name.endswith(".bias"):
            assert np.all(a[name] == 0)
    assert any(not np.array_equal(a[n], c[n]) for n in a if n.endswith(".kernel"))


def test_forward_shapes_single_and_batch():
    cfg = tiny_cfg()
    params = model.init_params(cfg, seed=1)
    rng = np.random.default_rng(2)
    x1 = rng.standard_normal((8, 5)).astype(np.float32)
    out1 = model.forward(x1, cfg, params)
    assert out1.shape == (3,)
    xb = rng.standard_normal((4, 8, 5)).astype(np.float32)
    outb = model.forward(xb, cfg, params)
    assert outb.shape == (4, 3)
    assert np.all(np.isfinite(outb))


def test_batch_forward_matches_per_sample():
    cfg = tiny_cfg()
    params = model.init_params(cfg, seed=3)
    rng = np.random.default_rng(4)
    xb = rng.standard_normal((3, 8, 5)).astype(np.float32)
    outb = model.forward(xb, cfg, params)
    for i in range(3):
        assert np.allclose(outb[i], model.forward(xb[i], cfg, params), atol=1e-5)


def test_forward_rejects_channel_mismatch():
    cfg = tiny_cfg()
    params = model.init_params(cfg, seed=0)
    with pytest.raises(DataError):
        model.forward(np.zeros((8, 4), np.float32), cfg, params)


def test_zero_head_gives_uniform_logits():
    cfg = tiny_cfg()
    params = model.init_params(cfg, seed=5)
    params["head.weight"][:] = 0
    params["head.bias"][:] = 0
    out = model.forward(np.random.default_rng(6).standard_normal((8, 5)), cfg, params)
    assert np.all(out == 0)


def test_model_causality_maps():
    rng = np.random.default_rng(7)
    for scheme in ("ours", "raw"):
        cfg = tiny_cfg(drd_scheme=scheme, seq_len=12)
        params = model.init_params(cfg, seed=8)
        x = rng.standard_normal((12, 5)).astype(np.float32)
        _, maps = model.forward_with_maps(x, cfg, params)
        assert len(maps) == cfg.n_gcb + 2
        hit = int(rng.integers(1, 12))
        x2 = x.copy()
        x2[hit] += 1.0
        _, maps2 = model.forward_with_maps(x2, cfg, params)
        for m, m2 in zip(maps, maps2):
            assert np.array_equal(m[:hit], m2[:hit])
        # the perturbation must actually reach the output maps
        assert not np.array_equal(maps[-1], maps2[-1])


def test_full_model_gradcheck_small():
    cfg = tiny_cfg()
    params = {k: v.astype(np.float64) for k, v in model.init_params(cfg, seed=9).items()}
    rng = np.random.default_rng(10)
    x = rng.standard_normal((2, 8, 5))
    labels = np.array([0, 2])

    def loss_fn(p):
        logits = model.forward(x, cfg, p)
        return ops.softmax_cross_entropy(logits, labels)[0]

    logits, cache = model.forward_with_cache(x, cfg, params)
    _, grad_logits = ops.softmax_cross_entropy(logits, labels)
    grads = model.backward(cfg, params, cache, grad_logits)
    assert set(grads) == set(params)
    worst = 0.0
    for name in params:
        def f(v, name=name):
            trial = dict(params)
            trial[name] = v
            return loss_fn(trial)

        worst = max(worst, rel_err(grads[name], central_diff(f, params[name])))
    assert worst < 1e-4


def test_gradients_flow_to_every_parameter():
    cfg = tiny_cfg(skip_mode="max_scale")
    params = {k: v.astype(np.float64) for k, v in model.init_params(cfg, seed=11).items()}
    rng = np.random.default_rng(12)
    x = rng.standard_normal((4, 8, 5))
    logits, cache = model.forward_with_cache(x, cfg, params)
    _, grad_logits = ops.softmax_cross_entropy(logits, np.array([0, 1, 2, 0]))
    grads = model.backward(cfg, params, cache, grad_logits)
    for name, g in grads.items():
        assert np.all(np.isfinite(g))
        assert np.any(g != 0), f"dead gradient for {name}"


def test_config_text_roundtrip_and_rejects():
    cfg = model.ModelConfig(n_gcb=4, drd_scheme="raw", n_classes=7, seq_len=128)
    text = model.config_text(cfg)
    lines = text.strip().splitlines()
    assert lines == sorted(lines)
    assert model.parse_config_text(text) == cfg
    with pytest.raises(DataError):
        model.parse_config_text("nope=3\n")
    with pytest.raises(DataError):
        model.parse_config_text("drd_scheme=bogus\n")
    # partial text keeps base values
    tweaked = model.parse_config_text("n_gcb=2\n", base=cfg)
    assert tweaked.n_gcb == 2 and tweaked.n_classes == 7


def test_checkpoint_roundtrip(tmp_path):
    cfg = tiny_cfg()
    params = model.init_params(cfg, seed=13)
    meta = {"epoch": "12", "val_war": "0.875"}
    path = tmp_path / "m.ckpt"
    model.checkpoint_save(path, cfg, params, meta)
    cfg2, params2, meta2 = model.checkpoint_load(path)
    assert cfg2 == cfg
    assert meta2 == meta
    assert list(params2) == list(params)
    for name in params:
        assert np.array_equal(params[name], params2[name])
    # identical saves are byte-identical
    path2 = tmp_path / "m2.ckpt"
    model.checkpoint_save(path2, cfg, params, meta)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_validation(tmp_path):
    cfg = tiny_cfg()
    params = model.init_params(cfg, seed=14)
    good = tmp_path / "good.ckpt"
    model.checkpoint_save(good, cfg, params)

    bad_magic = tmp_path / "bad.ckpt"
    raw = bytearray(good.read_bytes())
    raw[:4] = b"ZZZZ"
    bad_magic.write_bytes(bytes(raw))
    with pytest.raises(DataError):
        model.checkpoint_load(bad_magic)

    trunc = tmp_path / "trunc.ckpt"
    trunc.write_bytes(good.read_bytes()[:-10])
    with pytest.raises(DataError):
        model.checkpoint_load(trunc)

    # tensors from a different architecture must be rejected
    other = tiny_cfg(n_gcb=3)
    mismatch = tmp_path / "mis.ckpt"
    model.checkpoint_save(mismatch, other, model.init_params(other, seed=0))
    ok_cfg, _, _ = model.checkpoint_load(mismatch)  # self-consistent is fine
    assert ok_cfg.n_gcb == 3
    blob = good.read_bytes()
    # swap the stored config for one implying more tensors
    cfg_bytes = model.config_text(cfg).encode()
    other_bytes = model.config_text(other).encode()
    assert len(cfg_bytes) == len(other_bytes)
    swapped = blob.replace(cfg_bytes, other_bytes, 1)
    bad_cfg = tmp_path / "swap.ckpt"
    bad_cfg.write_bytes(swapped)
    with pytest.raises(DataError):
        model.checkpoint_load(bad_cfg)


def test_config_rejects_bad_values():
    with pytest.raises(DataError):
        model.ModelConfig(kernel_size=3)
    with pytest.raises(DataError):
        model.ModelConfig(n_gcb=0)
    with pytest.raises(DataError):
        model.ModelConfig(skip_mode="sum")
    with pytest.raises(DataError):
        model.ModelConfig(n_classes=1)
