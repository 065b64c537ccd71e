import numpy as np
import pytest

from gmtc import corpus, dsp, model, trainer
from gmtc.errors import DataError, NumericError


def cluster_data(n_per_class=8, t=16, noise=0.3, seed=0):
    """Synthetic, well-separated FeatureMatrix clusters for three classes."""
    rng = np.random.default_rng(seed)
    classes = ["alpha", "beta", "gamma"]
    feats, entries = [], []
    for ci, lab in enumerate(classes):
        base = np.zeros(39, dtype=np.float32)
        base[ci * 5 : ci * 5 + 5] = 2.0
        for i in range(n_per_class):
            frames = base + noise * rng.standard_normal((t, 39)).astype(np.float32)
            path = f"/data/{lab}/{i}.wav"
            feats.append(dsp.FeatureMatrix(frames=frames.astype(np.float32),
                                           true_len=t, clip_id=path))
            entries.append(corpus.Entry(path=path, label=lab, speaker="s", corpus="test"))
    manifest = corpus.Manifest(entries=entries, label_set=classes)
    return feats, manifest


def small_cfg(**kw):
    base = dict(n_gcb=1, gating_levels=1, n_gscb=1, n_classes=3, seq_len=16)
    base.update(kw)
    return model.ModelConfig(**base)


def holdout(manifest, seed=0):
    return corpus.make_splits(manifest, "holdout_80_20", seed).folds[0]


def test_first_batch_loss_is_log_k_with_zero_head():
    feats, manifest = cluster_data()
    x, y = trainer.stack_features(feats, manifest, list(range(9)))
    cfg = small_cfg()
    params = model.init_params(cfg, seed=1)
    params["head.weight"][:] = 0
    params["head.bias"][:] = 0
    loss, _, _ = trainer.batch_loss(cfg, params, x, y)
    assert abs(loss - np.log(3)) < 1e-5


def test_training_learns_separable_clusters():
    feats, manifest = cluster_data()
    fold = holdout(manifest)
    cfg = small_cfg()
    tcfg = trainer.TrainConfig(batch_size=8, max_epochs=60, patience=60, seed=3)
    result = trainer.train(feats, manifest, fold, cfg, tcfg)
    assert result.history[-1].train_war >= 0.9
    report = trainer.evaluate(cfg, result.params, feats, manifest, fold[1])
    assert report.war == result.best_val_war


def test_training_deterministic():
    feats, manifest = cluster_data()
    fold = holdout(manifest)
    cfg = small_cfg()
    tcfg = trainer.TrainConfig(batch_size=8, max_epochs=5, patience=50, seed=7)
    a = trainer.train(feats, manifest, fold, cfg, tcfg)
    b = trainer.train(feats, manifest, fold, cfg, tcfg)
    assert len(a.history) == len(b.history)
    for ra, rb in zip(a.history, b.history):
        assert (ra.epoch, ra.train_loss, ra.train_war, ra.val_war) == \
            (rb.epoch, rb.train_loss, rb.train_war, rb.val_war)
    for name in a.params:
        assert np.array_equal(a.params[name], b.params[name])


def test_zero_lr_keeps_params_at_init():
    feats, manifest = cluster_data()
    fold = holdout(manifest)
    cfg = small_cfg()
    tcfg = trainer.TrainConfig(batch_size=8, lr=0.0, max_epochs=3, patience=50, seed=9)
    result = trainer.train(feats, manifest, fold, cfg, tcfg)
    init = model.init_params(cfg, seed=9)
    for name in init:
        assert np.array_equal(result.params[name], init[name])


def test_early_stopping_stops_and_restores_best():
    feats, manifest = cluster_data()
    fold = holdout(manifest)
    cfg = small_cfg()
    tcfg = trainer.TrainConfig(batch_size=8, max_epochs=300, patience=5, seed=11)
    result = trainer.train(feats, manifest, fold, cfg, tcfg)
    assert len(result.history) < 300
    assert result.best_epoch <= len(result.history)
    best_seen = max(r.val_war for r in result.history)
    assert result.best_val_war == best_seen
    report = trainer.evaluate(cfg, result.params, feats, manifest, fold[1])
    assert report.war == pytest.approx(result.best_val_war)


def test_non_finite_loss_aborts():
    feats, manifest = cluster_data()
    feats[0].frames[0, 0] = np.nan
    fold = (list(range(len(feats))), [0])
    cfg = small_cfg()
    tcfg = trainer.TrainConfig(batch_size=64, max_epochs=2, patience=5, seed=0, shuffle=False)
    with pytest.raises(NumericError):
        trainer.train(feats, manifest, fold, cfg, tcfg)


def test_shape_and_coverage_validation():
    feats, manifest = cluster_data()
    cfg = small_cfg()
    tcfg = trainer.TrainConfig(batch_size=8, max_epochs=1, patience=1)
    with pytest.raises(DataError):
        trainer.train(feats, manifest, ([], [0]), cfg, tcfg)
    with pytest.raises(DataError):
        trainer.train(feats, manifest, holdout(manifest), small_cfg(n_classes=4), tcfg)
    with pytest.raises(DataError):
        trainer.train(feats, manifest, holdout(manifest), small_cfg(seq_len=32), tcfg)
    short = feats[:-1] + [dsp.FeatureMatrix(frames=np.zeros((8, 39), np.float32),
                                            true_len=8, clip_id=feats[-1].clip_id)]
    with pytest.raises(DataError):
        trainer.stack_features(short, manifest, list(range(len(feats))))
    with pytest.raises(DataError):
        trainer.stack_features(feats[:-1], manifest, list(range(len(feats))))


def test_run_cv_summary():
    feats, manifest = cluster_data(n_per_class=10)
    plan = corpus.make_splits(manifest, "cv5", seed=2)
    cfg = small_cfg()
    tcfg = trainer.TrainConfig(batch_size=8, max_epochs=8, patience=8, seed=1)
    results, reports, summary = trainer.run_cv(feats, manifest, plan.folds, cfg, tcfg)
    assert len(results) == 5 and len(reports) == 5
    wars = [r.war for r in reports]
    assert summary["war_mean"] == pytest.approx(np.mean(wars))
    assert summary["war_std"] == pytest.approx(np.std(wars))  # population std
    assert summary["war_max"] == pytest.approx(max(wars))
    assert summary["uar_max"] >= summary["uar_mean"]
    with pytest.raises(DataError):
        trainer.run_cv(feats, manifest, plan.folds[:1], cfg, tcfg)


def test_history_csv_format():
    rows = [trainer.HistoryRow(1, 1.0986122886681098, 0.5, 0.25, 0.101)]
    text = trainer.history_csv(rows)
    lines = text.strip().splitlines()
    assert lines[0] == "epoch,train_loss,train_war,val_war,seconds"
    assert lines[1].startswith("1,1.0986122886681098,0.5,0.25,")


def test_train_config_text_roundtrip():
    tcfg = trainer.TrainConfig(batch_size=16, lr=0.01, seed=4, shuffle=False)
    text = trainer.train_config_text(tcfg)
    assert trainer.parse_train_config_text(text) == tcfg
    with pytest.raises(DataError):
        trainer.parse_train_config_text("warmup=5\n")
