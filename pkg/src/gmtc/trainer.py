"""Deterministic training and evaluation loops.

One training run: seeded init, seeded per-epoch shuffles, mini-batches kept
whole-plus-remainder, Adam updates, early stopping on validation WAR with
best-parameter restore. The validation fold doubles as the test fold, which
is optimistic model selection; reported numbers carry that caveat.

Identical seeds and inputs reproduce bit-identical parameters and numeric
history (wall-clock seconds are excluded from that contract).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import ops
from .corpus import Manifest
from .dsp import FeatureMatrix
from .errors import DataError, NumericError
from .metrics import EvalReport, compute_report
from .model import ModelConfig, backward, forward, forward_with_cache, init_params

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.93
    beta2: float = 0.98
    eps: float = 1e-8
    max_epochs: int = 300
    patience: int = 50
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise DataError("bad training configuration")


def train_config_text(cfg: TrainConfig) -> str:
    lines = [f"{f.name}={getattr(cfg, f.name)}"
             for f in sorted(fields(TrainConfig), key=lambda f: f.name)]
    return "\n".join(lines) + "\n"


def parse_train_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    values = {f.name: getattr(base, f.name) for f in fields(TrainConfig)} if base else {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in kinds:
            raise DataError(f"unknown training key {key!r}")
        if kinds[key] in ("int", int):
            values[key] = int(val)
        elif kinds[key] in ("float", float):
            values[key] = float(val)
        elif kinds[key] in ("bool", bool):
            values[key] = val.lower() in ("1", "true", "yes")
        else:
            values[key] = val
    return TrainConfig(**values)


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    train_war: float
    val_war: float
    seconds: float


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    best_epoch: int
    best_val_war: float
    history: list[HistoryRow] = field(default_factory=list)


def stack_features(features: list[FeatureMatrix], manifest: Manifest,
                   indices: list[int]) -> tuple[np.ndarray, np.ndarray]:
    """Dense (N, T, 39) batch plus int labels for the given manifest rows.

    Every manifest entry must have exactly one feature record (matched on
    clip id == path) and all records one common padded length.
    """
    by_id = {fm.clip_id: fm for fm in features}
    if len(by_id) != len(features):
        raise DataError("duplicate clip ids in feature list")
    mats, labels = [], []
    label_index = {lab: k for k, lab in enumerate(manifest.label_set)}
    for i in indices:
        entry = manifest.entries[i]
        fm = by_id.get(entry.path)
        if fm is None:
            raise DataError(f"no features for manifest entry {entry.path}")
        mats.append(fm.frames)
        labels.append(label_index[entry.label])
    lengths = {m.shape[0] for m in mats}
    if len(lengths) > 1:
        raise DataError(f"features not padded to a common length: {sorted(lengths)}")
    return np.stack(mats).astype(np.float32), np.array(labels, dtype=np.int64)


def batch_loss(cfg: ModelConfig, params: dict, x: np.ndarray,
               labels: np.ndarray) -> tuple[float, dict, np.ndarray]:
    """Mean cross-entropy of one batch plus parameter gradients and the
    argmax predictions."""
    logits, cache = forward_with_cache(x, cfg, params)
    loss, grad_logits = ops.softmax_cross_entropy(logits, labels)
    grads = backward(cfg, params, cache, grad_logits)
    return loss, grads, np.argmax(logits, axis=-1)


def predict(cfg: ModelConfig, params: dict, x: np.ndarray,
            batch_size: int = 64) -> np.ndarray:
    out = []
    for lo in range(0, x.shape[0], batch_size):
        logits = forward(x[lo : lo + batch_size], cfg, params)
        out.append(np.argmax(logits, axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def train(features: list[FeatureMatrix], manifest: Manifest,
          fold: tuple[list[int], list[int]], model_cfg: ModelConfig,
          train_cfg: TrainConfig) -> TrainResult:
    """Fit one model on the fold's train side, early-stopping on the fold's
    test side.

    Returns the best parameters (restored), the epoch they came from, and
    the per-epoch history.
    """
    train_idx, val_idx = fold
    if not train_idx or not val_idx:
        raise DataError("fold has an empty train or validation side")
    if model_cfg.n_classes != len(manifest.label_set):
        raise DataError(f"model has {model_cfg.n_classes} classes, manifest "
                        f"has {len(manifest.label_set)}")
    x_train, y_train = stack_features(features, manifest, train_idx)
    x_val, y_val = stack_features(features, manifest, val_idx)
    if x_train.shape[1] != model_cfg.seq_len:
        raise DataError(f"features are {x_train.shape[1]} frames long, model "
                        f"config says seq_len={model_cfg.seq_len}")

    params = init_params(model_cfg, train_cfg.seed)
    state = ops.init_adam(params, lr=train_cfg.lr, beta1=train_cfg.beta1,
                          beta2=train_cfg.beta2, eps=train_cfg.eps)
    shuffle_rng = np.random.default_rng(train_cfg.seed + 1)
    n = x_train.shape[0]
    best_war = -1.0
    best_epoch = 0
    best_params = {k: v.copy() for k, v in params.items()}
    since_best = 0
    history: list[HistoryRow] = []
    for epoch in range(1, train_cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n) if train_cfg.shuffle else np.arange(n)
        loss_sum = 0.0
        hits = 0
        for lo in range(0, n, train_cfg.batch_size):
            sel = order[lo : lo + train_cfg.batch_size]
            loss, grads, preds = batch_loss(model_cfg, params, x_train[sel], y_train[sel])
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch {lo // train_cfg.batch_size}")
            ops.adam_step(params, grads, state)
            loss_sum += loss * sel.size
            hits += int((preds == y_train[sel]).sum())
        val_preds = predict(model_cfg, params, x_val, train_cfg.batch_size)
        val_war = float((val_preds == y_val).mean())
        row = HistoryRow(epoch=epoch, train_loss=loss_sum / n, train_war=hits / n,
                         val_war=val_war, seconds=time.perf_counter() - t0)
        history.append(row)
        if val_war > best_war:
            best_war = val_war
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in params.items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= train_cfg.patience:
                log.info("early stop at epoch %d (best %.4f at %d)",
                         epoch, best_war, best_epoch)
                break
    return TrainResult(params=best_params, best_epoch=best_epoch,
                       best_val_war=best_war, history=history)


def evaluate(model_cfg: ModelConfig, params: dict, features: list[FeatureMatrix],
             manifest: Manifest, indices: list[int],
             batch_size: int = 64) -> EvalReport:
    """Score a parameter set on the given manifest rows."""
    if not indices:
        raise DataError("nothing to evaluate")
    x, y = stack_features(features, manifest, indices)
    preds = predict(model_cfg, params, x, batch_size)
    labs = manifest.label_set
    return compute_report([labs[i] for i in y], [labs[i] for i in preds], labs)


def run_cv(features: list[FeatureMatrix], manifest: Manifest, folds,
           model_cfg: ModelConfig, train_cfg: TrainConfig
           ) -> tuple[list[TrainResult], list[EvalReport], dict[str, float]]:
    """Train and score every fold; fold f uses seed train_cfg.seed + f.

    Returns per-fold results, per-fold reports, and a summary with mean,
    population std, and max of WAR and UAR.
    """
    if len(folds) < 2:
        raise DataError("cross-validation needs at least two folds")
    results, reports = [], []
    for f, fold in enumerate(folds):
        cfg_f = TrainConfig(**{**train_cfg.__dict__, "seed": train_cfg.seed + f})
        try:
            res = train(features, manifest, fold, model_cfg, cfg_f)
            rep = evaluate(model_cfg, res.params, features, manifest, fold[1],
                           train_cfg.batch_size)
        except (DataError, NumericError) as exc:
            raise type(exc)(f"fold {f}: {exc}") from exc
        results.append(res)
        reports.append(rep)
    wars = np.array([r.war for r in reports])
    uars = np.array([r.uar for r in reports])
    summary = {
        "folds": float(len(folds)),
        "war_mean": float(wars.mean()), "war_std": float(wars.std()),
        "war_max": float(wars.max()),
        "uar_mean": float(uars.mean()), "uar_std": float(uars.std()),
        "uar_max": float(uars.max()),
    }
    return results, reports, summary


def history_csv(history: list[HistoryRow]) -> str:
    lines = ["epoch,train_loss,train_war,val_war,seconds"]
    for row in history:
        lines.append(f"{row.epoch},{row.train_loss!r},{row.train_war!r},"
                     f"{row.val_war!r},{row.seconds:.3f}")
    return "\n".join(lines) + "\n"
