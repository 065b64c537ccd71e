"""The `gmtc` command line tool.

Subcommands: synth (make a synthetic corpus), features (extract and cache
MFCCs), train (fit and evaluate), ablate (config sweeps), analyze
(interpretability artifacts). Every run writes a run-manifest JSON recording
the command, canonical config, seed, artifact paths, wall-clock, and git
describe output, and every numeric artifact is reproducible from (inputs,
seed).

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
GMTC_THREADS caps worker processes for the parallel stages.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from . import analysis, dsp, metrics, trainer
from .corpus import (CLASS_SETS, Manifest, load_manifest_csv, make_splits,
                     save_manifest_csv, synth_generate)
from .errors import DataError, NumericError
from .model import (ModelConfig, checkpoint_load, checkpoint_save, config_text,
                    param_count, parse_config_text, receptive_field)
from .trainer import TrainConfig, parse_train_config_text, train_config_text

log = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

MODEL_KEYS = {f for f in ModelConfig.__dataclass_fields__}
TRAIN_KEYS = {f for f in TrainConfig.__dataclass_fields__}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def worker_count() -> int:
    env = os.environ.get("GMTC_THREADS", "")
    if env.strip():
        try:
            return max(1, int(env))
        except ValueError:
            raise DataError(f"GMTC_THREADS must be an integer, got {env!r}")
    return min(4, os.cpu_count() or 1)


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def write_run_manifest(path, command, cfg_text, seed, artifacts, wall) -> None:
    payload = {
        "command": list(command),
        "config": cfg_text,
        "seed": seed,
        "artifacts": [str(a) for a in artifacts],
        "wall_seconds": round(wall, 3),
        "git_describe": _git_describe(),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_config_file(path) -> tuple[ModelConfig, TrainConfig, set]:
    """Split a flat key=value file into model and training settings."""
    model_lines, train_lines = [], []
    seen = set()
    if path:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc}") from exc
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key = line.partition("=")[0].strip()
            if key in seen:
                raise DataError(f"duplicate config key {key!r}")
            seen.add(key)
            if key in MODEL_KEYS:
                model_lines.append(line)
            elif key in TRAIN_KEYS:
                train_lines.append(line)
            else:
                raise DataError(f"unknown config key {key!r}")
    mcfg = parse_config_text("\n".join(model_lines))
    tcfg = parse_train_config_text("\n".join(train_lines))
    return mcfg, tcfg, seen


def merged_config_text(mcfg: ModelConfig, tcfg: TrainConfig) -> str:
    return config_text(mcfg) + train_config_text(tcfg)


def _sanitize(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-._" else "_" for ch in name)


# ---------------------------------------------------------------- features

def _extract_one(task):
    path, clip_id = task
    try:
        clip = dsp.resample(dsp.read_wav(path))
        return clip_id, dsp.mfcc_39(clip, clip_id=clip_id), None
    except (DataError, FileNotFoundError, OSError) as exc:
        return clip_id, None, str(exc)


def _parallel_map(fn, tasks, workers):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (workers * 4))))


def cmd_features(args, argv) -> int:
    t0 = time.perf_counter()
    from .corpus import scan_corpus

    if args.corpus in CLASS_SETS:
        if not args.root:
            raise UsageError("--root is required when scanning a corpus kind")
        manifest, rejects = scan_corpus(args.root, args.corpus)
        for r in rejects:
            log.warning("undecodable filename skipped: %s", r)
        base = ""  # scanned paths already include the root
    else:
        manifest = load_manifest_csv(args.corpus)
        # relative manifest paths resolve against --root, else the manifest's
        # own directory; cache ids keep the paths as written so artifacts
        # stay relocatable
        base = args.root or os.path.dirname(os.path.abspath(args.corpus))

    tasks = [(e.path if os.path.isabs(e.path) or not base
              else os.path.join(base, e.path), e.path)
             for e in manifest.entries]
    results = _parallel_map(_extract_one, tasks, worker_count())
    features, failed = [], []
    for clip_id, fm, err in results:
        if fm is None:
            failed.append(clip_id)
            log.warning("feature extraction failed for %s: %s", clip_id, err)
        else:
            features.append(fm)
    if failed and len(failed) / len(tasks) > 0.01:
        raise DataError(f"{len(failed)}/{len(tasks)} files failed feature extraction")
    if not features:
        raise DataError("no features extracted")

    if args.standardize:
        features = [dsp.standardize(fm) for fm in features]
    t_max = args.tmax or dsp.round_up_multiple(max(fm.true_len for fm in features))
    before_trunc = dsp.truncations.count
    features = [dsp.pad_to(fm, t_max) for fm in features]
    truncated = dsp.truncations.count - before_trunc
    if truncated:
        log.warning("%d utterances truncated to %d frames", truncated, t_max)

    ok_ids = {fm.clip_id for fm in features}
    kept = Manifest(entries=[e for e in manifest.entries if e.path in ok_ids],
                    label_set=manifest.label_set)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    dsp.cache_write(args.out, features)
    sidecar = args.out + ".manifest.csv"
    save_manifest_csv(sidecar, kept)
    cfg_text = (f"corpus={args.corpus}\nstandardize={args.standardize}\n"
                f"tmax={t_max}\n")
    write_run_manifest(args.out + ".run.json", argv, cfg_text, None,
                       [args.out, sidecar], time.perf_counter() - t0)
    print(f"wrote {len(features)} feature records (T={t_max}) to {args.out}; "
          f"{len(failed)} failures, {truncated} truncated")
    return EXIT_OK


# ------------------------------------------------------------------- train

def _load_cache_with_manifest(cache_path):
    features = dsp.cache_read(cache_path)
    sidecar = cache_path + ".manifest.csv"
    if not os.path.exists(sidecar):
        raise DataError(f"missing sidecar manifest {sidecar}")
    manifest = load_manifest_csv(sidecar)
    return features, manifest


def _resolve_configs(args, manifest, features):
    mcfg, tcfg, explicit = load_config_file(args.config)
    n_classes = len(manifest.label_set)
    if "n_classes" in explicit and mcfg.n_classes != n_classes:
        raise DataError(f"config says n_classes={mcfg.n_classes} but the "
                        f"manifest has {n_classes} labels")
    t_len = features[0].frames.shape[0]
    if "seq_len" in explicit and mcfg.seq_len != t_len:
        raise DataError(f"config says seq_len={mcfg.seq_len} but cached "
                        f"features have {t_len} frames")
    mcfg = replace(mcfg, n_classes=n_classes, seq_len=t_len)
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    return mcfg, tcfg


SPLIT_SCHEMES = {"holdout": "holdout_80_20", "cv5": "cv5", "cv10": "cv10"}


def _train_fold(features, manifest, fold, mcfg, tcfg, out_dir, tag):
    result = trainer.train(features, manifest, fold, mcfg, tcfg)
    report = trainer.evaluate(mcfg, result.params, features, manifest, fold[1],
                              tcfg.batch_size)
    meta = {"best_epoch": str(result.best_epoch),
            "best_val_war": repr(result.best_val_war),
            "seed": str(tcfg.seed), "fold": tag}
    paths = [os.path.join(out_dir, f"{stem}_{tag}{ext}") for stem, ext in
             (("fold", ".ckpt"), ("history", ".csv"), ("report", ".json"),
              ("confusion", ".csv"))]
    checkpoint_save(paths[0], mcfg, result.params, meta)
    with open(paths[1], "w") as fh:
        fh.write(trainer.history_csv(result.history))
    with open(paths[2], "w") as fh:
        fh.write(metrics.report_to_json(report))
    with open(paths[3], "w") as fh:
        fh.write(metrics.confusion_csv(report))
    return result, report, paths


def cmd_train(args, argv) -> int:
    t0 = time.perf_counter()
    features, manifest = _load_cache_with_manifest(args.features)
    mcfg, tcfg = _resolve_configs(args, manifest, features)
    os.makedirs(args.out, exist_ok=True)
    plan = make_splits(manifest, SPLIT_SCHEMES[args.split], tcfg.seed)
    artifacts = []
    if args.split == "holdout":
        _, report, paths = _train_fold(features, manifest, plan.folds[0], mcfg,
                                       tcfg, args.out, "0")
        artifacts.extend(paths)
        summary = {"scheme": plan.scheme, "war": report.war, "uar": report.uar,
                   "n_test": report.n}
    else:
        reports = []
        for f, fold in enumerate(plan.folds):
            tcfg_f = replace(tcfg, seed=tcfg.seed + f)
            try:
                _, rep, paths = _train_fold(features, manifest, fold, mcfg,
                                            tcfg_f, args.out, str(f))
            except (DataError, NumericError) as exc:
                raise type(exc)(f"fold {f}: {exc}") from exc
            artifacts.extend(paths)
            reports.append(rep)
        wars = np.array([r.war for r in reports])
        uars = np.array([r.uar for r in reports])
        summary = {"scheme": plan.scheme, "folds": len(plan.folds),
                   "war_mean": float(wars.mean()), "war_std": float(wars.std()),
                   "war_max": float(wars.max()),
                   "uar_mean": float(uars.mean()), "uar_std": float(uars.std()),
                   "uar_max": float(uars.max())}
    summary_path = os.path.join(args.out, "summary.json")
    with open(summary_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    artifacts.append(summary_path)
    write_run_manifest(os.path.join(args.out, "run_manifest.json"), argv,
                       merged_config_text(mcfg, tcfg), tcfg.seed, artifacts,
                       time.perf_counter() - t0)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# ------------------------------------------------------------------ ablate

def _ablation_variants(study: str, base: ModelConfig):
    if study == "gating":
        return [(f"levels_{l}", str(l), replace(base, gating_levels=l))
                for l in (1, 2, 3, 4)]
    if study == "gscb":
        return [(f"gscb_{j}", str(j), replace(base, n_gscb=j))
                for j in (1, 2, 3, 4, 5)]
    if study == "scale":
        return [(mode, mode, replace(base, skip_mode=mode))
                for mode in ("max_scale", "multi_scale")]
    if study == "drd":
        rows = []
        for scheme, n_gcb in (("ours", 7), ("ours", 6), ("raw", 7), ("raw", 8)):
            cfg = replace(base, drd_scheme=scheme, n_gcb=n_gcb)
            rows.append((f"{scheme}-{receptive_field(cfg)[0]}", scheme, cfg))
        return rows
    raise UsageError(f"unknown study {study!r}")


def cmd_ablate(args, argv) -> int:
    t0 = time.perf_counter()
    features, manifest = _load_cache_with_manifest(args.features)
    base_m, tcfg = _resolve_configs(args, manifest, features)
    os.makedirs(args.out, exist_ok=True)
    plan = make_splits(manifest, "holdout_80_20", tcfg.seed)
    fold = plan.folds[0]
    rows = []
    for variant, axis_value, mcfg in _ablation_variants(args.study, base_m):
        result = trainer.train(features, manifest, fold, mcfg, tcfg)
        report = trainer.evaluate(mcfg, result.params, features, manifest,
                                  fold[1], tcfg.batch_size)
        nominal, actual = receptive_field(mcfg)
        rows.append({"study": args.study, "variant": variant, "value": axis_value,
                     "params": param_count(mcfg), "nominal_rf": nominal,
                     "actual_rf": actual, "war": report.war, "uar": report.uar})
        log.info("ablate %s %s: war=%.4f uar=%.4f", args.study, variant,
                 report.war, report.uar)
    csv_path = os.path.join(args.out, f"ablation_{args.study}.csv")
    with open(csv_path, "w") as fh:
        fh.write("study,variant,value,params,nominal_rf,actual_rf,war,uar\n")
        for r in rows:
            fh.write(f"{r['study']},{r['variant']},{r['value']},{r['params']},"
                     f"{r['nominal_rf']},{r['actual_rf']},{r['war']!r},{r['uar']!r}\n")
    write_run_manifest(os.path.join(args.out, "run_manifest.json"), argv,
                       merged_config_text(base_m, tcfg), tcfg.seed, [csv_path],
                       time.perf_counter() - t0)
    print(f"wrote {len(rows)} {args.study} rows to {csv_path}")
    return EXIT_OK


# ----------------------------------------------------------------- analyze

_ANALYSIS_CTX: tuple | None = None


def _analysis_init(cfg, params):
    global _ANALYSIS_CTX
    _ANALYSIS_CTX = (cfg, params)


def _entropy_worker(fm):
    cfg, params = _ANALYSIS_CTX
    return analysis.utterance_entropy(cfg, params, fm)


def _maps_worker(fm):
    cfg, params = _ANALYSIS_CTX
    return [(m.source, analysis.pgm_bytes(m.u8), analysis.map_csv(m.values))
            for m in analysis.export_feature_maps(cfg, params, fm)]


def _analysis_map(worker, cfg, params, fms):
    """Order-preserving per-clip map, parallel when workers allow."""
    workers = worker_count()
    if workers <= 1 or len(fms) <= 1:
        _analysis_init(cfg, params)
        return [worker(fm) for fm in fms]
    with ProcessPoolExecutor(max_workers=workers, initializer=_analysis_init,
                             initargs=(cfg, params)) as pool:
        return list(pool.map(worker, fms,
                             chunksize=max(1, len(fms) // (workers * 4))))


def _features_by_id(features, manifest):
    by_id = {fm.clip_id: fm for fm in features}
    out = []
    for e in manifest.entries:
        fm = by_id.get(e.path)
        if fm is None:
            raise DataError(f"cache has no record for {e.path}")
        out.append((e, fm))
    return out


def cmd_analyze(args, argv) -> int:
    t0 = time.perf_counter()
    cfg, params, _meta = checkpoint_load(args.ckpt)
    features, manifest = _load_cache_with_manifest(args.features)
    if cfg.n_classes != len(manifest.label_set):
        raise DataError(f"checkpoint has {cfg.n_classes} classes but the "
                        f"cache manifest has {len(manifest.label_set)}")
    pairs = _features_by_id(features, manifest)
    os.makedirs(args.out, exist_ok=True)
    artifacts = []

    if args.what == "maps":
        maps_root = os.path.join(args.out, "maps")
        os.makedirs(maps_root, exist_ok=True)
        rendered = _analysis_map(_maps_worker, cfg, params,
                                 [fm for _, fm in pairs])
        for idx, ((entry, _), clip_maps) in enumerate(zip(pairs, rendered)):
            clip_dir = os.path.join(
                maps_root, f"{idx:04d}_{_sanitize(os.path.basename(entry.path))}")
            os.makedirs(clip_dir, exist_ok=True)
            for source, pgm, csv_text in clip_maps:
                with open(os.path.join(clip_dir, f"{source}.pgm"), "wb") as fh:
                    fh.write(pgm)
                with open(os.path.join(clip_dir, f"{source}.csv"), "w") as fh:
                    fh.write(csv_text)
        artifacts.append(maps_root)
        print(f"wrote {cfg.n_gcb + 2} maps for each of {len(pairs)} clips")
    elif args.what == "entropy":
        bits = _analysis_map(_entropy_worker, cfg, params,
                             [fm for _, fm in pairs])
        groups: dict[tuple[str, str], list[float]] = {}
        for (entry, _), e_bits in zip(pairs, bits):
            groups.setdefault((entry.corpus, entry.label), []).append(e_bits)
        csv_path = os.path.join(args.out, "entropy.csv")
        with open(csv_path, "w") as fh:
            fh.write("corpus,emotion,entropy_bits\n")
            for (corp, emo) in sorted(groups):
                fh.write(f"{corp},{emo},{float(np.mean(groups[(corp, emo)]))!r}\n")
        artifacts.append(csv_path)
        print(f"wrote entropy for {len(groups)} corpus/emotion groups")
    elif args.what == "project":
        for _, fm in pairs:
            if fm.frames.shape[0] != cfg.seq_len:
                raise DataError(f"cache frames ({fm.frames.shape[0]}) do not "
                                f"match checkpoint seq_len ({cfg.seq_len})")
        pooled = np.stack([analysis.pooled_features(cfg, params, fm)
                           for _, fm in pairs])
        ae = analysis.ae_train(pooled, seed=args.seed)
        coords = analysis.ae_project(ae, pooled)
        csv_path = os.path.join(args.out, "projections.csv")
        with open(csv_path, "w") as fh:
            fh.write("id,label,x,y\n")
            for (entry, _), (x, y) in zip(pairs, coords):
                fh.write(f"{entry.path},{entry.label},{float(x)!r},{float(y)!r}\n")
        artifacts.append(csv_path)
        print(f"wrote projections for {len(pairs)} clips")

    write_run_manifest(os.path.join(args.out, "run_manifest.json"), argv,
                       config_text(cfg), args.seed, artifacts,
                       time.perf_counter() - t0)
    return EXIT_OK


# ------------------------------------------------------------------- synth

def cmd_synth(args, argv) -> int:
    t0 = time.perf_counter()
    manifest = synth_generate(args.out, seed=args.seed, n_per_class=args.per_class)
    write_run_manifest(os.path.join(args.out, "run_manifest.json"), argv,
                       f"per_class={args.per_class}\n", args.seed,
                       [os.path.join(args.out, "manifest.csv")],
                       time.perf_counter() - t0)
    print(f"wrote {len(manifest.entries)} clips across "
          f"{len(manifest.label_set)} classes to {args.out}")
    return EXIT_OK


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gmtc", description="Speech emotion recognition with a "
                "gated multi-scale temporal convolutional network")
    sub = p.add_subparsers(dest="cmd", required=True)

    f = sub.add_parser("features", help="extract MFCC features into a cache")
    f.add_argument("--corpus", required=True,
                   help="corpus kind (emodb|ravdess|savee|casia) or manifest CSV path")
    f.add_argument("--root", help="corpus root directory")
    f.add_argument("--out", required=True, help="cache file to write")
    f.add_argument("--tmax", type=_positive_int,
                   help="pad/truncate to this many frames (default: longest, "
                        "rounded up to a multiple of 32)")
    f.add_argument("--standardize", action="store_true",
                   help="per-utterance feature standardization")

    t = sub.add_parser("train", help="train and evaluate")
    t.add_argument("--features", required=True, help="feature cache")
    t.add_argument("--split", choices=sorted(SPLIT_SCHEMES), default="holdout")
    t.add_argument("--seed", type=int)
    t.add_argument("--config", help="flat key=value config file")
    t.add_argument("--out", required=True, help="output directory")

    a = sub.add_parser("ablate", help="run a configuration sweep")
    a.add_argument("--study", choices=["gating", "gscb", "scale", "drd"],
                   required=True)
    a.add_argument("--features", required=True)
    a.add_argument("--seed", type=int)
    a.add_argument("--config", help="base config file")
    a.add_argument("--out", required=True)

    z = sub.add_parser("analyze", help="interpretability artifacts")
    z.add_argument("what", choices=["entropy", "maps", "project"])
    z.add_argument("--ckpt", required=True)
    z.add_argument("--features", required=True)
    z.add_argument("--out", required=True)
    z.add_argument("--seed", type=int, default=0, help="projector seed")

    s = sub.add_parser("synth", help="generate the synthetic corpus")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--per-class", type=_positive_int, required=True)
    return p


_COMMANDS = {"features": cmd_features, "train": cmd_train, "ablate": cmd_ablate,
             "analyze": cmd_analyze, "synth": cmd_synth}


def main(argv=None) -> int:
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO,
                            format="%(levelname)s %(name)s: %(message)s")
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.cmd](args, ["gmtc"] + argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
