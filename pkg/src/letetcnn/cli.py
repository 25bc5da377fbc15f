"""Command-line pipeline: synth, prep, train, eval, gradcam.

Every command resolves its configuration from builtin defaults, then an
optional JSON config file, then explicit flags (flags win), and emits a run
manifest that is sufficient to reproduce the invocation. Report paths write
matplotlib figures next to the delimited output. Exit codes: 0 success,
1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .explain import ExplainError, export_heatmap, export_heatmap_csv, gradcam
from .landmarks import (
    DiffusionKernelSpec,
    LandmarkError,
    load_landmarks,
    save_landmarks,
)
from .lbo import (
    AssemblyError,
    EigenSolverError,
    load_lbo,
    mesh_content_hash,
    save_lbo,
)
from .mesh_io import MeshFormatError, MeshValidationError, load_mesh
from .model import (
    ConfigError,
    Model,
    ModelConfig,
    TrainConfig,
    TrainingError,
    evaluate,
    pipeline_mesh,
    prepare_sample,
    split_dataset,
    train,
)
from .patches import PatchError
from .synth import (
    SynthError,
    SynthSpec,
    generate_raw,
    load_dataset,
    read_manifest,
    write_dataset,
)

CACHE_ENV = "LETETCNN_CACHE"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir, command, config, inputs, outputs):
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "inputs": {str(p): _sha256_file(p) for p in inputs if Path(p).is_file()},
        "outputs": [str(o) for o in outputs],
    }
    path = Path(out_dir) / f"{command}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _resolve(args, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    cfg = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            data = json.loads(Path(config_path).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {config_path}: {exc}") from exc
        unknown = set(data) - set(defaults)
        if unknown:
            raise UsageError(
                f"config file {config_path} has unknown keys: {sorted(unknown)}"
            )
        cfg.update(data)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _cache_dir(cfg, data_dir) -> Path:
    if cfg.get("cache"):
        return Path(cfg["cache"])
    if os.environ.get(CACHE_ENV):
        return Path(os.environ[CACHE_ENV])
    return Path(data_dir) / "cache"


def _kernel_spec(cfg) -> DiffusionKernelSpec:
    return DiffusionKernelSpec(
        scales=tuple(cfg.get("scales") or (0.01, 0.1, 1.0)),
        n_eigenpairs=cfg["eigenpairs"],
    )


def _cached_prepare_factory(cfg, cache: Path, log=print):
    """Sample preparation that reuses cached operators/landmarks when valid."""
    cache.mkdir(parents=True, exist_ok=True)
    kernel = _kernel_spec(cfg)
    method = cfg["method"]
    n_landmarks = cfg["landmarks"]

    def prepare(mesh, rec):
        normalized = pipeline_mesh(mesh)
        key = mesh_content_hash(normalized)
        lbo_path = cache / f"{key}.lbo.npz"
        lm_path = cache / f"{key}.landmarks-{method}-{n_landmarks}.txt"

        bundle = None
        if lbo_path.is_file():
            try:
                bundle = load_lbo(lbo_path)
                if bundle.stiffness.n_rows != normalized.n_vertices:
                    raise ValueError("size mismatch")
            except Exception as exc:  # corrupted cache: recompute
                warnings.warn(f"cache entry {lbo_path.name} unusable ({exc}); "
                              "recomputing", RuntimeWarning)
                bundle = None
        landmark_set = None
        if lm_path.is_file():
            try:
                landmark_set = load_landmarks(lm_path.read_text(), normalized)
            except Exception as exc:
                warnings.warn(f"cache entry {lm_path.name} unusable ({exc}); "
                              "recomputing", RuntimeWarning)
                landmark_set = None

        had_bundle, had_landmarks = bundle is not None, landmark_set is not None
        sample = prepare_sample(
            normalized,
            label=rec["label"],
            biomarker=rec.get("biomarker"),
            n_landmarks=n_landmarks,
            landmark_method=method,
            kernel_spec=kernel,
            lbo_bundle=bundle,
            landmark_set=landmark_set,
            sample_id=rec["id"],
        )
        if not had_bundle:
            save_lbo(sample.lbo, lbo_path)
        if not had_landmarks:
            lm_path.write_text(save_landmarks(sample.landmarks))
        if had_bundle and had_landmarks:
            log(f"{rec['id']}: cache hit ({key[:12]})")
        return sample

    return prepare


_SYNTH_DEFAULTS = {
    "out": None,
    "classes": 2,
    "per_class": 40,
    "resolution": 8,
    "amplitude": 0.15,
    "bump_radius": 0.8,
    "separation": 1.8,
    "noise": 0.003,
    "seed": 0,
}

_PREP_DEFAULTS = {
    "data": None,
    "landmarks": 64,
    "method": "gp-diffusion",
    "eigenpairs": 64,
    "scales": None,
    "cache": None,
    "jobs": 1,
}

_TRAIN_DEFAULTS = {
    "data": None,
    "out": None,
    "variant": "letetcnn",
    "fuse_biomarker": False,
    "hidden_dim": 128,
    "tetcnn_layers": 2,
    "transformer_layers": 2,
    "cheb_order": 3,
    "radius": 0.5,
    "landmarks": 64,
    "method": "gp-diffusion",
    "eigenpairs": 64,
    "scales": None,
    "lr": 1e-4,
    "weight_decay": 1e-4,
    "epochs": 500,
    "micro_batch": 2,
    "accum_steps": 4,
    "seed": 0,
    "precision": "float64",
    "cache": None,
}

_EVAL_DEFAULTS = {
    "data": None,
    "checkpoint": None,
    "out": None,
    "subset": "test",
    "stratum": "all",
    "threshold": 0.5,
    "seed": 0,
    "landmarks": 64,
    "method": "gp-diffusion",
    "eigenpairs": 64,
    "scales": None,
    "cache": None,
}

_GRADCAM_DEFAULTS = {
    "data": None,
    "checkpoint": None,
    "out": None,
    "subset": "test",
    "limit": 0,
    "csv": False,
    "seed": 0,
    "landmarks": 64,
    "method": "gp-diffusion",
    "eigenpairs": 64,
    "scales": None,
    "cache": None,
}


def _add_common_data_flags(p):
    p.add_argument("--data", help="dataset directory (manifest.json inside)")
    p.add_argument("--landmarks", type=int, help="super nodes per mesh")
    p.add_argument("--method", choices=["gp-diffusion", "fps"])
    p.add_argument("--eigenpairs", type=int, help="spectral truncation for the kernel")
    p.add_argument("--cache", help=f"operator cache dir (or ${CACHE_ENV})")


def build_parser() -> _Parser:
    parser = _Parser(prog="letetcnn", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--out", help="output dataset directory")
    p.add_argument("--classes", type=int, help="number of classes (must be 2)")
    p.add_argument("--per-class", dest="per_class", type=int)
    p.add_argument("--resolution", type=int, help="grid cubes per axis")
    p.add_argument("--amplitude", type=float, help="dent amplitude in (0, 0.5)")
    p.add_argument("--bump-radius", dest="bump_radius", type=float)
    p.add_argument("--separation", type=float, help="biomarker class separation")
    p.add_argument("--noise", type=float, help="vertex noise scale")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("prep", help="precompute operators and landmarks")
    p.add_argument("--config", help="JSON config file; flags override it")
    _add_common_data_flags(p)
    p.add_argument("--jobs", type=int, help="parallel preprocessing workers")

    p = sub.add_parser("train", help="train a classifier")
    p.add_argument("--config", help="JSON config file; flags override it")
    _add_common_data_flags(p)
    p.add_argument("--out", help="run output directory")
    p.add_argument("--variant", choices=["letetcnn", "le", "tetcnn"])
    p.add_argument("--fuse-biomarker", dest="fuse_biomarker",
                   action=argparse.BooleanOptionalAction)
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    p.add_argument("--tetcnn-layers", dest="tetcnn_layers", type=int)
    p.add_argument("--transformer-layers", dest="transformer_layers", type=int)
    p.add_argument("--cheb-order", dest="cheb_order", type=int)
    p.add_argument("--radius", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--micro-batch", dest="micro_batch", type=int)
    p.add_argument("--accum-steps", dest="accum_steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=["float64", "float32"])

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--config", help="JSON config file; flags override it")
    _add_common_data_flags(p)
    p.add_argument("--checkpoint", help="checkpoint .npz from train")
    p.add_argument("--out", help="output directory")
    p.add_argument("--subset", choices=["all", "train", "val", "test"])
    p.add_argument("--stratum", choices=["all", "low", "medium", "high"])
    p.add_argument("--threshold", type=float)
    p.add_argument("--seed", type=int, help="split seed (match train)")

    p = sub.add_parser("gradcam", help="export Grad-CAM heatmaps as VTK")
    p.add_argument("--config", help="JSON config file; flags override it")
    _add_common_data_flags(p)
    p.add_argument("--checkpoint", help="checkpoint .npz from train")
    p.add_argument("--out", help="output directory")
    p.add_argument("--subset", choices=["all", "train", "val", "test"])
    p.add_argument("--limit", type=int, help="max samples (0 = no limit)")
    p.add_argument("--csv", action=argparse.BooleanOptionalAction,
                   help="also write per-vertex values as CSV")
    p.add_argument("--seed", type=int, help="split seed (match train)")

    return parser


def cmd_synth(args) -> int:
    cfg = _resolve(args, _SYNTH_DEFAULTS)
    if not cfg["out"]:
        raise UsageError("synth requires --out")
    if cfg["classes"] != 2:
        raise UsageError("only binary datasets are supported (--classes 2)")
    spec = SynthSpec(
        n_per_class=cfg["per_class"],
        grid_resolution=cfg["resolution"],
        bump_amplitude=cfg["amplitude"],
        bump_radius=cfg["bump_radius"],
        biomarker_separation=cfg["separation"],
        noise_scale=cfg["noise"],
        seed=cfg["seed"],
    )
    raw = generate_raw(spec)
    manifest_path = write_dataset(raw, spec, cfg["out"])
    _write_manifest(cfg["out"], "synth", cfg, [], [manifest_path])
    print(f"wrote {len(raw)} samples to {cfg['out']}")
    return 0


def _load_prepared(cfg, data_dir, log=print):
    cache = _cache_dir(cfg, data_dir)
    prepare = _cached_prepare_factory(cfg, cache, log=log)
    return load_dataset(data_dir, prepare=prepare)


def cmd_prep(args) -> int:
    cfg = _resolve(args, _PREP_DEFAULTS)
    if not cfg["data"]:
        raise UsageError("prep requires --data")
    manifest = read_manifest(cfg["data"])
    cache = _cache_dir(cfg, cfg["data"])
    prepare = _cached_prepare_factory(cfg, cache)
    base = Path(cfg["data"])

    def run_one(rec):
        mesh = load_mesh(base / rec["node"], base / rec["ele"])
        prepare(mesh, rec)
        return rec["id"]

    records = manifest["samples"]
    if cfg["jobs"] > 1:
        with ThreadPoolExecutor(max_workers=cfg["jobs"]) as pool:
            list(pool.map(run_one, records))
    else:
        for rec in records:
            run_one(rec)
    _write_manifest(cfg["data"], "prep", cfg, [base / "manifest.json"], [cache])
    print(f"prepared {len(records)} samples into {cache}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args, _TRAIN_DEFAULTS)
    if not cfg["data"] or not cfg["out"]:
        raise UsageError("train requires --data and --out")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    samples, _ = _load_prepared(cfg, cfg["data"], log=lambda *_: None)

    mcfg = ModelConfig(
        hidden_dim=cfg["hidden_dim"],
        n_tetcnn_layers=cfg["tetcnn_layers"],
        n_transformer_layers=cfg["transformer_layers"],
        cheb_order=cfg["cheb_order"],
        radius=cfg["radius"],
        n_landmarks=cfg["landmarks"],
        variant=cfg["variant"],
        fuse_biomarker=cfg["fuse_biomarker"],
    )
    tcfg = TrainConfig(
        lr=cfg["lr"],
        weight_decay=cfg["weight_decay"],
        epochs=cfg["epochs"],
        micro_batch=cfg["micro_batch"],
        accumulation_steps=cfg["accum_steps"],
        seed=cfg["seed"],
        precision=cfg["precision"],
    )
    result = train(samples, mcfg, tcfg)

    ckpt = out / "checkpoint.npz"
    result.model.save(ckpt)
    hist_csv = out / "history.csv"
    with open(hist_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "loss", "train_acc", "val_acc"])
        for row in result.history:
            writer.writerow(
                [row["epoch"], f"{row['loss']:.17g}",
                 f"{row['train_acc']:.17g}", f"{row['val_acc']:.17g}"]
            )
    from .figures import save_history_figure

    hist_png = out / "history.png"
    save_history_figure(result.history, hist_png)
    split_json = out / "split.json"
    split_json.write_text(
        json.dumps(
            {"train": list(map(int, result.split[0])),
             "val": list(map(int, result.split[1])),
             "test": list(map(int, result.split[2])),
             "best_epoch": result.best_epoch},
            indent=2,
        )
    )
    _write_manifest(
        out, "train", cfg,
        [Path(cfg["data"]) / "manifest.json"],
        [ckpt, hist_csv, hist_png, split_json],
    )
    best = result.history[result.best_epoch]
    print(
        f"trained {cfg['variant']} for {tcfg.epochs} epochs; best epoch "
        f"{result.best_epoch} (val_acc {best['val_acc']:.3f}); saved {ckpt}"
    )
    return 0


def _select_subset(samples, strata, subset, stratum, seed):
    idx = list(range(len(samples)))
    if subset != "all":
        split = split_dataset(samples, seed)
        idx = split[{"train": 0, "val": 1, "test": 2}[subset]]
    if stratum != "all":
        idx = [i for i in idx if strata[i] == stratum]
    return idx


def cmd_eval(args) -> int:
    cfg = _resolve(args, _EVAL_DEFAULTS)
    if not cfg["data"] or not cfg["checkpoint"] or not cfg["out"]:
        raise UsageError("eval requires --data, --checkpoint and --out")
    if not Path(cfg["checkpoint"]).is_file():
        raise MeshFormatError(f"checkpoint not found: {cfg['checkpoint']}")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    samples, strata = _load_prepared(cfg, cfg["data"], log=lambda *_: None)
    model = Model.load(cfg["checkpoint"])

    idx = _select_subset(samples, strata, cfg["subset"], cfg["stratum"], cfg["seed"])
    if not idx:
        raise ConfigError(
            f"no samples in subset={cfg['subset']} stratum={cfg['stratum']}"
        )
    chosen = [samples[i] for i in idx]
    metrics, probs = evaluate(chosen, model, threshold=cfg["threshold"])

    metrics_csv = out / "metrics.csv"
    with open(metrics_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["ACC", "SEN", "SPE", "TP", "TN", "FP", "FN", "N"])
        writer.writerow(
            [
                f"{metrics.accuracy:.6f}",
                "" if metrics.sensitivity is None else f"{metrics.sensitivity:.6f}",
                "" if metrics.specificity is None else f"{metrics.specificity:.6f}",
                metrics.tp, metrics.tn, metrics.fp, metrics.fn, metrics.total,
            ]
        )
    from .figures import save_metrics_figure

    metrics_png = out / "metrics.png"
    save_metrics_figure(metrics, probs, [s.label for s in chosen], metrics_png)
    _write_manifest(
        out, "eval", cfg,
        [Path(cfg["data"]) / "manifest.json", cfg["checkpoint"]],
        [metrics_csv, metrics_png],
    )
    sen = "n/a" if metrics.sensitivity is None else f"{metrics.sensitivity:.3f}"
    spe = "n/a" if metrics.specificity is None else f"{metrics.specificity:.3f}"
    print(
        f"evaluated {len(chosen)} samples: ACC {metrics.accuracy:.3f} "
        f"SEN {sen} SPE {spe}"
    )
    return 0


def cmd_gradcam(args) -> int:
    cfg = _resolve(args, _GRADCAM_DEFAULTS)
    if not cfg["data"] or not cfg["checkpoint"] or not cfg["out"]:
        raise UsageError("gradcam requires --data, --checkpoint and --out")
    if not Path(cfg["checkpoint"]).is_file():
        raise MeshFormatError(f"checkpoint not found: {cfg['checkpoint']}")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    samples, strata = _load_prepared(cfg, cfg["data"], log=lambda *_: None)
    model = Model.load(cfg["checkpoint"])

    idx = _select_subset(samples, strata, cfg["subset"], "all", cfg["seed"])
    if cfg["limit"]:
        idx = idx[: cfg["limit"]]
    outputs = []
    for i in idx:
        sample = samples[i]
        heatmap = gradcam(sample, model)
        path = out / f"{sample.sample_id}_gradcam.vtk"
        export_heatmap(sample.mesh, heatmap, path)
        outputs.append(path)
        if cfg["csv"]:
            csv_path = out / f"{sample.sample_id}_gradcam.csv"
            export_heatmap_csv(heatmap, csv_path)
            outputs.append(csv_path)
    _write_manifest(
        out, "gradcam", cfg,
        [Path(cfg["data"]) / "manifest.json", cfg["checkpoint"]],
        outputs,
    )
    print(f"wrote {len(outputs)} heatmaps to {out}")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "prep": cmd_prep,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcam": cmd_gradcam,
}

_DATA_ERRORS = (
    MeshFormatError,
    MeshValidationError,
    SynthError,
    LandmarkError,
    PatchError,
    ExplainError,
    ConfigError,
    FileNotFoundError,
)
_NUMERICAL_ERRORS = (EigenSolverError, TrainingError, FloatingPointError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except _NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (AssemblyError,) + _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
