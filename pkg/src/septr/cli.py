"""Command-line entry point.

Every command writes its files under ``--out``.  Settings resolve as
command-line flag > ``--config`` JSON file > built-in default, and the
resolved values with their sources are recorded in ``manifest.json``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import datasets, plotting, synthetic
from . import model as M
from . import tensor as T
from .dsp import AugmentConfig, SpectroConfig, mel_spectrogram
from .errors import AudioFormatError, CheckpointError, ConfigError, DataError
from .formats import read_wav, save_spectrogram, spectrogram_text
from .model import Model, ModelConfig
from .train import (
    Featurizer,
    Schedule,
    TrainConfig,
    evaluate,
    mcnemar,
    read_metrics_csv,
    train,
)

log = logging.getLogger("septr")

VARIANT_FLAGS = {"vh": "VH", "hv": "HV", "v": "V", "h": "H", "vit": "ViT"}


# ---------------------------------------------------------------------------
# Configuration resolution


class Resolver:
    """Look up a setting in flags, then the config file section, then defaults."""

    def __init__(self, args: argparse.Namespace, file_cfg: dict):
        self.args = args
        self.file = file_cfg
        self.sources: dict[str, str] = {}

    def get(self, section: str, key: str, default, flag: str | None = None):
        """``flag`` names the argparse attribute to consult; None means the setting has no flag."""
        name = f"{section}.{key}" if section else key
        value = getattr(self.args, flag, None) if flag else None
        if value is not None:
            self.sources[name] = "flag"
            return value
        block = self.file.get(section, {}) if section else self.file
        if key in block:
            self.sources[name] = "file"
            return block[key]
        self.sources[name] = "default"
        return default


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return cfg


def _dataclass_from(cls, res: Resolver, section: str, flag_map: dict[str, str] | None = None, **fixed):
    flag_map = flag_map or {}
    values = {}
    for f in fields(cls):
        if f.name in fixed:
            values[f.name] = fixed[f.name]
            res.sources.setdefault(f"{section}.{f.name}", "derived")
            continue
        values[f.name] = res.get(section, f.name, f.default, flag_map.get(f.name))
    for key in ("noise_snr_db", "speed_factors"):
        if isinstance(values.get(key), list):
            values[key] = tuple(values[key])
    return cls(**values)


def resolve_model(res: Resolver, freq_bins: int, time_slots: int, num_classes: int) -> ModelConfig:
    variant = str(res.get("model", "variant", "vh", "variant"))
    variant = VARIANT_FLAGS.get(variant.lower(), variant)
    flags = {"depth": "depth", "dim": "dim", "heads": "heads", "precision": "precision"}
    fixed = {"variant": variant, "freq_bins": freq_bins, "time_slots": time_slots, "num_classes": num_classes}
    return _dataclass_from(ModelConfig, res, "model", flags, **fixed)


def resolve_train(res: Resolver, seed: int) -> TrainConfig:
    sched = Schedule(
        initial_lr=res.get("train", "lr", Schedule.initial_lr, "lr"),
        factor=res.get("train", "lr_decay", Schedule.factor),
        period=res.get("train", "lr_period", Schedule.period),
    )
    augment = _dataclass_from(AugmentConfig, res, "augment", seed=seed)
    if getattr(res.args, "no_augment", False):
        augment = AugmentConfig.disabled()
        res.sources["augment"] = "flag"
    return TrainConfig(
        epochs=res.get("train", "epochs", TrainConfig.epochs, "epochs"),
        batch_size=res.get("train", "batch_size", TrainConfig.batch_size, "batch_size"),
        schedule=sched,
        seed=seed,
        augment=augment,
        stop_at_val_accuracy=res.get("train", "stop_at_val_accuracy", None, "stop_at"),
    )


def _seed(res: Resolver) -> int:
    seed = int(res.get("", "seed", 0, "seed"))
    if seed < 0 or seed >= 2**64:
        raise ConfigError("--seed must be an unsigned 64-bit integer")
    return seed


# ---------------------------------------------------------------------------
# Data


def resolve_data(res: Resolver, seed: int):
    """Return (train, val, spectro config) for either a WAV tree or the synthetic task."""
    root = res.get("data", "root", None, "data")
    if root:
        clip = float(res.get("data", "clip_seconds", 1.0))
        names = datasets.class_names(root)
        tr = datasets.load_split(root, "train", clip, names)
        va = datasets.load_split(root, "val", clip, names)
        spectro = _dataclass_from(SpectroConfig, res, "spectrogram", {"mel_bins": "mel_bins"}, sample_rate=tr.sample_rate)
        return tr, va, spectro
    n_train = int(res.get("data", "n_train", 800))
    n_val = int(res.get("data", "n_val", 200))
    mel_bins = int(res.get("spectrogram", "mel_bins", 32, "mel_bins"))
    frames = int(res.get("spectrogram", "frames", 32))
    seconds = float(res.get("data", "seconds", 1.0))
    tr, va = synthetic.generate(n_train, n_val, seed=seed, seconds=seconds)
    return tr, va, synthetic.synthetic_spectro_config(mel_bins, frames, seconds=seconds)


def _val_split_from_manifest(manifest: dict):
    data = manifest["data"]["validation"]
    spectro = SpectroConfig(**manifest["spectrogram"])
    if data.get("kind") == "directory":
        names = datasets.class_names(data["root"])
        return datasets.load_split(data["root"], "val", data["clip_seconds"], names), spectro
    va = synthetic.make_split(data["n_val"], data["seed"], 2, data["sample_rate"], data["seconds"])
    va.description = data
    return va, spectro


def _load_run(path: str) -> tuple[Model, dict]:
    p = Path(path)
    run_dir = p if p.is_dir() else p.parent
    ckpt = p / "best.spck" if p.is_dir() else p
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"{manifest_path} not found; pass a run directory written by 'train'")
    manifest = json.loads(manifest_path.read_text())
    cfg = ModelConfig.from_dict(manifest["model"])
    return Model.load(ckpt, cfg), manifest


# ---------------------------------------------------------------------------
# Commands


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, res: Resolver, extra: dict) -> None:
    record = {"command": command, "sources": dict(sorted(res.sources.items())), **extra}
    path = out / "manifest.json"
    if command == "train" and path.exists():  # extend the manifest written by the training loop
        record = {**json.loads(path.read_text()), **record}
    path.write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")


def cmd_spectrogram(args, res: Resolver) -> int:
    out = _out_dir(args)
    wave = read_wav(args.wav)
    spectro = _dataclass_from(SpectroConfig, res, "spectrogram", {"mel_bins": "mel_bins"}, sample_rate=wave.sample_rate)
    spec = mel_spectrogram(wave, spectro)
    stem = Path(args.wav).stem
    save_spectrogram(out / f"{stem}.sptr", spec)
    if args.text:
        (out / f"{stem}.txt").write_text(spectrogram_text(spec.values))
    if args.plot:
        plotting.plot_spectrogram(spec.values, out / f"{stem}.png", title=stem)
    lo, hi = float(spec.values.min()), float(spec.values.max())
    print(f"shape {spec.values.shape[0]}x{spec.values.shape[1]}  range [{lo:.6f}, {hi:.6f}]")
    _write_manifest(out, "spectrogram", res, {"input": str(args.wav), "spectrogram": asdict(spectro)})
    return 0


def cmd_make_synthetic(args, res: Resolver) -> int:
    out = _out_dir(args)
    seed = _seed(res)
    tr, va = synthetic.generate(args.n_train, args.n_val, seed=seed)
    datasets.write_tree(out, {"train": tr, "val": va})
    print(f"wrote {len(tr)} train and {len(va)} val clips under {out}")
    return 0


def cmd_train(args, res: Resolver) -> int:
    out = _out_dir(args)
    seed = _seed(res)
    tr, va, spectro = resolve_data(res, seed)
    n = int(round(tr.waveforms.shape[1]))
    model_cfg = resolve_model(res, spectro.mel_bins, spectro.num_frames(n), tr.num_classes)
    train_cfg = resolve_train(res, seed)
    log.info("training %s (%d parameters) on %d clips", model_cfg.variant, M.param_count(model_cfg), len(tr))
    t0 = time.perf_counter()
    result = train(model_cfg, tr, va, spectro, train_cfg, out, {"class_names": list(tr.class_names)})
    elapsed = time.perf_counter() - t0
    plotting.plot_training_curves(read_metrics_csv(out / "metrics.csv"), out / "curves.png")
    _write_manifest(out, "train", res, {"wall_seconds": elapsed})
    print(f"best val_acc {result.best_val_acc:.4f} at epoch {result.best_epoch}  ({len(result.metrics.epochs)} epochs, {elapsed:.1f}s)")
    return 0


def _evaluate_run(path: str):
    model, manifest = _load_run(path)
    va, spectro = _val_split_from_manifest(manifest)
    specs = Featurizer(spectro).batch(va)
    return evaluate(model, specs, va.labels), va, manifest


def cmd_eval(args, res: Resolver) -> int:
    out = _out_dir(args)
    result, va, manifest = _evaluate_run(args.run)
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("index", "label", "prediction", "correct"))
        for i, (y, p) in enumerate(zip(va.labels, result.predictions)):
            w.writerow((i, int(y), int(p), int(y == p)))
    report = {"accuracy": result.accuracy, "correct": int(result.correct.sum()), "total": len(va)}
    (out / "eval.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"accuracy {result.accuracy!r}  ({report['correct']}/{report['total']})")
    logged = manifest.get("best_val_acc")
    if logged is not None:
        print(f"logged best val_acc {logged!r}  match={result.accuracy == logged}")
    _write_manifest(out, "eval", res, {"run": str(args.run)})
    return 0


def cmd_compare(args, res: Resolver) -> int:
    out = _out_dir(args)
    ra, va_a, _ = _evaluate_run(args.run_a)
    rb, va_b, _ = _evaluate_run(args.run_b)
    if not np.array_equal(va_a.labels, va_b.labels) or not np.array_equal(va_a.waveforms, va_b.waveforms):
        raise DataError("the two runs were validated on different splits")
    m = mcnemar(ra.correct, rb.correct)
    t = m.table
    verdict = "significant" if m.significant(args.alpha) else "not significant"
    lines = [
        "             B right  B wrong",
        f"A right   {t.n11:9d} {t.n10:8d}",
        f"A wrong   {t.n01:9d} {t.n00:8d}",
        f"accuracy A {ra.accuracy:.4f}  B {rb.accuracy:.4f}",
        f"statistic {m.statistic:.6f}",
        f"p-value {m.p_value:.6g}",
        f"verdict at alpha={args.alpha}: {verdict}",
    ]
    print("\n".join(lines))
    report = {"table": asdict(t), "statistic": m.statistic, "p_value": m.p_value, "alpha": args.alpha, "verdict": verdict}
    (out / "compare.json").write_text(json.dumps(report, indent=2) + "\n")
    _write_manifest(out, "compare", res, {"run_a": str(args.run_a), "run_b": str(args.run_b)})
    return 0


def cmd_analyze_params(args, res: Resolver) -> int:
    out = _out_dir(args)
    sizes = args.sizes
    septr = M.paper_septr_config()
    vit = M.paper_vit_config()
    if args.depth or args.dim or args.heads:
        over = {k: v for k, v in (("dim", args.dim), ("heads", args.heads)) if v}
        septr = septr.replace(**over, **({"depth": args.depth} if args.depth else {}))
        vit = vit.replace(**over, **({"depth": 2 * args.depth} if args.depth else {}))
    rows = M.param_scan(septr, vit, sizes)
    with open(out / "params.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("size", "septr_count", "vit_count", "ratio"))
        for r in rows:
            w.writerow((r.size, r.septr_count, r.vit_count, f"{r.ratio:.6f}"))
    print(f"{'size':>6} {'septr':>12} {'vit':>12} {'ratio':>8}")
    for r in rows:
        print(f"{r.size:>6} {r.septr_count:>12,} {r.vit_count:>12,} {r.ratio:>8.3f}")
    septr_dep = [M.size_dependent_count(septr.replace(freq_bins=s, time_slots=s)) for s in sizes]
    vit_dep = [M.size_dependent_count(vit.replace(freq_bins=s, time_slots=s)) for s in sizes]
    sides = [vit.replace(freq_bins=s, time_slots=s).vit_grid[0] for s in sizes]
    report = {
        "septr": septr.to_dict(),
        "vit": vit.to_dict(),
        "septr_exponent_in_S": M.growth_exponent(sizes, septr_dep),
        "vit_exponent_in_patch_side": M.growth_exponent(sides, vit_dep),
        "vit_exponent_in_S_total": M.growth_exponent(sizes, [r.vit_count for r in rows]),
        "septr_exponent_in_S_total": M.growth_exponent(sizes, [r.septr_count for r in rows]),
    }
    print(f"size-dependent growth exponent: SepTr {report['septr_exponent_in_S']:.4f} in S, "
          f"ViT {report['vit_exponent_in_patch_side']:.4f} in patches per side")
    (out / "growth.json").write_text(json.dumps(report, indent=2) + "\n")
    plotting.plot_param_scaling(
        sizes, {"SepTr": [r.septr_count for r in rows], "ViT": [r.vit_count for r in rows]}, out / "params.png"
    )
    _write_manifest(out, "analyze-params", res, {"sizes": sizes})
    return 0


def gradcheck_errors(cfg: ModelConfig, seed: int = 0, h: float = 1e-5) -> dict[str, float]:
    """Per-parameter relative error between autodiff and central differences."""
    model = Model(cfg.replace(precision="float64"), seed=seed)
    rng = np.random.default_rng(seed + 100)
    for p in model.params.values():  # leave the symmetric initial point so no gradient is trivially zero
        p.data[...] = rng.normal(size=p.shape) * 0.3
    x = rng.uniform(size=(2, cfg.freq_bins, cfg.time_slots))
    y = np.array([0, cfg.num_classes - 1])
    T.backward(T.cross_entropy(model(x), y))

    def f():
        with T.no_grad():
            return T.cross_entropy(model(x), y).item()

    return {
        name: T.relative_error(p.grad, T.numerical_grad(f, p.data, h), elementwise=False)
        for name, p in model.params.items()
    }


GRADCHECK_SEPTR = ModelConfig(variant="VH", depth=1, dim=8, heads=2, num_classes=3, freq_bins=4, time_slots=4)
GRADCHECK_VIT = ModelConfig(
    variant="ViT", depth=2, dim=8, heads=2, num_classes=3, freq_bins=8, time_slots=8, vit_patch=4, vit_stride=4
)


def cmd_gradcheck(args, res: Resolver) -> int:
    out = _out_dir(args)
    seed = _seed(res)
    worst = 0.0
    with open(out / "gradcheck.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("model", "parameter", "relative_error"))
        for label, cfg in (("septr", GRADCHECK_SEPTR), ("vit", GRADCHECK_VIT)):
            errors = gradcheck_errors(cfg, seed)
            for name, err in errors.items():
                w.writerow((label, name, f"{err:.3e}"))
            name, err = max(errors.items(), key=lambda kv: kv[1])
            worst = max(worst, err)
            print(f"{label}: max relative error {err:.3e} ({name}, {len(errors)} tensors)")
    ok = worst <= 1e-5
    print(f"gradcheck {'PASS' if ok else 'FAIL'} (tolerance 1e-5)")
    _write_manifest(out, "gradcheck", res, {"max_relative_error": worst})
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# Parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (sections: model, train, augment, spectrogram, data)")
    p.add_argument("--seed", type=int, help="unsigned 64-bit seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", type=str.lower, choices=sorted(VARIANT_FLAGS))
    p.add_argument("--depth", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--heads", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="septr", description="Separable transformer audio spectrogram toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("spectrogram", help="WAV -> normalized mel spectrogram (SPTR file)")
    p.add_argument("wav")
    p.add_argument("--mel-bins", dest="mel_bins", type=int)
    p.add_argument("--text", action="store_true", help="also write a plain-text grid")
    p.add_argument("--plot", action="store_true", help="also render a PNG")
    _common(p)

    p = sub.add_parser("make-synthetic", help="write the bundled synthetic task as a WAV tree")
    p.add_argument("--n-train", type=int, default=800)
    p.add_argument("--n-val", type=int, default=200)
    _common(p)

    p = sub.add_parser("train", help="train a model; writes metrics.csv, curves.png, best.spck, manifest.json")
    p.add_argument("--data", help="directory-per-class WAV tree (root/train/<class>/*.wav, root/val/...); "
                   "omit for the bundled synthetic task")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--stop-at", type=float, help="stop once validation accuracy reaches this value")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--mel-bins", dest="mel_bins", type=int)
    p.add_argument("--precision", choices=("float64", "float32"))
    _model_flags(p)
    _common(p)

    p = sub.add_parser("eval", help="evaluate a run directory on its validation split")
    p.add_argument("run", help="run directory (or its best.spck)")
    _common(p)

    p = sub.add_parser("compare", help="McNemar test between two runs on a shared validation split")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.add_argument("--alpha", type=float, default=0.01)
    _common(p)

    p = sub.add_parser("analyze-params", help="parameter counts of SepTr and ViT against input size")
    p.add_argument("--sizes", type=int, nargs="+", default=[64, 128, 256, 512])
    _model_flags(p)
    _common(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    _common(p)
    return parser


COMMANDS = {
    "spectrogram": cmd_spectrogram,
    "make-synthetic": cmd_make_synthetic,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "analyze-params": cmd_analyze_params,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        res = Resolver(args, _load_config_file(args.config))
        return COMMANDS[args.command](args, res)
    except (ConfigError, DataError, AudioFormatError, CheckpointError, ValueError) as exc:
        print(f"septr {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
