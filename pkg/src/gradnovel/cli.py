"""Experiment runner CLI.

    gradnovel <subcommand> --config <path> [--seed N] [--out DIR]

Subcommands: train-vae, extract-features, train-detector, evaluate,
histogram, reproduce. Exit codes: 0 success, 1 runtime failure, 2
usage-or-config error. Config files are flat "key = value" lines with "#"
comments and dotted section prefixes; unknown keys are hard errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import detector as det
from . import features as feat
from . import outlier_synth as synth
from . import vae
from .data_io import LabeledDataset, load_cifar10, load_idx, synth_digits, synth_shapes
from .errors import ConfigError, GradNovelError, InputError
from .evaluation import (EvalReport, ProtocolConfig, histogram_overlap,
                         run_class_protocol_multi, run_condition_protocol_multi)
from .tensor_core import seeded_rng

KNOWN_KEYS = {
    "dataset.name", "dataset.count", "dataset.image_size", "dataset.class_count",
    "dataset.seed", "dataset.images_path", "dataset.labels_path",
    "dataset.batch_paths",
    "run.mode", "run.inlier_class", "run.challenge_kind", "run.feature_kinds",
    "run.layer_index", "run.condition_layer_index", "run.include_bias",
    "run.folds", "run.noise_sigma", "run.seed",
    "vae.epochs", "vae.batch_size", "vae.learning_rate", "vae.beta1",
    "vae.beta2", "vae.adam_eps", "vae.seed", "vae.latent_dim",
    "vae.enc_hidden", "vae.dec_hidden",
    "detector.epochs", "detector.batch_size", "detector.learning_rate",
    "detector.beta1", "detector.beta2", "detector.adam_eps", "detector.seed",
    "detector.hidden", "detector.val_fraction",
    "histogram.bin_count",
    "io.vae_checkpoint", "io.detector_checkpoint", "io.feature_cache",
}

MNIST_FILE_HINT = (
    "expected IDX files: train-images-idx3-ubyte (sha256 "
    "440fcabf73cc546fa21475e81ea370265605f56be210a4024d2ca8f203523609) and "
    "train-labels-idx1-ubyte (sha256 "
    "3552534a0a558bbed6aed32b30c495cca23d567ec52cac8be1a0730e8010255c)"
)


def parse_config(text: str) -> dict[str, str]:
    cfg: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        if key in cfg:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        cfg[key] = value
    return cfg


def load_config(path) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())


def _get(cfg, key, default=None, cast=str):
    if key not in cfg:
        if default is None:
            raise ConfigError(f"missing required key '{key}'")
        return default
    try:
        if cast is bool:
            return cfg[key].lower() in ("1", "true", "yes")
        return cast(cfg[key])
    except ValueError as exc:
        raise ConfigError(f"bad value for '{key}': {cfg[key]}") from exc


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def config_fingerprint(cfg: dict[str, str]) -> str:
    canon = "\n".join(f"{k}={cfg[k]}" for k in sorted(cfg))
    return hashlib.sha256(canon.encode()).hexdigest()


def build_dataset(cfg: dict[str, str]) -> LabeledDataset:
    name = _get(cfg, "dataset.name")
    if name == "synth_shapes":
        return synth_shapes(
            _get(cfg, "dataset.count", 400, int),
            _get(cfg, "dataset.image_size", 28, int),
            _get(cfg, "dataset.class_count", 2, int),
            _get(cfg, "dataset.seed", 0, int),
        )
    if name == "synth_digits":
        return synth_digits(
            _get(cfg, "dataset.count", 400, int),
            _get(cfg, "dataset.image_size", 28, int),
            _get(cfg, "dataset.class_count", 10, int),
            _get(cfg, "dataset.seed", 0, int),
        )
    if name == "mnist":
        images = cfg.get("dataset.images_path")
        labels = cfg.get("dataset.labels_path")
        if not images or not labels:
            raise ConfigError(
                f"mnist needs dataset.images_path and dataset.labels_path; "
                f"{MNIST_FILE_HINT}"
            )
        if not Path(images).is_file() or not Path(labels).is_file():
            raise ConfigError(f"mnist files missing; {MNIST_FILE_HINT}")
        return load_idx(images, labels)
    if name == "cifar10":
        paths = [p.strip() for p in cfg.get("dataset.batch_paths", "").split(",")
                 if p.strip()]
        if not paths:
            raise ConfigError("cifar10 needs dataset.batch_paths (comma-separated)")
        missing = [p for p in paths if not Path(p).is_file()]
        if missing:
            raise ConfigError(f"cifar10 batch files missing: {missing}")
        return load_cifar10(paths)
    raise ConfigError(f"unknown dataset.name '{name}'")


def build_vae_config(cfg: dict[str, str], seed_override=None) -> vae.TrainConfig:
    return vae.TrainConfig(
        epochs=_get(cfg, "vae.epochs", 30, int),
        batch_size=_get(cfg, "vae.batch_size", 16, int),
        learning_rate=_get(cfg, "vae.learning_rate", 7e-3, float),
        beta1=_get(cfg, "vae.beta1", 0.9, float),
        beta2=_get(cfg, "vae.beta2", 0.999, float),
        adam_eps=_get(cfg, "vae.adam_eps", 1e-8, float),
        seed=seed_override if seed_override is not None
        else _get(cfg, "vae.seed", 0, int),
        latent_dim=_get(cfg, "vae.latent_dim", 10, int),
        enc_hidden=_get(cfg, "vae.enc_hidden", (256, 64), _int_tuple),
        dec_hidden=_get(cfg, "vae.dec_hidden", (64,), _int_tuple),
    )


def build_detector_config(cfg: dict[str, str], seed_override=None) -> det.DetectorTrainConfig:
    return det.DetectorTrainConfig(
        epochs=_get(cfg, "detector.epochs", 150, int),
        batch_size=_get(cfg, "detector.batch_size", 64, int),
        learning_rate=_get(cfg, "detector.learning_rate", 1e-3, float),
        beta1=_get(cfg, "detector.beta1", 0.9, float),
        beta2=_get(cfg, "detector.beta2", 0.999, float),
        adam_eps=_get(cfg, "detector.adam_eps", 1e-8, float),
        seed=seed_override if seed_override is not None
        else _get(cfg, "detector.seed", 0, int),
        hidden=_get(cfg, "detector.hidden", 128, int),
        val_fraction=_get(cfg, "detector.val_fraction", 0.2, float),
    )


def build_protocol_config(cfg: dict[str, str], seed: int) -> ProtocolConfig:
    cond_layer = cfg.get("run.condition_layer_index")
    return ProtocolConfig(
        vae=build_vae_config(cfg),
        detector=build_detector_config(cfg),
        noise_sigma=_get(cfg, "run.noise_sigma", 0.05, float),
        class_layer_index=_get(cfg, "run.layer_index", 0, int),
        condition_layer_index=int(cond_layer) if cond_layer is not None else None,
        include_bias=_get(cfg, "run.include_bias", True, bool),
        seed=seed,
    )


def feature_kinds(cfg: dict[str, str]) -> list[feat.FeatureKind]:
    raw = _get(cfg, "run.feature_kinds", "gradient,recon_error,latent_loss")
    kinds = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            kinds.append(feat.FeatureKind(part))
        except ValueError:
            raise ConfigError(f"unknown feature kind '{part}'") from None
    if not kinds:
        raise ConfigError("run.feature_kinds selects nothing")
    return kinds


def write_manifest(out_dir: Path, cfg: dict[str, str], seed: int,
                   dataset: LabeledDataset | None) -> None:
    manifest = {
        "tool_version": __version__,
        "config_fingerprint": config_fingerprint(cfg),
        "config": dict(sorted(cfg.items())),
        "seed": seed,
        "dataset_checksum": dataset.checksum if dataset is not None else None,
        "formats": {"vae_checkpoint": "GNVAE1", "detector_checkpoint": "GNDET1",
                    "feature_cache": "GNFEA1"},
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- SVG histogram rendering -------------------------------------------------

_PANEL_W, _PANEL_H, _MARGIN = 300, 220, 40


def _panel_svg(x0: int, title: str, inl: np.ndarray, out: np.ndarray,
               overlap_pct: float, bin_count: int) -> list[str]:
    pooled = np.concatenate([inl, out])
    lo, hi = float(pooled.min()), float(pooled.max())
    if lo == hi:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bin_count + 1)
    h_inl, _ = np.histogram(inl, bins=edges)
    h_out, _ = np.histogram(out, bins=edges)
    peak = max(h_inl.max(), h_out.max(), 1)
    bar_w = (_PANEL_W - 2 * _MARGIN) / bin_count
    base = _PANEL_H - _MARGIN
    parts = [
        f'<text x="{x0 + _PANEL_W / 2:.1f}" y="20" text-anchor="middle" '
        f'font-size="13">{title}</text>',
        f'<text x="{x0 + _PANEL_W / 2:.1f}" y="{_PANEL_H - 8}" '
        f'text-anchor="middle" font-size="11">overlap {overlap_pct:.2f}%</text>',
    ]
    for counts, color in ((h_inl, "#3b6fd4"), (h_out, "#d4483b")):
        for i, c in enumerate(counts):
            if c == 0:
                continue
            h = (base - _MARGIN) * c / peak
            x = x0 + _MARGIN + i * bar_w
            parts.append(
                f'<rect x="{x:.2f}" y="{base - h:.2f}" width="{bar_w:.2f}" '
                f'height="{h:.2f}" fill="{color}" fill-opacity="0.55"/>'
            )
    return parts


def render_histogram_svg(panels, bin_count: int = 100) -> str:
    """panels: list of (title, inlier_values, outlier_values, overlap_pct)."""
    width = _PANEL_W * len(panels)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{_PANEL_H}" viewBox="0 0 {width} {_PANEL_H}">'
    ]
    for i, (title, inl, out, pct) in enumerate(panels):
        parts.extend(_panel_svg(i * _PANEL_W, title, np.asarray(inl),
                                np.asarray(out), pct, bin_count))
    parts.append("</svg>")
    return "\n".join(parts)


# --- subcommands -------------------------------------------------------------

def _inlier_images(dataset: LabeledDataset, cfg: dict[str, str]) -> np.ndarray:
    if "run.inlier_class" in cfg:
        cls = _get(cfg, "run.inlier_class", cast=int)
        mask = dataset.labels == cls
        if not mask.any():
            raise ConfigError(f"inlier class {cls} not present in dataset")
        return dataset.images[mask]
    return dataset.images


def cmd_train_vae(cfg: dict[str, str], seed: int, out_dir: Path) -> int:
    dataset = build_dataset(cfg)
    images = _inlier_images(dataset, cfg)
    config = build_vae_config(cfg, seed_override=seed)
    model, trace = vae.train_vae(images.reshape(len(images), -1), config)
    vae.save_checkpoint(model, out_dir / "vae.gnvae1")
    with open(out_dir / "vae_loss.csv", "w") as fh:
        fh.write("epoch,mean_loss,mean_bce,mean_kl\n")
        for i, (loss, bce, kl) in enumerate(trace):
            fh.write(f"{i},{loss:.10f},{bce:.10f},{kl:.10f}\n")
    write_manifest(out_dir, cfg, seed, dataset)
    print(f"trained VAE on {len(images)} images; "
          f"final mean loss {trace[-1][0]:.4f}")
    return 0


def _load_or_train_vae(cfg: dict[str, str], seed: int,
                       dataset: LabeledDataset) -> vae.VaeModel:
    ckpt = cfg.get("io.vae_checkpoint")
    if ckpt:
        if not Path(ckpt).is_file():
            raise ConfigError(f"vae checkpoint not found: {ckpt}")
        return vae.load_checkpoint(ckpt)
    images = _inlier_images(dataset, cfg)
    config = build_vae_config(cfg, seed_override=seed)
    model, _ = vae.train_vae(images.reshape(len(images), -1), config)
    return model


def cmd_extract_features(cfg: dict[str, str], seed: int, out_dir: Path) -> int:
    dataset = build_dataset(cfg)
    model = _load_or_train_vae(cfg, seed, dataset)
    layer = _get(cfg, "run.layer_index", 0, int)
    include_bias = _get(cfg, "run.include_bias", True, bool)
    ids = np.arange(len(dataset))
    for kind in feature_kinds(cfg):
        src = layer if kind is feat.FeatureKind.GRADIENT else None
        values = feat.extract_features(model, dataset.images, kind, layer,
                                       include_bias)
        feat.save_feature_cache(out_dir / f"features_{kind.value}.gnfea1",
                                kind, values, ids, src)
        print(f"wrote {len(ids)} {kind.value} features (dim {values.shape[1]})")
    write_manifest(out_dir, cfg, seed, dataset)
    return 0


def cmd_train_detector(cfg: dict[str, str], seed: int, out_dir: Path) -> int:
    dataset = build_dataset(cfg)
    model = _load_or_train_vae(cfg, seed, dataset)
    images = _inlier_images(dataset, cfg)
    layer = _get(cfg, "run.layer_index", 0, int)
    include_bias = _get(cfg, "run.include_bias", True, bool)
    sigma = _get(cfg, "run.noise_sigma", 0.05, float)
    kind = feature_kinds(cfg)[0]

    noise_rng = seeded_rng(seed + 1)
    distorted = np.stack([synth.gaussian_noise(img, sigma, noise_rng)
                          for img in images])
    inl = feat.extract_features(model, images, kind, layer, include_bias)
    out = feat.extract_features(model, distorted, kind, layer, include_bias)
    clf, trace = det.train_detector(inl, out,
                                    build_detector_config(cfg, seed_override=seed),
                                    kind)
    det.save_checkpoint(clf, out_dir / "detector.gndet1")
    with open(out_dir / "detector_val_loss.csv", "w") as fh:
        fh.write("epoch,val_bce\n")
        for i, loss in enumerate(trace):
            fh.write(f"{i},{loss:.10f}\n")
    write_manifest(out_dir, cfg, seed, dataset)
    print(f"trained {kind.value} detector; best val BCE {min(trace):.4f}")
    return 0


def cmd_evaluate(cfg: dict[str, str], seed: int, out_dir: Path) -> int:
    dataset = build_dataset(cfg)
    mode = _get(cfg, "run.mode", "class")
    config = build_protocol_config(cfg, seed)
    report = EvalReport(config_fingerprint=config_fingerprint(cfg), seed=seed,
                        metadata={
                            "mode": mode,
                            "dataset": dataset.name,
                            "bce_reduction": "sum",
                            "latent_path": "z=mu",
                            "vae": dataclasses.asdict(config.vae),
                            "detector": dataclasses.asdict(config.detector),
                        })

    if mode == "class":
        cls = _get(cfg, "run.inlier_class", cast=int)
        folds = _get(cfg, "run.folds", "0,1,2,3,4", _int_tuple)
        results = run_class_protocol_multi(dataset, cls, feature_kinds(cfg),
                                           config, folds=folds)
        for kind in feature_kinds(cfg):
            per_fold, _ = results[kind]
            for f, value in zip(folds, per_fold):
                report.add_row(dataset.name, kind.value, cls, f, value)
    elif mode == "condition":
        kind_name = _get(cfg, "run.challenge_kind")
        try:
            challenge = synth.ChallengeKind(kind_name)
        except ValueError:
            raise ConfigError(f"unknown challenge kind '{kind_name}'") from None
        clean = _inlier_images(dataset, cfg)
        results = run_condition_protocol_multi(clean, [challenge],
                                               feature_kinds(cfg), config)
        for kind in feature_kinds(cfg):
            for level, value in results[(challenge, kind)].items():
                report.add_row(dataset.name, kind.value, level, 0, value)
    else:
        raise ConfigError(f"run.mode must be 'class' or 'condition', got '{mode}'")

    report.to_csv(out_dir / "report.csv")
    report.to_json(out_dir / "report.json")
    write_manifest(out_dir, cfg, seed, dataset)
    for kind in feature_kinds(cfg):
        print(f"{kind.value}: mean AUROC {report.mean_auroc(kind.value):.4f}")
    return 0


def cmd_histogram(cfg: dict[str, str], seed: int, out_dir: Path) -> int:
    dataset = build_dataset(cfg)
    model = _load_or_train_vae(cfg, seed, dataset)
    cls = _get(cfg, "run.inlier_class", cast=int)
    bin_count = _get(cfg, "histogram.bin_count", 100, int)
    layer = _get(cfg, "run.layer_index", 0, int)
    include_bias = _get(cfg, "run.include_bias", True, bool)

    inl_mask = dataset.labels == cls
    inl_imgs = dataset.images[inl_mask]
    out_imgs = dataset.images[~inl_mask]
    if len(out_imgs) == 0:
        raise ConfigError("histogram needs at least one non-inlier sample")

    def stats(images):
        recon = feat.extract_features(model, images,
                                      feat.FeatureKind.RECON_ERROR).sum(axis=1)
        latent = feat.extract_features(model, images,
                                       feat.FeatureKind.LATENT_LOSS).sum(axis=1)
        grads = feat.extract_features(model, images, feat.FeatureKind.GRADIENT,
                                      layer, include_bias)
        return recon, latent, np.linalg.norm(grads, axis=1)

    inl_recon, inl_latent, inl_norm = stats(inl_imgs)
    out_recon, out_latent, out_norm = stats(out_imgs)

    panels = []
    overlaps = {}
    for title, key, inl, out in (
        ("Reconstruction error", "recon_error", inl_recon, out_recon),
        ("Latent loss", "latent_loss", inl_latent, out_latent),
        ("Gradient L2 norm", "gradient_norm", inl_norm, out_norm),
    ):
        pct = histogram_overlap(inl, out, bin_count)
        overlaps[key] = pct
        panels.append((title, inl, out, pct))
        print(f"{key}: overlap {pct:.2f}%")

    svg = render_histogram_svg(panels, bin_count)
    (out_dir / "histograms.svg").write_text(svg + "\n")
    with open(out_dir / "overlaps.json", "w") as fh:
        json.dump(overlaps, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(out_dir, cfg, seed, dataset)
    return 0


_REPRODUCE_SCALES = {
    # dataset size / epochs tuned so smoke stays under a minute.
    "smoke": {"count": 300, "classes": (0, 1), "vae_epochs": 4,
              "det_epochs": 20, "levels": (1, 5), "class_count": 4},
    "desk": {"count": 4000, "classes": (0, 1, 5), "vae_epochs": 30,
             "det_epochs": 150, "levels": (1, 2, 3, 4, 5), "class_count": 10},
}


def cmd_reproduce(cfg: dict[str, str], seed: int, out_dir: Path,
                  scale: str = "desk") -> int:
    """Run the full class + condition + histogram suite deterministically."""
    if scale not in _REPRODUCE_SCALES:
        raise ConfigError(f"unknown scale '{scale}'")
    s = _REPRODUCE_SCALES[scale]
    base_cfg = {
        "dataset.name": "synth_digits",
        "dataset.count": str(s["count"]),
        "dataset.class_count": str(s["class_count"]),
        "dataset.seed": str(seed),
        "vae.epochs": str(s["vae_epochs"]),
        "detector.epochs": str(s["det_epochs"]),
        "run.seed": str(seed),
    }
    base_cfg.update(cfg)
    dataset = build_dataset(base_cfg)
    config = build_protocol_config(base_cfg, seed)
    folds = (0,)

    report = EvalReport(config_fingerprint=config_fingerprint(base_cfg),
                        seed=seed,
                        metadata={"scale": scale, "dataset": dataset.name,
                                  "bce_reduction": "sum", "latent_path": "z=mu"})
    kinds = feature_kinds(base_cfg)
    for cls in s["classes"]:
        results = run_class_protocol_multi(dataset, cls, kinds, config,
                                           folds=folds)
        for kind in kinds:
            per_fold, _ = results[kind]
            for f, value in zip(folds, per_fold):
                report.add_row(dataset.name, kind.value, cls, f, value)

    clean = dataset.images[dataset.labels == s["classes"][0]]
    cond_report = EvalReport(config_fingerprint=config_fingerprint(base_cfg),
                             seed=seed,
                             metadata={"scale": scale, "dataset": dataset.name})
    challenges = (synth.ChallengeKind.GAUSSIAN_BLUR, synth.ChallengeKind.RAIN)
    cond_results = run_condition_protocol_multi(clean, challenges, kinds,
                                                config, levels=s["levels"])
    for challenge in challenges:
        for kind in kinds:
            for level, value in cond_results[(challenge, kind)].items():
                cond_report.add_row(f"{dataset.name}:{challenge.value}",
                                    kind.value, level, 0, value)

    report.to_csv(out_dir / "class_report.csv")
    report.to_json(out_dir / "class_report.json")
    cond_report.to_csv(out_dir / "condition_report.csv")
    cond_report.to_json(out_dir / "condition_report.json")
    write_manifest(out_dir, base_cfg, seed, dataset)
    for kind in kinds:
        print(f"class protocol {kind.value}: "
              f"mean AUROC {report.mean_auroc(kind.value):.4f}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="gradnovel", description=__doc__)
    parser.add_argument("subcommand", choices=[
        "train-vae", "extract-features", "train-detector", "evaluate",
        "histogram", "reproduce",
    ])
    parser.add_argument("--config", default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default="out")
    parser.add_argument("--scale", default="desk",
                        help="reproduce only: smoke or desk")
    try:
        args = parser.parse_args(argv)
    except SystemExit:
        return 2

    try:
        cfg = load_config(args.config) if args.config else {}
        seed = args.seed if args.seed is not None else _get(cfg, "run.seed", 0, int)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        handlers = {
            "train-vae": cmd_train_vae,
            "extract-features": cmd_extract_features,
            "train-detector": cmd_train_detector,
            "evaluate": cmd_evaluate,
            "histogram": cmd_histogram,
        }
        if args.subcommand == "reproduce":
            return cmd_reproduce(cfg, seed, out_dir, args.scale)
        return handlers[args.subcommand](cfg, seed, out_dir)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except GradNovelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
