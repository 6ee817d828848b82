"""Metrics and experiment protocols.

AUROC is the Mann-Whitney statistic (outliers positive, average ranks for
ties). The class protocol trains one VAE + detector per (class, fold) on a
stratified 60/20/20 split; the condition protocol trains once on clean images
and sweeps challenge levels.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import detector as det
from . import features as feat
from . import outlier_synth as synth
from . import vae
from .data_io import LabeledDataset
from .errors import InputError
from .tensor_core import seeded_rng


def auroc(inlier_scores, outlier_scores) -> float:
    """P(random outlier scores above random inlier), ties counted half."""
    inl = np.asarray(inlier_scores, dtype=np.float64)
    out = np.asarray(outlier_scores, dtype=np.float64)
    if inl.size == 0 or out.size == 0:
        raise InputError("score lists must be non-empty")
    ranks = rankdata(np.concatenate([out, inl]))
    rank_sum = ranks[:out.size].sum()
    u = rank_sum - out.size * (out.size + 1) / 2.0
    return float(u / (out.size * inl.size))


def histogram_overlap(inlier_values, outlier_values, bin_count: int = 100) -> float:
    """Percentage of all samples falling in bins occupied by both classes."""
    inl = np.asarray(inlier_values, dtype=np.float64)
    out = np.asarray(outlier_values, dtype=np.float64)
    if inl.size == 0 or out.size == 0:
        raise InputError("value lists must be non-empty")
    if bin_count < 2:
        raise InputError("bin_count must be >= 2")
    pooled = np.concatenate([inl, out])
    lo, hi = pooled.min(), pooled.max()
    if lo == hi:
        return 100.0
    edges = np.linspace(lo, hi, bin_count + 1)
    hi_inl, _ = np.histogram(inl, bins=edges)
    hi_out, _ = np.histogram(out, bins=edges)
    shared = (hi_inl > 0) & (hi_out > 0)
    overlapped = hi_inl[shared].sum() + hi_out[shared].sum()
    return float(100.0 * overlapped / pooled.size)


@dataclass(frozen=True)
class SplitSpec:
    seed: int = 0
    fold_count: int = 5
    train_fraction: float = 0.6
    val_fraction: float = 0.2
    test_fraction: float = 0.2


@dataclass
class FoldSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def make_splits(labels, spec: SplitSpec) -> list[FoldSplit]:
    """Stratified rotating 60/20/20 folds: per class the shuffled indices are
    cut into 5 blocks; fold k tests on block k, validates on block k+1."""
    labels = np.asarray(labels)
    rng = seeded_rng(spec.seed)
    per_class_blocks = {}
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < spec.fold_count:
            raise InputError(f"class {cls} has fewer than {spec.fold_count} samples")
        idx = rng.permutation(idx)
        per_class_blocks[cls] = np.array_split(idx, spec.fold_count)

    folds = []
    k = spec.fold_count
    for f in range(k):
        train, val, test = [], [], []
        for blocks in per_class_blocks.values():
            test.append(blocks[f])
            val.append(blocks[(f + 1) % k])
            for b in range(k):
                if b not in (f, (f + 1) % k):
                    train.append(blocks[b])
        folds.append(FoldSplit(np.concatenate(train), np.concatenate(val),
                               np.concatenate(test)))
    return folds


@dataclass
class ProtocolConfig:
    """Everything one protocol run needs besides the dataset."""
    vae: vae.TrainConfig = field(default_factory=vae.TrainConfig)
    detector: det.DetectorTrainConfig = field(default_factory=det.DetectorTrainConfig)
    noise_sigma: float = 0.05
    class_layer_index: int = 0          # first decoder layer: novel classes
    condition_layer_index: int | None = None  # defaults to last decoder layer
    include_bias: bool = True
    seed: int = 0
    fold_count: int = 5


def _derived_seed(*parts) -> int:
    ss = np.random.SeedSequence(list(int(p) for p in parts))
    return int(ss.generate_state(1)[0])


def _train_fold_vae(train_images: np.ndarray, config: ProtocolConfig,
                    seed: int) -> vae.VaeModel:
    vae_cfg = dataclasses.replace(config.vae, seed=_derived_seed(seed, 1))
    model, _ = vae.train_vae(train_images, vae_cfg)
    return model


def _distort_train_images(train_images: np.ndarray, config: ProtocolConfig,
                          seed: int) -> np.ndarray:
    noise_rng = seeded_rng(_derived_seed(seed, 2))
    return np.stack([
        synth.gaussian_noise(img, config.noise_sigma, noise_rng)
        for img in train_images
    ])


def _train_fold_detector(model: vae.VaeModel, train_images: np.ndarray,
                         distorted: np.ndarray, kind: feat.FeatureKind,
                         layer_index: int, config: ProtocolConfig, seed: int):
    inl_feats = feat.extract_features(model, train_images, kind, layer_index,
                                      config.include_bias)
    out_feats = feat.extract_features(model, distorted, kind, layer_index,
                                      config.include_bias)
    det_cfg = dataclasses.replace(config.detector, seed=_derived_seed(seed, 3))
    clf, _ = det.train_detector(inl_feats, out_feats, det_cfg, kind)
    return clf


def _train_fold_models(train_images: np.ndarray, kind: feat.FeatureKind,
                       layer_index: int, config: ProtocolConfig, seed: int):
    """Train VAE + detector for one fold; returns (vae_model, detector_model)."""
    model = _train_fold_vae(train_images, config, seed)
    distorted = _distort_train_images(train_images, config, seed)
    clf = _train_fold_detector(model, train_images, distorted, kind,
                               layer_index, config, seed)
    return model, clf


def run_class_protocol_multi(dataset: LabeledDataset, class_id: int,
                             feature_kinds, config: ProtocolConfig,
                             folds=None) -> dict:
    """Per-fold AUROC for one inlier class and several feature kinds.

    The per-fold VAE and the distorted training images do not depend on the
    feature kind, so they are computed once and shared; results are bitwise
    identical to running each kind separately. Returns
    {kind: (fold_aurocs, mean)}.
    """
    kinds = list(feature_kinds)
    labels = dataset.labels
    if class_id not in labels:
        raise InputError(f"class {class_id} not present in dataset")
    split_spec = SplitSpec(seed=_derived_seed(config.seed, 17),
                           fold_count=config.fold_count)
    all_folds = make_splits(labels, split_spec)
    fold_ids = list(folds) if folds is not None else list(range(config.fold_count))

    layer = config.class_layer_index
    aurocs = {kind: [] for kind in kinds}
    for f in fold_ids:
        fold = all_folds[f]
        inl_train = fold.train[labels[fold.train] == class_id]
        inl_test = fold.test[labels[fold.test] == class_id]
        other_test = fold.test[labels[fold.test] != class_id]

        seed = _derived_seed(config.seed, class_id, f)
        train_images = dataset.images[inl_train].reshape(len(inl_train), -1)
        model = _train_fold_vae(train_images, config, seed)
        distorted = _distort_train_images(train_images, config, seed)

        pick_rng = seeded_rng(_derived_seed(seed, 4))
        n_test = len(inl_test)
        outliers = pick_rng.choice(other_test, size=n_test, replace=False)

        for kind in kinds:
            clf = _train_fold_detector(model, train_images, distorted, kind,
                                       layer, config, seed)
            inl_scores = clf.score_batch(feat.extract_features(
                model, dataset.images[inl_test], kind, layer,
                config.include_bias))
            out_scores = clf.score_batch(feat.extract_features(
                model, dataset.images[outliers], kind, layer,
                config.include_bias))
            aurocs[kind].append(auroc(inl_scores, out_scores))
    return {kind: (vals, float(np.mean(vals))) for kind, vals in aurocs.items()}


def run_class_protocol(dataset: LabeledDataset, class_id: int,
                       feature_kind: feat.FeatureKind, config: ProtocolConfig,
                       folds=None):
    """Per-fold AUROC for one inlier class; returns (fold_aurocs, mean)."""
    result = run_class_protocol_multi(dataset, class_id, [feature_kind],
                                      config, folds)
    return result[feature_kind]


def run_condition_protocol_multi(clean_images: np.ndarray,
                                 challenge_kinds,
                                 feature_kinds,
                                 config: ProtocolConfig,
                                 levels=range(1, 6)) -> dict:
    """AUROC per challenge kind and level for several feature kinds.

    One VAE is trained on clean images and shared across feature kinds and
    challenges (neither affects its training); one detector per feature
    kind. Returns {(challenge_kind, feature_kind): {level: auroc}}, bitwise
    identical to separate single-kind runs.
    """
    images = np.asarray(clean_images, dtype=np.float64)
    if images.ndim != 3 or images.shape[0] == 0:
        raise InputError("expected non-empty (n, h, w) clean images")
    n = images.shape[0]
    rng = seeded_rng(_derived_seed(config.seed, 23))
    order = rng.permutation(n)
    n_test = max(1, int(round(0.2 * n)))
    test_idx = order[:n_test]
    train_idx = order[n_test:]

    # Last decoder layer by default: conditions alter low-level image structure.
    layer = config.condition_layer_index
    if layer is None:
        layer = len(config.vae.dec_hidden)
    seed = _derived_seed(config.seed, 29)
    train_flat = images[train_idx].reshape(len(train_idx), -1)
    model = _train_fold_vae(train_flat, config, seed)
    distorted = _distort_train_images(train_flat, config, seed)

    results = {}
    for feature_kind in feature_kinds:
        clf = _train_fold_detector(model, train_flat, distorted, feature_kind,
                                   layer, config, seed)
        inl_scores = clf.score_batch(feat.extract_features(
            model, images[test_idx], feature_kind, layer, config.include_bias))
        for challenge_kind in challenge_kinds:
            per_level = {}
            for level in levels:
                chal_rng = seeded_rng(_derived_seed(config.seed, 31, level))
                spec = synth.ChallengeSpec(challenge_kind, level)
                outlier_imgs = np.stack([
                    synth.apply_challenge(img, spec, chal_rng)
                    for img in images[test_idx]
                ])
                out_scores = clf.score_batch(feat.extract_features(
                    model, outlier_imgs, feature_kind, layer,
                    config.include_bias))
                per_level[int(level)] = auroc(inl_scores, out_scores)
            results[(challenge_kind, feature_kind)] = per_level
    return results


def run_condition_protocol(clean_images: np.ndarray,
                           challenge_kind: synth.ChallengeKind,
                           feature_kind: feat.FeatureKind,
                           config: ProtocolConfig,
                           levels=range(1, 6)):
    """AUROC per challenge level; one VAE + detector trained on clean images."""
    results = run_condition_protocol_multi(clean_images, [challenge_kind],
                                           [feature_kind], config, levels)
    return results[(challenge_kind, feature_kind)]


@dataclass
class EvalReport:
    """Flat result rows plus run metadata; serializes to CSV and JSON."""
    rows: list[dict] = field(default_factory=list)
    overlaps: dict[str, float] = field(default_factory=dict)
    config_fingerprint: str = ""
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    CSV_COLUMNS = ("dataset", "feature_kind", "class_or_level", "fold", "auroc")

    def add_row(self, dataset: str, feature_kind: str, class_or_level,
                fold: int, value: float) -> None:
        if not 0.0 <= value <= 1.0:
            raise InputError(f"AUROC {value} outside [0, 1]")
        self.rows.append({
            "dataset": dataset, "feature_kind": feature_kind,
            "class_or_level": class_or_level, "fold": fold,
            "auroc": value,
        })

    def mean_auroc(self, feature_kind: str) -> float:
        vals = [r["auroc"] for r in self.rows if r["feature_kind"] == feature_kind]
        if not vals:
            raise InputError(f"no rows for feature kind {feature_kind}")
        return float(np.mean(vals))

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.CSV_COLUMNS)
            for row in self.rows:
                writer.writerow([row[c] if c != "auroc" else f"{row[c]:.6f}"
                                 for c in self.CSV_COLUMNS])

    def summary(self) -> dict:
        kinds = sorted({r["feature_kind"] for r in self.rows})
        per_kind = {}
        for k in kinds:
            vals = [r["auroc"] for r in self.rows if r["feature_kind"] == k]
            per_kind[k] = {
                "mean_auroc": float(np.mean(vals)),
                "variance": float(np.var(vals)),
                "count": len(vals),
            }
        return {
            "config_fingerprint": self.config_fingerprint,
            "seed": self.seed,
            "metadata": self.metadata,
            "per_feature_kind": per_kind,
            "overlaps": self.overlaps,
            "rows": self.rows,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")
