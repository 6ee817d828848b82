"""Shallow supervised novelty classifier: two linear layers with sigmoid
between them and a sigmoid output score in (0, 1).

Label convention: inlier features are class 0, noise-distorted features are
class 1, so higher score means more novel. Inputs are standardized per
dimension with statistics from the training features only.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InputError, ShapeError, TrainingError
from .features import FeatureKind, FeatureVector
from .tensor_core import Adam, AffineLayer, SigmoidLayer, seeded_rng
from .vae import bce_grad_wrt_recon, bce_recon_loss

STD_FLOOR = 1e-6

CHECKPOINT_MAGIC = b"GNDET1"
_KIND_TAGS = {
    FeatureKind.RECON_ERROR: 0,
    FeatureKind.LATENT_LOSS: 1,
    FeatureKind.GRADIENT: 2,
}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}


@dataclass
class DetectorTrainConfig:
    epochs: int = 150
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    hidden: int = 128
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.hidden <= 0:
            raise InputError("epochs, batch_size and hidden must be positive")
        if not 0 <= self.val_fraction < 1:
            raise InputError("val_fraction must lie in [0, 1)")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise InputError("Adam betas must lie in (0, 1)")


class DetectorModel:
    def __init__(self, layer1: AffineLayer, layer2: AffineLayer,
                 feature_kind: FeatureKind, mean: np.ndarray, std: np.ndarray):
        if layer2.out_dim != 1 or layer2.in_dim != layer1.out_dim:
            raise ShapeError("layer2 must map hidden -> 1")
        if mean.shape != (layer1.in_dim,) or std.shape != (layer1.in_dim,):
            raise ShapeError("standardization vectors must match feature_dim")
        self.layer1 = layer1
        self.layer2 = layer2
        self.act1 = SigmoidLayer()
        self.act2 = SigmoidLayer()
        self.feature_kind = feature_kind
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)

    @property
    def feature_dim(self) -> int:
        return self.layer1.in_dim

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            "l1.w": self.layer1.weights, "l1.b": self.layer1.bias,
            "l2.w": self.layer2.weights, "l2.b": self.layer2.bias,
        }

    def score_batch(self, values: np.ndarray) -> np.ndarray:
        values = np.atleast_2d(np.asarray(values, dtype=np.float64))
        if values.shape[1] != self.feature_dim:
            raise InputError(
                f"feature dim {values.shape[1]} != detector dim {self.feature_dim}"
            )
        x = (values - self.mean) / self.std
        h = self.act1.forward(self.layer1.forward(x))
        return self.act2.forward(self.layer2.forward(h))[:, 0]


def detector_score(model: DetectorModel, f: FeatureVector) -> float:
    if f.kind is not model.feature_kind:
        raise InputError(
            f"feature kind {f.kind.value} does not match detector "
            f"({model.feature_kind.value})"
        )
    return float(model.score_batch(f.values[None, :])[0])


def _standardize_stats(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = values.mean(axis=0)
    std = np.maximum(values.std(axis=0), STD_FLOOR)
    return mean, std


def train_detector(inlier_features: np.ndarray, distorted_features: np.ndarray,
                   config: DetectorTrainConfig,
                   feature_kind: FeatureKind = FeatureKind.GRADIENT):
    """BCE-train the classifier; returns (model, per-epoch validation trace).

    The weights returned are those of the lowest-validation-BCE epoch.
    Deterministic given config.seed.
    """
    xi = np.asarray(inlier_features, dtype=np.float64)
    xo = np.asarray(distorted_features, dtype=np.float64)
    if xi.ndim != 2 or xo.ndim != 2 or xi.shape[0] == 0 or xo.shape[0] == 0:
        raise InputError("both feature sets must be non-empty (n, dim) arrays")
    if xi.shape[1] != xo.shape[1]:
        raise InputError("inlier/distorted feature dims differ")
    dim = xi.shape[1]

    rng = seeded_rng(config.seed)

    def split(values):
        n = values.shape[0]
        order = rng.permutation(n)
        n_val = int(round(config.val_fraction * n))
        if n > 1:
            n_val = min(max(n_val, 0), n - 1)
        return values[order[n_val:]], values[order[:n_val]]

    xi_tr, xi_va = split(xi)
    xo_tr, xo_va = split(xo)

    mean, std = _standardize_stats(np.concatenate([xi_tr, xo_tr]))

    x_tr = (np.concatenate([xi_tr, xo_tr]) - mean) / std
    y_tr = np.concatenate([np.zeros(len(xi_tr)), np.ones(len(xo_tr))])
    x_va = (np.concatenate([xi_va, xo_va]) - mean) / std
    y_va = np.concatenate([np.zeros(len(xi_va)), np.ones(len(xo_va))])

    layer1 = AffineLayer.random_init(config.hidden, dim, rng)
    layer2 = AffineLayer.random_init(1, config.hidden, rng)
    act1, act2 = SigmoidLayer(), SigmoidLayer()
    params = {"l1.w": layer1.weights, "l1.b": layer1.bias,
              "l2.w": layer2.weights, "l2.b": layer2.bias}
    optimizer = Adam(params, lr=config.learning_rate, beta1=config.beta1,
                     beta2=config.beta2, eps=config.adam_eps)

    def forward(x):
        h = act1.forward(layer1.forward(x))
        return act2.forward(layer2.forward(h))[:, 0]

    def mean_bce(scores, labels):
        _, total = bce_recon_loss(scores, labels)
        return total / len(labels)

    n = len(x_tr)
    best = None
    best_val = np.inf
    trace = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb, yb = x_tr[idx], y_tr[idx]
            s = forward(xb)
            up = bce_grad_wrt_recon(s, yb)[:, None] / len(idx)
            up = act2.backward(up)
            up, g2w, g2b = layer2.backward(up)
            up = act1.backward(up)
            _, g1w, g1b = layer1.backward(up)
            optimizer.step({"l1.w": g1w, "l1.b": g1b, "l2.w": g2w, "l2.b": g2b})

        val_x, val_y = (x_va, y_va) if len(x_va) else (x_tr, y_tr)
        val_bce = mean_bce(forward(val_x), val_y)
        if not np.isfinite(val_bce):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        trace.append(val_bce)
        if val_bce < best_val:
            best_val = val_bce
            best = (layer1.weights.copy(), layer1.bias.copy(),
                    layer2.weights.copy(), layer2.bias.copy())

    w1, b1, w2, b2 = best
    model = DetectorModel(AffineLayer(w1, b1), AffineLayer(w2, b2),
                          feature_kind, mean, std)
    return model, trace


def save_checkpoint(model: DetectorModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<BII", _KIND_TAGS[model.feature_kind],
                             model.feature_dim, model.layer1.out_dim))
        fh.write(model.mean.astype("<f8").tobytes())
        fh.write(model.std.astype("<f8").tobytes())
        for l in (model.layer1, model.layer2):
            fh.write(struct.pack("<II", l.out_dim, l.in_dim))
            fh.write(l.weights.astype("<f8").tobytes())
            fh.write(l.bias.astype("<f8").tobytes())


def load_checkpoint(path) -> DetectorModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:6] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad detector magic at offset 0: {data[:6]!r}")
    offset = 6
    if len(data) < offset + 9:
        raise FormatError("truncated detector header")
    tag, dim, hidden = struct.unpack_from("<BII", data, offset)
    offset += 9
    if tag not in _TAG_KINDS or dim == 0 or hidden == 0:
        raise FormatError("invalid detector header values")
    if len(data) < offset + 16 * dim:
        raise FormatError(f"truncated standardization block at offset {offset}")
    mean = np.frombuffer(data, dtype="<f8", count=dim, offset=offset).copy()
    offset += 8 * dim
    std = np.frombuffer(data, dtype="<f8", count=dim, offset=offset).copy()
    offset += 8 * dim
    layers = []
    for _ in range(2):
        if len(data) < offset + 8:
            raise FormatError(f"truncated layer header at offset {offset}")
        out_dim, in_dim = struct.unpack_from("<II", data, offset)
        offset += 8
        need = 8 * (out_dim * in_dim + out_dim)
        if len(data) < offset + need:
            raise FormatError(f"truncated layer payload at offset {offset}")
        w = np.frombuffer(data, dtype="<f8", count=out_dim * in_dim, offset=offset)
        offset += 8 * out_dim * in_dim
        b = np.frombuffer(data, dtype="<f8", count=out_dim, offset=offset)
        offset += 8 * out_dim
        layers.append(AffineLayer(w.reshape(out_dim, in_dim).copy(), b.copy()))
    if offset != len(data):
        raise FormatError(f"trailing bytes after offset {offset}")
    if layers[0].out_dim != hidden or layers[0].in_dim != dim:
        raise FormatError("detector layer dims do not match header")
    return DetectorModel(layers[0], layers[1], _TAG_KINDS[tag], mean, std)
