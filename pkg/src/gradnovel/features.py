"""Per-sample feature vectors: reconstruction error, latent loss, gradients.

The gradient feature is the flattened weight (+ bias) gradient of the summed
reconstruction BCE with respect to one decoder layer, computed on the
deterministic z = mu latent path. Extraction never mutates the model.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import FormatError, InputError, ShapeError
from .vae import VaeModel, bce_grad_wrt_recon, bce_recon_loss, kl_loss


class FeatureKind(str, Enum):
    RECON_ERROR = "recon_error"
    LATENT_LOSS = "latent_loss"
    GRADIENT = "gradient"


@dataclass
class FeatureVector:
    kind: FeatureKind
    values: np.ndarray
    sample_id: int = 0
    source_layer: int | None = None

    def __post_init__(self):
        if self.kind is FeatureKind.GRADIENT and self.source_layer is None:
            raise InputError("gradient features require source_layer")
        if self.kind is not FeatureKind.GRADIENT and self.source_layer is not None:
            raise InputError("source_layer only applies to gradient features")


def _flatten(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.min() < 0.0 or x.max() > 1.0:
        raise InputError("image values must lie in [0, 1]")
    return x


def recon_error_feature(model: VaeModel, x, sample_id: int = 0) -> FeatureVector:
    """Per-pixel BCE between x and its z = mu reconstruction."""
    x = _flatten(x)
    mu, _ = model.encode(x)
    recon = model.decode(mu)
    per_pixel, _ = bce_recon_loss(recon, x)
    return FeatureVector(FeatureKind.RECON_ERROR, per_pixel, sample_id)


def latent_loss_feature(model: VaeModel, x, sample_id: int = 0) -> FeatureVector:
    """Per-dimension KL of the encoded posterior against the unit prior."""
    x = _flatten(x)
    mu, logvar = model.encode(x)
    per_dim, _ = kl_loss(mu, logvar)
    return FeatureVector(FeatureKind.LATENT_LOSS, per_dim, sample_id)


def _decoder_upstreams(model: VaeModel, x: np.ndarray, layer_index: int):
    """Backpropagate the recon BCE through the decoder down to layer_index.

    Returns the pre-activation upstream at that layer; decoder layer caches
    hold the matching inputs. Handles both single samples and batches.
    """
    if not 0 <= layer_index < model.decoder_layer_count:
        raise InputError(f"decoder layer index {layer_index} out of range")
    mu, _ = model.encode(x)
    recon = model.decode(mu)
    up = bce_grad_wrt_recon(recon, x)
    for i in range(model.decoder_layer_count - 1, layer_index - 1, -1):
        up = model.dec_acts[i].backward(up)
        if i == layer_index:
            return up
        up, _, _ = model.dec_layers[i].backward(up)
    raise AssertionError("unreachable")


def gradient_feature(model: VaeModel, x, layer_index: int,
                     include_bias: bool = True, sample_id: int = 0) -> FeatureVector:
    """Flattened recon-BCE gradient of one decoder layer's parameters."""
    x = _flatten(x)
    up = _decoder_upstreams(model, x, layer_index)
    wg, bg = model.dec_layers[layer_index].per_sample_grads(up)
    values = wg[0].ravel()
    if include_bias:
        values = np.concatenate([values, bg[0]])
    return FeatureVector(FeatureKind.GRADIENT, values, sample_id, layer_index)


def gradient_l2_norm(model: VaeModel, x, layer_index: int,
                     include_bias: bool = True) -> float:
    """Euclidean magnitude of the gradient feature."""
    return float(np.linalg.norm(
        gradient_feature(model, x, layer_index, include_bias).values
    ))


def feature_dim(model: VaeModel, kind: FeatureKind,
                layer_index: int | None = None, include_bias: bool = True) -> int:
    if kind is FeatureKind.RECON_ERROR:
        return model.image_dim
    if kind is FeatureKind.LATENT_LOSS:
        return model.latent_dim
    layer = model.decoder_layer(layer_index)
    return layer.weights.size + (layer.bias.size if include_bias else 0)


def extract_features(model: VaeModel, images: np.ndarray, kind: FeatureKind,
                     layer_index: int | None = None,
                     include_bias: bool = True) -> np.ndarray:
    """Batched extraction: one row per image, matching the per-sample ops."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images.reshape(images.shape[0], -1)
    if images.ndim != 2 or images.shape[0] == 0:
        raise InputError("expected a non-empty (n, image_dim) array")
    if images.min() < 0.0 or images.max() > 1.0:
        raise InputError("image values must lie in [0, 1]")

    if kind is FeatureKind.RECON_ERROR:
        mu, _ = model.encode(images)
        recon = model.decode(mu)
        per_pixel, _ = bce_recon_loss(recon, images)
        return per_pixel
    if kind is FeatureKind.LATENT_LOSS:
        mu, logvar = model.encode(images)
        per_dim, _ = kl_loss(mu, logvar)
        return per_dim
    if layer_index is None:
        raise InputError("gradient extraction requires layer_index")
    up = _decoder_upstreams(model, images, layer_index)
    wg, bg = model.dec_layers[layer_index].per_sample_grads(up)
    flat = wg.reshape(wg.shape[0], -1)
    if include_bias:
        flat = np.concatenate([flat, bg], axis=1)
    return flat


CACHE_MAGIC = b"GNFEA1"
_KIND_TAGS = {
    FeatureKind.RECON_ERROR: 0,
    FeatureKind.LATENT_LOSS: 1,
    FeatureKind.GRADIENT: 2,
}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}
_NO_LAYER = 0xFFFFFFFF


def save_feature_cache(path, kind: FeatureKind, values: np.ndarray,
                       sample_ids, source_layer: int | None = None) -> None:
    """Feature cache file: f32 payload on disk, computation stays f64."""
    values = np.asarray(values, dtype=np.float64)
    sample_ids = np.asarray(sample_ids, dtype=np.int64)
    if values.ndim != 2 or values.shape[0] != sample_ids.shape[0]:
        raise ShapeError("values must be (count, dim) aligned with sample_ids")
    if (kind is FeatureKind.GRADIENT) != (source_layer is not None):
        raise InputError("source_layer must be set exactly for gradient caches")
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack(
            "<BIII",
            _KIND_TAGS[kind],
            values.shape[1],
            values.shape[0],
            _NO_LAYER if source_layer is None else source_layer,
        ))
        for sid, row in zip(sample_ids, values):
            fh.write(struct.pack("<q", int(sid)))
            fh.write(row.astype("<f4").tobytes())


def load_feature_cache(path):
    """Returns (kind, values (count, dim) f64, sample_ids, source_layer)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:6] != CACHE_MAGIC:
        raise FormatError(f"bad feature-cache magic at offset 0: {data[:6]!r}")
    offset = 6
    if len(data) < offset + 13:
        raise FormatError("truncated feature-cache header")
    tag, dim, count, layer = struct.unpack_from("<BIII", data, offset)
    offset += 13
    if tag not in _TAG_KINDS or dim == 0:
        raise FormatError("invalid feature-cache header values")
    record = 8 + 4 * dim
    if len(data) != offset + count * record:
        raise FormatError(f"feature-cache payload length mismatch at offset {offset}")
    ids = np.empty(count, dtype=np.int64)
    values = np.empty((count, dim), dtype=np.float64)
    for i in range(count):
        (ids[i],) = struct.unpack_from("<q", data, offset)
        offset += 8
        values[i] = np.frombuffer(data, dtype="<f4", count=dim, offset=offset)
        offset += 4 * dim
    source_layer = None if layer == _NO_LAYER else layer
    kind = _TAG_KINDS[tag]
    if (kind is FeatureKind.GRADIENT) != (source_layer is not None):
        raise FormatError("feature-cache kind/source_layer inconsistency")
    return kind, values, ids, source_layer
