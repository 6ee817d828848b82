"""Fully connected variational autoencoder with hand-derived gradients.

Encoder: affine+sigmoid hidden stack, then two plain affine heads producing
mu and log-variance. Decoder: affine+sigmoid stack whose final sigmoid is the
pixel output. The training loss is summed per-pixel binary cross entropy plus
the closed-form KL of the diagonal-Gaussian posterior against N(0, I).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InputError, ShapeError, TrainingError
from .tensor_core import Adam, AffineLayer, SigmoidLayer, seeded_rng

# Clamp for log() in BCE; applied identically in the loss and its gradient.
BCE_EPS = 1e-7

CHECKPOINT_MAGIC = b"GNVAE1"


@dataclass
class TrainConfig:
    """Defaults are the tuned desk-scale settings: the shallow decoder keeps
    the backpropagated per-sample gradient signal strong at the first decoder
    layer, and lr 7e-3 / batch 16 converges within a 30-epoch budget on
    2,000-image inlier sets."""
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 7e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    latent_dim: int = 10
    enc_hidden: tuple[int, ...] = (256, 64)
    dec_hidden: tuple[int, ...] = (64,)

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.latent_dim <= 0:
            raise InputError("epochs, batch_size and latent_dim must be positive")
        if self.learning_rate < 0 or self.adam_eps <= 0:
            raise InputError("learning_rate must be >= 0 and adam_eps > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise InputError("Adam betas must lie in (0, 1)")
        if any(h <= 0 for h in self.enc_hidden + self.dec_hidden):
            raise InputError("hidden widths must be positive")


@dataclass
class LatentSample:
    mu: np.ndarray
    logvar: np.ndarray
    epsilon: np.ndarray
    z: np.ndarray


@dataclass
class VaeLossResult:
    j: float
    recon_total: float
    kl_total: float
    latent: LatentSample
    recon: np.ndarray


class VaeModel:
    """Encoder/decoder parameter container with layer-indexed decoder access."""

    def __init__(self, enc_layers, mu_head, logvar_head, dec_layers, latent_dim):
        self.enc_layers: list[AffineLayer] = enc_layers
        self.enc_acts = [SigmoidLayer() for _ in enc_layers]
        self.mu_head: AffineLayer = mu_head
        self.logvar_head: AffineLayer = logvar_head
        self.dec_layers: list[AffineLayer] = dec_layers
        self.dec_acts = [SigmoidLayer() for _ in dec_layers]
        self.latent_dim = latent_dim
        if dec_layers[0].in_dim != latent_dim:
            raise ShapeError("decoder input dim must equal latent_dim")

    @property
    def image_dim(self) -> int:
        return self.dec_layers[-1].out_dim

    @property
    def decoder_layer_count(self) -> int:
        return len(self.dec_layers)

    def decoder_layer(self, index: int) -> AffineLayer:
        if not 0 <= index < len(self.dec_layers):
            raise InputError(f"decoder layer index {index} out of range")
        return self.dec_layers[index]

    @classmethod
    def build(cls, image_dim: int, config: TrainConfig, rng) -> "VaeModel":
        enc = []
        prev = image_dim
        for h in config.enc_hidden:
            enc.append(AffineLayer.random_init(h, prev, rng))
            prev = h
        mu_head = AffineLayer.random_init(config.latent_dim, prev, rng)
        logvar_head = AffineLayer.random_init(config.latent_dim, prev, rng)
        dec = []
        prev = config.latent_dim
        for h in config.dec_hidden:
            dec.append(AffineLayer.random_init(h, prev, rng))
            prev = h
        dec.append(AffineLayer.random_init(image_dim, prev, rng))
        return cls(enc, mu_head, logvar_head, dec, config.latent_dim)

    def clone(self) -> "VaeModel":
        return VaeModel(
            [l.clone() for l in self.enc_layers],
            self.mu_head.clone(),
            self.logvar_head.clone(),
            [l.clone() for l in self.dec_layers],
            self.latent_dim,
        )

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for i, l in enumerate(self.enc_layers):
            params[f"enc{i}.w"] = l.weights
            params[f"enc{i}.b"] = l.bias
        params["mu.w"] = self.mu_head.weights
        params["mu.b"] = self.mu_head.bias
        params["logvar.w"] = self.logvar_head.weights
        params["logvar.b"] = self.logvar_head.bias
        for i, l in enumerate(self.dec_layers):
            params[f"dec{i}.w"] = l.weights
            params[f"dec{i}.b"] = l.bias
        return params

    def encode(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = x
        for layer, act in zip(self.enc_layers, self.enc_acts):
            h = act.forward(layer.forward(h))
        return self.mu_head.forward(h), self.logvar_head.forward(h)

    def decode(self, z: np.ndarray) -> np.ndarray:
        h = z
        for layer, act in zip(self.dec_layers, self.dec_acts):
            h = act.forward(layer.forward(h))
        return h


def bce_recon_loss(recon: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-pixel binary cross entropy and its sum, with log-clamp at BCE_EPS."""
    recon = np.asarray(recon, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if recon.shape != target.shape:
        raise ShapeError("recon/target shape mismatch")
    p = np.clip(recon, BCE_EPS, 1.0 - BCE_EPS)
    per_pixel = -(target * np.log(p) + (1.0 - target) * np.log1p(-p))
    return per_pixel, float(per_pixel.sum())


def bce_grad_wrt_recon(recon: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Gradient of the clamped BCE total with respect to the raw recon values."""
    p = np.clip(recon, BCE_EPS, 1.0 - BCE_EPS)
    grad = -target / p + (1.0 - target) / (1.0 - p)
    # Where the clamp binds, the loss is locally constant in recon.
    inside = (recon > BCE_EPS) & (recon < 1.0 - BCE_EPS)
    return np.where(inside, grad, 0.0)


def kl_loss(mu: np.ndarray, logvar: np.ndarray) -> tuple[np.ndarray, float]:
    """Closed-form KL(N(mu, diag exp(logvar)) || N(0, I)) per dimension and total."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    per_dim = 0.5 * (mu * mu + np.exp(logvar) - 1.0 - logvar)
    return per_dim, float(per_dim.sum())


def reparameterize(mu: np.ndarray, logvar: np.ndarray, rng) -> LatentSample:
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    if mu.shape != logvar.shape:
        raise ShapeError("mu/logvar shape mismatch")
    epsilon = rng.standard_normal(mu.shape)
    z = mu + np.exp(0.5 * logvar) * epsilon
    return LatentSample(mu=mu, logvar=logvar, epsilon=epsilon, z=z)


def vae_loss(model: VaeModel, x: np.ndarray, rng) -> VaeLossResult:
    """Single-sample ELBO loss with all intermediates exposed."""
    x = np.asarray(x, dtype=np.float64).ravel()
    mu, logvar = model.encode(x)
    latent = reparameterize(mu, logvar, rng)
    recon = model.decode(latent.z)
    _, recon_total = bce_recon_loss(recon, x)
    _, kl_total = kl_loss(mu, logvar)
    return VaeLossResult(
        j=recon_total + kl_total,
        recon_total=recon_total,
        kl_total=kl_total,
        latent=latent,
        recon=recon,
    )


def batch_loss_and_grads(model: VaeModel, x: np.ndarray, epsilon: np.ndarray):
    """Mean-over-batch loss J and gradients for every parameter.

    `epsilon` is the reparameterization draw, held fixed so the computation is
    a deterministic function of (parameters, x, epsilon) — this is what makes
    finite-difference checks of the gradients possible.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    epsilon = np.atleast_2d(np.asarray(epsilon, dtype=np.float64))
    n = x.shape[0]

    mu, logvar = model.encode(x)
    std = np.exp(0.5 * logvar)
    z = mu + std * epsilon
    recon = model.decode(z)

    _, bce_total = bce_recon_loss(recon, x)
    _, kl_total = kl_loss(mu, logvar)
    loss = (bce_total + kl_total) / n

    grads: dict[str, np.ndarray] = {}

    # Decoder backward: d(loss)/d(recon) chained through each sigmoid+affine.
    up = bce_grad_wrt_recon(recon, x) / n
    for i in range(len(model.dec_layers) - 1, -1, -1):
        up = model.dec_acts[i].backward(up)
        up, wg, bg = model.dec_layers[i].backward(up)
        grads[f"dec{i}.w"] = wg
        grads[f"dec{i}.b"] = bg
    dz = up

    # Through the reparameterization, plus the KL term's own gradients.
    dmu = dz + mu / n
    dlogvar = dz * 0.5 * std * epsilon + 0.5 * (np.exp(logvar) - 1.0) / n

    dh_mu, wg, bg = model.mu_head.backward(dmu)
    grads["mu.w"] = wg
    grads["mu.b"] = bg
    dh_lv, wg, bg = model.logvar_head.backward(dlogvar)
    grads["logvar.w"] = wg
    grads["logvar.b"] = bg

    up = dh_mu + dh_lv
    for i in range(len(model.enc_layers) - 1, -1, -1):
        up = model.enc_acts[i].backward(up)
        up, wg, bg = model.enc_layers[i].backward(up)
        grads[f"enc{i}.w"] = wg
        grads[f"enc{i}.b"] = bg

    return loss, bce_total / n, kl_total / n, grads


def train_vae(images: np.ndarray, config: TrainConfig):
    """Adam-train a VAE on inlier images; returns (model, per-epoch loss trace).

    Bit-deterministic given config.seed: the same seed drives initialization,
    shuffling and reparameterization draws.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images.reshape(images.shape[0], -1)
    if images.ndim != 2 or images.shape[0] == 0:
        raise InputError("expected a non-empty (n, image_dim) array of images")
    if images.min() < 0.0 or images.max() > 1.0:
        raise InputError("image values must lie in [0, 1]")

    rng = seeded_rng(config.seed)
    model = VaeModel.build(images.shape[1], config, rng)
    optimizer = Adam(
        model.parameters(),
        lr=config.learning_rate,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.adam_eps,
    )

    n = images.shape[0]
    trace = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = epoch_bce = epoch_kl = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = images[idx]
            eps = rng.standard_normal((len(idx), config.latent_dim))
            loss, bce, kl, grads = batch_loss_and_grads(model, batch, eps)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch start {start}"
                )
            optimizer.step(grads)
            epoch_loss += loss * len(idx)
            epoch_bce += bce * len(idx)
            epoch_kl += kl * len(idx)
        # (mean J, mean recon BCE, mean KL) per sample for this epoch
        trace.append((epoch_loss / n, epoch_bce / n, epoch_kl / n))
    return model, trace


def save_checkpoint(model: VaeModel, path) -> None:
    """Write the versioned binary checkpoint (magic GNVAE1, little-endian f64)."""
    layers = (
        list(model.enc_layers)
        + [model.mu_head, model.logvar_head]
        + list(model.dec_layers)
    )
    # Load-time structure recovery relies on the first layer with
    # out_dim == latent_dim being the mu head.
    for l in model.enc_layers:
        if l.out_dim == model.latent_dim:
            raise InputError(
                "encoder hidden width equal to latent_dim is not serializable"
            )
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", model.latent_dim, len(layers)))
        for l in layers:
            fh.write(struct.pack("<II", l.out_dim, l.in_dim))
            fh.write(l.weights.astype("<f8").tobytes())
            fh.write(l.bias.astype("<f8").tobytes())


def load_checkpoint(path) -> VaeModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:6] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic at offset 0: {data[:6]!r}")
    offset = 6
    if len(data) < offset + 8:
        raise FormatError("truncated checkpoint header")
    latent_dim, layer_count = struct.unpack_from("<II", data, offset)
    offset += 8
    if latent_dim == 0 or layer_count < 3:
        raise FormatError("invalid checkpoint header values")
    layers = []
    for _ in range(layer_count):
        if len(data) < offset + 8:
            raise FormatError(f"truncated layer header at offset {offset}")
        out_dim, in_dim = struct.unpack_from("<II", data, offset)
        offset += 8
        if out_dim == 0 or in_dim == 0:
            raise FormatError(f"invalid layer dims at offset {offset - 8}")
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

    mu_index = next(
        (i for i, l in enumerate(layers) if l.out_dim == latent_dim), None
    )
    if mu_index is None or mu_index + 1 >= len(layers) \
            or layers[mu_index + 1].out_dim != latent_dim:
        raise FormatError("checkpoint layer structure does not match GNVAE1 layout")
    enc = layers[:mu_index]
    mu_head = layers[mu_index]
    logvar_head = layers[mu_index + 1]
    dec = layers[mu_index + 2:]
    if not dec:
        raise FormatError("checkpoint has no decoder layers")
    return VaeModel(enc, mu_head, logvar_head, dec, latent_dim)
