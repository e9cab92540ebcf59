"""
Per-pixel networks with analytic gradients.

A PixelNet is a stack of dense layers applied independently to every pixel
vector (a 1x1 convolution). This module builds the feature-space VAE and the
contrastive projection head out of PixelNets, trains them with AdamW and
provides finite-difference gradient verification and model containers.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple, Callable, Optional, Sequence

import numpy as np

from constants import (
    Activation, VaeConfig, TrainingHistory, PNET_MAGIC, VAEM_MAGIC, FORMAT_VERSION,
    ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON, KL_WEIGHT,
    ParameterError, FormatError, NumericError, TrainingError, DataError
)
from core import FeatureMap, RngState

logger = logging.getLogger(__name__)


# ============================================================================
# PIXEL NETWORKS
# ============================================================================

@dataclass
class DenseLayer:
    """Weight (out x in), bias (out) and activation of one layer."""
    weight: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.NONE

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ParameterError(
                f"layer shapes do not agree: weight {self.weight.shape}, bias {self.bias.shape}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


class PixelNet:
    """Chain of dense layers acting on (n, in_dim) batches of pixel vectors."""

    def __init__(self, layers: Sequence[DenseLayer]):
        if not layers:
            raise ParameterError("a PixelNet needs at least one layer")
        for previous, following in zip(layers, layers[1:]):
            if previous.out_dim != following.in_dim:
                raise ParameterError(
                    f"layer dimensions do not chain: {previous.out_dim} -> {following.in_dim}")
        for layer in layers:
            if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.bias))):
                raise NumericError("PixelNet parameters must be finite")
        self.layers = list(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> List[np.ndarray]:
        params = []
        for layer in self.layers:
            params.extend([layer.weight, layer.bias])
        return params

    def with_parameters(self, params: Sequence[np.ndarray]) -> 'PixelNet':
        if len(params) != 2 * len(self.layers):
            raise ParameterError(f"expected {2 * len(self.layers)} arrays, got {len(params)}")
        layers = [
            DenseLayer(params[2 * i].copy(), params[2 * i + 1].copy(), layer.activation)
            for i, layer in enumerate(self.layers)
        ]
        return PixelNet(layers)

    def copy(self) -> 'PixelNet':
        return self.with_parameters(self.parameters())

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ParameterError(
                f"input of shape {x.shape} does not match network input dim {self.in_dim}")
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, _ = self.forward_cached(x)
        return out

    def forward_cached(self, x: np.ndarray) -> Tuple[np.ndarray, list]:
        """Forward pass keeping (input, pre-activation) per layer for backward()."""
        h = self._check_input(x)
        cache = []
        for layer in self.layers:
            pre = h @ layer.weight.T + layer.bias
            cache.append((h, pre))
            h = np.maximum(pre, 0.0) if layer.activation is Activation.RELU else pre
        return h, cache

    def backward(self, cache: list, grad_out: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray]:
        """
        Backpropagate grad_out through the cached forward pass.

        Returns:
            (parameter gradients in parameters() order, gradient wrt input)
        """
        grads: List[np.ndarray] = [None] * (2 * len(self.layers))
        g = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            h_in, pre = cache[i]
            if layer.activation is Activation.RELU:
                g = g * (pre > 0)
            grads[2 * i] = g.T @ h_in
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ layer.weight
        return grads, g

    def apply(self, fmap: FeatureMap) -> FeatureMap:
        """Apply per pixel to a FeatureMap."""
        if fmap.channels != self.in_dim:
            raise ParameterError(
                f"feature map has {fmap.channels} channels, network expects {self.in_dim}")
        out = self.forward(fmap.pixels())
        return FeatureMap(out.reshape(fmap.height, fmap.width, self.out_dim))


def init_layer(in_dim: int, out_dim: int, activation: Activation, rng: RngState) -> DenseLayer:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out)), zero bias."""
    bound = np.sqrt(6.0 / (in_dim + out_dim))
    weight = rng.uniform(-bound, bound, (out_dim, in_dim))
    return DenseLayer(weight, np.zeros(out_dim), activation)


def init_pixel_net(dims: Sequence[int], activations: Sequence[Activation],
                   rng: RngState) -> PixelNet:
    if len(activations) != len(dims) - 1:
        raise ParameterError("need one activation per layer")
    return PixelNet([
        init_layer(dims[i], dims[i + 1], activations[i], rng)
        for i in range(len(dims) - 1)
    ])


# ============================================================================
# VARIATIONAL AUTOENCODER
# ============================================================================

@dataclass
class VaeModel:
    """Encoder trunk, parallel mu/log-variance heads and decoder."""
    encoder_trunk: PixelNet
    mu_head: PixelNet
    logvar_head: PixelNet
    decoder: PixelNet

    def __post_init__(self):
        if self.mu_head.in_dim != self.encoder_trunk.out_dim or \
                self.logvar_head.in_dim != self.encoder_trunk.out_dim:
            raise ParameterError("encoder heads do not match the trunk output")
        if self.mu_head.out_dim != self.logvar_head.out_dim:
            raise ParameterError("mu and log-variance heads disagree on latent size")
        if self.decoder.in_dim != self.latent_dim or self.decoder.out_dim != self.in_dim:
            raise ParameterError("decoder does not map latent space back to the input space")

    @property
    def in_dim(self) -> int:
        return self.encoder_trunk.in_dim

    @property
    def latent_dim(self) -> int:
        return self.mu_head.out_dim

    @property
    def nets(self) -> List[PixelNet]:
        return [self.encoder_trunk, self.mu_head, self.logvar_head, self.decoder]

    def parameters(self) -> List[np.ndarray]:
        params = []
        for net in self.nets:
            params.extend(net.parameters())
        return params

    def with_parameters(self, params: Sequence[np.ndarray]) -> 'VaeModel':
        rebuilt, start = [], 0
        for net in self.nets:
            count = 2 * len(net.layers)
            rebuilt.append(net.with_parameters(params[start:start + count]))
            start += count
        if start != len(params):
            raise ParameterError(f"expected {start} parameter arrays, got {len(params)}")
        return VaeModel(*rebuilt)


def init_vae(in_dim: int, latent_dim: int, rng: RngState) -> VaeModel:
    """
    Initialize a VAE: 3 ReLU trunk layers plus linear mu/log-variance heads on
    the encoder side, 3 layers (ReLU, ReLU, linear) on the decoder side.
    Hidden widths equal the input channel count.
    """
    relu, linear = Activation.RELU, Activation.NONE
    trunk = init_pixel_net([in_dim] * 4, [relu] * 3, rng)
    mu_head = init_pixel_net([in_dim, latent_dim], [linear], rng)
    logvar_head = init_pixel_net([in_dim, latent_dim], [linear], rng)
    decoder = init_pixel_net([latent_dim, in_dim, in_dim, in_dim], [relu, relu, linear], rng)
    return VaeModel(trunk, mu_head, logvar_head, decoder)


def vae_encode(model: VaeModel, features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Encode a (n, C) batch into latent means and log-variances."""
    hidden = model.encoder_trunk.forward(features)
    return model.mu_head.forward(hidden), model.logvar_head.forward(hidden)


def vae_reparameterize(mu: np.ndarray, logvar: np.ndarray, rng: RngState) -> np.ndarray:
    """z = mu + exp(logvar / 2) * eps with eps ~ N(0, I) drawn from rng."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    if mu.shape != logvar.shape:
        raise ParameterError(f"mu {mu.shape} and logvar {logvar.shape} differ in shape")
    eps = rng.normal(mu.shape)
    return mu + np.exp(0.5 * logvar) * eps


def vae_loss(model: VaeModel, features: np.ndarray, rng: RngState,
             kl_weight: float = KL_WEIGHT) -> Tuple[float, List[np.ndarray]]:
    """
    Reconstruction MSE (mean over batch and channels) + kl_weight * KL.

    KL is the batch mean of -1/2 * sum(1 + logvar - mu^2 - exp(logvar)).

    Returns:
        (loss, gradients in VaeModel.parameters() order)
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ParameterError(f"expected a non-empty (n, C) batch, got shape {x.shape}")
    n = x.shape[0]

    hidden, trunk_cache = model.encoder_trunk.forward_cached(x)
    mu, mu_cache = model.mu_head.forward_cached(hidden)
    logvar, logvar_cache = model.logvar_head.forward_cached(hidden)
    std = np.exp(0.5 * logvar)
    eps = rng.normal(mu.shape)
    z = mu + std * eps
    recon, decoder_cache = model.decoder.forward_cached(z)

    residual = recon - x
    reconstruction = float(np.mean(residual ** 2))
    var = std ** 2
    kl = float(-0.5 * np.sum(1.0 + logvar - mu ** 2 - var) / n)
    loss = reconstruction + kl_weight * kl
    if not np.isfinite(loss):
        raise NumericError(f"VAE loss is not finite (reconstruction={reconstruction}, kl={kl})")

    d_recon = 2.0 * residual / residual.size
    decoder_grads, d_z = model.decoder.backward(decoder_cache, d_recon)
    d_mu = d_z + kl_weight * mu / n
    d_logvar = d_z * eps * 0.5 * std + kl_weight * 0.5 * (var - 1.0) / n
    mu_grads, d_hidden_mu = model.mu_head.backward(mu_cache, d_mu)
    logvar_grads, d_hidden_lv = model.logvar_head.backward(logvar_cache, d_logvar)
    trunk_grads, _ = model.encoder_trunk.backward(trunk_cache, d_hidden_mu + d_hidden_lv)

    return loss, trunk_grads + mu_grads + logvar_grads + decoder_grads


def vae_reconstruct_mean(model: VaeModel, features: FeatureMap) -> FeatureMap:
    """Decode the latent mean of every pixel (no sampling)."""
    if features.channels != model.in_dim:
        raise ParameterError(
            f"feature map has {features.channels} channels, VAE expects {model.in_dim}")
    mu, _ = vae_encode(model, features.pixels())
    recon = model.decoder.forward(mu)
    return FeatureMap(recon.reshape(features.shape))


def train_vae(pixels: np.ndarray, config: VaeConfig, rng: RngState,
              model: Optional[VaeModel] = None,
              history: Optional[TrainingHistory] = None) -> VaeModel:
    """
    Train the feature-space VAE with AdamW on uniformly sampled pixel batches.

    Args:
        pixels: (P, C) pooled pixel vectors, already rescaled to [0, 1]
        config: Iterations, learning rate, weight decay, latent size, batch size
        rng: Random stream for initialization, batch sampling and noise
        model: Start from this model instead of a fresh initialization
        history: Receives the per-iteration loss trace

    Returns:
        The trained model
    """
    config.validate()
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 2 or pixels.shape[0] == 0:
        raise ParameterError(f"expected a non-empty (P, C) pixel array, got {pixels.shape}")
    if model is None:
        model = init_vae(pixels.shape[1], config.latent_dim, rng)
    elif model.in_dim != pixels.shape[1]:
        raise ParameterError(f"model expects {model.in_dim} channels, pixels have {pixels.shape[1]}")
    if config.iterations == 0:
        return model

    logger.info(f"Training VAE: {pixels.shape[0]:,} pixels x {pixels.shape[1]} channels, "
                f"latent {model.latent_dim}, {config.iterations:,} iterations")
    params = model.parameters()
    state = AdamWState.for_parameters(params, config.lr, config.weight_decay)
    for iteration in range(config.iterations):
        batch = pixels[rng.integers(0, pixels.shape[0], config.batch_size)]
        try:
            loss, grads = vae_loss(model, batch, rng, config.kl_weight)
        except NumericError as e:
            raise TrainingError(f"VAE training diverged: {e}", iteration=iteration) from e
        params = adamw_step(state, params, grads)
        model = model.with_parameters(params)
        if history is not None:
            history.losses.append(loss)
        if config.log_every and (iteration + 1) % config.log_every == 0:
            logger.info(f"  VAE iteration {iteration + 1:,}/{config.iterations:,}: loss {loss:.6f}")
    logger.info(f"✓ VAE trained (final batch loss {loss:.6f})")
    return model


# ============================================================================
# PROJECTION HEAD
# ============================================================================

def init_head(in_dim: int, hidden_dim: int, rng: RngState) -> PixelNet:
    """Two layers (ReLU, linear) of width hidden_dim."""
    return init_pixel_net([in_dim, hidden_dim, hidden_dim],
                          [Activation.RELU, Activation.NONE], rng)


def l2_normalize(y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Row-wise unit normalization; zero rows stay zero. Returns (e, norms)."""
    norms = np.linalg.norm(y, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return np.where(norms > 0, y / safe, 0.0), norms


def l2_normalize_backward(e: np.ndarray, norms: np.ndarray, grad_e: np.ndarray) -> np.ndarray:
    """Gradient through l2_normalize: (g - e (e . g)) / |y|, zero for zero rows."""
    safe = np.where(norms > 0, norms, 1.0)
    projected = grad_e - e * np.sum(e * grad_e, axis=1, keepdims=True)
    return np.where(norms > 0, projected / safe, 0.0)


def head_embed(head: PixelNet, x: np.ndarray) -> np.ndarray:
    """Unit-norm embeddings of a (n, C) batch."""
    embedded, _ = l2_normalize(head.forward(x))
    return embedded


def head_forward(head: PixelNet, features: FeatureMap) -> FeatureMap:
    """Apply the head per pixel and normalize every output vector to unit length."""
    if features.channels != head.in_dim:
        raise ParameterError(
            f"feature map has {features.channels} channels, head expects {head.in_dim}")
    embedded = head_embed(head, features.pixels())
    return FeatureMap(embedded.reshape(features.height, features.width, head.out_dim))


# ============================================================================
# OPTIMIZER
# ============================================================================

@dataclass
class AdamWState:
    """AdamW moments and hyperparameters."""
    lr: float
    weight_decay: float
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON

    @classmethod
    def for_parameters(cls, params: Sequence[np.ndarray], lr: float,
                       weight_decay: float) -> 'AdamWState':
        return cls(lr=lr, weight_decay=weight_decay,
                   m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params])


def adamw_step(state: AdamWState, params: Sequence[np.ndarray],
               grads: Sequence[np.ndarray]) -> List[np.ndarray]:
    """
    One AdamW update with bias correction and decoupled weight decay.

    Decay is applied first (p <- p - lr * wd * p), then the adaptive step.
    The state's moments and step counter advance in place.

    Returns:
        Updated parameter arrays (new objects)
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ParameterError("parameters, gradients and optimizer state disagree in length")
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    updated = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ParameterError(f"shape mismatch for parameter {i}: {p.shape} vs {g.shape}")
        p = p - state.lr * state.weight_decay * p
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / correction1
        v_hat = state.v[i] / correction2
        updated.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon))
    return updated


# ============================================================================
# GRADIENT VERIFICATION
# ============================================================================

LossFn = Callable[[List[np.ndarray]], Tuple[float, List[np.ndarray]]]


def grad_check(loss_fn: LossFn, params: Sequence[np.ndarray], step: float = 1e-5,
               floor: float = 1e-8) -> float:
    """
    Compare analytic gradients against central finite differences.

    Args:
        loss_fn: params -> (loss, grads); must be deterministic
        params: Point at which to check
        step: Finite-difference step
        floor: Smallest denominator of the relative error

    Returns:
        Maximum relative error |a - n| / max(|a|, |n|, floor) over all entries;
        entries smaller than floor are effectively compared absolutely
    """
    params = [np.array(p, dtype=np.float64) for p in params]
    _, analytic = loss_fn(params)
    worst = 0.0
    for index, p in enumerate(params):
        for position in np.ndindex(p.shape):
            original = p[position]
            p[position] = original + step
            plus, _ = loss_fn(params)
            p[position] = original - step
            minus, _ = loss_fn(params)
            p[position] = original
            numeric = (plus - minus) / (2.0 * step)
            a = float(analytic[index][position])
            error = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, error)
    return worst


# ============================================================================
# MODEL CONTAINERS
# ============================================================================

_NET_HEADER = struct.Struct('<4sHHI')
_LAYER_ENTRY = struct.Struct('<IIB')
_VAE_HEADER = struct.Struct('<4sHHI')
_ACTIVATION_CODES = {Activation.NONE: 0, Activation.RELU: 1}
_ACTIVATION_BY_CODE = {code: act for act, code in _ACTIVATION_CODES.items()}


def pixel_net_to_bytes(net: PixelNet) -> bytes:
    parts = [_NET_HEADER.pack(PNET_MAGIC, FORMAT_VERSION, 0, len(net.layers))]
    for layer in net.layers:
        parts.append(_LAYER_ENTRY.pack(layer.out_dim, layer.in_dim,
                                       _ACTIVATION_CODES[layer.activation]))
    for layer in net.layers:
        parts.append(np.ascontiguousarray(layer.weight, dtype='<f8').tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype='<f8').tobytes())
    return b''.join(parts)


def pixel_net_from_bytes(buffer: bytes, offset: int = 0) -> Tuple[PixelNet, int]:
    """Parse a PNET block starting at offset; returns (net, offset after block)."""
    if len(buffer) - offset < _NET_HEADER.size:
        raise FormatError("truncated PNET header", offset=len(buffer))
    magic, version, _reserved, n_layers = _NET_HEADER.unpack_from(buffer, offset)
    if magic != PNET_MAGIC:
        raise FormatError(f"bad PNET magic {magic!r}", offset=offset)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported PNET version {version}", offset=offset + 4)
    if n_layers == 0:
        raise FormatError("PNET without layers", offset=offset + 8)
    offset += _NET_HEADER.size

    table = []
    for _ in range(n_layers):
        if len(buffer) - offset < _LAYER_ENTRY.size:
            raise FormatError("truncated PNET layer table", offset=len(buffer))
        out_dim, in_dim, code = _LAYER_ENTRY.unpack_from(buffer, offset)
        if code not in _ACTIVATION_BY_CODE or out_dim == 0 or in_dim == 0:
            raise FormatError(f"invalid layer entry ({out_dim}, {in_dim}, {code})", offset=offset)
        if table and table[-1][0] != in_dim:
            raise FormatError(
                f"layer dimensions do not chain: {table[-1][0]} -> {in_dim}", offset=offset)
        table.append((out_dim, in_dim, _ACTIVATION_BY_CODE[code]))
        offset += _LAYER_ENTRY.size

    layers = []
    for out_dim, in_dim, activation in table:
        count = out_dim * in_dim + out_dim
        if len(buffer) - offset < 8 * count:
            raise FormatError("truncated PNET parameters", offset=len(buffer))
        values = np.frombuffer(buffer, dtype='<f8', count=count, offset=offset).astype(np.float64)
        if not np.all(np.isfinite(values)):
            raise FormatError("non-finite PNET parameter", offset=offset)
        layers.append(DenseLayer(values[:out_dim * in_dim].reshape(out_dim, in_dim).copy(),
                                 values[out_dim * in_dim:].copy(), activation))
        offset += 8 * count
    return PixelNet(layers), offset


def save_pixel_net(net: PixelNet, path: Path) -> Path:
    path = Path(path)
    path.write_bytes(pixel_net_to_bytes(net))
    return path


def load_pixel_net(path: Path) -> PixelNet:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing model file: {path}")
    buffer = path.read_bytes()
    net, end = pixel_net_from_bytes(buffer)
    if end != len(buffer):
        raise FormatError(f"{path}: trailing bytes after PNET block", offset=end)
    return net


def save_vae(model: VaeModel, path: Path) -> Path:
    """VAEM container: header with latent size, then trunk, mu, logvar, decoder blocks."""
    parts = [_VAE_HEADER.pack(VAEM_MAGIC, FORMAT_VERSION, 0, model.latent_dim)]
    parts.extend(pixel_net_to_bytes(net) for net in model.nets)
    path = Path(path)
    path.write_bytes(b''.join(parts))
    return path


def load_vae(path: Path) -> VaeModel:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing model file: {path}")
    buffer = path.read_bytes()
    if len(buffer) < _VAE_HEADER.size:
        raise FormatError(f"{path}: truncated VAEM header", offset=len(buffer))
    magic, version, _reserved, latent_dim = _VAE_HEADER.unpack_from(buffer, 0)
    if magic != VAEM_MAGIC:
        raise FormatError(f"{path}: bad VAEM magic {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported VAEM version {version}", offset=4)
    offset = _VAE_HEADER.size
    nets = []
    for _ in range(4):
        net, offset = pixel_net_from_bytes(buffer, offset)
        nets.append(net)
    if offset != len(buffer):
        raise FormatError(f"{path}: trailing bytes after VAEM blocks", offset=offset)
    try:
        model = VaeModel(*nets)
    except ParameterError as e:
        raise FormatError(f"{path}: {e}") from e
    if model.latent_dim != latent_dim:
        raise FormatError(f"{path}: header latent size {latent_dim} != {model.latent_dim}", offset=8)
    return model
