"""Style-based generator and mirrored discriminator.

The generator maps a normally distributed latent through a fully connected
mapping network into a style vector, then grows an image from a learned
4x4 constant: each synthesis layer optionally upsamples, convolves, adds
per-channel-scaled single-channel noise, applies a leaky ReLU, and
re-normalizes with a style-derived scale and bias. Styles are injected
per layer, so different layers can receive different style vectors.

Weights are stored unit-normal and rescaled at call time (equalized
learning rate); all initialization is driven by a single seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import tape as T
from .autodiff.tape import Tensor, as_tensor
from .errors import ShapeError

LATENT_EPS = 1e-8


@dataclass(frozen=True)
class ModelConfig:
    """Architecture constants. Defaults target quick CPU experiments; a
    256x256 configuration is a matter of raising ``resolution`` and
    ``base_channels``."""

    resolution: int = 32
    z_dim: int = 64
    mapping_depth: int = 4
    base_channels: int = 64
    min_channels: int = 8
    convs_per_block: int = 1
    leaky_alpha: float = 0.2
    noise_scale_init: float = 0.1

    def __post_init__(self):
        r = self.resolution
        if r < 8 or (r & (r - 1)) != 0:
            raise ValueError(f"resolution must be a power of two >= 8, got {r}")
        if self.z_dim < 1:
            raise ValueError(f"z_dim must be positive, got {self.z_dim}")
        if self.mapping_depth < 0:
            raise ValueError(f"mapping_depth must be >= 0, got {self.mapping_depth}")
        if self.convs_per_block not in (1, 2):
            raise ValueError(f"convs_per_block must be 1 or 2, got {self.convs_per_block}")

    @property
    def w_dim(self) -> int:
        return self.z_dim

    def resolutions(self) -> tuple[int, ...]:
        out, r = [], 4
        while r <= self.resolution:
            out.append(r)
            r *= 2
        return tuple(out)

    def channels(self, resolution: int) -> int:
        return max(self.min_channels, self.base_channels * 4 // resolution)

    def layer_resolutions(self) -> tuple[int, ...]:
        out = []
        for r in self.resolutions():
            out.extend([r] * self.convs_per_block)
        return tuple(out)

    @property
    def num_layers(self) -> int:
        return len(self.layer_resolutions())

    def to_dict(self) -> dict:
        return {
            "resolution": self.resolution,
            "z_dim": self.z_dim,
            "mapping_depth": self.mapping_depth,
            "base_channels": self.base_channels,
            "min_channels": self.min_channels,
            "convs_per_block": self.convs_per_block,
            "leaky_alpha": self.leaky_alpha,
            "noise_scale_init": self.noise_scale_init,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# equalized-learning-rate building blocks
# ---------------------------------------------------------------------------

class _EqDense:
    """Dense layer with unit-normal stored weights and runtime He scaling."""

    def __init__(self, rng, d_in, d_out, gain=math.sqrt(2.0), bias_init=0.0,
                 dtype=np.float32):
        self.weight = Tensor(rng.standard_normal((d_in, d_out)).astype(dtype),
                             requires_grad=True)
        bias = np.full(d_out, bias_init, dtype) if np.isscalar(bias_init) \
            else np.asarray(bias_init, dtype)
        self.bias = Tensor(bias, requires_grad=True)
        self.scale = gain / math.sqrt(d_in)

    def __call__(self, x):
        return T.dense(x, T.mul_scalar(self.weight, self.scale), self.bias)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


class _EqConv:
    """3x3 convolution with runtime He scaling."""

    def __init__(self, rng, c_in, c_out, gain=math.sqrt(2.0), dtype=np.float32):
        self.weight = Tensor(rng.standard_normal((c_out, c_in, 3, 3)).astype(dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype), requires_grad=True)
        self.scale = gain / math.sqrt(c_in * 9)

    def __call__(self, x):
        return T.conv2d(x, T.mul_scalar(self.weight, self.scale), self.bias)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


def channelwise_dense(x, layer: _EqDense):
    """Apply a dense layer across the channel axis of (n, c, h, w)."""
    n, c, h, w = x.shape
    flat = T.reshape(T.transpose(x, (0, 2, 3, 1)), (n * h * w, c))
    y = layer(flat)
    return T.transpose(T.reshape(y, (n, h, w, y.shape[1])), (0, 3, 1, 2))


# ---------------------------------------------------------------------------
# mapping network
# ---------------------------------------------------------------------------

def normalize_latent(z):
    """Scale each latent row to unit mean square: z / sqrt(mean(z^2) + eps)."""
    z = as_tensor(z)
    d = z.shape[1]
    ms = T.mul_scalar(T.sum_cols(T.square(z)), 1.0 / d)
    return T.mul(z, T.repeat_cols(T.rsqrt(T.add_scalar(ms, LATENT_EPS)), d))


class MappingNetwork:
    """Fully connected latent-to-style map; depth 0 is normalization only."""

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.layers = [
            _EqDense(rng, cfg.z_dim, cfg.z_dim, dtype=dtype)
            for _ in range(cfg.mapping_depth)
        ]

    def __call__(self, z):
        z = as_tensor(z)
        squeeze = z.ndim == 1
        if squeeze:
            z = T.reshape(z, (1, z.shape[0]))
        if z.ndim != 2 or z.shape[1] != self.cfg.z_dim:
            raise ShapeError(f"map_latent: latent shape {z.shape} does not match "
                             f"z_dim={self.cfg.z_dim}")
        x = normalize_latent(z)
        for layer in self.layers:
            x = T.leaky_relu(layer(x), self.cfg.leaky_alpha)
        return T.reshape(x, (x.shape[1],)) if squeeze else x

    def params(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params().items():
                out[f"mapping.fc{i}.{k}"] = v
        return out


def map_latent(net: MappingNetwork, z):
    """Style vector for a latent: w = MLP(normalize(z))."""
    return net(z)


def mean_w(net: MappingNetwork, n: int, seed: int, batch: int = 1024) -> np.ndarray:
    """Monte-Carlo mean style over ``n`` standard-normal latents."""
    if n < 1:
        raise ValueError(f"mean_w: n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    d = net.cfg.z_dim
    total = np.zeros(d, np.float64)
    with T.no_grad():
        done = 0
        while done < n:
            m = min(batch, n - done)
            z = rng.standard_normal((m, d), dtype=np.float32)
            total += net(z).data.astype(np.float64).sum(axis=0)
            done += m
    return (total / n).astype(np.float32)


# ---------------------------------------------------------------------------
# truncation
# ---------------------------------------------------------------------------

@dataclass
class TruncationConfig:
    """Pull styles toward the mean style for layers at or below the cutoff
    resolution. psi=1 is the identity and psi=0 lands exactly on the mean
    (both bit-exact by construction)."""

    psi: float
    w_mean: np.ndarray
    cutoff: int = 32


def truncate(w, cfg: TruncationConfig, layer_resolution: int):
    if cfg.psi == 1.0 or layer_resolution > cfg.cutoff:
        return w
    arr = w.data if isinstance(w, Tensor) else np.asarray(w)
    mean = np.asarray(cfg.w_mean, arr.dtype)
    if arr.ndim == 2:
        mean = np.broadcast_to(mean, arr.shape)
    if cfg.psi == 0.0:
        return mean.copy()
    return mean + cfg.psi * (arr - mean)


# ---------------------------------------------------------------------------
# noise schedule
# ---------------------------------------------------------------------------

@dataclass
class NoiseConfig:
    """Which layers receive noise and what that noise is.

    ``mode`` is one of all / none / coarse_only / fine_only / mask; coarse
    means resolution <= ``boundary``. Noise content comes from per-layer
    ``seeds`` or explicit ``tensors``; a disabled layer's entry is never
    consumed, so its seed cannot influence the output.
    """

    mode: str = "all"
    boundary: int = 32
    seeds: tuple[int, ...] | None = None
    tensors: list | None = None
    mask: tuple[bool, ...] | None = None

    MODES = ("all", "none", "coarse_only", "fine_only", "mask")

    def __post_init__(self):
        if self.mode not in self.MODES:
            raise ValueError(f"noise mode {self.mode!r} not in {self.MODES}")
        if self.mode == "mask" and self.mask is None:
            raise ValueError("noise mode 'mask' requires an explicit mask")

    @classmethod
    def from_seed(cls, seed: int, n_layers: int, mode: str = "all",
                  boundary: int = 32, mask=None) -> "NoiseConfig":
        seeds = tuple(int(s) for s in np.random.SeedSequence(seed).generate_state(n_layers))
        return cls(mode=mode, boundary=boundary, seeds=seeds,
                   mask=tuple(mask) if mask is not None else None)

    def enabled_mask(self, layer_resolutions) -> list[bool]:
        if self.mode == "mask":
            if len(self.mask) != len(layer_resolutions):
                raise ShapeError(f"noise mask length {len(self.mask)} != "
                                 f"layer count {len(layer_resolutions)}")
            return list(self.mask)
        if self.mode == "all":
            return [True] * len(layer_resolutions)
        if self.mode == "none":
            return [False] * len(layer_resolutions)
        coarse = [r <= self.boundary for r in layer_resolutions]
        return coarse if self.mode == "coarse_only" else [not c for c in coarse]

    def realize(self, layer_resolutions, batch: int, dtype=np.float32) -> list:
        """Per-layer noise arrays (or None for disabled layers)."""
        enabled = self.enabled_mask(layer_resolutions)
        out = []
        for i, (res, on) in enumerate(zip(layer_resolutions, enabled)):
            if not on:
                out.append(None)
                continue
            if self.tensors is not None:
                nz = np.asarray(self.tensors[i], dtype)
                if nz.shape != (batch, 1, res, res):
                    raise ShapeError(f"noise tensor {i} has shape {nz.shape}, "
                                     f"expected {(batch, 1, res, res)}")
                out.append(nz)
            else:
                if self.seeds is None or len(self.seeds) != len(layer_resolutions):
                    raise ValueError("noise seeds missing or wrong length")
                rng = np.random.default_rng(self.seeds[i])
                out.append(rng.standard_normal((batch, 1, res, res), dtype=dtype))
        return out


# ---------------------------------------------------------------------------
# synthesis network
# ---------------------------------------------------------------------------

class SynthesisLayer:
    def __init__(self, cfg: ModelConfig, rng, resolution, c_in, c_out,
                 upsample: bool, dtype=np.float32):
        self.resolution = resolution
        self.upsample = upsample
        self.alpha = cfg.leaky_alpha
        self.conv = _EqConv(rng, c_in, c_out, dtype=dtype)
        self.noise_scale = Tensor(np.full(c_out, cfg.noise_scale_init, dtype),
                                  requires_grad=True)
        # style affine starts at (scale, bias) ~ (1, 0)
        self.style_scale = _EqDense(rng, cfg.w_dim, c_out, gain=1.0,
                                    bias_init=1.0, dtype=dtype)
        self.style_bias = _EqDense(rng, cfg.w_dim, c_out, gain=1.0,
                                   bias_init=0.0, dtype=dtype)

    def __call__(self, x, w, noise):
        if self.upsample:
            x = T.upsample2x(x)
        x = self.conv(x)
        if noise is not None:
            x = T.inject_noise(x, as_tensor(noise), self.noise_scale)
        x = T.leaky_relu(x, self.alpha)
        return T.adain(x, self.style_scale(w), self.style_bias(w))

    def params(self):
        out = {"conv.weight": self.conv.weight, "conv.bias": self.conv.bias,
               "noise_scale": self.noise_scale}
        for k, v in self.style_scale.params().items():
            out[f"style_scale.{k}"] = v
        for k, v in self.style_bias.params().items():
            out[f"style_bias.{k}"] = v
        return out


class SynthesisNetwork:
    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        self.cfg = cfg
        c4 = cfg.channels(4)
        self.const = Tensor(rng.standard_normal((1, c4, 4, 4)).astype(dtype),
                            requires_grad=True)
        self.layers: list[SynthesisLayer] = []
        prev_c = c4
        for res in cfg.resolutions():
            for j in range(cfg.convs_per_block):
                c_out = cfg.channels(res)
                self.layers.append(SynthesisLayer(
                    cfg, rng, res, prev_c, c_out,
                    upsample=(res > 4 and j == 0), dtype=dtype))
                prev_c = c_out
        self.torgb = _EqDense(rng, prev_c, 3, gain=1.0, dtype=dtype)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def __call__(self, styles, noises) -> Tensor:
        if len(styles) != len(self.layers):
            raise ShapeError(f"synthesize: got {len(styles)} styles for "
                             f"{len(self.layers)} layers")
        if len(noises) != len(self.layers):
            raise ShapeError(f"synthesize: got {len(noises)} noise entries for "
                             f"{len(self.layers)} layers")
        styles = [as_tensor(s) for s in styles]
        n = styles[0].shape[0]
        x = T.repeat_batch(self.const, n)
        for layer, w, nz in zip(self.layers, styles, noises):
            x = layer(x, w, nz)
        return channelwise_dense(x, self.torgb)

    def params(self):
        out = {"synthesis.const": self.const}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params().items():
                out[f"synthesis.layer{i}.{k}"] = v
        for k, v in self.torgb.params().items():
            out[f"synthesis.torgb.{k}"] = v
        return out


class Generator:
    """Mapping network plus synthesis network."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.mapping = MappingNetwork(cfg, rng, dtype)
        self.synthesis = SynthesisNetwork(cfg, rng, dtype)

    @property
    def num_layers(self) -> int:
        return self.synthesis.num_layers

    @property
    def layer_resolutions(self) -> tuple[int, ...]:
        return self.cfg.layer_resolutions()

    def params(self) -> dict[str, Tensor]:
        out = self.mapping.params()
        out.update(self.synthesis.params())
        return out

    def get_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params().items()}

    def set_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.params()
        if set(arrays) != set(params):
            missing = set(params) - set(arrays)
            extra = set(arrays) - set(params)
            raise KeyError(f"parameter names mismatch: missing {sorted(missing)}, "
                           f"unexpected {sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(arrays[k], p.dtype)
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def styles_from_z(self, z, truncation: TruncationConfig | None = None) -> list:
        """Per-layer style list from a latent batch (shared w, then truncated)."""
        w = self.mapping(z)
        styles = []
        for res in self.layer_resolutions:
            styles.append(truncate(w, truncation, res) if truncation else w)
        return styles

    def generate(self, z, noise: NoiseConfig | None = None,
                 truncation: TruncationConfig | None = None) -> np.ndarray:
        """Inference convenience: images for a latent batch, no gradients."""
        z = np.atleast_2d(np.asarray(z, self.dtype))
        if noise is None:
            noise = NoiseConfig.from_seed(0, self.num_layers)
        with T.no_grad():
            styles = self.styles_from_z(z, truncation)
            noises = noise.realize(self.layer_resolutions, z.shape[0], self.dtype)
            return self.synthesis(styles, noises).data


def synthesize(net, styles, noise: NoiseConfig) -> Tensor:
    """Run the synthesis stack on explicit per-layer styles."""
    synth = net.synthesis if isinstance(net, Generator) else net
    styles = [as_tensor(s) for s in styles]
    batch = styles[0].shape[0] if styles[0].ndim == 2 else 1
    styles = [T.reshape(s, (1, s.shape[0])) if s.ndim == 1 else s for s in styles]
    dtype = styles[0].dtype
    layer_res = [layer.resolution for layer in synth.layers]
    noises = noise.realize(layer_res, batch, dtype)
    return synth(styles, noises)


def style_mixing(w1, w2, crossover: int, n_layers: int) -> list:
    """Layers [0, k) take w1; layers [k, L) take w2."""
    if not 0 <= crossover <= n_layers:
        raise ValueError(f"style_mixing: crossover {crossover} out of range "
                         f"[0, {n_layers}]")
    return [w1] * crossover + [w2] * (n_layers - crossover)


# ---------------------------------------------------------------------------
# discriminator
# ---------------------------------------------------------------------------

class Discriminator:
    """Mirror of the generator without styles or noise: per resolution a
    conv + leaky ReLU + 2x average pool, then a dense head scoring each
    sample with one unnormalized logit."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.from_rgb = _EqDense(rng, 3, cfg.channels(cfg.resolution), dtype=dtype)
        self.blocks = []  # (resolution, conv)
        res = cfg.resolution
        while res > 4:
            self.blocks.append((res, _EqConv(rng, cfg.channels(res),
                                             cfg.channels(res // 2), dtype=dtype)))
            res //= 2
        c4 = cfg.channels(4)
        self.final_conv = _EqConv(rng, c4, c4, dtype=dtype)
        self.fc0 = _EqDense(rng, c4 * 16, c4, dtype=dtype)
        self.fc1 = _EqDense(rng, c4, 1, gain=1.0, dtype=dtype)

    def __call__(self, images) -> Tensor:
        x = as_tensor(images)
        r = self.cfg.resolution
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (r, r):
            raise ShapeError(f"discriminate: images {x.shape} do not match "
                             f"model resolution (n, 3, {r}, {r})")
        alpha = self.cfg.leaky_alpha
        x = T.leaky_relu(channelwise_dense(x, self.from_rgb), alpha)
        for _, conv in self.blocks:
            x = T.avg_pool2x(T.leaky_relu(conv(x), alpha))
        x = T.leaky_relu(self.final_conv(x), alpha)
        n = x.shape[0]
        x = T.reshape(x, (n, x.shape[1] * 16))
        x = T.leaky_relu(self.fc0(x), alpha)
        return T.reshape(self.fc1(x), (n,))

    def params(self) -> dict[str, Tensor]:
        out = {}
        for k, v in self.from_rgb.params().items():
            out[f"from_rgb.{k}"] = v
        for res, conv in self.blocks:
            for k, v in conv.params().items():
                out[f"block{res}.{k}"] = v
        for k, v in self.final_conv.params().items():
            out[f"final_conv.{k}"] = v
        for k, v in self.fc0.params().items():
            out[f"head.fc0.{k}"] = v
        for k, v in self.fc1.params().items():
            out[f"head.fc1.{k}"] = v
        return out

    def get_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params().items()}

    def set_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.params()
        if set(arrays) != set(params):
            raise KeyError("discriminator parameter names mismatch")
        for k, p in params.items():
            p.data = np.asarray(arrays[k], p.dtype).copy()


def discriminate(disc: Discriminator, images) -> Tensor:
    """Per-sample real-vs-fake logits."""
    return disc(images)
