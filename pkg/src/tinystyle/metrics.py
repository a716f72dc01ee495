"""Quality and disentanglement metrics over pluggable feature embedders.

Implements the Fréchet distance between Gaussians fitted to embedded
samples (with the symmetric matrix-square-root formulation), perceptual
path length along latent interpolations, and a linear-separability score
built on conditional entropy. Everything is driven by explicit seeds and
reduces in a fixed order, so results do not depend on thread count.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import tape as T
from .autodiff.optim import Adam
from .autodiff.tape import Tensor
from .errors import NumericalError, ShapeError
from .models import Generator, NoiseConfig, TruncationConfig, _EqConv, _EqDense

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Gaussian moments and the Fréchet distance
# ---------------------------------------------------------------------------

@dataclass
class GaussianStats:
    mean: np.ndarray     # (d,)
    cov: np.ndarray      # (d, d), symmetric
    n: int

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def fit_gaussian(features: np.ndarray) -> GaussianStats:
    """Column means and unbiased covariance of an (n, d) feature matrix."""
    features = np.asarray(features, np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError(f"fit_gaussian needs an (n>=2, d) matrix, "
                         f"got shape {features.shape}")
    n = features.shape[0]
    mean = features.mean(axis=0)
    centered = features - mean
    cov = centered.T @ centered / (n - 1)
    cov = (cov + cov.T) * 0.5
    return GaussianStats(mean=mean, cov=cov, n=n)


def matrix_sqrt_psd(m: np.ndarray, sym_tol: float = 1e-8) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues slightly negative from sampling noise (within 1e-8 of the
    largest eigenvalue) are clipped to zero; worse than that is an error.
    """
    m = np.asarray(m, np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"matrix_sqrt_psd expects a square matrix, got {m.shape}")
    scale = max(1.0, float(np.abs(m).max()))
    if np.abs(m - m.T).max() > sym_tol * scale:
        raise NumericalError("matrix_sqrt_psd: input is not symmetric within tolerance")
    vals, vecs = np.linalg.eigh((m + m.T) * 0.5)
    floor = -1e-8 * max(1.0, float(vals.max()) if vals.size else 1.0)
    if vals.size and vals.min() < floor:
        raise NumericalError(
            f"matrix_sqrt_psd: eigenvalue {vals.min():.3e} below clip threshold")
    root = (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T
    return (root + root.T) * 0.5


def frechet_distance(g1: GaussianStats, g2: GaussianStats) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2).

    The cross trace equals the sum of singular values of S1^1/2 S2^1/2,
    which is the symmetric form evaluated without squaring the condition
    number (sample covariances are near-singular, so this matters). Tiny
    negative totals (> -1e-6) clamp to zero; anything worse raises.
    """
    if g1.dim != g2.dim:
        raise ShapeError(f"frechet_distance: dims {g1.dim} and {g2.dim} differ")
    s1_half = matrix_sqrt_psd(g1.cov)
    s2_half = matrix_sqrt_psd(g2.cov)
    cross_trace = float(np.linalg.svd(s1_half @ s2_half, compute_uv=False).sum())
    diff = g1.mean - g2.mean
    value = float(diff @ diff + np.trace(g1.cov) + np.trace(g2.cov)
                  - 2.0 * cross_trace)
    if value < -1e-6:
        raise NumericalError(f"frechet_distance: negative result {value:.3e}")
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# embedders
# ---------------------------------------------------------------------------

class PixelEmbedder:
    """Clip images to [-1, 1], mean-pool each channel to 8x8, flatten."""

    name = "pixel"
    POOL_TO = 8

    def __call__(self, images: np.ndarray) -> np.ndarray:
        x = np.clip(np.asarray(images, np.float64), -1.0, 1.0)
        n, c, h, w = x.shape
        f = h // self.POOL_TO
        if f * self.POOL_TO != h or h != w:
            raise ShapeError(f"pixel embedder needs square images divisible by "
                             f"{self.POOL_TO}, got {x.shape}")
        pooled = x.reshape(n, c, self.POOL_TO, f, self.POOL_TO, f).mean(axis=(3, 5))
        return pooled.reshape(n, c * self.POOL_TO * self.POOL_TO)


class IdentityEmbedder:
    """Flatten features unchanged (for analytic toy generators)."""

    name = "identity"

    def __call__(self, images: np.ndarray) -> np.ndarray:
        x = np.asarray(images, np.float64)
        return x.reshape(x.shape[0], -1)


class ClassifierEmbedder:
    """Penultimate activations of a small conv net trained on attributes."""

    name = "classifier"

    def __init__(self, network: "_AttrNet"):
        self.net = network

    def __call__(self, images: np.ndarray) -> np.ndarray:
        with T.no_grad():
            feats = self.net.features(Tensor(np.asarray(images, np.float32)))
        return feats.data.astype(np.float64)


class _AttrNet:
    """conv-pool stack down to 4x4, one dense feature layer, logits head."""

    FEATURES = 32

    def __init__(self, resolution: int, n_attrs: int, seed: int):
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.resolution = resolution
        self.convs = []
        c, res = 3, resolution
        while res > 4:
            nxt = min(32, c * 4)
            self.convs.append(_EqConv(rng, c, nxt))
            c, res = nxt, res // 2
        self.fc_feat = _EqDense(rng, c * 16, self.FEATURES)
        self.fc_out = _EqDense(rng, self.FEATURES, n_attrs, gain=1.0)

    def features(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = T.avg_pool2x(T.leaky_relu(conv(x), 0.2))
        x = T.reshape(x, (x.shape[0], x.shape[1] * 16))
        return T.leaky_relu(self.fc_feat(x), 0.2)

    def logits(self, x: Tensor) -> Tensor:
        return self.fc_out(self.features(x))

    def params(self):
        out = {}
        for i, conv in enumerate(self.convs):
            for k, v in conv.params().items():
                out[f"conv{i}.{k}"] = v
        for k, v in self.fc_feat.params().items():
            out[f"fc_feat.{k}"] = v
        for k, v in self.fc_out.params().items():
            out[f"fc_out.{k}"] = v
        return out


def train_classifier_embedder(images: np.ndarray, labels: np.ndarray,
                              steps: int = 200, batch: int = 64,
                              lr: float = 2e-3, seed: int = 0) -> ClassifierEmbedder:
    """Fit the attribute classifier on (n,3,r,r) float images in [-1, 1]."""
    images = np.asarray(images, np.float32)
    labels = np.asarray(labels, np.float32)
    net = _AttrNet(images.shape[2], labels.shape[1], seed)
    opt = Adam(net.params(), lr=lr)
    rng = np.random.default_rng(seed)
    n = images.shape[0]
    for _ in range(steps):
        idx = rng.integers(0, n, size=min(batch, n))
        x = Tensor(images[idx])
        y = labels[idx]
        logits = net.logits(x)
        # sigmoid BCE: softplus(s) - y * s, averaged
        loss = T.mean_all(T.sub(T.softplus(logits), T.mul(logits, Tensor(y))))
        grads = T.backward(loss, params=list(net.params().values()))
        opt.step(grads)
    return ClassifierEmbedder(net)


# ---------------------------------------------------------------------------
# image sources
# ---------------------------------------------------------------------------

def to_unit_images(batch_uint8: np.ndarray) -> np.ndarray:
    """uint8 HWC records -> float32 (n,3,h,w) in [-1, 1]."""
    x = np.asarray(batch_uint8, np.float32) / 127.5 - 1.0
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


class ShardReplaySource:
    """Serve real images from shards: the first n records, wrapping (with
    replacement) when the store is smaller than the request."""

    def __init__(self, reader):
        self.reader = reader

    def sample(self, n: int, seed: int = 0) -> np.ndarray:
        if len(self.reader) == 0:
            raise ValueError("shard source is empty")
        if n > len(self.reader):
            log.info("sampling %d images from %d records: wrapping with replacement",
                     n, len(self.reader))
        out = []
        while len(out) < n:
            for rec in self.reader:
                out.append(rec)
                if len(out) == n:
                    break
        return to_unit_images(np.stack(out))


class GeneratorSource:
    """Sample images from a generator (untruncated, noise on), clipped to
    the rasterization range [-1, 1]."""

    def __init__(self, gen: Generator, batch: int = 64,
                 truncation: TruncationConfig | None = None):
        self.gen = gen
        self.batch = batch
        self.truncation = truncation

    def sample(self, n: int, seed: int = 0) -> np.ndarray:
        z_seed, noise_seed = np.random.SeedSequence(seed).spawn(2)
        rng = np.random.default_rng(z_seed)
        noise_rng = np.random.default_rng(noise_seed)
        chunks = []
        done = 0
        while done < n:
            m = min(self.batch, n - done)
            z = rng.standard_normal((m, self.gen.cfg.z_dim), dtype=np.float32)
            noise = NoiseConfig.from_seed(int(noise_rng.integers(2 ** 31)),
                                          self.gen.num_layers)
            chunks.append(self.gen.generate(z, noise=noise, truncation=self.truncation))
            done += m
        return np.clip(np.concatenate(chunks, axis=0), -1.0, 1.0)


def fid(fake_source, real_source, embedder, n: int, seed: int = 0) -> float:
    """Fréchet distance between Gaussians fitted to n embedded samples a side."""
    if n < 2:
        raise ValueError(f"fid needs n >= 2, got {n}")
    fake_seed, real_seed = (int(s.generate_state(1)[0])
                            for s in np.random.SeedSequence(seed).spawn(2))
    fake = embedder(fake_source.sample(n, fake_seed))
    real = embedder(real_source.sample(n, real_seed))
    return frechet_distance(fit_gaussian(fake), fit_gaussian(real))


# ---------------------------------------------------------------------------
# latent interpolation
# ---------------------------------------------------------------------------

def lerp(a: np.ndarray, b: np.ndarray, t) -> np.ndarray:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    t = np.asarray(t, np.float64)
    if a.ndim == 2:
        t = t.reshape(-1, 1)
    return (1.0 - t) * a + t * b


def slerp(a: np.ndarray, b: np.ndarray, t) -> np.ndarray:
    """Spherical interpolation; falls back to lerp for near-parallel inputs."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    single = a.ndim == 1
    a2 = np.atleast_2d(a)
    b2 = np.atleast_2d(b)
    t2 = np.broadcast_to(np.asarray(t, np.float64), (a2.shape[0],)).reshape(-1, 1)
    na = np.linalg.norm(a2, axis=1, keepdims=True)
    nb = np.linalg.norm(b2, axis=1, keepdims=True)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("slerp: zero vector")
    cos = np.clip(np.sum((a2 / na) * (b2 / nb), axis=1, keepdims=True), -1.0, 1.0)
    theta = np.arccos(cos)
    small = theta < 1e-6
    sin = np.sin(np.where(small, 1.0, theta))  # placeholder where unused
    wa = np.where(small, 1.0 - t2, np.sin((1.0 - t2) * theta) / sin)
    wb = np.where(small, t2, np.sin(t2 * theta) / sin)
    out = wa * a2 + wb * b2
    return out[0] if single else out


# ---------------------------------------------------------------------------
# generator probes (model adapters shared by ppl / separability / fid)
# ---------------------------------------------------------------------------

class GeneratorProbe:
    """Expose a Generator as the three callables the metrics need."""

    def __init__(self, gen: Generator, noise_mode: str = "all"):
        self.gen = gen
        self.noise_mode = noise_mode

    @property
    def z_dim(self) -> int:
        return self.gen.cfg.z_dim

    def sample_z(self, n: int, rng) -> np.ndarray:
        return rng.standard_normal((n, self.z_dim), dtype=np.float32)

    def map_w(self, z: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self.gen.mapping(np.asarray(z, np.float32)).data

    def synthesize(self, w: np.ndarray, noise_seed: int) -> np.ndarray:
        w = np.asarray(w, np.float32)
        noise = NoiseConfig.from_seed(noise_seed, self.gen.num_layers,
                                      mode=self.noise_mode)
        styles = [Tensor(w)] * self.gen.num_layers
        noises = noise.realize(self.gen.layer_resolutions, w.shape[0], np.float32)
        with T.no_grad():
            img = self.gen.synthesis(styles, noises).data
        return np.clip(img, -1.0, 1.0)


# ---------------------------------------------------------------------------
# perceptual path length
# ---------------------------------------------------------------------------

@dataclass
class PPLConfig:
    space: str = "z"          # z | w
    sampling: str = "full"    # full: t ~ U(0,1); end: t = 0
    epsilon: float = 1e-4
    n_pairs: int = 128
    seed: int = 0
    batch: int = 64

    def __post_init__(self):
        if self.space not in ("z", "w"):
            raise ValueError(f"ppl space must be z or w, got {self.space!r}")
        if self.sampling not in ("full", "end"):
            raise ValueError(f"ppl sampling must be full or end, got {self.sampling!r}")
        if self.epsilon <= 0:
            raise ValueError(f"ppl epsilon must be > 0, got {self.epsilon}")
        if self.n_pairs < 1:
            raise ValueError(f"ppl n_pairs must be >= 1, got {self.n_pairs}")


def ppl_values(probe, embedder, cfg: PPLConfig) -> np.ndarray:
    """Per-pair squared embedding distances scaled by 1/epsilon^2.

    Z-space paths interpolate spherically before the mapping network;
    W-space paths interpolate linearly after it. Noise is held fixed within
    each pair.
    """
    z_seq, noise_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    rng = np.random.default_rng(z_seq)
    noise_rng = np.random.default_rng(noise_seq)
    eps = cfg.epsilon
    values = np.empty(cfg.n_pairs, np.float64)
    done = 0
    while done < cfg.n_pairs:
        m = min(cfg.batch, cfg.n_pairs - done)
        z0 = probe.sample_z(m, rng)
        z1 = probe.sample_z(m, rng)
        t = rng.uniform(0.0, 1.0, size=m) if cfg.sampling == "full" else np.zeros(m)
        if cfg.space == "z":
            e0 = probe.map_w(slerp(z0, z1, t))
            e1 = probe.map_w(slerp(z0, z1, t + eps))
        else:
            w0, w1 = probe.map_w(z0), probe.map_w(z1)
            e0 = lerp(w0, w1, t)
            e1 = lerp(w0, w1, t + eps)
        noise_seed = int(noise_rng.integers(2 ** 31))
        f0 = embedder(probe.synthesize(e0, noise_seed))
        f1 = embedder(probe.synthesize(e1, noise_seed))
        values[done:done + m] = np.sum((f0 - f1) ** 2, axis=1) / (eps * eps)
        done += m
    return values


def ppl(probe, embedder, cfg: PPLConfig) -> float:
    """Mean of the per-pair path-length values (see ``ppl_values``)."""
    return float(ppl_values(probe, embedder, cfg).mean())


# ---------------------------------------------------------------------------
# linear separability
# ---------------------------------------------------------------------------

def conditional_entropy(x_labels: np.ndarray, y_labels: np.ndarray) -> float:
    """H(Y | X) in nats from two binary label vectors."""
    x_labels = np.asarray(x_labels, np.int64)
    y_labels = np.asarray(y_labels, np.int64)
    n = x_labels.shape[0]
    if n == 0:
        raise ValueError("conditional_entropy: empty labels")
    h = 0.0
    for xv in (0, 1):
        mask = x_labels == xv
        nx = int(mask.sum())
        if nx == 0:
            continue
        for yv in (0, 1):
            nxy = int((y_labels[mask] == yv).sum())
            if nxy == 0:
                continue
            p_joint = nxy / n
            p_cond = nxy / nx
            h -= p_joint * np.log(p_cond)
    return h


def _fit_logistic(x: np.ndarray, y: np.ndarray, steps: int, lr: float = 0.5):
    """Full-batch logistic regression; returns (weights, bias, normalizer)."""
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd == 0] = 1.0
    xs = (x - mu) / sd
    w = np.zeros(x.shape[1], np.float64)
    b = 0.0
    target = y.astype(np.float64)
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-(xs @ w + b)))
        err = p - target
        w -= lr * (xs.T @ err) / len(y)
        b -= lr * float(err.mean())
    return w, b, (mu, sd)


def _predict_logistic(x, w, b, norm):
    mu, sd = norm
    return (((x - mu) / sd) @ w + b > 0).astype(np.int64)


@dataclass
class SeparabilityConfig:
    space: str = "z"
    n_samples: int = 2000
    keep_fraction: float = 0.5
    train_steps: int = 300
    seed: int = 0
    batch: int = 128

    def __post_init__(self):
        if self.space not in ("z", "w"):
            raise ValueError(f"separability space must be z or w, got {self.space!r}")
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ValueError(f"keep_fraction must be in (0, 1], got {self.keep_fraction}")
        if self.n_samples < 4:
            raise ValueError(f"n_samples must be >= 4, got {self.n_samples}")


@dataclass
class SeparabilityResult:
    score: float
    per_attribute: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)


def linear_separability(probe, oracles, cfg: SeparabilityConfig) -> SeparabilityResult:
    """exp of the summed conditional entropies H(oracle | linear classifier).

    Generated samples are labeled by each attribute oracle, the most
    confident ``keep_fraction`` retained, and a linear classifier fitted on
    the latent (z or w) for half of them. H(Y|X) is measured on the held-out
    half; 1.0 means perfectly separable. Attributes left with a single class
    after filtering are skipped and reported.
    """
    ss = np.random.SeedSequence(cfg.seed)
    z_seq, noise_seq, split_seq = ss.spawn(3)
    z_rng = np.random.default_rng(z_seq)
    noise_rng = np.random.default_rng(noise_seq)

    z = probe.sample_z(cfg.n_samples, z_rng)
    w = probe.map_w(z)
    latents = (z if cfg.space == "z" else w).astype(np.float64)

    labels = {}
    confs = {}
    for oracle in oracles:
        labels[oracle.name] = np.empty(cfg.n_samples, np.int64)
        confs[oracle.name] = np.empty(cfg.n_samples, np.float64)
    done = 0
    while done < cfg.n_samples:
        m = min(cfg.batch, cfg.n_samples - done)
        imgs = probe.synthesize(w[done:done + m], int(noise_rng.integers(2 ** 31)))
        for oracle in oracles:
            lab, conf = oracle(imgs)
            labels[oracle.name][done:done + m] = lab
            confs[oracle.name][done:done + m] = conf
        done += m

    result = SeparabilityResult(score=1.0)
    split_seqs = split_seq.spawn(len(oracles))
    total_h = 0.0
    for i, oracle in enumerate(oracles):
        lab = labels[oracle.name]
        conf = confs[oracle.name]
        keep_n = max(2, int(round(cfg.n_samples * cfg.keep_fraction)))
        order = np.argsort(-conf, kind="stable")[:keep_n]
        kept_x = latents[order]
        kept_y = lab[order]
        if kept_y.min() == kept_y.max():
            result.skipped.append(oracle.name)
            log.info("separability: attribute %s has a single class after "
                     "filtering; skipped", oracle.name)
            continue
        perm = np.random.default_rng(split_seqs[i]).permutation(keep_n)
        half = keep_n // 2
        tr, te = perm[:half], perm[half:]
        if kept_y[tr].min() == kept_y[tr].max() or kept_y[te].min() == kept_y[te].max():
            result.skipped.append(oracle.name)
            continue
        wgt, bias, norm = _fit_logistic(kept_x[tr], kept_y[tr], cfg.train_steps)
        pred = _predict_logistic(kept_x[te], wgt, bias, norm)
        h = conditional_entropy(pred, kept_y[te])
        result.per_attribute[oracle.name] = h
        total_h += h
    result.score = float(np.exp(total_h))
    return result
