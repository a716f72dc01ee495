"""Adversarial min-max training: non-saturating logistic losses, a gradient
penalty on real samples, EMA generator weights, periodic snapshots, and
Fréchet-distance tracking for checkpoint selection.

The whole loop is a deterministic function of its configuration: every
random draw comes from seeded streams consumed in a fixed order, so two
runs with the same config produce bit-identical logs and snapshot files.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import tape as T
from .autodiff.optim import Adam
from .autodiff.tape import Tensor, as_tensor
from .errors import NumericalError, ShapeError
from .metrics import (
    GeneratorSource,
    PixelEmbedder,
    ShardReplaySource,
    fit_gaussian,
    frechet_distance,
    to_unit_images,
    train_classifier_embedder,
)
from .models import Discriminator, Generator, ModelConfig, style_mixing
from .snapshot import save_models

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def d_loss(real_scores, fake_scores) -> Tensor:
    """mean softplus(fake) + mean softplus(-real): the discriminator's side
    of the non-saturating logistic game (gradient penalty added separately)."""
    r, f = as_tensor(real_scores), as_tensor(fake_scores)
    if r.size == 0 or f.size == 0:
        raise ValueError("d_loss: empty batch")
    if r.shape != f.shape:
        raise ShapeError(f"d_loss: score shapes {r.shape} and {f.shape} differ")
    return T.add(T.mean_all(T.softplus(f)), T.mean_all(T.softplus(T.neg(r))))


def g_loss(fake_scores) -> Tensor:
    """mean softplus(-fake): the generator maximizes the fake logits."""
    f = as_tensor(fake_scores)
    if f.size == 0:
        raise ValueError("g_loss: empty batch")
    return T.mean_all(T.softplus(T.neg(f)))


def r1_penalty(score_fn, real_images, gamma: float) -> Tensor:
    """(gamma/2) * mean over the batch of ||d score / d image||^2 at real
    images. Differentiable in the scorer's parameters (double backward)."""
    if gamma < 0:
        raise ValueError(f"r1_penalty: gamma must be >= 0, got {gamma}")
    real = np.asarray(real_images)
    if gamma == 0.0:
        return Tensor(np.zeros((), real.dtype))
    x = Tensor(real.copy(), requires_grad=True)
    scores = score_fn(x)
    batch = scores.shape[0]
    gx = T.backward(T.sum_all(scores), params=[x], create_graph=True)[x]
    if not np.isfinite(gx.data).all():
        raise NumericalError("r1_penalty: non-finite input gradient")
    return T.mul_scalar(T.sum_all(T.square(gx)), gamma / (2.0 * batch))


# ---------------------------------------------------------------------------
# configuration and bookkeeping
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr_g: float = 2e-3
    lr_d: float = 2e-3
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    r1_gamma: float = 1.0
    mixing_prob: float = 0.9
    ema_decay: float = 0.995
    snapshot_interval: int = 500
    fid_samples: int = 1000
    embedder: str = "pixel"
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.r1_gamma < 0:
            raise ValueError(f"r1_gamma must be >= 0, got {self.r1_gamma}")
        if not 0.0 <= self.mixing_prob <= 1.0:
            raise ValueError(f"mixing_prob must be in [0, 1], got {self.mixing_prob}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must be in [0, 1), got {self.ema_decay}")
        if self.snapshot_interval < 1:
            raise ValueError(f"snapshot_interval must be >= 1, "
                             f"got {self.snapshot_interval}")
        if self.fid_samples < 2:
            raise ValueError(f"fid_samples must be >= 2, got {self.fid_samples}")


@dataclass
class SnapshotInfo:
    snapshot_id: str
    step: int
    path: Path


@dataclass
class CheckpointScore:
    snapshot_id: str
    step: int
    fid: float
    n: int

    def __post_init__(self):
        if self.fid < 0:
            raise ValueError(f"fid must be >= 0, got {self.fid}")


@dataclass
class TrainResult:
    snapshots: list[SnapshotInfo] = field(default_factory=list)
    scores: list[CheckpointScore] = field(default_factory=list)
    aborted: bool = False
    epochs: int = 0
    csv_path: Path | None = None


def select_best_checkpoint(scores) -> str:
    """Snapshot id with the minimal distance score; ties go to the later step."""
    scores = list(scores)
    if not scores:
        raise ValueError("select_best_checkpoint: empty score list")
    best = scores[0]
    for s in scores[1:]:
        if s.fid < best.fid or (s.fid == best.fid and s.step > best.step):
            best = s
    return best.snapshot_id


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def build_models(model_cfg: ModelConfig, seed: int):
    """Deterministically initialized generator/discriminator pair."""
    g_seed, d_seed = (int(s) for s in np.random.SeedSequence(seed).generate_state(2))
    return Generator(model_cfg, seed=g_seed), Discriminator(model_cfg, seed=d_seed)


class _BatchStream:
    """Endless normalized batches from a shard reader, wrapping per epoch."""

    def __init__(self, reader, batch_size: int):
        if len(reader) == 0:
            raise ValueError("training dataset is empty")
        self.reader = reader
        self.batch_size = batch_size
        self.epochs = 0
        self._iter = iter(reader)

    def next(self) -> np.ndarray:
        out = []
        while len(out) < self.batch_size:
            for rec in self._iter:
                out.append(rec)
                if len(out) == self.batch_size:
                    break
            else:
                self.epochs += 1
                log.info("dataset exhausted; wrapping (epoch %d complete)", self.epochs)
                self._iter = iter(self.reader)
        return to_unit_images(np.stack(out))


def _make_embedder(name: str):
    if name == "pixel":
        return PixelEmbedder()
    if name == "classifier":
        raise ValueError("classifier embedder needs labeled data; train it via "
                         "metrics.train_classifier_embedder and pass it to eval")
    raise ValueError(f"unknown embedder {name!r}")


def train_loop(reader, model_cfg: ModelConfig, cfg: TrainConfig,
               run_dir) -> TrainResult:
    """Alternate one discriminator and one generator step; snapshot (and
    score by Fréchet distance on the EMA weights) every interval."""
    run_dir = Path(run_dir)
    (run_dir / "snapshots").mkdir(parents=True, exist_ok=True)
    (run_dir / "logs").mkdir(parents=True, exist_ok=True)

    if reader.width != model_cfg.resolution or reader.height != model_cfg.resolution:
        raise ShapeError(f"dataset records are {reader.width}x{reader.height} but "
                         f"the model resolution is {model_cfg.resolution}")

    ss = np.random.SeedSequence(cfg.seed)
    init_seq, z_seq, noise_seq, mix_seq, fid_seq = ss.spawn(5)
    gen, disc = build_models(model_cfg, int(init_seq.generate_state(1)[0]))
    g_params = gen.params()
    d_params = disc.params()
    ema = {k: v.data.copy() for k, v in g_params.items()}

    adam_g = Adam(g_params, cfg.lr_g, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    adam_d = Adam(d_params, cfg.lr_d, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    z_rng = np.random.default_rng(z_seq)
    noise_rng = np.random.default_rng(noise_seq)
    mix_rng = np.random.default_rng(mix_seq)
    fid_seed = int(fid_seq.generate_state(1)[0])

    stream = _BatchStream(reader, cfg.batch_size)
    embedder = _make_embedder(cfg.embedder)
    real_stats = fit_gaussian(
        embedder(ShardReplaySource(reader).sample(cfg.fid_samples)))
    gen_eval = Generator(model_cfg, seed=0)

    layer_res = gen.layer_resolutions
    n_layers = gen.num_layers
    dz = model_cfg.z_dim

    def sample_styles():
        z1 = z_rng.standard_normal((cfg.batch_size, dz), dtype=np.float32)
        if n_layers >= 2 and mix_rng.random() < cfg.mixing_prob:
            z2 = z_rng.standard_normal((cfg.batch_size, dz), dtype=np.float32)
            k = int(mix_rng.integers(1, n_layers))
            return style_mixing(gen.mapping(z1), gen.mapping(z2), k, n_layers)
        w = gen.mapping(z1)
        return [w] * n_layers

    def sample_noises():
        return [noise_rng.standard_normal((cfg.batch_size, 1, r, r), dtype=np.float32)
                for r in layer_res]

    def score_fid() -> float:
        gen_eval.set_arrays(ema)
        fake = GeneratorSource(gen_eval, batch=min(64, cfg.fid_samples)).sample(
            cfg.fid_samples, fid_seed)
        return frechet_distance(fit_gaussian(embedder(fake)), real_stats)

    result = TrainResult()
    csv_path = run_dir / "logs" / "train.csv"
    result.csv_path = csv_path

    def take_snapshot(step: int):
        snap_id = f"step-{step:06d}"
        path = run_dir / "snapshots" / f"{snap_id}.sgfw1"
        rng_state = {"z": z_rng.bit_generator.state,
                     "noise": noise_rng.bit_generator.state,
                     "mix": mix_rng.bit_generator.state}
        save_models(path, model_cfg, step, gen, ema, disc, rng_state=rng_state)
        fid_value = score_fid()
        result.snapshots.append(SnapshotInfo(snap_id, step, path))
        result.scores.append(CheckpointScore(snap_id, step, fid_value,
                                             cfg.fid_samples))
        return fid_value

    with open(csv_path, "w", encoding="utf-8") as csv:
        csv.write("step,loss_d,loss_g,r1,fid\n")
        for step in range(1, cfg.steps + 1):
            try:
                # --- discriminator step
                real = stream.next()
                with T.no_grad():
                    fake = gen.synthesis(sample_styles(), sample_noises())
                scores_real = disc(Tensor(real))
                scores_fake = disc(fake)
                loss_d = d_loss(scores_real, scores_fake)
                if cfg.r1_gamma > 0:
                    penalty = r1_penalty(disc, real, cfg.r1_gamma)
                    total_d = T.add(loss_d, penalty)
                else:
                    penalty = Tensor(np.zeros((), np.float32))
                    total_d = loss_d
                ld = float(loss_d.data)
                pen = float(penalty.data)
                if not (np.isfinite(ld) and np.isfinite(pen)):
                    raise NumericalError(f"step {step}: non-finite discriminator loss")
                adam_d.step(T.backward(total_d, params=list(d_params.values())))

                # --- generator step
                fake = gen.synthesis(sample_styles(), sample_noises())
                with T.frozen(d_params.values()):
                    scores = disc(fake)
                loss_g = g_loss(scores)
                lg = float(loss_g.data)
                if not np.isfinite(lg):
                    raise NumericalError(f"step {step}: non-finite generator loss")
                adam_g.step(T.backward(loss_g, params=list(g_params.values())))

                if cfg.ema_decay == 0.0:
                    for k, p in g_params.items():
                        ema[k] = p.data.copy()
                else:
                    for k, p in g_params.items():
                        ema[k] = cfg.ema_decay * ema[k] + (1.0 - cfg.ema_decay) * p.data
            except NumericalError as exc:
                log.error("aborting at step %d: %s (last good snapshot retained)",
                          step, exc)
                result.aborted = True
                break

            fid_cell = ""
            if step % cfg.snapshot_interval == 0 or step == cfg.steps:
                fid_cell = f"{take_snapshot(step):.8g}"
            csv.write(f"{step},{ld:.8g},{lg:.8g},{pen:.8g},{fid_cell}\n")

    result.epochs = stream.epochs
    return result
