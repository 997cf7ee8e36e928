"""Staged training pipeline: VAE pretraining, mixture init, base/dual/unified
optimization, plus checkpoint and training-log I/O.

Every stage is a pure function of (model, data, TrainConfig): all randomness
flows from numpy generators seeded by (config.seed, stage id), so two runs
with the same inputs produce bitwise-identical parameters.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .errors import (CheckpointError, ConfigError, InitializationError,
                     TrainingDivergence)
from .gaussmath import LOG_VAR_MIN
from .model import ModelState, build_model
from .neuralnet import AdamState, adam_step, merge_gaussian_grad, \
    split_gaussian_raw
from .objectives import elbo_base_grads, loss_dual_grads, loss_unified_grads
from .synthdata import SCENARIO_DIM, TrainingView

STAGES = ("base", "dual", "unified")
_STAGE_SEEDS = {"pretrain": 1, "init": 2, "base": 3, "dual": 4, "unified": 5}

CHECKPOINT_MAGIC = b"AVCK"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    n_actions: int = 12
    latent_dim: int = 3
    horizon: int = 30
    scenario_dim: int = SCENARIO_DIM
    hidden_width: int = 64
    hidden_layers: int = 2
    dual_shared: bool = True
    batch_size: int = 128
    learning_rate: float = 1e-3
    seed: int = 0
    pretrain_epochs: int = 30
    epochs: int = 60
    stage: str = "base"
    init_sample_count: int = 4096
    action_threshold: float = 0.05
    early_stop_tol: float = 1e-4
    early_stop_window: int = 20

    def __post_init__(self):
        if self.n_actions < 2:
            raise ConfigError("n_actions must be >= 2")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.horizon < 2 or self.init_sample_count < self.n_actions:
            raise ConfigError("bad horizon / init_sample_count")
        if not 0.0 <= self.action_threshold < 1.0:
            raise ConfigError("action_threshold must be in [0, 1)")

    @property
    def traj_dim(self) -> int:
        return 2 * self.horizon

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


def scenario_input_scales() -> np.ndarray:
    """Per-feature scaling bringing the raw scenario vector to O(1).

    Road curvature (~0.1/m) is amplified so turn-lane geometry is not
    drowned out by the metric-scale features.
    """
    return np.concatenate([
        [0.1, 0.1, 0.1],      # speed, history displacement
        [5.0],                 # road curvature
        np.ones(5),            # layout one-hot
        [0.3, 0.04],           # lane offset, lead gap
    ])


def build_from_config(config: TrainConfig) -> ModelState:
    rng = np.random.default_rng(config.seed)
    return build_model(
        config.n_actions, config.latent_dim, config.traj_dim,
        config.scenario_dim, hidden_width=config.hidden_width,
        hidden_layers=config.hidden_layers, dual_shared=config.dual_shared,
        rng=rng, encoder_input_scale=0.05,
        scenario_input_scale=scenario_input_scales()[:config.scenario_dim]
        if config.scenario_dim == SCENARIO_DIM else 1.0)


def _stage_rng(config: TrainConfig, stage: str) -> np.random.Generator:
    return np.random.default_rng([config.seed, _STAGE_SEEDS[stage]])


@dataclass
class EpochLog:
    epoch: int
    stage: str
    total: float
    recon_x: float
    recon_x_prime: float
    kl_y: float
    kl_z: float
    kl_z_prime: float


def write_training_log(logs, path) -> None:
    """Append epoch rows to a CSV log, writing the header once."""
    fresh = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(["epoch", "stage", "total", "recon_x",
                             "recon_x_prime", "kl_y", "kl_z", "kl_z_prime"])
        for log in logs:
            writer.writerow([log.epoch, log.stage, repr(log.total),
                             repr(log.recon_x), repr(log.recon_x_prime),
                             repr(log.kl_y), repr(log.kl_z),
                             repr(log.kl_z_prime)])


def _batches(rng: np.random.Generator, n: int, batch_size: int):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


# ---------------------------------------------------------------------------
# Stage 1: plain VAE pretraining of encoder + decoder.
# ---------------------------------------------------------------------------

def pretrain_vae(m: ModelState, data: TrainingView,
                 config: TrainConfig) -> list[EpochLog]:
    """Optimize encoder/decoder under the single-Gaussian-prior ELBO."""
    if len(data) == 0:
        raise ConfigError("empty dataset")
    params = {**m.encoder.named_params("encoder"),
              **m.decoder.named_params("decoder")}
    adam = AdamState(learning_rate=config.learning_rate)
    logs = []
    for epoch in range(config.pretrain_epochs):
        rng = np.random.default_rng([config.seed, _STAGE_SEEDS["pretrain"]])
        total = recon_sum = kl_sum = 0.0
        n_seen = 0
        for idx in _batches(rng, len(data), config.batch_size):
            X = data.x[idx]
            b = len(idx)
            raw, cache_e = m.encoder.forward_cache(X)
            mean, log_var, mask = split_gaussian_raw(raw)
            eps = rng.standard_normal(mean.shape)
            sigma = np.exp(0.5 * log_var)
            z = mean + sigma * eps
            xhat, cache_d = m.decoder.forward_cache(z)
            diff = X - xhat
            recon = (-0.5 * np.sum(diff * diff, axis=1)
                     - 0.5 * X.shape[1] * np.log(2.0 * np.pi))
            kl = 0.5 * np.sum(np.exp(log_var) + mean * mean
                              - 1.0 - log_var, axis=1)
            elbo = float(np.mean(recon - kl))
            if not np.isfinite(elbo):
                raise TrainingDivergence(
                    f"pretrain diverged at epoch {epoch}; last finite "
                    f"epoch {epoch - 1}")
            # Gradients of the negated (minimized) objective, batch-mean.
            d_xhat = -diff / b
            d_grads, d_z = m.decoder.backward(cache_d, d_xhat)
            d_mean = d_z + mean / b
            d_log_var = (d_z * eps * 0.5 * sigma
                         + 0.5 * (np.exp(log_var) - 1.0) / b)
            e_up = merge_gaussian_grad(d_mean, d_log_var, mask)
            e_grads, _ = m.encoder.backward(cache_e, e_up)
            grads = {**m.encoder.grads_to_dict("encoder", e_grads),
                     **m.decoder.grads_to_dict("decoder", d_grads)}
            adam_step(params, grads, adam)
            total += elbo * b
            recon_sum += float(np.sum(recon))
            kl_sum += float(np.sum(kl))
            n_seen += b
        logs.append(EpochLog(epoch, "pretrain", total / n_seen,
                             recon_sum / n_seen, 0.0, 0.0,
                             kl_sum / n_seen, 0.0))
    return logs


def reconstruction_ade(m: ModelState, data: TrainingView) -> float:
    """Mean per-waypoint displacement of mean-encode/decode round trips."""
    raw, _ = m.encoder.forward_cache(data.x)
    mean, _, _ = split_gaussian_raw(raw)
    xhat, _ = m.decoder.forward_cache(mean)
    diff = (data.x - xhat).reshape(len(data), -1, 2)
    return float(np.mean(np.hypot(diff[..., 0], diff[..., 1])))


# ---------------------------------------------------------------------------
# Stage 2: k-means mixture initialization in the pretrained latent space.
# ---------------------------------------------------------------------------

def _farthest_point_seeds(points: np.ndarray, k: int,
                          rng: np.random.Generator) -> np.ndarray:
    centers = [points[rng.integers(len(points))]]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for _ in range(k - 1):
        centers.append(points[int(np.argmax(d2))])
        d2 = np.minimum(d2, np.sum((points - centers[-1]) ** 2, axis=1))
    return np.array(centers)


def _lloyd(points: np.ndarray, centers: np.ndarray, iters: int = 50):
    for _ in range(iters):
        d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        assign = np.argmin(d2, axis=1)
        for k in range(len(centers)):
            member = points[assign == k]
            if len(member):
                centers[k] = member.mean(axis=0)
    d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    return centers, np.argmin(d2, axis=1)


def init_mixture(m: ModelState, data: TrainingView,
                 config: TrainConfig) -> ModelState:
    """Place mixture components at k-means centroids of encoded data."""
    rng = _stage_rng(config, "init")
    n = min(config.init_sample_count, len(data))
    idx = rng.choice(len(data), size=n, replace=False)
    raw, _ = m.encoder.forward_cache(data.x[idx])
    points, _, _ = split_gaussian_raw(raw)
    k = m.mixture.n_components
    centers = _farthest_point_seeds(points, k, rng)
    centers, assign = _lloyd(points, centers)
    counts = np.bincount(assign, minlength=k)
    if np.any(counts == 0):
        # Re-seed each empty cluster at the point farthest from every
        # centroid, then run Lloyd once more.
        for j in np.flatnonzero(counts == 0):
            d2 = np.min(np.sum(
                (points[:, None, :] - centers[None, :, :]) ** 2, axis=2),
                axis=1)
            centers[j] = points[int(np.argmax(d2))]
        centers, assign = _lloyd(points, centers)
        counts = np.bincount(assign, minlength=k)
        if np.any(counts == 0):
            raise InitializationError(
                f"{int(np.sum(counts == 0))} empty clusters after re-seed")
    m.mixture.means[...] = centers
    for j in range(k):
        var = points[assign == j].var(axis=0)
        m.mixture.log_vars[j] = np.log(np.maximum(var, 1e-2))
    np.clip(m.mixture.log_vars, LOG_VAR_MIN, None, out=m.mixture.log_vars)
    return m


# ---------------------------------------------------------------------------
# Stage 3: base / dual / unified optimization.
# ---------------------------------------------------------------------------

def _log_prior_rows(m: ModelState, S: np.ndarray) -> np.ndarray:
    logits, _ = m.classifier.forward_cache(S)
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def _monitor_kl_y(qy: np.ndarray, log_prior: np.ndarray) -> float:
    safe = np.where(qy > 0, qy, 1.0)
    return float(np.mean(np.sum(qy * (np.log(safe) - log_prior), axis=1)))


def _train_stage(m: ModelState, data: TrainingView, config: TrainConfig,
                 stage: str) -> list[EpochLog]:
    if len(data) == 0:
        raise ConfigError("empty dataset")
    k, d = m.mixture.n_components, m.mixture.dim
    params = m.named_params()
    adam = AdamState(learning_rate=config.learning_rate)
    logs: list[EpochLog] = []
    history: list[float] = []
    for epoch in range(config.epochs):
        # Fresh generator each epoch: identical parameters see identical
        # batches and noise, so a zero-lr run has a constant trace.
        rng = np.random.default_rng([config.seed, _STAGE_SEEDS[stage]])
        sums = np.zeros(6)
        n_seen = 0
        for idx in _batches(rng, len(data), config.batch_size):
            X, S = data.x[idx], data.s[idx]
            b = len(idx)
            # q_y from current parameters, held fixed within the batch.
            if stage == "unified":
                qy = m.qy_unified_batch(X, S)
                noise_z = rng.standard_normal((b, d))
                noise_k = rng.standard_normal((b, k, d))
                report, grads = loss_unified_grads(m, X, S, noise_z,
                                                   noise_k, qy=qy)
            elif stage == "dual":
                qy = m.qy_base_batch(X, S)
                noise_k = rng.standard_normal((b, k, d))
                report, grads = loss_dual_grads(m, X, S, noise_k, qy=qy)
                grads = {name: g for name, g in grads.items()
                         if ModelState.is_dual_block(name)}
            else:
                qy = m.qy_base_batch(X, S)
                noise_z = rng.standard_normal((b, d))
                report, grads = elbo_base_grads(m, X, S, noise_z, qy=qy)
                grads = {name: g for name, g in grads.items()
                         if not ModelState.is_dual_block(name)}
            if not np.isfinite(report.total):
                raise TrainingDivergence(
                    f"{stage} objective non-finite at epoch {epoch}")
            adam_step(params, {name: -g for name, g in grads.items()}, adam)
            kl_y = report.kl_y
            if stage == "dual":
                # Monitored but never differentiated in this stage.
                kl_y = _monitor_kl_y(qy, _log_prior_rows(m, S))
            sums += b * np.array([report.total, report.recon_x,
                                  report.recon_x_prime, kl_y,
                                  report.expected_kl_z,
                                  report.expected_kl_z_prime])
            n_seen += b
        means = sums / n_seen
        logs.append(EpochLog(epoch, stage, *(float(v) for v in means)))
        history.append(float(means[0]))
        if _should_stop(history, config):
            break
    return logs


def _smoothed(history: list[float], window: int = 10) -> float:
    return float(np.mean(history[-window:]))


def _should_stop(history: list[float], config: TrainConfig) -> bool:
    w = config.early_stop_window
    if len(history) <= w:
        return False
    now = _smoothed(history)
    then = _smoothed(history[:-w])
    return now - then < config.early_stop_tol


def train_base(m: ModelState, data: TrainingView,
               config: TrainConfig) -> list[EpochLog]:
    """Joint optimization of encoder, decoder, classifier, and mixture."""
    return _train_stage(m, data, config, "base")


def train_dual(m: ModelState, data: TrainingView,
               config: TrainConfig) -> list[EpochLog]:
    """Scenario-conditioned encoder training; all base blocks frozen."""
    return _train_stage(m, data, config, "dual")


def train_unified(m: ModelState, data: TrainingView,
                  config: TrainConfig) -> list[EpochLog]:
    """Joint optimization of every block under the unified objective."""
    return _train_stage(m, data, config, "unified")


# ---------------------------------------------------------------------------
# Checkpoints: versioned little-endian binary with a trailing sha256.
# ---------------------------------------------------------------------------

def _pack_bytes(chunks: list[bytes], payload: bytes):
    chunks.append(struct.pack("<I", len(payload)))
    chunks.append(payload)


def save_checkpoint(m: ModelState, config: TrainConfig, stage: str, path,
                    rng: np.random.Generator | None = None) -> None:
    chunks: list[bytes] = [CHECKPOINT_MAGIC,
                           struct.pack("<I", CHECKPOINT_VERSION)]
    _pack_bytes(chunks, stage.encode())
    _pack_bytes(chunks, json.dumps(asdict(config), sort_keys=True).encode())
    _pack_bytes(chunks, bytes.fromhex(config.digest()))
    rng_blob = b"" if rng is None else json.dumps(
        rng.bit_generator.state, default=int).encode()
    _pack_bytes(chunks, rng_blob)
    params = m.named_params()
    chunks.append(struct.pack("<I", len(params)))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        _pack_bytes(chunks, name.encode())
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    body = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(hashlib.sha256(body).digest())


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def sized(self) -> bytes:
        return self.take(self.u32())


def load_checkpoint(path, expected_config: TrainConfig | None = None):
    """Returns (model, config, stage, rng_or_None); bitwise round trip."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 40:
        raise CheckpointError(f"{path}: truncated checkpoint")
    body, checksum = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != checksum:
        raise CheckpointError(f"{path}: checksum mismatch")
    r = _Reader(body, path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version}")
    stage = r.sized().decode()
    try:
        config = TrainConfig(**json.loads(r.sized()))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad embedded config: {exc}") from exc
    digest = r.sized().hex()
    if digest != config.digest():
        raise CheckpointError(f"{path}: config digest mismatch")
    if expected_config is not None and \
            expected_config.digest() != config.digest():
        raise CheckpointError(
            f"{path}: checkpoint config does not match the requested one")
    rng_blob = r.sized()
    rng = None
    if rng_blob:
        rng = np.random.default_rng()
        rng.bit_generator.state = json.loads(rng_blob)
    m = build_from_config(config)
    params = m.named_params()
    n_blocks = r.u32()
    seen = set()
    for _ in range(n_blocks):
        name = r.sized().decode()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}Q", r.take(8 * ndim))
        data = np.frombuffer(r.take(8 * int(np.prod(shape, dtype=np.int64))),
                             dtype="<f8").reshape(shape)
        if name not in params or params[name].shape != data.shape:
            raise CheckpointError(f"{path}: unexpected block {name!r}")
        params[name][...] = data
        seen.add(name)
    if seen != set(params):
        raise CheckpointError(f"{path}: missing parameter blocks")
    return m, config, stage, rng
