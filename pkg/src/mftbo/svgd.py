"""Particle inference over the shared kernel parameters.

A fixed-size set of particles approximates the posterior over the
surrogate's shared parameter vector. Within a task the particles follow
Stein variational gradient descent on the log evidence of the accumulated
observations plus a prior; between tasks the finishing particles are
distilled into a Gaussian kernel density estimate that becomes the next
task's prior, which is how knowledge moves across the task sequence.

Checkpoint format (little-endian, documented for external readers):

    bytes 0-7    magic ``b"MFBOENS\\x01"``
    bytes 8-11   uint32: JSON header length L
    bytes 12-..  UTF-8 JSON header with keys {format_version, n_particles,
                 dim, arch: {input_dim, hidden_width, feature_dim},
                 task_index, generation, payload_crc32}
    remainder    n_particles * dim float64 values, C order, one flattened
                 particle after another in ensemble order
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, replace

import numpy as np

from .gp import (FeatureMapConfig, KernelParams, TaskDataset,
                 grad_log_marginal_likelihood, init_params)

MAGIC = b"MFBOENS\x01"
FORMAT_VERSION = 1
KDE_BANDWIDTH_FLOOR = 1e-3


class CheckpointError(ValueError):
    """Corrupt or truncated ensemble checkpoint."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an incompatible format version."""


class SVGDStepError(RuntimeError):
    """Particle update produced non-finite values even at a halved step."""


@dataclass(frozen=True)
class SVGDConfig:
    """Update schedule for the particle system.

    ``stepsize`` is the base step; a caller may pass a per-call scale to
    implement decay schedules. ``rounds_per_fit`` update rounds run after
    each observation append.
    """

    stepsize: float = 0.01
    rounds_per_fit: int = 5
    median_bandwidth: bool = True
    grad_clip: float | None = 20.0
    freeze_fidelity_lengthscale: bool = False

    def __post_init__(self) -> None:
        if not self.stepsize > 0:
            raise ValueError("stepsize must be positive")
        if self.rounds_per_fit < 1:
            raise ValueError("rounds_per_fit must be >= 1")


@dataclass(frozen=True)
class ParticleEnsemble:
    """Immutable snapshot of the particle set."""

    particles: tuple[KernelParams, ...]
    generation: int = 0
    task_index: int = 1

    def __post_init__(self) -> None:
        if len(self.particles) < 1:
            raise ValueError("ensemble needs at least one particle")
        dims = {p.arch.dim for p in self.particles}
        if len(dims) != 1:
            raise ValueError("particles must share one architecture")

    @property
    def n_particles(self) -> int:
        return len(self.particles)

    @property
    def arch(self) -> FeatureMapConfig:
        return self.particles[0].arch

    def as_matrix(self) -> np.ndarray:
        return np.stack([p.flatten() for p in self.particles])

    @classmethod
    def from_matrix(cls, arch: FeatureMapConfig, matrix: np.ndarray,
                    generation: int, task_index: int) -> "ParticleEnsemble":
        parts = tuple(KernelParams.from_flat(arch, row) for row in matrix)
        return cls(parts, generation, task_index)


def init_ensemble(arch: FeatureMapConfig, n_particles: int, base_seed: int,
                  std: float = 0.5) -> ParticleEnsemble:
    """Fresh ensemble; particle v is seeded by base_seed + v for diversity."""
    parts = tuple(init_params(arch, base_seed + v, std=std)
                  for v in range(n_particles))
    return ParticleEnsemble(parts, generation=0, task_index=1)


# ---------------------------------------------------------------------------
# kernel on particles


def median_bandwidth_sq(matrix: np.ndarray) -> float:
    """h^2 = median pairwise squared distance / (2 log(V + 1)); 1.0 if degenerate."""
    v = matrix.shape[0]
    if v < 2:
        return 1.0
    d2 = np.sum((matrix[:, None, :] - matrix[None, :, :]) ** 2, axis=-1)
    iu = np.triu_indices(v, k=1)
    med = float(np.median(d2[iu]))
    if med <= 0.0:
        return 1.0
    return med / (2.0 * np.log(v + 1.0))


def particle_kernel(a: KernelParams, b: KernelParams, bandwidth: float) -> float:
    """exp(-||a - b||^2 / (2 h^2)) on the flattened parameter vectors."""
    da = a.flatten() - b.flatten()
    return float(np.exp(-np.dot(da, da) / (2.0 * bandwidth ** 2)))


def svgd_direction(matrix: np.ndarray, grads: np.ndarray,
                   h2: float | None = None) -> np.ndarray:
    """Kernel-smoothed ascent directions for a stack of particles.

    Omega_v = (1/V) sum_v' [ k(th_v', th_v) g_v' + grad_{th_v'} k(th_v', th_v) ]
    where the kernel gradient supplies the repulsive term. For a single
    particle this is exactly the raw gradient.
    """
    v = matrix.shape[0]
    if v == 1:
        return grads.copy()
    if h2 is None:
        h2 = median_bandwidth_sq(matrix)
    d2 = np.sum((matrix[:, None, :] - matrix[None, :, :]) ** 2, axis=-1)
    k = np.exp(-d2 / (2.0 * h2))
    # sum_v' grad_{th_v'} k(th_v', th_v) = (th_v * sum_v' k - K th) / h^2
    repulse = (matrix * k.sum(axis=1)[:, None] - k @ matrix) / h2
    return (k @ grads + repulse) / v


# ---------------------------------------------------------------------------
# priors


class PriorModel:
    """Log prior over flattened parameters: Gaussian KDE over anchor
    particles, or an isotropic standard normal when no anchors exist."""

    def __init__(self, anchors: np.ndarray | None, bandwidth: np.ndarray | None,
                 dim: int):
        if anchors is not None:
            anchors = np.asarray(anchors, dtype=float)
            bandwidth = np.asarray(bandwidth, dtype=float)
            if np.any(bandwidth <= 0):
                raise ValueError("bandwidth must be positive")
        self.anchors = anchors
        self.bandwidth = bandwidth
        self.dim = dim

    @classmethod
    def standard_normal(cls, dim: int) -> "PriorModel":
        return cls(None, None, dim)

    def _component_logs(self, theta: np.ndarray) -> np.ndarray:
        z = (theta[None, :] - self.anchors) / self.bandwidth[None, :]
        return (-0.5 * np.sum(z ** 2, axis=1)
                - np.sum(np.log(self.bandwidth))
                - 0.5 * self.dim * np.log(2 * np.pi))

    def log_density(self, theta: np.ndarray) -> float:
        theta = np.asarray(theta, dtype=float)
        if self.anchors is None:
            return float(-0.5 * np.dot(theta, theta)
                         - 0.5 * self.dim * np.log(2 * np.pi))
        logs = self._component_logs(theta)
        m = logs.max()
        return float(m + np.log(np.mean(np.exp(logs - m))))

    def grad_log_density(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if self.anchors is None:
            return -theta
        logs = self._component_logs(theta)
        w = np.exp(logs - logs.max())
        w /= w.sum()
        pulls = -(theta[None, :] - self.anchors) / self.bandwidth[None, :] ** 2
        return w @ pulls


def kde_prior_from(ens: ParticleEnsemble) -> PriorModel:
    """Distill an ensemble into a Gaussian KDE prior.

    Per-dimension Silverman bandwidth 1.06 std_d V^(-1/5), floored so a
    collapsed ensemble still yields a proper density.
    """
    matrix = ens.as_matrix()
    v = matrix.shape[0]
    std = matrix.std(axis=0)
    bandwidth = np.maximum(1.06 * std * v ** (-0.2), KDE_BANDWIDTH_FLOOR)
    return PriorModel(matrix.copy(), bandwidth, matrix.shape[1])


# ---------------------------------------------------------------------------
# SVGD steps on the surrogate evidence


def _target_grads(matrix: np.ndarray, arch: FeatureMapConfig,
                  data: TaskDataset | None, prior: PriorModel,
                  cfg: SVGDConfig) -> np.ndarray:
    grads = np.empty_like(matrix)
    for i, row in enumerate(matrix):
        g = prior.grad_log_density(row)
        if data is not None and len(data) > 0:
            g = g + grad_log_marginal_likelihood(
                KernelParams.from_flat(arch, row), data)
        grads[i] = g
    if cfg.grad_clip is not None:
        norms = np.linalg.norm(grads, axis=1, keepdims=True)
        scale = np.minimum(1.0, cfg.grad_clip / np.maximum(norms, 1e-30))
        grads = grads * scale
    if cfg.freeze_fidelity_lengthscale:
        grads[:, -1] = 0.0
    return grads


def svgd_step(ens: ParticleEnsemble, data: TaskDataset | None,
              prior: PriorModel, cfg: SVGDConfig,
              stepsize_scale: float = 1.0) -> ParticleEnsemble:
    """One SVGD round over the whole ensemble.

    Particles whose target gradient is non-finite contribute nothing to the
    kernel average and are not moved this round. If the applied update
    still produces non-finite positions, the step retries once at half the
    stepsize and then raises.
    """
    matrix = ens.as_matrix()
    grads = _target_grads(matrix, ens.arch, data, prior, cfg)
    bad = ~np.all(np.isfinite(grads), axis=1)
    if np.any(bad):
        grads[bad] = 0.0
    eta = cfg.stepsize * stepsize_scale
    for attempt in range(2):
        direction = svgd_direction(matrix, grads)
        if cfg.freeze_fidelity_lengthscale:
            direction[:, -1] = 0.0
        new_matrix = matrix + eta * direction
        new_matrix[bad] = matrix[bad]
        if np.all(np.isfinite(new_matrix)):
            return ParticleEnsemble.from_matrix(
                ens.arch, new_matrix, ens.generation + 1, ens.task_index)
        eta *= 0.5
    raise SVGDStepError("non-finite particle update at halved stepsize")


def update_posterior_particles(ens: ParticleEnsemble, data: TaskDataset | None,
                               prior: PriorModel, cfg: SVGDConfig,
                               stepsize_scale: float = 1.0) -> ParticleEnsemble:
    """Apply the configured number of SVGD rounds after an observation append."""
    for _ in range(cfg.rounds_per_fit):
        ens = svgd_step(ens, data, prior, cfg, stepsize_scale)
    return ens


def advance_task(ens: ParticleEnsemble, task_index: int) -> ParticleEnsemble:
    return replace(ens, task_index=task_index)


# ---------------------------------------------------------------------------
# persistence


def save_ensemble(ens: ParticleEnsemble, path) -> None:
    matrix = np.ascontiguousarray(ens.as_matrix(), dtype="<f8")
    payload = matrix.tobytes()
    arch = ens.arch
    header = {
        "format_version": FORMAT_VERSION,
        "n_particles": ens.n_particles,
        "dim": arch.dim,
        "arch": {"input_dim": arch.input_dim,
                 "hidden_width": arch.hidden_width,
                 "feature_dim": arch.feature_dim},
        "task_index": ens.task_index,
        "generation": ens.generation,
        "payload_crc32": zlib.crc32(payload),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_ensemble(path) -> ParticleEnsemble:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 4 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not an ensemble checkpoint")
    offset = len(MAGIC)
    hlen = struct.unpack("<I", raw[offset:offset + 4])[0]
    offset += 4
    if len(raw) < offset + hlen:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(raw[offset:offset + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("unreadable checkpoint header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint version {header.get('format_version')}")
    offset += hlen
    n, dim = header["n_particles"], header["dim"]
    payload = raw[offset:]
    if len(payload) != n * dim * 8:
        raise CheckpointError("truncated or padded checkpoint payload")
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise CheckpointError("checkpoint payload checksum mismatch")
    arch = FeatureMapConfig(**header["arch"])
    if arch.dim != dim:
        raise CheckpointError("architecture descriptor disagrees with payload")
    matrix = np.frombuffer(payload, dtype="<f8").reshape(n, dim)
    return ParticleEnsemble.from_matrix(arch, matrix.astype(float),
                                        header["generation"],
                                        header["task_index"])
