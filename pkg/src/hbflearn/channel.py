"""Synthetic multi-user mm-Wave channels, noisy CSI, and dataset files.

Channels follow a clustered geometric model over a half-wavelength uniform
linear array: a few scattering clusters, each contributing several rays
with Laplacian angle offsets around the cluster center.  Realizations are
deterministic functions of ``(seed, sample_index)`` so generation order and
batching never change the data.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ParameterError

__all__ = [
    "ChannelModelParams",
    "ChannelBatch",
    "steering_vector",
    "generate_channel",
    "generate_batch",
    "add_pilot_noise",
    "write_dataset",
    "read_dataset",
]

_MAGIC = b"HBFD"
_VERSION = 1

# Azimuth cluster centers are drawn uniformly from this sector.
_CLUSTER_SECTOR_DEG = 60.0


@dataclass(frozen=True)
class ChannelModelParams:
    """Clustered-channel parameters (ULA, half-wavelength spacing)."""
    n_clusters: int = 4
    rays_per_cluster: int = 5
    angle_spread_deg: float = 7.5
    seed: int = 0

    def validate(self):
        if self.n_clusters < 1 or self.rays_per_cluster < 1:
            raise ParameterError("cluster and ray counts must be >= 1")
        if self.angle_spread_deg <= 0:
            raise ParameterError("angle spread must be positive")


@dataclass
class ChannelBatch:
    """A stack of channel matrices, shape (count, N_U, N_T), complex128."""
    h: np.ndarray

    @property
    def count(self) -> int:
        return self.h.shape[0]

    @property
    def n_users(self) -> int:
        return self.h.shape[1]

    @property
    def n_tx(self) -> int:
        return self.h.shape[2]


def steering_vector(phi: np.ndarray, n_t: int) -> np.ndarray:
    """ULA array response a(phi)_n = exp(j*pi*(n-1)*sin(phi)), phi in radians.

    ``phi`` may be any shape; the antenna axis is appended last.
    """
    n = np.arange(n_t)
    return np.exp(1j * np.pi * n * np.sin(np.asarray(phi))[..., None])


def _sample_rng(seed: int, sample_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, sample_index)))


def generate_channel(params: ChannelModelParams, n_t: int, n_u: int,
                     sample_index: int = 0) -> np.ndarray:
    """One channel realization H of shape (n_u, n_t), rows h_u^T.

    Each row is (1/sqrt(Nc*Nr)) * sum of per-ray complex gains times array
    responses, giving E[||h_u||^2] = n_t with the unnormalized steering
    convention used throughout this package.
    """
    params.validate()
    if n_t < 1 or n_u < 1:
        raise ParameterError("n_t and n_u must be >= 1")
    rng = _sample_rng(params.seed, sample_index)
    n_rays = params.n_clusters * params.rays_per_cluster
    # Per-cluster centers, Laplacian ray offsets around each center.
    centers = rng.uniform(-_CLUSTER_SECTOR_DEG, _CLUSTER_SECTOR_DEG,
                          size=(n_u, params.n_clusters))
    offsets = rng.laplace(0.0, params.angle_spread_deg / np.sqrt(2.0),
                          size=(n_u, params.n_clusters, params.rays_per_cluster))
    angles_deg = centers[:, :, None] + offsets
    alpha = (rng.standard_normal((n_u, params.n_clusters, params.rays_per_cluster))
             + 1j * rng.standard_normal((n_u, params.n_clusters, params.rays_per_cluster))) / np.sqrt(2.0)
    a = steering_vector(np.deg2rad(angles_deg), n_t)          # (n_u, Nc, Nr, n_t)
    h = (alpha[..., None] * a).sum(axis=(1, 2)) / np.sqrt(n_rays)
    return h


def generate_batch(params: ChannelModelParams, n_t: int, n_u: int, count: int) -> ChannelBatch:
    if count < 1:
        raise ParameterError("count must be >= 1")
    h = np.empty((count, n_u, n_t), dtype=np.complex128)
    for i in range(count):
        h[i] = generate_channel(params, n_t, n_u, sample_index=i)
    return ChannelBatch(h)


def add_pilot_noise(h: np.ndarray, noise_power: float, seed: int) -> np.ndarray:
    """Noisy CSI: conjugate-transpose of H plus circular complex Gaussian noise.

    ``h`` has user rows, shape (..., n_u, n_t); the result has shape
    (..., n_t, n_u) with per-entry noise variance ``noise_power``.
    """
    if noise_power < 0:
        raise ParameterError("pilot noise power must be >= 0")
    h_hat = np.conj(np.swapaxes(h, -1, -2)).copy()
    if noise_power > 0:
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        std = np.sqrt(noise_power / 2.0)
        noise = rng.standard_normal(h_hat.shape) + 1j * rng.standard_normal(h_hat.shape)
        h_hat += std * noise
    return h_hat


# ----------------------------------------------------------------------
# dataset file format (HBFD)
#
#   magic "HBFD" | version u32 | N_U u32 | N_T u32 | count u64   (little-endian)
#   then `count` records of N_U*N_T (re f32, im f32) pairs,
#   user-major then antenna.  Files store the clean H; pilot noise is
#   applied when samples are consumed.
# ----------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIIQ")


def write_dataset(path: str, batch: ChannelBatch) -> None:
    h = np.asarray(batch.h)
    if h.ndim != 3 or h.shape[0] == 0:
        raise ParameterError("dataset must contain at least one (n_u, n_t) channel")
    count, n_u, n_t = h.shape
    interleaved = np.empty((count, n_u, n_t, 2), dtype="<f4")
    interleaved[..., 0] = h.real
    interleaved[..., 1] = h.imag
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, _VERSION, n_u, n_t, count))
        f.write(interleaved.tobytes())
    os.replace(tmp, path)


def read_dataset(path: str) -> ChannelBatch:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than header")
    magic, version, n_u, n_t, count = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if n_u == 0 or n_t == 0 or count == 0:
        raise FormatError(f"{path}: degenerate dimensions ({n_u=}, {n_t=}, {count=})")
    expected = _HEADER.size + count * n_u * n_t * 8
    if len(raw) != expected:
        raise FormatError(f"{path}: size {len(raw)} does not match header ({expected} expected)")
    flat = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    pairs = flat.reshape(count, n_u, n_t, 2).astype(np.float64)
    return ChannelBatch(pairs[..., 0] + 1j * pairs[..., 1])
