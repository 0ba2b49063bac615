"""Discretised Q-Wiener noise as per-mode Brownian increments.

Each path owns an independent counter-based stream. The Philox key for a
path is the pair ``(splitmix64(master_seed), path_index)``: distinct path
indices give distinct keys, so streams never overlap, and generation is a
pure function of ``(master_seed, path_index)`` regardless of which worker
runs it or in which order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .spectral import SpectralModel

_MASK64 = (1 << 64) - 1
_HEADER = struct.Struct("<4sIIdQI")
_MAGIC = b"NGR1"


def splitmix64(value: int) -> int:
    z = (value + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def path_stream(master_seed: int, path_index: int) -> np.random.Generator:
    """Generator for one path: Philox keyed by the mixed seed and the path index."""
    if path_index < 0:
        raise ValueError("path_index must be nonnegative")
    key = np.array([splitmix64(int(master_seed) & _MASK64), int(path_index) & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True, eq=False)
class NoiseGrid:
    dt: float
    increments: np.ndarray
    master_seed: int = 0
    path_index: int = 0

    def __post_init__(self):
        inc = np.array(self.increments, dtype=float)
        if inc.ndim != 2 or min(inc.shape) < 1:
            raise ValueError(f"increments must be a nonempty M x N matrix, got shape {inc.shape}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        inc.flags.writeable = False
        object.__setattr__(self, "increments", inc)

    @property
    def n_steps(self) -> int:
        return self.increments.shape[0]

    @property
    def n_modes(self) -> int:
        return self.increments.shape[1]

    @property
    def identity(self) -> tuple[int, int]:
        return (self.master_seed, self.path_index)

    def __eq__(self, other):
        if not isinstance(other, NoiseGrid):
            return NotImplemented
        return (
            self.dt == other.dt
            and self.identity == other.identity
            and np.array_equal(self.increments, other.increments)
        )

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(_MAGIC, self.n_steps, self.n_modes, self.dt, self.master_seed & _MASK64, self.path_index)
        return head + self.increments.astype("<f8").tobytes(order="C")

    @classmethod
    def from_bytes(cls, blob: bytes) -> "NoiseGrid":
        magic, m, n, dt, seed, path = _HEADER.unpack_from(blob)
        if magic != _MAGIC:
            raise ValueError("not a noise grid dump")
        body = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size)
        if body.size != m * n:
            raise ValueError(f"expected {m * n} increments, found {body.size}")
        return cls(dt, body.reshape(m, n).astype(float), seed, path)

    def dump(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "NoiseGrid":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _check_dims(dt, n_steps, n_modes):
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if int(n_steps) != n_steps or n_steps < 1 or int(n_modes) != n_modes or n_modes < 1:
        raise ValueError(f"n_steps and n_modes must be positive integers, got {n_steps}, {n_modes}")


def generate(master_seed: int, path_index: int, dt: float, n_steps: int, n_modes: int) -> NoiseGrid:
    """Independent ``N(0, dt)`` increments ``dw[step, mode]`` for one path."""
    _check_dims(dt, n_steps, n_modes)
    z = path_stream(master_seed, path_index).standard_normal((int(n_steps), int(n_modes)))
    return NoiseGrid(dt, z * np.sqrt(dt), int(master_seed), int(path_index))


def generate_batch(master_seed: int, path_indices, dt: float, n_steps: int, n_modes: int) -> np.ndarray:
    """Stack of increments for several paths, shape ``(P, M, N)``.

    Row ``p`` is bit-identical to ``generate(master_seed, path_indices[p], ...)``.
    """
    _check_dims(dt, n_steps, n_modes)
    paths = list(path_indices)
    out = np.empty((len(paths), int(n_steps), int(n_modes)))
    for row, p in enumerate(paths):
        out[row] = path_stream(master_seed, p).standard_normal((int(n_steps), int(n_modes)))
    out *= np.sqrt(dt)
    return out


def bump(grid: NoiseGrid, step: int, mode: int, h: float) -> NoiseGrid:
    """Copy of ``grid`` with ``dw[step, mode]`` shifted by ``h``."""
    if not (0 <= step < grid.n_steps and 0 <= mode < grid.n_modes):
        raise IndexError(f"increment ({step}, {mode}) outside {grid.n_steps} x {grid.n_modes}")
    inc = grid.increments.copy()
    inc[step, mode] += h
    return NoiseGrid(grid.dt, inc, grid.master_seed, grid.path_index)


def noise_field(model: SpectralModel, grid: NoiseGrid, step: int) -> np.ndarray:
    """Mode coefficients of ``B dW_step``: ``weight_k * dw[step, k]``."""
    if grid.n_modes != model.size:
        raise ValueError(f"noise grid has {grid.n_modes} modes, model has {model.size}")
    if not 0 <= step < grid.n_steps:
        raise IndexError(f"step {step} outside 0..{grid.n_steps - 1}")
    return model.noise_weights * grid.increments[step]
