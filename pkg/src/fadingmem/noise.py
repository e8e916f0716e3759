"""Counter-based Gaussian increments keyed by (seed, trajectory, step, mode).

Each (seed, trajectory, mode) triple owns a Philox stream; step ``s`` reads the
two 64-bit words at positions ``2s, 2s+1`` and maps them to one standard
normal by Box-Muller. Any block of steps can therefore be regenerated
independently of how the run is chunked or scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MODE_BITS = 20
_TWO_PI = 2.0 * np.pi
_INV_2_53 = 1.0 / 9007199254740992.0


def _stream_key(seed: int, trajectory: int, mode: int) -> list[int]:
    if not 0 <= mode < (1 << MODE_BITS):
        raise ValueError("mode index out of range")
    if trajectory < 0 or trajectory >= (1 << (64 - MODE_BITS)):
        raise ValueError("trajectory index out of range")
    return [int(seed) & 0xFFFFFFFFFFFFFFFF, (int(trajectory) << MODE_BITS) | int(mode)]


def _raw_block(seed: int, trajectory: int, mode: int, start: int, count: int) -> np.ndarray:
    """2*count raw words for steps start..start+count-1."""
    first = 2 * start
    counter, offset = divmod(first, 4)
    gen = np.random.Philox(key=_stream_key(seed, trajectory, mode), counter=[counter, 0, 0, 0])
    raw = gen.random_raw(offset + 2 * count)
    return raw[offset:]


def _box_muller(raw: np.ndarray) -> np.ndarray:
    a = raw[..., 0::2]
    b = raw[..., 1::2]
    u1 = ((a >> np.uint64(11)).astype(np.float64) + 0.5) * _INV_2_53
    u2 = (b >> np.uint64(11)).astype(np.float64) * _INV_2_53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(_TWO_PI * u2)


def normal_increments(seed: int, trajectories, modes: int, start: int, count: int) -> np.ndarray:
    """Standard normals of shape ``(count, len(trajectories), modes)``."""
    trajectories = np.atleast_1d(np.asarray(trajectories, dtype=np.int64))
    raw = np.empty((trajectories.size, modes, 2 * count), dtype=np.uint64)
    for i, traj in enumerate(trajectories):
        for k in range(modes):
            raw[i, k] = _raw_block(seed, int(traj), k, start, count)
    z = _box_muller(raw)  # (B, n, count)
    return np.ascontiguousarray(np.transpose(z, (2, 0, 1)))


@dataclass
class NoisePath:
    """Blocked reader of keyed increments for a batch of trajectories.

    ``substeps`` > 1 aggregates that many consecutive fine increments into
    one coarse standard normal, so runs at ``dt = substeps * dt_fine`` see
    the same Brownian path as the fine run.
    """

    seed: int
    trajectories: np.ndarray
    modes: int
    substeps: int = 1
    block: int = 1024

    def __post_init__(self):
        self.trajectories = np.atleast_1d(np.asarray(self.trajectories, dtype=np.int64))
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        self._start = None
        self._buf = None

    def __call__(self, step: int) -> np.ndarray:
        """Increments for coarse step ``step``, shape ``(B, modes)``."""
        if self._buf is None or not self._start <= step < self._start + self._buf.shape[0]:
            self._fill(step)
        return self._buf[step - self._start]

    def _fill(self, step: int):
        s = self.substeps
        fine = normal_increments(self.seed, self.trajectories, self.modes, step * s, self.block * s)
        if s > 1:
            fine = fine.reshape(self.block, s, *fine.shape[1:]).sum(axis=1) / np.sqrt(s)
        self._start = step
        self._buf = fine
