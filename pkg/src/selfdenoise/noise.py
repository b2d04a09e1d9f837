"""Feature corruption g(f) applied in front of each block, plus the RNG it draws from."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T

_KINDS = ("none", "gaussian", "dropout")


class Rng:
    """Counter-based random stream addressed by ``(seed, stream ids)``.

    Raw 64-bit words come from Philox keyed by the stream address, so the
    value at a given draw index depends only on the address. Uniforms and
    normals are derived here from those words rather than through numpy's
    samplers, which keeps draws stable across numpy releases.
    """

    def __init__(self, seed: int, stream: Sequence[int] = ()):
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        key = np.random.SeedSequence(self.seed, spawn_key=self.stream).generate_state(2, dtype=np.uint64)
        self._bitgen = np.random.Philox(key=key)

    def child(self, *ids: int) -> "Rng":
        return Rng(self.seed, self.stream + tuple(ids))

    def raw(self, n: int) -> np.ndarray:
        return self._bitgen.random_raw(n)

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1) with 53 random bits each."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def normal(self, n: int) -> np.ndarray:
        """n standard normals by Box-Muller."""
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        r = np.sqrt(-2.0 * np.log(1.0 - u[:m]))
        theta = 2.0 * np.pi * u[m:]
        return np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), in random order."""
        if k > n:
            raise ValueError(f"cannot choose {k} distinct items from {n}")
        return self.permutation(n)[:k]

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "none"
    spatial: bool = False
    sigma: float = 0.06
    p_drop: float = 0.1

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"noise kind must be one of {_KINDS}, got {self.kind!r}")
        if self.kind == "gaussian" and not self.sigma >= 0:
            raise ValueError(f"gaussian noise needs sigma >= 0, got {self.sigma}")
        if self.kind == "dropout" and not 0 < self.p_drop < 1:
            raise ValueError(f"dropout noise needs 0 < p_drop < 1, got {self.p_drop}")

    @property
    def active(self) -> bool:
        if self.kind == "gaussian":
            return self.sigma > 0
        return self.kind == "dropout"


NO_NOISE = NoiseSpec()


def sample_gaussian_channel(c: int, sigma: float, rng: Rng) -> np.ndarray:
    """One N(0, sigma^2) value per channel, to be copied over all spatial sites."""
    if c < 1:
        raise ValueError(f"channel count must be >= 1, got {c}")
    return (sigma * rng.normal(c)).astype(np.float32)


def draw_noise(shape, spec: NoiseSpec, rng: Rng) -> np.ndarray:
    """Noise array for an N x H x W x C map: additive values or a rescaled keep mask.

    Non-spatial draws have shape N x 1 x 1 x C; spatial draws the full map.
    Sample ``i`` always draws from ``rng.child(i)``.
    """
    n, h, w, c = shape
    per_sample = h * w * c if spec.spatial else c
    out_shape = (n, h, w, c) if spec.spatial else (n, 1, 1, c)
    out = np.empty((n, per_sample), dtype=np.float32)
    for i in range(n):
        sub = rng.child(i)
        if spec.kind == "gaussian":
            out[i] = sample_gaussian_channel(per_sample, spec.sigma, sub)
        else:
            keep = sub.uniform(per_sample) >= spec.p_drop
            out[i] = keep / (1.0 - spec.p_drop)
    return out.reshape(out_shape)


def apply_noise(f: T.Tensor, spec: NoiseSpec, rng: Rng, training: bool = True) -> T.Tensor:
    """Corrupt a feature map during training; identity otherwise.

    Gaussian noise is added, dropout multiplies by a keep mask scaled by
    1 / (1 - p_drop). The draws enter the tape as constants.
    """
    if f.data.ndim != 4:
        raise T.ShapeError(f"apply_noise: expected N x H x W x C input, got {f.shape}")
    if not training or not spec.active:
        return f
    noise = draw_noise(f.shape, spec, rng)
    if spec.kind == "gaussian":
        if spec.spatial:
            return T.add(f, T.Tensor(noise))
        return T.broadcast_add_channel(f, T.Tensor(noise.reshape(f.shape[0], f.shape[3])))
    return T.mul(f, T.Tensor(np.broadcast_to(noise, f.shape)))
