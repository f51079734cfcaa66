"""Dense numeric substrate shared by every other module.

Matrices are plain 2-D float64 C-order numpy arrays (row-major, no
broadcasting surprises at the API level). Randomness goes through `Rng`,
a counter-based Philox generator that can be split into independent,
reproducible child streams so data generation, parameter init and batch
cropping never perturb each other's draws.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Shapes of the operands do not line up."""


def as_matrix(a, rows=None, cols=None) -> np.ndarray:
    """Coerce to a 2-D float64 C-order array, optionally checking the shape."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if rows is not None and m.shape[0] != rows:
        raise DimensionError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise DimensionError(f"expected {cols} cols, got {m.shape[1]}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions differ ({a.shape[0]}x{a.shape[1]} by "
            f"{b.shape[0]}x{b.shape[1]})"
        )
    return a @ b


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction for stability.

    Every output row is non-negative and sums to 1 (within 1e-12) for any
    finite input, including entries of magnitude 1e3.
    """
    m = np.asarray(m, dtype=np.float64)
    z = m - m.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def log_sum_exp_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise log(sum(exp(.))), max-shifted."""
    m = np.asarray(m, dtype=np.float64)
    mx = m.max(axis=-1)
    return mx + np.log(np.exp(m - mx[..., None]).sum(axis=-1))


class Rng:
    """Seeded, splittable, counter-based random stream (Philox).

    Identical seed (and split path) gives an identical draw sequence across
    runs. `split(stream)` derives an independent child stream
    deterministically, so sub-tasks can be reseeded without coupling.
    """

    def __init__(self, seed: int, _spawn_key: tuple = ()):
        self.seed = int(seed)
        self.spawn_key = tuple(_spawn_key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.spawn_key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def split(self, stream: int) -> "Rng":
        """Independent child stream number `stream` of this Rng."""
        return Rng(self.seed, self.spawn_key + (int(stream),))

    # Thin pass-throughs; kept narrow so every draw site is greppable.
    def normal(self, shape, mean=0.0, std=1.0) -> np.ndarray:
        return self._gen.normal(loc=mean, scale=std, size=shape).astype(np.float64)

    def uniform(self, shape, low=0.0, high=1.0) -> np.ndarray:
        return self._gen.uniform(low=low, high=high, size=shape).astype(np.float64)

    def integers(self, low, high) -> int:
        """One integer drawn uniformly from [low, high] inclusive."""
        return int(self._gen.integers(low, high + 1))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def state(self) -> dict:
        """JSON-serializable snapshot of the generator state."""
        st = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "spawn_key": list(self.spawn_key),
            "counter": [int(v) for v in st["state"]["counter"]],
            "key": [int(v) for v in st["state"]["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }


def rng_gaussian(rng: Rng, rows: int, cols: int, mean: float = 0.0,
                 std: float = 1.0) -> np.ndarray:
    """rows x cols matrix of N(mean, std^2) draws from `rng`."""
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    if std == 0:
        return np.full((rows, cols), float(mean))
    return rng.normal((rows, cols), mean=mean, std=std)


@dataclass
class Param:
    """A learnable value and its gradient accumulator, always shape-matched."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad = np.asarray(self.grad, dtype=np.float64)
        if self.grad.shape != self.value.shape:
            raise DimensionError(
                f"param {self.name}: grad shape {self.grad.shape} != "
                f"value shape {self.value.shape}"
            )

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0
