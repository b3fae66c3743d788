"""Synthetic classification tasks standing in for an image benchmark.

One ``SeedSequence(seed)`` spawns three streams (task parameters, train
draws, test draws), so train and test never share samples.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from scripts.errors import ShapeError
from scripts.settings import TaskConfig
from scripts.tensor import Tensor

logger = logging.getLogger(__name__)

GENERATORS = ("gaussian_blobs", "random_teacher", "random_labels", "sign_first")
SIGN_FIRST_NOISE = 0.1


def _balanced_labels(rng: np.random.Generator, n: int, num_classes: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % num_classes)


@dataclass
class SyntheticTask:
    generator: str
    input_shape: Tuple[int, ...]
    num_classes: int
    n_train: int
    n_test: int
    seed: int = 0
    center_scale: float = 0.6
    x_train: np.ndarray = field(default=None, repr=False)
    y_train: np.ndarray = field(default=None, repr=False)
    x_test: np.ndarray = field(default=None, repr=False)
    y_test: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown task generator {self.generator!r}")
        if self.generator == "sign_first":
            self.num_classes = 2
        if self.num_classes < 2 or self.n_train < 1 or self.n_test < 1:
            raise ShapeError("synthetic_task", (self.num_classes, self.n_train, self.n_test))
        if self.x_train is None:
            self._generate()

    def _generate(self):
        param_seq, train_seq, test_seq = np.random.SeedSequence(self.seed % (1 << 64)).spawn(3)
        param_rng = np.random.default_rng(param_seq)
        dim = int(np.prod(self.input_shape))

        if self.generator == "gaussian_blobs":
            # one offset per channel, constant over space, so a pooled head can read it
            channels = self.input_shape[0]
            centers = param_rng.normal(0.0, 1.0, size=(self.num_classes, channels))
            centers *= self.center_scale / np.linalg.norm(centers, axis=1, keepdims=True)
            centers = np.broadcast_to(
                centers.reshape((self.num_classes, channels) + (1,) * (len(self.input_shape) - 1)),
                (self.num_classes,) + tuple(self.input_shape),
            ).reshape(self.num_classes, dim)

            def draw(rng, n):
                y = _balanced_labels(rng, n, self.num_classes)
                return centers[y] + rng.normal(size=(n, dim)), y

        elif self.generator == "random_teacher":
            projection = param_rng.normal(size=dim) / np.sqrt(dim)
            # bin edges from a reference sample so train and test use the same thresholds
            reference = param_rng.normal(size=(4096, dim)) @ projection
            edges = np.quantile(reference, np.linspace(0, 1, self.num_classes + 1)[1:-1])

            def draw(rng, n):
                x = rng.normal(size=(n, dim))
                return x, np.searchsorted(edges, x @ projection)

        elif self.generator == "random_labels":
            def draw(rng, n):
                return rng.normal(size=(n, dim)), _balanced_labels(rng, n, self.num_classes)

        else:
            # channel values are near-constant across space so pooled heads can read them
            channels = self.input_shape[0]

            def draw(rng, n):
                z = rng.normal(size=(n, channels) + (1,) * (len(self.input_shape) - 1))
                x = np.broadcast_to(z, (n,) + tuple(self.input_shape)) + SIGN_FIRST_NOISE * rng.normal(
                    size=(n,) + tuple(self.input_shape))
                x = x.reshape(n, dim)
                return x, (x[:, 0] > 0).astype(np.int64)

        self.x_train, self.y_train = draw(np.random.default_rng(train_seq), self.n_train)
        self.x_test, self.y_test = draw(np.random.default_rng(test_seq), self.n_test)
        self.x_train = self.x_train.reshape((self.n_train,) + tuple(self.input_shape))
        self.x_test = self.x_test.reshape((self.n_test,) + tuple(self.input_shape))
        self.y_train = np.asarray(self.y_train, dtype=np.int64)
        self.y_test = np.asarray(self.y_test, dtype=np.int64)
        logger.debug("generated %s task: %d train / %d test, %d classes",
                     self.generator, self.n_train, self.n_test, self.num_classes)

    @classmethod
    def from_config(cls, config: TaskConfig, input_shape: Optional[Tuple[int, ...]] = None,
                    num_classes: Optional[int] = None) -> "SyntheticTask":
        shape = input_shape or (config.input_channels, config.input_hw, config.input_hw)
        return cls(
            generator=config.generator,
            input_shape=tuple(shape),
            num_classes=num_classes or config.num_classes,
            n_train=config.n_train,
            n_test=config.n_test,
            seed=config.seed,
            center_scale=config.center_scale,
        )

    def batch(self, size: int, seed: int) -> Tuple[Tensor, np.ndarray]:
        """Deterministic training minibatch drawn without replacement."""
        if not 1 <= size <= self.n_train:
            raise ShapeError("batch", (size,), (self.n_train,))
        rng = np.random.default_rng([self.seed % (1 << 32), seed % (1 << 32)])
        idx = np.sort(rng.choice(self.n_train, size=size, replace=False))
        return Tensor(self.x_train[idx]), self.y_train[idx]


def random_labels(size: int, num_classes: int, seed: int, round_index: int = 0) -> np.ndarray:
    """Uniform labels for label-agnostic scoring; resampled per (seed, round)."""
    rng = np.random.default_rng([seed % (1 << 32), round_index])
    return rng.integers(0, num_classes, size=size)
