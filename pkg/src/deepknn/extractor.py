"""Frozen two-layer network used as a stand-in penultimate-layer feature map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import FeatureDataset, Space

__all__ = ["ExtractorModel", "make_extractor", "extract_features"]

LEAKY_SLOPE = 0.01


@dataclass(frozen=True, eq=False)
class ExtractorModel:
    """``phi(x) = act(x @ w1 + b1) @ w2 + b2`` applied row-wise."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    nonlinearity: str = "tanh"
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.nonlinearity not in ("tanh", "leaky_relu"):
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        for name in ("w1", "b1", "w2", "b2"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.w1.shape[1] != self.b1.shape[0] or self.w1.shape[1] != self.w2.shape[0]:
            raise ValueError("hidden dimensions disagree")
        if self.w2.shape[1] != self.b2.shape[0]:
            raise ValueError("feature dimensions disagree")

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def d_feat(self) -> int:
        return self.w2.shape[1]

    def _act(self, z: np.ndarray) -> np.ndarray:
        if self.nonlinearity == "tanh":
            return np.tanh(z)
        return np.where(z > 0, z, LEAKY_SLOPE * z)

    def _act_grad(self, z: np.ndarray) -> np.ndarray:
        if self.nonlinearity == "tanh":
            return 1.0 - np.tanh(z) ** 2
        return np.where(z > 0, 1.0, LEAKY_SLOPE)

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.d_in:
            raise ValueError(f"input dimension {x.shape[-1]} does not match extractor d_in={self.d_in}")
        return x

    def __call__(self, x) -> np.ndarray:
        x = self._check(x)
        return self._act(x @ self.w1 + self.b1) @ self.w2 + self.b2

    def vjp(self, x, cotangent) -> np.ndarray:
        """Gradient of ``sum(cotangent * phi(x))`` with respect to ``x``."""
        x = self._check(x)
        z = x @ self.w1 + self.b1
        return ((np.asarray(cotangent) @ self.w2.T) * self._act_grad(z)) @ self.w1.T

    def jacobian(self, x) -> np.ndarray:
        """``d_feat x d_in`` Jacobian at a single input."""
        x = self._check(x).reshape(-1)
        z = x @ self.w1 + self.b1
        return self.w2.T @ (self._act_grad(z)[:, None] * self.w1.T)


def make_extractor(
    d_in: int,
    d_feat: int,
    hidden: int | None = None,
    seed: int = 0,
    nonlinearity: str = "tanh",
    input_scale: float = 1.0,
) -> ExtractorModel:
    """Seeded Gaussian initialisation, variance-preserving per layer."""
    hidden = hidden or 2 * d_feat
    rng = np.random.default_rng(seed)
    w1 = rng.normal(0.0, input_scale / np.sqrt(d_in), size=(d_in, hidden))
    b1 = rng.normal(0.0, 0.1, size=hidden)
    w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, d_feat))
    b2 = np.zeros(d_feat)
    return ExtractorModel(w1, b1, w2, b2, nonlinearity, seed)


def extract_features(model: ExtractorModel, ds: FeatureDataset) -> FeatureDataset:
    if ds.dim != model.d_in:
        raise ValueError(f"dataset dimension {ds.dim} does not match extractor d_in={model.d_in}")
    feats = model(ds.points) if len(ds) else np.zeros((0, model.d_feat))
    return ds.with_points(feats, Space.FEATURE)
