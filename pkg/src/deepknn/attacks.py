"""Synthetic clean data and clean-label poison crafting in input space."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from .dataset import FeatureDataset, Space
from .extractor import ExtractorModel

__all__ = [
    "ClusterModel",
    "make_synthetic_clusters",
    "watermark",
    "project_simplex",
    "AttackConfig",
    "PoisonCraftResult",
    "CraftingError",
    "collision_objective",
    "polytope_objective",
    "craft_feature_collision",
    "craft_convex_polytope",
]

ARMIJO = 1e-4
SHRINK = 0.5
MIN_STEP = 1e-16


class CraftingError(RuntimeError):
    def __init__(self, message: str, trace: Sequence[float] = ()):
        super().__init__(message)
        self.trace = list(trace)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True, eq=False)
class ClusterModel:
    """Unit-variance isotropic Gaussian clusters around fixed means."""

    means: np.ndarray

    @classmethod
    def create(cls, C: int, d_in: int, separation: float, rng: np.random.Generator) -> "ClusterModel":
        if C < 2:
            raise ValueError("need at least 2 classes")
        if not separation > 0:
            raise ValueError(f"separation must be positive, got {separation}")
        if d_in >= C:
            # orthonormal directions: every pair of means exactly `separation` apart
            q, _ = np.linalg.qr(rng.normal(size=(d_in, C)))
            means = q.T * (separation / np.sqrt(2.0))
        else:
            means = rng.normal(size=(C, d_in))
            diff = means[:, None, :] - means[None, :, :]
            dist = np.sqrt((diff**2).sum(-1))
            closest = dist[~np.eye(C, dtype=bool)].min()
            means = means * (separation / max(closest, 1e-12))
        return cls(means)

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    def sample_class(self, label: int, count: int, rng: np.random.Generator) -> np.ndarray:
        return self.means[label] + rng.normal(size=(count, self.means.shape[1]))

    def sample(self, per_class: int, rng: np.random.Generator, start_id: int = 0) -> FeatureDataset:
        C = self.num_classes
        pts = np.vstack([self.sample_class(c, per_class, rng) for c in range(C)])
        labels = np.repeat(np.arange(C), per_class)
        ids = np.arange(start_id, start_id + C * per_class)
        return FeatureDataset(pts, labels, ids, Space.INPUT, C)


def make_synthetic_clusters(C: int, per_class: int, d_in: int, separation: float, seed: int) -> FeatureDataset:
    rng = np.random.default_rng(seed)
    return ClusterModel.create(C, d_in, separation, rng).sample(per_class, rng)


def watermark(x_t, x_b, gamma: float) -> np.ndarray:
    x_t = np.asarray(x_t, dtype=np.float64)
    x_b = np.asarray(x_b, dtype=np.float64)
    if x_t.shape != x_b.shape:
        raise ValueError(f"shape mismatch {x_t.shape} vs {x_b.shape}")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    return gamma * x_t + (1.0 - gamma) * x_b


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto ``{y >= 0, sum(y) = 1}`` (sort-based)."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.size + 1)
    rho = np.count_nonzero(u - css / ind > 0)
    theta = css[rho - 1] / rho
    return np.maximum(v - theta, 0.0)


# ---------------------------------------------------------------------------
# configuration and results


@dataclass(frozen=True)
class AttackConfig:
    gamma: float = 0.3
    beta: float = 0.1
    step_size: float = 1.0
    max_iters: int = 2000
    epsilon_inf: float = 0.1
    n_poisons: int = 50
    seed: int = 0
    tol: float = 1e-6

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.step_size <= 0 or self.max_iters < 1 or self.n_poisons < 1:
            raise ValueError("step_size, max_iters and n_poisons must be positive")


@dataclass
class PoisonCraftResult:
    method: str
    poisons: np.ndarray
    poison_features: np.ndarray
    objective_trace: list[float]
    converged: bool
    config: AttackConfig
    base_ids: tuple[int, ...] = ()
    target_id: int | None = None
    coefficients: np.ndarray | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def final_objective(self) -> float:
        return self.objective_trace[-1]

    def to_dict(self) -> dict[str, Any]:
        doc = {
            "method": self.method,
            "poisons": self.poisons.tolist(),
            "poison_features": self.poison_features.tolist(),
            "objective_trace": self.objective_trace,
            "converged": self.converged,
            "config": asdict(self.config),
            "base_ids": list(self.base_ids),
            "target_id": self.target_id,
            "extra": self.extra,
        }
        if self.coefficients is not None:
            doc["coefficients"] = self.coefficients.tolist()
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "PoisonCraftResult":
        coef = doc.get("coefficients")
        return cls(
            doc["method"],
            np.asarray(doc["poisons"], dtype=np.float64),
            np.asarray(doc["poison_features"], dtype=np.float64),
            list(doc["objective_trace"]),
            bool(doc["converged"]),
            AttackConfig(**doc["config"]),
            tuple(doc.get("base_ids", ())),
            doc.get("target_id"),
            None if coef is None else np.asarray(coef, dtype=np.float64),
            dict(doc.get("extra", {})),
        )


# ---------------------------------------------------------------------------
# feature collision


def collision_objective(model: ExtractorModel, x, feat_t, x_w, beta: float):
    """Per-row ``|phi(x) - phi(x_t)|^2 + beta |x - x_w|^2`` and the gradient of its
    feature term."""
    x = np.atleast_2d(x)
    r = model(x) - feat_t
    feat = (r * r).sum(1)
    pen = beta * ((x - x_w) ** 2).sum(1)
    return feat + pen, feat, 2.0 * model.vjp(x, r)


def _prox_penalty(y, x_w, step, beta):
    # argmin_z 0.5|z - y|^2 + step * beta * |z - x_w|^2
    s = (2.0 * step * beta)[:, None]
    return (y + s * x_w) / (1.0 + s)


def craft_feature_collision(
    model: ExtractorModel,
    x_t,
    bases,
    cfg: AttackConfig,
    base_ids: Sequence[int] = (),
    target_id: int | None = None,
) -> PoisonCraftResult:
    """Forward-backward splitting from the watermarked base.

    Each base is optimised independently (vectorised across rows) with its
    own backtracking step, so every row's objective is non-increasing; the
    recorded trace is the sum over rows.
    """
    if not cfg.beta > 0:
        raise ValueError("feature collision needs beta > 0")
    x_t = np.asarray(x_t, dtype=np.float64).reshape(-1)
    bases = np.atleast_2d(np.asarray(bases, dtype=np.float64))
    feat_t = model(x_t)
    x_w = watermark(np.broadcast_to(x_t, bases.shape), bases, cfg.gamma)
    x = x_w.copy()
    p = bases.shape[0]
    step = np.full(p, float(cfg.step_size))
    obj, feat, grad = collision_objective(model, x, feat_t, x_w, cfg.beta)
    init_feat = feat.copy()
    active = np.ones(p, dtype=bool)
    trace = [float(obj.sum())]

    for _ in range(cfg.max_iters):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        cand = x[rows].copy()
        cand_obj = np.empty(rows.size)
        pending = np.ones(rows.size, dtype=bool)
        s = np.minimum(step[rows] * 2.0, cfg.step_size)
        while pending.any():
            pr = np.flatnonzero(pending)
            r = rows[pr]
            y = x[r] - s[pr, None] * grad[r]
            z = _prox_penalty(y, x_w[r], s[pr], cfg.beta)
            o, _, _ = collision_objective(model, z, feat_t, x_w[r], cfg.beta)
            if not np.all(np.isfinite(o)):
                raise CraftingError("feature collision objective diverged", trace)
            ok = o <= obj[r] - (ARMIJO / s[pr]) * ((z - x[r]) ** 2).sum(1)
            cand[pr[ok]] = z[ok]
            cand_obj[pr[ok]] = o[ok]
            stuck = ~ok & (s[pr] * SHRINK < MIN_STEP)
            cand[pr[stuck]] = x[r[stuck]]
            cand_obj[pr[stuck]] = obj[r[stuck]]
            pending[pr[ok | stuck]] = False
            s[pr[~ok & ~stuck]] *= SHRINK
        step[rows] = s
        rel = (obj[rows] - cand_obj) / np.maximum(np.abs(obj[rows]), 1e-300)
        x[rows] = cand
        obj_new, feat_new, grad_new = collision_objective(model, cand, feat_t, x_w[rows], cfg.beta)
        obj[rows], feat[rows], grad[rows] = obj_new, feat_new, grad_new
        active[rows[rel < cfg.tol]] = False
        trace.append(float(obj.sum()))

    converged = not active.any()
    return PoisonCraftResult(
        "feature_collision",
        x,
        model(x),
        trace,
        converged,
        cfg,
        tuple(int(i) for i in base_ids),
        target_id,
        extra={
            "initial_feature_dist": np.sqrt(init_feat).tolist(),
            "final_feature_dist": np.sqrt(feat).tolist(),
        },
    )


# ---------------------------------------------------------------------------
# convex polytope surrogate


def polytope_objective(model: ExtractorModel, coef, x, feat_t):
    """``|phi(x_t) - sum_j c_j phi(x_j)|^2`` with gradients in ``c`` and ``x``."""
    feats = model(x)
    r = feat_t - coef @ feats
    value = float(r @ r)
    grad_c = -2.0 * feats @ r
    grad_x = model.vjp(x, -2.0 * coef[:, None] * r[None, :])
    return value, grad_c, grad_x


def craft_convex_polytope(
    model: ExtractorModel,
    x_t,
    bases,
    cfg: AttackConfig,
    base_ids: Sequence[int] = (),
    target_id: int | None = None,
) -> PoisonCraftResult:
    """Alternate a clipped step on the poisons (inside the l-infinity ball
    around their bases) with a projected step on the simplex weights.

    The weights are held uniform until the poison steps alone stop making
    progress, then both blocks alternate until the round-level relative
    decrease falls below ``cfg.tol``.
    """
    if not cfg.epsilon_inf > 0:
        raise ValueError("convex polytope needs epsilon_inf > 0")
    x_t = np.asarray(x_t, dtype=np.float64).reshape(-1)
    bases = np.atleast_2d(np.asarray(bases, dtype=np.float64))
    feat_t = model(x_t)
    lo, hi = bases - cfg.epsilon_inf, bases + cfg.epsilon_inf
    x = bases.copy()
    coef = np.full(bases.shape[0], 1.0 / bases.shape[0])
    steps = {"c": float(cfg.step_size), "x": float(cfg.step_size)}
    value, grad_c, grad_x = polytope_objective(model, coef, x, feat_t)
    trace = [value]
    converged = False
    # weights stay uniform until the poison-only phase stalls; alternating from
    # the start lets the weights collapse onto whichever poison is closest
    update_coef = False

    def backtrack(kind, current, grad, project, evaluate):
        s = min(steps[kind] * 2.0, cfg.step_size)
        while s >= MIN_STEP:
            cand = project(current - s * grad)
            v = evaluate(cand)
            if not np.isfinite(v):
                raise CraftingError("convex polytope objective diverged", trace)
            if v <= value - (ARMIJO / s) * float(((cand - current) ** 2).sum()):
                steps[kind] = s
                return cand, v
            s *= SHRINK
        return current, value

    for _ in range(cfg.max_iters):
        start = value
        x, value = backtrack(
            "x", x, grad_x, lambda z: np.clip(z, lo, hi), lambda z: polytope_objective(model, coef, z, feat_t)[0]
        )
        if update_coef:
            _, grad_c, _ = polytope_objective(model, coef, x, feat_t)
            coef, value = backtrack(
                "c", coef, grad_c, project_simplex, lambda c: polytope_objective(model, c, x, feat_t)[0]
            )
        value, grad_c, grad_x = polytope_objective(model, coef, x, feat_t)
        trace.append(value)
        if start - value < cfg.tol * max(start, 1e-300):
            if update_coef:
                converged = True
                break
            update_coef = True

    return PoisonCraftResult(
        "convex_polytope",
        x,
        model(x),
        trace,
        converged,
        cfg,
        tuple(int(i) for i in base_ids),
        target_id,
        coefficients=coef,
        extra={"residual": value},
    )
