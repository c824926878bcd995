"""MAP pose estimation against a prior map by Levenberg-Marquardt.

The cost is the sum of half squared Mahalanobis point-to-point residuals
between observed vertices (ego frame) mapped through the pose and their
prior counterparts (world frame). Laplace scales enter through their
moment-matched variances ``2 b**2``; the observation and prior variances of a
pair are added as independent noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from crowdmap.association import AssociationResult, Correspondence
from crowdmap.map_model import LaplaceScale, Pose2, VectorMap, rotation


class LocalizationError(RuntimeError):
    pass


class UnderConstrainedError(LocalizationError):
    pass


@dataclass(frozen=True)
class MixtureCov:
    """Diagonal 2x2 covariance of a residual.

    ``obs_var`` (ego axes) and ``prior_var`` (world axes) keep the two
    components so the solver can rotate the observation part with the
    current heading; ``var_x``/``var_y`` is their unrotated sum.
    """

    var_x: float
    var_y: float
    obs_var: tuple[float, float] | None = None
    prior_var: tuple[float, float] | None = None

    def __post_init__(self):
        if not (self.var_x > 0 and self.var_y > 0):
            raise ValueError("mixture variances must be positive")


def mixture_cov(obs_scale: LaplaceScale, prior_scale: LaplaceScale | None) -> MixtureCov:
    ov = obs_scale.variance
    pv = (0.0, 0.0) if prior_scale is None else prior_scale.variance
    return MixtureCov(ov[0] + pv[0], ov[1] + pv[1], ov, pv)


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 50
    lambda_init: float = 1e-3
    step_tol: float = 1e-8
    cost_tol: float = 1e-10
    huber_enabled: bool = False
    huber_delta: float = 2.0  # in Mahalanobis units
    rank_tol: float = 1e-12
    lambda_max: float = 1e12

    _KEYS = {
        "lm.max_iters": "max_iters",
        "lm.lambda_init": "lambda_init",
        "lm.step_tol": "step_tol",
        "lm.cost_tol": "cost_tol",
        "huber.enabled": "huber_enabled",
        "huber.delta": "huber_delta",
    }

    @classmethod
    def from_mapping(cls, data: dict) -> SolverConfig:
        """Accept dotted keys (``lm.max_iters``), nested dicts or field names."""
        flat: dict = {}

        def walk(prefix, d):
            for k, v in d.items():
                key = f"{prefix}.{k}" if prefix else k
                if isinstance(v, dict):
                    walk(key, v)
                else:
                    flat[key] = v

        walk("", data)
        names = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in flat.items():
            name = cls._KEYS.get(key, key)
            if name not in names:
                raise ValueError(f"unknown solver config key {key!r}")
            kwargs[name] = _coerce(value, getattr(cls, name))
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> SolverConfig:
        text = Path(path).read_text()
        if str(path).endswith(".json"):
            return cls.from_mapping(json.loads(text))
        data = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            data[key.strip()] = value.strip()
        return cls.from_mapping(data)


def _coerce(value, default):
    if isinstance(default, bool):
        if isinstance(value, str):
            return value.strip().lower() in ("1", "true", "yes", "on")
        return bool(value)
    if isinstance(default, int):
        return int(value)
    return float(value)


@dataclass
class SolveReport:
    pose: Pose2
    iterations: int
    final_cost: float
    converged: bool
    inlier_count: int
    initial_cost: float = 0.0
    covariance: np.ndarray | None = None
    cost_history: list = field(default_factory=list)


def residual(pose: Pose2, c: Correspondence) -> np.ndarray:
    """``R(yaw) p_obs + t - p_prior`` in xy."""
    p = np.asarray(c.obs_vertex.position[:2])
    q = np.asarray(c.prior_vertex.position[:2])
    return pose.rotation @ p + pose.translation - q


def residual_jacobian(pose: Pose2, c: Correspondence) -> np.ndarray:
    """2x3 derivative of :func:`residual` with respect to (x, y, yaw)."""
    return _jacobians(pose.yaw, np.asarray(c.obs_vertex.position[:2])[None])[0]


def _jacobians(yaw: float, p: np.ndarray) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    J = np.zeros((len(p), 2, 3))
    J[:, 0, 0] = 1.0
    J[:, 1, 1] = 1.0
    J[:, 0, 2] = -s * p[:, 0] - c * p[:, 1]
    J[:, 1, 2] = c * p[:, 0] - s * p[:, 1]
    return J


class _Problem:
    def __init__(self, P, Q, obs_var, prior_var, huber_delta=None):
        self.P = np.asarray(P, dtype=float)
        self.Q = np.asarray(Q, dtype=float)
        self.obs_var = np.asarray(obs_var, dtype=float)
        self.prior_var = np.asarray(prior_var, dtype=float)
        self.huber_delta = huber_delta

    def information(self, yaw: float) -> np.ndarray:
        """Inverse of ``R diag(obs_var) R^T + diag(prior_var)`` per residual, in closed form."""
        c, s = math.cos(yaw), math.sin(yaw)
        vx, vy = self.obs_var[:, 0], self.obs_var[:, 1]
        a = c * c * vx + s * s * vy + self.prior_var[:, 0]
        d = s * s * vx + c * c * vy + self.prior_var[:, 1]
        b = c * s * (vx - vy)
        det = a * d - b * b
        W = np.empty((len(a), 2, 2))
        W[:, 0, 0] = d / det
        W[:, 1, 1] = a / det
        W[:, 0, 1] = W[:, 1, 0] = -b / det
        return W

    def residuals(self, x: np.ndarray) -> np.ndarray:
        return self.P @ rotation(x[2]).T + x[:2] - self.Q

    def _robust(self, m2: np.ndarray):
        """Per-residual cost and IRLS weight from squared Mahalanobis norms."""
        if self.huber_delta is None:
            return 0.5 * m2, np.ones_like(m2)
        d = self.huber_delta
        m = np.sqrt(m2)
        inlier = m <= d
        cost = np.where(inlier, 0.5 * m2, d * m - 0.5 * d * d)
        w = np.where(inlier, 1.0, d / np.maximum(m, 1e-300))
        return cost, w

    def cost(self, x: np.ndarray) -> float:
        r = self.residuals(x)
        W = self.information(x[2])
        m2 = np.einsum("ni,nij,nj->n", r, W, r)
        return float(self._robust(m2)[0].sum())

    def normal_equations(self, x: np.ndarray):
        r = self.residuals(x)
        W = self.information(x[2])
        m2 = np.einsum("ni,nij,nj->n", r, W, r)
        _, w = self._robust(m2)
        W = W * w[:, None, None]
        J = _jacobians(x[2], self.P)
        WJ = W @ J
        H = np.tensordot(J, WJ, axes=([0, 1], [0, 1]))
        g = np.tensordot(WJ, r, axes=([0, 1], [0, 1]))
        inliers = int(np.count_nonzero(w >= 1.0))
        return H, g, inliers


def solve_arrays(P, Q, obs_var, prior_var, init: Pose2, cfg: SolverConfig | None = None) -> SolveReport:
    """Levenberg-Marquardt over (x, y, yaw) on raw correspondence arrays.

    ``P`` are observed points (ego), ``Q`` prior points (world), both
    ``(N, 2)``; variances are per-axis ``(N, 2)``.
    """
    cfg = cfg or SolverConfig()
    if len(P) == 0:
        raise LocalizationError("no correspondences to localize against")
    prob = _Problem(P, Q, obs_var, prior_var, cfg.huber_delta if cfg.huber_enabled else None)

    x = init.as_array()
    H, g, inliers = prob.normal_equations(x)
    eig = np.linalg.eigvalsh(H)
    if not eig[-1] > 0 or eig[0] <= cfg.rank_tol * eig[-1]:
        raise UnderConstrainedError("normal matrix is rank deficient; pose is unobservable")

    cost = prob.cost(x)
    initial = cost
    history = [cost]
    lam = cfg.lambda_init
    iterations = 0
    converged = cost == 0.0
    while not converged and iterations < cfg.max_iters:
        accepted = False
        while lam <= cfg.lambda_max:
            A = H + lam * np.diag(np.diag(H))
            dx = np.linalg.solve(A, -g)
            trial = x + dx
            trial_cost = prob.cost(trial)
            if trial_cost <= cost:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            converged = True
            break
        decrease = cost - trial_cost
        x, cost = trial, trial_cost
        lam = max(lam / 10.0, 1e-15)
        iterations += 1
        history.append(cost)
        if np.linalg.norm(dx) < cfg.step_tol or decrease < cfg.cost_tol:
            converged = True
            break
        H, g, inliers = prob.normal_equations(x)

    H, _, inliers = prob.normal_equations(x)
    try:
        cov = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        cov = None
    return SolveReport(
        pose=Pose2.from_array(x),
        iterations=iterations,
        final_cost=cost,
        converged=converged,
        inlier_count=inliers,
        initial_cost=initial,
        covariance=cov,
        cost_history=history,
    )


def correspondence_arrays(corrs: Sequence[Correspondence]):
    P = np.array([c.obs_vertex.position[:2] for c in corrs], dtype=float).reshape(-1, 2)
    Q = np.array([c.prior_vertex.position[:2] for c in corrs], dtype=float).reshape(-1, 2)
    return P, Q


def solve_map_pose(
    corrs: Sequence[Correspondence],
    covs: Sequence[MixtureCov],
    init: Pose2,
    cfg: SolverConfig | None = None,
) -> SolveReport:
    """Minimize the summed half squared Mahalanobis residuals over the pose."""
    if not corrs:
        raise LocalizationError("no correspondences to localize against")
    if len(covs) != len(corrs):
        raise ValueError("one covariance per correspondence is required")
    P, Q = correspondence_arrays(corrs)
    obs_var = np.array([c.obs_var if c.obs_var is not None else (c.var_x, c.var_y) for c in covs])
    prior_var = np.array([c.prior_var if c.prior_var is not None else (0.0, 0.0) for c in covs])
    return solve_arrays(P, Q, obs_var, prior_var, init, cfg)


def localize(
    result: AssociationResult,
    prior: VectorMap,
    init: Pose2,
    cfg: SolverConfig | None = None,
    use_uncertainty: bool = True,
) -> SolveReport:
    """Solve the pose from the matched correspondences of an association.

    Outdated and new elements never contribute residuals. Without
    ``use_uncertainty`` every residual gets unit covariance.
    """
    corrs = [c for c in result.correspondences if c.element_pair[1] in prior]
    if not corrs:
        raise LocalizationError("no matched correspondences to localize against")
    P, Q = correspondence_arrays(corrs)
    if use_uncertainty:
        ob = np.array([(c.obs_vertex.scale.bx, c.obs_vertex.scale.by) for c in corrs])
        pb = np.array([(c.prior_vertex.scale.bx, c.prior_vertex.scale.by) for c in corrs])
        obs_var, prior_var = 2.0 * ob**2, 2.0 * pb**2
    else:
        obs_var, prior_var = np.ones_like(P), np.zeros_like(P)
    return solve_arrays(P, Q, obs_var, prior_var, init, cfg)
