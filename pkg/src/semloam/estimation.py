"""Robust point-to-plane / point-to-line motion estimation with outlier rejection.

The solver minimises the mean robust cost ``mean(rho(|r_i|^2))`` where each
residual ``r_i`` is the normal-direction component of the offset between the
transformed keypoint and its matched surface. Rotation is updated with a
left-multiplied axis-angle increment, translation additively.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import MatchingConfig, SolverConfig
from .core import RigidTransform, quat_from_rotvec, quat_multiply, skew
from .errors import InsufficientMatches, RegistrationFailed, SolverDiverged
from .features import Keypoints
from .matching import Matches, SemanticNnForest, assign_matches

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# robust losses, written on the squared residual norm s


class SquaredLoss:
    kind = "squared"
    scale = None

    def rho(self, s):
        return np.asarray(s, dtype=float)

    def weight(self, s):
        return np.ones_like(np.asarray(s, dtype=float))


@dataclass(frozen=True)
class HuberLoss:
    scale: float = 0.1  # residual norm (m) where the loss turns linear
    kind = "huber"

    def rho(self, s):
        s = np.asarray(s, dtype=float)
        a = self.scale
        return np.where(s <= a * a, s, 2.0 * a * np.sqrt(s) - a * a)

    def weight(self, s):
        s = np.asarray(s, dtype=float)
        a = self.scale
        with np.errstate(divide="ignore"):
            return np.where(s <= a * a, 1.0, a / np.sqrt(s))


@dataclass(frozen=True)
class ArctanLoss:
    scale: float = 0.1  # residual norm (m) where the loss saturates
    kind = "arctan"

    def rho(self, s):
        b = self.scale**2
        return b * np.arctan(np.asarray(s, dtype=float) / b)

    def weight(self, s):
        b = self.scale**2
        return 1.0 / (1.0 + (np.asarray(s, dtype=float) / b) ** 2)


def make_loss(kind, scale=0.1):
    if kind == "huber":
        return HuberLoss(scale)
    if kind == "arctan":
        return ArctanLoss(scale)
    if kind == "squared":
        return SquaredLoss()
    raise ValueError(f"unknown loss {kind!r}")


def loss_for_pass(schedule, pass_index):
    """Loss used by outer pass ``pass_index`` (0-based); the last entry repeats."""
    remaining = pass_index
    for kind, scale, count in schedule:
        if remaining < count:
            return make_loss(kind, scale)
        remaining -= count
    kind, scale, _ = schedule[-1]
    return make_loss(kind, scale)


# ---------------------------------------------------------------------------
# residuals and Jacobians


def residuals(matches: Matches, T: RigidTransform) -> np.ndarray:
    """``(N, 3)`` normal-direction offsets of the transformed keypoints."""
    offset = T.apply(matches.source) - matches.anchors
    return (matches.projectors @ offset[:, :, None])[:, :, 0]


def residual(match, T: RigidTransform) -> np.ndarray:
    from .core import project_along_normal

    return project_along_normal(match.model, T.apply(match.source) - match.model.anchor)


def jacobians(matches: Matches, T: RigidTransform) -> np.ndarray:
    """``(N, 3, 6)`` derivative w.r.t. ``[d_rot, d_trans]`` of the update below."""
    rotated = matches.source @ T.rotation.T
    J = np.empty((len(matches), 3, 6))
    J[:, :, :3] = -(matches.projectors @ skew(rotated))
    J[:, :, 3:] = matches.projectors
    return J


def apply_increment(T: RigidTransform, delta) -> RigidTransform:
    delta = np.asarray(delta, dtype=float)
    q = quat_multiply(quat_from_rotvec(delta[:3]), T.q)
    return RigidTransform(T.t + delta[3:], q)


def objective(matches: Matches, T: RigidTransform, loss=None) -> float:
    loss = loss or SquaredLoss()
    r = residuals(matches, T)
    return float(np.mean(loss.rho(np.einsum("ni,ni->n", r, r))))


def estimate_transformation(
    T_init: RigidTransform,
    matches: Matches,
    loss=None,
    max_iterations=20,
    min_matches=10,
    step_tol=1e-12,
    on_step=None,
) -> RigidTransform:
    """Levenberg-Marquardt on the mean robust cost, starting from ``T_init``.

    A step is accepted only if it lowers the robust objective, so the result
    never scores worse than ``T_init``. ``on_step(T, cost)`` is called after
    every accepted step.
    """
    if len(matches) < min_matches:
        raise InsufficientMatches(len(matches), min_matches)
    loss = loss or SquaredLoss()
    T = T_init
    r = residuals(matches, T)
    s = np.einsum("ni,ni->n", r, r)
    cost = float(np.mean(loss.rho(s)))
    if not np.isfinite(cost):
        raise SolverDiverged("initial objective is not finite")
    lam = 1e-4
    for _ in range(max_iterations):
        w = loss.weight(s)
        J = jacobians(matches, T)
        wJ = (J * w[:, None, None]).reshape(-1, 6)
        H = wJ.T @ J.reshape(-1, 6)
        g = wJ.T @ r.ravel()
        if np.max(np.abs(g)) < 1e-15 * max(1.0, cost):
            break
        diag = np.maximum(np.diag(H), 1e-12)
        accepted = False
        while lam < 1e12:
            try:
                delta = np.linalg.solve(H + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            T_new = apply_increment(T, delta)
            r_new = residuals(matches, T_new)
            s_new = np.einsum("ni,ni->n", r_new, r_new)
            cost_new = float(np.mean(loss.rho(s_new)))
            if not np.isfinite(cost_new):
                raise SolverDiverged("objective became non-finite")
            if cost_new < cost:
                accepted = True
                lam = max(lam / 3.0, 1e-12)
                break
            lam *= 4.0
        if not accepted:
            break
        T, r, s, cost = T_new, r_new, s_new, cost_new
        if on_step is not None:
            on_step(T, cost)
        if np.linalg.norm(delta) < step_tol:
            break
    return T


# ---------------------------------------------------------------------------
# outlier rejection


@dataclass
class RejectionDiagnostics:
    u: np.ndarray
    u_along: np.ndarray
    u_perp: np.ndarray
    ratio: np.ndarray
    cost_old: np.ndarray
    cost_new: np.ndarray


def classify_matches(T_init, T, matches: Matches, r_tol=0.4, cost_tol=0.4, eps_motion=1e-6):
    """Vectorised inlier test; returns ``(inlier_mask, RejectionDiagnostics)``.

    A match is kept when its new cost is below ``cost_tol``, or when the
    keypoint moved mostly along the surface normal (``ratio < r_tol``) and its
    cost went down. Below ``eps_motion`` of normal motion the ratio is
    meaningless and only the cost tests are used.
    """
    p_old = T_init.apply(matches.source)
    p_new = T.apply(matches.source)
    u = p_new - p_old
    along = np.einsum("nij,nj->ni", matches.projectors, u)
    perp = u - along
    u_along = np.linalg.norm(along, axis=1)
    u_perp = np.linalg.norm(perp, axis=1)
    r_old = np.einsum("nij,nj->ni", matches.projectors, p_old - matches.anchors)
    r_new = np.einsum("nij,nj->ni", matches.projectors, p_new - matches.anchors)
    cost_old = np.einsum("ni,ni->n", r_old, r_old)
    cost_new = np.einsum("ni,ni->n", r_new, r_new)
    moving = u_along >= eps_motion
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(moving, u_perp / np.where(moving, u_along, 1.0), np.inf)
    decreased = cost_new < cost_old
    inlier = (cost_new < cost_tol) | np.where(moving, (ratio < r_tol) & decreased, decreased)
    return inlier, RejectionDiagnostics(u, u_along, u_perp, ratio, cost_old, cost_new)


def classify_match(T_init, T, match, r_tol=0.4, cost_tol=0.4, eps_motion=1e-6):
    """Single-match form of :func:`classify_matches`; returns ``(is_inlier, diagnostics)``."""
    m = Matches.from_models([match.source], [match.model])
    inlier, diag = classify_matches(T_init, T, m, r_tol, cost_tol, eps_motion)
    return bool(inlier[0]), RejectionDiagnostics(*(np.asarray(v)[0] for v in vars(diag).values()))


@dataclass
class OrmeResult:
    T: RigidTransform
    inliers: np.ndarray  # boolean mask over the input matches
    iterations: int
    converged: bool


def _converged(T_a, T_b, cfg: SolverConfig) -> bool:
    dt, dr = T_a.delta(T_b)
    return dt < cfg.convergence_eps_trans and dr < cfg.convergence_eps_rot


def orme(T_initial: RigidTransform, matches: Matches, config: SolverConfig | None = None, loss=None) -> OrmeResult:
    """Alternate inlier classification and re-estimation until ``T`` settles.

    The first iteration uses every match. Later iterations classify each
    match by the motion ``T_initial -> T`` it experienced and re-solve with
    the inliers only, warm-started from the latest ``T``.
    """
    cfg = config or SolverConfig()
    T = T_initial
    mask = np.ones(len(matches), dtype=bool)
    converged = False
    it = 0
    for it in range(1, cfg.iters_max_orme + 1):
        if it > 1:
            mask, _ = classify_matches(T_initial, T, matches, cfg.r_tol, cfg.cost_tol, cfg.eps_motion)
        subset = matches if mask.all() else matches.subset(mask)
        T_new = estimate_transformation(T, subset, loss, cfg.lm_max_iterations, cfg.min_matches)
        converged = _converged(T, T_new, cfg)
        T = T_new
        if converged:
            break
    return OrmeResult(T, mask, it, converged)


# ---------------------------------------------------------------------------
# scan-to-scan odometry


@dataclass
class RegistrationResult:
    T: RigidTransform
    passes: int
    matches: int
    inliers: int
    early_stop: bool = False


def register(
    source: Keypoints,
    forest: SemanticNnForest,
    T_init: RigidTransform,
    schedule,
    passes: int,
    solver: SolverConfig,
    matching: MatchingConfig,
    max_dist: float,
    use_orme=True,
    early_termination=False,
) -> RegistrationResult:
    """Shared match / estimate loop for scan-to-scan and scan-to-map registration.

    Each pass re-matches the keypoints under the current estimate, then runs
    ORME (or plain robust estimation). Raises ``InsufficientMatches`` if no
    pass had enough matches to solve.
    """
    T = T_init
    succeeded = 0
    n_matches = n_inliers = 0
    early = False
    last_error = None
    p = 0
    for p in range(passes):
        matches = assign_matches(
            source, forest, T,
            matching.k_plane, matching.k_line, max_dist,
            matching.planarity_ratio, matching.linearity_ratio,
        )
        loss = loss_for_pass(schedule, p)
        try:
            if use_orme:
                res = orme(T, matches, solver, loss)
                T_new, n_in = res.T, int(res.inliers.sum())
            else:
                T_new = estimate_transformation(T, matches, loss, solver.lm_max_iterations, solver.min_matches)
                n_in, res = len(matches), None
        except InsufficientMatches as exc:
            # the pass keeps its starting estimate; re-matching from the same
            # estimate would reproduce the same failure
            last_error = exc
            break
        succeeded += 1
        n_matches, n_inliers = len(matches), n_in
        done = _converged(T, T_new, solver)
        T = T_new
        if early_termination and res is not None and res.converged and res.iterations <= 2:
            early = True
            break
        if done:
            break
    if not succeeded:
        raise last_error or InsufficientMatches(0, solver.min_matches)
    return RegistrationResult(T, p + 1, n_matches, n_inliers, early)


def semantic_lidar_odometry(
    current: Keypoints,
    previous_forest: SemanticNnForest,
    T_prev_motion: RigidTransform | None = None,
    solver: SolverConfig | None = None,
    matching: MatchingConfig | None = None,
    skip: int = 0,
) -> RegistrationResult:
    """Motion mapping current-scan coordinates into the previous scan's frame.

    ``current`` holds the current scan's keypoints; ``previous_forest`` is
    built over the previous scan's keypoints. The estimate starts from the
    previous motion (identity on the first frame).
    """
    solver = solver or SolverConfig()
    matching = matching or MatchingConfig()
    T0 = T_prev_motion or RigidTransform.identity()
    try:
        return register(
            current, previous_forest, T0,
            solver.loss_schedule, solver.iters_max_outer, solver, matching,
            matching.match_distance(skip),
            use_orme=solver.use_orme,
            early_termination=solver.early_termination,
        )
    except InsufficientMatches as exc:
        raise RegistrationFailed(f"scan-to-scan registration failed: {exc}") from exc
