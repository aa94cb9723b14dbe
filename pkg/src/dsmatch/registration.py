"""Iterative least-squares surface matching with blunder rejection.

Estimates the similarity transform that minimizes the squared signed
distances between a transformed point cloud and the reference surface
(Gauss-Newton on the point-to-plane linearization, unit weights). Each
iteration recomputes correspondences from scratch, applies the K*delta
rejection rule, solves the normal equations on the surviving points and
updates the parameters additively.

Two modes mirror the two-step evaluation protocol: a full iterative run
with a moderate K (default 5) for co-registration, and a single fixed-
transform pass with a very large K (e.g. 100) that keeps blunders in
the correspondence set so they show up in the reported statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np
import scipy.linalg

from .errors import NoCorrespondencesError, RankDeficientError
from .geometry import (
    IDENTITY,
    SimilarityTransform,
    apply_transform,
    rotation_derivatives,
    rotation_matrix,
    validate_cloud,
    with_update,
)
from .surface import DEFAULT_MAX_DIST, SpatialIndex, signed_distances

MAX_CONDITION = 1e12

_MAX_REJECT_PASSES = 100
# residual structure within this multiple of a point's last residual
# shift counts as unresolved misfit rather than blunder evidence
_FLOOR_FACTOR = 3.0


class Status(IntEnum):
    USED = 0
    BLUNDER = 1
    INVALID = 2


@dataclass
class CorrespondenceSet:
    """Per-point matching state against the reference surface.

    Arrays are indexed by position in the input cloud (source index).
    ``residual`` is the signed point-to-mesh distance of the transformed
    point, NaN where no foot point exists.
    """

    transformed: np.ndarray    # (n, 3)
    foot: np.ndarray           # (n, 3)
    normal: np.ndarray         # (n, 3)
    triangle_id: np.ndarray    # (n,) int64, -1 without a partner
    residual: np.ndarray       # (n,) signed meters
    status: np.ndarray         # (n,) uint8 Status codes

    def __len__(self) -> int:
        return len(self.status)

    @property
    def source_index(self) -> np.ndarray:
        return np.arange(len(self.status))

    @property
    def used(self) -> np.ndarray:
        return self.status == Status.USED

    @property
    def valid(self) -> np.ndarray:
        return self.status != Status.INVALID

    def counts(self) -> tuple[int, int, int]:
        """(used, blunder, invalid) counts; they sum to the cloud size."""
        return (
            int((self.status == Status.USED).sum()),
            int((self.status == Status.BLUNDER).sum()),
            int((self.status == Status.INVALID).sum()),
        )


@dataclass(frozen=True)
class RegistrationConfig:
    """Estimation settings; defaults follow the two-step protocol's step 1."""

    k_blunder: float = 5.0
    estimate_scale: bool = False
    max_iterations: int = 50
    convergence_translation: float = 1e-4
    convergence_rotation: float = 1e-6
    convergence_scale: float = 1e-6
    max_dist: float = DEFAULT_MAX_DIST
    initial_transform: SimilarityTransform = IDENTITY

    def __post_init__(self):
        if self.k_blunder <= 0.0:
            raise ValueError("k_blunder must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.max_dist <= 0.0:
            raise ValueError("max_dist must be positive")

    @property
    def n_parameters(self) -> int:
        return 7 if self.estimate_scale else 6


@dataclass(frozen=True)
class IterationRecord:
    """One line of the registration log."""

    iteration: int
    delta: float
    n_used: int
    n_blunder: int
    n_invalid: int
    update_translation: float
    update_rotation: float
    update_scale: float


@dataclass(frozen=True)
class RegistrationResult:
    transform: SimilarityTransform
    sigma0: float
    iterations: int
    used_count: int
    blunder_count: int
    invalid_count: int
    parameter_covariance: np.ndarray
    converged: bool
    final_correspondences: CorrespondenceSet
    final_delta: float
    log: tuple[IterationRecord, ...] = field(default_factory=tuple)


def find_correspondences(
    points: np.ndarray,
    transform: SimilarityTransform,
    index: SpatialIndex,
    max_dist: float = DEFAULT_MAX_DIST,
    workers: int = 1,
) -> CorrespondenceSet:
    """One correspondence per cloud point against the indexed surface.

    Points without a foot within max_dist, or whose foot lands on the
    mesh boundary (true nearest surface likely outside the modeled
    extent), are INVALID; everything else starts USED.
    """
    points = validate_cloud(points)
    transformed = apply_transform(transform, points)
    feet = index.query(transformed, max_dist=max_dist, workers=workers)
    residual = signed_distances(transformed, feet)
    status = np.full(len(points), Status.USED, dtype=np.uint8)
    status[~feet.found | feet.on_boundary] = Status.INVALID
    return CorrespondenceSet(
        transformed=transformed,
        foot=feet.point,
        normal=feet.normal,
        triangle_id=feet.triangle_id,
        residual=residual,
        status=status,
    )


def jacobian(corr: CorrespondenceSet, transform: SimilarityTransform, estimate_scale: bool):
    """Design matrix and right-hand side for the USED correspondences.

    Rows are the analytic partials of the signed point-to-plane residual
    d = n . (scale * R * p + T - f) in the parameter order
    (tx, ty, tz, omega, phi, kappa[, scale]); the right-hand side is the
    negated residual vector.
    """
    used = corr.used
    n = corr.normal[used]
    # recover the untransformed points from the stored transformed ones
    r = rotation_matrix(transform.omega, transform.phi, transform.kappa)
    rp = (corr.transformed[used] - transform.translation) / transform.scale
    p = rp @ r  # == R^T (R p) since R is orthonormal
    dr_om, dr_ph, dr_ka = rotation_derivatives(transform.omega, transform.phi, transform.kappa)

    cols = [n[:, 0], n[:, 1], n[:, 2]]
    for dr in (dr_om, dr_ph, dr_ka):
        cols.append(transform.scale * np.einsum("ij,ij->i", n, p @ dr.T))
    if estimate_scale:
        cols.append(np.einsum("ij,ij->i", n, rp))
    a = np.column_stack(cols)
    w = -corr.residual[used]
    return a, w


def jacobian_row(
    point: np.ndarray,
    normal: np.ndarray,
    transform: SimilarityTransform,
    estimate_scale: bool = False,
) -> np.ndarray:
    """Partials for a single untransformed point and facet normal."""
    p = np.asarray(point, dtype=float)
    n = np.asarray(normal, dtype=float)
    r = rotation_matrix(transform.omega, transform.phi, transform.kappa)
    dr_om, dr_ph, dr_ka = rotation_derivatives(transform.omega, transform.phi, transform.kappa)
    row = [
        n[0],
        n[1],
        n[2],
        transform.scale * (n @ (dr_om @ p)),
        transform.scale * (n @ (dr_ph @ p)),
        transform.scale * (n @ (dr_ka @ p)),
    ]
    if estimate_scale:
        row.append(n @ (r @ p))
    return np.array(row)


def solve_step(corr: CorrespondenceSet, transform: SimilarityTransform, config: RegistrationConfig) -> np.ndarray:
    """Gauss-Newton update from the normal equations (A^T A) x = A^T w.

    Raises RankDeficientError when the normal matrix condition exceeds
    1e12, e.g. a planar-only scene where normal translation and scale
    (or in-plane motion) are confounded.
    """
    a, w = jacobian(corr, transform, config.estimate_scale)
    n_mat = a.T @ a
    rhs = a.T @ w
    eig = np.linalg.eigvalsh(n_mat)
    if eig[0] <= 0.0 or eig[-1] / eig[0] > MAX_CONDITION:
        raise RankDeficientError(
            f"normal matrix condition exceeds {MAX_CONDITION:.0e}; "
            "scene geometry does not determine all free parameters"
        )
    cho = scipy.linalg.cho_factor(n_mat, lower=True)
    return scipy.linalg.cho_solve(cho, rhs)


def reject_blunders(
    corr: CorrespondenceSet, k: float, min_delta=0.0
) -> tuple[CorrespondenceSet, float]:
    """Flag correspondences whose residuals exceed k * delta as blunders.

    delta is the standard deviation about the mean (sample convention)
    of the residuals of the currently USED correspondences, and the
    test measures residuals about that mean: |r - mean| > k * delta.
    Centering matters: early iterations carry a biased residual field
    (the not-yet-estimated offset), and an uncentered test would throw
    away the bulk of the data as soon as delta falls below |mean| / k.

    The test is iterated to a fixed point: flagging blunders shrinks
    delta, which can expose further blunders that a single pass leaves
    hidden (gross errors inflate delta enough to put the threshold
    beyond their own range). The fixed point is located from a robust
    (MAD-based) initial scale: with heavy contamination the sample std
    starts so inflated that shaving the tail pass by pass stalls on the
    gaps between order statistics. Every pass re-tests all valid
    correspondences, so a previously flagged blunder returns to USED if
    its residual passes the current threshold. Flags never leak into
    the input; a flagged copy is returned together with the final delta
    of the surviving set.

    ``min_delta`` (scalar or per-point array) floors the delta used in
    the threshold. The iterative registration passes each point's
    residual shift from its previous step: structure below that scale
    is unresolved misfit, not blunder evidence, and clipping it away
    would discard exactly the steep facets that determine the
    planimetric parameters.
    """
    if k <= 0.0:
        raise ValueError("k must be positive")
    valid = corr.valid
    if int(valid.sum()) < 2:
        raise NoCorrespondencesError("need at least 2 valid correspondences")
    residual = corr.residual
    used = corr.used.copy()
    if not used.any():
        used = valid.copy()

    center = float(np.median(residual[used]))
    mad_scale = 1.4826 * float(np.median(np.abs(residual[used] - center)))
    threshold = k * np.maximum(mad_scale, min_delta)
    if np.any(threshold > 0.0):
        seeded = valid & (np.abs(residual - center) <= threshold)
        if seeded.any():
            used = seeded

    for _ in range(_MAX_REJECT_PASSES):
        center = float(np.mean(residual[used]))
        delta = float(np.std(residual[used], ddof=1))
        if not np.isfinite(delta):
            break
        threshold = k * np.maximum(delta, min_delta)
        if not np.any(threshold > 0.0):
            break
        new_used = valid & (np.abs(residual - center) <= threshold)
        if not new_used.any() or np.array_equal(new_used, used):
            break
        used = new_used
        if used.sum() < 2:
            break
    status = np.where(valid, np.where(used, Status.USED, Status.BLUNDER), Status.INVALID).astype(np.uint8)
    final_delta = float(np.std(residual[used], ddof=1)) if used.sum() >= 2 else 0.0
    return replace(corr, status=status), final_delta


def _update_norms(delta: np.ndarray, estimate_scale: bool) -> tuple[float, float, float]:
    dt = float(np.max(np.abs(delta[0:3])))
    dr = float(np.max(np.abs(delta[3:6])))
    ds = float(abs(delta[6])) if estimate_scale else 0.0
    return dt, dr, ds


def register(
    points: np.ndarray,
    index: SpatialIndex,
    config: RegistrationConfig | None = None,
    workers: int = 1,
) -> RegistrationResult:
    """Full iterative co-registration of a cloud onto the indexed surface.

    Iterates correspondence search, K*delta rejection and the normal-
    equation solve until every accepted update component falls below its
    convergence threshold or max_iterations is reached. Updates are
    accepted only if they do not increase the sum of squared residuals
    on the common USED support (backtracking halves steps that
    overshoot), so the objective is non-increasing across iterations by
    construction; when no step size helps, the run stops - converged if
    the remaining damped motion is within tolerances, non-converged
    otherwise.

    While the estimate is still moving, each point's rejection threshold
    is floored by the residual shift the last accepted step caused that
    point: structure below that scale is unresolved misfit, not blunder
    evidence. No rejection is applied before the first solve.

    sigma0 is sqrt(sum(v^2) / (n_used - u)) over the final USED
    residuals, with u the number of free parameters.
    """
    config = config or RegistrationConfig()
    points = validate_cloud(points)
    if len(points) == 0:
        raise NoCorrespondencesError("empty point cloud")

    transform = config.initial_transform
    converged = False
    iterations = 0
    log: list[IterationRecord] = []
    # no rejection before the first solve: the initial residual field is
    # pure misfit and carries no usable noise scale yet
    floor = np.inf
    corr = find_correspondences(points, transform, index, config.max_dist, workers)
    corr, delta = reject_blunders(corr, config.k_blunder, min_delta=floor)

    for iteration in range(1, config.max_iterations + 1):
        update = solve_step(corr, transform, config)

        # accept the step only if it does not worsen the fit on the
        # points both states keep (membership flips at the rejection
        # threshold would swamp a plain objective comparison); when the
        # full step overshoots, a re-associating piecewise-linear
        # objective usually still descends along a damped step
        accepted = False
        alpha = 1.0
        min_rise = np.inf
        for _ in range(5):
            try:
                candidate = with_update(transform, alpha * update, config.estimate_scale)
            except ValueError:
                alpha *= 0.5  # scale would go non-positive at this step size
                continue
            corr_try = find_correspondences(points, candidate, index, config.max_dist, workers)
            corr_try, delta_try = reject_blunders(corr_try, config.k_blunder, min_delta=floor)
            common = corr.used & corr_try.used
            obj_prev = float(np.sum(corr.residual[common] ** 2))
            obj_try = float(np.sum(corr_try.residual[common] ** 2))
            if obj_try <= obj_prev * (1.0 + 1e-12) + 1e-15:
                accepted = True
                break
            if obj_prev > 0.0:
                min_rise = min(min_rise, obj_try / obj_prev - 1.0)
            alpha *= 0.5
        dt, dr, ds = _update_norms(
            alpha * (update if config.estimate_scale else np.append(update, 0.0)),
            config.estimate_scale,
        )
        if not accepted:
            # no step size improves the fit: the estimate sits at the
            # floor of the sampled objective. After real progress, a
            # sub-0.1% best rise (or remaining damped motion within
            # tolerances) is stationarity; anything else is oscillation
            # and reports as non-converged.
            converged = (
                dt < config.convergence_translation
                and dr < config.convergence_rotation
                and ds < config.convergence_scale
            ) or (iterations >= 1 and min_rise <= 1e-3)
            break

        # each point's next rejection floor is the residual motion this
        # step caused it: per-point, because the unresolved misfit a
        # point still carries scales with its own lever arm (crease and
        # wall points move far more per update than flat ground)
        both = corr.valid & corr_try.valid
        shift = np.zeros(len(points))
        shift[both] = np.abs(corr_try.residual[both] - corr.residual[both])
        floor = _FLOOR_FACTOR * shift / config.k_blunder

        transform = candidate
        corr, delta = reject_blunders(corr_try, config.k_blunder, min_delta=floor)
        iterations = iteration
        n_used, n_blunder, n_invalid = corr.counts()
        log.append(IterationRecord(iteration, delta, n_used, n_blunder, n_invalid, dt, dr, ds))
        if (
            dt < config.convergence_translation
            and dr < config.convergence_rotation
            and ds < config.convergence_scale
        ):
            converged = True
            break

    final, final_delta = evaluate_fixed(
        points, transform, index, config.k_blunder, config.max_dist, workers
    )
    n_used, n_blunder, n_invalid = final.counts()
    u = config.n_parameters
    if n_used > u:
        sigma0 = float(np.sqrt(np.sum(final.residual[final.used] ** 2) / (n_used - u)))
    else:
        sigma0 = 0.0
    a, _ = jacobian(final, transform, config.estimate_scale)
    n_mat = a.T @ a
    eig = np.linalg.eigvalsh(n_mat)
    if eig[0] > 0.0 and eig[-1] / eig[0] <= MAX_CONDITION:
        covariance = sigma0**2 * np.linalg.inv(n_mat)
    else:
        covariance = np.full((u, u), np.nan)

    return RegistrationResult(
        transform=transform,
        sigma0=sigma0,
        iterations=iterations,
        used_count=n_used,
        blunder_count=n_blunder,
        invalid_count=n_invalid,
        parameter_covariance=covariance,
        converged=converged,
        final_correspondences=final,
        final_delta=final_delta,
        log=tuple(log),
    )


def evaluate_fixed(
    points: np.ndarray,
    transform: SimilarityTransform,
    index: SpatialIndex,
    k: float = 100.0,
    max_dist: float = DEFAULT_MAX_DIST,
    workers: int = 1,
) -> tuple[CorrespondenceSet, float]:
    """Single correspondence + rejection pass with the transform held fixed.

    With a very large k (e.g. 100) nothing is rejected, so blunders stay
    in the set and flow into the reported statistics; with the step-1 k
    this reproduces the final iteration's rejection set exactly.
    """
    corr = find_correspondences(points, transform, index, max_dist, workers)
    return reject_blunders(corr, k)
