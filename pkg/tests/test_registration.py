import numpy as np
import pytest
from numpy.testing import assert_allclose

from dsmatch.errors import NoCorrespondencesError, RankDeficientError
from dsmatch.geometry import IDENTITY, SimilarityTransform, apply_transform, compose, invert
from dsmatch.raster import GridSpec, mesh_from_grid, rasterize
from dsmatch.registration import (
    CorrespondenceSet,
    RegistrationConfig,
    Status,
    evaluate_fixed,
    find_correspondences,
    jacobian,
    jacobian_row,
    register,
    reject_blunders,
    solve_step,
)
from dsmatch.surface import SurfaceMesh, build_index
from dsmatch.synth import PerturbationSpec, SceneSpec, make_scene, perturb, sample_surface


def flat_square_index(size=10.0, z=0.0):
    vertices = np.array([
        [0.0, 0.0, z], [size, 0.0, z], [size, size, z], [0.0, size, z],
    ])
    mesh = SurfaceMesh.from_arrays(vertices, np.array([[0, 1, 2], [0, 2, 3]]))
    return build_index(mesh)


def synthetic_correspondences(residuals):
    """Correspondence set with given residuals on a horizontal facet."""
    residuals = np.asarray(residuals, dtype=float)
    n = len(residuals)
    transformed = np.column_stack([np.ones(n), np.ones(n), residuals])
    return CorrespondenceSet(
        transformed=transformed,
        foot=np.column_stack([np.ones(n), np.ones(n), np.zeros(n)]),
        normal=np.tile([0.0, 0.0, 1.0], (n, 1)),
        triangle_id=np.zeros(n, dtype=np.int64),
        residual=residuals.copy(),
        status=np.full(n, Status.USED, dtype=np.uint8),
    )


# --- find_correspondences ---------------------------------------------------

def test_on_surface_cloud_has_zero_residuals(terrain_scene):
    mesh, cloud, index = terrain_scene
    corr = find_correspondences(cloud, IDENTITY, index)
    # samples are mesh vertices: every residual is exactly zero
    assert corr.valid.any()
    assert np.nanmax(np.abs(corr.residual[corr.valid])) < 1e-12
    assert (corr.status[corr.valid] == Status.USED).all()


def test_far_point_is_invalid():
    index = flat_square_index()
    cloud = np.array([[5.0, 5.0, 1.0], [30.0, 5.0, 0.0]])
    corr = find_correspondences(cloud, IDENTITY, index, max_dist=10.0)
    assert corr.status[0] == Status.USED
    assert corr.status[1] == Status.INVALID
    assert np.isnan(corr.residual[1]) or corr.status[1] == Status.INVALID


def test_lifted_cloud_constant_residual():
    index = flat_square_index()
    rng = np.random.default_rng(1)
    base = np.column_stack([rng.uniform(1, 9, 50), rng.uniform(1, 9, 50), np.zeros(50)])
    lifted = base + [0.0, 0.0, 0.30]
    corr = find_correspondences(lifted, IDENTITY, index)
    assert_allclose(corr.residual, 0.30, atol=1e-12)


def test_counts_partition_cloud(terrain_scene):
    _, cloud, index = terrain_scene
    shifted = cloud + [0.0, 0.0, 0.1]
    corr = find_correspondences(shifted, IDENTITY, index)
    used, blunder, invalid = corr.counts()
    assert used + blunder + invalid == len(cloud)


# --- jacobian ----------------------------------------------------------------

def test_jacobian_row_horizontal_facet():
    row = jacobian_row([3.0, 4.0, 5.0], [0.0, 0.0, 1.0], IDENTITY)
    assert row[2] == 1.0 and row[0] == 0.0 and row[1] == 0.0


def test_jacobian_row_scale_partial_at_identity(rng):
    p = rng.normal(size=3)
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)
    row = jacobian_row(p, n, IDENTITY, estimate_scale=True)
    assert row[6] == pytest.approx(float(n @ p), abs=1e-12)


def test_jacobian_matches_finite_differences(rng):
    """Analytic partials vs central differences of the point-to-plane residual."""
    h = 1e-6
    for _ in range(100):
        p = rng.uniform(-20.0, 20.0, size=3)
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        f = rng.uniform(-20.0, 20.0, size=3)
        params = np.concatenate([
            rng.uniform(-1.0, 1.0, size=3),
            rng.uniform(-0.5, 0.5, size=3),
            [rng.uniform(0.5, 2.0)],
        ])
        t = SimilarityTransform(*params)
        row = jacobian_row(p, n, t, estimate_scale=True)

        def residual(values):
            tt = SimilarityTransform(*values)
            return float(n @ (apply_transform(tt, p) - f))

        for i in range(7):
            plus = params.copy()
            minus = params.copy()
            plus[i] += h
            minus[i] -= h
            fd = (residual(plus) - residual(minus)) / (2.0 * h)
            scale = max(1.0, abs(fd))
            assert abs(row[i] - fd) / scale < 1e-5


def test_jacobian_batch_matches_rows(terrain_scene):
    _, cloud, index = terrain_scene
    t = SimilarityTransform(0.1, -0.2, 0.05, 0.01, -0.02, 0.03, 1.1)
    corr = find_correspondences(apply_transform(invert(t), cloud[:200]), t, index)
    a, w = jacobian(corr, t, estimate_scale=True)
    used = np.nonzero(corr.used)[0]
    source = apply_transform(invert(t), cloud[:200])
    for k in (0, len(used) // 2, len(used) - 1):
        i = used[k]
        row = jacobian_row(source[i], corr.normal[i], t, estimate_scale=True)
        assert_allclose(a[k], row, atol=1e-9)
        assert w[k] == -corr.residual[i]


# --- solve_step ---------------------------------------------------------------

def test_solve_step_recovers_vertical_shift():
    """Facet-centroid samples shifted +0.30 m solve to (0,0,-0.30,0,0,0).

    Gentle slopes keep every shifted sample's foot inside its own facet,
    so the normal equations are exactly consistent.
    """
    mesh, _ = make_scene(
        SceneSpec(kind="ridged-terrain", extent_x=20.0, extent_y=20.0, gsd=0.5, amplitude=0.35, seed=6)
    )
    index = build_index(mesh)
    a, b, c = mesh.corners()
    centroids = (a + b + c) / 3.0
    cloud = centroids + [0.0, 0.0, 0.30]
    corr = find_correspondences(cloud, IDENTITY, index)
    update = solve_step(corr, IDENTITY, RegistrationConfig())
    assert_allclose(update, [0.0, 0.0, -0.30, 0.0, 0.0, 0.0], atol=1e-6)


def test_solve_step_zero_at_fixed_point(terrain_scene):
    _, cloud, index = terrain_scene
    corr = find_correspondences(cloud, IDENTITY, index)
    update = solve_step(corr, IDENTITY, RegistrationConfig())
    assert np.linalg.norm(update[:3]) < 1e-9


def test_solve_step_rank_deficient_on_plane():
    index = flat_square_index()
    rng = np.random.default_rng(2)
    cloud = np.column_stack([rng.uniform(1, 9, 200), rng.uniform(1, 9, 200), rng.normal(0, 0.01, 200)])
    corr = find_correspondences(cloud, IDENTITY, index)
    with pytest.raises(RankDeficientError):
        solve_step(corr, IDENTITY, RegistrationConfig(estimate_scale=True))


# --- reject_blunders ----------------------------------------------------------

def test_reject_nothing_on_symmetric_residuals():
    corr = synthetic_correspondences([0.1, -0.1, 0.1, -0.1])
    flagged, delta = reject_blunders(corr, k=5.0)
    # sample standard deviation of {+-0.1}
    assert delta == pytest.approx(0.11547005383792516, rel=1e-12)
    assert (flagged.status == Status.USED).all()


def test_reject_single_gross_error():
    corr = synthetic_correspondences([0.01] * 99 + [5.0])
    flagged, delta = reject_blunders(corr, k=5.0)
    assert (flagged.status[:99] == Status.USED).all()
    assert flagged.status[99] == Status.BLUNDER
    # all surviving residuals identical: the surviving spread is zero
    assert abs(delta) < 1e-12


def test_huge_k_rejects_nothing(rng):
    residuals = np.clip(rng.normal(0.0, 0.3, 500), -7.0, 7.0)
    corr = synthetic_correspondences(residuals)
    flagged, delta = reject_blunders(corr, k=100.0)
    assert (flagged.status == Status.USED).all()
    assert delta > 0.07


def test_reject_requires_two_valid():
    corr = synthetic_correspondences([0.1, 0.2])
    corr.status[:] = Status.INVALID
    with pytest.raises(NoCorrespondencesError):
        reject_blunders(corr, k=5.0)


def test_reject_does_not_mutate_input():
    corr = synthetic_correspondences([0.01] * 99 + [5.0])
    before = corr.status.copy()
    reject_blunders(corr, k=5.0)
    assert np.array_equal(corr.status, before)


def test_blunder_returns_to_used_when_it_passes():
    corr = synthetic_correspondences(np.linspace(-0.1, 0.1, 50))
    corr.status[7] = Status.BLUNDER  # stale flag from another state
    flagged, _ = reject_blunders(corr, k=5.0)
    assert flagged.status[7] == Status.USED


# --- register ----------------------------------------------------------------

def test_register_fixed_point(terrain_scene):
    _, cloud, index = terrain_scene
    result = register(cloud, index)
    assert result.converged
    assert result.iterations <= 2
    assert abs(result.transform.tx) < 1e-6
    assert abs(result.transform.ty) < 1e-6
    assert abs(result.transform.tz) < 1e-6
    assert result.sigma0 < 1e-9
    assert result.used_count + result.blunder_count + result.invalid_count == len(cloud)


def test_register_recovers_known_transform_with_noise(blocks_scene):
    # sample the visible surface rather than reusing grid vertices:
    # vertex points sit exactly on facet creases, where noisy
    # association is at its most biased
    mesh, _, index = blocks_scene
    cloud = sample_surface(mesh, 20000, seed=81, min_normal_z=0.8)
    truth = SimilarityTransform(0.5, -0.4, 0.3, 0.01, 0.015, -0.02)
    moved, _ = perturb(cloud, PerturbationSpec(transform=truth, noise_sigma=0.02, seed=8))
    result = register(moved, index)
    assert abs(result.transform.tx - truth.tx) < 0.005
    assert abs(result.transform.ty - truth.ty) < 0.005
    assert abs(result.transform.tz - truth.tz) < 0.005
    assert abs(result.transform.omega - truth.omega) < 2e-4
    assert abs(result.transform.phi - truth.phi) < 2e-4
    assert abs(result.transform.kappa - truth.kappa) < 2e-4
    assert 0.018 < result.sigma0 < 0.022


def test_register_with_blunders(blocks_scene):
    mesh, _, index = blocks_scene
    cloud = sample_surface(mesh, 20000, seed=82, min_normal_z=0.8)
    truth = SimilarityTransform(0.3, 0.2, -0.25, -0.008, 0.01, 0.012)
    moved, labels = perturb(
        cloud,
        PerturbationSpec(transform=truth, noise_sigma=0.02, blunder_fraction=0.1,
                         blunder_magnitude=5.0, seed=13),
    )
    result = register(moved, index)
    assert abs(result.transform.tx - truth.tx) < 0.005
    assert abs(result.transform.tz - truth.tz) < 0.005
    assert 0.018 < result.sigma0 < 0.022
    frac = result.blunder_count / len(cloud)
    assert 0.08 < frac < 0.12


def test_register_deterministic(terrain_scene):
    _, cloud, index = terrain_scene
    moved, _ = perturb(cloud, PerturbationSpec(
        transform=SimilarityTransform(0.2, -0.1, 0.1), noise_sigma=0.01, seed=3))
    r1 = register(moved, index)
    r2 = register(moved, index)
    assert r1.transform == r2.transform
    assert r1.sigma0 == r2.sigma0
    assert np.array_equal(r1.final_correspondences.status, r2.final_correspondences.status)
    assert np.array_equal(r1.parameter_covariance, r2.parameter_covariance)


def test_register_six_parameter_scale_bit_equal(terrain_scene):
    _, cloud, index = terrain_scene
    moved, _ = perturb(cloud, PerturbationSpec(transform=SimilarityTransform(0.3, 0.0, 0.1), seed=2))
    result = register(moved, index)
    assert result.transform.scale == 1.0
    assert result.parameter_covariance.shape == (6, 6)


def test_register_seven_parameter_recovers_scale(blocks_scene):
    _, cloud, index = blocks_scene
    truth = SimilarityTransform(0.2, -0.1, 0.15, 0.005, -0.004, 0.006, 1.01)
    moved, _ = perturb(cloud, PerturbationSpec(transform=truth, seed=5))
    result = register(moved, index, RegistrationConfig(estimate_scale=True))
    assert result.converged
    assert abs(result.transform.scale - 1.01) < 1e-5
    assert result.parameter_covariance.shape == (7, 7)


def test_register_equivariance(blocks_scene):
    """Registering g(cloud) yields t* compose g^-1 on noise-free data."""
    _, cloud, index = blocks_scene
    truth = SimilarityTransform(0.4, -0.2, 0.3, 0.01, -0.012, 0.015)
    moved, _ = perturb(cloud, PerturbationSpec(transform=truth, seed=0))
    base = register(moved, index).transform

    g = SimilarityTransform(0.15, 0.2, -0.1, 0.004, 0.006, -0.005)
    shifted = apply_transform(g, moved)
    result = register(shifted, index).transform
    expected = compose(base, invert(g))
    assert abs(result.tx - expected.tx) < 1e-3
    assert abs(result.ty - expected.ty) < 1e-3
    assert abs(result.tz - expected.tz) < 1e-3


def test_register_empty_cloud_raises(terrain_scene):
    _, _, index = terrain_scene
    with pytest.raises(NoCorrespondencesError):
        register(np.empty((0, 3)), index)


def test_register_objective_non_increasing_log(blocks_scene):
    _, cloud, index = blocks_scene
    moved, _ = perturb(cloud, PerturbationSpec(
        transform=SimilarityTransform(0.5, -0.3, 0.2, 0.01, 0.01, -0.01),
        noise_sigma=0.02, blunder_fraction=0.05, blunder_magnitude=3.0, seed=4))
    result = register(moved, index)
    deltas = [rec.delta for rec in result.log]
    assert all(b <= a * (1.0 + 1e-9) for a, b in zip(deltas, deltas[1:]))


# --- evaluate_fixed -----------------------------------------------------------

def test_evaluate_fixed_keeps_blunders_at_k100(blocks_scene):
    _, cloud, index = blocks_scene
    truth = SimilarityTransform(0.2, 0.1, -0.1)
    moved, labels = perturb(
        cloud,
        PerturbationSpec(transform=truth, noise_sigma=0.02, blunder_fraction=0.1,
                         blunder_magnitude=4.0, seed=9),
    )
    result = register(moved, index)
    corr, _ = evaluate_fixed(moved, result.transform, index, k=100.0)
    assert (corr.status != Status.BLUNDER).all()
    # the labeled blunders are in the USED set, so the statistics see them
    assert (corr.status[labels] == Status.USED).sum() > 0.9 * labels.sum()


def test_evaluate_fixed_k5_matches_register_final(blocks_scene):
    _, cloud, index = blocks_scene
    moved, _ = perturb(
        cloud,
        PerturbationSpec(transform=SimilarityTransform(0.3, -0.2, 0.15),
                         noise_sigma=0.02, blunder_fraction=0.08,
                         blunder_magnitude=4.0, seed=10),
    )
    result = register(moved, index, RegistrationConfig(k_blunder=5.0))
    corr, _ = evaluate_fixed(moved, result.transform, index, k=5.0)
    assert np.array_equal(corr.status, result.final_correspondences.status)


def test_evaluate_fixed_identity_on_surface(terrain_scene):
    _, cloud, index = terrain_scene
    corr, delta = evaluate_fixed(cloud, IDENTITY, index, k=100.0)
    assert np.abs(corr.residual[corr.valid]).max() < 1e-12
    assert abs(delta) < 1e-12
