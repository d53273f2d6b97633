import numpy as np
import pytest

from svn_ensembles.curvature import DiagonalCurvature, FullCurvature, KroneckerCurvature, estimate_curvature
from svn_ensembles.data import standardize, toy_regression
from svn_ensembles.inference import (
    CGConfig,
    MethodConfig,
    ParticleEnsemble,
    StepState,
    SvnHessian,
    newton_update,
    particle_step,
    solve_block_diagonal,
    solve_full_system,
    svgd_direction,
    svgd_update,
    svn_direction,
    train,
)
from svn_ensembles.kernels import IdentityMetric, build_kernel_state, kernel_eval, kernel_grad
from svn_ensembles.nn import MlpArchitecture, last_layer_slice
from svn_ensembles.posterior import BatchView, PriorSpec
from svn_ensembles.targets import GaussianPosterior, NetworkPosterior


def _spd(rng, d, shift=0.5):
    a = rng.standard_normal((d, d))
    return a @ a.T / d + shift * np.eye(d)


def _state(rng, n, d):
    particles = rng.standard_normal((n, d))
    return particles, build_kernel_state(IdentityMetric(), particles)


def _dense_svn_hessian(particles, scale, curv):
    """Assemble every block pairwise from kernel evaluations."""
    n, d = particles.shape
    m = IdentityMetric()
    k = np.array([[kernel_eval(m, particles[a], particles[b], scale) for b in range(n)] for a in range(n)])
    g = np.array([[kernel_grad(m, particles[a], particles[b], scale) for b in range(n)] for a in range(n)])
    h = np.zeros((n * d, n * d))
    for mm in range(n):
        for nn in range(n):
            blk = sum(k[p, mm] * k[p, nn] * curv[p] + np.outer(g[p, nn], g[p, mm]) for p in range(n)) / n
            h[mm * d : (mm + 1) * d, nn * d : (nn + 1) * d] = blk
    return h


def test_svgd_direction_matches_loop(rng):
    for _ in range(20):
        n, d = int(rng.integers(1, 7)), int(rng.integers(1, 8))
        particles, ks = _state(rng, n, d)
        grads = rng.standard_normal((n, d))
        m = IdentityMetric()
        ref = np.array([
            sum(kernel_eval(m, particles[j], particles[i], ks.scale) * grads[j]
                + kernel_grad(m, particles[j], particles[i], ks.scale) for j in range(n)) / n
            for i in range(n)
        ])
        assert np.max(np.abs(svgd_direction(grads, ks) - ref)) <= 1e-12 * max(1.0, np.abs(ref).max())


def test_svgd_single_particle_is_gradient(rng):
    particles, ks = _state(rng, 1, 4)
    g = rng.standard_normal((1, 4))
    assert np.array_equal(svgd_direction(g, ks), g)


def test_coincident_particles_without_gradient_stay_put():
    particles = np.ones((4, 3))
    ks = build_kernel_state(IdentityMetric(), particles)
    assert np.all(svgd_direction(np.zeros((4, 3)), ks) == 0)


def test_svn_direction_matches_loop(rng):
    particles, ks = _state(rng, 5, 3)
    alpha = rng.standard_normal((5, 3))
    ref = np.array([sum(ks.values[j, i] * alpha[j] for j in range(5)) for i in range(5)])
    assert np.allclose(svn_direction(alpha, ks), ref, rtol=0, atol=1e-13)


@pytest.mark.parametrize("kind", ["full", "diagonal"])
def test_svn_hessian_matches_dense_assembly(kind, rng):
    for _ in range(5):
        n, d = int(rng.integers(1, 6)), int(rng.integers(1, 10))
        particles, ks = _state(rng, n, d)
        mats = [_spd(rng, d) for _ in range(n)]
        if kind == "diagonal":
            mats = [np.diag(np.diag(x)) for x in mats]
            curv = [DiagonalCurvature(np.diag(x).copy()) for x in mats]
        else:
            curv = [FullCurvature(x) for x in mats]
        dense = _dense_svn_hessian(particles, ks.scale, mats)
        assert np.allclose(dense, dense.T, atol=1e-13)
        h = SvnHessian(ks, curv)
        for _ in range(5):
            a = rng.standard_normal(n * d)
            ref = dense @ a
            assert np.max(np.abs(h.matvec(a) - ref)) <= 1e-12 * max(1.0, np.abs(ref).max())
        for m in range(n):
            blk = dense[m * d : (m + 1) * d, m * d : (m + 1) * d]
            x = rng.standard_normal(d)
            assert np.allclose(h.block_operator(m)(x), blk @ x, atol=1e-12)


def test_svn_hessian_generic_path_matches_dense(rng):
    arch = MlpArchitecture((2, 3, 2))
    batch = BatchView.full(rng.standard_normal((4, 2)), rng.standard_normal(4))
    n, d = 3, arch.n_params
    particles = 0.3 * rng.standard_normal((n, d))
    curv = [estimate_curvature("kfac", arch, p, batch, 0.5) for p in particles]
    assert isinstance(curv[0], KroneckerCurvature)
    ks = build_kernel_state(IdentityMetric(), particles)
    dense = _dense_svn_hessian(particles, ks.scale, [c.to_dense() for c in curv])
    a = rng.standard_normal(n * d)
    assert np.allclose(SvnHessian(ks, curv).matvec(a), dense @ a, atol=1e-10)
    x = rng.standard_normal(d)
    assert np.allclose(SvnHessian(ks, curv).block_operator(1)(x), dense[d : 2 * d, d : 2 * d] @ x, atol=1e-10)


def test_solves_match_dense(rng):
    n, d = 3, 4
    particles, ks = _state(rng, n, d)
    mats = [_spd(rng, d, 2.0) for _ in range(n)]
    curv = [FullCurvature(x) for x in mats]
    dense = _dense_svn_hessian(particles, ks.scale, mats)
    v = rng.standard_normal((n, d))
    cg = CGConfig(max_iters=200, tol=1e-12, damping=0.0)
    full = solve_full_system(ks, curv, v, cg)
    assert np.allclose(dense @ full.ravel(), v.ravel(), atol=1e-9)
    block = solve_block_diagonal(ks, curv, v, cg)
    for m in range(n):
        blk = dense[m * d : (m + 1) * d, m * d : (m + 1) * d]
        assert np.allclose(block[m], np.linalg.solve(blk, v[m]), atol=1e-9)
    assert np.all(solve_full_system(ks, curv, np.zeros((n, d)), cg) == 0)


def test_full_solve_permutation_equivariant(rng):
    n, d = 4, 3
    particles = rng.standard_normal((n, d))
    mats = [_spd(rng, d, 2.0) for _ in range(n)]
    v = rng.standard_normal((n, d))
    cg = CGConfig(max_iters=200, tol=1e-12, damping=0.0)
    base = solve_full_system(build_kernel_state(IdentityMetric(), particles), [FullCurvature(x) for x in mats], v, cg)
    perm = rng.permutation(n)
    out = solve_full_system(
        build_kernel_state(IdentityMetric(), particles[perm]), [FullCurvature(mats[i]) for i in perm], v[perm], cg
    )
    assert np.allclose(out, base[perm], atol=1e-8)


def test_single_particle_svn_is_newton(rng):
    d = 3
    prec = _spd(rng, d, 1.0)
    mean = rng.standard_normal(d)
    target = GaussianPosterior(mean, prec)
    cfg = MethodConfig(method="svn", step_size=1.0, n_particles=1, cg=CGConfig(max_iters=100, tol=1e-12, damping=0.0))
    p0 = rng.standard_normal((1, d))
    p1, _ = particle_step(target, p0, cfg)
    assert np.allclose(p1[0], mean, atol=1e-8)


def test_zero_step_size_is_identity(rng):
    target = GaussianPosterior(np.zeros(2), np.eye(2))
    p = rng.standard_normal((4, 2))
    for method in ("svgd", "svn", "ensemble"):
        new, _ = particle_step(target, p, MethodConfig(method=method, step_size=0.0))
        assert np.array_equal(new, p)


def test_adam_matches_hand_computation(rng):
    target = GaussianPosterior(np.zeros(2), np.diag([1.0, 4.0]))
    cfg = MethodConfig(method="ensemble", step_size=0.01)
    p = rng.standard_normal((3, 2))
    state = StepState()
    m = v = np.zeros_like(p)
    ref = p.copy()
    for t in range(1, 6):
        g = -ref * np.array([1.0, 4.0])
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref + 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        p, _ = particle_step(target, p, cfg, state)
    assert np.allclose(p, ref, rtol=0, atol=1e-14)


def test_ensemble_first_step_has_step_size_magnitude(rng):
    target = GaussianPosterior(np.zeros(3), np.eye(3))
    p = rng.standard_normal((2, 3))
    new, _ = particle_step(target, p, MethodConfig(method="ensemble", step_size=0.05))
    assert np.allclose(np.abs(new - p), 0.05, rtol=1e-6)


def test_svgd_uses_identity_metric_by_default(rng):
    target = GaussianPosterior(np.zeros(2), np.eye(2))
    p = rng.standard_normal((3, 2))
    ks = build_kernel_state(IdentityMetric(), p)
    got = svgd_update(target, p, MethodConfig(method="svgd"))
    assert np.allclose(got, svgd_direction(-p, ks), atol=1e-14)


def _toy_target(rng, hidden):
    arch = MlpArchitecture((1, *hidden, 2))
    batch = BatchView.full(rng.uniform(-1, 1, (8, 1)), rng.standard_normal(8))
    return arch, NetworkPosterior(arch, batch, PriorSpec(1.0))


def test_ll_svn_front_coordinates_follow_svgd(rng):
    arch, target = _toy_target(rng, (4,))
    p = 0.5 * rng.standard_normal((4, arch.n_params))
    cfg = MethodConfig(method="ll_svn", curvature="full")
    ll = last_layer_slice(arch)
    d_ll = newton_update(target, p, cfg, param_slice=ll)
    d_svgd = svgd_update(target, p, cfg)
    assert np.allclose(d_ll[:, : ll.offset], d_svgd[:, : ll.offset], rtol=0, atol=1e-13)
    assert not np.allclose(d_ll[:, ll.offset :], d_svgd[:, ll.offset :])


def test_ll_svn_without_hidden_layer_is_svn(rng):
    arch, target = _toy_target(rng, ())
    p = rng.standard_normal((3, arch.n_params))
    for curv in ("full", "kfac"):
        a, _ = particle_step(target, p, MethodConfig(method="ll_svn", curvature=curv, kernel_metric="identity"))
        b, _ = particle_step(target, p, MethodConfig(method="svn", curvature=curv, kernel_metric="identity"))
        assert np.array_equal(a, b)


def _toy_split():
    return standardize(toy_regression(seed=0, n_train=40, n_val=10, n_test=20, blob_points=10))


@pytest.mark.parametrize("method", ["ensemble", "svgd", "svn", "ll_svn"])
def test_train_history(method):
    data = _toy_split()
    res = train(data, MethodConfig(method=method, epochs=3, step_size=1e-3, n_particles=3, batch_size=16))
    assert [h["epoch"] for h in res.history] == [1, 2, 3]
    assert all(np.isfinite(h["train_loss"]) and np.isfinite(h["val_nll"]) for h in res.history)
    assert 1 <= res.best_epoch <= 3
    assert res.ensemble.particles.shape == (3, res.ensemble.arch.n_params)


def test_train_zero_epochs_returns_initial():
    data = _toy_split()
    cfg = MethodConfig(method="svn", epochs=0, n_particles=2)
    res = train(data, cfg)
    again = train(data, cfg)
    assert res.history == [] and res.best_epoch == 0
    assert np.array_equal(res.ensemble.particles, again.ensemble.particles)
    assert np.array_equal(res.ensemble.particles, res.final.particles)


def test_train_is_deterministic():
    data = _toy_split()
    cfg = MethodConfig(method="svn", epochs=2, n_particles=2, step_size=1e-2)
    a, b = train(data, cfg), train(data, cfg)
    assert np.array_equal(a.ensemble.particles, b.ensemble.particles)
    assert [h["val_nll"] for h in a.history] == [h["val_nll"] for h in b.history]


def test_full_curvature_dimension_guard():
    data = _toy_split()
    with pytest.raises(ValueError):
        train(data, MethodConfig(method="svn", epochs=1, hidden=(50,), max_full_dim=100))


def test_config_validation():
    with pytest.raises(ValueError):
        MethodConfig(method="hmc")
    with pytest.raises(ValueError):
        MethodConfig(n_particles=0)
    with pytest.raises(ValueError):
        MethodConfig.from_dict({"method": "svn", "learning_rate": 1.0})
    cfg = MethodConfig(method="svn", cg={"max_iters": 7})
    assert cfg.cg.max_iters == 7
    assert MethodConfig.from_dict(cfg.to_dict()) == cfg
    assert MethodConfig(method="ll_svn").curvature_kind == "kfac"
    assert MethodConfig(method="svgd").metric_kind == "identity"


def test_particle_ensemble_init():
    arch = MlpArchitecture((1, 3, 2))
    a = ParticleEnsemble.initialize(arch, 4, 7)
    b = ParticleEnsemble.initialize(arch, 4, 7)
    assert np.array_equal(a.particles, b.particles)
    assert len({tuple(p) for p in a.particles}) == 4
