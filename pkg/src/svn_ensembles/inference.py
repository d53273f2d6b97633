"""Particle updates (deep ensemble, SVGD, SVN, last-layer SVN) and training.

Directions are ascent directions on ``log pi``; every method applies
``phi_i <- phi_i + step_size * v_i`` (Adam for the ensemble baseline).
Curvature estimates follow the sign convention of :mod:`.curvature`, so the
SVN-Hessian blocks read ``(1/N) sum_p [k_pm k_pn H_p + grad k_pn grad k_pm']``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from ._backend import kernels as _k
from .curvature import CurvatureEstimate, DiagonalCurvature, FullCurvature, mean_curvature
from .kernels import CurvatureMetric, IdentityMetric, KernelState, build_kernel_state
from .linalg import LinearOperator, SolverBreakdown, conjugate_gradient
from .nn import LayerSlice, MlpArchitecture, init_params, last_layer_slice
from .posterior import BatchView, PriorSpec
from .targets import NetworkPosterior

log = logging.getLogger(__name__)

METHODS = ("ensemble", "svgd", "svn", "ll_svn")
CURVATURES = ("full", "diagonal", "kfac")
SYSTEMS = ("full", "block_diagonal")
METRICS = ("identity", "avg_curvature")
MAX_RETRIES = 5


class StepRejected(RuntimeError):
    pass


class TrainingError(RuntimeError):
    """A step failed; ``history`` and ``ensemble`` hold the state before it."""

    def __init__(self, message, history, ensemble):
        super().__init__(message)
        self.history = history
        self.ensemble = ensemble


@dataclass
class CGConfig:
    max_iters: int = 50
    tol: float = 1e-6
    damping: float = 1e-6


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class MethodConfig:
    method: str = "svn"
    # None picks the method default: full for svn, kfac for ll_svn
    curvature: str | None = None
    svn_system: str = "full"
    # None picks avg_curvature for svn, identity otherwise
    kernel_metric: str | None = None
    bandwidth: str = "dimension"
    step_size: float = 0.1
    epochs: int = 50
    batch_size: int = 16
    n_particles: int = 5
    seed: int = 0
    prior_precision: float = 1.0
    hidden: tuple[int, ...] = (10,)
    activation: str = "tanh"
    head: str | None = None
    curvature_refresh: int = 1
    max_full_dim: int = 5000
    cg: CGConfig = field(default_factory=CGConfig)
    adam: AdamConfig = field(default_factory=AdamConfig)

    def __post_init__(self):
        if isinstance(self.cg, dict):
            self.cg = CGConfig(**self.cg)
        if isinstance(self.adam, dict):
            self.adam = AdamConfig(**self.adam)
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.curvature is not None and self.curvature not in CURVATURES:
            raise ValueError(f"unknown curvature {self.curvature!r}; choose from {CURVATURES}")
        if self.svn_system not in SYSTEMS:
            raise ValueError(f"unknown svn_system {self.svn_system!r}")
        if self.kernel_metric is not None and self.kernel_metric not in METRICS:
            raise ValueError(f"unknown kernel_metric {self.kernel_metric!r}")
        if self.bandwidth not in ("dimension", "median"):
            raise ValueError(f"unknown bandwidth {self.bandwidth!r}")
        if self.n_particles < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("n_particles and batch_size must be >= 1, epochs >= 0")
        if not self.step_size >= 0:
            raise ValueError("step_size must be non-negative")
        if self.curvature_refresh < 1:
            raise ValueError("curvature_refresh must be >= 1")

    @property
    def curvature_kind(self) -> str:
        if self.curvature is not None:
            return self.curvature
        return "kfac" if self.method == "ll_svn" else "full"

    @property
    def metric_kind(self) -> str:
        if self.kernel_metric is not None:
            return self.kernel_metric
        return "avg_curvature" if self.method == "svn" else "identity"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MethodConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown method config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ParticleEnsemble:
    arch: MlpArchitecture
    particles: np.ndarray

    def __post_init__(self):
        self.particles = np.atleast_2d(np.asarray(self.particles, dtype=np.float64))
        if self.particles.shape[1] != self.arch.n_params:
            raise ValueError(
                f"particles have {self.particles.shape[1]} entries, architecture needs {self.arch.n_params}"
            )

    @property
    def n(self) -> int:
        return self.particles.shape[0]

    @classmethod
    def initialize(cls, arch: MlpArchitecture, n: int, seed: int) -> "ParticleEnsemble":
        seqs = np.random.SeedSequence(seed).spawn(n)
        return cls(arch, np.stack([init_params(arch, np.random.default_rng(s)) for s in seqs]))

    def copy(self) -> "ParticleEnsemble":
        return ParticleEnsemble(self.arch, self.particles.copy())


@dataclass
class StepInfo:
    cg_iters: int = 0
    rejections: int = 0
    fallbacks: int = 0
    train_loss: float = float("nan")
    direction: np.ndarray | None = None


@dataclass
class StepState:
    """Mutable per-run state: curvature cache and Adam moments."""

    step: int = 0
    curvatures: list | None = None
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None
    adam_t: int = 0


# -- directions ----------------------------------------------------------------


def svgd_direction(grads: np.ndarray, ks: KernelState) -> np.ndarray:
    """``v_i = (1/N) sum_j [k(phi_j, phi_i) grad log pi(phi_j) + grad_{phi_j} k(phi_j, phi_i)]``."""
    grads = np.ascontiguousarray(grads, dtype=np.float64)
    return np.asarray(_k.svgd_direction(ks.values, ks.grads, grads))


def svn_direction(alpha: np.ndarray, ks: KernelState) -> np.ndarray:
    """``v_i = sum_j k(phi_j, phi_i) alpha_j``."""
    alpha = np.asarray(alpha, dtype=np.float64).reshape(ks.n, -1)
    return ks.values.T @ alpha


class SvnHessian:
    """Matrix-free SVN-Hessian over ``N`` particles of dimension ``d``."""

    def __init__(self, ks: KernelState, curvatures: Sequence[CurvatureEstimate]):
        if len(curvatures) != ks.n:
            raise ValueError(f"{len(curvatures)} curvatures for {ks.n} particles")
        self.ks = ks
        self.curvatures = list(curvatures)
        self.n = ks.n
        self.d = ks.grads.shape[2]
        kinds = {type(c) for c in self.curvatures}
        self._dense = self._diag = None
        if kinds == {FullCurvature}:
            self._dense = np.ascontiguousarray(np.stack([c.matrix for c in self.curvatures]))
        elif kinds == {DiagonalCurvature}:
            self._diag = np.ascontiguousarray(np.stack([c.diag for c in self.curvatures]))

    def matvec(self, alpha: np.ndarray) -> np.ndarray:
        a = np.ascontiguousarray(np.asarray(alpha, dtype=np.float64).reshape(self.n, self.d))
        vals, grads = self.ks.values, self.ks.grads
        if self._dense is not None:
            out = _k.svn_matvec_dense(vals, grads, self._dense, a)
        elif self._diag is not None:
            out = _k.svn_matvec_diag(vals, grads, self._diag, a)
        else:
            u = vals @ a
            w = np.stack([c.hvp(u[p]) for p, c in enumerate(self.curvatures)])
            out = vals.T @ w / self.n + np.asarray(_k.repulsion_matvec(grads, a))
        return np.asarray(out).ravel()

    def operator(self) -> LinearOperator:
        return LinearOperator(self.n * self.d, self.matvec)

    def block_operator(self, m: int) -> LinearOperator:
        """Diagonal block ``h^{mm}``."""
        w = self.ks.values[:, m] ** 2
        a = self.ks.grads[:, m, :]
        n = self.n
        if self._dense is not None:
            block = (np.tensordot(w, self._dense, axes=1) + a.T @ a) / n
            return LinearOperator(self.d, lambda x: block @ x)
        if self._diag is not None:
            dvec = w @ self._diag / n

            def apply(x):
                return dvec * x + a.T @ (a @ x) / n

            return LinearOperator(self.d, apply)

        def apply(x):
            acc = a.T @ (a @ x)
            for p, c in enumerate(self.curvatures):
                if w[p] != 0.0:
                    acc = acc + w[p] * c.hvp(x)
            return acc / n

        return LinearOperator(self.d, apply)


def svn_hessian_matvec(alpha: np.ndarray, ks: KernelState, curvatures: Sequence[CurvatureEstimate]) -> np.ndarray:
    return SvnHessian(ks, curvatures).matvec(alpha)


def solve_block_diagonal(
    ks: KernelState,
    curvatures: Sequence[CurvatureEstimate],
    v_svgd: np.ndarray,
    cg: CGConfig | None = None,
    info: StepInfo | None = None,
    hessian: SvnHessian | None = None,
) -> np.ndarray:
    """Solve ``h^{mm} alpha_m = v_m`` per particle; identity fallback on breakdown."""
    cg = cg or CGConfig()
    info = info if info is not None else StepInfo()
    h = hessian or SvnHessian(ks, curvatures)
    v = np.asarray(v_svgd, dtype=np.float64).reshape(h.n, h.d)
    alpha = np.empty_like(v)
    for m in range(h.n):
        try:
            res = conjugate_gradient(h.block_operator(m), v[m], cg.max_iters, cg.tol, cg.damping)
            alpha[m] = res.x
            info.cg_iters += res.iters
        except SolverBreakdown as exc:
            log.warning("block solve for particle %d broke down (%s); using the SVGD direction", m, exc)
            info.fallbacks += 1
            alpha[m] = v[m]
    return alpha


def solve_full_system(
    ks: KernelState,
    curvatures: Sequence[CurvatureEstimate],
    v_svgd: np.ndarray,
    cg: CGConfig | None = None,
    info: StepInfo | None = None,
    hessian: SvnHessian | None = None,
) -> np.ndarray:
    """Solve ``H_svn alpha = v_svgd`` matrix-free; block-diagonal fallback on breakdown."""
    cg = cg or CGConfig()
    info = info if info is not None else StepInfo()
    h = hessian or SvnHessian(ks, curvatures)
    v = np.asarray(v_svgd, dtype=np.float64).reshape(h.n, h.d)
    try:
        # the coupled operator is symmetric but not PSD in general; plain
        # truncated CG damps its near-null directions, exact solves amplify them
        res = conjugate_gradient(
            h.operator(), v.ravel(), cg.max_iters, cg.tol, cg.damping, indefinite_ok=True, reorthogonalize=False
        )
    except SolverBreakdown as exc:
        log.warning("full SVN solve broke down (%s); falling back to block-diagonal", exc)
        info.fallbacks += 1
        return solve_block_diagonal(ks, curvatures, v, cg, info, h)
    info.cg_iters += res.iters
    return res.x.reshape(h.n, h.d)


# -- steps ----------------------------------------------------------------------


def _metric(kind, curvatures, offset):
    if kind == "identity":
        return IdentityMetric()
    return CurvatureMetric(mean_curvature(curvatures), offset)


def _curvatures(target, particles, cfg, state, param_slice):
    refresh = state is None or state.curvatures is None or state.step % cfg.curvature_refresh == 0
    if refresh:
        curv = [target.curvature(p, cfg.curvature_kind, param_slice) for p in particles]
        if state is not None:
            state.curvatures = curv
        return curv
    return state.curvatures


def svgd_update(target, particles: np.ndarray, cfg: MethodConfig, state: StepState | None = None, info=None):
    info = info if info is not None else StepInfo()
    grads = np.stack([target.grad(p) for p in particles])
    metric = IdentityMetric()
    if cfg.metric_kind == "avg_curvature":
        metric = _metric("avg_curvature", _curvatures(target, particles, cfg, state, None), 0)
    ks = build_kernel_state(metric, particles, cfg.bandwidth)
    return svgd_direction(grads, ks)


def newton_update(
    target,
    particles: np.ndarray,
    cfg: MethodConfig,
    state: StepState | None = None,
    info: StepInfo | None = None,
    param_slice: LayerSlice | None = None,
) -> np.ndarray:
    """SVN direction, restricted to ``param_slice`` (SVGD elsewhere) if given."""
    info = info if info is not None else StepInfo()
    d = particles.shape[1]
    lo, hi = (0, d) if param_slice is None else (param_slice.offset, param_slice.stop)
    grads = np.stack([target.grad(p) for p in particles])
    curv = _curvatures(target, particles, cfg, state, param_slice)
    ks = build_kernel_state(_metric(cfg.metric_kind, curv, lo), particles, cfg.bandwidth)
    v_svgd = svgd_direction(grads, ks)
    ks_sub = ks.restrict(lo, hi)
    rhs = np.ascontiguousarray(v_svgd[:, lo:hi])
    hess = SvnHessian(ks_sub, curv)
    if cfg.svn_system == "full":
        alpha = solve_full_system(ks_sub, curv, rhs, cfg.cg, info, hess)
    else:
        alpha = solve_block_diagonal(ks_sub, curv, rhs, cfg.cg, info, hess)
    direction = v_svgd.copy()
    direction[:, lo:hi] = svn_direction(alpha, ks_sub)
    return direction


def _apply(target, particles, direction, step_size, info):
    eps = step_size
    for attempt in range(MAX_RETRIES + 1):
        new = particles + eps * direction
        if all(target.is_finite(p) for p in new):
            return new
        info.rejections += 1
        eps *= 0.5
    raise StepRejected(f"update stayed non-finite after {MAX_RETRIES} step-size halvings")


def particle_step(target, particles: np.ndarray, cfg: MethodConfig, state: StepState | None = None):
    """One synchronised update of all particles; returns ``(new_particles, info)``."""
    state = state if state is not None else StepState()
    info = StepInfo()
    particles = np.asarray(particles, dtype=np.float64)
    info.train_loss = float(np.mean([target.mean_nll(p) for p in particles]))
    if cfg.method == "ensemble":
        new = _adam_update(target, particles, cfg, state)
        if not all(target.is_finite(p) for p in new):
            raise StepRejected("Adam update produced non-finite parameters")
        info.direction = new - particles
    else:
        if cfg.method == "svgd":
            direction = svgd_update(target, particles, cfg, state, info)
        elif cfg.method == "svn":
            direction = newton_update(target, particles, cfg, state, info)
        else:
            direction = newton_update(target, particles, cfg, state, info, _last_slice(target, particles))
        info.direction = direction
        new = _apply(target, particles, direction, cfg.step_size, info)
    state.step += 1
    return new, info


def _last_slice(target, particles):
    arch = getattr(target, "arch", None)
    if arch is None:
        raise ValueError("ll_svn needs a network target with a last layer")
    return last_layer_slice(arch)


def _adam_update(target, particles, cfg, state):
    grads = np.stack([target.grad(p) for p in particles])
    if state.adam_m is None:
        state.adam_m = np.zeros_like(particles)
        state.adam_v = np.zeros_like(particles)
        state.adam_t = 0
    b1, b2, eps = cfg.adam.beta1, cfg.adam.beta2, cfg.adam.eps
    state.adam_t += 1
    state.adam_m = b1 * state.adam_m + (1 - b1) * grads
    state.adam_v = b2 * state.adam_v + (1 - b2) * grads * grads
    m_hat = state.adam_m / (1 - b1**state.adam_t)
    v_hat = state.adam_v / (1 - b2**state.adam_t)
    # ascent on log pi
    return particles + cfg.step_size * m_hat / (np.sqrt(v_hat) + eps)


def _network_step(ensemble, batch, cfg, state, method):
    target = NetworkPosterior(ensemble.arch, batch, PriorSpec(cfg.prior_precision), cfg.max_full_dim)
    new, info = particle_step(target, ensemble.particles, replace(cfg, method=method), state)
    return ParticleEnsemble(ensemble.arch, new), info


def svgd_step(ensemble: ParticleEnsemble, batch: BatchView, cfg: MethodConfig, state: StepState | None = None):
    return _network_step(ensemble, batch, cfg, state, "svgd")[0]


def svn_step(ensemble: ParticleEnsemble, batch: BatchView, cfg: MethodConfig, state: StepState | None = None):
    return _network_step(ensemble, batch, cfg, state, "svn")[0]


def ll_svn_step(ensemble: ParticleEnsemble, batch: BatchView, cfg: MethodConfig, state: StepState | None = None):
    return _network_step(ensemble, batch, cfg, state, "ll_svn")[0]


def ensemble_map_step(ensemble: ParticleEnsemble, batch: BatchView, cfg: MethodConfig, state: StepState):
    """Independent Adam step per particle on ``-log pi``; ``state`` carries the moments."""
    return _network_step(ensemble, batch, cfg, state, "ensemble")[0]


# -- training -------------------------------------------------------------------


@dataclass
class TrainResult:
    ensemble: ParticleEnsemble
    history: list
    best_epoch: int
    final: ParticleEnsemble


def build_architecture(cfg: MethodConfig, n_inputs: int, task: str, n_classes: int = 2) -> MlpArchitecture:
    if task == "regression":
        head = cfg.head or "gaussian_regression"
        k = 2 if head == "gaussian_regression" else 1
    elif task == "binary":
        head, k = "binary_classification", 1
    else:
        head, k = "multiclass", n_classes
    return MlpArchitecture((n_inputs, *cfg.hidden, k), cfg.activation, head)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def train(
    data,
    cfg: MethodConfig,
    callback: Callable[[int, ParticleEnsemble], None] | None = None,
    ensemble: ParticleEnsemble | None = None,
) -> TrainResult:
    """Epoch loop over shuffled minibatches, keeping the best-validation ensemble.

    ``callback(epoch, ensemble)`` runs after every epoch. History records hold
    ``epoch, train_loss, val_nll, wall_time, rejections, cg_iters, fallbacks``.
    """
    from .metrics import validation_nll

    shuffle_seq, init_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    if ensemble is None:
        arch = build_architecture(cfg, data.x_train.shape[1], data.task, data.n_classes)
        ensemble = ParticleEnsemble.initialize(arch, cfg.n_particles, int(init_seq.generate_state(1)[0]))
    arch = ensemble.arch
    if cfg.method in ("svn", "ll_svn") and cfg.curvature_kind == "full":
        limit = arch.n_params if cfg.method == "svn" else last_layer_slice(arch).length
        if limit > cfg.max_full_dim:
            raise ValueError(f"full curvature needs d={limit} <= max_full_dim={cfg.max_full_dim}")
    rng = np.random.default_rng(shuffle_seq)
    prior = PriorSpec(cfg.prior_precision)
    state = StepState()
    n = data.x_train.shape[0]
    history = []
    best, best_nll, best_epoch = ensemble.copy(), np.inf, 0
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        totals = {"loss": 0.0, "rows": 0, "rejections": 0, "cg_iters": 0, "fallbacks": 0}
        for idx in _batches(n, cfg.batch_size, rng):
            batch = BatchView(data.x_train[idx], data.y_train[idx], n)
            target = NetworkPosterior(arch, batch, prior, cfg.max_full_dim)
            try:
                new, info = particle_step(target, ensemble.particles, cfg, state)
            except Exception as exc:
                raise TrainingError(f"epoch {epoch}: {exc}", history, ensemble) from exc
            ensemble = ParticleEnsemble(arch, new)
            totals["loss"] += info.train_loss * len(idx)
            totals["rows"] += len(idx)
            totals["rejections"] += info.rejections
            totals["cg_iters"] += info.cg_iters
            totals["fallbacks"] += info.fallbacks
        val = validation_nll(ensemble, data)
        record = {
            "epoch": epoch,
            "train_loss": totals["loss"] / max(totals["rows"], 1),
            "val_nll": val,
            "wall_time": time.perf_counter() - start,
            "rejections": totals["rejections"],
            "cg_iters": totals["cg_iters"],
            "fallbacks": totals["fallbacks"],
        }
        history.append(record)
        log.info(
            "epoch %d train_loss %.6g val_nll %.6g rejections %d cg_iters %d",
            epoch, record["train_loss"], val, record["rejections"], record["cg_iters"],
        )
        if np.isfinite(val) and val < best_nll:
            best, best_nll, best_epoch = ensemble.copy(), val, epoch
        if callback is not None:
            callback(epoch, ensemble)
    if best_epoch == 0:
        best = ensemble.copy()
    return TrainResult(best, history, best_epoch, ensemble)
