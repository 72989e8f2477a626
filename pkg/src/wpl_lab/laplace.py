"""Numerical check of the Laplace/Schur-complement marginalization.

Everything is in log scale.  The Gaussian prior N(0, sigma2 I) enters the
penalized log-likelihood ``l_p = l - |theta|^2 / (2 sigma2)`` *without* its
normalizing constant, on both the closed-form and the brute-force side, so
the two are directly comparable.

Parameter vectors are laid out as ``theta = concat(theta_1, theta_s)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .autodiff import Graph, Node, backward, forward

LOG_2PI = float(np.log(2.0 * np.pi))
MAX_CONDITION = 1e12
BOUNDARY_MASS = 1e-12


class SingularBlockError(np.linalg.LinAlgError):
    pass


class GridTooSmallError(ValueError):
    pass


@dataclass
class LaplaceModel:
    log_likelihood: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    sigma2: float
    p1: int
    ps: int
    mle: np.ndarray
    # optional vectorized form: (..., p) -> (...)
    batch_log_likelihood: Callable[[np.ndarray], np.ndarray] | None = None
    stationarity_tol: float = 1e-8

    def __post_init__(self):
        if not np.isfinite(self.sigma2) or self.sigma2 <= 0:
            raise ValueError("sigma2 must be finite and positive")
        self.mle = np.asarray(self.mle, dtype=np.float64)
        if self.mle.shape != (self.p1 + self.ps,):
            raise ValueError(f"mle has shape {self.mle.shape}, expected ({self.p1 + self.ps},)")
        gnorm = float(np.linalg.norm(self.grad_lp(self.mle)))
        if gnorm > self.stationarity_tol:
            raise ValueError(f"mle is not stationary for l_p: |grad| = {gnorm:.3e}")

    @property
    def p(self) -> int:
        return self.p1 + self.ps

    def lp(self, theta: np.ndarray) -> float:
        theta = np.asarray(theta, dtype=np.float64)
        return float(self.log_likelihood(theta)) - float(theta @ theta) / (2.0 * self.sigma2)

    def lp_batch(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        if self.batch_log_likelihood is not None:
            ll = np.asarray(self.batch_log_likelihood(theta), dtype=np.float64)
        else:
            flat = theta.reshape(-1, theta.shape[-1])
            ll = np.array([self.log_likelihood(t) for t in flat]).reshape(theta.shape[:-1])
        return ll - np.sum(theta * theta, axis=-1) / (2.0 * self.sigma2)

    def grad_lp(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        return np.asarray(self.grad(theta), dtype=np.float64) - theta / self.sigma2


@dataclass(frozen=True)
class BlockHessian:
    H11: np.ndarray
    H1s: np.ndarray
    Hs1: np.ndarray
    Hss: np.ndarray

    @classmethod
    def partition(cls, H: np.ndarray, p1: int, symmetric_tol: float = 1e-10) -> "BlockHessian":
        H = np.asarray(H, dtype=np.float64)
        if H.ndim != 2 or H.shape[0] != H.shape[1] or not 0 < p1 < H.shape[0]:
            raise ValueError(f"cannot partition {H.shape} at p1={p1}")
        blocks = cls(H[:p1, :p1].copy(), H[:p1, p1:].copy(), H[p1:, :p1].copy(), H[p1:, p1:].copy())
        scale = max(1.0, float(np.max(np.abs(H))))
        if np.max(np.abs(blocks.Hs1 - blocks.H1s.T)) > symmetric_tol * scale:
            raise ValueError("source Hessian is not symmetric: Hs1 != H1s^T")
        return blocks

    @property
    def p1(self) -> int:
        return self.H11.shape[0]

    @property
    def ps(self) -> int:
        return self.Hss.shape[0]


def quadratic_model(Q, b, c: float, sigma2: float, p1: int) -> LaplaceModel:
    """``l(theta) = c + b.theta - theta.Q.theta / 2`` with its exact mode for ``l_p``."""
    Q = np.asarray(Q, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    p = len(b)
    mle = np.linalg.solve(Q + np.eye(p) / sigma2, b)

    def ll(t):
        return c + t @ b - 0.5 * t @ Q @ t

    def batch(t):
        return c + t @ b - 0.5 * np.einsum("...i,ij,...j->...", t, Q, t)

    def grad(t):
        return b - Q @ t

    return LaplaceModel(ll, grad, sigma2, p1, p - p1, mle, batch_log_likelihood=batch)


def find_mode(grad_lp: Callable[[np.ndarray], np.ndarray], x0, tol: float = 1e-10, max_iter: int = 100) -> np.ndarray:
    """Newton iterations on the stationarity condition, Hessian by finite differences."""
    x = np.array(x0, dtype=np.float64)
    for _ in range(max_iter):
        g = grad_lp(x)
        if np.linalg.norm(g) <= tol:
            return x
        J = _fd_jacobian(grad_lp, x, 1e-5)
        step = np.linalg.solve(-J, g)
        # damped: halve until l_p's gradient norm decreases
        t = 1.0
        while t > 1e-8 and np.linalg.norm(grad_lp(x + t * step)) > np.linalg.norm(g):
            t *= 0.5
        x = x + t * step
    if np.linalg.norm(grad_lp(x)) > tol:
        raise RuntimeError("mode search did not converge")
    return x


def _fd_jacobian(fn, x, h):
    p = len(x)
    J = np.empty((p, p))
    for j in range(p):
        e = np.zeros(p)
        e[j] = h
        J[:, j] = (fn(x + e) - fn(x - e)) / (2.0 * h)
    return J


def graph_log_likelihood(graph: Graph, nll: Node, bindings: dict, param: str, shape: tuple):
    """Wrap a graph computing a *negative* log-likelihood of one parameter array.

    Returns ``(log_likelihood, grad)`` over the flattened parameter, with the
    gradient from reverse-mode differentiation.
    """
    def ll(theta):
        vals = forward(graph, {**bindings, param: np.reshape(theta, shape)})
        return -float(vals[nll])

    def grad(theta):
        vals = forward(graph, {**bindings, param: np.reshape(theta, shape)})
        return -backward(graph, vals, nll)[param].reshape(-1)

    return ll, grad


def logistic_model(x, y, sigma2: float = 1.0) -> LaplaceModel:
    """Logistic regression ``P(y=1) = sigmoid(theta_1 x + theta_s)`` (p1 = ps = 1).

    The likelihood is expressed as a two-class softmax graph, so its gradient
    comes from the autodiff engine.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = len(x)
    g = Graph()
    design = g.input("design")
    theta = g.param("theta")
    z = g.matmul(design, theta)  # (n, 1)
    logits = g.matmul(z, g.input("embed"))  # (n, 2) = [z, 0]
    nll = g.scale(g.softmax_cross_entropy(logits, g.input("target")), float(n))
    target = np.zeros((n, 2))
    target[np.arange(n), 1 - y] = 1.0
    bindings = {"design": np.stack([x, np.ones(n)], axis=1), "embed": np.array([[1.0, 0.0]]), "target": target}
    ll, grad = graph_log_likelihood(g, nll, bindings, "theta", (2, 1))
    mle = find_mode(lambda t: grad(t) - t / sigma2, np.zeros(2), tol=1e-11)

    def batch(t):
        zz = t[..., :1] * x + t[..., 1:]
        return np.sum(np.where(y == 1, -np.logaddexp(0.0, -zz), -np.logaddexp(0.0, zz)), axis=-1)

    return LaplaceModel(ll, grad, sigma2, 1, 1, mle, batch_log_likelihood=batch)


def negative_hessian_lp(model: LaplaceModel, step: float = 1e-4) -> np.ndarray:
    """``H_p`` at the mode by central differences of the gradient, symmetrized."""
    M = -_fd_jacobian(model.grad_lp, model.mle, step)
    if not np.all(np.isfinite(M)):
        raise FloatingPointError("non-finite Hessian entries")
    return 0.5 * (M + M.T)


def schur_omega(blocks: BlockHessian) -> np.ndarray:
    """``Hss - H1s^T H11^{-1} H1s``."""
    cond = np.linalg.cond(blocks.H11)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularBlockError(f"H11 is (near-)singular: condition number {cond:.3e}")
    return blocks.Hss - blocks.H1s.T @ np.linalg.solve(blocks.H11, blocks.H1s)


def closed_form_A(model: LaplaceModel, blocks: BlockHessian, theta_s) -> float:
    """Log of the marginal over theta_1 via the Schur complement (Laplace form)."""
    v = np.asarray(theta_s, dtype=np.float64) - model.mle[model.p1 :]
    omega = schur_omega(blocks)
    sign, logdet = np.linalg.slogdet(blocks.H11)
    if sign <= 0:
        raise SingularBlockError("H11 is not positive definite")
    return model.lp(model.mle) - 0.5 * float(v @ omega @ v) + 0.5 * model.p1 * LOG_2PI - 0.5 * logdet


@dataclass(frozen=True)
class GridSpec:
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    points: int

    def __post_init__(self):
        if len(self.lower) != len(self.upper) or self.points < 3:
            raise ValueError("invalid grid")
        if any(hi <= lo for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("grid bounds must satisfy lower < upper")

    @property
    def dim(self) -> int:
        return len(self.lower)

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, self.points) for lo, hi in zip(self.lower, self.upper)]

    def mesh(self) -> np.ndarray:
        """All grid points, shape ``(points,) * dim + (dim,)``."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def log_weights(self) -> np.ndarray:
        """Log trapezoid weights (including cell size) on the mesh."""
        out = np.zeros((self.points,) * self.dim)
        for d, (lo, hi) in enumerate(zip(self.lower, self.upper)):
            w = np.full(self.points, (hi - lo) / (self.points - 1))
            w[0] *= 0.5
            w[-1] *= 0.5
            shape = [1] * self.dim
            shape[d] = self.points
            out = out + np.log(w).reshape(shape)
        return out

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros((self.points,) * self.dim, dtype=bool)
        for d in range(self.dim):
            idx = [slice(None)] * self.dim
            idx[d] = 0
            mask[tuple(idx)] = True
            idx[d] = -1
            mask[tuple(idx)] = True
        return mask


DEFAULT_POINTS = {1: 2001, 2: 401, 3: 121}


def log_integrate(log_f: np.ndarray, grid: GridSpec, axes: tuple[int, ...] | None = None) -> np.ndarray:
    """Trapezoid rule in log space over the leading ``grid.dim`` axes of ``log_f``.

    Raises :class:`GridTooSmallError` when the boundary carries more than
    ``BOUNDARY_MASS`` of the total.
    """
    k = grid.dim
    lw = grid.log_weights().reshape(grid.log_weights().shape + (1,) * (log_f.ndim - k))
    terms = log_f + lw
    red = tuple(range(k))
    total = logsumexp(terms, axis=red)
    mask = grid.boundary_mask().reshape(lw.shape)
    edge = logsumexp(np.where(mask, terms, -np.inf), axis=red)
    if np.any(edge - total > np.log(BOUNDARY_MASS)):
        raise GridTooSmallError(
            f"boundary holds {np.exp(np.max(edge - total)):.2e} of the integrand mass; widen the grid"
        )
    return total


def auto_grid(model: LaplaceModel, theta_s, n_std: float = 10.0, points: int | None = None) -> GridSpec:
    """Grid over theta_1 around the conditional mode at this theta_s.

    Placement only; whether it is wide enough is checked by the boundary-mass
    test inside :func:`brute_force_A`.
    """
    ts = np.asarray(theta_s, dtype=np.float64)
    p1 = model.p1

    def cond_grad(t1):
        return model.grad_lp(np.concatenate([t1, ts]))[:p1]

    center = find_mode(cond_grad, model.mle[:p1])
    curv = -_fd_jacobian(cond_grad, center, 1e-4)
    cov = np.linalg.inv(0.5 * (curv + curv.T))
    half = n_std * np.sqrt(np.max(np.diag(cov)))
    return GridSpec(tuple(center - half), tuple(center + half), points or DEFAULT_POINTS.get(p1, 61))


def brute_force_A(model: LaplaceModel, theta_s, grid: GridSpec | None = None) -> float:
    """Log of ``integral exp(l_p(theta_1, theta_s)) dtheta_1`` by grid quadrature."""
    if model.p1 > 3:
        raise ValueError("brute-force integration is limited to p1 <= 3")
    ts = np.asarray(theta_s, dtype=np.float64)
    grid = grid or auto_grid(model, ts)
    if grid.dim != model.p1:
        raise ValueError(f"grid dimension {grid.dim} != p1 {model.p1}")
    pts = grid.mesh()
    full = np.concatenate([pts, np.broadcast_to(ts, pts.shape[:-1] + ts.shape)], axis=-1)
    return float(log_integrate(model.lp_batch(full), grid))


# --- factorization check over two models ----------------------------------

@dataclass
class ModelPair:
    """Joint log-likelihood ``log p(D | theta_1, theta_2, theta_s)`` for two models.

    ``log_likelihood(t1, t2, ts)`` must broadcast over leading axes, with the
    trailing axis holding the coordinates.
    """

    log_likelihood: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    p1: int
    p2: int
    ps: int
    sigma2: float = 1.0

    def log_prior(self, t: np.ndarray) -> np.ndarray:
        d = t.shape[-1]
        return -np.sum(t * t, axis=-1) / (2.0 * self.sigma2) - 0.5 * d * np.log(2.0 * np.pi * self.sigma2)


@dataclass(frozen=True)
class FactorizationGrid:
    """Evaluation points per block and integration grids for theta_1 and theta_2."""

    eval1: GridSpec
    eval2: GridSpec
    evals: GridSpec
    int1: GridSpec
    int2: GridSpec


def _flat(grid: GridSpec) -> np.ndarray:
    return grid.mesh().reshape(-1, grid.dim)


def _integrate_flat(log_f: np.ndarray, grid: GridSpec) -> np.ndarray:
    return log_integrate(log_f.reshape((grid.points,) * grid.dim + log_f.shape[1:]), grid)


def verify_factorization(pair: ModelPair, grid: FactorizationGrid, posterior_numerator: bool = True) -> float:
    """Spread (max - min) of ``log LHS - log RHS`` over the evaluation grid.

    LHS is the joint posterior ``p(D|theta) p(theta)``.  RHS is

        p(D|theta_2,theta_s) p(theta_1,theta_s|D) p(theta_2,theta_s) / integral p(D|theta_1,theta_s) p(theta_1,theta_s) dtheta_1

    with ``p(theta_1,theta_s|D)`` taken up to a constant as
    ``p(D|theta_1,theta_s) p(theta_1,theta_s)``.  Passing
    ``posterior_numerator=False`` uses the prior ``p(theta_1,theta_s)`` in the
    numerator instead, which is not proportional to the posterior in general.
    The marginal likelihoods ``p(D|theta_k,theta_s)`` are integrated
    numerically against the Gaussian prior of the other private block.
    """
    e1, e2, es = _flat(grid.eval1), _flat(grid.eval2), _flat(grid.evals)
    i1, i2 = _flat(grid.int1), _flat(grid.int2)
    ll = pair.log_likelihood
    lp = pair.log_prior

    def marg1(t1):  # log p(D | t1, ts) for all eval theta_s: (len(t1), len(es))
        vals = ll(t1[:, None, None, :], i2[None, :, None, :], es[None, None, :, :]) + lp(i2)[None, :, None]
        return _integrate_flat(np.moveaxis(vals, 1, 0), grid.int2)

    def marg2(t2):  # log p(D | t2, ts): (len(t2), len(es))
        vals = ll(i1[None, :, None, :], t2[:, None, None, :], es[None, None, :, :]) + lp(i1)[None, :, None]
        return _integrate_flat(np.moveaxis(vals, 1, 0), grid.int1)

    L1_eval = marg1(e1)  # (E1, Es)
    L2_eval = marg2(e2)  # (E2, Es)
    L1_int = np.concatenate([marg1(i1[k : k + 64]) for k in range(0, len(i1), 64)])  # (M1, Es)
    log_den = _integrate_flat(L1_int + lp(i1)[:, None], grid.int1) + lp(es)  # (Es,)

    lhs = (
        ll(e1[:, None, None, :], e2[None, :, None, :], es[None, None, :, :])
        + lp(e1)[:, None, None]
        + lp(e2)[None, :, None]
        + lp(es)[None, None, :]
    )
    prior_1s = lp(e1)[:, None, None] + lp(es)[None, None, :]
    prior_2s = lp(e2)[None, :, None] + lp(es)[None, None, :]
    first = prior_1s + (L1_eval[:, None, :] if posterior_numerator else 0.0)
    rhs = L2_eval[None, :, :] + first + prior_2s - log_den[None, None, :]
    diff = lhs - rhs
    return float(np.max(diff) - np.min(diff))


# --- canned models and the full numerical report --------------------------

def random_spd(rng: np.random.Generator, p: int, min_eig: float = 0.2) -> np.ndarray:
    A = rng.normal(size=(p, p))
    return A @ A.T / p + min_eig * np.eye(p)


def random_quadratic_model(rng: np.random.Generator, p1: int, ps: int, sigma2: float = 1.0) -> LaplaceModel:
    p = p1 + ps
    return quadratic_model(random_spd(rng, p), rng.normal(size=p), float(rng.normal()), sigma2, p1)


def gaussian_pair(coupling: float = 0.0, use_theta1: bool = True, ps: int = 2, sigma2: float = 1.0) -> ModelPair:
    """Quadratic two-model likelihood with p1 = p2 = 1.

    ``f(theta_1, theta_s) + g(theta_2, theta_s)`` plus ``coupling * theta_1 * theta_2``;
    any nonzero coupling breaks the factorization.
    """

    def ll(t1, t2, ts):
        s = ts.sum(axis=-1)
        a = t1[..., 0] if use_theta1 else 0.0 * t1[..., 0]  # keep the broadcast shape
        f = -0.5 * (a - 0.3 * s - 0.4) ** 2 - 0.25 * (ts[..., 0] - 0.2) ** 2
        g = -0.5 * (1.5 * t2[..., 0] + 0.5 * ts[..., -1] - 0.1) ** 2
        return f + g + coupling * a * t2[..., 0]

    return ModelPair(ll, 1, 1, ps, sigma2)


def factorization_grid(eval_points: int = 5, int_points: int = 801, ps: int = 2, half_width: float = 1.5,
                int_half_width: float = 14.0) -> FactorizationGrid:
    ev = GridSpec((-half_width,), (half_width,), eval_points)
    es = GridSpec((-half_width,) * ps, (half_width,) * ps, eval_points)
    it = GridSpec((-int_half_width,), (int_half_width,), int_points)
    return FactorizationGrid(ev, ev, es, it, it)


def schur_identity_residual(rng: np.random.Generator, p1: int, ps: int) -> float:
    """Residual of ``[u;v]^T H [u;v] = (u + w)^T H11 (u + w) + v^T Omega v``, ``w = H11^{-1} H1s v``.

    Scaled by the magnitude of the left-hand side.
    """
    H = random_spd(rng, p1 + ps)
    blocks = BlockHessian.partition(H, p1)
    u, v = rng.normal(size=p1), rng.normal(size=ps)
    w = np.linalg.solve(blocks.H11, blocks.H1s @ v)
    z = np.concatenate([u, v])
    lhs = float(z @ H @ z)
    rhs = float((u + w) @ blocks.H11 @ (u + w) + v @ schur_omega(blocks) @ v)
    return abs(lhs - rhs) / max(1.0, abs(lhs))


def verification_report(seed: int = 0, n_models: int = 20, n_theta: int = 5, n_identity: int = 100) -> dict:
    """Run the closed-form vs brute-force marginal checks and the factorization checks."""
    rng = np.random.default_rng(seed)
    shapes = [(p1, ps) for p1 in (1, 2, 3) for ps in (1, 2)]
    marginal = []
    for m in range(n_models):
        p1, ps = shapes[m % len(shapes)]
        model = random_quadratic_model(rng, p1, ps)
        blocks = BlockHessian.partition(negative_hessian_lp(model), p1)
        for _ in range(n_theta):
            ts = model.mle[p1:] + rng.normal(size=ps)
            err = abs(closed_form_A(model, blocks, ts) - brute_force_A(model, ts))
            marginal.append({"p1": p1, "ps": ps, "abs_error": err})
    identity = max(schur_identity_residual(rng, int(rng.integers(1, 4)), int(rng.integers(1, 3))) for _ in range(n_identity))

    xs = rng.normal(size=10)
    ys = (rng.uniform(size=10) < 1.0 / (1.0 + np.exp(-(1.5 * xs - 0.3)))).astype(np.int64)
    logit = logistic_model(xs, ys)
    lb = BlockHessian.partition(negative_hessian_lp(logit), 1)
    ts = logit.mle[1:] + 0.5
    laplace_gap = closed_form_A(logit, lb, ts) - brute_force_A(logit, ts)

    grid = factorization_grid()
    return {
        "marginal_max_abs_error": max(e["abs_error"] for e in marginal),
        "marginal_cases": marginal,
        "quadratic_identity_max_residual": identity,
        "logistic_laplace_error": float(laplace_gap),
        "factorization_deviation": verify_factorization(gaussian_pair(), grid),
        "factorization_theta1_free_deviation": verify_factorization(gaussian_pair(use_theta1=False), grid),
        "factorization_coupled_deviation": verify_factorization(gaussian_pair(coupling=0.5), grid),
        "factorization_prior_numerator_deviation": verify_factorization(gaussian_pair(), grid, posterior_numerator=False),
    }


TOLERANCES = {
    "marginal_max_abs_error": 1e-6,
    "quadratic_identity_max_residual": 1e-10,
    "factorization_deviation": 1e-6,
    "factorization_theta1_free_deviation": 1e-8,
}


def report_passes(report: dict) -> dict[str, bool]:
    out = {k: bool(report[k] <= tol) for k, tol in TOLERANCES.items()}
    out["factorization_coupling_detected"] = bool(report["factorization_coupled_deviation"] > 1e-2)
    return out
