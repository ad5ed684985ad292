"""Dense robustified Levenberg-Marquardt over manifold-valued parameter blocks.

The generic `Problem` handles small problems (calibration toys, unit tests,
marginalization oracles). The sliding-window estimator reuses the same step
controller (`lm_loop`) and the linear-algebra helpers here, but supplies its
own structured linearization with feature blocks eliminated by a block-wise
Schur complement.

Cost convention: cost = sum over residual blocks of rho(||r||^2) with
rho(s) = s/2 by default and the Huber form for robustified blocks. Residual
functions return pre-whitened residuals and Jacobians w.r.t. each block's
tangent space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .se3 import Pose, Rotation, so3_exp, so3_log


class SolverError(RuntimeError):
    pass


class SingularHessianError(SolverError):
    def __init__(self, null_dim: int):
        super().__init__(f"Gauss-Newton Hessian is singular (null-space dimension {null_dim})")
        self.null_dim = null_dim


# --------------------------------------------------------------------------
# manifolds
# --------------------------------------------------------------------------

class EuclideanManifold:
    def __init__(self, dim: int):
        self.tangent_dim = dim

    def retract(self, x, delta):
        return x + delta

    def local_diff(self, x, y):
        return np.asarray(y, float) - np.asarray(x, float)


class SO3Manifold:
    """Values are Rotation; right (local-frame) perturbation."""

    tangent_dim = 3

    def retract(self, x: Rotation, delta):
        return x * so3_exp(delta)

    def local_diff(self, x: Rotation, y: Rotation):
        return so3_log(x.inverse() * y)


class PoseManifold:
    """Values are Pose; tangent is [dp, dtheta] with right rotation update."""

    tangent_dim = 6

    def retract(self, x: Pose, delta):
        return Pose(x.rotation * so3_exp(delta[3:6]), x.translation + delta[0:3])

    def local_diff(self, x: Pose, y: Pose):
        return np.concatenate(
            [y.translation - x.translation, so3_log(x.rotation.inverse() * y.rotation)]
        )


class ImuStateManifold:
    """Values are preintegration.ImuState; 15-dim tangent."""

    tangent_dim = 15

    def retract(self, x, delta):
        return x.retract(delta)

    def local_diff(self, x, y):
        return x.local_diff(y)


# --------------------------------------------------------------------------
# robust losses
# --------------------------------------------------------------------------

class TrivialLoss:
    def cost(self, s: float) -> float:
        return 0.5 * s

    def sqrt_weight(self, s: float) -> float:
        return 1.0


class HuberLoss:
    """cost = s/2 inside delta, delta*(sqrt(s) - delta/2) outside."""

    def __init__(self, delta: float = 1.0):
        self.delta = delta

    def cost(self, s: float) -> float:
        if s <= self.delta * self.delta:
            return 0.5 * s
        return self.delta * (math.sqrt(s) - 0.5 * self.delta)

    def sqrt_weight(self, s: float) -> float:
        if s <= self.delta * self.delta:
            return 1.0
        return math.sqrt(self.delta / math.sqrt(s))


# --------------------------------------------------------------------------
# options / report
# --------------------------------------------------------------------------

@dataclass
class SolveOptions:
    max_iterations: int = 50
    gradient_tolerance: float = 1e-10
    relative_cost_tolerance: float = 1e-9
    step_tolerance: float = 0.0  # 0 disables; stops grinding at the fp floor
    initial_lambda: float = 1e-4
    lambda_increase: float = 10.0
    lambda_decrease: float = 0.5
    max_lambda: float = 1e10


@dataclass
class SolveReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    termination: str = "max_iterations"
    gradient_norm: float = float("nan")
    step_norms: list = field(default_factory=list)


# --------------------------------------------------------------------------
# LM step controller (shared by the generic problem and the window solver)
# --------------------------------------------------------------------------

def lm_loop(x0, linearize, solve_step, apply_step, eval_cost, options: SolveOptions):
    """Generic damped Gauss-Newton iteration.

    linearize(x)  -> (lin, cost) where `lin` is an opaque linearization
                     carrying at least a gradient accessible via lin["g"]
    solve_step(lin, lam) -> step (opaque), may raise np.linalg.LinAlgError
    apply_step(x, step)  -> new x
    eval_cost(x)  -> scalar

    Returns (x, SolveReport, lin) with `lin` evaluated at the returned x.
    Accepted steps never increase the cost.
    """
    report = SolveReport()
    x = x0
    lin, cost = linearize(x)
    report.initial_cost = cost
    report.final_cost = cost
    lam = options.initial_lambda

    for _ in range(options.max_iterations):
        g = lin["g"]
        report.gradient_norm = float(np.abs(g).max()) if len(g) else 0.0
        if report.gradient_norm < options.gradient_tolerance:
            report.termination = "gradient_tolerance"
            return x, report, lin

        accepted = False
        while not accepted:
            try:
                step = solve_step(lin, lam)
            except np.linalg.LinAlgError:
                lam = lam * options.lambda_increase if lam > 0 else 1e-8
                if lam > options.max_lambda:
                    report.termination = "factorization_failed"
                    return x, report, lin
                continue
            x_new = apply_step(x, step)
            new_cost = eval_cost(x_new)
            if np.isfinite(new_cost) and new_cost <= cost:
                accepted = True
            else:
                lam = lam * options.lambda_increase if lam > 0 else 1e-8
                if lam > options.max_lambda:
                    report.termination = "solver_stalled"
                    return x, report, lin

        x = x_new
        lam *= options.lambda_decrease
        report.iterations += 1
        step_norm = float(np.linalg.norm(step_vector(step)))
        report.step_norms.append(step_norm)
        decrease = cost - new_cost
        lin, cost = linearize(x)
        report.final_cost = cost
        if decrease <= options.relative_cost_tolerance * max(cost, 1e-30):
            report.termination = "cost_tolerance"
            return x, report, lin
        if options.step_tolerance > 0 and step_norm < options.step_tolerance:
            report.termination = "step_tolerance"
            return x, report, lin

    report.termination = "max_iterations"
    return x, report, lin


def step_vector(step):
    """Flatten a step that may be a vector or a tuple of vectors."""
    if isinstance(step, tuple):
        return np.concatenate([np.ravel(s) for s in step if s is not None and len(s)])
    return np.ravel(step)


def cholesky_solve(a, b):
    """Solve a x = b for symmetric positive definite a.

    Raises np.linalg.LinAlgError when a is not positive definite.
    """
    c, lower = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
    return scipy.linalg.cho_solve((c, lower), b, check_finite=False)


def schur_eliminate(h, g, keep_idx, drop_idx, regularization=1e-12):
    """Marginalize drop_idx out of (h, g) by Schur complement.

    Returns (h_keep, g_keep). A singular elimination block gets a tiny
    diagonal regularization.
    """
    keep_idx = np.asarray(keep_idx, dtype=int)
    drop_idx = np.asarray(drop_idx, dtype=int)
    h_kk = h[np.ix_(keep_idx, keep_idx)]
    h_kd = h[np.ix_(keep_idx, drop_idx)]
    h_dd = h[np.ix_(drop_idx, drop_idx)]
    g_k = g[keep_idx]
    g_d = g[drop_idx]
    try:
        sol = cholesky_solve(h_dd, np.hstack([h_kd.T, g_d[:, None]]))
    except np.linalg.LinAlgError:
        h_dd = h_dd + regularization * np.eye(len(drop_idx))
        sol = np.linalg.solve(h_dd, np.hstack([h_kd.T, g_d[:, None]]))
    h_keep = h_kk - h_kd @ sol[:, :-1]
    g_keep = g_k - h_kd @ sol[:, -1]
    return 0.5 * (h_keep + h_keep.T), g_keep


def information_to_sqrt(h, g, eig_floor=1e-10):
    """Factor (h, g) into (j, r0) with h = j^T j and g = j^T r0.

    Eigenvalues below eig_floor (relative to the largest) are dropped, so the
    result is the PSD projection of h.
    """
    h = 0.5 * (h + h.T)
    w, v = np.linalg.eigh(h)
    scale = max(w.max(initial=0.0), 1.0)
    keep = w > eig_floor * scale
    w = w[keep]
    v = v[:, keep]
    j = (np.sqrt(w)[:, None]) * v.T
    r0 = (v.T @ g) / np.sqrt(w)
    return j, r0


def marginal_covariance_from_hessian(h, idx):
    """Block of h^-1 for the given indices; raises on singular h."""
    idx = np.asarray(idx, dtype=int)
    try:
        cols = np.zeros((h.shape[0], len(idx)))
        cols[idx, np.arange(len(idx))] = 1.0
        sol = cholesky_solve(h, cols)
    except np.linalg.LinAlgError:
        w = np.linalg.eigvalsh(0.5 * (h + h.T))
        null_dim = int(np.sum(w <= 1e-12 * max(w.max(initial=0.0), 1.0)))
        raise SingularHessianError(max(null_dim, 1))
    return sol[idx, :]


# --------------------------------------------------------------------------
# generic problem
# --------------------------------------------------------------------------

class _ParameterBlock:
    __slots__ = ("key", "value", "manifold", "constant", "offset")

    def __init__(self, key, value, manifold, constant):
        self.key = key
        self.value = value
        self.manifold = manifold
        self.constant = constant
        self.offset = -1


class _ResidualBlock:
    __slots__ = ("fn", "keys", "loss", "label")

    def __init__(self, fn, keys, loss, label):
        self.fn = fn
        self.keys = list(keys)
        self.loss = loss or TrivialLoss()
        self.label = label


class Problem:
    """Parameter blocks plus residual blocks referencing them.

    Residual functions take the block values (in key order) and return
    (residual_vector, [jacobian w.r.t. each block's tangent]). Residuals and
    Jacobians are pre-whitened by the caller.
    """

    def __init__(self):
        self._params: dict = {}
        self._residuals: list = []

    # -- construction -------------------------------------------------------
    def add_parameter(self, key, value, manifold=None, constant=False):
        if key in self._params:
            raise ValueError(f"duplicate parameter block {key!r}")
        if manifold is None:
            value = np.atleast_1d(np.asarray(value, dtype=float)).copy()
            manifold = EuclideanManifold(value.shape[0])
        self._params[key] = _ParameterBlock(key, value, manifold, constant)

    def add_residual(self, fn, keys, loss=None, label=None):
        for k in keys:
            if k not in self._params:
                raise ValueError(f"residual references unknown block {k!r}")
        self._residuals.append(
            _ResidualBlock(fn, keys, loss, label or f"residual_{len(self._residuals)}")
        )

    def set_constant(self, key, constant=True):
        self._params[key].constant = constant

    def value(self, key):
        return self._params[key].value

    def set_value(self, key, value):
        block = self._params[key]
        if isinstance(block.manifold, EuclideanManifold):
            value = np.atleast_1d(np.asarray(value, dtype=float)).copy()
        block.value = value

    # -- layout -------------------------------------------------------------
    def _free_blocks(self):
        free = [b for b in self._params.values() if not b.constant]
        offset = 0
        for b in free:
            b.offset = offset
            offset += b.manifold.tangent_dim
        return free, offset

    # -- evaluation ---------------------------------------------------------
    def evaluate(self):
        """Stacked residual vector and robustified cost at current values."""
        pieces = []
        cost = 0.0
        for rb in self._residuals:
            values = [self._params[k].value for k in rb.keys]
            r, _ = rb.fn(*values)
            r = np.asarray(r, dtype=float)
            if not np.all(np.isfinite(r)):
                raise ValueError(f"non-finite residual in block {rb.label!r}")
            cost += rb.loss.cost(float(r @ r))
            pieces.append(r)
        stacked = np.concatenate(pieces) if pieces else np.zeros(0)
        return stacked, cost

    def _linearize(self):
        free, dim = self._free_blocks()
        h = np.zeros((dim, dim))
        g = np.zeros(dim)
        cost = 0.0
        for rb in self._residuals:
            values = [self._params[k].value for k in rb.keys]
            r, jacs = rb.fn(*values)
            r = np.asarray(r, dtype=float)
            if not np.all(np.isfinite(r)):
                raise ValueError(f"non-finite residual in block {rb.label!r}")
            s = float(r @ r)
            cost += rb.loss.cost(s)
            sw = rb.loss.sqrt_weight(s)
            r = r * sw
            for key_a, jac_a in zip(rb.keys, jacs):
                pa = self._params[key_a]
                if pa.constant or jac_a is None:
                    continue
                ja = np.asarray(jac_a, dtype=float) * sw
                sa = slice(pa.offset, pa.offset + pa.manifold.tangent_dim)
                g[sa] += ja.T @ r
                for key_b, jac_b in zip(rb.keys, jacs):
                    pb = self._params[key_b]
                    if pb.constant or jac_b is None:
                        continue
                    jb = np.asarray(jac_b, dtype=float) * sw
                    sb = slice(pb.offset, pb.offset + pb.manifold.tangent_dim)
                    h[sa, sb] += ja.T @ jb
        return h, g, cost, free, dim

    # -- solve ----------------------------------------------------------------
    def solve(self, options: SolveOptions | None = None) -> SolveReport:
        options = options or SolveOptions()
        free, dim = self._free_blocks()
        if dim == 0:
            _, cost = self.evaluate()
            return SolveReport(
                iterations=0,
                initial_cost=cost,
                final_cost=cost,
                termination="all_parameters_constant",
                gradient_norm=0.0,
            )

        def linearize(values):
            self._assign(free, values)
            h, g, cost, _, _ = self._linearize()
            return {"h": h, "g": g}, cost

        def solve_step(lin, lam):
            d = np.diag(lin["h"]).copy()
            d[d < 1e-12] = 1e-12
            return cholesky_solve(lin["h"] + lam * np.diag(d), -lin["g"])

        def apply_step(values, step):
            out = []
            for b, v in zip(free, values):
                sl = slice(b.offset, b.offset + b.manifold.tangent_dim)
                out.append(b.manifold.retract(v, step[sl]))
            return out

        def eval_cost(values):
            self._assign(free, values)
            _, cost = self.evaluate()
            return cost

        x0 = [b.value for b in free]
        x, report, _ = lm_loop(x0, linearize, solve_step, apply_step, eval_cost, options)
        self._assign(free, x)
        return report

    def _assign(self, free, values):
        for b, v in zip(free, values):
            b.value = v

    # -- covariance -----------------------------------------------------------
    def marginal_covariance(self, keys):
        """Joint covariance block of one key or a list of keys."""
        if not isinstance(keys, (list, tuple)):
            keys = [keys]
        h, _, _, free, dim = self._linearize()
        idx = []
        for key in keys:
            b = self._params[key]
            if b.constant:
                raise ValueError(f"block {key!r} is constant")
            idx.extend(range(b.offset, b.offset + b.manifold.tangent_dim))
        return marginal_covariance_from_hessian(h, np.asarray(idx))
