"""Least squares, non-negative least squares and REML linear mixed models.

All fits work on a :class:`DesignMatrix` and return immutable fit records.
Columns are rescaled to unit root-mean-square internally before any
factorization; reported quantities are always in the caller's units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.optimize

INTERCEPT = "intercept"
COND_LIMIT = 1e10
LOG_VAR_FLOOR = -25.0
LOG_VAR_CEIL = 15.0
MAX_ITER = 500
MAX_RESTARTS = 5


class RegressionError(RuntimeError):
    pass


class RankDeficiencyError(RegressionError):
    def __init__(self, message: str, columns: Sequence[str] = ()):
        super().__init__(message)
        self.columns = tuple(columns)


class ConvergenceError(RegressionError):
    def __init__(self, message: str, best: "MixedFit"):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class DesignMatrix:
    y: np.ndarray
    X: np.ndarray
    columns: tuple[str, ...]
    groups: np.ndarray | None = None
    regions: np.ndarray | None = None
    strata: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
        if X.shape[1] != len(self.columns):
            raise ValueError("column names do not match X")
        if len(set(self.columns)) != len(self.columns):
            raise ValueError("duplicate column names")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("design matrix contains non-finite entries")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "columns", tuple(self.columns))
        for name in ("groups", "regions", "strata"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v)
                if v.shape != y.shape:
                    raise ValueError(f"{name} length mismatch")
                object.__setattr__(self, name, v)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def take(self, rows) -> "DesignMatrix":
        pick = lambda v: None if v is None else v[rows]  # noqa: E731
        return DesignMatrix(
            self.y[rows], self.X[rows], self.columns, pick(self.groups), pick(self.regions), pick(self.strata)
        )

    def with_intercept(self) -> "DesignMatrix":
        if INTERCEPT in self.columns:
            return self
        X = np.column_stack([np.ones(self.n), self.X])
        return DesignMatrix(self.y, X, (INTERCEPT,) + self.columns, self.groups, self.regions, self.strata)


@dataclass(frozen=True)
class FixedFit:
    columns: tuple[str, ...]
    coef: np.ndarray
    residual_variance: float
    cov: np.ndarray
    rank: int
    condition: float
    n_obs: int
    solver: str = "ols"

    def coef_dict(self) -> dict[str, float]:
        return dict(zip(self.columns, map(float, self.coef)))


@dataclass(frozen=True)
class MixedFit:
    columns: tuple[str, ...]
    coef: np.ndarray
    random_columns: tuple[str, ...]
    variances: np.ndarray
    residual_variance: float
    blups: Mapping[str, np.ndarray]
    restricted_loglik: float
    cov: np.ndarray
    n_obs: int
    iterations: int = 0
    grad_norm: float = 0.0
    converged: bool = True
    solver: str = "reml"
    groups: tuple[str, ...] = field(default=())

    def coef_dict(self) -> dict[str, float]:
        return dict(zip(self.columns, map(float, self.coef)))

    def group_coef(self, group: str) -> np.ndarray:
        """Fixed plus random coefficients for one group (fixed only if unseen)."""
        beta = np.array(self.coef, dtype=float)
        b = self.blups.get(group)
        if b is not None:
            for name, v in zip(self.random_columns, b):
                beta[self.columns.index(name)] += v
        return beta


def _column_scale(X: np.ndarray) -> np.ndarray:
    scale = np.sqrt(np.mean(X * X, axis=0))
    scale[~(scale > 0)] = 1.0
    return scale


def _dependent_set(Rn: np.ndarray, piv: np.ndarray, rank: int, columns: Sequence[str]) -> list[str]:
    c = rank
    if rank == 0:
        return [columns[piv[0]]]
    z = sla.solve_triangular(Rn[:rank, :rank], Rn[:rank, c])
    keep = np.abs(z) > 1e-8 * max(1.0, np.abs(z).max())
    names = [columns[piv[j]] for j in range(rank) if keep[j]]
    return sorted(names + [columns[piv[c]]], key=list(columns).index)


def _check_shape(dm: DesignMatrix) -> None:
    if dm.n < dm.p:
        raise RankDeficiencyError(f"{dm.n} observations for {dm.p} coefficients", dm.columns)
    if dm.p == 0:
        raise RegressionError("design matrix has no columns")


def _factor(X: np.ndarray, columns: Sequence[str]):
    """Scaled, column-pivoted QR with a rank check on the triangular factor."""
    scale = _column_scale(X)
    Xs = X / scale
    Q, R, piv = sla.qr(Xs, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag[0] == 0:
        raise RankDeficiencyError("design matrix is all zeros", columns)
    cond = float(np.linalg.cond(R)) if np.all(diag > 0) else math.inf
    if not cond < COND_LIMIT:
        rank = int(np.sum(diag > diag[0] / COND_LIMIT))
        rank = min(rank, X.shape[1] - 1)
        dep = _dependent_set(R, piv, rank, columns)
        raise RankDeficiencyError(
            f"design matrix is rank deficient (condition {cond:.3g}); dependent columns: {', '.join(dep)}",
            dep,
        )
    return Q, R, piv, scale, cond


def ols(dm: DesignMatrix, include_intercept: bool = False) -> FixedFit:
    """Least squares by pivoted QR (no normal equations)."""
    if include_intercept:
        dm = dm.with_intercept()
    _check_shape(dm)
    Q, R, piv, scale, cond = _factor(dm.X, dm.columns)
    qty = Q.T @ dm.y
    z = sla.solve_triangular(R, qty)
    beta = np.empty(dm.p)
    beta[piv] = z
    beta /= scale
    resid = dm.y - dm.X @ beta
    dof = dm.n - dm.p
    s2 = float(resid @ resid / dof) if dof > 0 else 0.0
    Rinv = sla.solve_triangular(R, np.eye(dm.p))
    cov_piv = Rinv @ Rinv.T
    cov = np.empty_like(cov_piv)
    cov[np.ix_(piv, piv)] = cov_piv
    cov = s2 * cov / np.outer(scale, scale)
    cov = 0.5 * (cov + cov.T)
    return FixedFit(dm.columns, beta, s2, cov, dm.p, cond, dm.n, "ols")


def nnls(dm: DesignMatrix) -> FixedFit:
    """Least squares subject to every coefficient >= 0."""
    _check_shape(dm)
    _, _, _, scale, cond = _factor(dm.X, dm.columns)
    Xs = dm.X / scale
    ynorm = float(np.linalg.norm(dm.y)) or 1.0
    z, _ = scipy.optimize.nnls(Xs, dm.y / ynorm, maxiter=50 * dm.p)
    free = z > 0
    # polish the passive-set solution with QR; keep scipy's if it turns infeasible
    if free.any():
        Q, R = np.linalg.qr(Xs[:, free])
        zf = sla.solve_triangular(R, Q.T @ (dm.y / ynorm))
        if np.all(zf > 0):
            z = np.zeros(dm.p)
            z[free] = zf
    beta = z * ynorm / scale
    resid = dm.y - dm.X @ beta
    dof = dm.n - int(free.sum())
    s2 = float(resid @ resid / dof) if dof > 0 else 0.0
    cov = np.zeros((dm.p, dm.p))
    if free.any():
        Xf = Xs[:, free]
        inv = np.linalg.inv(Xf.T @ Xf)
        cov[np.ix_(free, free)] = s2 * inv / np.outer(scale[free], scale[free])
    return FixedFit(dm.columns, beta, s2, cov, dm.p, cond, dm.n, "nnls")


def kkt_residual(fit: FixedFit, dm: DesignMatrix) -> float:
    """Largest violation of the NNLS optimality conditions, relative to ||X_j|| ||y||."""
    grad = dm.X.T @ (dm.X @ fit.coef - dm.y)
    norms = np.linalg.norm(dm.X, axis=0) * (np.linalg.norm(dm.y) or 1.0)
    norms[norms == 0] = 1.0
    g = grad / norms
    active = fit.coef <= 0
    viol = np.where(active, np.maximum(-g, 0.0), np.abs(g))
    viol = np.maximum(viol, np.where(fit.coef < 0, -fit.coef, 0.0))
    return float(viol.max(initial=0.0))


class _Reml:
    """Restricted likelihood for y = X b + Z u + e with diagonal Var(u) per group.

    Works on rescaled data (unit-RMS columns, y divided by `sy`) through
    per-group cross products, so each evaluation costs O(groups * p^3).
    """

    def __init__(self, dm: DesignMatrix, random_columns: Sequence[str]):
        if dm.groups is None:
            raise RegressionError("mixed model needs group labels")
        unknown = [c for c in random_columns if c not in dm.columns]
        if unknown:
            raise RegressionError(f"random columns not in design: {unknown}")
        _check_shape(dm)
        self.dm = dm
        self.ridx = np.array([dm.columns.index(c) for c in random_columns], dtype=int)
        self.q = len(self.ridx)
        self.p = dm.p
        self.n = dm.n
        self.cx = _column_scale(dm.X)
        base = ols(dm)
        sy = math.sqrt(base.residual_variance)
        if not sy > 0:
            sy = float(np.sqrt(np.mean(dm.y**2))) or 1.0
        self.sy = sy
        self.base = base
        W = np.column_stack([dm.X / self.cx, dm.y / sy])
        labels = [str(g) for g in dm.groups]
        self.group_names = tuple(dict.fromkeys(labels))
        if len(self.group_names) < 2:
            raise RegressionError("mixed model needs at least two groups")
        idx = {g: i for i, g in enumerate(self.group_names)}
        gi = np.array([idx[g] for g in labels])
        self.S = np.stack([W[gi == k].T @ W[gi == k] for k in range(len(self.group_names))])
        self.ng = np.bincount(gi, minlength=len(self.group_names)).astype(float)
        # offset converting scaled log-variances to caller units
        self.shift = np.concatenate([np.log(self.sy**2 / self.cx[self.ridx] ** 2), [np.log(self.sy**2)]])
        self.const = -0.5 * ((self.n - self.p) * math.log(sy**2) + 2.0 * np.log(self.cx).sum())

    def evaluate(self, theta: np.ndarray, want_grad: bool = True, zero: np.ndarray | None = None):
        """Scaled restricted log-likelihood, its gradient and the GLS pieces."""
        p, q, ridx = self.p, self.q, self.ridx
        d = np.exp(theta[:q])
        if zero is not None:
            d = np.where(zero, 0.0, d)
        s2 = math.exp(theta[q])
        lam = np.sqrt(d)
        G = len(self.group_names)
        Q = np.empty((G, p + 1, p + 1))
        B_all = np.empty((G, q, q))
        logdet_v = 0.0
        for k in range(G):
            S = self.S[k]
            if q == 0:
                logdet_v += self.ng[k] * math.log(s2)
                Q[k] = S / s2
                continue
            K = S[ridx, :]
            ZZ = K[:, ridx]
            A = s2 * np.eye(q) + lam[:, None] * ZZ * lam[None, :]
            cf = sla.cho_factor(A, lower=True)
            logdet_v += (self.ng[k] - q) * math.log(s2) + 2.0 * np.log(np.diag(cf[0])).sum()
            B = lam[:, None] * sla.cho_solve(cf, np.diag(lam))
            B_all[k] = B
            Q[k] = (S - K.T @ B @ K) / s2
        Qs = Q.sum(axis=0)
        H = Qs[:p, :p]
        try:
            hf = sla.cho_factor(H, lower=True)
        except np.linalg.LinAlgError:
            raise RegressionError("singular marginal covariance: X' V^-1 X is not positive definite") from None
        beta = sla.cho_solve(hf, Qs[:p, p])
        rvr = Qs[p, p] - Qs[:p, p] @ beta
        logdet_h = 2.0 * np.log(np.diag(hf[0])).sum()
        ll = -0.5 * (logdet_v + logdet_h + rvr + (self.n - p) * math.log(2 * math.pi))
        out = {"beta": beta, "Q": Q, "H": H, "hf": hf, "B": B_all, "d": d, "s2": s2, "rvr": rvr}
        if not want_grad:
            return ll, None, out
        e = np.append(-beta, 1.0)
        Hinv = sla.cho_solve(hf, np.eye(p))
        grad = np.zeros(q + 1)
        tr_vinv = 0.0
        R_xx = np.zeros((p, p))
        r2 = 0.0
        for k in range(G):
            Qk = Q[k]
            Qr = Qk[ridx, :]
            u = Qr @ e
            Qzx = Qr[:, :p]
            t = Qr[:, ridx].diagonal() - np.einsum("ij,jk,ik->i", Qzx, Hinv, Qzx)
            grad[:q] += -0.5 * (t - u * u)
            S = self.S[k]
            K = S[ridx, :]
            ZZ = K[:, ridx]
            B = B_all[k]
            KB = K.T @ B
            R = (S - 2.0 * KB @ K + KB @ ZZ @ KB.T) / (s2 * s2)
            tr_vinv += (self.ng[k] - np.trace(B @ ZZ)) / s2
            R_xx += R[:p, :p]
            r2 += e @ R @ e
        tr_p = tr_vinv - np.trace(Hinv @ R_xx)
        grad[:q] *= d
        grad[q] = -0.5 * (tr_p - r2) * s2
        if zero is not None:
            grad[:q][zero] = 0.0
        return ll, grad, out


def restricted_loglik(dm: DesignMatrix, random_columns: Sequence[str], log_variances) -> tuple[float, np.ndarray]:
    """REML log-likelihood and its gradient at natural-log variances.

    ``log_variances`` lists one log-variance per random column followed by
    the log residual variance, in the units of ``dm``.
    """
    prob = _Reml(dm, random_columns)
    theta = np.asarray(log_variances, dtype=float) - prob.shift
    ll, grad, _ = prob.evaluate(theta)
    return ll + prob.const, grad


def reml_fit(dm: DesignMatrix, random_columns: Sequence[str], pin_zero: bool = False) -> MixedFit:
    """Fit a linear mixed model by restricted maximum likelihood.

    Random effects are independent per column (diagonal covariance) and
    shared by all rows with the same ``dm.groups`` label. With
    ``pin_zero=True`` every random variance is fixed at zero and the fit
    collapses to ordinary least squares.
    """
    random_columns = tuple(random_columns)
    prob = _Reml(dm, random_columns)
    q = prob.q
    if pin_zero or q == 0:
        return _collapse_to_ols(prob, random_columns)

    dof = prob.n - prob.p

    def full_theta(log_ratio):
        # residual variance profiled out: its REML optimum given the variance ratios
        _, _, out = prob.evaluate(np.append(log_ratio, 0.0), want_grad=False)
        s2 = max(out["rvr"] / dof, 1e-300) if dof > 0 else 1.0
        return np.append(log_ratio + math.log(s2), math.log(s2))

    def objective(log_ratio):
        ll, grad, _ = prob.evaluate(full_theta(log_ratio))
        return -ll, -grad[:q]

    bounds = [(LOG_VAR_FLOOR, LOG_VAR_CEIL)] * q
    x = np.zeros(q)
    f_prev = objective(x)[0]
    iterations, rel_change, res = 0, math.inf, None
    # line searches can stall close to the optimum; restart from the last iterate
    for _ in range(MAX_RESTARTS):
        res = scipy.optimize.minimize(
            objective, x, jac=True, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": MAX_ITER - iterations, "ftol": 1e-13, "gtol": 1e-7, "maxcor": 20},
        )
        iterations += int(res.nit)
        x = res.x
        rel_change = abs(f_prev - res.fun) / max(abs(res.fun), 1.0)
        f_prev = res.fun
        if res.success or rel_change < 1e-8 or iterations >= MAX_ITER:
            break
    theta = full_theta(x)
    ll, grad, _ = prob.evaluate(theta)
    at_floor = x <= LOG_VAR_FLOOR + 1e-9
    pg = grad[:q].copy()
    pg[at_floor & (pg < 0)] = 0.0
    grad_norm = float(np.linalg.norm(pg))
    converged = bool(res.success) or grad_norm < 1e-6 or rel_change < 1e-8
    if np.all(at_floor):
        fit = _collapse_to_ols(prob, random_columns, iterations=iterations, grad_norm=grad_norm)
    else:
        fit = _assemble(prob, theta, random_columns, at_floor, iterations, grad_norm, converged)
    if not converged:
        raise ConvergenceError(
            f"REML did not converge after {iterations} iterations (gradient norm {grad_norm:.3g}): {res.message}",
            fit,
        )
    return fit


def _assemble(prob: _Reml, theta, random_columns, zero, iterations, grad_norm, converged) -> MixedFit:
    p = prob.p
    ll, _, out = prob.evaluate(theta, want_grad=False, zero=zero)
    beta_s = out["beta"]
    e = np.append(-beta_s, 1.0)
    d = out["d"]
    cx, sy, ridx = prob.cx, prob.sy, prob.ridx
    blups = {}
    for k, g in enumerate(prob.group_names):
        u = out["Q"][k][ridx, :] @ e
        blups[g] = d * u * sy / cx[ridx]
    Hinv = sla.cho_solve(out["hf"], np.eye(p))
    cov = Hinv * sy**2 / np.outer(cx, cx)
    return MixedFit(
        columns=prob.dm.columns,
        coef=beta_s * sy / cx,
        random_columns=tuple(random_columns),
        variances=d * sy**2 / cx[ridx] ** 2,
        residual_variance=out["s2"] * sy**2,
        blups=blups,
        restricted_loglik=float(ll + prob.const),
        cov=0.5 * (cov + cov.T),
        n_obs=prob.n,
        iterations=iterations,
        grad_norm=grad_norm,
        converged=converged,
        groups=prob.group_names,
    )


def _collapse_to_ols(prob: _Reml, random_columns, iterations: int = 0, grad_norm: float = 0.0) -> MixedFit:
    base = prob.base
    q = prob.q
    s2 = base.residual_variance
    if s2 > 0:
        theta = np.concatenate([np.zeros(q), [math.log(s2)]]) - prob.shift
        ll, _, _ = prob.evaluate(theta, want_grad=False, zero=np.ones(q, dtype=bool))
        ll += prob.const
    else:
        ll = math.inf
    return MixedFit(
        columns=base.columns,
        coef=base.coef,
        random_columns=tuple(random_columns),
        variances=np.zeros(q),
        residual_variance=s2,
        blups={g: np.zeros(q) for g in prob.group_names},
        restricted_loglik=float(ll),
        cov=base.cov,
        n_obs=prob.n,
        iterations=iterations,
        grad_norm=grad_norm,
        converged=True,
        groups=prob.group_names,
    )


def _aligned_X(fit, rows: DesignMatrix) -> np.ndarray:
    if tuple(rows.columns) == tuple(fit.columns):
        return rows.X
    if fit.columns and fit.columns[0] == INTERCEPT and tuple(rows.columns) == tuple(fit.columns[1:]):
        return np.column_stack([np.ones(rows.n), rows.X])
    raise ValueError(f"row columns {rows.columns} do not match fit columns {fit.columns}")


def random_effects_used(fit, rows: DesignMatrix, use_random_effects: bool = True) -> np.ndarray:
    if not (isinstance(fit, MixedFit) and use_random_effects and rows.groups is not None):
        return np.zeros(rows.n, dtype=bool)
    return np.array([str(g) in fit.blups for g in rows.groups], dtype=bool)


def predict(fit: FixedFit | MixedFit, rows: DesignMatrix, use_random_effects: bool = True) -> np.ndarray:
    """Linear predictor; rows from groups unseen at fit time get fixed effects only."""
    X = _aligned_X(fit, rows)
    out = X @ fit.coef
    used = random_effects_used(fit, rows, use_random_effects)
    if used.any():
        ridx = [fit.columns.index(c) for c in fit.random_columns]
        for i in np.flatnonzero(used):
            out[i] += X[i, ridx] @ fit.blups[str(rows.groups[i])]
    return out
