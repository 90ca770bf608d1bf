"""Gaussian-mixture pose prior fitted on source-domain poses, plus the
regularizer schedule and the auxiliary shape/joint-angle penalties.

The prior covers body pose only (root rotation excluded). Its score is the
negative log of (component weight times component density), minimized over
components; this matches the classic fitting approximation where only the
best component is active. The exact mixture negative log-likelihood is
available as an option. With tight covariances either score can go negative,
being a log-density up to a constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PRIOR_FORMAT = "depthpose-prior"
PRIOR_VERSION = 1

EM_TOL = 1e-6
EM_MAX_ITER = 200
COV_REG = 1e-6

_LOG2PI = np.log(2.0 * np.pi)


@dataclass
class GmmPrior:
    """weights (n,), means (n, d), covariances (n, d, d)."""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.asarray(self.means, dtype=float)
        self.covariances = np.asarray(self.covariances, dtype=float)
        self._chol = np.linalg.cholesky(self.covariances)  # (n, d, d)
        # log det via cholesky diagonals; precision for gradients
        diag = np.diagonal(self._chol, axis1=1, axis2=2)
        self._logdet = 2.0 * np.sum(np.log(diag), axis=1)
        self._precision = np.stack([
            np.linalg.inv(c) for c in self.covariances
        ])

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.weights)


def _component_nll(prior: GmmPrior, theta_body: np.ndarray):
    """Per-component -log(w_c N_c(theta)), batched. Returns (B, n)."""
    x = np.atleast_2d(np.asarray(theta_body, dtype=float))
    diff = x[:, None, :] - prior.means[None]  # (B, n, d)
    sol = np.einsum("ndq,bnq->bnd", prior._precision, diff)
    maha = np.sum(diff * sol, axis=2)
    d = prior.dim
    return 0.5 * (maha + prior._logdet[None] + d * _LOG2PI) - np.log(prior.weights)[None], diff, sol


def nll(prior: GmmPrior, theta_body: np.ndarray, exact: bool = False):
    """Prior score and its gradient for one body-pose vector.

    Default is min over components of -log(w_c) - log N_c; `exact=True`
    evaluates the true mixture negative log-likelihood instead.
    """
    scores, grads = nll_batch(theta_body[None], prior, exact=exact)
    return scores[0], grads[0]


def nll_batch(theta_body: np.ndarray, prior: GmmPrior, exact: bool = False):
    """Vectorized nll over a batch (B, d) -> scores (B,), gradients (B, d)."""
    comp, diff, sol = _component_nll(prior, theta_body)
    if exact:
        # -logsumexp of log(w_c N_c) = -logsumexp(-comp)
        m = np.min(comp, axis=1, keepdims=True)
        expd = np.exp(m - comp)
        denom = np.sum(expd, axis=1)
        scores = m[:, 0] - np.log(denom)
        resp = expd / denom[:, None]
        grads = np.einsum("bn,bnd->bd", resp, sol)
        return scores, grads
    active = np.argmin(comp, axis=1)
    rows = np.arange(len(active))
    return comp[rows, active], sol[rows, active]


# ---------------------------------------------------------------------------
# EM fit


def fit_gmm(samples: np.ndarray, n_components: int = 8, seed: int = 0) -> GmmPrior:
    """Fit by EM: stop when total log-likelihood improves by < 1e-6 or after
    200 iterations; every covariance update adds 1e-6 I. Deterministic given
    the seed (means initialized from distinct samples, uniform weights,
    pooled covariance)."""
    x = np.asarray(samples, dtype=float)
    n, d = x.shape
    if n < n_components:
        raise ValueError(f"need at least {n_components} samples, got {n}")
    pooled = np.cov(x.T, bias=True) if n > 1 else np.zeros((d, d))
    pooled = np.atleast_2d(pooled)
    if np.all(np.diag(pooled) < 1e-12):
        raise ValueError("degenerate sample set: no variance to fit")
    rng = np.random.default_rng(seed)
    means = x[rng.choice(n, size=n_components, replace=False)].copy()
    covs = np.tile(pooled + COV_REG * np.eye(d), (n_components, 1, 1))
    weights = np.full(n_components, 1.0 / n_components)

    prev_ll = -np.inf
    for _ in range(EM_MAX_ITER):
        prior = GmmPrior(weights, means, covs)
        comp, diff, sol = _component_nll(prior, x)  # comp = -log(w N), (n, k)
        logp = -comp
        m = np.max(logp, axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.sum(np.exp(logp - m), axis=1))
        ll = float(np.sum(lse))
        resp = np.exp(logp - lse[:, None])  # (n, k)
        nk = resp.sum(axis=0)
        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        for c in range(n_components):
            dc = x - means[c]
            covs[c] = (resp[:, c, None] * dc).T @ dc / nk[c] + COV_REG * np.eye(d)
        if ll - prev_ll < EM_TOL:
            break
        prev_ll = ll
    return GmmPrior(weights, means, covs)


# ---------------------------------------------------------------------------
# schedule and penalties


@dataclass
class PriorSchedule:
    """Weights of the fitting regularizers. lambda_theta decays per epoch as
    lambda_theta0 * decay^epoch; the others are constant."""

    lambda_theta0: float = 404.0
    lambda_beta: float = 100.0
    lambda_alpha: float = 15.0
    decay: float = 0.7

    def lambda_theta(self, epoch: int) -> float:
        return self.lambda_theta0 * self.decay**epoch


def shape_penalty(beta: np.ndarray):
    """|beta|^2 with gradient; zero exactly at beta = 0."""
    beta = np.asarray(beta, dtype=float)
    return float(np.sum(beta * beta)), 2.0 * beta


def angle_penalty(theta: np.ndarray, hinge_joints, hinge_axes, hinge_signs):
    """Sum over hinges of exp(sign * bend angle) with gradient on theta.

    The sign convention makes the exponent grow when a hinge bends against
    its anatomical direction, so natural flexion is nearly free.
    """
    theta = np.asarray(theta, dtype=float)
    grad = np.zeros_like(theta)
    total = 0.0
    for j, ax, sg in zip(hinge_joints, hinge_axes, hinge_signs):
        idx = 3 * int(j) + int(ax)
        e = np.exp(sg * theta[idx])
        total += e
        grad[idx] += sg * e
    return float(total), grad


def angle_penalty_batch(theta: np.ndarray, hinge_joints, hinge_axes, hinge_signs):
    """Batched angle penalty: theta (B, Q) -> values (B,), grads (B, Q)."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    grad = np.zeros_like(theta)
    idx = 3 * np.asarray(hinge_joints, dtype=int) + np.asarray(hinge_axes, dtype=int)
    sg = np.asarray(hinge_signs, dtype=float)
    with np.errstate(over="ignore"):  # inf is a legal score, callers gate on it
        e = np.exp(sg[None, :] * theta[:, idx])
    grad[:, idx] = sg[None, :] * e
    return e.sum(axis=1), grad


# ---------------------------------------------------------------------------
# serialization


def save_prior(path, prior: GmmPrior, meta: dict | None = None) -> None:
    """Versioned archive: weights, means, covariance Cholesky factors."""
    extras = {}
    for k, v in (meta or {}).items():
        extras[f"meta_{k}"] = np.array(v)
    np.savez(
        path,
        format=np.array(PRIOR_FORMAT),
        version=np.array(PRIOR_VERSION),
        weights=prior.weights,
        means=prior.means,
        chol=prior._chol,
        **extras,
    )


def load_prior(path) -> GmmPrior:
    with np.load(path, allow_pickle=False) as z:
        if str(z["format"]) != PRIOR_FORMAT:
            raise ValueError(f"{path}: not a prior file")
        if int(z["version"]) != PRIOR_VERSION:
            raise ValueError(f"{path}: unsupported prior version {z['version']}")
        chol = z["chol"]
        covs = chol @ np.swapaxes(chol, 1, 2)
        return GmmPrior(z["weights"], z["means"], covs)
