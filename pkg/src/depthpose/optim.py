"""Adam and the per-sample model fitting loop.

The fitter refines pose, shape and weak-perspective camera against observed
2D keypoints under the pose/shape/angle priors. It runs two phases: a
camera-only warmup on a stable joint subset, then a joint refinement of all
parameters. The returned iterate is the best one seen by the full objective,
which includes the starting point, so fitting can never make a sample worse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses

TORSO_JOINT_NAMES = (
    "pelvis", "spine", "chest", "head",
    "l_shoulder", "r_shoulder", "l_hip", "r_hip",
)


def torso_indices(names) -> np.ndarray:
    """Indices of the camera-warmup joint subset; falls back to all joints
    when the skeleton uses different names."""
    idx = [i for i, n in enumerate(names) if n in TORSO_JOINT_NAMES]
    return np.asarray(idx if idx else range(len(names)), dtype=int)


class AdamState:
    """Bias-corrected Adam accumulator for one parameter array."""

    __slots__ = ("m", "v", "step", "beta1", "beta2", "eps")

    def __init__(self, shape, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.step = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def update(self, grad: np.ndarray) -> np.ndarray:
        """Advance the moments and return the step direction (to be scaled
        by the learning rate and subtracted from the parameter)."""
        self.step += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1 ** self.step)
        vhat = self.v / (1.0 - self.beta2 ** self.step)
        return mhat / (np.sqrt(vhat) + self.eps)


def adam_step(state: AdamState, param: np.ndarray, grad: np.ndarray, lr) -> np.ndarray:
    """One Adam update; lr may be scalar or broadcastable (per-sample masking)."""
    return param - lr * state.update(grad)


@dataclass
class FitConfig:
    camera_iters: int = 20
    full_iters: int = 50
    lr_pose: float = 1e-2
    lr_shape: float = 1e-2
    lr_camera: float = 1e-1
    scale_min: float = 1e-4
    exact_nll: bool = False


@dataclass
class FitResult:
    theta: np.ndarray
    beta: np.ndarray
    scale: np.ndarray
    trans: np.ndarray
    objective: np.ndarray       # best full-objective value per sample
    initial_objective: np.ndarray


def fit_batch(model, kp_centered: np.ndarray, conf: np.ndarray, theta0: np.ndarray,
              beta0: np.ndarray, scale0: np.ndarray, trans0: np.ndarray,
              pose_prior, schedule, epoch: int, norm: float,
              torso: np.ndarray | None = None, config: FitConfig | None = None) -> FitResult:
    """Fit pose/shape/camera per sample by Adam on the keypoint objective.

    Samples are independent; a sample whose objective or gradient goes
    non-finite is frozen at its best iterate while the rest continue.
    """
    cfg = config or FitConfig()
    theta = np.array(theta0, dtype=float)
    beta = np.array(beta0, dtype=float)
    scale = np.array(scale0, dtype=float)
    trans = np.array(trans0, dtype=float)
    B = theta.shape[0]
    if torso is None:
        torso = torso_indices(model.tree.names)

    def full(th, be, sc, tr):
        return losses.l_opt_batch(model, th, be, sc, tr, kp_centered, conf,
                                  pose_prior, schedule, epoch, norm,
                                  exact_nll=cfg.exact_nll)

    val0 = full(theta, beta, scale, trans)[0]
    best_val = np.where(np.isfinite(val0), val0, np.inf)
    best = (theta.copy(), beta.copy(), scale.copy(), trans.copy())
    alive = np.isfinite(val0)

    def record(th, be, sc, tr, val):
        better = np.isfinite(val) & (val < best_val)
        if better.any():
            best_val[better] = val[better]
            for dst, src in zip(best, (th, be, sc, tr)):
                dst[better] = src[better]

    def sanitize(alive, *grads):
        finite = alive.copy()
        for g in grads:
            finite &= np.isfinite(g).reshape(B, -1).all(axis=1)
        out = []
        for g in grads:
            g = g.copy()
            g[~finite] = 0.0
            out.append(g)
        return finite, out

    st_s = AdamState(scale.shape)
    st_t = AdamState(trans.shape)
    for _ in range(cfg.camera_iters):
        _, _, _, ds, dt = losses.l_opt_batch(
            model, theta, beta, scale, trans, kp_centered, conf,
            pose_prior, schedule, epoch, norm, joint_subset=torso,
            exact_nll=cfg.exact_nll)
        alive, (ds, dt) = sanitize(alive, ds, dt)
        if not alive.any():
            break
        gate = alive.astype(float)
        scale = adam_step(st_s, scale, ds, cfg.lr_camera * gate)
        trans = adam_step(st_t, trans, dt, cfg.lr_camera * gate[:, None])
        scale = np.maximum(scale, cfg.scale_min)
        val = full(theta, beta, scale, trans)[0]
        alive &= np.isfinite(val)
        record(theta, beta, scale, trans, val)

    st_th = AdamState(theta.shape)
    st_be = AdamState(beta.shape)
    st_s = AdamState(scale.shape)
    st_t = AdamState(trans.shape)
    for _ in range(cfg.full_iters):
        if not alive.any():
            break
        val, dth, dbe, ds, dt = full(theta, beta, scale, trans)
        alive &= np.isfinite(val)
        record(theta, beta, scale, trans, val)
        alive, (dth, dbe, ds, dt) = sanitize(alive, dth, dbe, ds, dt)
        gate = alive.astype(float)
        theta = adam_step(st_th, theta, dth, cfg.lr_pose * gate[:, None])
        beta = adam_step(st_be, beta, dbe, cfg.lr_shape * gate[:, None])
        scale = adam_step(st_s, scale, ds, cfg.lr_camera * gate)
        trans = adam_step(st_t, trans, dt, cfg.lr_camera * gate[:, None])
        scale = np.maximum(scale, cfg.scale_min)
    val = full(theta, beta, scale, trans)[0]
    record(theta, beta, scale, trans, val)

    return FitResult(theta=best[0], beta=best[1], scale=best[2], trans=best[3],
                     objective=best_val, initial_objective=val0)


def select_supervision_target(model, kp_centered, conf, theta_a, beta_a, scale_a,
                              trans_a, theta_b, beta_b, scale_b, trans_b,
                              pose_prior, schedule, epoch: int, norm: float,
                              exact_nll: bool = False):
    """Pick, per sample, whichever candidate scores lower on the fitting
    objective. Candidate b (the fitted one) wins ties; a non-finite score
    always loses. Returns (theta, beta, took_b)."""
    va = losses.l_opt_batch(model, theta_a, beta_a, scale_a, trans_a, kp_centered,
                            conf, pose_prior, schedule, epoch, norm,
                            exact_nll=exact_nll)[0]
    vb = losses.l_opt_batch(model, theta_b, beta_b, scale_b, trans_b, kp_centered,
                            conf, pose_prior, schedule, epoch, norm,
                            exact_nll=exact_nll)[0]
    fa = np.isfinite(va)
    fb = np.isfinite(vb)
    took_b = np.where(fb & fa, vb <= va, fb)
    theta = np.where(took_b[:, None], theta_b, theta_a)
    beta = np.where(took_b[:, None], beta_b, beta_a)
    return theta, beta, took_b
