"""Loss terms and their analytic gradients.

Unit convention: 2D terms live in normalized image units (pixel error divided
by the longest frame side), 3D and depth terms are unit-agnostic sums over
whatever the caller passes; the training code passes meters so every term
stays O(1). Each term is zero exactly at its documented fixed point.
"""

from __future__ import annotations

import numpy as np

from . import prior as prior_mod


def l2d(pred_px: np.ndarray, obs_px: np.ndarray, conf: np.ndarray, norm: float):
    """Confidence-weighted mean squared keypoint error on normalized coords.

    value = (1/J) sum_j conf_j |pred_j - obs_j|^2 / norm^2. Returns the value
    and its gradient w.r.t. pred_px. Batched inputs (B, J, 2) return (B,) values.
    """
    pred = np.asarray(pred_px, dtype=float)
    obs = np.asarray(obs_px, dtype=float)
    c = np.asarray(conf, dtype=float)
    diff = pred - obs
    J = pred.shape[-2]
    val = np.sum(c[..., None] * diff * diff, axis=(-2, -1)) / (J * norm * norm)
    grad = 2.0 * c[..., None] * diff / (J * norm * norm)
    return val, grad


def l3d_proxy(pred_joints: np.ndarray, proxy_points: np.ndarray, vis_weight: np.ndarray,
              root: int = 0):
    """Visibility-weighted squared error between root-centered point sets.

    value = sum_j V_j |(proxy_j - proxy_root) - (pred_j - pred_root)|^2.
    The caller skips this term entirely when the root joint is not visible.
    Returns the value and its gradient w.r.t. pred_joints (the root row picks
    up the centering coupling).
    """
    pred = np.asarray(pred_joints, dtype=float)
    prox = np.asarray(proxy_points, dtype=float)
    V = np.asarray(vis_weight, dtype=float)
    pc = pred - pred[..., root:root + 1, :]
    xc = prox - prox[..., root:root + 1, :]
    diff = pc - xc
    val = np.sum(V[..., None] * diff * diff, axis=(-2, -1))
    grad = 2.0 * V[..., None] * diff
    grad[..., root, :] -= np.sum(grad, axis=-2)
    return val, grad


def align_offset(observed: np.ndarray, rendered: np.ndarray, mask: np.ndarray) -> float:
    """Scalar depth offset b0: the lower median of observed - rendered over
    the mask. Minimizes the summed absolute aligned residual; on even counts
    the lower of the two middle values is taken. Empty mask yields 0."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        return 0.0
    r = np.sort((np.asarray(observed, dtype=float) - np.asarray(rendered, dtype=float))[m])
    return float(r[(len(r) - 1) // 2])


def l_depth(observed: np.ndarray, rendered: np.ndarray, mask: np.ndarray, b0: float,
            gmc_sigma: float | None = None):
    """Aligned depth discrepancy: mean over mask of (observed - b0 - rendered)^2.

    Gradient is w.r.t. the rendered depth only; b0 and the mask are treated
    as constants (they are recomputed, not differentiated). gmc_sigma swaps
    the square for the Geman-McClure robustifier.
    """
    m = np.asarray(mask, dtype=bool)
    n = int(m.sum())
    grad = np.zeros_like(np.asarray(rendered, dtype=float))
    if n == 0:
        return 0.0, grad
    r = (np.asarray(observed, dtype=float) - b0 - rendered)[m]
    if gmc_sigma is None:
        val = float(np.sum(r * r)) / n
        grad[m] = -2.0 * r / n
    else:
        v, dv = gmc(r, gmc_sigma)
        val = float(np.sum(v)) / n
        grad[m] = -dv / n
    return val, grad


def gmc(x: np.ndarray, sigma: float):
    """Geman-McClure: x^2 sigma^2 / (x^2 + sigma^2), with derivative."""
    x = np.asarray(x, dtype=float)
    s2 = sigma * sigma
    denom = x * x + s2
    val = x * x * s2 / denom
    dval = 2.0 * x * s2 * s2 / (denom * denom)
    return val, dval


def l_smpl(theta: np.ndarray, beta: np.ndarray, theta_ref: np.ndarray, beta_ref: np.ndarray):
    """Squared distance between parameter vectors (pose and shape stacked)."""
    dt = np.asarray(theta, dtype=float) - theta_ref
    db = np.asarray(beta, dtype=float) - beta_ref
    val = np.sum(dt * dt, axis=-1) + np.sum(db * db, axis=-1)
    return val, 2.0 * dt, 2.0 * db


def l_reg_weights(epoch: int, stage2_epoch: int):
    """Stage indicator of the composite training loss: before and at the
    switch epoch the proxy 3D term is active, strictly after it the depth
    term replaces it. Returns (weight_3d, weight_depth)."""
    stage2 = epoch > stage2_epoch
    return (0.0, 1.0) if stage2 else (1.0, 0.0)


def l_reg(components: dict, epoch: int, stage2_epoch: int):
    """Composite training objective:
    (1 - s) * L_3D + L_2D + L_SMPL + s * L_D with s = [epoch > stage2_epoch].

    `components` maps names in {"l2d", "l3d", "lsmpl", "ldepth"} to scalars;
    missing terms count as 0. Returns (value, weight_3d, weight_depth).
    """
    w3, wd = l_reg_weights(epoch, stage2_epoch)
    val = (
        components.get("l2d", 0.0)
        + w3 * components.get("l3d", 0.0)
        + components.get("lsmpl", 0.0)
        + wd * components.get("ldepth", 0.0)
    )
    return val, w3, wd


# ---------------------------------------------------------------------------
# the fitting objective (keypoints + priors)


def l_opt_batch(model, theta: np.ndarray, beta: np.ndarray, cam_s: np.ndarray,
                cam_t: np.ndarray, kp_centered: np.ndarray, conf: np.ndarray,
                pose_prior: prior_mod.GmmPrior | None, schedule: prior_mod.PriorSchedule,
                epoch: int, norm: float, joint_subset: np.ndarray | None = None,
                exact_nll: bool = False):
    """Fitting objective L_2D + lam_theta L_theta + lam_beta L_beta + lam_alpha L_alpha
    for a batch, with gradients for every parameter.

    theta (B,Q), beta (B,P), cam_s (B,), cam_t (B,2); keypoints are centered
    pixels. joint_subset restricts the 2D term (used by the camera-only
    phase). The prior covers theta[3:] (root excluded). Returns
    (value (B,), d_theta, d_beta, d_s, d_t).
    """
    B = theta.shape[0]
    X, dXt, dXb = model.joints_with_jacobian(theta, beta)  # (B,K,3), (B,K,3,Q), (B,K,3,P)
    pred = cam_s[:, None, None] * X[..., :2] + cam_t[:, None, :]
    use_conf = conf
    if joint_subset is not None:
        sel = np.zeros(conf.shape[-1])
        sel[joint_subset] = 1.0
        use_conf = conf * sel
    val, g2d = l2d(pred, kp_centered, use_conf, norm)  # g2d (B,K,2)

    d_s = np.sum(g2d * X[..., :2], axis=(1, 2))
    d_t = np.sum(g2d, axis=1)
    gX = np.zeros_like(X)
    gX[..., :2] = g2d * cam_s[:, None, None]
    d_theta = np.einsum("bkx,bkxq->bq", gX, dXt)
    d_beta = np.einsum("bkx,bkxp->bp", gX, dXb)

    lam_t = schedule.lambda_theta(epoch)
    if pose_prior is not None and lam_t != 0.0:
        scores, grads = prior_mod.nll_batch(theta[:, 3:], pose_prior, exact=exact_nll)
        val = val + lam_t * scores
        d_theta[:, 3:] += lam_t * grads
    if schedule.lambda_beta != 0.0:
        val = val + schedule.lambda_beta * np.sum(beta * beta, axis=1)
        d_beta += schedule.lambda_beta * 2.0 * beta
    if schedule.lambda_alpha != 0.0:
        t = model.template
        if len(t.hinge_joints):
            av, ag = prior_mod.angle_penalty_batch(theta, t.hinge_joints, t.hinge_axes, t.hinge_signs)
            val = val + schedule.lambda_alpha * av
            d_theta += schedule.lambda_alpha * ag
    return val, d_theta, d_beta, d_s, d_t


def l_opt(model, theta, beta, camera, kp_centered, conf, pose_prior, schedule,
          epoch: int, norm: float, exact_nll: bool = False):
    """Single-sample fitting objective; see l_opt_batch. With every lambda
    zero this equals l2d of the projected keypoints."""
    val, dth, dbe, ds, dt = l_opt_batch(
        model, np.asarray(theta, float)[None], np.asarray(beta, float)[None],
        np.array([camera.scale]), np.asarray(camera.translation, float)[None],
        np.asarray(kp_centered, float)[None], np.asarray(conf, float)[None],
        pose_prior, schedule, epoch, norm, exact_nll=exact_nll,
    )
    return float(val[0]), dth[0], dbe[0], float(ds[0]), dt[0]
