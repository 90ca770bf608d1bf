"""Pose error metrics and evaluation reports.

All joint errors are reported in millimeters. The plain metric root-centers
both point sets; the aligned one removes a full similarity transform
(rotation, uniform scale, translation) first, with the rotation constrained
to be a proper rotation so a reflected skeleton can never score well.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import camera as cam_mod, losses, observe, regressor as reg_mod, render


def per_joint_errors(pred: np.ndarray, gt: np.ndarray, root: int = 0) -> np.ndarray:
    """Root-relative per-joint distances. (N, K, 3) x 2 -> (N, K)."""
    p = pred - pred[..., root:root + 1, :]
    g = gt - gt[..., root:root + 1, :]
    return np.linalg.norm(p - g, axis=-1)


def mpjpe(pred: np.ndarray, gt: np.ndarray, root: int = 0) -> np.ndarray:
    """Mean per-joint position error after root centering. Returns (N,)."""
    return per_joint_errors(pred, gt, root).mean(axis=-1)


def similarity_align(source: np.ndarray, target: np.ndarray):
    """Least-squares similarity transform (c, R, t) mapping source onto
    target, R constrained to det +1. Returns the transformed source."""
    X = np.asarray(source, dtype=float)
    Y = np.asarray(target, dtype=float)
    n = X.shape[0]
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    cov = Yc.T @ Xc / n
    U, D, Vt = np.linalg.svd(cov)
    sgn = np.ones(3)
    if np.linalg.det(U @ Vt) < 0:
        sgn[-1] = -1.0
    R = U @ np.diag(sgn) @ Vt
    var = np.sum(Xc * Xc) / n
    c = np.sum(D * sgn) / var if var > 0 else 1.0
    t = my - c * R @ mx
    return c * X @ R.T + t


def pa_mpjpe(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Mean joint error after per-sample similarity alignment. Returns (N,)."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    out = np.empty(len(pred))
    for i in range(len(pred)):
        aligned = similarity_align(pred[i], gt[i])
        out[i] = np.linalg.norm(aligned - gt[i], axis=-1).mean()
    return out


def aligned_depth_error(observed: np.ndarray, rendered: np.ndarray,
                        mask: np.ndarray) -> float:
    """Mean absolute depth residual after removing the scalar offset that
    the depth loss also removes. Empty mask yields 0."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        return 0.0
    b0 = losses.align_offset(observed, rendered, m)
    return float(np.mean(np.abs((observed - b0 - rendered)[m])))


@dataclass
class EvalReport:
    mpjpe_mm: float
    pa_mpjpe_mm: float
    mpjpe_visible_mm: float
    mpjpe_occluded_mm: float
    n_samples: int
    n_occluded_joints: int

    def to_dict(self) -> dict:
        return {
            "mpjpe_mm": self.mpjpe_mm,
            "pa_mpjpe_mm": self.pa_mpjpe_mm,
            "mpjpe_visible_mm": self.mpjpe_visible_mm,
            "mpjpe_occluded_mm": self.mpjpe_occluded_mm,
            "n_samples": self.n_samples,
            "n_occluded_joints": self.n_occluded_joints,
        }


def summarize(pred_joints: np.ndarray, gt_joints: np.ndarray,
              gt_visible: np.ndarray | None = None) -> EvalReport:
    """Aggregate metrics over a split; the visible/occluded split uses the
    generator's ground-truth visibility."""
    errs = per_joint_errors(pred_joints, gt_joints)
    pa = pa_mpjpe(pred_joints, gt_joints)
    if gt_visible is None:
        gt_visible = np.ones(errs.shape, dtype=bool)
    vis = np.asarray(gt_visible, dtype=bool)
    occ = ~vis
    return EvalReport(
        mpjpe_mm=float(errs.mean()),
        pa_mpjpe_mm=float(pa.mean()),
        mpjpe_visible_mm=float(errs[vis].mean()) if vis.any() else float("nan"),
        mpjpe_occluded_mm=float(errs[occ].mean()) if occ.any() else float("nan"),
        n_samples=len(errs),
        n_occluded_joints=int(occ.sum()),
    )


def predict_joints(model, reg: reg_mod.PoseRegressor, keypoints: np.ndarray,
                   conf: np.ndarray, K: cam_mod.PinholeIntrinsics) -> np.ndarray:
    """Regressor inference: keypoints (N, K, 2) in ordinary pixels ->
    camera-frame joints (N, K, 3) in mm (root at the weak-perspective depth)."""
    norm = float(max(K.width, K.height))
    feats = reg_mod.featurize(cam_mod.center_pixels(keypoints, K), conf, norm)
    out = reg.predict(feats)
    joints = model.joints(out.theta, out.beta)
    place = np.stack([
        cam_mod.placement_from_weak(
            cam_mod.WeakPerspectiveCamera(scale=float(s), translation=(float(tx), float(ty))), K)
        for s, (tx, ty) in zip(out.scale, out.trans)
    ])
    return joints + place[:, None, :]


def evaluate_regressor(model, reg: reg_mod.PoseRegressor, data, gt: dict) -> EvalReport:
    """Run the regressor over a loaded split and score against ground truth."""
    pred = predict_joints(model, reg, data.keypoints, data.conf, data.intrinsics)
    return summarize(pred, gt["joints_cam"], gt["visible"])


def depth_error_report(model, reg: reg_mod.PoseRegressor, data) -> float:
    """Mean aligned depth error (mm) of rendered predictions against the
    observed frames over a split, restricted to pixels where the rendered
    body overlaps the observed body mask. Needs no ground-truth joints."""
    K = data.intrinsics
    norm = float(max(K.width, K.height))
    feats = reg_mod.featurize(cam_mod.center_pixels(data.keypoints, K), data.conf, norm)
    out = reg.predict(feats)
    tris = model.template.triangles
    vals = []
    for i in range(len(data)):
        place = cam_mod.placement_from_weak(
            cam_mod.WeakPerspectiveCamera(
                scale=float(out.scale[i]),
                translation=(float(out.trans[i, 0]), float(out.trans[i, 1]))), K)
        verts = model.skin(out.theta[i], out.beta[i]) + place
        frame, _ = render.rasterize(verts, tris, K)
        obs = observe.clean_depth(data.depth_mm[i].astype(float))
        inter = frame.mask & data.mask[i]
        if inter.any():
            vals.append(aligned_depth_error(obs, frame.depth, inter))
    return float(np.mean(vals)) if vals else float("nan")


def rest_baseline_report(model, gt: dict) -> EvalReport:
    """Score the constant rest-pose prediction; the learning floor."""
    n = len(gt["joints_cam"])
    rest = model.joints(np.zeros((1, model.num_pose)), np.zeros((1, model.num_shape)))
    pred = np.repeat(rest, n, axis=0)
    return summarize(pred, gt["joints_cam"], gt["visible"])
