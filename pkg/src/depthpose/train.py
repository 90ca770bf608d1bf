"""Two-stage weakly supervised training of the keypoint-to-pose regressor.

Supervision comes from three places, none of which is ground-truth 3D pose:
the 2D keypoints themselves, depth read off the frame under each keypoint
(gated by a visibility check so occluder readings are dropped), and the
per-sample fitting loop whose result both distills into the network and,
late in training, hands over to a rendered-depth comparison.

Epochs are 1-based. The proxy-3D term is active while epoch <= stage2_epoch
and the rendered-depth term strictly after, matching the composite loss
(1 - s) L_3D + L_2D + L_SMPL + s L_D with s the stage indicator.

Ablation modes (config.ablation):
  full        everything above
  no-prior    fitting runs without the learned pose prior (its weight is 0)
  proxy       2D + ungated proxy 3D; no fitting, no depth stage
  proxy-gated 2D + visibility-gated proxy 3D; no fitting, no depth stage
  depth-only  2D + rendered-depth from the first epoch; no proxy, no fitting
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import (body, camera as cam_mod, losses, observe, optim,
               prior as prior_mod, regressor as reg_mod, render, synth)

ABLATIONS = ("full", "no-prior", "proxy", "proxy-gated", "depth-only")


@dataclass
class TrainConfig:
    epochs: int = 30
    stage2_epoch: int = 15
    batch_size: int = 64
    lr: float = 5e-5
    hidden: tuple = (256, 256)
    scale_init: float = 0.14
    seed: int = 0
    ablation: str = "full"
    # fitting-loop knobs; by default the fit is seeded from the network
    # output, so its labels are refinements of the current prediction and
    # the distillation term fades as the network converges.  Setting a
    # fixed root orientation instead makes every fit an independent
    # re-fit from that pose.
    fit_camera_iters: int = 20
    fit_full_iters: int = 50
    fit_lr_pose: float = 1e-2
    fit_lr_camera: float = 1e-1
    fit_init_root: tuple | None = None
    # regularizer schedule (used by the fitting objective)
    lambda_theta0: float = 404.0
    lambda_beta: float = 100.0
    lambda_alpha: float = 15.0
    lambda_decay: float = 0.7
    exact_nll: bool = False
    # observation handling
    tau_mm: float = 30.0
    gmc_sigma: float = 0.0    # 0 disables the robustifier on the depth term
    # how far in front of the torso surface a depth reading may sit before
    # the gate treats it as another body part covering the joint
    gate_margin_mm: float = 100.0

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def make_desk_config(**overrides) -> TrainConfig:
    """Settings sized for the procedural desk rig: a small network trained
    from scratch on a few hundred frames, with regularizer weights matched
    to the normalized-keypoint objective scale."""
    base = dict(
        epochs=18,
        stage2_epoch=9,
        batch_size=16,
        lr=5e-4,
        hidden=(256, 256),
        scale_init=0.14,
        fit_camera_iters=15,
        fit_full_iters=25,
        fit_lr_pose=5e-3,
        lambda_theta0=1e-4,
        lambda_beta=1e-4,
        lambda_alpha=1e-5,
        lambda_decay=0.85,
    )
    base.update(overrides)
    return TrainConfig(**base)


def stage_weights(config: TrainConfig, epoch: int):
    """Per-epoch (proxy-3D, depth) activations for the composite loss."""
    if config.ablation in ("proxy", "proxy-gated"):
        return 1.0, 0.0
    if config.ablation == "depth-only":
        return 0.0, 1.0
    return losses.l_reg_weights(epoch, config.stage2_epoch)


class Trainer:
    """Owns the preprocessed observations and runs the epoch loop."""

    def __init__(self, model: body.BodyModel, data: synth.SplitData,
                 config: TrainConfig, pose_prior: prior_mod.GmmPrior | None,
                 workdir=None):
        if config.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {config.ablation!r}")
        self.model = model
        self.data = data
        self.config = config
        self.pose_prior = pose_prior
        self.workdir = Path(workdir) if workdir is not None else None
        lam0 = 0.0 if config.ablation == "no-prior" else config.lambda_theta0
        self.schedule = prior_mod.PriorSchedule(
            lambda_theta0=lam0, lambda_beta=config.lambda_beta,
            lambda_alpha=config.lambda_alpha, decay=config.lambda_decay)
        self.K = data.intrinsics
        self.norm = float(max(self.K.width, self.K.height))
        self._prepare()

    def _prepare(self):
        """One-time observation preprocessing: depth cleanup, proxy points,
        centered keypoints, network features."""
        data, K = self.data, self.K
        n = len(data)
        self.kp_centered = cam_mod.center_pixels(data.keypoints, K)
        self.feats = reg_mod.featurize(self.kp_centered, data.conf, self.norm)
        self.clean_mm = np.empty((n, K.height, K.width), dtype=np.float32)
        J = self.model.num_joints
        self.proxy_mm = np.zeros((n, J, 3))
        self.proxy_ok = np.zeros((n, J), dtype=bool)
        all_vis = np.ones(J, dtype=bool)
        for i in range(n):
            cleaned = observe.clean_depth(data.depth_mm[i].astype(float))
            self.clean_mm[i] = cleaned
            self.proxy_mm[i], self.proxy_ok[i] = observe.extract_proxy(
                data.keypoints[i], all_vis, cleaned, K)

    # ------------------------------------------------------------------
    # per-batch pieces

    def _placements(self, scale: np.ndarray, trans: np.ndarray) -> np.ndarray:
        return np.stack([
            cam_mod.placement_from_weak(
                cam_mod.WeakPerspectiveCamera(scale=float(s), translation=(float(tx), float(ty))),
                self.K)
            for s, (tx, ty) in zip(scale, trans)])

    def _gate_visibility(self, idx: np.ndarray) -> np.ndarray:
        """Visibility of each joint judged against the torso surface: a
        reading well in front of the subject's body plane means something
        is passing over that joint, so the reading belongs to the occluder
        and must not supervise the joint.

        For a subject lying under the camera this is the one depth
        reference the observation itself pins down. Judging visibility
        against the live regressor estimate instead is circular (a network
        that has absorbed a corrupt reading renders a surface agreeing with
        it, and the gate then waves the corruption through forever), and a
        keypoint fit cannot arbitrate depth at all, because the 2D evidence
        is blind to it under weak perspective. The margin is generous
        enough to keep readings of limbs resting on the body and strict
        enough to reject one limb read through another."""
        prox = self.proxy_mm[idx]
        ok = self.proxy_ok[idx]
        torso = optim.torso_indices(self.model.tree.names)
        out = np.ones(prox.shape[:2], dtype=bool)
        for b in range(len(idx)):
            a = ok[b, torso]
            if np.count_nonzero(a) < 3:
                continue
            plane = np.median(prox[b, torso, 2][a])
            out[b] = prox[b, :, 2] >= plane - self.config.gate_margin_mm
        return out

    def _depth_term(self, idx: np.ndarray, theta: np.ndarray, beta: np.ndarray,
                    scale: np.ndarray, trans: np.ndarray):
        """Rendered-vs-observed depth loss in meters for each sample, with
        gradients on pose and shape only (the camera is deliberately left
        out of this path)."""
        B = len(idx)
        vals = np.zeros(B)
        dth = np.zeros_like(theta)
        dbe = np.zeros_like(beta)
        places = self._placements(scale, trans)
        tris = self.model.template.triangles
        sigma = self.config.gmc_sigma or None
        for b, i in enumerate(idx):
            verts, dz_t, dz_b = self.model.vertex_depth_jacobians(theta[b], beta[b])
            frame, snap = render.rasterize(verts + places[b], tris, self.K)
            obs = self.clean_mm[i].astype(float)
            inter = frame.mask & self.data.mask[i]
            if not inter.any():
                continue
            b0 = losses.align_offset(obs, frame.depth, inter)
            val, gpix = losses.l_depth(obs / 1000.0, frame.depth / 1000.0, inter,
                                       b0 / 1000.0, gmc_sigma=sigma)
            vals[b] = val
            gz = render.vertex_depth_grads(snap, gpix, len(verts)) / 1000.0
            dth[b] = gz @ dz_t
            dbe[b] = gz @ dz_b
        return vals, dth, dbe

    # ------------------------------------------------------------------

    def run(self, reg: reg_mod.PoseRegressor | None = None):
        """Train and return (regressor, history). history has one dict per
        epoch mirroring the CSV columns."""
        cfg = self.config
        model = self.model
        n = len(self.data)
        if reg is None:
            spec = reg_mod.RegressorSpec(
                in_dim=self.feats.shape[1], hidden=tuple(cfg.hidden),
                n_pose=model.num_pose, n_shape=model.num_shape,
                scale_init=cfg.scale_init)
            reg = reg_mod.PoseRegressor.create(spec, seed=cfg.seed)
        states = [optim.AdamState(p.shape) for p in reg.params]
        fit_cfg = optim.FitConfig(
            camera_iters=cfg.fit_camera_iters, full_iters=cfg.fit_full_iters,
            lr_pose=cfg.fit_lr_pose, lr_shape=cfg.fit_lr_pose,
            lr_camera=cfg.fit_lr_camera, exact_nll=cfg.exact_nll)
        uses_fit = cfg.ablation in ("full", "no-prior")
        gate_on = cfg.ablation != "proxy"
        torso = optim.torso_indices(model.tree.names)

        if self.workdir is not None:
            self.workdir.mkdir(parents=True, exist_ok=True)
            (self.workdir / "checkpoints").mkdir(exist_ok=True)
            log_f = open(self.workdir / "loss_log.csv", "w", newline="")
            log = csv.writer(log_f)
            log.writerow(["epoch", "l2d", "l3d", "ldepth", "lsmpl",
                          "lambda_theta", "w3d", "wdepth"])
        else:
            log_f = log = None

        history = []
        proxy_m = self.proxy_mm / 1000.0
        for epoch in range(1, cfg.epochs + 1):
            w3, wd = stage_weights(cfg, epoch)
            order = np.random.default_rng([cfg.seed, 1000 + epoch]).permutation(n)
            sums = {"l2d": 0.0, "l3d": 0.0, "ldepth": 0.0, "lsmpl": 0.0}
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                B = len(idx)
                kp = self.kp_centered[idx]
                conf = self.data.conf[idx]

                out, cache = reg.forward(self.feats[idx])
                X, dXt, dXb = model.joints_with_jacobian(out.theta, out.beta)
                pred2d = out.scale[:, None, None] * X[..., :2] + out.trans[:, None, :]
                l2d_val, g2d = losses.l2d(pred2d, kp, conf, self.norm)
                d_scale = np.sum(g2d * X[..., :2], axis=(1, 2))
                d_trans = np.sum(g2d, axis=1)
                gX = np.zeros_like(X)
                gX[..., :2] = g2d * out.scale[:, None, None]

                lsmpl_val = np.zeros(B)
                d_theta_extra = np.zeros_like(out.theta)
                d_beta_extra = np.zeros_like(out.beta)
                theta_sel, beta_sel = out.theta, out.beta
                scale_sel, trans_sel = out.scale, out.trans
                if uses_fit:
                    if cfg.fit_init_root is None:
                        th_init, be_init = out.theta.copy(), out.beta.copy()
                        s_init, t_init = out.scale.copy(), out.trans.copy()
                    else:
                        th_init = np.zeros((B, model.num_pose))
                        th_init[:, :3] = cfg.fit_init_root
                        be_init = np.zeros((B, model.num_shape))
                        s_init = np.full(B, cfg.scale_init)
                        t_init = np.zeros((B, 2))
                    fit = optim.fit_batch(
                        model, kp, conf, th_init, be_init, s_init, t_init,
                        self.pose_prior, self.schedule, epoch,
                        self.norm, torso=torso, config=fit_cfg)
                    theta_sel, beta_sel, took = optim.select_supervision_target(
                        model, kp, conf, out.theta, out.beta, out.scale, out.trans,
                        fit.theta, fit.beta, fit.scale, fit.trans,
                        self.pose_prior, self.schedule, epoch, self.norm,
                        exact_nll=cfg.exact_nll)
                    scale_sel = np.where(took, fit.scale, out.scale)
                    trans_sel = np.where(took[:, None], fit.trans, out.trans)
                    lsmpl_val, g_th, g_be = losses.l_smpl(
                        out.theta, out.beta, theta_sel, beta_sel)
                    d_theta_extra += g_th
                    d_beta_extra += g_be

                l3d_val = np.zeros(B)
                if w3 > 0:
                    V = self.proxy_ok[idx].astype(float)
                    if gate_on:
                        V = V * self._gate_visibility(idx)
                    V = V * V[:, 0:1]  # an unusable root disables the sample
                    l3d_val, gXm = losses.l3d_proxy(X / 1000.0, proxy_m[idx], V)
                    gX = gX + w3 * gXm / 1000.0

                ldepth_val = np.zeros(B)
                if wd > 0:
                    ldepth_val, g_th, g_be = self._depth_term(
                        idx, out.theta, out.beta, out.scale, out.trans)
                    d_theta_extra += wd * g_th
                    d_beta_extra += wd * g_be

                d_theta = np.einsum("bkx,bkxq->bq", gX, dXt) + d_theta_extra
                d_beta = np.einsum("bkx,bkxp->bp", gX, dXb) + d_beta_extra
                grads = reg.backward(cache, d_theta / B, d_beta / B,
                                     d_scale / B, d_trans / B)
                for p_i, (p, g, st) in enumerate(zip(reg.params, grads, states)):
                    reg.params[p_i] = optim.adam_step(st, p, g, cfg.lr)

                sums["l2d"] += float(l2d_val.sum())
                sums["l3d"] += float(l3d_val.sum())
                sums["ldepth"] += float(ldepth_val.sum())
                sums["lsmpl"] += float(lsmpl_val.sum())

            row = {
                "epoch": epoch,
                "l2d": sums["l2d"] / n,
                "l3d": sums["l3d"] / n,
                "ldepth": sums["ldepth"] / n,
                "lsmpl": sums["lsmpl"] / n,
                "lambda_theta": self.schedule.lambda_theta(epoch),
                "w3d": w3,
                "wdepth": wd,
            }
            history.append(row)
            if log is not None:
                log.writerow([row["epoch"]] + [repr(float(row[k])) for k in
                             ("l2d", "l3d", "ldepth", "lsmpl", "lambda_theta",
                              "w3d", "wdepth")])
                log_f.flush()
                self._checkpoint(reg, epoch)
        if log_f is not None:
            log_f.close()
        return reg, history

    def _checkpoint(self, reg: reg_mod.PoseRegressor, epoch: int) -> None:
        meta = {
            "epoch": epoch,
            "seed": self.config.seed,
            "config_hash": self.config.config_hash(),
            "dataset_id": self.data.dataset_id,
        }
        reg_mod.save_weights(self.workdir / "checkpoints" / f"epoch_{epoch:03d}.npz",
                             reg, meta=meta)
        reg_mod.save_weights(self.workdir / "checkpoints" / "final.npz", reg, meta=meta)


def fit_prior_for(model: body.BodyModel, n_samples: int = 2000, seed: int = 0,
                  n_components: int = 8) -> prior_mod.GmmPrior:
    """Pose prior fitted on draws from the source distribution (root excluded)."""
    thetas = synth.sample_source_poses(model, n_samples, seed)
    return prior_mod.fit_gmm(thetas[:, 3:], n_components=n_components, seed=seed)


def train_on_dataset(dataset_dir, config: TrainConfig,
                     pose_prior: prior_mod.GmmPrior | None = None,
                     workdir=None, model: body.BodyModel | None = None):
    """End-to-end convenience: load the train split, fit a prior if none is
    given, train, return (regressor, history, trainer)."""
    model = model or body.desk_model()
    data = synth.load_split(dataset_dir, "train")
    if pose_prior is None and config.ablation != "no-prior":
        pose_prior = fit_prior_for(model, seed=config.seed)
    trainer = Trainer(model, data, config, pose_prior, workdir=workdir)
    reg, history = trainer.run()
    return reg, history, trainer
