"""Synthetic supine-subject capture: poses, depth frames, keypoints, ground truth.

Bodies lie face-up on a flat support plane about two meters below a
downward-looking depth camera. Two pose distributions are provided: a
"source" one used only to fit the pose prior, and a shifted "target" one
that generates the actual frames, optionally with arm-across-chest patterns
that occlude torso joints (these produce the large depth-reading errors the
visibility gate exists for).

Generated datasets live in a directory: manifest.json, per-split keypoint
CSVs, 16-bit PGM depth in integer millimeters, 8-bit PGM body masks, and a
gt/ subdirectory of arrays that only evaluation code reads.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import body, camera as cam_mod, imgio, observe, render

DESK_INTRINSICS = cam_mod.PinholeIntrinsics(
    fx=280.0, fy=280.0, cx=159.5, cy=119.5, width=320, height=240)


@dataclass
class NoiseSpec:
    """Sensor imperfections at roughly two meters range: per-pixel depth
    noise, dropout holes, and detector jitter on the keypoints."""
    depth_sigma_mm: float = 15.0
    hole_fraction: float = 0.04
    keypoint_sigma_px: float = 2.0


@dataclass
class SceneSpec:
    z_mean_mm: float = 2000.0
    z_sigma_mm: float = 50.0
    xy_sigma_mm: float = 40.0
    yaw_sigma: float = 0.25
    yaw_limit: float = 0.5
    support_gap_mm: float = 10.0


@dataclass
class PoseDist:
    """Per-joint truncated-normal angle table plus crossing-pattern odds.

    entries: joint name -> list of (axis, mean, std, lo, hi). Unlisted
    joint axes get small zero-mean noise so no angle dimension is ever
    exactly constant across a sample set.
    """
    entries: dict
    cross_prob: float = 0.0
    cross_jitter: float = 0.06
    leaf_sigma: float = 0.02


def _trunc(rng, mean, std, lo, hi, size):
    if std <= 0:
        return np.full(size, mean)
    a, b = (lo - mean) / std, (hi - mean) / std
    return stats.truncnorm.rvs(a, b, loc=mean, scale=std, size=size, random_state=rng)


def _mirrored(left: dict) -> dict:
    """Add r_* rows from l_* rows. Mirroring across the sagittal plane keeps
    x-axis angles and negates y/z ones (bounds swap and flip)."""
    out = dict(left)
    for name, rows in left.items():
        if not name.startswith("l_"):
            continue
        mirrored = []
        for axis, mean, std, lo, hi in rows:
            if axis == 0:
                mirrored.append((axis, mean, std, lo, hi))
            else:
                mirrored.append((axis, -mean, std, -hi, -lo))
        out["r_" + name[2:]] = mirrored
    return out


def source_pose_dist() -> PoseDist:
    """Broad lying-pose distribution used only for prior fitting. Covers the
    target support so the prior never assigns vanishing density to real
    training poses."""
    left = {
        "spine": [(0, 0.0, 0.10, -0.30, 0.30), (1, 0.0, 0.08, -0.25, 0.25), (2, 0.0, 0.08, -0.25, 0.25)],
        "chest": [(0, 0.0, 0.08, -0.25, 0.25), (2, 0.0, 0.06, -0.20, 0.20)],
        "l_shoulder": [(0, -0.20, 0.35, -1.20, 0.40), (1, 0.0, 0.20, -0.60, 0.60), (2, -0.10, 0.40, -1.20, 0.70)],
        "l_elbow": [(0, -0.70, 0.50, -2.30, 0.05)],
        "l_hip": [(0, -0.20, 0.30, -1.30, 0.25), (2, 0.0, 0.12, -0.40, 0.40)],
        "l_knee": [(0, 0.50, 0.45, -0.05, 2.10)],
    }
    return PoseDist(entries=_mirrored(left), cross_prob=0.0)


def target_pose_dist(cross_prob: float = 0.45) -> PoseDist:
    """Training/evaluation distribution: shifted means and wider elbows/knees
    relative to the source, plus arm-crossing patterns."""
    left = {
        "spine": [(0, 0.05, 0.10, -0.25, 0.35), (1, 0.0, 0.08, -0.25, 0.25), (2, 0.0, 0.08, -0.25, 0.25)],
        "chest": [(0, 0.05, 0.08, -0.20, 0.30), (2, 0.0, 0.06, -0.20, 0.20)],
        "l_shoulder": [(0, -0.25, 0.30, -1.00, 0.30), (1, 0.0, 0.22, -0.60, 0.60), (2, -0.15, 0.35, -1.00, 0.55)],
        "l_elbow": [(0, -0.45, 0.35, -1.30, 0.00)],
        "l_hip": [(0, -0.20, 0.25, -0.90, 0.20), (2, 0.0, 0.12, -0.40, 0.40)],
        "l_knee": [(0, 0.30, 0.25, 0.00, 0.70)],
    }
    return PoseDist(entries=_mirrored(left), cross_prob=cross_prob)


def _aa_between(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Minimal axis-angle rotating unit vector u onto unit vector v."""
    u = np.asarray(u, dtype=float) / np.linalg.norm(u)
    v = np.asarray(v, dtype=float) / np.linalg.norm(v)
    c = np.cross(u, v)
    s = np.linalg.norm(c)
    d = float(np.dot(u, v))
    if s < 1e-12:
        if d > 0:
            return np.zeros(3)
        axis = np.cross(u, [1.0, 0.0, 0.0])
        if np.linalg.norm(axis) < 1e-6:
            axis = np.cross(u, [0.0, 1.0, 0.0])
        return np.pi * axis / np.linalg.norm(axis)
    return c / s * np.arctan2(s, d)


# Stacked-fold arm configuration (upper-arm direction, pre-twist, elbow
# flex), stored left-form and solved numerically: one forearm slopes down
# across the lower belly with the hand past the midline, and the other
# sweeps across 140mm in front of it, crossing directly over the lower
# wrist so the camera reads the upper limb's surface where the wrist
# actually is.  The aim is done in image space: a capsule whose 3D axis
# passes over a joint still misses its pixel by several px of parallax,
# and an off-axis pass only clips the capsule edge and reads nearly the
# true surface.  The crossing depth is not arbitrary.  A wrist reading
# only teaches a regressor anything if the regressor can reproduce it
# without breaking the 2D evidence, and a two-segment arm seen from one
# camera has exactly one such escape: the ray-sphere mirror of the wrist
# about the elbow, whose depth offset is fixed by how steeply the forearm
# dives.  The under forearm drops 68mm from elbow to wrist, putting that
# mirror 140mm in front, and the over limb is placed so its near surface
# reads at that same depth.  Torso joint pixels are deliberately kept
# clear on all sides: their positions are nearly rigid functions of trunk
# orientation, which the 2D term pins down, so corrupting their readings
# never moves a trained estimate; it only swells the occluded count with
# joints every variant gets equally right.  The pelvis doubly so, since
# metrics are root-relative and a wrong root reading mostly cancels.  The
# over elbow stays shallow enough that no shoulder pixel is shaded, and
# its forearm climbs gently so its own elbow pixel stays clean: both
# would otherwise strand readings just past the visibility margin.
_FOLD_UNDER = (np.array([-0.438, -0.888, 0.141]), 5.126, 1.547)
_FOLD_OVER = (np.array([-0.506, -0.861, -0.042]), -1.739, 1.257)
# Loose variant of the over arm: same fold, rotated just enough that its
# image band passes 10px beside the lower wrist instead of across it.  The
# wrist then reads its own honest surface while everything else about the
# frame matches the covered case, so the corpus pairs corrupted readings
# with truthful ones at neighbouring configurations instead of leaving the
# covered region unwitnessed.
_FOLD_NEAR = (np.array([-0.459, -0.875, 0.154]), -1.805, 1.136)


def _mirror_aa(aa: np.ndarray) -> np.ndarray:
    """Reflect a rotation vector across the x=0 plane (negate y/z parts)."""
    return aa * np.array([1.0, -1.0, -1.0])


def _cross_arm(theta: np.ndarray, i: int, idx: dict, side: str, dir_: np.ndarray,
               twist: float, flex: float, rng, jitter: float) -> None:
    """Pose one arm across the body: point the upper arm along dir_, twist
    about it so elbow flexion sweeps the forearm over the torso rather than
    straight up, then flex.  Right arms get the exact mirror of the left-form
    rotation; flipping dir_ and twist separately is not a pose mirror and
    loses the aimed coverage."""
    aa = body.compose_aa(_aa_between([0.0, -1.0, 0.0], dir_),
                         np.array([0.0, -twist, 0.0]))
    aa_el = np.array([flex, 0.0, 0.0])
    if side == "r":
        aa = _mirror_aa(aa)
        aa_el = _mirror_aa(aa_el)
    sh = idx[f"{side}_shoulder"]
    el = idx[f"{side}_elbow"]
    theta[i, 3 * sh:3 * sh + 3] = aa + rng.normal(0.0, jitter, size=3)
    theta[i, 3 * el:3 * el + 3] = aa_el + rng.normal(0.0, 0.4 * jitter, size=3)


def _apply_crossing(theta: np.ndarray, tree, rng, jitter: float) -> None:
    """Overwrite arms of each selected sample with fold poses, which arm goes
    under chosen at random. Most get the full stack, which hides the under
    wrist behind 140mm of limb, so its depth reading is wrong by far more
    than sensor noise. The rest get a single folded arm: the same limb
    configurations with nothing (or only torso) in front of them, so similar
    image-space arm shapes also appear with honest depth readings. Stacked
    draws are jittered tightly because the aimed coverage dies off within
    the capsule half-width; solo draws spread wide so the honest examples
    blanket the whole neighbourhood.
    theta (n, Q), modified in place."""
    n = theta.shape[0]
    names = list(tree.names)
    idx = {nm: i for i, nm in enumerate(names)}
    left = rng.random(n) < 0.5
    pick = rng.random(n)
    for i in range(n):
        side = "l" if left[i] else "r"
        other = "r" if side == "l" else "l"
        if pick[i] < 0.65:
            over = _FOLD_OVER if pick[i] < 0.45 else _FOLD_NEAR
            arms = ((side, _FOLD_UNDER), (other, over))
            sj = 0.5 * jitter
            # A tight stack needs a steady trunk: spine or chest rotation
            # shears the two shoulder frames apart in the image and slides
            # the upper forearm off the lower wrist it is meant to cover.
            for nm in ("spine", "chest", "head"):
                k = idx[nm]
                theta[i, 3 * k:3 * k + 3] *= 0.35
        elif pick[i] < 0.90:
            arms = ((side, _FOLD_UNDER),)
            sj = 1.7 * jitter
        else:
            arms = ((side, _FOLD_OVER),)
            sj = 1.7 * jitter
        for arm, conf in arms:
            dir_, tw0, fx0 = conf
            tw = tw0 + rng.normal(0.0, 0.85 * sj)
            fx = fx0 + rng.normal(0.0, sj)
            _cross_arm(theta, i, idx, arm, dir_, tw, fx, rng, sj)


def sample_body_poses(model: body.BodyModel, dist: PoseDist, n: int, rng) -> np.ndarray:
    """Draw n pose vectors (root rows left zero). Returns (n, Q)."""
    Q = model.num_pose
    theta = np.zeros((n, Q))
    names = list(model.tree.names)
    for j, name in enumerate(names):
        if j == 0:
            continue
        rows = {axis: row for axis, *row in dist.entries.get(name, [])}
        for axis in range(3):
            if axis in rows:
                mean, std, lo, hi = rows[axis]
            else:
                mean, std, lo, hi = 0.0, dist.leaf_sigma, -3 * dist.leaf_sigma, 3 * dist.leaf_sigma
            theta[:, 3 * j + axis] = _trunc(rng, mean, std, lo, hi, size=n)
    if dist.cross_prob > 0:
        chosen = rng.random(n) < dist.cross_prob
        if chosen.any():
            sub = theta[chosen]
            _apply_crossing(sub, model.tree, rng, dist.cross_jitter)
            theta[chosen] = sub
    return theta


def sample_roots(scene: SceneSpec, n: int, rng):
    """Root orientation and camera-frame placement for supine bodies.

    Orientation composes the face-up flip (half turn about x) with an
    in-plane yaw about the camera axis. Returns (aa (n,3), t (n,3)) in mm.
    """
    flip = np.array([np.pi, 0.0, 0.0])
    gammas = _trunc(rng, 0.0, scene.yaw_sigma, -scene.yaw_limit, scene.yaw_limit, size=n)
    aa = np.stack([body.compose_aa(flip, [0.0, 0.0, g]) for g in gammas])
    t = np.stack([
        rng.normal(0.0, scene.xy_sigma_mm, size=n),
        rng.normal(0.0, scene.xy_sigma_mm, size=n),
        rng.normal(scene.z_mean_mm, scene.z_sigma_mm, size=n),
    ], axis=1)
    return aa, t


def sample_source_poses(model: body.BodyModel, n: int, seed: int) -> np.ndarray:
    """Pose vectors for prior fitting (root rows zero; the prior ignores them)."""
    rng = np.random.default_rng(seed)
    return sample_body_poses(model, source_pose_dist(), n, rng)


@dataclass
class SampleFrames:
    """One rendered observation plus its ground truth."""
    depth_mm: np.ndarray      # (H, W) float, 0 marks holes
    mask: np.ndarray          # (H, W) bool body coverage
    keypoints: np.ndarray     # (K, 2) pixel coords, noisy
    conf: np.ndarray          # (K,)
    visible: np.ndarray       # (K,) bool, from the clean render
    joints_cam: np.ndarray    # (K, 3) mm ground truth
    depth_clean: np.ndarray   # (H, W) float, no noise or holes
    support_z: float


def render_sample(model: body.BodyModel, theta: np.ndarray, beta: np.ndarray,
                  t_place: np.ndarray, K: cam_mod.PinholeIntrinsics, rng,
                  noise: NoiseSpec, support_gap_mm: float = 10.0) -> SampleFrames:
    """Render one body to a depth frame with a support plane behind it."""
    verts = model.skin(theta, beta) + t_place
    joints_cam = model.joints(theta, beta) + t_place
    frame, _ = render.rasterize(verts, model.template.triangles, K)
    support_z = float(verts[:, 2].max()) + support_gap_mm
    depth_clean = np.where(frame.mask, frame.depth, support_z)
    full = render.DepthFrame(depth_clean, np.ones_like(frame.mask))
    visible = observe.visibility_from_render(joints_cam, full, K)

    depth = depth_clean + rng.normal(0.0, noise.depth_sigma_mm, size=depth_clean.shape)
    depth = np.maximum(depth, 1.0)
    holes = rng.random(depth.shape) < noise.hole_fraction
    depth[holes] = 0.0

    kp = cam_mod.project_pinhole(joints_cam, K)
    kp = kp + rng.normal(0.0, noise.keypoint_sigma_px, size=kp.shape)
    conf = np.ones(len(kp))
    return SampleFrames(depth_mm=depth, mask=frame.mask, keypoints=kp, conf=conf,
                        visible=visible, joints_cam=joints_cam,
                        depth_clean=depth_clean, support_z=support_z)


# ---------------------------------------------------------------------------
# dataset directories


def _dataset_id(manifest: dict) -> str:
    blob = json.dumps({k: v for k, v in manifest.items() if k != "dataset_id"},
                      sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def generate_dataset(out_dir, model: body.BodyModel, n_train: int, n_test: int,
                     seed: int, dist: PoseDist | None = None,
                     noise: NoiseSpec | None = None,
                     scene: SceneSpec | None = None,
                     K: cam_mod.PinholeIntrinsics | None = None) -> dict:
    """Write a full dataset directory and return its manifest."""
    out = Path(out_dir)
    dist = dist or target_pose_dist()
    noise = noise or NoiseSpec()
    scene = scene or SceneSpec()
    K = K or DESK_INTRINSICS
    for sub in ("depth", "masks", "keypoints", "gt"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    manifest = {
        "format": "depthpose-dataset",
        "version": 1,
        "units": "millimeters",
        "intrinsics": K.to_dict(),
        "joint_names": list(model.tree.names),
        "splits": {"train": int(n_train), "test": int(n_test)},
        "seed": int(seed),
        "noise": asdict(noise),
        "scene": asdict(scene),
        "cross_prob": dist.cross_prob,
    }
    manifest["dataset_id"] = _dataset_id(manifest)

    rng = np.random.default_rng(seed)
    for split, count in (("train", n_train), ("test", n_test)):
        thetas = sample_body_poses(model, dist, count, rng)
        root_aa, root_t = sample_roots(scene, count, rng)
        thetas[:, :3] = root_aa
        betas = _trunc(rng, 0.0, 0.5, -1.2, 1.2, size=(count, model.num_shape))

        kp_all = np.zeros((count, model.num_joints, 2))
        conf_all = np.ones((count, model.num_joints))
        vis_all = np.zeros((count, model.num_joints), dtype=bool)
        joints_all = np.zeros((count, model.num_joints, 3))
        for i in range(count):
            s = render_sample(model, thetas[i], betas[i], root_t[i], K, rng,
                              noise, scene.support_gap_mm)
            imgio.write_pgm16(out / "depth" / f"{split}_{i:05d}.pgm",
                              np.rint(s.depth_mm).astype(np.uint16))
            imgio.write_pgm8(out / "masks" / f"{split}_{i:05d}.pgm",
                             np.where(s.mask, 255, 0).astype(np.uint8))
            kp_all[i] = s.keypoints
            vis_all[i] = s.visible
            joints_all[i] = s.joints_cam

        with open(out / "keypoints" / f"{split}.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["sample", "joint", "u", "v", "conf", "visible"])
            for i in range(count):
                for j, name in enumerate(model.tree.names):
                    w.writerow([i, name, repr(float(kp_all[i, j, 0])),
                                repr(float(kp_all[i, j, 1])),
                                repr(float(conf_all[i, j])), int(vis_all[i, j])])

        np.savez(out / "gt" / f"{split}.npz",
                 theta=thetas, beta=betas, root_t=root_t,
                 joints_cam=joints_all, visible=vis_all)

    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


@dataclass
class SplitData:
    """A loaded dataset split. Depth stays uint16 mm until batching."""
    keypoints: np.ndarray   # (N, K, 2)
    conf: np.ndarray        # (N, K)
    visible: np.ndarray     # (N, K) detector-side visibility from generation
    depth_mm: np.ndarray    # (N, H, W) uint16
    mask: np.ndarray        # (N, H, W) bool
    intrinsics: cam_mod.PinholeIntrinsics
    joint_names: list
    dataset_id: str

    def __len__(self) -> int:
        return len(self.keypoints)


def read_manifest(root) -> dict:
    with open(Path(root) / "manifest.json") as f:
        manifest = json.load(f)
    if manifest.get("format") != "depthpose-dataset":
        raise ValueError("not a dataset directory")
    return manifest


def load_split(root, split: str) -> SplitData:
    root = Path(root)
    manifest = read_manifest(root)
    count = manifest["splits"][split]
    K = cam_mod.PinholeIntrinsics.from_dict(manifest["intrinsics"])
    names = manifest["joint_names"]
    J = len(names)
    jidx = {n: i for i, n in enumerate(names)}

    kp = np.zeros((count, J, 2))
    conf = np.zeros((count, J))
    vis = np.zeros((count, J), dtype=bool)
    with open(root / "keypoints" / f"{split}.csv", newline="") as f:
        for row in csv.DictReader(f):
            i, j = int(row["sample"]), jidx[row["joint"]]
            kp[i, j] = (float(row["u"]), float(row["v"]))
            conf[i, j] = float(row["conf"])
            vis[i, j] = row["visible"] == "1"

    depth = np.zeros((count, K.height, K.width), dtype=np.uint16)
    mask = np.zeros((count, K.height, K.width), dtype=bool)
    for i in range(count):
        depth[i] = imgio.read_pgm16(root / "depth" / f"{split}_{i:05d}.pgm")
        mask[i] = imgio.read_pgm8(root / "masks" / f"{split}_{i:05d}.pgm") > 127
    return SplitData(keypoints=kp, conf=conf, visible=vis, depth_mm=depth,
                     mask=mask, intrinsics=K, joint_names=list(names),
                     dataset_id=manifest["dataset_id"])


def load_gt(root, split: str) -> dict:
    with np.load(Path(root) / "gt" / f"{split}.npz") as z:
        return {k: z[k] for k in z.files}
