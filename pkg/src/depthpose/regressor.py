"""Feed-forward regressor from 2D keypoints to pose, shape and camera.

A small fully connected network with leaky-ReLU hidden layers and a linear
head split into pose, shape, a raw scale (mapped through softplus so the
weak-perspective scale stays positive) and an image-plane translation.
Forward and backward passes are written out explicitly; there is no autograd
anywhere in the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def softplus_inv(y):
    """Inverse of softplus for positive y."""
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ValueError("softplus_inv needs positive input")
    return np.log(np.expm1(y))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def featurize(kp_centered: np.ndarray, conf: np.ndarray, norm: float) -> np.ndarray:
    """Network input: confidence-gated normalized keypoints followed by the
    confidences themselves, flattened to (B, 3J). A joint with confidence 0
    contributes nothing positionally."""
    kp = np.asarray(kp_centered, dtype=float) / norm
    c = np.asarray(conf, dtype=float)
    return np.concatenate([(kp * c[..., None]).reshape(kp.shape[0], -1), c], axis=1)


@dataclass
class RegressorSpec:
    in_dim: int
    hidden: tuple
    n_pose: int
    n_shape: int
    scale_init: float
    rest_pose: np.ndarray | None = None  # output-bias pose; zeros when None
    leak: float = 0.01
    out_std: float = 1e-3

    @property
    def out_dim(self) -> int:
        return self.n_pose + self.n_shape + 3


@dataclass
class RegressorOutput:
    theta: np.ndarray
    beta: np.ndarray
    scale: np.ndarray
    trans: np.ndarray


class PoseRegressor:
    """MLP with parameters stored as a flat list [W1, b1, W2, b2, ...]."""

    def __init__(self, spec: RegressorSpec, params: list[np.ndarray]):
        self.spec = spec
        self.params = params

    @classmethod
    def create(cls, spec: RegressorSpec, seed: int) -> "PoseRegressor":
        """He-initialized hidden layers; the output layer starts near zero
        with its bias set so a zero input maps exactly to the rest pose,
        zero shape, the configured initial scale and zero translation."""
        rng = np.random.default_rng(seed)
        dims = [spec.in_dim, *spec.hidden, spec.out_dim]
        params: list[np.ndarray] = []
        for i in range(len(dims) - 1):
            fan_in, fan_out = dims[i], dims[i + 1]
            last = i == len(dims) - 2
            std = spec.out_std if last else np.sqrt(2.0 / fan_in)
            W = rng.normal(0.0, std, size=(fan_in, fan_out))
            b = np.zeros(fan_out)
            if last:
                if spec.rest_pose is not None:
                    b[:spec.n_pose] = np.asarray(spec.rest_pose, dtype=float)
                b[spec.n_pose + spec.n_shape] = softplus_inv(spec.scale_init)
            params.append(W)
            params.append(b)
        return cls(spec, params)

    def _split(self, y: np.ndarray) -> RegressorOutput:
        s = self.spec
        raw_scale = y[:, s.n_pose + s.n_shape]
        return RegressorOutput(
            theta=y[:, :s.n_pose],
            beta=y[:, s.n_pose:s.n_pose + s.n_shape],
            scale=softplus(raw_scale),
            trans=y[:, s.n_pose + s.n_shape + 1:],
        )

    def forward(self, feats: np.ndarray):
        """Returns (output, cache); feed cache to backward."""
        x = np.asarray(feats, dtype=float)
        leak = self.spec.leak
        pre_acts = []
        h = x
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            z = h @ W + b
            if i < n_layers - 1:
                pre_acts.append((h, z))
                h = np.where(z > 0, z, leak * z)
            else:
                pre_acts.append((h, z))
                h = z
        return self._split(h), (pre_acts, h)

    def predict(self, feats: np.ndarray) -> RegressorOutput:
        return self.forward(feats)[0]

    def backward(self, cache, d_theta: np.ndarray, d_beta: np.ndarray,
                 d_scale: np.ndarray, d_trans: np.ndarray) -> list[np.ndarray]:
        """Parameter gradients for a loss with the given output gradients,
        summed over the batch. Aligned with self.params."""
        s = self.spec
        pre_acts, y = cache
        dy = np.zeros_like(y)
        dy[:, :s.n_pose] = d_theta
        dy[:, s.n_pose:s.n_pose + s.n_shape] = d_beta
        k = s.n_pose + s.n_shape
        dy[:, k] = d_scale * _sigmoid(y[:, k])
        dy[:, k + 1:] = d_trans
        grads: list[np.ndarray] = [None] * len(self.params)
        n_layers = len(self.params) // 2
        g = dy
        for i in reversed(range(n_layers)):
            hin, z = pre_acts[i]
            if i < n_layers - 1:
                g = g * np.where(z > 0, 1.0, s.leak)
            grads[2 * i] = hin.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = g @ self.params[2 * i].T
        return grads


# ---------------------------------------------------------------------------
# serialization


def save_weights(path, reg: PoseRegressor, meta: dict | None = None) -> None:
    arrays = {f"p{i}": p for i, p in enumerate(reg.params)}
    extras = {}
    for k, v in (meta or {}).items():
        extras[f"meta_{k}"] = np.asarray(v)
    spec = reg.spec
    np.savez(
        path,
        format="depthpose-regressor",
        version=1,
        n_params=len(reg.params),
        in_dim=spec.in_dim,
        hidden=np.asarray(spec.hidden, dtype=int),
        n_pose=spec.n_pose,
        n_shape=spec.n_shape,
        scale_init=spec.scale_init,
        rest_pose=(np.zeros(0) if spec.rest_pose is None
                   else np.asarray(spec.rest_pose, dtype=float)),
        leak=spec.leak,
        out_std=spec.out_std,
        **arrays,
        **extras,
    )


def load_weights(path) -> tuple[PoseRegressor, dict]:
    with np.load(path, allow_pickle=False) as z:
        if str(z["format"]) != "depthpose-regressor":
            raise ValueError("not a regressor checkpoint")
        rest = z["rest_pose"]
        spec = RegressorSpec(
            in_dim=int(z["in_dim"]),
            hidden=tuple(int(h) for h in z["hidden"]),
            n_pose=int(z["n_pose"]),
            n_shape=int(z["n_shape"]),
            scale_init=float(z["scale_init"]),
            rest_pose=None if rest.size == 0 else rest,
            leak=float(z["leak"]),
            out_std=float(z["out_std"]),
        )
        params = [z[f"p{i}"] for i in range(int(z["n_params"]))]
        meta = {k[5:]: z[k] for k in z.files if k.startswith("meta_")}
    return PoseRegressor(spec, params), meta
