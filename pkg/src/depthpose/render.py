"""Software z-buffer depth rasterizer with frozen-topology gradients.

Triangles are rasterized front-to-back agnostic (painter-free z-buffer with
min composition), sampling pixel centers at integer coordinates. Depth is
interpolated perspective-correct by interpolating 1/z with screen-space
barycentric weights. Shared edges follow a top-left fill rule so adjacent
triangles never double-write a pixel.

Gradients deliberately ignore silhouette motion: the per-pixel triangle
assignment and barycentric weights are frozen in a RasterSnapshot, and only
the interpolated vertex depths carry derivative. dD/d(vertex z) for a covered
pixel is (z_pixel / z_vertex)^2 * lambda_vertex, the exact derivative of the
frozen interpolation formula.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from .camera import PinholeIntrinsics

Z_NEAR_MM = 1.0


@dataclass
class DepthFrame:
    """Depth in mm (0 where no measurement) plus a validity/coverage mask."""

    depth: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.depth.shape != self.mask.shape:
            raise ValueError("depth and mask shapes differ")
        covered = self.depth[self.mask]
        if covered.size and (not np.all(np.isfinite(covered)) or np.any(covered < 0)):
            raise ValueError("masked pixels must carry finite nonnegative depth")

    @property
    def shape(self):
        return self.depth.shape


@dataclass
class RasterSnapshot:
    """Frozen rasterization state for gradient evaluation."""

    tri_id: np.ndarray  # (H, W) int32, -1 where uncovered
    bary: np.ndarray  # (H, W, 3) screen-space barycentric weights
    triangles: np.ndarray  # (F, 3) vertex indices
    vertex_z: np.ndarray  # (V,) camera depths used at rasterization time


@nb.njit(cache=True)
def _raster_kernel(xy, z, tris, width, height, z_near):
    depth = np.zeros((height, width))
    tri_id = np.full((height, width), -1, dtype=np.int32)
    bary = np.zeros((height, width, 3))
    for f in range(tris.shape[0]):
        ia, ib, ic = tris[f, 0], tris[f, 1], tris[f, 2]
        za, zb, zc = z[ia], z[ib], z[ic]
        if za <= z_near or zb <= z_near or zc <= z_near:
            continue
        xa, ya = xy[ia, 0], xy[ia, 1]
        xb, yb = xy[ib, 0], xy[ib, 1]
        xc, yc = xy[ic, 0], xy[ic, 1]
        area = (xb - xa) * (yc - ya) - (yb - ya) * (xc - xa)
        if area == 0.0:
            continue
        # normalize winding so the interior has nonnegative edge functions;
        # remember the swap to emit barycentrics in original vertex order
        swapped = False
        if area < 0.0:
            xb, yb, zb, xc, yc, zc = xc, yc, zc, xb, yb, zb
            area = -area
            swapped = True
        lo_x = max(0, int(np.ceil(min(xa, xb, xc))))
        hi_x = min(width - 1, int(np.floor(max(xa, xb, xc))))
        lo_y = max(0, int(np.ceil(min(ya, yb, yc))))
        hi_y = min(height - 1, int(np.floor(max(ya, yb, yc))))
        if lo_x > hi_x or lo_y > hi_y:
            continue
        # top-left acceptance per edge (edge i is opposite vertex i); with the
        # normalized winding a top edge runs rightward and a left edge upward
        tl0 = (yb == yc and xc > xb) or (yc < yb)
        tl1 = (yc == ya and xa > xc) or (ya < yc)
        tl2 = (ya == yb and xb > xa) or (yb < ya)
        inv_za, inv_zb, inv_zc = 1.0 / za, 1.0 / zb, 1.0 / zc
        for py in range(lo_y, hi_y + 1):
            for px in range(lo_x, hi_x + 1):
                w0 = (xc - xb) * (py - yb) - (yc - yb) * (px - xb)
                w1 = (xa - xc) * (py - yc) - (ya - yc) * (px - xc)
                w2 = (xb - xa) * (py - ya) - (yb - ya) * (px - xa)
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                if (w0 == 0.0 and not tl0) or (w1 == 0.0 and not tl1) or (w2 == 0.0 and not tl2):
                    continue
                l0 = w0 / area
                l1 = w1 / area
                l2 = w2 / area
                d = 1.0 / (l0 * inv_za + l1 * inv_zb + l2 * inv_zc)
                if tri_id[py, px] == -1 or d < depth[py, px]:
                    depth[py, px] = d
                    tri_id[py, px] = f
                    if swapped:
                        bary[py, px, 0] = l0
                        bary[py, px, 1] = l2
                        bary[py, px, 2] = l1
                    else:
                        bary[py, px, 0] = l0
                        bary[py, px, 1] = l1
                        bary[py, px, 2] = l2
    return depth, tri_id, bary


def rasterize_screen(xy: np.ndarray, z: np.ndarray, triangles: np.ndarray,
                     width: int, height: int):
    """Rasterize already-projected geometry. xy (V,2) pixels, z (V,) mm.

    Returns (DepthFrame, RasterSnapshot). Triangles with a vertex at or behind
    the near plane, or with zero screen area, are skipped.
    """
    xy = np.ascontiguousarray(xy, dtype=float)
    z = np.ascontiguousarray(z, dtype=float)
    triangles = np.ascontiguousarray(triangles, dtype=np.int64)
    depth, tri_id, bary = _raster_kernel(xy, z, triangles, int(width), int(height), Z_NEAR_MM)
    frame = DepthFrame(depth, tri_id >= 0)
    return frame, RasterSnapshot(tri_id, bary, triangles, z.copy())


def project_vertices(vertices_cam: np.ndarray, K: PinholeIntrinsics):
    """Pinhole-project camera-frame vertices; z <= near yields unusable xy
    that the rasterizer never reads because such triangles are clipped."""
    v = np.asarray(vertices_cam, dtype=float)
    z = v[:, 2]
    safe = np.where(z > Z_NEAR_MM, z, 1.0)
    xy = np.stack([K.fx * v[:, 0] / safe + K.cx, K.fy * v[:, 1] / safe + K.cy], axis=1)
    return xy, z


def rasterize(vertices_cam: np.ndarray, triangles: np.ndarray, K: PinholeIntrinsics):
    """Render camera-frame geometry (mm) to a depth frame at native resolution."""
    xy, z = project_vertices(vertices_cam, K)
    return rasterize_screen(xy, z, triangles, K.width, K.height)


def reinterpolate_depth(snapshot: RasterSnapshot, vertex_z: np.ndarray) -> np.ndarray:
    """Re-evaluate per-pixel depth from new vertex depths under the frozen
    triangle assignment and barycentric weights. This is the function the
    snapshot gradient differentiates."""
    vertex_z = np.asarray(vertex_z, dtype=float)
    covered = snapshot.tri_id >= 0
    out = np.zeros(snapshot.tri_id.shape)
    tids = snapshot.tri_id[covered]
    lam = snapshot.bary[covered]  # (M, 3)
    zv = vertex_z[snapshot.triangles[tids]]  # (M, 3)
    out[covered] = 1.0 / np.sum(lam / zv, axis=1)
    return out


def vertex_depth_grads(snapshot: RasterSnapshot, pixel_grad: np.ndarray,
                       num_vertices: int) -> np.ndarray:
    """Back-propagate a per-pixel depth gradient onto vertex depths.

    pixel_grad (H, W) may be nonzero anywhere; uncovered pixels are ignored.
    Returns dL/d(vertex z), shape (num_vertices,).
    """
    covered = (snapshot.tri_id >= 0) & (pixel_grad != 0.0)
    tids = snapshot.tri_id[covered]
    lam = snapshot.bary[covered]
    g = pixel_grad[covered]
    verts = snapshot.triangles[tids]  # (M, 3)
    zv = snapshot.vertex_z[verts]
    zp = 1.0 / np.sum(lam / zv, axis=1)
    w = (zp[:, None] / zv) ** 2 * lam  # dD/dz_i
    out = np.zeros(num_vertices)
    np.add.at(out, verts.ravel(), (g[:, None] * w).ravel())
    return out
