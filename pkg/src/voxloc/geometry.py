"""SE(3) poses, pinhole projection, DLT triangulation, PnP and RANSAC.

Conventions: camera-from-world, x_cam = R @ x_world + t. Translation error
is measured between camera centers C = -R.T @ t.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MIN_DEPTH = 1e-6  # meters; points with z <= this are behind the camera
MIN_TRIANGULATION_ANGLE_DEG = 0.5


class DegenerateGeometryError(ValueError):
    """Raised when a solver's design matrix is rank deficient."""


@dataclass
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


@dataclass
class Pose:
    rotation: np.ndarray  # (3,3) camera-from-world
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-9 or abs(np.linalg.det(self.rotation) - 1.0) > 1e-9:
            raise ValueError("rotation is not a proper orthonormal matrix")
        if not np.all(np.isfinite(self.translation)):
            raise ValueError("non-finite translation")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def transform(self, points: np.ndarray) -> np.ndarray:
        """World points (n,3) or (3,) into camera frame."""
        return np.atleast_2d(points) @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        """3x4 [R | t]."""
        return np.hstack([self.rotation, self.translation[:, None]])


@dataclass
class Point3D:
    id: int
    position: np.ndarray | None
    valid: bool


@dataclass
class Correspondence:
    pixel: np.ndarray  # (2,)
    world: np.ndarray  # (3,)
    confidence: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0,1]")


def look_at(center: np.ndarray, target: np.ndarray,
            up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera at `center` looking toward `target` (+z forward)."""
    fwd = np.asarray(target, float) - np.asarray(center, float)
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, float))
    if np.linalg.norm(right) < 1e-12:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    r = np.vstack([right, down, fwd])
    r = nearest_rotation(r)
    return Pose(r, -r @ np.asarray(center, float))


def nearest_rotation(m: np.ndarray) -> np.ndarray:
    """Closest proper rotation in the Frobenius sense."""
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def rotation_from_axis_angle(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        k = skew(w)
        return nearest_rotation(np.eye(3) + k)
    k = skew(w / theta)
    return (np.eye(3) + np.sin(theta) * k
            + (1.0 - np.cos(theta)) * (k @ k))


def skew(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def project(pose: Pose, k: Intrinsics, x: np.ndarray) -> np.ndarray | None:
    """Pixel coordinates of world point x, or None when behind the camera."""
    cam = pose.rotation @ np.asarray(x, float) + pose.translation
    if cam[2] <= MIN_DEPTH:
        return None
    return np.array([k.fx * cam[0] / cam[2] + k.cx,
                     k.fy * cam[1] / cam[2] + k.cy])


def project_many(pose: Pose, k: Intrinsics, xs: np.ndarray):
    """Vectorized projection; returns (pixels (n,2), depths (n,)).

    Pixels of points with depth <= MIN_DEPTH are NaN; check the depth.
    """
    cam = pose.transform(xs)
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(z > MIN_DEPTH, k.fx * cam[:, 0] / z + k.cx, np.nan)
        v = np.where(z > MIN_DEPTH, k.fy * cam[:, 1] / z + k.cy, np.nan)
    return np.stack([u, v], axis=1), z


def triangulate_dlt(observations, poses, intrinsics,
                    reproj_tol: float = 2.0, point_id: int = -1) -> Point3D:
    """Homogeneous DLT triangulation of one track.

    observations: list of (view id, pixel (2,)); poses/intrinsics indexable
    by view id. The point is marked invalid when the worst reprojection
    error exceeds reproj_tol pixels or the widest triangulation angle is
    below MIN_TRIANGULATION_ANGLE_DEG.
    """
    if len(observations) < 2:
        raise ValueError(f"triangulation needs >= 2 views, got {len(observations)}")
    rows = []
    for vid, pix in observations:
        p = intrinsics[vid].matrix() @ poses[vid].matrix()
        rows.append(pix[0] * p[2] - p[0])
        rows.append(pix[1] * p[2] - p[1])
    a = np.vstack(rows)
    _, _, vt = np.linalg.svd(a)
    xh = vt[-1]
    if abs(xh[3]) < 1e-15:
        return Point3D(point_id, None, False)
    x = xh[:3] / xh[3]

    rot = np.array([poses[vid].rotation for vid, _ in observations])
    trans = np.array([poses[vid].translation for vid, _ in observations])
    kmat = np.array([intrinsics[vid].matrix() for vid, _ in observations])
    pix = np.array([p for _, p in observations], dtype=np.float64)
    cam = rot @ x + trans
    if np.any(cam[:, 2] <= MIN_DEPTH):
        return Point3D(point_id, None, False)
    proj = np.einsum("nij,nj->ni", kmat[:, :2, :], cam) / cam[:, 2:3]
    if np.linalg.norm(proj - pix, axis=1).max() > reproj_tol:
        return Point3D(point_id, None, False)

    centers = np.einsum("nji,nj->ni", rot, -trans)
    rays = x - centers
    norms = np.linalg.norm(rays, axis=1)
    ok = norms > 1e-12
    if ok.sum() < 2:
        return Point3D(point_id, None, False)
    unit = rays[ok] / norms[ok, None]
    min_cos = np.clip((unit @ unit.T).min(), -1.0, 1.0)
    if np.degrees(np.arccos(min_cos)) < MIN_TRIANGULATION_ANGLE_DEG:
        return Point3D(point_id, None, False)
    return Point3D(point_id, x, True)


def _pnp_dlt(world: np.ndarray, normed: np.ndarray) -> Pose:
    """Direct linear transform for [R|t] from normalized image coordinates."""
    n = len(world)
    a = np.zeros((2 * n, 12))
    for i in range(n):
        x, y, z = world[i]
        u, v = normed[i]
        row = np.array([x, y, z, 1.0])
        a[2 * i, 0:4] = row
        a[2 * i, 8:12] = -u * row
        a[2 * i + 1, 4:8] = row
        a[2 * i + 1, 8:12] = -v * row
    _, s, vt = np.linalg.svd(a)
    # a second near-zero singular value means the null space is ambiguous
    if s[-2] < 1e-10 * max(s[0], 1.0):
        raise DegenerateGeometryError("rank-deficient PnP design matrix")
    p = vt[-1].reshape(3, 4)
    # fix overall sign with cheirality of the majority of points
    depths = world @ p[2, :3] + p[2, 3]
    if np.sum(depths > 0) < np.sum(depths < 0):
        p = -p
    u, s3, vt3 = np.linalg.svd(p[:, :3])
    r = u @ vt3
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt3
    t = p[:, 3] * 3.0 / s3.sum()
    return Pose(r, t)


def _reprojection_residuals(pose: Pose, k: Intrinsics,
                            world: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    pix, z = project_many(pose, k, world)
    res = pix - pixels
    res[z <= MIN_DEPTH] = 1e6  # behind-camera observations get a huge residual
    return res.ravel()


def pnp_solve(corrs: list[Correspondence], k: Intrinsics,
              max_iters: int = 20) -> Pose:
    """DLT initialization + Gauss-Newton refinement on SE(3)."""
    if len(corrs) < 6:
        raise ValueError(f"PnP needs >= 6 correspondences, got {len(corrs)}")
    world = np.array([c.world for c in corrs], dtype=np.float64)
    pixels = np.array([c.pixel for c in corrs], dtype=np.float64)
    kinv = np.linalg.inv(k.matrix())
    ones = np.ones((len(corrs), 1))
    normed = (np.hstack([pixels, ones]) @ kinv.T)[:, :2]

    pose = _pnp_dlt(world, normed)
    for _ in range(max_iters):
        res = _reprojection_residuals(pose, k, world, pixels)
        jac = _pnp_jacobian(pose, k, world)
        try:
            step, *_ = np.linalg.lstsq(jac, -res, rcond=None)
        except np.linalg.LinAlgError:
            break
        # left-multiplied update, matching the jacobian: cam' = exp(w) cam + dt
        r_step = rotation_from_axis_angle(step[:3])
        pose = Pose(nearest_rotation(r_step @ pose.rotation),
                    r_step @ pose.translation + step[3:])
        if np.linalg.norm(step) < 1e-10:
            break
    return pose


def _pnp_jacobian(pose: Pose, k: Intrinsics, world: np.ndarray) -> np.ndarray:
    """d(residual)/d(omega, t) for the left-multiplied SE(3) update."""
    cam = pose.transform(world)
    n = len(world)
    jac = np.zeros((2 * n, 6))
    for i in range(n):
        x, y, z = cam[i]
        if z <= MIN_DEPTH:
            continue  # huge constant residual; no useful gradient
        d_uv_cam = np.array([[k.fx / z, 0.0, -k.fx * x / z ** 2],
                             [0.0, k.fy / z, -k.fy * y / z ** 2]])
        d_cam = np.hstack([-skew(cam[i]), np.eye(3)])
        jac[2 * i:2 * i + 2] = d_uv_cam @ d_cam
    return jac


@dataclass
class RansacResult:
    success: bool
    pose: Pose | None
    inlier_mask: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))

    @property
    def num_inliers(self) -> int:
        return int(self.inlier_mask.sum())


def ransac_pnp(corrs: list[Correspondence], k: Intrinsics,
               inlier_tol: float = 3.0, max_iters: int = 1000,
               seed: int = 0) -> RansacResult:
    """Seeded RANSAC over minimal 6-point PnP samples, refit on inliers.

    Returns a failure result (never raises) when no model reaches 6 inliers.
    """
    if len(corrs) < 6:
        return RansacResult(False, None)
    world = np.array([c.world for c in corrs], dtype=np.float64)
    pixels = np.array([c.pixel for c in corrs], dtype=np.float64)
    rng = np.random.default_rng(seed)
    n = len(corrs)

    def mask_for(pose: Pose) -> np.ndarray:
        pix, z = project_many(pose, k, world)
        err = np.linalg.norm(pix - pixels, axis=1)
        return (z > MIN_DEPTH) & (err <= inlier_tol)

    best_mask = None
    best_count = 0
    for _ in range(max_iters):
        pick = rng.choice(n, size=6, replace=False)
        try:
            pose = pnp_solve([corrs[i] for i in pick], k)
        except (DegenerateGeometryError, ValueError):
            continue
        mask = mask_for(pose)
        count = int(mask.sum())
        if count > best_count:  # ties keep the earlier trial
            best_count = count
            best_mask = mask
    if best_mask is None or best_count < 6:
        return RansacResult(False, None)

    inlier_idx = np.flatnonzero(best_mask)
    try:
        refined = pnp_solve([corrs[i] for i in inlier_idx], k)
    except (DegenerateGeometryError, ValueError):
        return RansacResult(False, None)
    final_mask = mask_for(refined)
    if int(final_mask.sum()) < 6:
        return RansacResult(False, None)
    return RansacResult(True, refined, final_mask)


def pose_error(estimate: Pose, truth: Pose) -> tuple[float, float]:
    """(camera-center distance in meters, rotation angle in degrees)."""
    trans = float(np.linalg.norm(estimate.center - truth.center))
    cosang = (np.trace(truth.rotation.T @ estimate.rotation) - 1.0) / 2.0
    rot = float(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))
    return trans, min(max(rot, 0.0), 180.0)
