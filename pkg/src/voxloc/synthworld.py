"""Procedural multi-view worlds with a descriptor oracle.

Stands in for real imagery: every 3D point carries a fixed unit-norm
descriptor; views observe noisy pixels and noisy, illumination-shifted
descriptors. Reference tracks are triangulated through the DLT stand-in so
the pipeline trains on coordinates that carry realistic triangulation
error, never on the exact ground truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .containers import FormatError, Reader, Writer
from .geometry import Intrinsics, Point3D, Pose, look_at, triangulate_dlt

DATASET_MAGIC = b"NMDS"
DATASET_FORMAT_VERSION = 1


@dataclass
class WorldConfig:
    num_points: int = 2000
    extent: tuple[float, float, float] = (8.0, 8.0, 4.0)
    num_ref_views: int = 100
    num_query_views: int = 20
    pixel_noise_sigma: float = 0.5
    descriptor_dim: int = 64
    descriptor_noise_sigma: float = 0.05
    illumination_shift_sigma: float = 0.05
    min_depth: float = 1.0
    max_depth: float = 30.0
    frustum_margin: float = 4.0
    min_query_baseline: float = 0.3
    image_width: int = 640
    image_height: int = 480
    focal: float = 525.0
    triangulation_tol: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if min(self.num_points, self.num_ref_views, self.num_query_views) < 1:
            raise ValueError("counts must be >= 1")
        if min(self.extent) <= 0:
            raise ValueError(f"degenerate extent {self.extent}")
        for s in (self.pixel_noise_sigma, self.descriptor_noise_sigma,
                  self.illumination_shift_sigma):
            if s < 0:
                raise ValueError("noise sigmas must be >= 0")

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.focal, self.focal,
                          self.image_width / 2.0, self.image_height / 2.0,
                          self.image_width, self.image_height)


@dataclass
class World:
    """Ground truth: never handed to training directly."""
    points: np.ndarray             # (P, 3)
    descriptors: np.ndarray        # (P, D_raw) unit-norm oracle descriptors
    ref_poses: list[Pose]
    query_poses: list[Pose]
    intrinsics: Intrinsics
    config: WorldConfig


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, *key)))


def _orbit_pose(rng: np.random.Generator, angle: float, radius: float,
                extent, target_jitter: float = 0.5) -> Pose:
    ez = extent[2]
    center = np.array([radius * np.cos(angle), radius * np.sin(angle),
                       rng.uniform(-0.7 * ez, 0.7 * ez)])
    target = rng.uniform(-target_jitter, target_jitter, size=3)
    return look_at(center, target)


def generate_world(config: WorldConfig) -> World:
    """Points in a box, reference cameras on a jittered orbit, novel queries."""
    ex = np.asarray(config.extent)
    pts = _rng(config.seed, 0).uniform(-ex / 2.0, ex / 2.0,
                                       size=(config.num_points, 3))
    g = _rng(config.seed, 1).normal(size=(config.num_points,
                                          config.descriptor_dim))
    g /= np.linalg.norm(g, axis=1, keepdims=True)

    radius = 1.1 * float(np.linalg.norm(ex[:2]) / 2.0) + 3.0
    rng_ref = _rng(config.seed, 2)
    ref_poses = []
    for i in range(config.num_ref_views):
        angle = 2.0 * np.pi * i / config.num_ref_views + rng_ref.uniform(-0.05, 0.05)
        r = radius * rng_ref.uniform(0.92, 1.08)
        ref_poses.append(_orbit_pose(rng_ref, angle, r, ex))
    ref_centers = np.array([p.center for p in ref_poses])

    rng_q = _rng(config.seed, 3)
    query_poses = []
    for i in range(config.num_query_views):
        for _ in range(200):
            angle = rng_q.uniform(0.0, 2.0 * np.pi)
            r = radius * rng_q.uniform(0.9, 1.15)
            pose = _orbit_pose(rng_q, angle, r, ex)
            dists = np.linalg.norm(ref_centers - pose.center, axis=1)
            if dists.min() >= config.min_query_baseline:
                query_poses.append(pose)
                break
        else:
            raise RuntimeError("could not place a query camera off the "
                               "reference trajectory")
    return World(pts, g, ref_poses, query_poses, config.intrinsics(), config)


@dataclass
class ViewObservations:
    pose: Pose | None              # None for query views (pose is the unknown)
    intrinsics: Intrinsics
    pixels: np.ndarray             # (M, 2)
    descriptors: np.ndarray        # (M, D_raw) unit-norm
    point_ids: np.ndarray          # (M,)

    @property
    def num_keypoints(self) -> int:
        return len(self.point_ids)


def observe(pose: Pose, world: World, config: WorldConfig,
            rng: np.random.Generator, include_pose: bool = True) -> ViewObservations:
    """Project visible points and synthesize noisy keypoint observations."""
    k = world.intrinsics
    cam = pose.transform(world.points)
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * cam[:, 0] / z + k.cx
        v = k.fy * cam[:, 1] / z + k.cy
    m = config.frustum_margin
    visible = ((z >= config.min_depth) & (z <= config.max_depth)
               & (u >= m) & (u <= k.width - m)
               & (v >= m) & (v <= k.height - m))
    ids = np.flatnonzero(visible)
    pixels = np.stack([u[ids], v[ids]], axis=1)
    if config.pixel_noise_sigma > 0:
        pixels = pixels + rng.normal(0.0, config.pixel_noise_sigma,
                                     size=pixels.shape)
    desc = world.descriptors[ids].copy()
    if config.descriptor_noise_sigma > 0:
        desc += rng.normal(0.0, config.descriptor_noise_sigma, size=desc.shape)
    if config.illumination_shift_sigma > 0:
        shift = rng.normal(0.0, config.illumination_shift_sigma,
                           size=(1, desc.shape[1]))
        desc += shift
    desc /= np.linalg.norm(desc, axis=1, keepdims=True)
    return ViewObservations(pose if include_pose else None, k, pixels, desc,
                            ids.astype(np.int64))


@dataclass
class EvalGroundTruth:
    """Evaluation-only data; not visible through the training interface."""
    query_poses: list[Pose]
    point_positions: np.ndarray    # (P, 3) exact generator positions


@dataclass
class ReferenceDataset:
    views: list[ViewObservations]
    points: dict[int, Point3D]     # triangulated, possibly invalid
    query_views: list[ViewObservations]
    config: WorldConfig
    _ground_truth: EvalGroundTruth = field(repr=False, default=None)

    def evaluation_ground_truth(self) -> EvalGroundTruth:
        return self._ground_truth


def build_dataset(world: World, config: WorldConfig) -> ReferenceDataset:
    """Observe all views and triangulate reference tracks with the DLT."""
    views = [observe(pose, world, config, _rng(config.seed, 10, i))
             for i, pose in enumerate(world.ref_poses)]
    query_views = [observe(pose, world, config, _rng(config.seed, 20, i),
                           include_pose=False)
                   for i, pose in enumerate(world.query_poses)]

    tracks: dict[int, list[tuple[int, np.ndarray]]] = {}
    for view_id, view in enumerate(views):
        for pix, pid in zip(view.pixels, view.point_ids):
            tracks.setdefault(int(pid), []).append((view_id, pix))

    poses = [v.pose for v in views]
    intrinsics = [v.intrinsics for v in views]
    points: dict[int, Point3D] = {}
    for pid in range(config.num_points):
        obs = tracks.get(pid, [])
        if len(obs) < 2:
            points[pid] = Point3D(pid, None, False)
            continue
        points[pid] = triangulate_dlt(obs, poses, intrinsics,
                                      reproj_tol=config.triangulation_tol,
                                      point_id=pid)
    gt = EvalGroundTruth(world.query_poses, world.points.copy())
    return ReferenceDataset(views, points, query_views, config, gt)


def generate_dataset(config: WorldConfig) -> ReferenceDataset:
    return build_dataset(generate_world(config), config)


def _write_intrinsics(w: Writer, k: Intrinsics) -> None:
    w.f64(k.fx)
    w.f64(k.fy)
    w.f64(k.cx)
    w.f64(k.cy)
    w.u32(k.width)
    w.u32(k.height)


def _read_intrinsics(r: Reader) -> Intrinsics:
    return Intrinsics(r.f64("fx"), r.f64("fy"), r.f64("cx"), r.f64("cy"),
                      r.u32("width"), r.u32("height"))


def _write_pose(w: Writer, pose: Pose) -> None:
    w.f64_array(pose.rotation)
    w.f64_array(pose.translation)


def _read_pose(r: Reader) -> Pose:
    rot = r.f64_array(9, "rotation").reshape(3, 3)
    return Pose(rot, r.f64_array(3, "translation"))


def _write_view(w: Writer, view: ViewObservations) -> None:
    w.u8(1 if view.pose is not None else 0)
    if view.pose is not None:
        _write_pose(w, view.pose)
    _write_intrinsics(w, view.intrinsics)
    w.u32(view.num_keypoints)
    w.u32(view.descriptors.shape[1])
    w.f64_array(view.pixels)
    w.f64_array(view.descriptors)
    w.u32_array(view.point_ids)


def _read_view(r: Reader) -> ViewObservations:
    pose = _read_pose(r) if r.u8("has pose") else None
    k = _read_intrinsics(r)
    m = r.u32("keypoint count")
    d = r.u32("descriptor dim")
    pixels = r.f64_array(2 * m, "pixels").reshape(m, 2)
    desc = r.f64_array(m * d, "descriptors").reshape(m, d)
    ids = r.u32_array(m, "point ids")
    return ViewObservations(pose, k, pixels, desc, ids)


def dataset_to_bytes(ds: ReferenceDataset) -> bytes:
    w = Writer()
    w.magic(DATASET_MAGIC)
    w.u32(DATASET_FORMAT_VERSION)
    cfg = json.dumps(vars(ds.config), sort_keys=True).encode()
    w.u32(len(cfg))
    w.bytes_(cfg)
    w.u32(len(ds.views))
    for view in ds.views:
        _write_view(w, view)
    w.u32(len(ds.query_views))
    for view in ds.query_views:
        _write_view(w, view)
    w.u32(len(ds.points))
    for pid in sorted(ds.points):
        p = ds.points[pid]
        w.u32(pid)
        w.u8(1 if p.valid else 0)
        if p.valid:
            w.f64_array(p.position)
    gt = ds._ground_truth
    w.u32(len(gt.query_poses))
    for pose in gt.query_poses:
        _write_pose(w, pose)
    w.u32(len(gt.point_positions))
    w.f64_array(gt.point_positions)
    return w.getvalue()


def dataset_from_bytes(data: bytes) -> ReferenceDataset:
    r = Reader(data)
    r.expect_magic(DATASET_MAGIC)
    version = r.u32("format version")
    if version != DATASET_FORMAT_VERSION:
        raise FormatError(4, f"unsupported dataset format version {version}")
    cfg_len = r.u32("config length")
    cfg_raw = json.loads(r.raw(cfg_len, "config json").decode())
    cfg_raw["extent"] = tuple(cfg_raw["extent"])
    config = WorldConfig(**cfg_raw)
    views = [_read_view(r) for _ in range(r.u32("view count"))]
    query_views = [_read_view(r) for _ in range(r.u32("query view count"))]
    points = {}
    for _ in range(r.u32("point count")):
        pid = r.u32("point id")
        valid = bool(r.u8("valid"))
        pos = r.f64_array(3, "position") if valid else None
        points[pid] = Point3D(pid, pos, valid)
    gt_poses = [_read_pose(r) for _ in range(r.u32("gt pose count"))]
    npts = r.u32("gt point count")
    gt_pts = r.f64_array(3 * npts, "gt positions").reshape(npts, 3)
    r.expect_end()
    return ReferenceDataset(views, points, query_views, config,
                            EvalGroundTruth(gt_poses, gt_pts))


def save_dataset(ds: ReferenceDataset, path) -> None:
    with open(path, "wb") as f:
        f.write(dataset_to_bytes(ds))


def load_dataset(path) -> ReferenceDataset:
    with open(path, "rb") as f:
        return dataset_from_bytes(f.read())


def write_manifest(ds: ReferenceDataset, path) -> None:
    """Human-readable sidecar: counts plus the generating config."""
    valid = sum(1 for p in ds.points.values() if p.valid)
    manifest = {
        "format": DATASET_MAGIC.decode(),
        "version": DATASET_FORMAT_VERSION,
        "num_reference_views": len(ds.views),
        "num_query_views": len(ds.query_views),
        "num_points": len(ds.points),
        "num_valid_points": valid,
        "config": vars(ds.config),
    }
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
