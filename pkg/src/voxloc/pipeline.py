"""End-to-end localization of query views plus benchmark evaluation.

Retrieval ranks reference views by mean-descriptor cosine similarity; the
retrieved views activate voxels via the coverage rule; every keypoint is
decoded against every activated voxel; candidates with confidence >= 0.5
become 2D-3D correspondences for PnP+RANSAC. Failure is a first-class
result value, never an exception.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .decoder import DecoderParams, attention_scores, decode, encode_feature
from .geometry import Correspondence, Pose, pose_error, ransac_pnp
from .scene import SceneRepresentation, VoxelId, size_bytes
from .synthworld import ReferenceDataset, ViewObservations

DEFAULT_THRESHOLDS = ((0.25, 2.0), (0.5, 5.0), (5.0, 10.0))


@dataclass
class LocalizeOptions:
    top_k: int = 10
    bypass_retrieval: bool = False  # small scenes may activate all voxels
    confidence_min: float = 0.5     # candidates with c >= this are kept
    inlier_tol: float = 3.0
    ransac_iters: int = 1000
    seed: int = 0


@dataclass
class LocalizationResult:
    success: bool
    pose: Pose | None
    num_activated_voxels: int = 0
    num_candidate_points: int = 0
    num_confident_points: int = 0
    num_inliers: int = 0
    wall_time_s: float = 0.0

    def __post_init__(self):
        ok = (self.num_inliers <= self.num_confident_points
              <= self.num_candidate_points)
        if not ok:
            raise ValueError("inconsistent candidate counting chain")


def retrieve_views(query: ViewObservations, dataset: ReferenceDataset,
                   top_k: int) -> list[int]:
    """Reference view ids ranked by cosine similarity of mean descriptors.

    Ties break toward the lower view id.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    if query.num_keypoints == 0:
        return []
    q = query.descriptors.mean(axis=0)
    qn = np.linalg.norm(q)
    sims = []
    for view_id, view in enumerate(dataset.views):
        r = view.descriptors.mean(axis=0)
        denom = qn * np.linalg.norm(r)
        sims.append(float(q @ r / denom) if denom > 0 else -1.0)
    order = sorted(range(len(sims)), key=lambda i: (-sims[i], i))
    return order[:top_k]


def activate_voxels(view_ids, scene: SceneRepresentation) -> list[VoxelId]:
    """Union of voxels covered by any retrieved view, sorted by voxel id."""
    chosen = set(view_ids)
    out = [vid for vid, v in scene.voxels.items()
           if chosen.intersection(v.covering_views)]
    return sorted(out)


def localize(query: ViewObservations, scene: SceneRepresentation,
             params: DecoderParams, dataset: ReferenceDataset | None = None,
             opts: LocalizeOptions | None = None) -> LocalizationResult:
    """Decode every (keypoint, activated voxel) pair and solve PnP+RANSAC.

    A keypoint may contribute candidates in several voxels; RANSAC
    arbitrates. With bypass_retrieval (or no dataset) all voxels activate.
    """
    opts = opts or LocalizeOptions()
    start = time.perf_counter()

    def fail(activated=0, candidates=0, confident=0):
        return LocalizationResult(False, None, activated, candidates,
                                  confident, 0,
                                  time.perf_counter() - start)

    if query.num_keypoints == 0:
        return fail()
    if opts.bypass_retrieval or dataset is None:
        voxel_ids = sorted(scene.voxels)
    else:
        retrieved = retrieve_views(query, dataset, opts.top_k)
        voxel_ids = activate_voxels(retrieved, scene)
    if not voxel_ids:
        return fail()

    feats = encode_feature(None, params, dc.constant(query.descriptors))
    corrs: list[Correspondence] = []
    num_candidates = 0
    for vid in voxel_ids:
        voxel = scene.voxels[vid]
        result = decode(None, params, feats, voxel.codes, voxel.origin)
        conf = result.confidence.values[:, 0]
        world = result.world()
        num_candidates += query.num_keypoints
        for i in np.flatnonzero(conf >= opts.confidence_min):
            corrs.append(Correspondence(query.pixels[i], world[i],
                                        float(conf[i])))
    if len(corrs) < 6:
        return fail(len(voxel_ids), num_candidates, len(corrs))

    ransac = ransac_pnp(corrs, query.intrinsics, inlier_tol=opts.inlier_tol,
                        max_iters=opts.ransac_iters, seed=opts.seed)
    if not ransac.success:
        return fail(len(voxel_ids), num_candidates, len(corrs))
    return LocalizationResult(True, ransac.pose, len(voxel_ids),
                              num_candidates, len(corrs),
                              ransac.num_inliers,
                              time.perf_counter() - start)


@dataclass
class EvalReport:
    median_translation_m: float
    median_rotation_deg: float
    thresholds: tuple
    accuracies: list[float]
    failure_count: int
    num_queries: int
    map_size_bytes: int
    errors: list[tuple[float, float] | None] = field(default_factory=list)

    def summary(self) -> str:
        lines = [
            f"queries: {self.num_queries} ({self.failure_count} failed)",
            f"median translation error: {self.median_translation_m:.4f} m",
            f"median rotation error:    {self.median_rotation_deg:.4f} deg",
            f"map size: {self.map_size_bytes} bytes",
        ]
        for (d, a), acc in zip(self.thresholds, self.accuracies):
            lines.append(f"accuracy @ ({d} m, {a} deg): {acc * 100.0:.1f}%")
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["query", "success", "translation_m", "rotation_deg"])
            for i, err in enumerate(self.errors):
                if err is None:
                    w.writerow([i, 0, "", ""])
                else:
                    w.writerow([i, 1, f"{err[0]:.9g}", f"{err[1]:.9g}"])
            w.writerow([])
            w.writerow(["median_translation_m", f"{self.median_translation_m:.9g}"])
            w.writerow(["median_rotation_deg", f"{self.median_rotation_deg:.9g}"])
            w.writerow(["failure_count", self.failure_count])
            w.writerow(["map_size_bytes", self.map_size_bytes])
            for (d, a), acc in zip(self.thresholds, self.accuracies):
                w.writerow([f"accuracy@({d}m,{a}deg)", f"{acc:.9g}"])


def evaluate(results: list[LocalizationResult], truths: list[Pose],
             thresholds=DEFAULT_THRESHOLDS,
             map_size: int = 0) -> EvalReport:
    """Medians over successful queries; failures exceed every threshold."""
    if len(results) != len(truths):
        raise ValueError(f"{len(results)} results vs {len(truths)} truths")
    errors = []
    for res, truth in zip(results, truths):
        errors.append(pose_error(res.pose, truth) if res.success else None)
    ok = [e for e in errors if e is not None]
    med_t = float(np.median([e[0] for e in ok])) if ok else float("inf")
    med_r = float(np.median([e[1] for e in ok])) if ok else float("inf")
    accuracies = []
    for d, a in thresholds:
        hits = sum(1 for e in errors
                   if e is not None and e[0] <= d and e[1] <= a)
        accuracies.append(hits / len(errors) if errors else 0.0)
    return EvalReport(med_t, med_r, tuple(thresholds), accuracies,
                      sum(1 for e in errors if e is None), len(errors),
                      map_size, errors)


def evaluate_scene(scene: SceneRepresentation, params: DecoderParams,
                   dataset: ReferenceDataset,
                   opts: LocalizeOptions | None = None,
                   thresholds=DEFAULT_THRESHOLDS) -> EvalReport:
    """Localize every query view in the dataset and score the results."""
    results = [localize(q, scene, params, dataset, opts)
               for q in dataset.query_views]
    truths = dataset.evaluation_ground_truth().query_poses
    return evaluate(results, truths, thresholds, size_bytes(scene, 4))


def _lattice_shape(pixels: np.ndarray):
    """(rows, cols, row index, col index) when keypoints form a full grid."""
    us = np.unique(pixels[:, 0])
    vs = np.unique(pixels[:, 1])
    if len(us) * len(vs) != len(pixels):
        return None
    ui = np.searchsorted(us, pixels[:, 0])
    vi = np.searchsorted(vs, pixels[:, 1])
    if len(set(zip(vi.tolist(), ui.tolist()))) != len(pixels):
        return None
    return len(vs), len(us), vi, ui


def export_heatmap(view: ViewObservations, scene: SceneRepresentation,
                   params: DecoderParams, voxel: VoxelId, block: int,
                   code: int, csv_path, pgm_path=None) -> bool:
    """Write per-keypoint attention scores as CSV; also as an 8-bit PGM when
    the keypoints form a pixel lattice. Returns True when the PGM was written.
    """
    bank = scene.voxels[voxel].codes
    feats = encode_feature(None, params, dc.constant(view.descriptors))
    s, s_norm = attention_scores(params, feats, bank, block, code)
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["feature_index", "score", "normalized_score"])
        for i, (a, b) in enumerate(zip(s, s_norm)):
            w.writerow([i, f"{a:.17g}", f"{b:.17g}"])
    if pgm_path is None:
        return False
    grid = _lattice_shape(view.pixels)
    if grid is None:
        return False
    rows, cols, vi, ui = grid
    img = np.zeros((rows, cols), dtype=np.uint8)
    img[vi, ui] = np.round(s_norm * 255.0).astype(np.uint8)
    with open(pgm_path, "wb") as f:
        f.write(f"P5\n{cols} {rows}\n255\n".encode())
        f.write(img.tobytes())
    return True
