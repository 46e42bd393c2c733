"""Sparse voxel factorization of a scene and per-voxel code banks.

A scene is a map from lattice cell to voxel record: the cell's member point
ids, the origin (mean of member positions, the local regression frame), the
learnable code bank with per-code scaling factors, and the reference views
covering the cell. Codes are float64 in memory; the persisted format
downcasts to little-endian float32, which is the "map size" that the byte
accounting reports.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .containers import FormatError, Reader, Writer
from .diffcore import DTensor

SCENE_MAGIC = b"NMAP"
SCENE_FORMAT_VERSION = 1

# fixed per-voxel record header: id (3 x i32) + origin (3 x f32) + two u32 counts
VOXEL_HEADER_BYTES = 32
# file header: magic + version + side length + (T, N, D) + voxel count
FILE_HEADER_BYTES = 28


class VoxelId(NamedTuple):
    ix: int
    iy: int
    iz: int


class CodeBank:
    """T blocks x N codes x D learnable reals, plus per-code scaling factors.

    Pruned codes have scale exactly 0.0, are excluded from attention, and
    never receive gradient (their rows are never gathered into the graph).
    """

    def __init__(self, codes: list[DTensor], scales: list[DTensor],
                 pruned: np.ndarray):
        self.codes = codes      # T tensors of shape (N, D)
        self.scales = scales    # T tensors of shape (N, 1)
        self.pruned = pruned    # bool (T, N)

    @classmethod
    def init(cls, t: int, n: int, d: int, rng: np.random.Generator,
             prefix: str) -> "CodeBank":
        if t < 1 or n < 1 or d < 2:
            raise ValueError(f"bad code bank dims T={t}, N={n}, D={d}")
        codes = [DTensor(rng.normal(0.0, 0.02, size=(n, d)),
                         requires_grad=True, name=f"{prefix}.codes.{i}")
                 for i in range(t)]
        scales = [DTensor(np.ones((n, 1)), requires_grad=True,
                          name=f"{prefix}.scales.{i}")
                  for i in range(t)]
        return cls(codes, scales, np.zeros((t, n), dtype=bool))

    @property
    def dims(self) -> tuple[int, int, int]:
        return len(self.codes), self.codes[0].shape[0], self.codes[0].shape[1]

    def active_rows(self, t: int) -> np.ndarray:
        """Indices of codes that participate in attention for block t."""
        w = self.scales[t].values[:, 0]
        return np.flatnonzero(~self.pruned[t] & (w != 0.0))

    def retained_count(self, t: int) -> int:
        return int((~self.pruned[t]).sum())

    def named_parameters(self) -> dict[str, DTensor]:
        out = {}
        for tens in self.codes + self.scales:
            out[tens.name] = tens
        return out


@dataclass
class Voxel:
    id: VoxelId
    origin: np.ndarray                 # (3,) mean of member positions
    members: np.ndarray                # sorted point ids
    codes: CodeBank
    covering_views: list[int] = field(default_factory=list)


class SceneRepresentation:
    def __init__(self, side_length: float, dims: tuple[int, int, int],
                 voxels: dict[VoxelId, Voxel],
                 format_version: int = SCENE_FORMAT_VERSION):
        self.side_length = side_length
        self.dims = dims
        self.voxels = dict(sorted(voxels.items()))
        self.format_version = format_version
        for v in self.voxels.values():
            if v.codes.dims != dims:
                raise ValueError(f"voxel {v.id} dims {v.codes.dims} != {dims}")
            if len(v.members) == 0:
                raise ValueError(f"voxel {v.id} has no members")

    def sorted_voxels(self) -> list[Voxel]:
        return [self.voxels[k] for k in sorted(self.voxels)]

    def named_code_parameters(self) -> dict[str, DTensor]:
        out = {}
        for v in self.sorted_voxels():
            out.update(v.codes.named_parameters())
        return out


def voxelize(points, side_length: float) -> dict[VoxelId, set]:
    """Partition valid points into half-open lattice cells of the given side.

    Cell index per axis is floor(coordinate / side_length); a point exactly
    on a boundary belongs to the upper cell. Invalid points are skipped,
    empty cells absent.
    """
    if side_length <= 0:
        raise ValueError(f"side length must be positive, got {side_length}")
    cells: dict[VoxelId, set] = {}
    for p in points:
        if not p.valid:
            continue
        vid = VoxelId(*(int(math.floor(c / side_length)) for c in p.position))
        cells.setdefault(vid, set()).add(p.id)
    return cells


def build_scene(points, side_length: float, dims: tuple[int, int, int],
                rng: np.random.Generator) -> SceneRepresentation:
    """Voxelize triangulated points and attach freshly initialized code banks."""
    t, n, d = dims
    positions = {p.id: p.position for p in points if p.valid}
    cells = voxelize(points, side_length)
    voxels = {}
    for vid in sorted(cells):
        members = np.array(sorted(cells[vid]), dtype=np.int64)
        origin = np.mean([positions[m] for m in members], axis=0)
        prefix = f"voxel({vid.ix},{vid.iy},{vid.iz})"
        voxels[vid] = Voxel(vid, origin, members,
                            CodeBank.init(t, n, d, rng, prefix))
    return SceneRepresentation(side_length, dims, voxels)


def compute_origins(scene: SceneRepresentation,
                    positions: dict[int, np.ndarray]) -> None:
    """Reset each voxel origin to the arithmetic mean of member positions."""
    for v in scene.voxels.values():
        if len(v.members) == 0:
            raise ValueError(f"voxel {v.id} has no members")
        v.origin = np.mean([positions[m] for m in v.members], axis=0)


def assign_coverage(scene: SceneRepresentation, dataset,
                    min_points: int = 20) -> None:
    """A view covers a voxel iff it observes >= min_points valid members."""
    member_sets = {vid: set(int(m) for m in v.members)
                   for vid, v in scene.voxels.items()}
    for v in scene.voxels.values():
        v.covering_views = []
    for view_id, view in enumerate(dataset.views):
        observed = set()
        for pid in view.point_ids:
            pid = int(pid)
            pt = dataset.points.get(pid)
            if pt is not None and pt.valid:
                observed.add(pid)
        for vid, members in member_sets.items():
            if len(observed & members) >= min_points:
                scene.voxels[vid].covering_views.append(view_id)


def drop_uncovered(scene: SceneRepresentation) -> list[VoxelId]:
    """Remove voxels without covering views (stray triangulation outliers
    usually; they can be neither trained nor activated). Returns the ids."""
    dropped = [vid for vid, v in scene.voxels.items() if not v.covering_views]
    for vid in dropped:
        del scene.voxels[vid]
    if not scene.voxels:
        raise ValueError("every voxel lost coverage; the dataset is too sparse")
    return dropped


@dataclass
class PruneRow:
    voxel_id: VoxelId
    block: int
    retained: int
    total: int


@dataclass
class PruneReport:
    threshold: float
    rows: list[PruneRow]
    bytes_before: int
    bytes_after: int

    @property
    def total_retained(self) -> int:
        return sum(r.retained for r in self.rows)

    @property
    def total_codes(self) -> int:
        return sum(r.total for r in self.rows)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["voxel_id", "block", "retained", "total"])
            for r in self.rows:
                w.writerow([f"({r.voxel_id.ix},{r.voxel_id.iy},{r.voxel_id.iz})",
                            r.block, r.retained, r.total])


def prune(scene: SceneRepresentation, threshold: float,
          scalar_width: int = 4) -> PruneReport:
    """Zero out scaling factors with |w| < threshold and mask those codes.

    Pruned codes are excluded from all future attention and gradients.
    Destructive; save the scene first if the unpruned state matters.
    """
    if threshold < 0:
        raise ValueError(f"prune threshold must be >= 0, got {threshold}")
    before = size_bytes(scene, scalar_width)
    rows = []
    for v in scene.sorted_voxels():
        bank = v.codes
        t_blocks, n, _ = bank.dims
        for t in range(t_blocks):
            w = bank.scales[t].values[:, 0]
            new_pruned = bank.pruned[t] | (np.abs(w) < threshold)
            bank.scales[t].values[new_pruned, 0] = 0.0
            bank.pruned[t] = new_pruned
            rows.append(PruneRow(v.id, t, int((~new_pruned).sum()), n))
    after = size_bytes(scene, scalar_width)
    return PruneReport(threshold, rows, before, after)


def size_bytes(scene: SceneRepresentation, scalar_width: int) -> int:
    """Map payload size: retained codes plus a fixed header per voxel.

    Decoder weights are scene-agnostic and counted separately.
    """
    _, _, d = scene.dims
    total = 0
    for v in scene.voxels.values():
        total += VOXEL_HEADER_BYTES
        for t in range(scene.dims[0]):
            total += v.codes.retained_count(t) * d * scalar_width
    return total


def file_overhead_bytes(scene: SceneRepresentation) -> int:
    """Bytes in the scene file beyond size_bytes(scene, 4).

    File header plus, per voxel, the member/view id lists and the per-block
    scale (f32) and pruned-mask (u8) tables.
    """
    t, n, _ = scene.dims
    total = FILE_HEADER_BYTES
    for v in scene.voxels.values():
        total += 4 * len(v.members) + 4 * len(v.covering_views) + t * 5 * n
    return total


def scene_to_bytes(scene: SceneRepresentation) -> bytes:
    w = Writer()
    w.magic(SCENE_MAGIC)
    w.u32(scene.format_version)
    w.f32(scene.side_length)
    t, n, d = scene.dims
    w.u32(t)
    w.u32(n)
    w.u32(d)
    w.u32(len(scene.voxels))
    for v in scene.sorted_voxels():
        w.i32(v.id.ix)
        w.i32(v.id.iy)
        w.i32(v.id.iz)
        w.f32_array(v.origin)
        w.u32(len(v.members))
        w.u32(len(v.covering_views))
        w.u32_array(v.members)
        w.u32_array(sorted(v.covering_views))
        bank = v.codes
        for bt in range(t):
            w.f32_array(bank.scales[bt].values[:, 0])
            w.u8_array(bank.pruned[bt].astype("u1"))
            keep = np.flatnonzero(~bank.pruned[bt])
            w.f32_array(bank.codes[bt].values[keep])
    return w.getvalue()


def scene_from_bytes(data: bytes) -> SceneRepresentation:
    r = Reader(data)
    r.expect_magic(SCENE_MAGIC)
    version = r.u32("format version")
    if version != SCENE_FORMAT_VERSION:
        raise FormatError(4, f"unsupported scene format version {version}")
    side = r.f32("side length")
    t = r.u32("T")
    n = r.u32("N")
    d = r.u32("D")
    count = r.u32("voxel count")
    voxels = {}
    for _ in range(count):
        vid = VoxelId(r.i32("ix"), r.i32("iy"), r.i32("iz"))
        origin = r.f32_array(3, "origin")
        n_members = r.u32("member count")
        n_views = r.u32("view count")
        members = r.u32_array(n_members, "members")
        views = [int(x) for x in r.u32_array(n_views, "covering views")]
        prefix = f"voxel({vid.ix},{vid.iy},{vid.iz})"
        codes, scales = [], []
        pruned = np.zeros((t, n), dtype=bool)
        for bt in range(t):
            wvals = r.f32_array(n, f"scales block {bt}")
            mask = r.u8_array(n, f"pruned mask block {bt}").astype(bool)
            keep = np.flatnonzero(~mask)
            vals = np.zeros((n, d))
            if len(keep):
                vals[keep] = r.f32_array(len(keep) * d,
                                         f"codes block {bt}").reshape(len(keep), d)
            pruned[bt] = mask
            codes.append(DTensor(vals, requires_grad=True,
                                 name=f"{prefix}.codes.{bt}"))
            scales.append(DTensor(wvals[:, None], requires_grad=True,
                                  name=f"{prefix}.scales.{bt}"))
        voxels[vid] = Voxel(vid, origin, members,
                            CodeBank(codes, scales, pruned), views)
    r.expect_end()
    return SceneRepresentation(side, (t, n, d), voxels, version)


def save_scene(scene: SceneRepresentation, path) -> None:
    with open(path, "wb") as f:
        f.write(scene_to_bytes(scene))


def load_scene(path) -> SceneRepresentation:
    with open(path, "rb") as f:
        return scene_from_bytes(f.read())


def scenes_equal(a: SceneRepresentation, b: SceneRepresentation) -> bool:
    """Deep equality of every persisted field.

    Reals are compared after the float32 quantization the file format
    applies, so a scene compares equal to its own save/load round trip.
    """
    def f32(x):
        return np.asarray(x, dtype="<f4")

    if (f32(a.side_length) != f32(b.side_length) or a.dims != b.dims
            or a.format_version != b.format_version
            or sorted(a.voxels) != sorted(b.voxels)):
        return False
    for vid, va in a.voxels.items():
        vb = b.voxels[vid]
        if (not np.array_equal(f32(va.origin), f32(vb.origin))
                or not np.array_equal(va.members, vb.members)
                or sorted(va.covering_views) != sorted(vb.covering_views)
                or not np.array_equal(va.codes.pruned, vb.codes.pruned)):
            return False
        for bt, (ca, cb) in enumerate(zip(va.codes.codes, vb.codes.codes)):
            keep = np.flatnonzero(~va.codes.pruned[bt])
            if not np.array_equal(f32(ca.values[keep]), f32(cb.values[keep])):
                return False
        for sa, sb in zip(va.codes.scales, vb.codes.scales):
            if not np.array_equal(f32(sa.values), f32(sb.values)):
                return False
    return True

