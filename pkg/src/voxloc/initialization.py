"""Structured initialization: aligned decoder weights plus code banks seeded
from reference observations.

Each code bank starts life carrying the scene's own measurements instead of
noise: every code row holds one member point's encoded mean descriptor (in a
dedicated descriptor subspace) concatenated with the point's local
coordinates (in a small coordinate payload). The attention projections start
as scaled identities over the descriptor subspace, so a query keypoint
immediately attends to the codes injected from the same physical point and
the attended value already contains the right coordinates. Training then
only has to sharpen the match and teach the output head to read the payload,
which fits in a short fixed epoch budget; random code initialization does
not, because each bank receives just one gradient update per epoch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import DecoderParams
from .scene import SceneRepresentation
from .synthworld import ReferenceDataset

# trailing code/feature dimensions reserved for the coordinate payload
COORD_DIMS = 3


@dataclass
class InitConfig:
    """Scales for the aligned initialization.

    desc_scale multiplies the orthonormal descriptor projection (larger means
    sharper attention between matching descriptors), coord_scale multiplies
    the local coordinates stored in the payload dims, and attn_scale is the
    diagonal magnitude of the initial query/key maps over the descriptor
    subspace.
    """
    desc_scale: float = 3.0
    coord_scale: float = 0.5
    attn_scale: float = 4.0


def aligned_decoder_init(rng: np.random.Generator, d_raw: int = 64,
                         d: int = 32, num_blocks: int = 6,
                         block_hidden: int = 32, head_hidden: int = 32,
                         config: InitConfig | None = None) -> DecoderParams:
    """Decoder weights set up for descriptor-matching attention.

    The encoder is a single linear layer whose first d - COORD_DIMS output
    columns form a scaled orthonormal projection of the raw descriptor space
    (its payload columns start at zero); every block's query/key maps are
    scaled identities over that descriptor subspace and the value map is the
    identity, so attended values pass injected code rows through unchanged.
    Block MLPs, layer norms, and the output head keep their standard random
    initialization.
    """
    cfg = config or InitConfig()
    if not 0 < COORD_DIMS < d:
        raise ValueError(f"feature width {d} leaves no descriptor subspace")
    params = DecoderParams.init(rng, d_raw=d_raw, d=d, num_blocks=num_blocks,
                                encoder_hidden=0, block_hidden=block_hidden,
                                head_hidden=head_hidden)
    dp = d - COORD_DIMS
    basis, _ = np.linalg.qr(rng.normal(size=(d_raw, dp)))
    params.encoder.weights[0].values[:, :dp] = basis * cfg.desc_scale
    params.encoder.weights[0].values[:, dp:] = 0.0
    diag = np.zeros(d)
    diag[:dp] = cfg.attn_scale
    for blk in params.blocks:
        blk.wq.values[:] = np.diag(diag)
        blk.wk.values[:] = np.diag(diag)
        blk.wv.values[:] = np.eye(d)
    return params


def mean_observed_descriptors(dataset: ReferenceDataset) -> dict[int, np.ndarray]:
    """Unit-norm mean of each point's descriptor over the reference views."""
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for view in dataset.views:
        for pid, desc in zip(view.point_ids, view.descriptors):
            pid = int(pid)
            if pid in sums:
                sums[pid] += desc
                counts[pid] += 1
            else:
                sums[pid] = desc.astype(float).copy()
                counts[pid] = 1
    out = {}
    for pid, total in sums.items():
        mean = total / counts[pid]
        norm = np.linalg.norm(mean)
        if norm > 0:
            out[pid] = mean / norm
    return out


def inject_codes(scene: SceneRepresentation, dataset: ReferenceDataset,
                 params: DecoderParams, rng: np.random.Generator,
                 config: InitConfig | None = None) -> None:
    """Seed every code bank with the voxel's own observed points.

    Each member point contributes rows spread cyclically over the T x N code
    slots (a permutation fixes which points absorb the remainder), so every
    point appears in every block when N is at least the member count. A row
    is the point's mean observed descriptor pushed through the encoder's
    descriptor columns, concatenated with its scaled local coordinates.
    Scales are left at their build-time value of one.
    """
    cfg = config or InitConfig()
    mean_desc = mean_observed_descriptors(dataset)
    num_blocks, codes_per_block, d = scene.dims
    dp = d - COORD_DIMS
    desc_cols = params.encoder.weights[0].values[:, :dp]
    for voxel in scene.sorted_voxels():
        members = [int(m) for m in voxel.members
                   if int(m) in mean_desc and dataset.points[int(m)].valid]
        if not members:
            raise ValueError(f"voxel {voxel.id} has no observed member points")
        order = rng.permutation(len(members))
        slots = [members[order[i % len(members)]]
                 for i in range(num_blocks * codes_per_block)]
        for t, code in enumerate(voxel.codes.codes):
            pids = slots[t * codes_per_block:(t + 1) * codes_per_block]
            code.values[:, :dp] = np.array(
                [mean_desc[p] for p in pids]) @ desc_cols
            code.values[:, dp:] = np.array(
                [dataset.points[p].position - voxel.origin
                 for p in pids]) * cfg.coord_scale
