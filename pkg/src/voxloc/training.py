"""Three-term loss, voxel-sampling schedule, two-stage training, adaptation.

Stage 1 jointly optimizes the scene-agnostic weights and all codes and
scaling factors with the L1 sparsity term active. Codes below the pruning
threshold are then zeroed, and stage 2 fine-tunes the survivors with the
scaling factors frozen and the sparsity term off. Scene adaptation reuses
the loop with every scene-agnostic parameter frozen.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .decoder import DecoderParams, decode, encode_feature
from .diffcore import DTensor, NumericError, Optimizer, Tape, halved_lr
from .scene import SceneRepresentation, Voxel, prune
from .synthworld import ReferenceDataset


@dataclass
class TrainConfig:
    # loss weights; the sparsity weight only applies in stage 1
    lambda_coord: float = 1.0
    lambda_conf: float = 1.0
    lambda_l1: float = 1.0
    # learning rates: scene-agnostic weights vs codes/scales.
    # desk-scale defaults; the city-scale schedule (0.002 / 0.0001,
    # 200 + 100 epochs, halving every 30) remains selectable via config
    lr_agnostic: float = 0.01
    lr_codes: float = 0.02
    epochs_stage1: int = 60
    epochs_stage2: int = 30
    # single-voxel batches give the shared decoder the most update steps
    # per epoch, which matters under the short desk schedule
    batch_voxels: int = 1
    # keypoints drawn per (voxel, view) sample; 0 decodes the full view.
    # Subsampling keeps epochs cheap so small scenes can afford the many
    # epochs the shared decoder needs to generalize across views.
    keypoints_per_sample: int = 256
    lr_halving_period: int = 15
    prune_threshold: float = 0.001
    min_points: int = 20
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if min(self.lambda_coord, self.lambda_conf, self.lambda_l1) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.batch_voxels < 1:
            raise ValueError("batch_voxels must be >= 1")


@dataclass
class Sample:
    """One (voxel, covering view) pair with its supervision arrays."""
    voxel: Voxel
    view_id: int
    descriptors: np.ndarray   # (M, D_raw)
    targets: np.ndarray       # (M, 3) triangulated coords; rows of y=0 unused
    in_voxel: np.ndarray      # (M,) float 0/1 indicator


def make_sample(voxel: Voxel, view_id: int, dataset: ReferenceDataset,
                max_keypoints: int = 0,
                rng: np.random.Generator | None = None) -> Sample:
    view = dataset.views[view_id]
    members = set(int(m) for m in voxel.members)
    m = view.num_keypoints
    targets = np.zeros((m, 3))
    y = np.zeros(m)
    for i, pid in enumerate(view.point_ids):
        pt = dataset.points.get(int(pid))
        if pt is not None and pt.valid and int(pid) in members:
            y[i] = 1.0
            targets[i] = pt.position
    desc = view.descriptors
    if 0 < max_keypoints < m:
        if rng is None:
            raise ValueError("keypoint subsampling needs an rng")
        keep = rng.choice(m, size=max_keypoints, replace=False)
        desc, targets, y = desc[keep], targets[keep], y[keep]
    return Sample(voxel, view_id, desc, targets, y)


def coordinate_loss(tape, local: DTensor, origin: np.ndarray,
                    targets: np.ndarray, in_voxel: np.ndarray) -> DTensor:
    """Mean Euclidean distance between predicted world coords and targets,
    over in-voxel keypoints only. Zero when the batch has none."""
    rows = np.flatnonzero(in_voxel > 0.5)
    if len(rows) == 0:
        return dc.constant(np.array(0.0))
    pred = dc.take_rows(tape, local, rows)
    world = dc.add(tape, pred, dc.constant(origin[None, :]))
    diff = dc.sub(tape, world, dc.constant(targets[rows]))
    return dc.mean_all(tape, dc.rows_l2norm(tape, diff))


def confidence_loss(tape, confidence: DTensor, in_voxel: np.ndarray) -> DTensor:
    """Mean binary cross entropy over all keypoints, in-voxel or not."""
    y = dc.constant(in_voxel[:, None])
    one = dc.constant(np.ones_like(in_voxel)[:, None])
    p = dc.clamp(tape, confidence, 1e-7, 1.0 - 1e-7)
    term_pos = dc.mul(tape, y, dc.log(tape, p))
    term_neg = dc.mul(tape, dc.sub(tape, one, y),
                      dc.log(tape, dc.sub(tape, one, p)))
    return dc.scale(tape, dc.mean_all(tape, dc.add(tape, term_pos, term_neg)), -1.0)


def sparsity_loss(tape, voxels: list[Voxel]) -> DTensor:
    """Sum of |w| over every block/code of the sampled voxels, averaged over
    the number of sampled voxels."""
    total = dc.constant(np.array(0.0))
    for v in voxels:
        for w in v.codes.scales:
            total = dc.add(tape, total,
                           dc.sum_all(tape, dc.abs_(tape, w)))
    return dc.scale(tape, total, 1.0 / max(len(voxels), 1))


def total_loss(tape, l_coord: DTensor, l_conf: DTensor, l_sparse: DTensor,
               config: TrainConfig, stage: int) -> DTensor:
    out = dc.add(tape, dc.scale(tape, l_coord, config.lambda_coord),
                 dc.scale(tape, l_conf, config.lambda_conf))
    if stage == 1 and config.lambda_l1 > 0:
        out = dc.add(tape, out, dc.scale(tape, l_sparse, config.lambda_l1))
    return out


def sample_epoch(scene: SceneRepresentation, dataset: ReferenceDataset,
                 batch_voxels: int, rng: np.random.Generator,
                 max_keypoints: int = 0) -> list[list[Sample]]:
    """One seeded pass over all voxels: a permutation chunked into batches of
    at most batch_voxels, each voxel paired with one uniformly chosen
    covering view."""
    voxels = scene.sorted_voxels()
    for v in voxels:
        if not v.covering_views:
            raise ValueError(f"voxel {v.id} has no covering views; "
                             "scene/dataset construction is inconsistent")
    order = rng.permutation(len(voxels))
    samples = []
    for i in order:
        v = voxels[i]
        view_id = v.covering_views[rng.integers(len(v.covering_views))]
        samples.append(make_sample(v, int(view_id), dataset,
                                   max_keypoints=max_keypoints, rng=rng))
    return [samples[i:i + batch_voxels]
            for i in range(0, len(samples), batch_voxels)]


@dataclass
class EpochRecord:
    epoch: int
    stage: int
    l_coord: float
    l_conf: float
    l_sparse: float
    total: float
    lr_agnostic: float
    lr_codes: float
    retained_codes: int


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)
    prune_report: object = None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "stage", "L_x", "L_c", "L_L1", "total",
                        "lr_agnostic", "lr_codes", "retained_codes"])
            for r in self.records:
                w.writerow([r.epoch, r.stage,
                            f"{r.l_coord:.9g}", f"{r.l_conf:.9g}",
                            f"{r.l_sparse:.9g}", f"{r.total:.9g}",
                            f"{r.lr_agnostic:.9g}", f"{r.lr_codes:.9g}",
                            r.retained_codes])


def _retained_codes(scene: SceneRepresentation) -> int:
    return sum(v.codes.retained_count(t)
               for v in scene.voxels.values()
               for t in range(scene.dims[0]))


def _batch_losses(tape, params: DecoderParams, batch: list[Sample],
                  config: TrainConfig, stage: int):
    coord_terms, conf_terms = [], []
    for sample in batch:
        feats = encode_feature(tape, params, dc.constant(sample.descriptors))
        result = decode(tape, params, feats, sample.voxel.codes,
                        sample.voxel.origin)
        coord_terms.append(coordinate_loss(tape, result.local,
                                           sample.voxel.origin,
                                           sample.targets, sample.in_voxel))
        conf_terms.append(confidence_loss(tape, result.confidence,
                                          sample.in_voxel))

    def average(terms):
        acc = terms[0]
        for t in terms[1:]:
            acc = dc.add(tape, acc, t)
        return dc.scale(tape, acc, 1.0 / len(terms))

    l_coord = average(coord_terms)
    l_conf = average(conf_terms)
    l_sparse = sparsity_loss(tape, [s.voxel for s in batch]) \
        if stage == 1 else dc.constant(np.array(0.0))
    return l_coord, l_conf, l_sparse, total_loss(tape, l_coord, l_conf,
                                                 l_sparse, config, stage)


def _run_epochs(scene, dataset, params, config, *, stage, epochs, epoch_offset,
                opt_agnostic, opt_codes, rng, log):
    code_params = scene.named_code_parameters()
    for local_epoch in range(epochs):
        epoch = epoch_offset + local_epoch
        lr_a = halved_lr(config.lr_agnostic, epoch, config.lr_halving_period)
        lr_c = halved_lr(config.lr_codes, epoch, config.lr_halving_period)
        if opt_agnostic is not None:
            opt_agnostic.lr = lr_a
        opt_codes.lr = lr_c

        sums = np.zeros(4)
        batches = sample_epoch(scene, dataset, config.batch_voxels, rng,
                               config.keypoints_per_sample)
        for batch_idx, batch in enumerate(batches):
            tape = Tape()
            try:
                l_coord, l_conf, l_sparse, loss = _batch_losses(
                    tape, params, batch, config, stage)
                tape.backward(loss)
            except NumericError as err:
                raise NumericError(
                    f"epoch {epoch}, batch {batch_idx}: {err}") from err
            if opt_agnostic is not None:
                opt_agnostic.step()
            active = [name for s in batch
                      for name in s.voxel.codes.named_parameters()
                      if name in code_params]
            opt_codes.step(active=active)
            sums += [l_coord.values, l_conf.values, l_sparse.values, loss.values]

        sums /= len(batches)
        log.records.append(EpochRecord(epoch, stage, *sums, lr_a, lr_c,
                                       _retained_codes(scene)))
    return epoch_offset + epochs


def run_training(scene: SceneRepresentation, dataset: ReferenceDataset,
                 params: DecoderParams, config: TrainConfig) -> TrainingLog:
    """Two-stage procedure: train with sparsity, prune, fine-tune.

    The learning-rate halving schedule runs on the global epoch counter
    across both stages.
    """
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 100)))
    log = TrainingLog()
    agnostic = params.named_parameters()
    codes = scene.named_code_parameters()
    opt_agnostic = Optimizer(agnostic, config.lr_agnostic,
                             method=config.optimizer)
    opt_codes = Optimizer(codes, config.lr_codes, method=config.optimizer)

    epoch = _run_epochs(scene, dataset, params, config, stage=1,
                        epochs=config.epochs_stage1, epoch_offset=0,
                        opt_agnostic=opt_agnostic, opt_codes=opt_codes,
                        rng=rng, log=log)

    report = prune(scene, config.prune_threshold)
    log.prune_report = report
    if report.total_retained == 0:
        raise ValueError("pruning removed every code; threshold "
                         f"{config.prune_threshold} is degenerate for this scene")
    for v in scene.voxels.values():
        bank = v.codes
        for t in range(scene.dims[0]):
            rows = np.flatnonzero(bank.pruned[t])
            if len(rows):
                opt_codes.reset_moment_rows(bank.codes[t].name, rows)
                opt_codes.reset_moment_rows(bank.scales[t].name, rows)
            opt_codes.freeze(bank.scales[t].name)  # stage 2 freezes scales

    _run_epochs(scene, dataset, params, config, stage=2,
                epochs=config.epochs_stage2, epoch_offset=epoch,
                opt_agnostic=opt_agnostic, opt_codes=opt_codes,
                rng=rng, log=log)
    return log


def adapt_scene(new_scene: SceneRepresentation, new_dataset: ReferenceDataset,
                params: DecoderParams, config: TrainConfig,
                epochs: int | None = None,
                train_scales: bool = True) -> TrainingLog:
    """Optimize only the new scene's codes, decoder weights frozen.

    Runs `epochs` (default epochs_stage1) stage-1-style epochs; pass
    lambda_l1=0 in the config for plain adaptation without sparsity pressure.
    """
    if new_scene.dims[2] != params.d:
        raise dc.DimensionError(
            f"scene code width {new_scene.dims} != decoder width {params.d}")
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 200)))
    log = TrainingLog()
    codes = new_scene.named_code_parameters()
    opt_codes = Optimizer(codes, config.lr_codes, method=config.optimizer)
    if not train_scales:
        for v in new_scene.voxels.values():
            for w in v.codes.scales:
                opt_codes.freeze(w.name)
    # decoder weights stay out of any optimizer; nothing can move them
    _run_epochs(new_scene, new_dataset, params, config, stage=1,
                epochs=config.epochs_stage1 if epochs is None else epochs,
                epoch_offset=0, opt_agnostic=None, opt_codes=opt_codes,
                rng=rng, log=log)
    return log
