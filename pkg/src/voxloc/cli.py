"""Command-line front end.

Subcommands: gen, train, prune, finetune, adapt, localize, eval, inspect,
heatmap. Configuration is a flat key=value text file; every key is listed
in CONFIG_KEYS below (and in the README), unknown keys are errors.

Exit codes: 0 success, 1 usage error, 2 data/validation error,
3 numeric abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

import numpy as np

from . import (decoder, initialization, pipeline, scene as scene_mod,
               synthworld, training)
from .containers import FormatError
from .diffcore import NumericError
from .geometry import Point3D
from .scene import VoxelId


@dataclasses.dataclass
class SceneConfig:
    side_length: float = 4.0
    blocks: int = 6
    codes_per_block: int = 256
    code_dim: int = 32


@dataclasses.dataclass
class DecoderConfig:
    # structured_init seeds the decoder with aligned attention weights and
    # the code banks with observed descriptors/coordinates (see
    # initialization.py); disabling it falls back to random initialization,
    # which needs a far longer schedule to converge
    structured_init: bool = True
    desc_scale: float = 3.0
    coord_scale: float = 0.5
    attn_scale: float = 4.0
    encoder_hidden: int = 64
    block_hidden: int = 32
    head_hidden: int = 32


_SECTIONS = {
    "world": synthworld.WorldConfig,
    "train": training.TrainConfig,
    "scene": SceneConfig,
    "decoder": DecoderConfig,
    "localize": pipeline.LocalizeOptions,
}

CONFIG_KEYS = sorted(
    f"{section}.{f.name}"
    for section, cls in _SECTIONS.items()
    for f in dataclasses.fields(cls)
)


class ConfigError(ValueError):
    pass


def _coerce(raw: str, typ, key: str):
    if typ is bool or typ == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if typ is int or typ == "int":
        return int(raw)
    if typ is float or typ == "float":
        return float(raw)
    if typ is str or typ == "str":
        return raw
    # the only structured field is the extent triple
    if "tuple" in str(typ):
        parts = [float(x) for x in raw.split(",")]
        return tuple(parts)
    raise ConfigError(f"{key}: unsupported config field type {typ}")


def load_config(path: str | None) -> dict[str, object]:
    """Parse a flat key=value file into one config object per section."""
    overrides: dict[str, dict[str, object]] = {s: {} for s in _SECTIONS}
    if path is not None:
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value")
                key, _, raw = line.partition("=")
                key = key.strip()
                raw = raw.strip()
                if "." not in key:
                    raise ConfigError(f"{path}:{lineno}: key {key!r} must be "
                                      "section.field (see CONFIG_KEYS)")
                section, _, name = key.partition(".")
                cls = _SECTIONS.get(section)
                if cls is None:
                    raise ConfigError(f"{path}:{lineno}: unknown section "
                                      f"{section!r}")
                fields = {f.name: f for f in dataclasses.fields(cls)}
                if name not in fields:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                overrides[section][name] = _coerce(raw, fields[name].type, key)
    return {s: cls(**overrides[s]) for s, cls in _SECTIONS.items()}


def _build_scene(dataset, cfg):
    sc = cfg["scene"]
    tc = cfg["train"]
    points = [p for p in dataset.points.values()]
    rng = np.random.default_rng(np.random.SeedSequence((tc.seed, 300)))
    built = scene_mod.build_scene(points, sc.side_length,
                                  (sc.blocks, sc.codes_per_block, sc.code_dim),
                                  rng)
    scene_mod.assign_coverage(built, dataset, min_points=tc.min_points)
    scene_mod.drop_uncovered(built)
    return built


def _init_config(dc_):
    return initialization.InitConfig(desc_scale=dc_.desc_scale,
                                     coord_scale=dc_.coord_scale,
                                     attn_scale=dc_.attn_scale)


def _init_params(cfg):
    sc, dc_, tc = cfg["scene"], cfg["decoder"], cfg["train"]
    wc = cfg["world"]
    rng = np.random.default_rng(np.random.SeedSequence((tc.seed, 400)))
    if dc_.structured_init:
        return initialization.aligned_decoder_init(
            rng, d_raw=wc.descriptor_dim, d=sc.code_dim, num_blocks=sc.blocks,
            block_hidden=dc_.block_hidden, head_hidden=dc_.head_hidden,
            config=_init_config(dc_))
    return decoder.DecoderParams.init(
        rng, d_raw=wc.descriptor_dim, d=sc.code_dim, num_blocks=sc.blocks,
        encoder_hidden=dc_.encoder_hidden, block_hidden=dc_.block_hidden,
        head_hidden=dc_.head_hidden)


def _maybe_inject(built, ds, params, cfg):
    dc_, tc = cfg["decoder"], cfg["train"]
    if dc_.structured_init:
        rng = np.random.default_rng(np.random.SeedSequence((tc.seed, 500)))
        initialization.inject_codes(built, ds, params, rng, _init_config(dc_))


def cmd_gen(args):
    cfg = load_config(args.config)
    ds = synthworld.generate_dataset(cfg["world"])
    synthworld.save_dataset(ds, args.out)
    if args.manifest:
        synthworld.write_manifest(ds, args.manifest)
    valid = sum(1 for p in ds.points.values() if p.valid)
    print(f"wrote {args.out}: {len(ds.views)} reference views, "
          f"{len(ds.query_views)} query views, {valid} valid points")
    return 0


def cmd_train(args):
    cfg = load_config(args.config)
    ds = synthworld.load_dataset(args.dataset)
    built = _build_scene(ds, cfg)
    params = _init_params(cfg)
    _maybe_inject(built, ds, params, cfg)
    log = training.run_training(built, ds, params, cfg["train"])
    scene_mod.save_scene(built, args.out_scene)
    decoder.save_params(params, args.out_weights)
    if args.log:
        log.write_csv(args.log)
    last = log.records[-1]
    print(f"trained {len(built.voxels)} voxels for {len(log.records)} epochs; "
          f"final loss {last.total:.4f}, retained codes {last.retained_codes}")
    return 0


def cmd_prune(args):
    loaded = scene_mod.load_scene(args.scene)
    report = scene_mod.prune(loaded, args.threshold)
    scene_mod.save_scene(loaded, args.out_scene)
    if args.report:
        report.write_csv(args.report)
    print(f"pruned at threshold {args.threshold}: retained "
          f"{report.total_retained}/{report.total_codes} codes, "
          f"{report.bytes_before} -> {report.bytes_after} bytes")
    return 0


def cmd_finetune(args):
    cfg = load_config(args.config)
    ds = synthworld.load_dataset(args.dataset)
    loaded = scene_mod.load_scene(args.scene)
    params = decoder.load_params(args.weights)
    tc = dataclasses.replace(cfg["train"], epochs_stage1=0, prune_threshold=0.0)
    log = training.run_training(loaded, ds, params, tc)
    scene_mod.save_scene(loaded, args.out_scene)
    decoder.save_params(params, args.out_weights)
    if args.log:
        log.write_csv(args.log)
    print(f"fine-tuned for {tc.epochs_stage2} epochs; "
          f"final loss {log.records[-1].total:.4f}")
    return 0


def cmd_adapt(args):
    cfg = load_config(args.config)
    ds = synthworld.load_dataset(args.dataset)
    params = decoder.load_params(args.weights)
    built = _build_scene(ds, cfg)
    _maybe_inject(built, ds, params, cfg)
    log = training.adapt_scene(built, ds, params, cfg["train"])
    scene_mod.save_scene(built, args.out_scene)
    if args.log:
        log.write_csv(args.log)
    print(f"adapted {len(built.voxels)} voxels over {len(log.records)} epochs; "
          f"final loss {log.records[-1].total:.4f}")
    return 0


def cmd_localize(args):
    cfg = load_config(args.config)
    ds = synthworld.load_dataset(args.dataset)
    loaded = scene_mod.load_scene(args.scene)
    params = decoder.load_params(args.weights)
    if not 0 <= args.query < len(ds.query_views):
        raise ValueError(f"query index {args.query} out of range "
                         f"[0, {len(ds.query_views)})")
    res = pipeline.localize(ds.query_views[args.query], loaded, params, ds,
                            cfg["localize"])
    if not res.success:
        print(f"query {args.query}: localization failed "
              f"({res.num_confident_points} confident candidates)")
        return 0
    c = res.pose.center
    print(f"query {args.query}: center=({c[0]:.4f}, {c[1]:.4f}, {c[2]:.4f}) m, "
          f"{res.num_inliers}/{res.num_confident_points} inliers, "
          f"{res.num_activated_voxels} voxels, {res.wall_time_s * 1e3:.1f} ms")
    return 0


def cmd_eval(args):
    cfg = load_config(args.config)
    ds = synthworld.load_dataset(args.dataset)
    loaded = scene_mod.load_scene(args.scene)
    params = decoder.load_params(args.weights)
    report = pipeline.evaluate_scene(loaded, params, ds, cfg["localize"])
    if args.out:
        report.write_csv(args.out)
    print(report.summary())
    return 0


def cmd_inspect(args):
    loaded = scene_mod.load_scene(args.scene)
    t, n, d = loaded.dims
    print(f"scene: {len(loaded.voxels)} voxels, side length "
          f"{loaded.side_length} m, codes {t}x{n}x{d}")
    print(f"map size (float32): {scene_mod.size_bytes(loaded, 4)} bytes")
    for v in loaded.sorted_voxels():
        retained = sum(v.codes.retained_count(bt) for bt in range(t))
        print(f"  voxel ({v.id.ix},{v.id.iy},{v.id.iz}): "
              f"{len(v.members)} members, {len(v.covering_views)} covering "
              f"views, {retained}/{t * n} codes retained")
    return 0


def cmd_heatmap(args):
    ds = synthworld.load_dataset(args.dataset)
    loaded = scene_mod.load_scene(args.scene)
    params = decoder.load_params(args.weights)
    try:
        ix, iy, iz = (int(x) for x in args.voxel.split(","))
    except ValueError as err:
        raise ValueError(f"voxel must be ix,iy,iz, got {args.voxel!r}") from err
    vid = VoxelId(ix, iy, iz)
    if vid not in loaded.voxels:
        raise ValueError(f"voxel {args.voxel} not in scene")
    if not 0 <= args.view < len(ds.views):
        raise ValueError(f"view index {args.view} out of range")
    wrote_pgm = pipeline.export_heatmap(ds.views[args.view], loaded, params,
                                        vid, args.block, args.code,
                                        args.csv, args.pgm)
    msg = f"wrote {args.csv}"
    if args.pgm:
        msg += f" and {args.pgm}" if wrote_pgm else \
            " (keypoints are not a lattice; PGM skipped)"
    print(msg)
    return 0


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="voxloc", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *names):
        if "config" in names:
            sp.add_argument("--config", default=None,
                            help="flat key=value config file")
        if "dataset" in names:
            sp.add_argument("--dataset", required=True)
        if "scene" in names:
            sp.add_argument("--scene", required=True)
        if "weights" in names:
            sp.add_argument("--weights", required=True)

    sp = sub.add_parser("gen", help="generate a synthetic world/dataset")
    common(sp, "config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--manifest", default=None)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="two-stage training on a dataset")
    common(sp, "config", "dataset")
    sp.add_argument("--out-scene", required=True)
    sp.add_argument("--out-weights", required=True)
    sp.add_argument("--log", default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("prune", help="prune low-scale codes from a scene")
    common(sp, "scene")
    sp.add_argument("--threshold", type=float, required=True)
    sp.add_argument("--out-scene", required=True)
    sp.add_argument("--report", default=None, help="prune report CSV")
    sp.set_defaults(func=cmd_prune)

    sp = sub.add_parser("finetune", help="stage-2 fine-tuning only")
    common(sp, "config", "dataset", "scene", "weights")
    sp.add_argument("--out-scene", required=True)
    sp.add_argument("--out-weights", required=True)
    sp.add_argument("--log", default=None)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("adapt", help="codes-only adaptation to a new dataset")
    common(sp, "config", "dataset", "weights")
    sp.add_argument("--out-scene", required=True)
    sp.add_argument("--log", default=None)
    sp.set_defaults(func=cmd_adapt)

    sp = sub.add_parser("localize", help="localize one query view")
    common(sp, "config", "dataset", "scene", "weights")
    sp.add_argument("--query", type=int, required=True)
    sp.set_defaults(func=cmd_localize)

    sp = sub.add_parser("eval", help="localize all queries and report metrics")
    common(sp, "config", "dataset", "scene", "weights")
    sp.add_argument("--out", default=None, help="report CSV path")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("inspect", help="print scene stats and size")
    common(sp, "scene")
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("heatmap", help="export attention scores for one code")
    common(sp, "dataset", "scene", "weights")
    sp.add_argument("--view", type=int, required=True)
    sp.add_argument("--voxel", required=True, help="ix,iy,iz")
    sp.add_argument("--block", type=int, required=True)
    sp.add_argument("--code", type=int, required=True)
    sp.add_argument("--csv", required=True)
    sp.add_argument("--pgm", default=None)
    sp.set_defaults(func=cmd_heatmap)
    return p


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return 0 if err.code == 0 else 1
    try:
        return args.func(args)
    except NumericError as err:
        print(f"numeric abort: {err}", file=sys.stderr)
        return 3
    except (ConfigError, FormatError, ValueError, KeyError,
            FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
