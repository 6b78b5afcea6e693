"""Command-line entry point. Every subcommand reads the same flat config; flags override keys.

Exit codes: 0 success, 2 config error, 3 training divergence, 4 stage failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from ..errors import FormatError, InvalidArgumentError, NotFoundError, StageError, TrainingError

logger = logging.getLogger("semcom3d")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_STAGE = 0, 2, 3, 4
COMMANDS = ("gen-scene", "fit-nerf", "lift-mask", "train-codec", "train-gdce", "run-link", "sweep", "metrics")


def _add_config_flags(p: argparse.ArgumentParser):
    from .config import RunConfig

    p.add_argument("--config", help="flat YAML config file")
    for f in dataclasses.fields(RunConfig):
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, metavar="V",
                       help=f"config key {f.name}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="semcom3d", description="3D object semantic communication simulator")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "metrics":
            p.add_argument("--reference", required=True, help="reference PNG (or directory of PNGs)")
            p.add_argument("--test", required=True, help="test PNG (or directory with matching names)")
            continue
        _add_config_flags(p)
        if name == "sweep":
            p.add_argument("--axis", required=True, help="snr, estimator or keep_rate")
            p.add_argument("--values", default=None, help="comma separated axis values")
            p.add_argument("--no-plot", action="store_true")
        if name == "train-gdce":
            p.add_argument("--methods", default="ls,mmse,omp,amp,cgan,gdce")
            p.add_argument("--trials", type=int, default=200)
    return ap


def _load(args):
    from .config import FIELD_TYPES, load_config

    overrides = {k: getattr(args, k) for k in FIELD_TYPES if getattr(args, k, None) is not None}
    cfg = load_config(args.config, overrides).validate()
    cfg.out.mkdir(parents=True, exist_ok=True)
    return cfg


def cmd_gen_scene(cfg):
    from ..scene_io import build_synthetic_scene, render_dataset, save_dataset, save_scene

    scene = build_synthetic_scene(cfg.scene_seed, cfg.n_objects)
    ds = render_dataset(scene)
    path = cfg.out / "dataset"
    save_dataset(ds, path)
    save_scene(scene, path / "scene.json")
    print(f"wrote {len(ds)} views to {path}")


def cmd_fit_nerf(cfg):
    from ..metrics import psnr
    from ..radiance_field import RenderConfig, render_view, save_field
    from .link import fit_transmitter_field, load_or_build_scene, stage

    with stage("scene", cfg.config_hash()):
        ds, _ = load_or_build_scene(cfg)
    with stage("fit-nerf", cfg.config_hash()):
        field = fit_transmitter_field(cfg.replace(nerf_checkpoint=""), ds)
    path = cfg.out / "nerf.pt"
    save_field(field, path)
    ev = RenderConfig.for_dataset(ds, samples=cfg.nerf_samples)
    scores = [psnr(ds.images[i], render_view(field, ds.cameras[i], ev)) for i in ds.holdout]
    print(f"wrote {path}; held-out PSNR {np.mean(scores):.2f} dB")


def cmd_lift_mask(cfg):
    from ..object_lifter import extract_object_views, mask_iou, save_grid
    from ..radiance_field import RenderConfig
    from .link import fit_transmitter_field, lift_object, load_or_build_scene, stage

    h = cfg.config_hash()
    with stage("scene", h):
        ds, _ = load_or_build_scene(cfg)
    with stage("fit-nerf", h):
        field = fit_transmitter_field(cfg, ds)
    with stage("lift-mask", h):
        grid, oid = lift_object(cfg.replace(mask_grid=""), ds, field)
    path = cfg.out / "mask_grid.npz"
    save_grid(grid, path)
    print(f"wrote {path}")
    if oid in ds.masks:
        _, masks = extract_object_views(ds, field, grid, cfg.mask_threshold,
                                        RenderConfig.for_dataset(ds, samples=cfg.nerf_samples))
        ious = [mask_iou(masks[i], ds.masks[oid][i]) for i in range(len(ds))]
        print(f"object {oid}: per-view IoU min {min(ious):.3f} mean {np.mean(ious):.3f}")


def cmd_train_codec(cfg):
    from ..codec import run_codec, save_codec, toy_object_views
    from ..metrics import psnr, ssim
    from .link import build_codec, stage

    with stage("train-codec", cfg.config_hash()):
        codec = build_codec(cfg.replace(codec_checkpoint=""), (64, 64))
    path = cfg.out / "codec.pt"
    save_codec(codec, path)
    val = toy_object_views(32, seed=cfg.scene_seed + 2)
    for mode in ("teacher", "student"):
        rec = run_codec(codec, val, mode)
        print(f"{mode}: PSNR {np.mean([psnr(a, b) for a, b in zip(val, rec)]):.2f} dB "
              f"SSIM {np.mean([ssim(a, b) for a, b in zip(val, rec)]):.3f} (noiseless)")
    print(f"wrote {path}")


def cmd_train_gdce(cfg, methods, trials):
    from ..csi import ClassicalPrior, benchmark, make_pilots, save_gdce, write_benchmark_csv
    from .link import build_estimator, stage

    h = cfg.config_hash()
    pilots = make_pilots(tuple(cfg.channel_grid), cfg.pilot_spacing, seed=0)
    with stage("train-gdce", h):
        _, gdce, pilots = build_estimator(cfg.replace(estimator="gdce", gdce_checkpoint=""), pilots)
    path = cfg.out / "gdce.pt"
    save_gdce(gdce, path)
    prior = ClassicalPrior.fit(pilots.shape, model=cfg.channel_model, k_factor=cfg.k_factor)
    with stage("benchmark", h):
        rows = benchmark(methods, cfg.snr_db, pilots, trials, seed=cfg.scene_seed + 2, prior=prior, gdce=gdce,
                         model=cfg.channel_model, k_factor=cfg.k_factor)
    bench = cfg.out / "csi_benchmark.csv"
    write_benchmark_csv(rows, bench)
    for r in rows:
        print(f"{r['method']:>5} {r['snr_db']:5.1f} dB  NMSE {r['nmse_db']:7.2f} dB")
    print(f"wrote {path} and {bench}")


def cmd_run_link(cfg):
    from .link import run_link

    report = run_link(cfg)
    path = cfg.out / "run.csv"
    report.write_csv(path)
    print(f"wrote {len(report.rows)} rows to {path} (config {report.config_hash}, "
          f"{report.payload_bits} payload bits per view)")


def cmd_sweep(cfg, axis, values, plot):
    from .sweep import sweep

    vals = None if values is None else [v for v in values.split(",") if v.strip()]
    if vals is not None and not vals:
        raise InvalidArgumentError("empty --values list")
    rows, path, plots = sweep(cfg, axis, vals, plot=plot)
    print(f"wrote {len(rows)} rows to {path}" + "".join(f"\nplot {p}" for p in plots))


def _read_images(path: Path):
    from PIL import Image

    files = sorted(path.glob("*.png")) if path.is_dir() else [path]
    if not files:
        raise InvalidArgumentError(f"no PNG files in {path}")
    out = {}
    for f in files:
        try:
            out[f.name] = np.asarray(Image.open(f).convert("RGB"), dtype=np.float64) / 255.0
        except OSError as exc:
            raise FormatError(f"unreadable image ({exc})", f) from exc
    return out


def cmd_metrics(reference, test):
    from ..metrics import bleu, caption_stub, cosine_sim, embed_stub, format_value, psnr, ssim

    ref, tst = _read_images(Path(reference)), _read_images(Path(test))
    pairs = list(zip(ref.values(), tst.values())) if len(ref) == len(tst) == 1 else [
        (ref[k], tst[k]) for k in ref if k in tst]
    if not pairs:
        raise InvalidArgumentError("no matching image names between reference and test")
    p = np.mean([psnr(a, b) for a, b in pairs])
    s = np.mean([ssim(a, b) for a, b in pairs])
    caps = [(caption_stub(a), caption_stub(b)) for a, b in pairs]
    bl = np.mean([bleu(a, b) for a, b in caps])
    cs = np.mean([cosine_sim(embed_stub(a), embed_stub(b)) for a, b in caps])
    print("psnr_db,ssim,bleu,cosine")
    print(",".join(format_value(v) for v in (p, s, bl, cs)))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "metrics":
            cmd_metrics(args.reference, args.test)
            return EXIT_OK
        cfg = _load(args)
        if args.command == "gen-scene":
            cmd_gen_scene(cfg)
        elif args.command == "fit-nerf":
            cmd_fit_nerf(cfg)
        elif args.command == "lift-mask":
            cmd_lift_mask(cfg)
        elif args.command == "train-codec":
            cmd_train_codec(cfg)
        elif args.command == "train-gdce":
            cmd_train_gdce(cfg, [m for m in args.methods.split(",") if m], args.trials)
        elif args.command == "run-link":
            cmd_run_link(cfg)
        elif args.command == "sweep":
            cmd_sweep(cfg, args.axis, args.values, not args.no_plot)
    except (InvalidArgumentError, FormatError, NotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED if isinstance(exc.cause, TrainingError) else EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
