"""Subcommand front end: bank, convert, eval, finetune, render-ref.

Configuration lives in a TOML file with CLI `--set section.key=value`
overrides; `--print-config` emits the fully resolved configuration for
provenance.  All artifacts land under the output directory together with a
manifest.  Every subcommand is a pure function of (config, input files):
no clocks, no randomness beyond the seeded optimizer.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import bank as bank_mod
from . import construct, finetune, render, sparsify, volume, wavelet
from .errors import ConfigError, NumericalError, WavesplatError


@dataclass
class PipelineConfig:
    volume_raw: str = ""
    volume_meta: str = ""
    tf_path: str = ""
    tf_count: int = 5
    levels: int = 3
    filter: str = "bior4.4"
    boundary: str = "symmetric"
    tau: float = 0.1
    ridge_lambda: float = 1e-6
    k_total: int = 2000
    energy_exp: float = 0.7
    count_exp: float = 0.3
    mad_multiplier: float = 3.0
    reference_channel: int = 3
    floor: int = 10
    gain_mode: str = "fitted"
    sign_mode: str = "magnitude"
    rig_count: int = 64
    rig_radius: float = 3.0
    rig_resolution: int = 256
    dvr_step: float = 0.0  # 0 -> half the smallest voxel
    finetune_iters: int = 300
    finetune_seed: int = 0
    rate_scale: float = 1.0
    lambda_ssim: float = 0.2
    out_dir: str = "out"


_SECTION_MAP = {
    ("volume", "raw"): "volume_raw",
    ("volume", "meta"): "volume_meta",
    ("tf", "path"): "tf_path",
    ("tf", "count"): "tf_count",
    ("wavelet", "levels"): "levels",
    ("wavelet", "filter"): "filter",
    ("wavelet", "boundary"): "boundary",
    ("bank", "tau"): "tau",
    ("bank", "ridge_lambda"): "ridge_lambda",
    ("sparsify", "k_total"): "k_total",
    ("sparsify", "energy_exp"): "energy_exp",
    ("sparsify", "count_exp"): "count_exp",
    ("sparsify", "mad_multiplier"): "mad_multiplier",
    ("sparsify", "reference_channel"): "reference_channel",
    ("sparsify", "floor"): "floor",
    ("construct", "gain_mode"): "gain_mode",
    ("construct", "sign_mode"): "sign_mode",
    ("rig", "count"): "rig_count",
    ("rig", "radius"): "rig_radius",
    ("rig", "resolution"): "rig_resolution",
    ("rig", "step"): "dvr_step",
    ("finetune", "iters"): "finetune_iters",
    ("finetune", "seed"): "finetune_seed",
    ("finetune", "rate_scale"): "rate_scale",
    ("finetune", "lambda_ssim"): "lambda_ssim",
    ("output", "dir"): "out_dir",
}

_FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def load_config(path: str | None, overrides: list[str]) -> PipelineConfig:
    cfg = PipelineConfig()
    if path:
        try:
            with open(path, "rb") as f:
                doc = tomllib.load(f)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"invalid TOML in {path}: {e}") from e
        for section, table in doc.items():
            if not isinstance(table, dict):
                raise ConfigError(f"top-level config key {section!r} must be a table")
            for key, value in table.items():
                field = _SECTION_MAP.get((section, key))
                if field is None:
                    raise ConfigError(f"unknown config field [{section}] {key}")
                setattr(cfg, field, value)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        parts = tuple(dotted.strip().split("."))
        if len(parts) != 2 or parts not in _SECTION_MAP:
            raise ConfigError(f"unknown config field {dotted!r}")
        field = _SECTION_MAP[parts]
        kind = _FIELD_TYPES[field]
        try:
            if kind == "int":
                parsed = int(value)
            elif kind == "float":
                parsed = float(value)
            else:
                parsed = value
        except ValueError as e:
            raise ConfigError(f"cannot parse {dotted}={value!r}: {e}") from e
        setattr(cfg, field, parsed)
    _validate_types(cfg)
    return cfg


def _validate_types(cfg: PipelineConfig) -> None:
    for f in fields(PipelineConfig):
        v = getattr(cfg, f.name)
        if f.type == "int" and not isinstance(v, int):
            raise ConfigError(f"config field {f.name} must be an integer, got {v!r}")
        if f.type == "float":
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"config field {f.name} must be a number, got {v!r}")
            setattr(cfg, f.name, float(v))
        if f.type == "str" and not isinstance(v, str):
            raise ConfigError(f"config field {f.name} must be a string, got {v!r}")


def _require(cfg: PipelineConfig, *names: str) -> None:
    for name in names:
        value = getattr(cfg, name)
        if not value:
            raise ConfigError(f"config field {name} is required for this command")
        if not Path(value).exists():
            raise ConfigError(f"config field {name}: file {value} does not exist")


def _load_scalar_volume(cfg: PipelineConfig) -> volume.ScalarVolume:
    _require(cfg, "volume_raw", "volume_meta")
    meta = volume.load_meta(cfg.volume_meta)
    return volume.load_raw(cfg.volume_raw, meta)


def _dvr_step(cfg: PipelineConfig, meta: volume.VolumeMeta) -> float:
    if cfg.dvr_step > 0:
        return cfg.dvr_step
    return 0.5 * float(volume.world_scale(meta).min())


def _rig(cfg: PipelineConfig) -> list[render.Camera]:
    res = (cfg.rig_resolution, cfg.rig_resolution)
    return render.camera_rig(cfg.rig_count, cfg.rig_radius, resolution=res)


def _mode_tf(cfg: PipelineConfig, tf_index: int) -> volume.TransferFunction:
    _require(cfg, "tf_path")
    tf = volume.load_tf(cfg.tf_path)
    if tf_index < 0:
        return tf
    tfs = volume.make_interval_tfs(tf, cfg.tf_count)
    if tf_index >= len(tfs):
        raise ConfigError(f"tf index {tf_index} out of range for tf_count {cfg.tf_count}")
    return tfs[tf_index]


def _out_dir(cfg: PipelineConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _update_manifest(out: Path, command: str, artifacts: dict) -> None:
    path = out / "manifest.json"
    manifest = {}
    if path.exists():
        manifest = json.loads(path.read_text())
    manifest[command] = artifacts
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def cmd_bank(cfg: PipelineConfig) -> int:
    _require(cfg, "volume_meta")
    meta = volume.load_meta(cfg.volume_meta)
    out = _out_dir(cfg)
    bank = bank_mod.build_bank(meta.dims, cfg.levels, cfg.filter, cfg.boundary,
                               cfg.tau, cfg.ridge_lambda)
    path = out / "bank.wsb"
    bank_mod.save_bank(bank, path)
    print(f"bank: {len(bank.entries)} bands -> {path}")
    for band in wavelet.band_list(cfg.levels):
        entry = bank.entries[band]
        kernel = bank_mod.canonical_kernel(meta.dims, cfg.levels, cfg.filter,
                                           cfg.boundary, band)
        res = bank_mod.fit_residual(kernel, entry.geom, float(entry.weight[0]), cfg.tau)
        print(f"  band {band}: weight={entry.weight[0]:.6f} rms_residual={res:.6f}")
    _update_manifest(out, "bank", {"bank": path.name})
    return 0


def _splats_for_mode(cfg: PipelineConfig, vol: volume.ScalarVolume,
                     tf: volume.TransferFunction, bank) -> tuple:
    rad = volume.apply_tf(vol, tf)
    pyramids = [
        wavelet.dwt3(rad.rgba[..., c], cfg.levels, cfg.filter, cfg.boundary)
        for c in range(4)
    ]
    config = sparsify.SparsifyConfig(
        k_total=cfg.k_total, energy_exp=cfg.energy_exp, count_exp=cfg.count_exp,
        mad_multiplier=cfg.mad_multiplier, reference_channel=cfg.reference_channel,
        floor=cfg.floor,
    )
    sparse = sparsify.sparsify_pyramid(pyramids, config)
    return rad, sparse


def cmd_convert(cfg: PipelineConfig) -> int:
    vol = _load_scalar_volume(cfg)
    _require(cfg, "tf_path")
    tf = volume.load_tf(cfg.tf_path)
    out = _out_dir(cfg)
    bank = bank_mod.build_bank(vol.meta.dims, cfg.levels, cfg.filter, cfg.boundary,
                               cfg.tau, cfg.ridge_lambda)
    bank_mod.save_bank(bank, out / "bank.wsb")
    modes = volume.make_interval_tfs(tf, cfg.tf_count)
    summary = {"modes": [], "total_splats": 0}
    artifacts = {"bank": "bank.wsb", "modes": []}
    for h, mode_tf in enumerate(modes):
        rad, sparse = _splats_for_mode(cfg, vol, mode_tf, bank)
        display = construct.build_splats(sparse, bank, cfg.gain_mode, "magnitude",
                                         vol.meta)
        signed = construct.build_splats(sparse, bank, cfg.gain_mode, "signed", vol.meta)
        field = construct.eval_field(signed, vol.meta)
        mode_psnr = construct.volume_psnr(field, rad.rgba)
        ply = out / f"mode_{h:02d}.ply"
        construct.export_ply(display, ply, sidecar={
            "tf_index": h,
            "tf_support": list(mode_tf.support) if mode_tf.support else None,
            "levels": cfg.levels, "filter": cfg.filter, "boundary": cfg.boundary,
            "tau": cfg.tau, "ridge_lambda": cfg.ridge_lambda, "k_total": cfg.k_total,
        })
        if len(display) == 0:
            print(f"warning: mode {h} retained no coefficients; empty splat set")
        print(f"mode {h}: {len(display)} splats, volume PSNR {mode_psnr:.2f} dB -> {ply}")
        summary["modes"].append({
            "tf_index": h,
            "ply": ply.name,
            "splats": len(display),
            "volume_psnr_db": mode_psnr,
        })
        summary["total_splats"] += len(display)
        artifacts["modes"].append(ply.name)
    (out / "convert_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    artifacts["summary"] = "convert_summary.json"
    _update_manifest(out, "convert", artifacts)
    return 0


def _reference_views(cfg: PipelineConfig, tf_index: int,
                     ref_dir: str | None) -> list[tuple[render.Camera, render.Image]]:
    cams = _rig(cfg)
    if ref_dir is not None:
        views = []
        for i, cam in enumerate(cams):
            img = render.load_ppm(Path(ref_dir) / f"ref_{i:03d}.ppm")
            if img.resolution != cam.resolution:
                raise ConfigError(
                    f"stored reference {i} has resolution {img.resolution}, "
                    f"rig expects {cam.resolution}"
                )
            views.append((cam, img))
        return views
    vol = _load_scalar_volume(cfg)
    rad = volume.apply_tf(vol, _mode_tf(cfg, tf_index))
    step = _dvr_step(cfg, vol.meta)
    return [(cam, render.render_dvr(rad, cam, step)) for cam in cams]


def cmd_render_ref(cfg: PipelineConfig, tf_index: int, png: bool) -> int:
    out = _out_dir(cfg)
    views = _reference_views(cfg, tf_index, None)
    names = []
    for i, (_, img) in enumerate(views):
        name = f"ref_{i:03d}.ppm"
        render.save_ppm(img, out / name)
        if png:
            render.save_png(img, out / f"ref_{i:03d}.png")
        names.append(name)
    print(f"render-ref: wrote {len(names)} reference views to {out}")
    _update_manifest(out, "render-ref", {"references": names, "tf_index": tf_index})
    return 0


def cmd_eval(cfg: PipelineConfig, ply: str, tf_index: int, ref_dir: str | None) -> int:
    if not Path(ply).exists():
        raise ConfigError(f"ply file {ply} does not exist")
    arrays = construct.import_ply(ply)
    splats = construct.splats_from_ply_arrays(arrays)
    views = _reference_views(cfg, tf_index, ref_dir)
    out = _out_dir(cfg)
    rows = []
    for i, (cam, gt) in enumerate(views):
        img = render.render_splats(splats, cam)
        rows.append({
            "view_index": i,
            "psnr": render.psnr(img, gt),
            "ssim": render.ssim(img, gt),
        })
    metrics = {
        "ply": Path(ply).name,
        "views": rows,
        "mean_psnr": float(np.mean([r["psnr"] for r in rows])),
        "mean_ssim": float(np.mean([r["ssim"] for r in rows])),
    }
    path = out / "metrics.json"
    path.write_text(json.dumps(metrics, indent=2, sort_keys=True))
    print(f"eval: mean PSNR {metrics['mean_psnr']:.2f} dB, "
          f"mean SSIM {metrics['mean_ssim']:.4f} -> {path}")
    _update_manifest(out, "eval", {"metrics": path.name})
    return 0


def cmd_finetune(cfg: PipelineConfig, ply: str, tf_index: int) -> int:
    if not Path(ply).exists():
        raise ConfigError(f"ply file {ply} does not exist")
    arrays = construct.import_ply(ply)
    splats = construct.splats_from_ply_arrays(arrays)
    out = _out_dir(cfg)
    refined_path = out / (Path(ply).stem + "_refined.ply")
    log_path = out / (Path(ply).stem + "_finetune_log.csv")
    if cfg.finetune_iters == 0:
        # no refinement requested: pass the asset through untouched
        refined_path.write_bytes(Path(ply).read_bytes())
        finetune.write_log([], log_path)
        print("finetune: 0 iterations requested; splats unchanged")
        _update_manifest(out, "finetune", {
            "refined": refined_path.name, "log": log_path.name,
        })
        return 0
    views = _reference_views(cfg, tf_index, None)
    params = finetune.params_from_splats(splats)
    rates = None
    if cfg.rate_scale != 1.0:
        span = (params.centers.max(axis=0) - params.centers.min(axis=0)
                if len(params) else np.zeros(3))
        extent = float(np.linalg.norm(span)) or 1.0
        rates = {g: cfg.rate_scale * r
                 for g, r in finetune.default_rates(extent).items()}
    result = finetune.optimize(params, views, cfg.finetune_iters, rates=rates,
                               lambda_ssim=cfg.lambda_ssim, seed=cfg.finetune_seed)
    refined = finetune.splats_to_render(result.params, splats.world_box)
    construct.export_ply(refined, refined_path, sidecar={
        "source_ply": Path(ply).name,
        "iters": cfg.finetune_iters,
        "seed": cfg.finetune_seed,
        "lambda_ssim": cfg.lambda_ssim,
    })
    finetune.write_log(result.history, log_path)
    print(f"finetune: loss {result.history[0]['loss']:.5f} -> "
          f"{result.history[-1]['loss']:.5f} over {cfg.finetune_iters} iters")
    _update_manifest(out, "finetune", {
        "refined": refined_path.name, "log": log_path.name,
    })
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wavesplat",
        description="Compile volumetric scalar fields into Gaussian splat assets",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML configuration file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config field")
        p.add_argument("--out", help="output directory (overrides [output] dir)")
        p.add_argument("--print-config", action="store_true",
                       help="print the resolved configuration and exit")

    common(sub.add_parser("bank", help="build and serialize the transition bank"))
    common(sub.add_parser("convert", help="volume -> per-mode splat PLY files"))

    p_eval = sub.add_parser("eval", help="PSNR/SSIM of a PLY against DVR references")
    common(p_eval)
    p_eval.add_argument("ply", help="splat PLY to evaluate")
    p_eval.add_argument("--tf-index", type=int, default=-1,
                        help="interval TF index (-1 = full TF)")
    p_eval.add_argument("--ref-dir", help="directory of stored ref_XXX.ppm references")

    p_ft = sub.add_parser("finetune", help="image-space refinement of a PLY")
    common(p_ft)
    p_ft.add_argument("ply", help="splat PLY to refine")
    p_ft.add_argument("--tf-index", type=int, default=-1)

    p_rr = sub.add_parser("render-ref", help="write DVR reference images")
    common(p_rr)
    p_rr.add_argument("--tf-index", type=int, default=-1)
    p_rr.add_argument("--png", action="store_true", help="also write PNG copies")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        if args.out:
            cfg.out_dir = args.out
        if args.print_config:
            print(json.dumps(asdict(cfg), indent=2, sort_keys=True))
            return 0
        if args.command == "bank":
            return cmd_bank(cfg)
        if args.command == "convert":
            return cmd_convert(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.ply, args.tf_index, args.ref_dir)
        if args.command == "finetune":
            return cmd_finetune(cfg, args.ply, args.tf_index)
        if args.command == "render-ref":
            return cmd_render_ref(cfg, args.tf_index, args.png)
        raise ConfigError(f"unknown command {args.command}")
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except WavesplatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
