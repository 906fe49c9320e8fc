"""Command-line entry point: phantom, train, synth, eval."""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import qct
from .config import ConfigError, RunConfig, load_config
from .phantom import build_dataset, hu_denormalize, hu_normalize, load_manifest
from .pipeline import (
    CheckpointError,
    cascade_infer,
    cascade_train,
    checkpoint_load,
    checkpoint_save,
    heldout_mr_loss,
    load_split,
    restore_generator,
)
from .stitcher import apply_mask
from .volio import Volume, VolumeFileError, read_volume, write_volume


class CommandError(RuntimeError):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_phantom(args) -> int:
    cfg = _config(args)
    out = _out(args)
    manifest = build_dataset(cfg["phantom.n"], cfg.phantom_params(), out, cfg.seed("phantom"),
                             cfg["phantom.train_fraction"])
    (out / "config.txt").write_text(cfg.emit())
    print(f"wrote {cfg['phantom.n']} pairs; manifest {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out(args)
    train_cfg = cfg.train()
    data = load_split(args.data, "train")
    log_path = out / "train_log.jsonl"
    log = open(log_path, "w")

    def on_record(rec):
        for k in ("l_adv", "l_mr", "l_dists_mv", "l_d"):
            if not math.isfinite(rec[k]):
                raise CommandError(f"non-finite {k} at stage {rec['stage']} step {rec['step']}")
        log.write(json.dumps(rec, sort_keys=True) + "\n")
        if args.verbose and rec["step"] % 100 == 0:
            print(f"stage {rec['stage']} step {rec['step']}: l_mr {rec['l_mr']:.4f} l_dists_mv {rec['l_dists_mv']:.4f}",
                  flush=True)

    def on_stage(stage):
        checkpoint_save(stage, out / f"stage{stage.index}.lvck")

    try:
        stages = cascade_train(train_cfg, cfg.generator(), cfg.discriminator(), cfg.texture_stack(), data,
                               on_record, on_stage)
    finally:
        log.close()
    summary = {"stages": len(stages), "steps": train_cfg.steps}
    if args.heldout:
        held = load_split(args.data, "heldout")
        gens = [s.G for s in stages]
        summary["heldout_l_mr"] = [
            heldout_mr_loss(gens[: k + 1], held, train_cfg.patch, train_cfg.overlap) for k in range(len(gens))
        ]
    (out / "train_summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    (out / "config.txt").write_text(cfg.emit())
    print(f"trained {len(stages)} stage(s); checkpoints in {out}")
    return 0


def load_generators(paths, cfg: RunConfig | None = None):
    gens = []
    for k, path in enumerate(paths):
        ckpt = checkpoint_load(path)
        expect = None
        if cfg is not None:
            expect = cfg.generator()
            expect.in_channels = 1 if k == 0 else 2
        gens.append(restore_generator(ckpt, expect))
    return gens


def synth_one(gens, tlc_hu: np.ndarray, mask: np.ndarray, p: int, o: int, batch: int) -> np.ndarray:
    x = apply_mask(hu_normalize(tlc_hu), mask)
    y = cascade_infer(gens, x, mask, p, o, batch_size=batch)
    return hu_denormalize(y)


def cmd_synth(args) -> int:
    cfg = _config(args) if args.config else None
    gens = load_generators(args.ckpt, cfg)
    p = gens[0].config.patch_size
    o = cfg["train.overlap"] if cfg else args.overlap
    batch = cfg["synth.batch"] if cfg else 8
    out = _out(args)
    jobs = []
    if args.data:
        _, pairs = load_manifest(args.data)
        jobs = [(f"pair{r.index:03d}", r.tlc, r.mask) for r in pairs if r.split == args.split]
    else:
        if not (args.tlc and args.mask):
            raise CommandError("synth needs --data or both --tlc and --mask")
        jobs = [(Path(args.tlc).stem, Path(args.tlc), Path(args.mask))]
    for name, tlc_path, mask_path in jobs:
        tlc = read_volume(tlc_path, 0)
        mask = read_volume(mask_path, 1).data
        y = synth_one(gens, tlc.data, mask, p, o, batch)
        if not np.isfinite(y).all():
            raise CommandError(f"{name}: non-finite synthetic values")
        write_volume(out / f"{name}_synth.rvl", Volume(y, tlc.spacing, "synthetic-RV"))
    print(f"synthesized {len(jobs)} volume(s) into {out}")
    return 0


def evaluate_pairs(jobs, window: int):
    """jobs: (id, tlc_hu, rv_hu, synth_hu, mask). Returns report rows and agreement records."""
    rows, truth_at, pred_at, truth_fs, pred_fs, mean_real, mean_syn = [], [], [], [], [], [], []
    for vid, tlc, rv, syn, mask in jobs:
        y, y_hat = hu_normalize(rv), hu_normalize(syn)
        metrics = qct.image_metrics(vid, y, y_hat, mask, window)
        truth = qct.biomarker_panel(vid, tlc, rv, mask)
        pred = qct.biomarker_panel(vid, tlc, syn, mask)
        rows.append(qct.report_row(metrics, truth, pred))
        truth_at.append(truth.air_trapping_percent)
        pred_at.append(pred.air_trapping_percent)
        truth_fs.append(truth.fsad_percent)
        pred_fs.append(pred.fsad_percent)
        m = np.asarray(mask).astype(bool)
        mean_real.append(float(np.mean(rv[m], dtype=np.float64)))
        mean_syn.append(float(np.mean(syn[m], dtype=np.float64)))
    agreement = []
    if len(rows) >= 2:
        agreement = [
            qct.agreement_record("mean_hu", qct.bland_altman(mean_real, mean_syn)),
            qct.agreement_record("air_trapping_percent", qct.bland_altman(truth_at, pred_at)),
            qct.agreement_record("fsad_percent", qct.bland_altman(truth_fs, pred_fs)),
        ]
    summary = {
        "volumes": len(rows),
        "fsad_mae": qct.fsad_mae(zip(truth_fs, pred_fs)),
        "air_trapping_mae": qct.fsad_mae(zip(truth_at, pred_at)),
    }
    return rows, agreement, summary


def _check_metrics(rows, agreement, summary) -> None:
    for r in rows:
        for k, v in r.items():
            # an infinite PSNR is the defined signal for identical volumes
            if isinstance(v, float) and (math.isnan(v) or (math.isinf(v) and k != "psnr_db")):
                raise CommandError(f"{r['volume_id']}: non-finite {k}")
    for rec in agreement:
        for k in ("bias", "sd", "lower", "upper"):
            if not math.isfinite(rec[k]):
                raise CommandError(f"non-finite agreement {k} for {rec['quantity']}")
    for k, v in summary.items():
        if isinstance(v, float) and not math.isfinite(v):
            raise CommandError(f"non-finite {k}")


def cmd_eval(args) -> int:
    cfg = _config(args) if args.config else None
    window = cfg["eval.ssim_window"] if cfg else args.window
    out = _out(args)
    jobs = []
    if args.data:
        if not args.synth_dir:
            raise CommandError("eval with --data needs --synth-dir")
        _, pairs = load_manifest(args.data)
        for r in pairs:
            if r.split != args.split:
                continue
            vid = f"pair{r.index:03d}"
            jobs.append((vid, read_volume(r.tlc, 0).data, read_volume(r.rv, 0).data,
                         read_volume(Path(args.synth_dir) / f"{vid}_synth.rvl", 0).data, read_volume(r.mask, 1).data))
    else:
        if not (args.tlc and args.rv and args.synth and args.mask):
            raise CommandError("eval needs --data/--synth-dir or all of --tlc --rv --synth --mask")
        jobs.append((Path(args.synth).stem, read_volume(args.tlc, 0).data, read_volume(args.rv, 0).data,
                     read_volume(args.synth, 0).data, read_volume(args.mask, 1).data))
    rows, agreement, summary = evaluate_pairs(jobs, window)
    (out / "report.jsonl").write_text(qct.to_jsonl(rows))
    (out / "report.csv").write_text(qct.to_csv(rows))
    (out / "agreement.jsonl").write_text(qct.to_jsonl(agreement))
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    _check_metrics(rows, agreement, summary)
    print(f"evaluated {len(rows)} volume(s); report in {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lungvit", description="Inspiratory-to-expiratory CT translation at desk scale.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", type=str, default=None, help="flat key=value config file")
        p.add_argument("--out", type=str, required=True, help=out_help)
        p.add_argument("--seed", type=int, default=None, help="override run.seed")

    p = sub.add_parser("phantom", help="build a synthetic paired dataset")
    common(p, "dataset directory")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train the generator cascade")
    common(p, "directory for checkpoints and logs")
    p.add_argument("--data", required=True, help="dataset manifest.jsonl")
    p.add_argument("--heldout", action="store_true", help="report held-out L_MR per cascade stage")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="synthesize expiratory volumes")
    common(p, "output directory")
    p.add_argument("--ckpt", action="append", required=True, help="checkpoint; repeat in cascade order")
    p.add_argument("--data", help="dataset manifest.jsonl (batch mode)")
    p.add_argument("--split", default="heldout")
    p.add_argument("--tlc", help="inspiratory volume file")
    p.add_argument("--mask", help="lung mask volume file")
    p.add_argument("--overlap", type=int, default=4, help="patch overlap when no config is given")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="image-quality and biomarker report")
    common(p, "report directory")
    p.add_argument("--data", help="dataset manifest.jsonl (batch mode)")
    p.add_argument("--synth-dir", help="directory of <id>_synth.rvl files")
    p.add_argument("--split", default="heldout")
    p.add_argument("--tlc")
    p.add_argument("--rv")
    p.add_argument("--synth")
    p.add_argument("--mask")
    p.add_argument("--window", type=int, default=7, help="SSIM window when no config is given")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CommandError, ConfigError, CheckpointError, VolumeFileError, OSError, ValueError, KeyError) as err:
        print(f"lungvit {args.command}: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
