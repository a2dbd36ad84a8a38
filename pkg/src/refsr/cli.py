"""Command-line front end.

Exit codes: 0 success, 2 usage or precondition failure, 3 runtime abort.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import correspondence, datasets, geometry, images, match_train
from .aggregation import ReferenceAggregator
from .checkpoint import load_checkpoint, save_checkpoint, state_checksum
from .config import ConfigError, RunConfig, load_config
from .descriptor import ContrastiveMatcher
from .metrics import MetricReport, psnr_y, ssim_y
from .restoration import RefSRPipeline, RestorationAborted, RestorationNet, train_restoration
from .vgg import PerceptualFeatures, WeightsError, random_vgg19_archive

log = logging.getLogger("refsr")

EXIT_OK, EXIT_USAGE, EXIT_ABORT = 0, 2, 3


class UsageError(Exception):
    pass


# -- shared helpers -------------------------------------------------------------

def _config(args) -> RunConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for key in ("seed", "iters", "mode", "output_dir", "dataset_root"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = str(val)
    return load_config(args.config, overrides)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    return out


def _vgg_weights(cfg: RunConfig, out: Path) -> Path:
    spec = cfg.vgg_weights
    if not spec:
        raise WeightsError("vgg_weights is not set (path to a VGG19 .npz archive, or 'random')")
    if spec.startswith("random"):
        seed = int(spec.split(":", 1)[1]) if ":" in spec else 0
        path = out / f"vgg19_random_{seed}.npz"
        if not path.exists():
            random_vgg19_archive(path, seed)
        return path
    return Path(spec)


def _matcher_init(cfg: RunConfig):
    weights = cfg.matcher_weights or None
    return cfg.matcher_init, weights


def load_matcher(path) -> ContrastiveMatcher:
    states, manifest = load_checkpoint(path)
    stage = manifest["stage"]
    if stage not in ("teacher", "student"):
        raise UsageError(f"{path} is a {stage!r} checkpoint, not a matcher")
    m = ContrastiveMatcher()
    m.load_state_dict(states[stage])
    m.eval()
    return m


def load_pipeline(matcher_ckpt, restoration_ckpt, vgg_path) -> RefSRPipeline:
    matcher = load_matcher(matcher_ckpt)
    states, manifest = load_checkpoint(restoration_ckpt)
    want = manifest.get("matcher_checksum")
    have = state_checksum(matcher.state_dict())
    if want and want != have:
        raise UsageError(f"{restoration_ckpt} was trained with a different matcher than {matcher_ckpt}")
    agg = ReferenceAggregator()
    agg.load_state_dict(states["aggregator"])
    net = RestorationNet(manifest.get("n_blocks", 16))
    net.load_state_dict(states["restorer"])
    pipe = RefSRPipeline(matcher, PerceptualFeatures(vgg_path), agg, net)
    return pipe.eval()


def _load_input(args):
    """Returns (lr, hr or None) as arrays; hr inputs are degraded x4."""
    if args.hr:
        hr = images.crop_to_multiple(images.load_image(args.hr))
        return images.degrade(hr), hr
    if args.lr:
        return images.load_image(args.lr), None
    raise UsageError("one of --lr / --hr is required")


def _matcher_samples(manifest_path):
    samples = []
    for rec in geometry.load_manifest(manifest_path):
        hr = images.load_image(rec.input_path)
        ref = images.load_image(rec.reference_path)
        samples.append(match_train.make_sample(hr, ref, rec.homography))
    return samples


# -- commands -------------------------------------------------------------------

def cmd_prepare(args) -> int:
    cfg = _config(args)
    root = Path(cfg.dataset_root or ".")
    records = datasets.load_dataset(root, "cufed5_like", split="train")
    if not records:
        print("no records", file=sys.stderr)
        return EXIT_USAGE
    out = _out_dir(cfg)
    pair_dir = out / "pairs"
    size = cfg.ref_patch
    manifest, skipped = [], []
    for i, rec in enumerate(records):
        img = images.load_image(rec.input_hr)
        if img.shape[0] < size or img.shape[1] < size:
            log.warning("skipping undersized %s", rec.input_hr)
            skipped.append((str(rec.input_hr), "undersized"))
            continue
        rng = np.random.default_rng([cfg.seed, i])
        y = int(rng.integers(0, img.shape[0] - size + 1))
        x = int(rng.integers(0, img.shape[1] - size + 1))
        hr = images.quantize(img[y:y + size, x:x + size])
        ref, hom = match_train.synthesize_pair(hr, int(rng.integers(2**31)))
        stem = rec.input_hr.stem
        hr_path, ref_path = pair_dir / f"{stem}_hr.png", pair_dir / f"{stem}_ref.png"
        images.save_image(hr_path, hr)
        images.save_image(ref_path, ref)
        manifest.append(geometry.ManifestRecord(str(hr_path), str(ref_path), hom, "train"))
    geometry.save_manifest(out / "train_manifest.csv", manifest, skipped)
    log.info("prepared %d pairs from %d inputs (%d skipped)", len(manifest), len(records), len(skipped))
    print(f"records {len(manifest)} inputs {len(records)} skipped {len(skipped)}")
    return EXIT_OK


def _aee_report(path: Path, lines) -> None:
    path.write_text("".join(f"iteration {it} aee {v:.6f}\n" for it, v in lines), encoding="utf-8")


def cmd_train_matcher(args) -> int:
    cfg = _config(args)
    tcfg = cfg.train_config()
    teacher = None
    if args.stage == "student":
        if args.teacher_ckpt:
            teacher = load_matcher(args.teacher_ckpt)
        elif tcfg.alpha_kl > 0:
            print("student training with alpha_kl > 0 needs --teacher-ckpt "
                  "(or set alpha_kl = 0 for the teacher-free ablation)", file=sys.stderr)
            return EXIT_USAGE
    samples = _matcher_samples(args.manifest)
    if not samples:
        print("no records", file=sys.stderr)
        return EXIT_USAGE
    out = _out_dir(cfg)
    init, weights = _matcher_init(cfg)
    use_hr = args.stage == "teacher"
    initial = ContrastiveMatcher(init, cfg.seed, weights)
    aee0 = match_train.mean_aee(initial, samples, use_hr)
    kwargs = dict(iters=cfg.iters, init=init, weights_path=weights, out_dir=out,
                  checkpoint_every=cfg.checkpoint_every, config_hash=cfg.config_hash())
    try:
        if args.stage == "teacher":
            model, _ = match_train.train_teacher(samples, tcfg, cfg.seed, **kwargs)
        else:
            model, _ = match_train.train_student(samples, teacher, tcfg, cfg.seed, **kwargs)
    except match_train.TrainingAborted as exc:
        save_checkpoint(out / f"{args.stage}_aborted.ckpt", {args.stage: exc.model}, args.stage,
                        exc.iteration, cfg.config_hash())
        print(str(exc), file=sys.stderr)
        return EXIT_ABORT
    aee1 = match_train.mean_aee(model, samples, use_hr)
    _aee_report(out / f"{args.stage}_aee.txt", [(0, aee0), (cfg.iters, aee1)])
    print(f"aee iteration 0 {aee0:.4f} -> iteration {cfg.iters} {aee1:.4f}")
    return EXIT_OK


def cmd_train_restoration(args) -> int:
    cfg = _config(args)
    rcfg = cfg.restoration_config()
    root = Path(cfg.dataset_root or ".")
    records = datasets.load_dataset(root, "cufed5_like", split="train")
    if not records:
        print("no records", file=sys.stderr)
        return EXIT_USAGE
    out = _out_dir(cfg)
    matcher = load_matcher(args.matcher_ckpt)
    try:
        train_restoration(records, matcher, _vgg_weights(cfg, out), rcfg, cfg.seed, cfg.iters,
                          out_dir=out, checkpoint_every=cfg.checkpoint_every,
                          config_hash=cfg.config_hash(), n_blocks=cfg.residual_blocks)
    except RestorationAborted as exc:
        save_checkpoint(out / "restoration_aborted.ckpt",
                        {"aggregator": exc.pipeline.aggregator, "restorer": exc.pipeline.restorer},
                        "restoration", exc.iteration, cfg.config_hash(),
                        matcher_checksum=state_checksum(matcher.state_dict()),
                        n_blocks=cfg.residual_blocks)
        print(str(exc), file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


def _ref_image(args, hr):
    if args.ref == "same-as-input-hr":
        if hr is None:
            raise UsageError("--ref same-as-input-hr needs --hr")
        return hr
    return images.crop_to_multiple(images.load_image(args.ref))


def cmd_infer(args) -> int:
    cfg = _config(args)
    lr, hr = _load_input(args)
    ref = _ref_image(args, hr)
    out_dir = Path(args.out).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    pipe = load_pipeline(args.matcher_ckpt, args.restoration_ckpt, _vgg_weights(cfg, out_dir))
    sr, p0 = pipe.super_resolve(images.to_tensor(lr), images.to_tensor(ref))
    images.save_image(args.out, images.to_array(sr))
    if args.dump_offsets:
        field = correspondence.OffsetField(p0[0].permute(1, 2, 0).numpy().astype(np.float64))
        correspondence.write_offsets(args.dump_offsets, field)
    print(f"wrote {args.out} ({sr.shape[-2]}x{sr.shape[-1]})")
    return EXIT_OK


def _gt_from_npz(path) -> geometry.CorrespondenceGroundTruth:
    with np.load(path) as z:
        return geometry.CorrespondenceGroundTruth(z["target_positions"], z["validity_mask"])


def _student_map(matcher, lr, ref):
    lr_up = images.upsample(lr)
    with torch.no_grad():
        f_in, f_ref = matcher(images.to_tensor(lr_up), images.to_tensor(ref))
    return correspondence.match(f_in, f_ref)


def _oracle_map(gt: geometry.CorrespondenceGroundTruth) -> correspondence.CorrespondenceMap:
    pos = np.nan_to_num(np.rint(gt.target_positions)).astype(np.int64)
    return correspondence.CorrespondenceMap(pos, np.ones(gt.grid_shape))


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    needs_model = args.method == "model"
    needs_matcher = needs_model or (args.transform_group and args.matcher == "model")
    if needs_model and not (args.matcher_ckpt and args.restoration_ckpt):
        raise UsageError("--method model needs --matcher-ckpt and --restoration-ckpt")
    if needs_matcher and not args.matcher_ckpt:
        raise UsageError("--matcher model needs --matcher-ckpt")
    pipe = None
    if needs_model:
        pipe = load_pipeline(args.matcher_ckpt, args.restoration_ckpt, _vgg_weights(cfg, out))
    matcher = load_matcher(args.matcher_ckpt) if needs_matcher else None
    root = Path(cfg.dataset_root or ".")

    items = []  # (name, hr, ref, gt or None)
    if args.transform_group:
        recs = geometry.build_transform_controlled_set(root, args.transform_group,
                                                       out / f"transform_{args.transform_group}",
                                                       cfg.seed)
        for rec in recs:
            hr = images.crop_to_multiple(images.load_image(rec.input_path))
            gt = _gt_from_npz(Path(rec.reference_path).with_name(
                Path(rec.input_path).stem + "_gt.npz"))
            items.append((Path(rec.input_path).stem, hr, images.load_image(rec.reference_path), gt))
    else:
        for rec in datasets.load_dataset(root, args.tag, split="test"):
            hr = images.crop_to_multiple(images.load_image(rec.input_hr))
            ref_idx = min(args.ref_index, len(rec.references)) - 1
            ref = images.crop_to_multiple(images.load_image(rec.references[ref_idx]))
            items.append((rec.input_hr.stem, hr, ref, None))
    if not items:
        print("no records", file=sys.stderr)
        return EXIT_USAGE

    report = MetricReport()
    aee_rows = []
    for name, hr, ref, gt in items:
        lr = images.degrade(hr)
        if args.method == "hr":
            sr = hr
        elif args.method == "bicubic":
            sr = np.clip(images.upsample(lr), 0, 1)
        else:
            out_t, _ = pipe.super_resolve(images.to_tensor(lr), images.to_tensor(ref))
            sr = images.to_array(out_t)
        report.add(name, psnr_y(sr, hr), ssim_y(sr, hr))
        if gt is not None:
            cmap = _oracle_map(gt) if args.matcher == "oracle" else _student_map(matcher, lr, ref)
            aee_rows.append((name, correspondence.aee(cmap, gt)))
    report.write(out / "metrics.csv")
    print(f"psnr_y {report.psnr_y:.4f} ssim_y {report.ssim_y:.4f} over {len(report.rows)} images")
    if args.transform_group:
        mean = float(np.mean([a for _, a in aee_rows]))
        with open(out / "aee.csv", "w", encoding="utf-8") as fh:
            fh.write("image,aee_cells,aee_pixels\n")
            for name, a in aee_rows:
                fh.write(f"{name},{a!r},{a * 4!r}\n")
            fh.write(f"mean,{mean!r},{mean * 4!r}\n")
        print(f"aee {mean:.4f} cells ({mean * 4:.4f} px), group {args.transform_group}")
    return EXIT_OK


def cmd_build_transform_set(args) -> int:
    cfg = _config(args)
    recs = geometry.build_transform_controlled_set(cfg.dataset_root or ".", args.group,
                                                   cfg.output_dir, cfg.seed)
    print(f"records {len(recs)}")
    return EXIT_OK if recs else EXIT_USAGE


def cmd_match(args) -> int:
    _config(args)
    lr, hr = _load_input(args)
    ref = _ref_image(args, hr)
    matcher = load_matcher(args.matcher_ckpt)
    cmap = _student_map(matcher, lr, ref)
    gt = _gt_from_npz(args.gt) if args.gt else None
    text = correspondence.summary(cmap, gt)
    if args.dump_offsets:
        correspondence.write_offsets(args.dump_offsets, correspondence.to_offsets(cmap))
    if args.summary:
        Path(args.summary).write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="refsr", description="Reference-based x4 super-resolution")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", parents=[common], help="synthesize warped training pairs")
    s.add_argument("--root", dest="dataset_root")
    s.add_argument("--out", dest="output_dir")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train-matcher", parents=[common], help="train teacher or student matcher")
    s.add_argument("--stage", choices=("teacher", "student"), required=True)
    s.add_argument("--manifest", required=True, help="train_manifest.csv from 'prepare'")
    s.add_argument("--teacher-ckpt")
    s.add_argument("--iters", type=int)
    s.add_argument("--out", dest="output_dir")
    s.set_defaults(func=cmd_train_matcher)

    s = sub.add_parser("train-restoration", parents=[common], help="train aggregation + restoration")
    s.add_argument("--root", dest="dataset_root")
    s.add_argument("--matcher-ckpt", required=True)
    s.add_argument("--mode", choices=("rec", "gan"), default=None)
    s.add_argument("--iters", type=int)
    s.add_argument("--out", dest="output_dir")
    s.set_defaults(func=cmd_train_restoration)

    s = sub.add_parser("infer", parents=[common], help="super-resolve one image")
    s.add_argument("--lr")
    s.add_argument("--hr", help="HR image, degraded x4 before inference")
    s.add_argument("--ref", required=True, help="reference path or 'same-as-input-hr'")
    s.add_argument("--matcher-ckpt", required=True)
    s.add_argument("--restoration-ckpt", required=True)
    s.add_argument("--out", required=True, help="output PNG")
    s.add_argument("--dump-offsets", help="write the offset field (C2OF blob)")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("evaluate", parents=[common], help="PSNR/SSIM (and AEE) on a test set")
    s.add_argument("--root", dest="dataset_root")
    s.add_argument("--tag", choices=datasets.TAGS, default="cufed5_like")
    s.add_argument("--method", choices=("model", "bicubic", "hr"), default="model")
    s.add_argument("--matcher", choices=("model", "oracle"), default="model")
    s.add_argument("--matcher-ckpt")
    s.add_argument("--restoration-ckpt")
    s.add_argument("--ref-index", type=int, default=1)
    s.add_argument("--transform-group", choices=("none", "small", "medium", "large"))
    s.add_argument("--out", dest="output_dir")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("build-transform-set", parents=[common], help="transformation-controlled set")
    s.add_argument("--root", dest="dataset_root")
    s.add_argument("--group", choices=("none", "small", "medium", "large"), required=True)
    s.add_argument("--out", dest="output_dir")
    s.set_defaults(func=cmd_build_transform_set)

    s = sub.add_parser("match", parents=[common], help="match two images, report offsets / AEE")
    s.add_argument("--lr")
    s.add_argument("--hr")
    s.add_argument("--ref", required=True)
    s.add_argument("--matcher-ckpt", required=True)
    s.add_argument("--gt", help="ground-truth .npz (target_positions, validity_mask)")
    s.add_argument("--dump-offsets")
    s.add_argument("--summary")
    s.set_defaults(func=cmd_match)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "mode", None):
        args.mode = {"rec": "rec_only", "gan": "full_gan"}[args.mode]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, datasets.DatasetError, WeightsError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (match_train.TrainingAborted, RestorationAborted, FloatingPointError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
