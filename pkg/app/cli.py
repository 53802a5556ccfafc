########################
# Command-Line Entry   #
########################

import argparse
import configparser
from fractions import Fraction
from functools import partial
import logging
from pathlib import Path
import secrets
import sys
from typing import Callable, Dict, List, Optional, Sequence

from colorama import Fore, Style, init
import pandas as pd

from app.checkpoint import Checkpoint
from app.datasets import PairedImageDataset, kadid_to_manifest, read_qa_manifest
from app.exceptions import (
    ConfigurationError,
    DatasetError,
    MetricError,
    SRError,
    ValidationError,
)
from app.imaging import bicubic_resize, crop, load_image, quantize, save_image
from app.metrics import CONVENTIONS, LPIPSMetric, evaluate, psnr, ssim, SSIM_WINDOW
from app.plotting import plot_loss_history, plot_patch_comparison
from app.qa_network import QAConfig, QATrainConfig, QATrainer, save_qa_network
from app.sr_config import SRConfig, TrainConfig, setup_logging
from app.trainer import Trainer, infer, load_generator
from app.training_observers import CheckpointObserver, LoggingObserver, ValidationObserver
from app.validators import ImageValidator

init(autoreset=True)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

# Ablation variants as run-config overrides
VARIANTS: Dict[str, Dict[str, str]] = {
    "triplet": {"loss.adversarial": "triplet"},
    "vanilla": {"loss.adversarial": "vanilla"},
    "no_qa": {"loss.use_qa": "false"},
    "content_only": {"loss.qa": "0", "loss.gan": "0", "loss.perceptual": "0"},
}


def _ok(message: str) -> None:
    print(f"{Fore.GREEN}{message}{Style.RESET_ALL}")


def _warn(message: str) -> None:
    print(f"{Fore.YELLOW}{message}{Style.RESET_ALL}")
    logging.warning(message)


def _error(message: str) -> None:
    print(f"{Fore.RED}Error: {message}{Style.RESET_ALL}", file=sys.stderr)
    logging.error(message)


def _patch(text: str) -> List[int]:
    try:
        values = [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"patch must be x,y,w,h integers, got '{text}'")
    if len(values) != 4:
        raise argparse.ArgumentTypeError(f"patch must have four values x,y,w,h, got '{text}'")
    return values


def _config_sets_seed(path: Path) -> bool:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error:
        return False
    return parser.has_option("training", "seed")


def resolve_seed(seed: Optional[int]) -> int:
    """Return ``seed``, or draw one and print it so the run can be repeated."""
    if seed is not None:
        return seed
    seed = secrets.randbelow(2 ** 31)
    print(f"{Fore.CYAN}No seed given; using --seed {seed}{Style.RESET_ALL}")
    logging.info(f"Drew seed {seed}")
    return seed


def _lpips_metric(args: argparse.Namespace, sr_config: SRConfig) -> Optional[LPIPSMetric]:
    if getattr(args, "skip_lpips", False):
        return None
    calibration = getattr(args, "lpips_calibration", None) or sr_config.lpips_calibration
    return LPIPSMetric(calibration, vgg_weights=sr_config.vgg_weights, device=sr_config.device)


def _data_root(args: argparse.Namespace, sr_config: SRConfig) -> Path:
    root = args.data_root or sr_config.data_root
    if root is None:
        raise ConfigurationError("--data-root is required (or set SRTGAN_DATA_ROOT)")
    return Path(root)


def _build_trainer(config: TrainConfig, data_root: Path, out_dir: Path, sr_config: SRConfig,
                   lpips_metric: Optional[LPIPSMetric]) -> Trainer:
    dataset = PairedImageDataset(
        data_root, config.train_index, scale=config.generator.scale,
        crop_size=config.crop_size, augment=config.augment, seed=config.seed,
    )
    val_dataset = None
    if (data_root / config.val_index).is_file():
        val_dataset = PairedImageDataset(data_root, config.val_index, scale=config.generator.scale,
                                         augment=False)
    trainer = Trainer(config, dataset, out_dir, sr_config=sr_config, val_dataset=val_dataset,
                      lpips_metric=lpips_metric)
    trainer.add_observer(LoggingObserver(out_dir / "train_log.txt", config.log_every))
    trainer.add_observer(CheckpointObserver(trainer))
    trainer.add_observer(ValidationObserver(trainer))
    config.to_file(out_dir / "run_config.ini")
    return trainer


def _validation_lpips(args: argparse.Namespace, sr_config: SRConfig) -> Optional[LPIPSMetric]:
    try:
        return _lpips_metric(args, sr_config)
    except MetricError as e:
        _warn(f"Validation runs without LPIPS: {e}")
        return None


def cmd_train(args: argparse.Namespace, sr_config: SRConfig) -> int:
    """Train the SR GAN from a run config; checkpoints and logs go to --out-dir."""
    config_path = Path(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["training.seed"] = args.seed
    elif args.resume:
        overrides["training.seed"] = Checkpoint.load(args.resume).config["training"]["seed"]
    elif config_path.is_file() and not _config_sets_seed(config_path):
        overrides["training.seed"] = resolve_seed(None)
    if args.total_steps is not None:
        overrides["training.total_steps"] = args.total_steps
    config = TrainConfig.from_file(config_path, overrides, encoding=sr_config.default_encoding)

    out_dir = Path(args.out_dir)
    trainer = _build_trainer(config, _data_root(args, sr_config), out_dir, sr_config,
                             _validation_lpips(args, sr_config))
    if args.resume:
        trainer.resume(args.resume)
    trainer.train(progress=not args.quiet)
    plot_loss_history(trainer.get_history_dataframe(), out_dir / "losses.png")
    _ok(f"Training finished at step {trainer.step}; final checkpoint {out_dir / 'final.pt'}")
    return EXIT_OK


def _input_images(path: Path) -> List[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    return [path]


def cmd_infer(args: argparse.Namespace, sr_config: SRConfig) -> int:
    """Write ``{name}_SR.png`` for every input image."""
    generator = load_generator(args.checkpoint, device=sr_config.device)
    inputs = _input_images(Path(args.input))
    if not inputs:
        raise DatasetError(f"No images found in {args.input}")
    out_dir = Path(args.output)
    for path in inputs:
        output = infer(generator, load_image(path))
        save_image(output, out_dir / f"{path.stem}_SR.png")
    _ok(f"Wrote {len(inputs)} image(s) to {out_dir}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, sr_config: SRConfig) -> int:
    """Score a checkpoint (or the bicubic baseline) on a paired dataset."""
    dataset = PairedImageDataset(args.dataset, args.index, augment=False)
    lpips_metric = _lpips_metric(args, sr_config)
    if args.baseline:
        upscaler, method = None, "bicubic"
    else:
        upscaler, method = partial(infer, load_generator(args.checkpoint, device=sr_config.device)), "checkpoint"
    metadata = {"method": method, "checkpoint": str(args.checkpoint) if args.checkpoint else None}
    report = evaluate(upscaler, dataset, args.convention, args.crop_border, lpips_metric, metadata,
                      progress=not args.quiet)
    report.save(args.report)
    print(report.to_table("Bicubic" if args.baseline else Path(args.checkpoint).stem))
    _ok(f"Report for {len(report)} images written to {args.report}")
    return EXIT_OK


def cmd_qa_train(args: argparse.Namespace, sr_config: SRConfig) -> int:
    """Train the QA network on a MOS manifest and write its parameters and split report."""
    if args.kadid_root:
        kadid_to_manifest(args.kadid_root, args.manifest)
    records = read_qa_manifest(args.manifest)
    train_config = QATrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.learning_rate,
        crop_size=args.crop_size or None, seed=resolve_seed(args.seed), device=sr_config.device,
    )
    result = QATrainer(QAConfig(), train_config).train(records)
    out = Path(args.out)
    save_qa_network(result.model, out)
    report_path, _ = result.write_report(out.with_name(out.stem + "_report.json"))
    sizes = result.split_sizes()
    print(f"Splits train/val/test: {sizes['train']}/{sizes['val']}/{sizes['test']}")
    print(f"Test MSE {result.test_mse:.4f} (train-mean baseline {result.baseline_test_mse:.4f})")
    _ok(f"QA network written to {out}; report {report_path}")
    return EXIT_OK


def cmd_compare_degradation(args: argparse.Namespace, sr_config: SRConfig) -> int:
    """Plot a true-LR patch next to the same patch of the bicubic-downsampled HR."""
    hr, lr = load_image(args.hr), load_image(args.lr)
    synthetic = quantize(bicubic_resize(hr, Fraction(1, args.scale)))
    ImageValidator.validate_same_shape(lr, synthetic, ("true LR", "bicubic-downsampled HR"))
    x, y, w, h = ImageValidator.validate_patch(args.patch, lr.shape[-2], lr.shape[-1])
    true_patch, bicubic_patch = crop(lr, y, x, h, w), crop(synthetic, y, x, h, w)

    patch_psnr = psnr(true_patch, bicubic_patch)
    patch_ssim = ssim(true_patch, bicubic_patch) if min(w, h) >= SSIM_WINDOW else None
    psnr_text = "inf" if patch_psnr == float("inf") else f"{patch_psnr:.3f} dB"
    ssim_text = "n/a (patch smaller than the SSIM window)" if patch_ssim is None else f"{patch_ssim:.4f}"
    print(f"PSNR: {psnr_text}")
    print(f"SSIM: {ssim_text}")
    plot_patch_comparison(
        [true_patch, bicubic_patch], ["True LR", "Bicubic-downsampled HR"], args.out,
        suptitle=f"Patch ({x}, {y}, {w}, {h})  PSNR {psnr_text}",
    )
    _ok(f"Comparison written to {args.out}")
    return EXIT_OK


def cmd_ablation(args: argparse.Namespace, sr_config: SRConfig) -> int:
    """Train each variant from one seed and compare PSNR/SSIM/LPIPS on the training pairs."""
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown or not variants:
        raise ConfigurationError(f"Unknown ablation variants {unknown}; choose from {list(VARIANTS)}")
    config_path = Path(args.config)
    seed = args.seed
    if seed is None and config_path.is_file() and not _config_sets_seed(config_path):
        seed = resolve_seed(None)
    data_root = _data_root(args, sr_config)
    lpips_metric = _lpips_metric(args, sr_config)
    out_dir = Path(args.out_dir)

    rows = []
    for variant in variants:
        overrides = dict(VARIANTS[variant])
        if seed is not None:
            overrides["training.seed"] = seed
        if args.total_steps is not None:
            overrides["training.total_steps"] = args.total_steps
        config = TrainConfig.from_file(config_path, overrides, encoding=sr_config.default_encoding)
        print(f"{Fore.CYAN}Training variant '{variant}'{Style.RESET_ALL}")
        trainer = _build_trainer(config, data_root, out_dir / variant, sr_config, lpips_metric)
        trainer.train(progress=not args.quiet)
        held_in = PairedImageDataset(data_root, config.train_index, scale=config.generator.scale, augment=False)
        report = evaluate(partial(infer, trainer.generator), held_in, lpips_metric=lpips_metric,
                          metadata={"variant": variant})
        report.save(out_dir / variant / "report.json")
        rows.append({"variant": variant, **report.aggregates()})

    table = pd.DataFrame(rows)
    table.to_csv(out_dir / "ablation.csv", index=False)
    print(table.to_string(index=False))
    by_variant = {row["variant"]: row for row in rows}
    if "triplet" in by_variant and "vanilla" in by_variant and lpips_metric is not None:
        if by_variant["triplet"]["lpips"] > by_variant["vanilla"]["lpips"]:
            _warn("Triplet variant has higher LPIPS than the vanilla GAN variant on these images")
    _ok(f"Ablation table written to {out_dir / 'ablation.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tripletsr",
        description="Train, evaluate and run a triplet-loss GAN for x4 single-image super-resolution.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train the SR GAN")
    train.add_argument("--config", required=True, help="INI run config")
    train.add_argument("--data-root", help="directory of {id}_LR.png/{id}_HR.png pairs (default $SRTGAN_DATA_ROOT)")
    train.add_argument("--out-dir", required=True, help="directory for checkpoints, logs and plots")
    train.add_argument("--seed", type=int, help="seed for every random choice (drawn and printed if absent)")
    train.add_argument("--resume", help="checkpoint to continue from; its config must match")
    train.add_argument("--total-steps", type=int, help="override training.total_steps")
    train.add_argument("--lpips-calibration", help="LPIPS calibration file for validation")
    train.add_argument("--skip-lpips", action="store_true", help="validate without LPIPS")
    train.add_argument("--quiet", action="store_true", help="hide progress bars")
    train.set_defaults(func=cmd_train)

    inf = sub.add_parser("infer", help="super-resolve images with a checkpoint")
    inf.add_argument("--checkpoint", required=True, help="checkpoint file")
    inf.add_argument("--input", required=True, help="image file or directory of images")
    inf.add_argument("--output", required=True, help="output directory for {name}_SR.png")
    inf.set_defaults(func=cmd_infer)

    ev = sub.add_parser("eval", help="compute PSNR/SSIM/LPIPS on a paired dataset")
    source = ev.add_mutually_exclusive_group(required=True)
    source.add_argument("--checkpoint", help="checkpoint to evaluate")
    source.add_argument("--baseline", choices=["bicubic"], help="evaluate bicubic x4 upsampling instead")
    ev.add_argument("--dataset", required=True, help="directory of LR/HR pairs")
    ev.add_argument("--index", default="test.txt", help="index manifest inside --dataset (default test.txt)")
    ev.add_argument("--report", required=True, help="JSON report path (a CSV is written next to it)")
    ev.add_argument("--convention", choices=CONVENTIONS, default="rgb", help="PSNR/SSIM on RGB or the Y channel")
    ev.add_argument("--crop-border", type=int, default=0, help="pixels dropped from every side before scoring")
    ev.add_argument("--lpips-calibration", help="LPIPS calibration file (default $TRIPLETSR_LPIPS_CALIBRATION)")
    ev.add_argument("--skip-lpips", action="store_true", help="report PSNR and SSIM only")
    ev.add_argument("--quiet", action="store_true", help="hide progress bars")
    ev.set_defaults(func=cmd_eval)

    qa = sub.add_parser("qa-train", help="train the quality-assessment network")
    qa.add_argument("--manifest", required=True, help="CSV with reference_path,distorted_path,mos")
    qa.add_argument("--out", required=True, help="output parameter file")
    qa.add_argument("--seed", type=int, help="seed for splits and training (drawn and printed if absent)")
    qa.add_argument("--kadid-root", help="KADID-10K directory; its manifest is written to --manifest first")
    qa.add_argument("--epochs", type=int, default=10, help="training epochs (default 10)")
    qa.add_argument("--batch-size", type=int, default=8, help="batch size (default 8)")
    qa.add_argument("--crop-size", type=int, default=192, help="training crop side, 0 for full images")
    qa.add_argument("--learning-rate", type=float, default=1e-4, help="Adam learning rate (default 1e-4)")
    qa.set_defaults(func=cmd_qa_train)

    cmp_ = sub.add_parser("compare-degradation", help="compare a true LR patch with bicubic-downsampled HR")
    cmp_.add_argument("--hr", required=True, help="HR image")
    cmp_.add_argument("--lr", required=True, help="true LR image")
    cmp_.add_argument("--out", required=True, help="output PNG plot")
    cmp_.add_argument("--patch", required=True, type=_patch, help="LR patch x,y,w,h")
    cmp_.add_argument("--scale", type=int, default=4, help="HR/LR scale (default 4)")
    cmp_.set_defaults(func=cmd_compare_degradation)

    abl = sub.add_parser("ablation", help="train loss variants and compare them")
    abl.add_argument("--config", required=True, help="INI run config shared by all variants")
    abl.add_argument("--data-root", help="directory of LR/HR pairs (default $SRTGAN_DATA_ROOT)")
    abl.add_argument("--out-dir", required=True, help="one sub-directory per variant plus ablation.csv")
    abl.add_argument("--variants", default="triplet,vanilla,no_qa", help=f"comma list from {list(VARIANTS)}")
    abl.add_argument("--seed", type=int, help="seed shared by all variants")
    abl.add_argument("--total-steps", type=int, help="override training.total_steps")
    abl.add_argument("--lpips-calibration", help="LPIPS calibration file")
    abl.add_argument("--skip-lpips", action="store_true", help="compare PSNR and SSIM only")
    abl.add_argument("--quiet", action="store_true", help="hide progress bars")
    abl.set_defaults(func=cmd_ablation)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one command.

    Returns:
        int: 0 on success, 1 on a runtime failure, 2 on a usage or configuration error.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    sr_config = SRConfig()
    try:
        sr_config.validate()
        setup_logging(sr_config)
    except ConfigurationError as e:
        _error(str(e))
        return EXIT_USAGE

    command: Callable[[argparse.Namespace, SRConfig], int] = args.func
    try:
        return command(args, sr_config)
    except (ConfigurationError, ValidationError) as e:
        _error(str(e))
        return EXIT_USAGE
    except DatasetError as e:
        _error(str(e))
        return EXIT_USAGE if e.rows else EXIT_FAILURE
    except SRError as e:
        _error(str(e))
        return EXIT_FAILURE
    except Exception as e:
        _error(f"Unexpected error: {e}")
        logging.exception("Unexpected error")
        return EXIT_FAILURE
