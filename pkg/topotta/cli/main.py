"""
Main CLI entry point for the TopoTTA desk toolkit.
"""
import functools
import json
import logging
import os
import sys

import click
from texttable import Texttable

from topotta import __version__
from topotta.adapt.adapter import AdaptState, teacher_pseudolabel
from topotta.adapt.stream import ABLATION_VARIANTS, run_ablation, run_stream
from topotta.config import RunConfig, ensure_output_dir, load_config, parse_overrides, save_config
from topotta.errors import DataIOError, NumericalError, TopoTTAError
from topotta.hardgen.topohg import HARD_WEIGHT, build_plan
from topotta.io.files import (
    JsonLinesWriter,
    list_images,
    read_mask,
    read_pairs,
    read_pgm,
    read_stream,
    write_blob,
    write_mask,
    write_pair,
    write_pgm,
    write_probability_map,
    TensorBlob,
)
from topotta.metrics.topology import (
    aggregate,
    betti_convention,
    betti_numbers,
    evaluate,
    resize_label,
    resize_nearest,
)
from topotta.model.checkpoint import check_meta, load_checkpoint, save_checkpoint
from topotta.model.segnet import ModelMeta, SegModel
from topotta.model.train import train_source
from topotta.synth.generator import domain_preset, generate

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "model.ckpt"


def run_options(command):
    """Attach the options every command shares."""

    @click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Flat YAML configuration file.")
    @click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override one configuration key.")
    @click.option("--seed", type=int, default=None, help="Seed of every random draw.")
    @click.option("--verbose", "-v", is_flag=True, help="Log debug messages.")
    @functools.wraps(command)
    def wrapper(config_path, overrides, seed, verbose, **kwargs):
        logging.basicConfig(
            level=logging.DEBUG if verbose else logging.INFO,
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        values = parse_overrides(overrides)
        if seed is not None:
            values["seed"] = seed
        cfg = load_config(config_path, values)
        return command(cfg, **kwargs)

    return wrapper


def _synthetic(cfg: RunConfig, domain: str, count: int, seed: int):
    spec = domain_preset(domain, cfg.model.image_size)
    for index, (image, label) in enumerate(generate(spec, count, seed, cfg.model.levels)):
        yield f"{index:04d}.pgm", image, label


def _target_stream(cfg: RunConfig, data):
    if data:
        return list(read_stream(data))
    # test images use a seed disjoint from the training draw
    return list(_synthetic(cfg, cfg.target_domain, cfg.test_images, cfg.seed + 1))


def _load_source(cfg: RunConfig, path):
    checkpoint = load_checkpoint(path)
    check_meta(checkpoint, cfg.model.levels, cfg.model.base_channels)
    logger.info("loaded checkpoint %s (%d levels, %d base channels)", path, cfg.model.levels, cfg.model.base_channels)
    return checkpoint


def _fmt(value, digits=4):
    if value is None:
        return "/"
    if isinstance(value, float):
        return f"{value:.{digits}f}"
    return str(value)


def render_reports(reports, patch=None) -> str:
    """Per-image metric table plus an aggregate footer."""
    table = Texttable()
    table.set_deco(Texttable.HEADER)
    table.set_cols_align(["l", "r", "r", "r", "c", "c"])
    table.set_cols_dtype(["t", "t", "t", "t", "t", "t"])
    table.add_row(["Image", "Dice", "clDice", "Betti err", "Betti pred", "Betti gt"])
    for r in reports:
        table.add_row([
            r.name, _fmt(r.dice), _fmt(r.cldice), _fmt(r.betti_error),
            f"{r.betti_pred[0]},{r.betti_pred[1]}", f"{r.betti_gt[0]},{r.betti_gt[1]}",
        ])
    summary = aggregate(reports)
    lines = [
        f"Betti convention: {betti_convention(patch)}",
        table.draw(),
        "",
        f"images: {summary['count']}  mean Dice: {_fmt(summary['mean_dice'])}  "
        f"mean clDice: {_fmt(summary['mean_cldice'])} (undefined: {summary['cldice_undefined']})  "
        f"mean Betti error: {_fmt(summary['mean_betti_error'])}",
    ]
    return "\n".join(lines)


def _write_text(path, text):
    try:
        with open(path, "w") as f:
            f.write(text + "\n")
    except OSError as e:
        raise DataIOError(f"cannot write file ({e.strerror})", path)


@click.group()
@click.version_option(__version__, prog_name="topotta")
def cli():
    """TopoTTA desk toolkit - test-time adaptation for tubular segmentation."""


@cli.command("synth")
@click.option("--domain", type=click.Choice(["source", "shifted"]), default="source", show_default=True)
@click.option("--count", type=int, default=None, help="Number of images (default: train_images).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@run_options
def synth_command(cfg, domain, count, out_dir):
    """Write synthetic image/label pairs as PGM files."""
    count = cfg.train_images if count is None else count
    for name, image, label in _synthetic(cfg, domain, count, cfg.seed):
        write_pair(out_dir, name, image, label)
    save_config(cfg, out_dir)
    click.echo(f"Wrote {count} {domain} pairs to {out_dir}")


@cli.command("train-source")
@click.option("--data", type=click.Path(), default=None, help="Directory with images/ and labels/.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--progress/--no-progress", default=True)
@run_options
def train_source_command(cfg, data, out_dir, progress):
    """Train the source model and save the best-validation checkpoint."""
    if data:
        dataset = [(image, label) for _, image, label in read_pairs(data)]
    else:
        dataset = [(image, label) for _, image, label in _synthetic(cfg, cfg.source_domain, cfg.train_images, cfg.seed)]
    ensure_output_dir(out_dir)
    save_config(cfg, out_dir)

    model = SegModel.create(ModelMeta(cfg.model.levels, cfg.model.base_channels), seed=cfg.seed)
    with JsonLinesWriter(os.path.join(out_dir, "train_log.jsonl")) as log:
        log.write({
            "event": "start",
            "images": len(dataset),
            "lr_source": cfg.train.lr_source,
            "batch_size": cfg.train.batch_size,
            "epochs": cfg.train.epochs,
            "seed": cfg.seed,
        })
        checkpoint = train_source(
            model, dataset, cfg.train, seed=cfg.seed, progress=progress,
            on_epoch=lambda record: log.write({"event": "epoch", **record}),
        )
        log.write({"event": "best", **checkpoint.info})
    path = os.path.join(out_dir, CHECKPOINT_FILE)
    save_checkpoint(checkpoint, path)
    click.echo(
        f"Best validation Dice {checkpoint.info['val_dice']:.4f} at epoch "
        f"{checkpoint.info['best_epoch']}; checkpoint saved to {path}"
    )


@cli.command("adapt")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(dir_okay=False), required=True)
@click.option("--data", type=click.Path(), default=None, help="Target images (and optional labels).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--no-adapt", is_flag=True, help="Source-only baseline.")
@click.option("--progress/--no-progress", default=True)
@run_options
def adapt_command(cfg, checkpoint_path, data, out_dir, no_adapt, progress):
    """Adapt to a target stream image by image and write masks and a report."""
    checkpoint = _load_source(cfg, checkpoint_path)
    stream = _target_stream(cfg, data)
    for sub in ("masks", "probs"):
        ensure_output_dir(os.path.join(out_dir, sub))
    save_config(cfg, out_dir)

    with JsonLinesWriter(os.path.join(out_dir, "adapt_log.jsonl")) as log:
        result = run_stream(checkpoint, stream, cfg, no_adapt=no_adapt, progress=progress, on_sample=log.write)

    threshold = cfg.adapt.binarize_threshold
    for name, prob in result.predictions.items():
        stem = os.path.splitext(name)[0]
        write_mask(os.path.join(out_dir, "masks", name), prob > threshold)
        write_probability_map(os.path.join(out_dir, "probs", f"{stem}.tensor"), prob, source=name)

    if result.reports:
        report = render_reports(result.reports, cfg.betti_patch)
        _write_text(os.path.join(out_dir, "report.txt"), report)
        _write_text(os.path.join(out_dir, "report.json"), json.dumps(
            {"images": [r.to_dict() for r in result.reports], "aggregate": result.summary()}, indent=2
        ))
        click.echo(report)
    mode = "source-only" if no_adapt else "adapted"
    click.echo(f"Processed {len(stream)} images ({mode}); outputs in {out_dir}")


@cli.command("metrics")
@click.option("--pred", "pred_dir", type=click.Path(), required=True, help="Predicted masks (PGM).")
@click.option("--gt", "gt_dir", type=click.Path(), required=True, help="Ground-truth masks (PGM).")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None, help="Report file.")
@run_options
def metrics_command(cfg, pred_dir, gt_dir, out_path):
    """Score predicted masks against ground truth with the same file names."""
    reports = []
    for name in list_images(pred_dir):
        gt_path = os.path.join(gt_dir, name)
        if not os.path.isfile(gt_path):
            raise DataIOError("ground truth missing for prediction", gt_path)
        reports.append(evaluate(read_mask(os.path.join(pred_dir, name)), read_mask(gt_path), 0.5, cfg.betti_patch, name))
    report = render_reports(reports, cfg.betti_patch)
    if out_path:
        _write_text(out_path, report)
    click.echo(report)


@cli.command("generate-hard")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(dir_okay=False), required=True)
@click.option("--image", "image_path", type=click.Path(dir_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@run_options
def generate_hard_command(cfg, checkpoint_path, image_path, out_dir):
    """Build one pseudo-break hard sample and write its parts for inspection."""
    checkpoint = _load_source(cfg, checkpoint_path)
    image = read_pgm(image_path)
    state = AdaptState.from_checkpoint(checkpoint, cfg.adapt, cfg.seed)
    target = teacher_pseudolabel(state, image, cfg.adapt, state.rng)
    plan = build_plan(image, target, cfg.hg, state.rng)

    ensure_output_dir(os.path.join(out_dir, "patches"))
    save_config(cfg, out_dir)
    write_pgm(os.path.join(out_dir, "hard.pgm"), plan.hard_image)
    write_pgm(os.path.join(out_dir, "pseudolabel.pgm"), target)
    write_pgm(os.path.join(out_dir, "weights.pgm"), plan.weight_map / HARD_WEIGHT)
    write_blob(
        os.path.join(out_dir, "weights.tensor"),
        TensorBlob(kind="weight-map", groups={"map": {"weights": plan.weight_map}}, seed=cfg.seed),
    )
    for i, (before, after) in enumerate(plan.patches):
        write_pgm(os.path.join(out_dir, "patches", f"kp{i:03d}_before.pgm"), before)
        write_pgm(os.path.join(out_dir, "patches", f"kp{i:03d}_after.pgm"), after)
    summary = {
        **plan.summary(),
        "accepted": [list(k) for k in plan.keypoints],
        "fg_windows": [w.to_list() for w in plan.fg_windows],
        "bg_windows": [w.to_list() for w in plan.bg_windows],
    }
    _write_text(os.path.join(out_dir, "plan.json"), json.dumps(summary, indent=2))
    click.echo(
        f"{len(plan.keypoints)} of {plan.candidate_count} keypoints accepted; outputs in {out_dir}"
    )


@cli.command("resize-labels")
@click.option("--src", "src_dir", type=click.Path(), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--height", type=click.IntRange(min=1), required=True)
@click.option("--width", type=click.IntRange(min=1), default=None, help="Defaults to --height.")
@click.option("--method", type=click.Choice(["topology", "nearest"]), default="topology", show_default=True)
@run_options
def resize_labels_command(cfg, src_dir, out_dir, height, width, method):
    """Resize binary labels, keeping thin structures connected."""
    width = height if width is None else width
    resize = resize_label if method == "topology" else resize_nearest
    ensure_output_dir(out_dir)

    table = Texttable()
    table.set_deco(Texttable.HEADER)
    table.set_cols_dtype(["t", "i", "i"])
    table.add_row(["Label", "b0 before", "b0 after"])
    for name in list_images(src_dir):
        mask = read_mask(os.path.join(src_dir, name))
        resized = resize(mask, height, width)
        write_mask(os.path.join(out_dir, name), resized)
        table.add_row([name, betti_numbers(mask)[0], betti_numbers(resized)[0]])
    click.echo(table.draw())


@cli.command("ablate")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(dir_okay=False), required=True)
@click.option("--data", type=click.Path(), default=None, help="Labelled target images.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--variant", "variants", multiple=True, type=click.Choice(list(ABLATION_VARIANTS)),
              help="Variants to run (default: all).")
@click.option("--progress/--no-progress", default=True)
@run_options
def ablate_command(cfg, checkpoint_path, data, out_dir, variants, progress):
    """Compare adaptation variants on the same labelled stream."""
    checkpoint = _load_source(cfg, checkpoint_path)
    samples = [s for s in _target_stream(cfg, data) if s[2] is not None]
    if not samples:
        raise DataIOError("ablation needs labelled images", data or "synthetic stream")
    ensure_output_dir(os.path.join(out_dir, "ablation"))
    save_config(cfg, out_dir)

    summaries = run_ablation(checkpoint, samples, cfg, variants or None, progress=progress)
    table = Texttable()
    table.set_deco(Texttable.HEADER)
    table.set_cols_dtype(["t", "t", "t", "t", "t"])
    table.add_row(["Variant", "Dice", "clDice", "clDice undefined", "Betti err"])
    for name, summary in summaries:
        table.add_row([
            name, _fmt(summary["mean_dice"]), _fmt(summary["mean_cldice"]),
            _fmt(summary["cldice_undefined"]), _fmt(summary["mean_betti_error"]),
        ])
        _write_text(os.path.join(out_dir, "ablation", f"{name}.json"), json.dumps(summary, indent=2))
    text = f"Betti convention: {betti_convention(cfg.betti_patch)}\n{table.draw()}"
    _write_text(os.path.join(out_dir, "ablation.txt"), text)
    click.echo(text)


def main(argv=None):
    """Run the command line and translate failures into exit codes.

    Exit codes: 0 on success, 1 when a computation diverges, 2 on usage,
    configuration and I/O errors.
    """
    try:
        cli.main(args=argv, prog_name="topotta", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("Aborted!", err=True)
        sys.exit(1)
    except click.ClickException as e:
        e.show()
        sys.exit(2)
    except NumericalError as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(1)
    except TopoTTAError as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(2)
    sys.exit(0)


if __name__ == "__main__":
    main()
