"""Command-line front door: synchronous runs, dataset scoring, and the
job service.

Exit codes: 0 success, 2 input/validation problems, 3 pipeline failure.
"""

import json
import os
import sys
from typing import Optional

import click
import numpy as np
from PIL import Image

from .backbone import BackboneProfile, make_stub_backbone
from .evaluation import evaluate_task, load_cases
from .losses import GuidanceWeights
from .pipeline import TASKS, SamplingSchedule, run_application

EXIT_VALIDATION = 2
EXIT_PIPELINE = 3


def _load_rgb(path: str) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"))


def _load_mask(path: str) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    return np.where(arr >= 128, 255, 0).astype(np.uint8)


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group()
def main():
    """Text-image manipulation toolkit."""


@main.command()
@click.option("--task", type=click.Choice(TASKS), default="editing",
              show_default=True)
@click.option("--image", "image_path", required=True, type=click.Path())
@click.option("--mask", "mask_path", required=True, type=click.Path())
@click.option("--text", "target_text", default=None,
              help="Text to render (all tasks except removal).")
@click.option("--source-text", default=None,
              help="Text currently in the masked region; enables mask shrinking.")
@click.option("--ref", "ref_path", type=click.Path(), default=None,
              help="Style reference image (style_* tasks).")
@click.option("--ref-mask", "ref_mask_path", type=click.Path(), default=None)
@click.option("--removal-mask", "removal_mask_path", type=click.Path(), default=None,
              help="Separate region to erase (repositioning/rescaling).")
@click.option("--seed", default=0, show_default=True)
@click.option("--out-dir", default="out", show_default=True)
@click.option("--content-weight", default=5.0, show_default=True)
@click.option("--style-weight", default=10.0, show_default=True)
@click.option("--focal-gamma", default=2.0, show_default=True)
@click.option("--steps", default=20, show_default=True)
@click.option("--profile", "profile_path", type=click.Path(), default=None,
              help="Backbone profile json; defaults to the built-in stub profile.")
@click.option("--backbone-seed", default=0, show_default=True)
def run(task, image_path, mask_path, target_text, source_text, ref_path,
        ref_mask_path, removal_mask_path, seed, out_dir, content_weight,
        style_weight, focal_gamma, steps, profile_path, backbone_seed):
    """Run one edit synchronously and write its artifacts."""
    try:
        image = _load_rgb(image_path)
        mask = _load_mask(mask_path)
        ref = _load_rgb(ref_path) if ref_path else None
        ref_mask = _load_mask(ref_mask_path) if ref_mask_path else None
        removal_mask = _load_mask(removal_mask_path) if removal_mask_path else None
        profile = BackboneProfile.from_file(profile_path) if profile_path else None
    except (OSError, ValueError, KeyError) as exc:
        _fail(EXIT_VALIDATION, str(exc))

    session = make_stub_backbone(seed=backbone_seed, profile=profile)
    weights = GuidanceWeights(content=content_weight, style=style_weight,
                              focal_gamma=focal_gamma)
    try:
        schedule = SamplingSchedule(total_steps=steps)
        result = run_application(
            task, image, mask, session,
            target_text=target_text, source_text=source_text,
            removal_pixel_mask=removal_mask,
            reference_image=ref, reference_pixel_mask=ref_mask,
            weights=weights, schedule=schedule, seed=seed)
    except ValueError as exc:
        _fail(EXIT_VALIDATION, str(exc))
    except Exception as exc:  # noqa: BLE001 - pipeline boundary
        _fail(EXIT_PIPELINE, f"{type(exc).__name__}: {exc}")

    os.makedirs(out_dir, exist_ok=True)
    for name, array in result.artifacts.items():
        path = os.path.join(out_dir, f"{name}.png")
        Image.fromarray(array).save(path)
        click.echo(f"{name}: {path}")
    meta_path = os.path.join(out_dir, "metadata.json")
    with open(meta_path, "w") as fh:
        json.dump(result.metadata, fh, indent=2, default=float)
    click.echo(f"metadata: {meta_path}")


@main.command(name="eval")
@click.option("--dataset", "dataset_dir", required=True, type=click.Path())
@click.option("--outputs", "outputs_dir", required=True, type=click.Path())
@click.option("--task", type=click.Choice(("removal", "editing")),
              default="editing", show_default=True)
@click.option("--report-dir", default=".", show_default=True)
def eval_cmd(dataset_dir, outputs_dir, task, report_dir):
    """Score a directory of outputs against a benchmark dataset.

    Outputs are matched to cases by name: <outputs>/<case>.png.
    """
    try:
        cases = load_cases(dataset_dir)
        outputs = []
        for case in cases:
            path = os.path.join(outputs_dir, f"{case.name}.png")
            if not os.path.exists(path):
                raise FileNotFoundError(f"missing output for case {case.name}")
            outputs.append(_load_rgb(path))
        report = evaluate_task(cases, outputs, task)
    except (OSError, ValueError) as exc:
        _fail(EXIT_VALIDATION, str(exc))

    os.makedirs(report_dir, exist_ok=True)
    jpath = os.path.join(report_dir, "report.json")
    tpath = os.path.join(report_dir, "report.txt")
    report.write_json(jpath)
    report.write_table(tpath)
    with open(tpath) as fh:
        click.echo(fh.read().rstrip())
    click.echo(f"report: {jpath}")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8703, show_default=True)
@click.option("--workspace", default=None,
              help="Overrides config and TEXTSMITH_WORKSPACE.")
@click.option("--config", "config_path", type=click.Path(), default=None)
def serve(host, port, workspace, config_path):
    """Start the local job service."""
    import uvicorn

    from .service import ServiceConfig, create_app

    try:
        config = (ServiceConfig.from_file(config_path)
                  if config_path else ServiceConfig())
        if workspace:
            config.workspace = workspace
    except (OSError, ValueError, TypeError) as exc:
        _fail(EXIT_VALIDATION, str(exc))
    uvicorn.run(create_app(config), host=host, port=port)


if __name__ == "__main__":
    main()
