"""Command-line interface.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 some batch
rows failed.  Flags override values from --config files; the environment
variable SALON_RUN_DIR sets the root for relative output directories.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

import click
import numpy as np

from .config import BackendConfig, RunConfig, load_config, save_config
from .errors import InputError, NumericalError, SalonError
from .evaluation import classify_scenario, scenario_config_id, yaw_from_keypoints
from .generator import load_backend
from .guide import build_guide_pair
from .images import save_image, save_mask
from .latent import estimate_mean_latent
from .pipeline import (
    MANIFEST_COLUMNS,
    _save_mask_set,
    resolve_run_dir,
    run_batch,
    run_transfer,
    score_manifest,
)
from .semantics import load_keypoints, load_semantic_map
from .alignment import AlignedImage, PoseAligner
from .images import load_image

EXIT_INPUT = 2
EXIT_NUMERICAL = 3
EXIT_PARTIAL = 4


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(fn):
    try:
        return fn()
    except InputError as exc:
        _fail(EXIT_INPUT, str(exc))
    except NumericalError as exc:
        _fail(EXIT_NUMERICAL, str(exc))
    except SalonError as exc:
        _fail(EXIT_INPUT, str(exc))


_INPUT_OPTIONS = (
    ("face_image", "--face-image"),
    ("hair_image", "--hair-image"),
    ("face_semantics", "--face-semantics"),
    ("hair_semantics", "--hair-semantics"),
    ("face_keypoints", "--face-keypoints"),
    ("hair_keypoints", "--hair-keypoints"),
)


def _input_options(fn):
    for name, flag in reversed(_INPUT_OPTIONS):
        fn = click.option(flag, name, type=str, default=None)(fn)
    return fn


def _backend_options(fn):
    fn = click.option("--backend-kind", type=str, default=None)(fn)
    fn = click.option("--backend-checkpoint", type=str, default=None)(fn)
    fn = click.option("--backend-resolution", type=int, default=None)(fn)
    fn = click.option("--backend-seed", type=int, default=None)(fn)
    return fn


def _merge_config(config_path, output, paste_back, iterations, kwargs) -> RunConfig:
    config = load_config(config_path) if config_path else RunConfig()
    overrides = {k: v for k, v in kwargs.items() if k in dict(_INPUT_OPTIONS) and v is not None}
    if output:
        overrides["output_dir"] = output
    if paste_back is not None:
        overrides["paste_back"] = paste_back
    if iterations:
        parts = [int(p) for p in iterations.split(",")]
        if len(parts) != 3:
            raise InputError("--iterations expects three comma-separated counts")
        overrides["iterations"] = tuple(parts)
    backend_over = {}
    for key, field in (
        ("backend_kind", "kind"),
        ("backend_checkpoint", "checkpoint"),
        ("backend_resolution", "resolution"),
        ("backend_seed", "seed"),
    ):
        if kwargs.get(key) is not None:
            backend_over[field] = kwargs[key]
    if backend_over:
        overrides["backend"] = dataclasses.replace(config.backend, **backend_over)
    return dataclasses.replace(config, **overrides)


@click.group()
def main():
    """Multi-view guided hairstyle transfer."""


@main.command()
@click.option("--config", "config_path", type=str, default=None, help="JSON config file")
@click.option("--output", type=str, default=None, help="Run directory")
@click.option("--resume", is_flag=True, default=False)
@click.option("--paste-back/--no-paste-back", default=None)
@click.option("--iterations", type=str, default=None, help="e.g. 1000,500,500")
@_backend_options
@_input_options
def transfer(config_path, output, resume, paste_back, iterations, **kwargs):
    """Run the full transfer pipeline for one face/hair pair."""

    def run():
        config = _merge_config(config_path, output, paste_back, iterations, kwargs)
        record = run_transfer(config, resume=resume)
        click.echo(f"run complete: {record.run_dir / 'final.png'}")
        for message in record.warnings:
            click.echo(f"note: {message}")

    _guarded(run)


@main.command()
@click.option("--manifest", type=str, required=True)
@click.option("--config", "config_path", type=str, default=None)
@click.option("--output-root", type=str, required=True)
@click.option("--jobs", type=int, default=1)
@click.option("--resume", is_flag=True, default=False)
def batch(manifest, config_path, output_root, jobs, resume):
    """Run and score every pair in a manifest CSV.

    Required columns: face_image, hair_image, face_semantics, hair_semantics,
    face_keypoints, hair_keypoints. Optional: name.
    """

    def run():
        shared = load_config(config_path) if config_path else RunConfig()
        summary = run_batch(manifest, shared, output_root, jobs=jobs, resume=resume)
        click.echo(
            f"batch complete: {summary['total'] - summary['failures']}/{summary['total']} ok"
        )
        return summary

    summary = _guarded(run)
    if summary and summary["failures"]:
        sys.exit(EXIT_PARTIAL)


@main.command("eval")
@click.option("--manifest", type=str, required=True)
@click.option("--metrics-out", type=str, required=True)
@click.option("--summary-out", type=str, required=True)
def eval_cmd(manifest, metrics_out, summary_out):
    """Score existing outputs (manifest additionally needs output_image)."""

    def run():
        return score_manifest(manifest, metrics_out, summary_out)

    summary = _guarded(run)
    if summary and summary["failures"]:
        sys.exit(EXIT_PARTIAL)


@main.command()
@click.option("--face-semantics", required=True, type=str)
@click.option("--hair-semantics", required=True, type=str)
@click.option("--face-keypoints", required=True, type=str)
@click.option("--hair-keypoints", required=True, type=str)
@click.option("--yaw-face", type=float, default=None, help="Override estimated yaw")
@click.option("--yaw-hair", type=float, default=None)
def classify(face_semantics, hair_semantics, face_keypoints, hair_keypoints, yaw_face, yaw_hair):
    """Print the difficulty-scenario flags for a pair as JSON."""

    def run():
        face_sem = load_semantic_map(face_semantics)
        hair_sem = load_semantic_map(hair_semantics)
        face_kp = load_keypoints(face_keypoints)
        hair_kp = load_keypoints(hair_keypoints)
        yf = yaw_face if yaw_face is not None else yaw_from_keypoints(face_kp)
        yh = yaw_hair if yaw_hair is not None else yaw_from_keypoints(hair_kp)
        label = classify_scenario(face_sem, hair_sem, face_kp, hair_kp, yf, yh)
        out = dataclasses.asdict(label)
        out["config"] = scenario_config_id(label) or "other"
        out["yaw_face"] = yf
        out["yaw_hair"] = yh
        click.echo(json.dumps(out, sort_keys=True, indent=2))

    _guarded(run)


@main.command()
@click.option("--output", type=str, required=True, help="Directory for guides and masks")
@_input_options
def guide(output, **kwargs):
    """Build and save the guide pair without optimizing (debugging aid)."""

    def run():
        paths = {k: kwargs.get(k) for k, _ in _INPUT_OPTIONS}
        missing = [k for k, v in paths.items() if not v]
        if missing:
            raise InputError(f"missing inputs: {missing}")
        face = AlignedImage(
            load_image(paths["face_image"]),
            load_semantic_map(paths["face_semantics"]),
            load_keypoints(paths["face_keypoints"]),
        )
        hair = AlignedImage(
            load_image(paths["hair_image"]),
            load_semantic_map(paths["hair_semantics"]),
            load_keypoints(paths["hair_keypoints"]),
        )
        guides = build_guide_pair(
            face.pixels, face.sem, face.kp, hair.pixels, hair.sem, hair.kp, PoseAligner()
        )
        out = resolve_run_dir(output)
        for view in ("face", "hair"):
            gv = guides.view(view)
            save_image(gv.guide, out / f"guide_{view}.png")
            _save_mask_set(gv.masks, view, out / "masks")
        click.echo(f"guides written to {out}")

    _guarded(run)


@main.command("mean-latent")
@click.option("--samples", type=int, default=10000)
@click.option("--seed", type=int, default=1)
@click.option("--output", type=str, required=True, help="Array file for the mean code")
@_backend_options
def mean_latent(samples, seed, output, **kwargs):
    """Estimate the mean latent of a backend's mapping."""

    def run():
        backend_cfg = BackendConfig(
            kind=kwargs.get("backend_kind") or "toy",
            checkpoint=kwargs.get("backend_checkpoint"),
            resolution=kwargs.get("backend_resolution") or 64,
            seed=kwargs.get("backend_seed") or 0,
        )
        backend = load_backend(backend_cfg.kind, **backend_cfg.options())
        w0 = estimate_mean_latent(backend, samples, seed)
        from .arrayio import save_arrays

        save_arrays(output, {"mean_latent": w0.numpy()})
        click.echo(f"mean latent saved to {output} (norm {float(np.linalg.norm(w0.numpy())):.4f})")

    _guarded(run)


if __name__ == "__main__":
    main()
