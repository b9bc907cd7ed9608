"""End-to-end orchestration and run-directory persistence.

Run directory layout:

    config.json               exact snapshot of the configuration
    guides/                   composited guides and updated targets (PNG)
    masks/                    every named mask per viewpoint (PNG)
    semantics/                aligned semantic maps for scoring (PNG)
    stage1/ stage2/ stage3/   outputs, losses.csv, state.json + state.arrays
    final.png                 face-view result (after optional paste-back)
    final_keypoints.txt       face keypoints carried through the pipeline
    record.json               warnings and stage summaries
    timing.json               wall-clock timings (excluded from determinism)
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .alignment import AlignedImage, PoseAligner
from .arrayio import load_arrays, save_arrays
from .config import RunConfig, load_config, save_config, serialize_config
from .errors import CanvasError, InputError, SalonWarning
from .evaluation import (
    classify_scenario,
    face_shape_rmse,
    hair_region_metrics,
    scenario_config_id,
    summarize_by_scenario,
    write_metric_rows,
    yaw_from_keypoints,
)
from .generator import load_backend
from .guide import GuidePair, build_guide_pair
from .images import from_tensor, load_image, save_image, save_mask
from .latent import LrSchedule, estimate_mean_latent
from .optimize import (
    LatentState,
    SharingConfig,
    StageResult,
    finalize,
    run_stage1,
    run_stage2,
    run_stage3,
    update_targets,
)
from .perceptual import PyramidExtractor
from .semantics import (
    MaskSet,
    build_mraw,
    load_keypoints,
    load_semantic_map,
    save_keypoints,
    save_semantic_map,
)

MANIFEST_COLUMNS = (
    "face_image",
    "hair_image",
    "face_semantics",
    "hair_semantics",
    "face_keypoints",
    "hair_keypoints",
)


@dataclass
class RunRecord:
    config: RunConfig
    run_dir: Path
    warnings: list[str]
    stages: dict
    final_image: np.ndarray
    final_keypoints: np.ndarray
    timings: dict


def resolve_run_dir(output_dir: str | None) -> Path:
    """Relative output directories live under $SALON_RUN_DIR when it is set."""
    if not output_dir:
        raise InputError("an output directory is required (config.output_dir)")
    path = Path(output_dir)
    root = os.environ.get("SALON_RUN_DIR")
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _load_inputs(config: RunConfig):
    paths = config.input_paths()
    missing = [k for k, v in paths.items() if not v]
    if missing:
        raise InputError(f"missing input paths in config: {missing}")
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
    return face, hair


def _save_mask_set(masks: MaskSet, view: str, mask_dir: Path) -> None:
    named = {
        "m_f": masks.m_f,
        "m_h": masks.m_h,
        "m_bg": masks.m_bg,
        "m_roni_f": masks.m_roni_f,
        "m_roni_h": masks.m_roni_h,
        "m_out": masks.m_out,
        "m_raw": build_mraw(masks, view),
    }
    for name, grid in named.items():
        save_mask(grid, mask_dir / f"{view}_{name}.png")


def _persist_guides(guides: GuidePair, run_dir: Path, prefix: str = "guide") -> None:
    for view in ("face", "hair"):
        gv = guides.view(view)
        save_image(gv.guide, run_dir / "guides" / f"{prefix}_{view}.png")
        if gv.m_c is not None:
            save_mask(gv.m_c, run_dir / "masks" / f"{view}_m_c.png")


def _write_trace(trace: list[dict], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if not trace:
            return
        writer = csv.DictWriter(fh, fieldnames=list(trace[0].keys()))
        writer.writeheader()
        for row in trace:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _state_arrays(state: LatentState) -> dict[str, np.ndarray]:
    arrays = {}
    for name in ("w_face", "w_hair", "head_face", "head_hair", "tail_shared"):
        t = getattr(state, name)
        if t is not None:
            arrays[name] = t.detach().cpu().numpy()
    for i, n in enumerate(state.noise_face):
        arrays[f"noise_face_{i}"] = n.detach().cpu().numpy()
    for i, n in enumerate(state.noise_hair):
        arrays[f"noise_hair_{i}"] = n.detach().cpu().numpy()
    return arrays


def save_stage_state(stage_dir: Path, state: LatentState) -> None:
    stage_dir.mkdir(parents=True, exist_ok=True)
    save_arrays(stage_dir / "state.arrays", _state_arrays(state))
    meta = {
        "stage": state.stage,
        "layer_count": state.layer_count,
        "noise_count": len(state.noise_face),
        "sharing": dataclasses.asdict(state.sharing),
    }
    # state.json is written last: its presence marks the stage as complete.
    (stage_dir / "state.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def load_stage_state(stage_dir: Path, dtype) -> LatentState:
    meta = json.loads((stage_dir / "state.json").read_text())
    arrays = load_arrays(stage_dir / "state.arrays")

    def tensor(name):
        if name not in arrays:
            return None
        return torch.from_numpy(arrays[name]).to(dtype)

    return LatentState(
        stage=int(meta["stage"]),
        layer_count=int(meta["layer_count"]),
        sharing=SharingConfig(**meta["sharing"]),
        noise_face=[tensor(f"noise_face_{i}") for i in range(meta["noise_count"])],
        noise_hair=[tensor(f"noise_hair_{i}") for i in range(meta["noise_count"])],
        w_face=tensor("w_face"),
        w_hair=tensor("w_hair"),
        head_face=tensor("head_face"),
        head_hair=tensor("head_hair"),
        tail_shared=tensor("tail_shared"),
    )


def _stage_complete(stage_dir: Path) -> bool:
    return (stage_dir / "state.json").is_file()


def _render_result(backend, state: LatentState) -> StageResult:
    return StageResult(
        o_face=backend.synthesize(state.wplus("face"), state.noise("face")).detach(),
        o_hair=backend.synthesize(state.wplus("hair"), state.noise("hair")).detach(),
        state=state,
        trace=[],
    )


def _persist_stage(stage_dir: Path, result: StageResult) -> None:
    save_image(np.clip(from_tensor(result.o_face), 0, 1), stage_dir / "output_face.png")
    save_image(np.clip(from_tensor(result.o_hair), 0, 1), stage_dir / "output_hair.png")
    _write_trace(result.trace, stage_dir / "losses.csv")
    save_stage_state(stage_dir, result.state)


def _stage_summary(result: StageResult, resumed: bool) -> dict:
    summary = {"iterations": len(result.trace), "resumed": resumed}
    if result.trace:
        summary["final_total"] = result.trace[-1]["total"]
    return summary


def run_transfer(
    config: RunConfig,
    resume: bool = False,
    segmenter=None,
    extractor=None,
) -> RunRecord:
    """Execute align, guide, three optimization stages, and finalize."""
    run_dir = resolve_run_dir(config.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    config_path = run_dir / "config.json"
    if resume and config_path.is_file():
        previous = load_config(config_path)
        if previous != config:
            raise InputError(
                f"cannot resume: {config_path} differs from the requested configuration"
            )
    save_config(config, config_path)

    extractor = extractor or PyramidExtractor()
    timings: dict[str, float] = {}
    stages: dict[str, dict] = {}

    face, hair = _load_inputs(config)
    backend = load_backend(config.backend.kind, **config.backend.options())
    res = backend.output_resolution
    if face.resolution != (res, res) or hair.resolution != (res, res):
        raise CanvasError(
            f"inputs must match the backend resolution {res}, got "
            f"{face.resolution} and {hair.resolution}"
        )

    captured: list[str] = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")

        t0 = time.perf_counter()
        guides = build_guide_pair(
            face.pixels, face.sem, face.kp, hair.pixels, hair.sem, hair.kp, PoseAligner()
        )
        _persist_guides(guides, run_dir)
        for view in ("face", "hair"):
            gv = guides.view(view)
            _save_mask_set(gv.masks, view, run_dir / "masks")
            save_semantic_map(gv.hair.sem, run_dir / "semantics" / f"hair_sem_on_{view}.png")
            save_semantic_map(gv.face.sem, run_dir / "semantics" / f"face_sem_on_{view}.png")
        timings["guide"] = time.perf_counter() - t0

        w0 = estimate_mean_latent(backend, config.mean_latent_samples, config.seeds.mean_latent)

        sched = config.schedule
        iters1, iters2, iters3 = config.iterations

        t0 = time.perf_counter()
        stage1_dir = run_dir / "stage1"
        if resume and _stage_complete(stage1_dir):
            stage1 = _render_result(backend, load_stage_state(stage1_dir, backend.dtype))
            stages["stage1"] = {"iterations": iters1, "resumed": True}
        else:
            stage1 = run_stage1(
                guides,
                backend,
                config.weights_stage1,
                LrSchedule(iters1, sched.peak, sched.ramp_up_frac, sched.ramp_down_frac),
                w0,
                iters=iters1,
                sharing=config.sharing,
                noise_seed=config.seeds.noise,
                alpha_seed=config.seeds.alpha,
                extractor=extractor,
            )
            _persist_stage(stage1_dir, stage1)
            stages["stage1"] = _stage_summary(stage1, resumed=False)
        timings["stage1"] = time.perf_counter() - t0

        new_guides = update_targets(guides, stage1, segmenter=segmenter)
        _persist_guides(new_guides, run_dir, prefix="new_guide")

        t0 = time.perf_counter()
        stage2_dir = run_dir / "stage2"
        if resume and _stage_complete(stage2_dir):
            stage2 = _render_result(backend, load_stage_state(stage2_dir, backend.dtype))
            stages["stage2"] = {"iterations": iters2, "resumed": True}
        else:
            stage2 = run_stage2(
                new_guides,
                stage1.state,
                backend,
                config.weights_stage2,
                LrSchedule(iters2, sched.peak, sched.ramp_up_frac, sched.ramp_down_frac),
                iters=iters2,
                extractor=extractor,
            )
            _persist_stage(stage2_dir, stage2)
            stages["stage2"] = _stage_summary(stage2, resumed=False)
        timings["stage2"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        stage3_dir = run_dir / "stage3"
        can_reload = hasattr(type(backend), "load_checkpoint")
        if resume and can_reload and _stage_complete(stage3_dir) and (stage3_dir / "weights.arrays").is_file():
            backend = type(backend).load_checkpoint(stage3_dir / "weights.arrays", dtype=backend.dtype)
            stage3 = _render_result(backend, load_stage_state(stage3_dir, backend.dtype))
            stages["stage3"] = {"iterations": iters3, "resumed": True}
        else:
            stage3 = run_stage3(
                new_guides,
                stage2.state,
                backend,
                iters=iters3,
                alpha_reg=config.tuning.alpha_reg,
                lambda_reg=config.tuning.lambda_reg,
                lr=config.tuning.learning_rate,
                reg_seed=config.seeds.regularizer,
                extractor=extractor,
            )
            _persist_stage(stage3_dir, stage3)
            if hasattr(backend, "save_checkpoint"):
                backend.save_checkpoint(stage3_dir / "weights.arrays")
            stages["stage3"] = _stage_summary(stage3, resumed=False)
        timings["stage3"] = time.perf_counter() - t0

        final = finalize(stage3, face, guides.masks_face, paste_back=config.paste_back)
        save_image(final, run_dir / "final.png")
        save_keypoints(face.kp, run_dir / "final_keypoints.txt")

        for w in caught:
            if issubclass(w.category, SalonWarning):
                captured.append(str(w.message))
            else:
                warnings.warn_explicit(w.message, w.category, w.filename, w.lineno)

    record = RunRecord(
        config=config,
        run_dir=run_dir,
        warnings=captured,
        stages=stages,
        final_image=final,
        final_keypoints=face.kp,
        timings=timings,
    )
    (run_dir / "record.json").write_text(
        json.dumps(
            {
                "schema_version": config.schema_version,
                "resolution": res,
                "warnings": captured,
                "stages": stages,
                "final_image": "final.png",
                "final_keypoints": "final_keypoints.txt",
                "paste_back": config.paste_back,
            },
            sort_keys=True,
            indent=2,
        )
        + "\n"
    )
    (run_dir / "timing.json").write_text(json.dumps(timings, sort_keys=True, indent=2) + "\n")
    return record


def score_images(
    face_img,
    face_sem,
    face_kp,
    hair_img,
    hair_sem,
    hair_kp,
    output_img,
    output_kp=None,
    extractor=None,
) -> dict:
    """Hair-reconstruction metrics plus the scenario flags for one pair."""
    extractor = extractor or PyramidExtractor()
    hair_native = AlignedImage(hair_img, hair_sem, hair_kp)
    hair_on_face = PoseAligner().align(hair_native, face_kp)

    from .semantics import build_mask_set  # local import to avoid cycle noise

    masks = build_mask_set(face_sem, hair_on_face.sem, face_kp, "face")
    report = hair_region_metrics(output_img, face_img, masks.m_h, extractor)
    rmse = face_shape_rmse(face_kp, output_kp) if output_kp is not None else math.nan

    yaw_f = yaw_from_keypoints(face_kp)
    yaw_h = yaw_from_keypoints(hair_kp)
    label = classify_scenario(face_sem, hair_on_face.sem, face_kp, hair_on_face.kp, yaw_f, yaw_h)
    config_id = scenario_config_id(label)
    return {
        "psnr": report.psnr,
        "ssim": report.ssim,
        "lpips_like": report.lpips_like,
        "face_rmse": rmse,
        "yaw_face": yaw_f,
        "yaw_hair": yaw_h,
        "pose_band": label.pose_band,
        "needs_face_inpaint": label.needs_face_inpaint,
        "needs_bg_inpaint": label.needs_bg_inpaint,
        "has_hat": label.has_hat,
        "skipped_small_hair": label.skipped_small_hair,
        "config": config_id if config_id is not None else "other",
    }


def read_manifest(path, required=MANIFEST_COLUMNS) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"manifest file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for i, row in enumerate(rows):
        missing = [c for c in required if not row.get(c)]
        if missing:
            raise InputError(f"manifest row {i} is missing columns {missing}")
    return rows


def _batch_one(args):
    config_dict, resume = args
    from .config import config_from_dict

    config = config_from_dict(config_dict)
    record = run_transfer(config, resume=resume)
    face, hair = _load_inputs(config)
    return score_images(
        face.pixels,
        face.sem,
        face.kp,
        hair.pixels,
        hair.sem,
        hair.kp,
        record.final_image,
        output_kp=record.final_keypoints,
    )


def run_batch(
    manifest_path,
    shared_config: RunConfig,
    output_root,
    jobs: int = 1,
    resume: bool = False,
) -> dict:
    """Run every manifest pair, score it, and write the breakdown tables.

    Row failures are recorded and the batch continues.
    """
    from .config import config_to_dict

    output_root = resolve_run_dir(str(output_root))
    output_root.mkdir(parents=True, exist_ok=True)
    rows = read_manifest(manifest_path)

    tasks = []
    names = []
    for i, row in enumerate(rows):
        name = row.get("name") or f"pair{i:04d}"
        names.append(name)
        config = dataclasses.replace(
            shared_config,
            face_image=row["face_image"],
            hair_image=row["hair_image"],
            face_semantics=row["face_semantics"],
            hair_semantics=row["hair_semantics"],
            face_keypoints=row["face_keypoints"],
            hair_keypoints=row["hair_keypoints"],
            output_dir=str(output_root / name),
        )
        tasks.append((config_to_dict(config), resume))

    results: list[dict] = []
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_batch_one, t) for t in tasks]
            for name, fut in zip(names, futures):
                try:
                    scored = fut.result()
                    results.append({"name": name, "status": "ok", **scored})
                except Exception as exc:  # noqa: BLE001 - batch isolation boundary
                    results.append({"name": name, "status": "error", "error": str(exc)})
    else:
        for name, task in zip(names, tasks):
            try:
                scored = _batch_one(task)
                results.append({"name": name, "status": "ok", **scored})
            except Exception as exc:  # noqa: BLE001 - batch isolation boundary
                results.append({"name": name, "status": "error", "error": str(exc)})

    ok_rows = [r for r in results if r["status"] == "ok"]
    write_metric_rows(output_root / "metrics.csv", results)
    write_metric_rows(output_root / "summary.csv", summarize_by_scenario(ok_rows))
    return {
        "total": len(results),
        "failures": len(results) - len(ok_rows),
        "rows": results,
        "summary": summarize_by_scenario(ok_rows),
    }


EVAL_COLUMNS = MANIFEST_COLUMNS + ("output_image",)


def score_manifest(manifest_path, metrics_out, summary_out, extractor=None) -> dict:
    """Score already-produced outputs listed in a manifest CSV."""
    rows = read_manifest(manifest_path, required=EVAL_COLUMNS)
    extractor = extractor or PyramidExtractor()
    results = []
    for i, row in enumerate(rows):
        name = row.get("name") or f"pair{i:04d}"
        try:
            face_img = load_image(row["face_image"])
            hair_img = load_image(row["hair_image"])
            output_img = load_image(row["output_image"])
            face_sem = load_semantic_map(row["face_semantics"])
            hair_sem = load_semantic_map(row["hair_semantics"])
            face_kp = load_keypoints(row["face_keypoints"])
            hair_kp = load_keypoints(row["hair_keypoints"])
            output_kp = (
                load_keypoints(row["output_keypoints"]) if row.get("output_keypoints") else None
            )
            scored = score_images(
                face_img,
                face_sem,
                face_kp,
                hair_img,
                hair_sem,
                hair_kp,
                output_img,
                output_kp=output_kp,
                extractor=extractor,
            )
            results.append({"name": name, "status": "ok", **scored})
        except Exception as exc:  # noqa: BLE001 - batch isolation boundary
            results.append({"name": name, "status": "error", "error": str(exc)})

    ok_rows = [r for r in results if r["status"] == "ok"]
    write_metric_rows(metrics_out, results)
    write_metric_rows(summary_out, summarize_by_scenario(ok_rows))
    return {"total": len(results), "failures": len(results) - len(ok_rows), "rows": results}
