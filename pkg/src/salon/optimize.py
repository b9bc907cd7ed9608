"""Multi-view optimization stages.

Stage 1 fits a single 512-code per viewpoint (plus noise) to hallucinate the
regions the guides cannot show, with the late layer rows of both views tied
to a randomly interpolated blend of the two codes.  Stage 2 refines every
layer row separately, with the late rows stored once and shared bit-exactly
between views, against targets refreshed from the stage-1 renders.  Stage 3
freezes the latents and tunes the generator weights to recover the raw-copy
regions of the guides.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
import torch
from scipy import ndimage

from .alignment import AlignedImage
from .errors import FallbackWarning, NumericalError, SchemaError
from .generator import GeneratorBackend
from .guide import GuidePair
from .images import from_tensor, to_tensor
from .latent import LrSchedule, lr_at, random_noise, replicate
from .losses import (
    LossTerms,
    LossWeights,
    as_mask,
    global_mse32,
    initial_value_loss,
    latent_similarity,
    masked_perceptual,
    noise_regularization,
    objective,
    pti_loss,
    pti_regularizer,
    roi_emphasis_for,
)
from .perceptual import PyramidExtractor, blur_for_deprioritization
from .semantics import MaskSet, Region, build_mc, build_mraw, erode

VIEWS = ("face", "hair")

# Stage 2 deprioritizes the terms whose guide content was hallucinated by the
# cross-view warp: the hair term in the face view and the face term in the
# hair view are compared after blurring.
STAGE2_BLURRED_TERMS = {"face": ("h",), "hair": ("f",)}

ADAM_BETAS = (0.9, 0.999)

# Noise maps refine stochastic texture; they start near zero and learn at a
# fraction of the latent code's rate so image content settles into the code
# rather than being painted pixel by pixel into the noise.
NOISE_LR_SCALE = 0.01
NOISE_INIT_SCALE = 0.01


def initial_noise_pair(backend: GeneratorBackend, seed: int, scale: float = NOISE_INIT_SCALE):
    """The stage-1 starting noise for both views: seeded standard-normal maps
    scaled down (face view drawn first)."""
    g = torch.Generator().manual_seed(seed)
    face = [scale * n for n in random_noise(backend, g)]
    hair = [scale * n for n in random_noise(backend, g)]
    return face, hair


@dataclass(frozen=True)
class SharingConfig:
    """How the two viewpoints share latent information.

    Layer rows from ``shared_from`` up are identical across views: stage 1
    fills them with a per-iteration random blend of the two codes, stage 2
    stores them once.
    """

    shared_from: int = 4
    alpha_mode: str = "random_uniform"
    alpha_fixed: float = 0.5

    def __post_init__(self):
        if self.alpha_mode not in ("random_uniform", "fixed"):
            raise ValueError(f"unknown alpha_mode {self.alpha_mode!r}")
        if not 0.0 <= self.alpha_fixed <= 1.0:
            raise ValueError("alpha_fixed must lie in [0, 1]")

    def check(self, layer_count: int) -> None:
        if not 1 <= self.shared_from <= layer_count:
            raise SchemaError(
                f"shared_from={self.shared_from} outside [1, {layer_count}]"
            )


@dataclass
class LatentState:
    """Per-view latent codes and noise maps for one optimization stage.

    Stage 1 holds one 512-code per view.  Stages 2 and 3 hold per-view head
    rows plus a single shared tail tensor, so the shared rows of the two
    views are equal by construction, not by penalty.
    """

    stage: int
    layer_count: int
    sharing: SharingConfig
    noise_face: list[torch.Tensor]
    noise_hair: list[torch.Tensor]
    w_face: torch.Tensor | None = None
    w_hair: torch.Tensor | None = None
    head_face: torch.Tensor | None = None
    head_hair: torch.Tensor | None = None
    tail_shared: torch.Tensor | None = None

    def noise(self, view: str) -> list[torch.Tensor]:
        return self.noise_face if view == "face" else self.noise_hair

    def wplus(self, view: str) -> torch.Tensor:
        """The canonical full layer matrix for rendering this state."""
        if self.stage == 1:
            return assemble_wplus_stage1(self, view, 0.5)
        head = self.head_face if view == "face" else self.head_hair
        return torch.cat([head, self.tail_shared], dim=0)

    def detached(self) -> "LatentState":
        def det(x):
            return None if x is None else x.detach().clone()

        return LatentState(
            stage=self.stage,
            layer_count=self.layer_count,
            sharing=self.sharing,
            noise_face=[n.detach().clone() for n in self.noise_face],
            noise_hair=[n.detach().clone() for n in self.noise_hair],
            w_face=det(self.w_face),
            w_hair=det(self.w_hair),
            head_face=det(self.head_face),
            head_hair=det(self.head_hair),
            tail_shared=det(self.tail_shared),
        )


def assemble_wplus_stage1(state: LatentState, view: str, alpha: float) -> torch.Tensor:
    """Rows below the sharing boundary take the view's own code; rows from
    the boundary up take the blend alpha * w_face + (1 - alpha) * w_hair."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    split = state.sharing.shared_from
    own = state.w_face if view == "face" else state.w_hair
    shared = alpha * state.w_face + (1.0 - alpha) * state.w_hair
    rows = [own.unsqueeze(0).expand(split, -1)]
    if state.layer_count > split:
        rows.append(shared.unsqueeze(0).expand(state.layer_count - split, -1))
    return torch.cat(rows, dim=0)


@dataclass
class StageResult:
    o_face: torch.Tensor
    o_hair: torch.Tensor
    state: LatentState
    trace: list[dict]

    def output(self, view: str) -> torch.Tensor:
        return self.o_face if view == "face" else self.o_hair


class _ViewMasks:
    """Per-view ROI and pre-mask tensors, converted once per stage."""

    def __init__(self, masks: MaskSet, dtype):
        self.roi = {
            "f": as_mask(masks.m_f, dtype),
            "h": as_mask(masks.m_h, dtype),
            "bg": as_mask(masks.m_bg, dtype),
        }
        self.roni = {
            "f": as_mask(masks.m_roni_f, dtype),
            "h": as_mask(masks.m_roni_h, dtype),
            "bg": 1.0 - as_mask(masks.m_bg, dtype),
        }


def _perceptual_terms(output, guide_t, view_masks, weights, viewpoint, extractor, blurred_terms):
    values = {}
    for term in ("f", "h", "bg"):
        blur = blur_for_deprioritization if term in blurred_terms else None
        values[term] = masked_perceptual(
            output,
            guide_t,
            m_roi=view_masks.roi[term],
            m_roni=view_masks.roni[term],
            extractor=extractor,
            weight=roi_emphasis_for(weights, viewpoint, term),
            blur=blur,
        )
    return values


def _check_finite(total, iteration, trace):
    if not bool(torch.isfinite(total)):
        err = NumericalError(f"non-finite loss at iteration {iteration}")
        err.trace = trace
        raise err


def _f(value) -> float:
    return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)


def _trace_row(iteration, per_view_terms, sim, total, **extra):
    row = {"iter": iteration, **extra}
    for view, terms in per_view_terms.items():
        row[f"{view}_per_f"] = _f(terms.per_f)
        row[f"{view}_per_h"] = _f(terms.per_h)
        row[f"{view}_per_bg"] = _f(terms.per_bg)
        row[f"{view}_global"] = _f(terms.global_mse)
        row[f"{view}_initial"] = _f(terms.initial)
        row[f"{view}_noise"] = _f(terms.noise)
    row["sim"] = _f(sim)
    row["total"] = _f(total)
    return row


def run_stage1(
    guides: GuidePair,
    backend: GeneratorBackend,
    weights: LossWeights,
    schedule: LrSchedule,
    w0: torch.Tensor,
    iters: int = 1000,
    sharing: SharingConfig | None = None,
    noise_seed: int = 0,
    alpha_seed: int = 0,
    extractor=None,
    noise_lr_scale: float = NOISE_LR_SCALE,
) -> StageResult:
    """Project both guides into the generator's range from the mean latent."""
    sharing = sharing or SharingConfig()
    sharing.check(backend.layer_count)
    extractor = extractor or PyramidExtractor()
    dtype = backend.dtype
    w0 = w0.detach().to(dtype)

    alpha_g = torch.Generator().manual_seed(alpha_seed)

    noise_face, noise_hair = initial_noise_pair(backend, noise_seed)
    state = LatentState(
        stage=1,
        layer_count=backend.layer_count,
        sharing=sharing,
        noise_face=[n.requires_grad_() for n in noise_face],
        noise_hair=[n.requires_grad_() for n in noise_hair],
        w_face=w0.clone().requires_grad_(),
        w_hair=w0.clone().requires_grad_(),
    )

    guide_t = {v: to_tensor(guides.view(v).guide, dtype) for v in VIEWS}
    view_masks = {v: _ViewMasks(guides.view(v).masks, dtype) for v in VIEWS}

    opt = torch.optim.Adam(
        [
            {"params": [state.w_face, state.w_hair], "lr": schedule.peak},
            {"params": [*state.noise_face, *state.noise_hair], "lr": schedule.peak * noise_lr_scale},
        ],
        betas=ADAM_BETAS,
    )

    trace = []
    for it in range(iters):
        lr = lr_at(schedule, it)
        opt.param_groups[0]["lr"] = lr
        opt.param_groups[1]["lr"] = lr * noise_lr_scale
        if sharing.alpha_mode == "fixed":
            alpha = sharing.alpha_fixed
        else:
            alpha = float(torch.rand((), generator=alpha_g, dtype=torch.float64))

        sim = latent_similarity(state.w_face, state.w_hair)
        total = None
        per_view = {}
        for view in VIEWS:
            wplus = assemble_wplus_stage1(state, view, alpha)
            output = backend.synthesize(wplus, state.noise(view))
            per = _perceptual_terms(
                output, guide_t[view], view_masks[view], weights, view, extractor, ()
            )
            terms = LossTerms(
                per_f=per["f"],
                per_h=per["h"],
                per_bg=per["bg"],
                global_mse=global_mse32(output, guide_t[view]),
                initial=initial_value_loss(wplus, w0),
                noise=noise_regularization(state.noise(view)),
                similarity=sim,
            )
            per_view[view] = terms
            view_total = objective(terms, weights)
            total = view_total if total is None else total + view_total

        trace.append(_trace_row(it, per_view, sim, total, alpha=alpha, lr=lr))
        _check_finite(total, it, trace)
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()

    final = state.detached()
    return StageResult(
        o_face=backend.synthesize(final.wplus("face"), final.noise("face")).detach(),
        o_hair=backend.synthesize(final.wplus("hair"), final.noise("hair")).detach(),
        state=final,
        trace=trace,
    )


def update_targets(guides: GuidePair, stage1: StageResult, segmenter=None) -> GuidePair:
    """Refresh the optimization targets: keep the guides where they were
    copy-pasted, take the stage-1 hallucination everywhere else."""
    new_views = []
    for view in VIEWS:
        gv = guides.view(view)
        o1 = np.clip(from_tensor(stage1.output(view)), 0.0, 1.0)
        m_c = None
        if segmenter is not None:
            try:
                o1_bg = np.asarray(segmenter(o1), dtype=bool)
                f_bg = gv.face.sem.region(Region.BACKGROUND) & gv.face.sem.valid
                m_c = build_mc(gv.masks, o1_bg, f_bg)
            except Exception as exc:  # noqa: BLE001 - provider contract boundary
                warnings.warn(
                    f"segmenter failed on the {view} view ({exc}); using the eroded "
                    "face+hair fallback",
                    FallbackWarning,
                )
        if m_c is None:
            if segmenter is None:
                warnings.warn(
                    f"no segmenter for the {view} view; using the eroded face+hair fallback",
                    FallbackWarning,
                )
            m_c = erode(gv.masks.m_f | gv.masks.m_h, 5)
        sel = m_c[..., None]
        new_guide = np.where(sel, gv.guide, o1)
        new_views.append(replace(gv, guide=new_guide, m_c=m_c))
    return GuidePair(new_views[0], new_views[1])


def broadcast_to_wplus(stage1_state: LatentState) -> LatentState:
    """Re-express a stage-1 state in per-layer form: each view's own code
    fills its head rows, the even blend of the two codes fills the shared
    tail, and the noise maps carry over."""
    if stage1_state.stage != 1:
        raise SchemaError("can only broadcast a stage-1 state")
    split = stage1_state.sharing.shared_from
    layers = stage1_state.layer_count
    w_face = stage1_state.w_face.detach()
    w_hair = stage1_state.w_hair.detach()
    mid = 0.5 * (w_face + w_hair)
    return LatentState(
        stage=2,
        layer_count=layers,
        sharing=stage1_state.sharing,
        noise_face=[n.detach().clone() for n in stage1_state.noise_face],
        noise_hair=[n.detach().clone() for n in stage1_state.noise_hair],
        head_face=replicate(w_face, split).clone(),
        head_hair=replicate(w_hair, split).clone(),
        tail_shared=replicate(mid, layers - split).clone() if layers > split else mid.new_zeros((0, mid.shape[0])),
    )


def run_stage2(
    new_guides: GuidePair,
    state: LatentState,
    backend: GeneratorBackend,
    weights: LossWeights,
    schedule: LrSchedule,
    iters: int = 500,
    extractor=None,
    noise_lr_scale: float = NOISE_LR_SCALE,
) -> StageResult:
    """Per-layer refinement against the updated targets.

    The anchor of each view's initial-value term is its own stage-1 code.
    """
    extractor = extractor or PyramidExtractor()
    dtype = backend.dtype

    if state.stage == 1:
        anchors = {"face": state.w_face.detach(), "hair": state.w_hair.detach()}
        state = broadcast_to_wplus(state)
    else:
        raise SchemaError("stage 2 must start from a stage-1 state")

    state.head_face.requires_grad_()
    state.head_hair.requires_grad_()
    state.tail_shared.requires_grad_()
    for n in state.noise_face + state.noise_hair:
        n.requires_grad_()

    guide_t = {v: to_tensor(new_guides.view(v).guide, dtype) for v in VIEWS}
    view_masks = {v: _ViewMasks(new_guides.view(v).masks, dtype) for v in VIEWS}

    opt = torch.optim.Adam(
        [
            {"params": [state.head_face, state.head_hair, state.tail_shared], "lr": schedule.peak},
            {"params": [*state.noise_face, *state.noise_hair], "lr": schedule.peak * noise_lr_scale},
        ],
        betas=ADAM_BETAS,
    )

    trace = []
    for it in range(iters):
        lr = lr_at(schedule, it)
        opt.param_groups[0]["lr"] = lr
        opt.param_groups[1]["lr"] = lr * noise_lr_scale

        wplus = {v: state.wplus(v) for v in VIEWS}
        sim = latent_similarity(wplus["face"], wplus["hair"])
        total = None
        per_view = {}
        for view in VIEWS:
            output = backend.synthesize(wplus[view], state.noise(view))
            per = _perceptual_terms(
                output,
                guide_t[view],
                view_masks[view],
                weights,
                view,
                extractor,
                STAGE2_BLURRED_TERMS[view],
            )
            terms = LossTerms(
                per_f=per["f"],
                per_h=per["h"],
                per_bg=per["bg"],
                global_mse=global_mse32(output, guide_t[view]),
                initial=initial_value_loss(wplus[view], anchors[view]),
                noise=noise_regularization(state.noise(view)),
                similarity=sim,
            )
            per_view[view] = terms
            view_total = objective(terms, weights)
            total = view_total if total is None else total + view_total

        trace.append(_trace_row(it, per_view, sim, total, lr=lr))
        _check_finite(total, it, trace)
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()

    final = state.detached()
    return StageResult(
        o_face=backend.synthesize(final.wplus("face"), final.noise("face")).detach(),
        o_hair=backend.synthesize(final.wplus("hair"), final.noise("hair")).detach(),
        state=final,
        trace=trace,
    )


def run_stage3(
    guides: GuidePair,
    state: LatentState,
    backend: GeneratorBackend,
    iters: int = 500,
    alpha_reg: float = 30.0,
    lambda_reg: float = 0.1,
    lr: float = 3e-4,
    reg_seed: int = 0,
    extractor=None,
) -> StageResult:
    """Tune the generator weights around the frozen stage-2 latents."""
    if state.stage != 2:
        raise SchemaError("stage 3 must start from a stage-2 state")
    extractor = extractor or PyramidExtractor()
    dtype = backend.dtype

    final = state.detached()
    final.stage = 3
    wplus = {v: final.wplus(v) for v in VIEWS}
    noise = {v: final.noise(v) for v in VIEWS}

    m_raw = {
        "face": as_mask(build_mraw(guides.masks_face, "face"), dtype),
        "hair": as_mask(build_mraw(guides.masks_hair, "hair"), dtype),
    }
    # Pivot for the locality regularizer: the mean code over views and rows.
    w_opt = torch.cat([wplus["face"], wplus["hair"]], dim=0).mean(dim=0)

    frozen = backend.clone()
    for p in frozen.parameters():
        p.requires_grad_(False)
    for p in backend.parameters():
        p.requires_grad_(True)

    opt = torch.optim.Adam(backend.parameters(), lr=lr, betas=ADAM_BETAS)

    trace = []
    for it in range(iters):
        o_face = backend.synthesize(wplus["face"], noise["face"])
        o_hair = backend.synthesize(wplus["hair"], noise["hair"])
        recon = pti_loss(o_face, o_hair, guides, m_raw["face"], m_raw["hair"], extractor)
        reg = o_face.new_zeros(())
        if lambda_reg > 0:
            reg = pti_regularizer(
                backend, frozen, w_opt, alpha_reg, seed=reg_seed + it, extractor=extractor
            )
        total = recon + lambda_reg * reg

        trace.append({"iter": it, "recon": _f(recon), "reg": _f(reg), "total": _f(total)})
        _check_finite(total, it, trace)
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()

    for p in backend.parameters():
        p.requires_grad_(False)
    return StageResult(
        o_face=backend.synthesize(wplus["face"], noise["face"]).detach(),
        o_hair=backend.synthesize(wplus["hair"], noise["hair"]).detach(),
        state=final,
        trace=trace,
    )


def finalize(
    stage3: StageResult,
    face_input: AlignedImage,
    masks: MaskSet,
    paste_back: bool = False,
) -> np.ndarray:
    """Return the face-view output, optionally pasting the original
    background back with a two-pixel feathered seam."""
    out = np.clip(from_tensor(stage3.o_face), 0.0, 1.0)
    if not paste_back:
        return out
    region = erode(masks.m_bg, 5)
    if not region.any():
        return out
    dist = ndimage.distance_transform_edt(~region)
    weight = np.clip(1.0 - dist / 2.0, 0.0, 1.0)[..., None]
    return weight * face_input.pixels + (1.0 - weight) * out
