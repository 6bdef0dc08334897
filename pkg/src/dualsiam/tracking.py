"""Online tracking: initialize once on the first frame, then per frame
crop the search region at three scales, score both branches, blend the
response maps, and move the box to the blended argmax.

Template-side quantities are computed exactly once per sequence: the
appearance template features, the channel attention weights, and the
fused semantic templates are all cached in :class:`TrackerState` at init.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import networks, ops
from .errors import ContractViolationError, NumericError
from .geometry import BoundingBox
from .networks import (
    AppearanceParams,
    SemanticBackboneParams,
    SemanticHeadParams,
)
from .profiles import NetworkProfile


@dataclass(frozen=True)
class TrackConfig:
    """Inference-time knobs; defaults follow the fully-convolutional
    tracking lineage this architecture inherits."""

    blend: float = 0.3              # weight of the appearance branch in the mix
    scale_step: float = 1.025
    scale_penalty: float = 0.9745   # multiplies the peak of non-middle scales
    scale_damping: float = 0.59     # how fast the box size follows the chosen scale
    window_influence: float = 0.176
    response_upsample: int = 16

    def __post_init__(self):
        if not 0.0 <= self.blend <= 1.0:
            raise ContractViolationError(f"blend weight must be in [0, 1], got {self.blend}")
        if self.scale_step <= 1.0:
            raise ContractViolationError("scale step must exceed 1")

    @property
    def scale_factors(self) -> tuple:
        return (1.0 / self.scale_step, 1.0, self.scale_step)


@dataclass
class ResponseMap:
    """A 2-d similarity grid plus the geometry needed to map it to pixels."""

    values: np.ndarray       # (n, n)
    stride: int              # search-patch pixels per response cell

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ContractViolationError(f"response map must be 2-d, got {self.values.shape}")


@dataclass
class TrackerModels:
    """Everything learned offline.  Branches may be absent: an
    appearance-only tracker has no backbone/head, and vice versa."""

    profile: NetworkProfile
    appearance: AppearanceParams | None = None
    backbone: SemanticBackboneParams | None = None
    head: SemanticHeadParams | None = None

    def __post_init__(self):
        if self.appearance is None and self.head is None:
            raise ContractViolationError("tracker needs at least one branch")
        if (self.head is None) != (self.backbone is None):
            raise ContractViolationError("semantic branch needs both backbone and head")

    @property
    def has_appearance(self) -> bool:
        return self.appearance is not None

    @property
    def has_semantic(self) -> bool:
        return self.head is not None


@dataclass
class TrackerState:
    models: TrackerModels
    config: TrackConfig
    box: BoundingBox
    z_feat: np.ndarray | None
    target_emb: dict | None
    xi: dict | None
    scale: float = 1.0                # cumulative size factor relative to init
    attention_eval_count: int = 0
    frame_shape: tuple = ()
    last_response: np.ndarray | None = None  # blended map at the chosen scale, pre-window


# ---------------------------------------------------------------------------
# Crop geometry
# ---------------------------------------------------------------------------

def context_side(box: BoundingBox) -> float:
    """Side of the square context region around a target box, in frame px.

    Pads each dimension by the mean of width and height, then takes the
    geometric mean, so the target plus its surroundings always fill the
    same fraction of the resampled patch.
    """
    pad = (box.width + box.height) / 2.0
    return float(np.sqrt((box.width + pad) * (box.height + pad)))


def crop_with_context(frame: np.ndarray, box: BoundingBox, out_size: int,
                      profile: NetworkProfile, scale: float = 1.0) -> np.ndarray:
    """Square context crop resampled to ``out_size`` pixels.

    The sampled region side is ``context_side(box) * out_size /
    profile.target_size * scale`` so a target-size request yields the bare
    context square and a search-size request the proportionally larger
    region.  Output pixel (i, j) bilinearly samples the frame at

        x = cx + (j - (out-1)/2) * side / out
        y = cy + (i - (out-1)/2) * side / out

    which places the box center exactly on the central sample.  Sample
    points outside the frame take the per-channel frame mean.
    """
    h, w = frame.shape[:2]
    x0, y0, bw, bh = box.to_topleft()
    if x0 + bw <= 0 or y0 + bh <= 0 or x0 >= w or y0 >= h:
        raise ContractViolationError(
            f"box {box} lies fully outside the {w}x{h} frame"
        )
    side = context_side(box) * out_size / profile.target_size * scale
    pitch = side / out_size
    offs = (np.arange(out_size) - (out_size - 1) / 2.0) * pitch
    xs = box.cx + offs
    ys = box.cy + offs
    fill = frame.reshape(-1, frame.shape[2]).mean(axis=0)

    x0i = np.floor(xs).astype(np.intp)
    y0i = np.floor(ys).astype(np.intp)
    fx = (xs - x0i).astype(frame.dtype)
    fy = (ys - y0i).astype(frame.dtype)
    x0c = np.clip(x0i, 0, w - 1)
    x1c = np.clip(x0i + 1, 0, w - 1)
    y0c = np.clip(y0i, 0, h - 1)
    y1c = np.clip(y0i + 1, 0, h - 1)

    top = frame[y0c][:, x0c] * (1 - fx)[None, :, None] + frame[y0c][:, x1c] * fx[None, :, None]
    bot = frame[y1c][:, x0c] * (1 - fx)[None, :, None] + frame[y1c][:, x1c] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]

    outside = (xs < 0) | (xs > w - 1)
    out[:, outside, :] = fill
    outside_y = (ys < 0) | (ys > h - 1)
    out[outside_y, :, :] = fill
    return out.astype(np.float32, copy=False)


# ---------------------------------------------------------------------------
# Response handling
# ---------------------------------------------------------------------------

def combine_responses(h_a: ResponseMap, h_s: ResponseMap, blend: float) -> ResponseMap:
    """Weighted average ``blend * h_a + (1 - blend) * h_s``.

    The endpoints short-circuit so a 1.0/0.0 blend reproduces the single
    branch bit for bit.
    """
    if h_a.values.shape != h_s.values.shape:
        raise ContractViolationError(
            f"response dims differ: {h_a.values.shape} vs {h_s.values.shape}"
        )
    if blend == 1.0:
        return ResponseMap(h_a.values.copy(), h_a.stride)
    if blend == 0.0:
        return ResponseMap(h_s.values.copy(), h_s.stride)
    mixed = blend * h_a.values + (1.0 - blend) * h_s.values
    return ResponseMap(mixed.astype(h_a.values.dtype), h_a.stride)


def normalize_stack(maps: list) -> list:
    """Min-max normalize a family of maps with shared min/max.

    Branch scores from separately trained branches are incommensurable;
    per-frame min-max over all scale maps of one branch puts both
    branches on [0, 1] while keeping scales comparable to each other.
    """
    lo = min(float(m.min()) for m in maps)
    hi = max(float(m.max()) for m in maps)
    span = hi - lo
    if span <= 0:
        return [np.zeros_like(m) for m in maps]
    return [(m - lo) / span for m in maps]


def _cosine_window(n: int) -> np.ndarray:
    w = np.hanning(n).astype(np.float32)
    return np.outer(w, w)


# ---------------------------------------------------------------------------
# Tracker
# ---------------------------------------------------------------------------

def init(frame: np.ndarray, box: BoundingBox, models: TrackerModels,
         config: TrackConfig | None = None) -> TrackerState:
    """Build the per-sequence state from the first frame.

    Caches the appearance template features and, for the semantic branch,
    the channel weights and fused templates.  None of these are ever
    recomputed during the sequence.
    """
    config = config or TrackConfig()
    profile = models.profile
    z_ctx = crop_with_context(frame, box, profile.search_size, profile)

    z_feat = None
    if models.has_appearance:
        half = (profile.search_size - profile.target_size) // 2
        z_patch = z_ctx[half : half + profile.target_size, half : half + profile.target_size, :]
        z_feat = networks.appearance_features(z_patch, models.appearance, profile)

    target_emb = None
    xi = None
    attention_evals = 0
    if models.has_semantic:
        feats = networks.semantic_features(z_ctx, models.backbone, profile)
        target_emb, xi = networks.semantic_target_embedding(feats, models.head, profile)
        if models.head.attention is not None:
            attention_evals = 1

    return TrackerState(
        models=models,
        config=config,
        box=box,
        z_feat=z_feat,
        target_emb=target_emb,
        xi=xi,
        attention_eval_count=attention_evals,
        frame_shape=frame.shape[:2],
    )


def _branch_responses(state: TrackerState, crops: list, need_a: bool, need_s: bool):
    """Raw per-scale response stacks for each active branch."""
    models = state.models
    profile = models.profile
    a_maps = []
    s_maps = []
    for crop in crops:
        if need_a:
            xf = networks.appearance_features(crop, models.appearance, profile)
            a_maps.append(networks.appearance_score(state.z_feat, xf, models.appearance))
        if need_s:
            feats = networks.semantic_features(crop, models.backbone, profile)
            semb = networks.semantic_search_embedding(feats, models.head, profile)
            s_maps.append(networks.semantic_score(state.target_emb, semb, models.head))
    return a_maps, s_maps


def track_frame(state: TrackerState, frame: np.ndarray) -> BoundingBox:
    """Process one frame and return (and store) the updated box."""
    if state.frame_shape and frame.shape[:2] != state.frame_shape:
        raise ContractViolationError(
            f"frame size changed mid-sequence: {frame.shape[:2]} vs {state.frame_shape}"
        )
    cfg = state.config
    models = state.models
    profile = models.profile
    factors = cfg.scale_factors

    # A 1.0/0.0 blend short-circuits the other branch entirely, making the
    # output bit-identical to the corresponding single-branch model.
    need_a = models.has_appearance and (not models.has_semantic or cfg.blend > 0.0)
    need_s = models.has_semantic and (not models.has_appearance or cfg.blend < 1.0)

    crops = [crop_with_context(frame, state.box, profile.search_size, profile, scale=f)
             for f in factors]
    a_maps, s_maps = _branch_responses(state, crops, need_a, need_s)
    for m in a_maps + s_maps:
        if not np.all(np.isfinite(m)):
            raise NumericError("non-finite response map while tracking")

    if a_maps:
        a_maps = normalize_stack(a_maps)
    if s_maps:
        s_maps = normalize_stack(s_maps)

    combined = []
    for i in range(len(factors)):
        if not s_maps:
            combined.append(a_maps[i])
        elif not a_maps:
            combined.append(s_maps[i])
        else:
            combined.append(cfg.blend * a_maps[i] + (1.0 - cfg.blend) * s_maps[i])

    mid = len(factors) // 2
    peaks = [
        float(m.max()) * (1.0 if i == mid else cfg.scale_penalty)
        for i, m in enumerate(combined)
    ]
    best = int(np.argmax(peaks))
    chosen = combined[best]
    state.last_response = chosen

    n = chosen.shape[0]
    window = _cosine_window(n)
    mixed = (1.0 - cfg.window_influence) * chosen + cfg.window_influence * window

    up = cfg.response_upsample
    fine = ops.bicubic_resize(mixed, (n - 1) * up + 1, (n - 1) * up + 1)
    idx = np.unravel_index(int(np.argmax(fine)), fine.shape)  # first max wins ties
    center = (fine.shape[0] - 1) / 2.0

    # response cell -> search-patch pixels -> frame pixels
    side = context_side(state.box) * profile.search_size / profile.target_size * factors[best]
    px_per_patch = side / profile.search_size
    disp_cells_y = (idx[0] - center) / up
    disp_cells_x = (idx[1] - center) / up
    dy = disp_cells_y * profile.total_stride * px_per_patch
    dx = disp_cells_x * profile.total_stride * px_per_patch

    h, w = state.frame_shape
    new_cx = float(np.clip(state.box.cx + dx, 0.0, w - 1.0))
    new_cy = float(np.clip(state.box.cy + dy, 0.0, h - 1.0))

    size_factor = (1.0 - cfg.scale_damping) + cfg.scale_damping * factors[best]
    new_box = BoundingBox(new_cx, new_cy,
                          state.box.width * size_factor,
                          state.box.height * size_factor)
    state.box = new_box
    state.scale *= size_factor
    return new_box


def dump_attention(state: TrackerState) -> list:
    """Rows (layer, rank, channel_index, weight), weight descending per layer.

    Rank is 1-based; ties keep ascending channel order (stable sort).
    """
    if state.xi is None or all(v is None for v in state.xi.values()):
        raise ContractViolationError("tracker state has no attention weights to dump")
    rows = []
    for tap in state.models.head.taps:
        weights = state.xi[tap]
        order = np.argsort(-np.asarray(weights), kind="stable")
        for rank, channel in enumerate(order, start=1):
            rows.append((tap, rank, int(channel), float(weights[channel])))
    return rows


class Tracker:
    """Object-style wrapper around init/track_frame for evaluation loops."""

    def __init__(self, models: TrackerModels, config: TrackConfig | None = None):
        self.models = models
        self.config = config or TrackConfig()
        self.state = None

    def init(self, frame: np.ndarray, box: BoundingBox) -> None:
        self.state = init(frame, box, self.models, self.config)

    def update(self, frame: np.ndarray) -> BoundingBox:
        if self.state is None:
            raise ContractViolationError("tracker used before init")
        return track_frame(self.state, frame)
