"""The appearance network, the frozen semantic network, channel attention,
and the per-layer fusion that turns semantic features into correlation
templates.

Every forward function takes an optional :class:`~dualsiam.autodiff.GradTape`.
Without a tape it runs on plain arrays (the inference path).  With a tape,
parameters wrapped in :class:`~dualsiam.autodiff.Node` collect gradients;
anything left as a bare ndarray stays frozen.  The semantic backbone is
always evaluated off-tape, so its parameters can never receive gradients.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import Node, value_of
from .errors import ContractViolationError
from .profiles import ConvLayerSpec, NetworkProfile, PoolLayerSpec

# Smallest float32 step away from {0, 1}: keeps attention weights strictly
# inside the open interval even when the logistic saturates.
_OPEN_EPS = float(np.finfo(np.float32).eps)


@dataclass
class LayerParams:
    """Weights of one conv layer; arrays may be Nodes while training."""

    name: str
    weights: object  # (kh, kw, inC, outC)
    bias: object     # (outC,)


@dataclass
class ResponseAdjust:
    """Trainable affine calibration of a mean-normalized correlation map.

    Raw correlations sum thousands of products; the score divides by the
    template element count first, then applies a learned scale and bias
    so the logistic loss sees unit-range margins with well-conditioned
    gradients.  Test-time min-max normalization is invariant to this
    (positive-scale) map, so tracking geometry is unaffected.
    """

    scale: object  # (1,)
    bias: object   # (1,)

    def named_arrays(self):
        yield "scale", value_of(self.scale)
        yield "bias", value_of(self.bias)


def init_response_adjust() -> ResponseAdjust:
    return ResponseAdjust(np.ones(1, dtype=ops.DTYPE), np.zeros(1, dtype=ops.DTYPE))


@dataclass
class AppearanceParams:
    layers: list
    adjust: ResponseAdjust = None

    def __post_init__(self):
        if self.adjust is None:
            self.adjust = init_response_adjust()

    def named_arrays(self):
        for layer in self.layers:
            yield f"{layer.name}.weights", value_of(layer.weights)
            yield f"{layer.name}.bias", value_of(layer.bias)
        yield "adjust.scale", value_of(self.adjust.scale)
        yield "adjust.bias", value_of(self.adjust.bias)


@dataclass
class SemanticBackboneParams:
    """Frozen feature extractor; pretrained once, never updated afterwards."""

    layers: list

    def named_arrays(self):
        for layer in self.layers:
            yield f"{layer.name}.weights", value_of(layer.weights)
            yield f"{layer.name}.bias", value_of(layer.bias)


@dataclass
class AttentionMlp:
    """Per-layer channel attention: 9 pooled cells -> hidden 9 -> one weight."""

    w1: object  # (9, 9)
    b1: object  # (9,)
    w2: object  # (9, 1)
    b2: object  # (1,)

    def named_arrays(self):
        yield "w1", value_of(self.w1)
        yield "b1", value_of(self.b1)
        yield "w2", value_of(self.w2)
        yield "b2", value_of(self.b2)


@dataclass
class SemanticHeadParams:
    """Trainable part of the semantic branch: fusion convs and attention MLPs."""

    taps: tuple                 # tapped layer names this head covers
    fusion: dict                # tap -> LayerParams with a 1x1 kernel
    attention: dict | None      # tap -> AttentionMlp, or None when disabled
    adjust: ResponseAdjust = None

    def __post_init__(self):
        if self.adjust is None:
            self.adjust = init_response_adjust()

    def named_arrays(self):
        for tap in self.taps:
            layer = self.fusion[tap]
            yield f"fusion.{tap}.weights", value_of(layer.weights)
            yield f"fusion.{tap}.bias", value_of(layer.bias)
        if self.attention is not None:
            for tap in self.taps:
                for name, arr in self.attention[tap].named_arrays():
                    yield f"attention.{tap}.{name}", arr
        yield "adjust.scale", value_of(self.adjust.scale)
        yield "adjust.bias", value_of(self.adjust.bias)


# ---------------------------------------------------------------------------
# Parameter construction
# ---------------------------------------------------------------------------

def _gaussian(rng, shape, fan_in):
    # He scaling: keeps activation variance roughly unit through ReLU stacks
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(ops.DTYPE)


def _init_conv_stack(layers, in_channels, rng):
    params = []
    for spec in layers:
        if isinstance(spec, ConvLayerSpec):
            shape = (spec.kernel, spec.kernel, in_channels, spec.out_channels)
            fan_in = spec.kernel * spec.kernel * in_channels
            params.append(
                LayerParams(spec.name, _gaussian(rng, shape, fan_in), np.zeros(spec.out_channels, dtype=ops.DTYPE))
            )
            in_channels = spec.out_channels
    return params


def init_appearance_params(profile: NetworkProfile, rng) -> AppearanceParams:
    return AppearanceParams(_init_conv_stack(profile.anet_layers, 3, rng))


def init_semantic_backbone(profile: NetworkProfile, rng) -> SemanticBackboneParams:
    return SemanticBackboneParams(_init_conv_stack(profile.snet_layers, 3, rng))


def init_attention_mlp(rng, zero: bool = False) -> AttentionMlp:
    if zero:
        return AttentionMlp(
            np.zeros((9, 9), dtype=ops.DTYPE), np.zeros(9, dtype=ops.DTYPE),
            np.zeros((9, 1), dtype=ops.DTYPE), np.zeros(1, dtype=ops.DTYPE),
        )
    return AttentionMlp(
        _gaussian(rng, (9, 9), 9), np.zeros(9, dtype=ops.DTYPE),
        _gaussian(rng, (9, 1), 9), np.zeros(1, dtype=ops.DTYPE),
    )


def init_semantic_head(
    profile: NetworkProfile, rng, multilevel: bool = True, attention: bool = True
) -> SemanticHeadParams:
    taps = profile.snet_taps if multilevel else profile.snet_taps[-1:]
    tap_channels = dict(
        (tap, ch) for tap, (_, ch) in profile.snet_tap_shapes(profile.search_size).items()
    )
    fusion = {}
    for tap in taps:
        in_c = tap_channels[tap]
        fusion[tap] = LayerParams(
            f"fusion_{tap}",
            _gaussian(rng, (1, 1, in_c, profile.fusion_out_channels), in_c),
            np.zeros(profile.fusion_out_channels, dtype=ops.DTYPE),
        )
    mlps = {tap: init_attention_mlp(rng) for tap in taps} if attention else None
    return SemanticHeadParams(taps=tuple(taps), fusion=fusion, attention=mlps)


def lift(params, tape_params: bool = True):
    """Return a copy of a params struct with every array wrapped in a Node.

    The Nodes wrap the *same* arrays, so in-place optimizer updates are
    visible through the original struct.
    """
    def wrap(x):
        return Node(x) if tape_params else x

    if isinstance(params, AppearanceParams):
        return AppearanceParams(
            [LayerParams(l.name, wrap(l.weights), wrap(l.bias)) for l in params.layers],
            adjust=ResponseAdjust(wrap(params.adjust.scale), wrap(params.adjust.bias)),
        )
    if isinstance(params, SemanticBackboneParams):
        return SemanticBackboneParams([LayerParams(l.name, wrap(l.weights), wrap(l.bias)) for l in params.layers])
    if isinstance(params, AttentionMlp):
        return AttentionMlp(wrap(params.w1), wrap(params.b1), wrap(params.w2), wrap(params.b2))
    if isinstance(params, SemanticHeadParams):
        return SemanticHeadParams(
            taps=params.taps,
            fusion={t: LayerParams(l.name, wrap(l.weights), wrap(l.bias)) for t, l in params.fusion.items()},
            attention=None if params.attention is None else {t: lift(m) for t, m in params.attention.items()},
            adjust=ResponseAdjust(wrap(params.adjust.scale), wrap(params.adjust.bias)),
        )
    raise TypeError(f"cannot lift {type(params).__name__}")


def node_map(params) -> dict:
    """Name -> Node for every lifted array in a params struct."""
    nodes = {}

    def visit(prefix, layer):
        nodes[f"{prefix}.weights"] = layer.weights
        nodes[f"{prefix}.bias"] = layer.bias

    if isinstance(params, (AppearanceParams, SemanticBackboneParams)):
        for l in params.layers:
            visit(l.name, l)
        if isinstance(params, AppearanceParams):
            nodes["adjust.scale"] = params.adjust.scale
            nodes["adjust.bias"] = params.adjust.bias
    elif isinstance(params, SemanticHeadParams):
        for t in params.taps:
            visit(f"fusion.{t}", params.fusion[t])
        if params.attention is not None:
            for t in params.taps:
                m = params.attention[t]
                nodes[f"attention.{t}.w1"] = m.w1
                nodes[f"attention.{t}.b1"] = m.b1
                nodes[f"attention.{t}.w2"] = m.w2
                nodes[f"attention.{t}.b2"] = m.b2
        nodes["adjust.scale"] = params.adjust.scale
        nodes["adjust.bias"] = params.adjust.bias
    else:
        raise TypeError(f"cannot map {type(params).__name__}")
    return nodes


# ---------------------------------------------------------------------------
# Tape-optional primitives
# ---------------------------------------------------------------------------

def _conv(tape, x, layer: LayerParams, stride=1, padding=0):
    if tape is None:
        kernel = ops.ConvKernel(value_of(layer.weights), value_of(layer.bias), stride, padding)
        return ops.conv2d(value_of(x), kernel)
    return tape.conv2d(x, layer.weights, layer.bias, stride, padding)


def _pool(tape, x, window, stride):
    if tape is None:
        return ops.max_pool(value_of(x), (window, window), (stride, stride))
    return tape.max_pool(x, (window, window), (stride, stride))


def _relu(tape, x):
    return ops.relu(value_of(x)) if tape is None else tape.relu(x)


# ---------------------------------------------------------------------------
# Forwards
# ---------------------------------------------------------------------------

def _stack_forward(image, layer_specs, layer_params, tape=None, taps=None):
    """Run a conv/pool stack; optionally collect outputs of named tap layers.

    Pixel inputs arrive in [0, 1]; centering them keeps the channel means
    of deep features from accumulating a large shared offset.
    """
    collected = {}
    x = value_of(image) - np.float32(0.5)  # images are data: no gradient flows to pixels
    params = iter(layer_params)
    for spec in layer_specs:
        if isinstance(spec, PoolLayerSpec):
            x = _pool(tape, x, spec.window, spec.stride)
            continue
        layer = next(params)
        if layer.name != spec.name:
            raise ContractViolationError(
                f"parameter/spec order mismatch: {layer.name} vs {spec.name}"
            )
        x = _conv(tape, x, layer, stride=spec.stride)
        if spec.relu:
            x = _relu(tape, x)
        if taps is not None and spec.name in taps:
            collected[spec.name] = x
    if taps is not None:
        return x, collected
    return x


def appearance_features(image, params: AppearanceParams, profile: NetworkProfile, tape=None):
    """f_a: image (target or search sized) -> feature map."""
    size = value_of(image).shape[0]
    if size not in (profile.target_size, profile.search_size):
        raise ContractViolationError(
            f"appearance input extent {size} is neither target ({profile.target_size}) "
            f"nor search ({profile.search_size}) size"
        )
    return _stack_forward(image, profile.anet_layers, params.layers, tape=tape)


def semantic_features(image, params: SemanticBackboneParams, profile: NetworkProfile) -> dict:
    """Frozen backbone forward; returns {tap_name: feature map}.

    Always runs off-tape: the backbone's parameters are never trained
    by the tracker, so no gradient can reach them by construction.
    """
    image = value_of(image)
    size = image.shape[0]
    if size not in (profile.target_size, profile.search_size):
        raise ContractViolationError(
            f"semantic input extent {size} is neither target ({profile.target_size}) "
            f"nor search ({profile.search_size}) size"
        )
    plain = SemanticBackboneParams(
        [LayerParams(l.name, value_of(l.weights), value_of(l.bias)) for l in params.layers]
    )
    _, taps = _stack_forward(image, profile.snet_layers, plain.layers, tape=None, taps=set(profile.snet_taps))
    return taps


def semantic_backbone_trunk(image, params: SemanticBackboneParams, tape, layer_specs):
    """Full forward through the backbone, used only by classifier pretraining."""
    return _stack_forward(image, layer_specs, params.layers, tape=tape)


def crop_center_features(feat, extent: int):
    """Center crop of a square feature map down to `extent`."""
    fv = value_of(feat)
    h, w = fv.shape[:2]
    if extent > h or extent > w:
        raise ContractViolationError(
            f"crop extent {extent} larger than feature map {h}x{w}"
        )
    top = (h - extent) // 2
    left = (w - extent) // 2
    if isinstance(feat, Node):
        raise ContractViolationError("crop_center_features operates on frozen features only")
    return fv[top : top + extent, left : left + extent, :]


def attention_weights(feat, mlp: AttentionMlp, profile: NetworkProfile, tape=None):
    """Channel weights from grid max pooling plus the shared MLP.

    Returns a vector of length C with every value strictly inside
    (0.5, 1.5).  The feature map is frozen input; gradients flow to the
    MLP parameters only.
    """
    fv = value_of(feat)
    if fv.ndim != 3 or fv.shape[0] != fv.shape[1]:
        raise ContractViolationError(f"attention input must be a square HxWxC map, got {fv.shape}")
    cells = profile.grid_cells(fv.shape[0])
    pooled = np.stack([fv[r, c].max(axis=(0, 1)) for r, c in cells], axis=1)  # (C, 9)
    if tape is None:
        hidden = ops.relu(pooled @ value_of(mlp.w1) + value_of(mlp.b1))
        out = (hidden @ value_of(mlp.w2) + value_of(mlp.b2)).reshape(-1)
        gate = np.clip(ops.sigmoid(out), _OPEN_EPS, 1.0 - _OPEN_EPS)
        return (gate + 0.5).astype(pooled.dtype)
    hidden = tape.relu(tape.add(tape.matmul(pooled, mlp.w1), mlp.b1))
    out = tape.reshape(tape.add(tape.matmul(hidden, mlp.w2), mlp.b2), (-1,))
    gate = tape.clip(tape.sigmoid(out), _OPEN_EPS, 1.0 - _OPEN_EPS)
    return tape.add_const(gate, 0.5)


def fuse(feat, layer: LayerParams, tape=None):
    """1x1 convolution mapping a tapped layer to the shared channel count."""
    return _conv(tape, feat, layer, stride=1, padding=0)


def appearance_response(z_feat, x_feat, tape=None):
    """Correlation of target features over search features."""
    if tape is None:
        return ops.cross_correlate(value_of(z_feat), value_of(x_feat))
    return tape.cross_correlate(z_feat, x_feat)


def _apply_adjust(response, adjust: ResponseAdjust, template_elements: int, tape=None):
    inv = np.array([1.0 / template_elements], dtype=ops.DTYPE)
    zero = np.zeros(1, dtype=ops.DTYPE)
    if tape is None:
        mean = value_of(response) * inv[0]
        return mean * value_of(adjust.scale)[0] + value_of(adjust.bias)[0]
    mean = tape.scale_shift(response, inv, zero)  # constants: no gradient to them
    return tape.scale_shift(mean, adjust.scale, adjust.bias)


def appearance_score(z_feat, x_feat, params: AppearanceParams, tape=None):
    """Calibrated appearance response: normalized, affine-adjusted correlation."""
    n = int(np.prod(value_of(z_feat).shape))
    return _apply_adjust(appearance_response(z_feat, x_feat, tape=tape), params.adjust, n, tape=tape)


def semantic_target_embedding(tap_feats: dict, head: SemanticHeadParams, profile, tape=None):
    """Per-tap fused target template g(xi * f_s(z)); also returns the xi used.

    tap_feats are features of the context-sized target patch.  Attention
    is computed from the full map, then the target footprint is cropped,
    scaled channel-wise, and fused.
    """
    embeddings = {}
    weights = {}
    for tap in head.taps:
        feat = tap_feats[tap]
        target = crop_center_features(feat, profile.target_feat_extent)
        if head.attention is not None:
            xi = attention_weights(feat, head.attention[tap], profile, tape=tape)
            scaled = ops.channel_scale(target, value_of(xi)) if tape is None else tape.channel_scale(target, xi)
        else:
            xi = None
            scaled = target
        embeddings[tap] = fuse(scaled, head.fusion[tap], tape=tape)
        weights[tap] = xi
    return embeddings, weights


def semantic_search_embedding(tap_feats: dict, head: SemanticHeadParams, profile, tape=None):
    """Per-tap fused search features, center-aligned to the deepest tap.

    No attention on the search side.  Shallower taps are center cropped
    to the deepest tap's extent so every layer correlates onto the same
    response grid.
    """
    base_extent = value_of(tap_feats[profile.snet_taps[-1]]).shape[0]
    embeddings = {}
    for tap in head.taps:
        feat = crop_center_features(tap_feats[tap], base_extent)
        embeddings[tap] = fuse(feat, head.fusion[tap], tape=tape)
    return embeddings


def semantic_response(target_emb: dict, search_emb: dict, tape=None):
    """Sum of per-tap correlations on the common response grid."""
    total = None
    for tap in target_emb:
        r = appearance_response(target_emb[tap], search_emb[tap], tape=tape)
        if total is None:
            total = r
        elif tape is None:
            total = total + r
        else:
            total = tape.lincomb(1.0, total, 1.0, r)
    return total


def semantic_response_full(z_ctx_feats, x_feats, head, profile, tape=None):
    """Straight-line composition: features in, response map out."""
    temb, _ = semantic_target_embedding(z_ctx_feats, head, profile, tape=tape)
    semb = semantic_search_embedding(x_feats, head, profile, tape=tape)
    return semantic_response(temb, semb, tape=tape)


def semantic_score(target_emb: dict, search_emb: dict, head: SemanticHeadParams, tape=None):
    """Calibrated semantic response: normalized, affine-adjusted tap-correlation sum.

    Every fused tap template has the same element count, so one shared
    normalizer keeps the taps equally weighted.
    """
    n = sum(int(np.prod(value_of(emb).shape)) for emb in target_emb.values())
    return _apply_adjust(semantic_response(target_emb, search_emb, tape=tape), head.adjust, n, tape=tape)


def semantic_score_full(z_ctx_feats, x_feats, head, profile, tape=None):
    temb, _ = semantic_target_embedding(z_ctx_feats, head, profile, tape=tape)
    semb = semantic_search_embedding(x_feats, head, profile, tape=tape)
    return semantic_score(temb, semb, head, tape=tape)


def params_digest(params) -> str:
    """Hex digest over raw float bytes; used to prove the backbone stays frozen."""
    import hashlib

    h = hashlib.sha256()
    for name, arr in params.named_arrays():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
