"""Offline training: balanced logistic loss on response maps, plain SGD
with momentum, separate optimization of the two branches, the joint-mode
experiment, and classifier pretraining for the semantic backbone.

The semantic backbone is evaluated off-tape during branch training, so
its parameters are structurally unable to receive gradients; a digest
check makes the freeze explicit anyway.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import networks, ops
from .autodiff import GradTape, Node
from .data import Sequence
from .errors import ContractViolationError, NumericError
from .networks import (
    AppearanceParams,
    SemanticBackboneParams,
    SemanticHeadParams,
)
from .profiles import NetworkProfile
from .tracking import crop_with_context


# ---------------------------------------------------------------------------
# Labels and loss
# ---------------------------------------------------------------------------

@dataclass
class TrainingPair:
    """One (target, search) crop pair with its balanced response labels."""

    target_patch: np.ndarray
    search_patch: np.ndarray
    label_map: np.ndarray    # +1 / -1 per response cell
    weight_map: np.ndarray   # positive, sums to 1, half on each class

    def __post_init__(self):
        if self.label_map.shape != self.weight_map.shape:
            raise ContractViolationError("label and weight maps must share a shape")
        pos = self.label_map > 0
        if not pos.any() or pos.all():
            raise ContractViolationError("label map needs at least one +1 and one -1")
        w_pos = float(self.weight_map[pos].sum())
        w_neg = float(self.weight_map[~pos].sum())
        if abs(w_pos - w_neg) > 1e-5 or abs(w_pos + w_neg - 1.0) > 1e-5:
            raise ContractViolationError(
                f"weights must balance the classes and sum to 1, got {w_pos:.4f}/{w_neg:.4f}"
            )


def make_label_map(response_dims: tuple, radius: float, stride: int = 1):
    """Centered disk of +1 labels with class-balanced weights.

    ``radius`` is measured in response-grid elements (multiply by
    ``stride`` for input pixels).  Cells whose center lies within
    ``radius`` of the map center are positive, everything else negative.
    Weights split evenly: positives share 0.5, negatives share 0.5.
    """
    if radius <= 0:
        raise ContractViolationError(f"label radius must be positive, got {radius}")
    h, w = response_dims
    ci, cj = (h - 1) / 2.0, (w - 1) / 2.0
    ii, jj = np.mgrid[0:h, 0:w]
    dist = np.hypot(ii - ci, jj - cj)
    labels = np.where(dist <= radius, 1.0, -1.0).astype(np.float32)
    n_pos = int((labels > 0).sum())
    n_neg = labels.size - n_pos
    if n_neg == 0:
        raise ContractViolationError(
            f"radius {radius} leaves no negative cell on a {h}x{w} map"
        )
    weights = np.where(labels > 0, 0.5 / n_pos, 0.5 / n_neg).astype(np.float32)
    return labels, weights


def logistic_loss(response: np.ndarray, pair: TrainingPair):
    """Weighted logistic loss over a response map and its gradient.

    loss = sum_p w[p] * log(1 + exp(-y[p] * h[p])), stable for any
    magnitude of h.  Returns (scalar loss, dloss/dh with h's shape).
    """
    h = np.asarray(response, dtype=np.float64)
    if h.shape != pair.label_map.shape:
        raise ContractViolationError(
            f"response shape {h.shape} does not match labels {pair.label_map.shape}"
        )
    y = pair.label_map.astype(np.float64)
    w = pair.weight_map.astype(np.float64)
    margin = y * h
    loss = float((w * np.logaddexp(0.0, -margin)).sum())
    grad = (-w * y * ops.sigmoid(-margin)).astype(response.dtype)
    return loss, grad


# ---------------------------------------------------------------------------
# Pair sampling
# ---------------------------------------------------------------------------

def sample_pair(tracklet: Sequence, branch: str, profile: NetworkProfile,
                rng, label_radius: float = 2.0) -> TrainingPair:
    """Random (target, search) pair from one tracklet.

    The context patch is cropped from one random annotated frame with the
    target centered; the search patch from another (possibly the same).
    For the appearance branch the target patch is the bare center
    target-size crop; semantic and joint branches keep the full context
    patch.
    """
    if branch not in ("appearance", "semantic", "joint"):
        raise ContractViolationError(f"unknown branch {branch!r}")
    n = len(tracklet.boxes)
    if n < 2:
        raise ContractViolationError("pair sampling needs at least 2 annotated frames")
    usable = [i for i in range(n) if tracklet.boxes[i].width > 0 and tracklet.boxes[i].height > 0]
    if len(usable) < len(tracklet.boxes):
        warnings.warn(f"{tracklet.name}: skipping degenerate ground-truth boxes")
    if len(usable) < 2:
        raise ContractViolationError(f"{tracklet.name}: fewer than 2 usable annotated frames")
    i = usable[int(rng.integers(len(usable)))]
    j = usable[int(rng.integers(len(usable)))]

    z_ctx = crop_with_context(tracklet.frame(i), tracklet.boxes[i], profile.search_size, profile)
    search = crop_with_context(tracklet.frame(j), tracklet.boxes[j], profile.search_size, profile)

    if branch == "appearance":
        half = (profile.search_size - profile.target_size) // 2
        target = z_ctx[half : half + profile.target_size, half : half + profile.target_size, :]
    else:
        target = z_ctx

    labels, weights = make_label_map(
        (profile.response_size, profile.response_size), label_radius, profile.total_stride
    )
    return TrainingPair(target, search, labels, weights)


def pair_stream(dataset: list, branch: str, profile: NetworkProfile, rng, label_radius: float = 2.0):
    """Infinite stream of sampled pairs over a tracklet dataset."""
    if not dataset:
        raise ContractViolationError("training dataset is empty")
    while True:
        tracklet = dataset[int(rng.integers(len(dataset)))]
        yield sample_pair(tracklet, branch, profile, rng, label_radius)


# ---------------------------------------------------------------------------
# SGD
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SgdConfig:
    """Plain SGD with momentum and a stepwise learning-rate schedule.

    ``lr_schedule`` is a tuple of (epoch_count, learning_rate) segments;
    the published schedule is 25 epochs at 0.01 then 5 at 0.001.
    """

    lr_schedule: tuple = ((25, 0.01), (5, 0.001))
    steps_per_epoch: int = 50
    batch_size: int = 8
    momentum: float = 0.9
    label_radius: float = 2.0
    grad_clip: float = 1.0   # global-norm bound per step; None disables
    seed: int = 0

    def __post_init__(self):
        last = float("inf")
        for count, lr in self.lr_schedule:
            # zero is allowed so a no-op run can be verified bit-exactly
            if count < 1 or lr < 0:
                raise ContractViolationError("schedule segments need positive counts and non-negative rates")
            if lr > last:
                raise ContractViolationError("learning rates must be non-increasing")
            last = lr

    @property
    def epochs(self) -> int:
        return sum(count for count, _ in self.lr_schedule)

    def lr_for_epoch(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch index."""
        if not 1 <= epoch <= self.epochs:
            raise ContractViolationError(f"epoch {epoch} outside schedule of {self.epochs}")
        seen = 0
        for count, lr in self.lr_schedule:
            seen += count
            if epoch <= seen:
                return lr
        raise AssertionError("unreachable")


def paper_schedule(**overrides) -> SgdConfig:
    """The published 30-epoch schedule (0.01 for 25 epochs, then 0.001)."""
    return SgdConfig(lr_schedule=((25, 0.01), (5, 0.001)), **overrides)


def quick_schedule(epochs_main: int = 5, epochs_tail: int = 1, **overrides) -> SgdConfig:
    """Short desk-scale schedule keeping the high/low learning-rate split."""
    return SgdConfig(lr_schedule=((epochs_main, 0.01), (epochs_tail, 0.001)), **overrides)


class SgdOptimizer:
    def __init__(self, nodes: dict, momentum: float, grad_clip: float | None = None):
        self.nodes = nodes
        self.momentum = momentum
        self.grad_clip = grad_clip
        self.velocity = {name: np.zeros_like(node.value) for name, node in nodes.items()}

    def _clip_factor(self) -> float:
        if self.grad_clip is None:
            return 1.0
        total = 0.0
        for node in self.nodes.values():
            if node.grad is not None:
                total += float((node.grad.astype(np.float64) ** 2).sum())
        norm = total ** 0.5
        return 1.0 if norm <= self.grad_clip else self.grad_clip / norm

    def step(self, lr: float) -> None:
        factor = self._clip_factor()
        for name, node in self.nodes.items():
            grad = node.grad * factor if node.grad is not None else 0.0
            v = self.velocity[name]
            v *= self.momentum
            v += grad
            if lr:
                node.value[...] -= (lr * v).astype(node.value.dtype)
            node.grad = None


@dataclass
class LossLog:
    rows: list = field(default_factory=list)  # (epoch, step, loss)

    def add(self, epoch: int, step: int, loss: float) -> None:
        self.rows.append((epoch, step, loss))

    def epoch_means(self) -> dict:
        sums: dict = {}
        for epoch, _, loss in self.rows:
            total, count = sums.get(epoch, (0.0, 0))
            sums[epoch] = (total + loss, count + 1)
        return {e: t / c for e, (t, c) in sums.items()}

    def losses(self) -> list:
        return [loss for _, _, loss in self.rows]

    def to_csv(self, path) -> None:
        lines = ["epoch,step,loss"]
        lines += [f"{e},{s},{l:.6f}" for e, s, l in self.rows]
        from pathlib import Path

        Path(path).write_text("\n".join(lines) + "\n")


def _sgd_loop(forward_one, named_nodes: dict, pairs, config: SgdConfig) -> LossLog:
    """Shared epoch/step/batch loop.

    `forward_one(pair)` must build a fresh tape, return (tape, response
    node, pair).  Gradients accumulate across the batch on the shared
    parameter Nodes, then one SGD step applies their mean.
    """
    optimizer = SgdOptimizer(named_nodes, config.momentum, config.grad_clip)
    log = LossLog()
    for epoch in range(1, config.epochs + 1):
        lr = config.lr_for_epoch(epoch)
        for step in range(config.steps_per_epoch):
            batch_loss = 0.0
            for _ in range(config.batch_size):
                pair = next(pairs)
                tape, response = forward_one(pair)
                loss, grad = logistic_loss(response.value, pair)
                if not np.isfinite(loss):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch} step {step}"
                    )
                batch_loss += loss
                tape.backward(response, grad / config.batch_size)
            optimizer.step(lr)
            log.add(epoch, step, batch_loss / config.batch_size)
    return log


# ---------------------------------------------------------------------------
# Branch trainers
# ---------------------------------------------------------------------------

def train_appearance(dataset: list, config: SgdConfig, profile: NetworkProfile,
                     init_params: AppearanceParams | None = None, pairs=None):
    """Optimize the appearance network on sampled pairs.

    Gradients flow through both correlation arguments since the same
    network embeds the target and the search region.
    Returns (params, loss log).
    """
    rng = np.random.default_rng(config.seed)
    params = init_params if init_params is not None else networks.init_appearance_params(profile, rng)
    lifted = networks.lift(params)
    nodes = networks.node_map(lifted)
    if pairs is None:
        pairs = pair_stream(dataset, "appearance", profile, rng, config.label_radius)

    def forward_one(pair):
        tape = GradTape()
        zf = networks.appearance_features(pair.target_patch, lifted, profile, tape=tape)
        xf = networks.appearance_features(pair.search_patch, lifted, profile, tape=tape)
        return tape, networks.appearance_score(zf, xf, lifted, tape=tape)

    log = _sgd_loop(forward_one, nodes, pairs, config)
    return params, log


def train_semantic(dataset: list, config: SgdConfig, profile: NetworkProfile,
                   backbone: SemanticBackboneParams,
                   multilevel: bool = True, attention: bool = True,
                   init_head: SemanticHeadParams | None = None, pairs=None):
    """Optimize the fusion convs and attention MLPs; the backbone stays frozen.

    Returns (head, loss log).
    """
    rng = np.random.default_rng(config.seed)
    head = init_head if init_head is not None else networks.init_semantic_head(
        profile, rng, multilevel=multilevel, attention=attention
    )
    digest_before = networks.params_digest(backbone)
    lifted = networks.lift(head)
    nodes = networks.node_map(lifted)
    if pairs is None:
        pairs = pair_stream(dataset, "semantic", profile, rng, config.label_radius)

    def forward_one(pair):
        tape = GradTape()
        z_feats = networks.semantic_features(pair.target_patch, backbone, profile)
        x_feats = networks.semantic_features(pair.search_patch, backbone, profile)
        return tape, networks.semantic_score_full(z_feats, x_feats, lifted, profile, tape=tape)

    log = _sgd_loop(forward_one, nodes, pairs, config)
    if networks.params_digest(backbone) != digest_before:
        raise NumericError("frozen backbone parameters changed during semantic training")
    return head, log


def train_joint(dataset: list, config: SgdConfig, profile: NetworkProfile,
                backbone: SemanticBackboneParams, blend: float,
                init_params: AppearanceParams | None = None,
                init_head: SemanticHeadParams | None = None, pairs=None):
    """Experiment mode: one loss on the blended response of both branches.

    The semantic side uses the basic single-level, no-attention head so
    the comparison isolates the training regime.  Returns
    (appearance params, head, loss log).
    """
    if not 0.0 <= blend <= 1.0:
        raise ContractViolationError(f"blend must be in [0, 1], got {blend}")
    rng = np.random.default_rng(config.seed)
    params = init_params if init_params is not None else networks.init_appearance_params(profile, rng)
    head = init_head if init_head is not None else networks.init_semantic_head(
        profile, rng, multilevel=False, attention=False
    )
    lifted_a = networks.lift(params)
    lifted_s = networks.lift(head)
    nodes = {f"appearance.{k}": v for k, v in networks.node_map(lifted_a).items()}
    nodes.update({f"semantic.{k}": v for k, v in networks.node_map(lifted_s).items()})
    if pairs is None:
        pairs = pair_stream(dataset, "joint", profile, rng, config.label_radius)
    half = (profile.search_size - profile.target_size) // 2

    def forward_one(pair):
        tape = GradTape()
        z_patch = pair.target_patch[half : half + profile.target_size,
                                    half : half + profile.target_size, :]
        zf = networks.appearance_features(z_patch, lifted_a, profile, tape=tape)
        xf = networks.appearance_features(pair.search_patch, lifted_a, profile, tape=tape)
        h_a = networks.appearance_score(zf, xf, lifted_a, tape=tape)
        z_feats = networks.semantic_features(pair.target_patch, backbone, profile)
        x_feats = networks.semantic_features(pair.search_patch, backbone, profile)
        h_s = networks.semantic_score_full(z_feats, x_feats, lifted_s, profile, tape=tape)
        return tape, tape.lincomb(blend, h_a, 1.0 - blend, h_s)

    log = _sgd_loop(forward_one, nodes, pairs, config)
    return params, head, log


# ---------------------------------------------------------------------------
# Classifier pretraining of the semantic backbone
# ---------------------------------------------------------------------------

def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def pretrain_backbone_classifier(images: list, labels: np.ndarray, config: SgdConfig,
                                 profile: NetworkProfile, holdout_fraction: float = 0.2):
    """Train the semantic backbone on shape classification, drop the head.

    A global-average-pool plus linear layer sits on the final conv output
    during pretraining only.  Returns (backbone, holdout accuracy).
    """
    classes = np.unique(labels)
    if classes.size < 2:
        raise ContractViolationError(
            f"classifier pretraining needs >= 2 classes, got {classes.size}"
        )
    rng = np.random.default_rng(config.seed)
    backbone = networks.init_semantic_backbone(profile, rng)
    n_classes = int(classes.size)
    feat_c = profile.snet_layers[-1].out_channels
    head_w = (rng.standard_normal((feat_c, n_classes)) / np.sqrt(feat_c)).astype(ops.DTYPE)
    head_b = np.zeros(n_classes, dtype=ops.DTYPE)

    order = rng.permutation(len(images))
    n_hold = max(1, int(len(images) * holdout_fraction))
    hold_idx = order[:n_hold]
    train_idx = order[n_hold:]
    if train_idx.size == 0:
        raise ContractViolationError("no training images left after holdout split")

    lifted = networks.lift(backbone)
    nodes = networks.node_map(lifted)
    w_node, b_node = Node(head_w), Node(head_b)
    nodes["head.w"] = w_node
    nodes["head.b"] = b_node
    optimizer = SgdOptimizer(nodes, config.momentum, config.grad_clip)

    def logits_for(image, tape=None):
        trunk = networks.semantic_backbone_trunk(
            image, lifted if tape is not None else backbone, tape, profile.snet_layers
        )
        if tape is None:
            pooled = trunk.mean(axis=(0, 1))
            return pooled @ w_node.value + b_node.value
        pooled = tape.reshape(tape.global_avg_pool(trunk), (1, -1))
        return tape.reshape(tape.add(tape.matmul(pooled, w_node), b_node), (-1,))

    for epoch in range(1, config.epochs + 1):
        lr = config.lr_for_epoch(epoch)
        perm = rng.permutation(train_idx)
        for start in range(0, perm.size, config.batch_size):
            batch = perm[start : start + config.batch_size]
            for idx in batch:
                tape = GradTape()
                logits = logits_for(images[idx], tape=tape)
                probs = _softmax(logits.value.astype(np.float64))
                loss = -np.log(max(probs[labels[idx]], 1e-12))
                if not np.isfinite(loss):
                    raise NumericError(f"non-finite pretraining loss at epoch {epoch}")
                grad = probs.astype(logits.value.dtype)
                grad[labels[idx]] -= 1.0
                tape.backward(logits, grad / batch.size)
            optimizer.step(lr)

    correct = 0
    for idx in hold_idx:
        logits = logits_for(images[idx])
        correct += int(np.argmax(logits) == labels[idx])
    accuracy = correct / hold_idx.size
    return backbone, accuracy
