"""Model bundles on disk: a directory of weights containers plus a summary.

Layout::

    <bundle>/
      model.json          {"profile": ..., "appearance": bool, "semantic": bool,
                           "multilevel": bool, "attention": bool}
      appearance.dsw      present when the appearance branch exists
      backbone.dsw        frozen semantic feature extractor
      head.dsw            fusion convs (+ attention MLPs) of the semantic branch

Loading validates the profile and every array shape; mismatches name the
offending layer.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import networks
from .errors import DataFormatError
from .profiles import NetworkProfile, get_profile
from .tracking import TrackerModels
from .weights import assign_named_arrays, load_weights, save_weights


def save_appearance(params, path, profile: NetworkProfile) -> None:
    save_weights(params.named_arrays(), path, kind="appearance", profile=profile.name)


def save_backbone(params, path, profile: NetworkProfile, meta: dict | None = None) -> None:
    save_weights(params.named_arrays(), path, kind="semantic_backbone",
                 profile=profile.name, meta=meta)


def save_head(head, path, profile: NetworkProfile) -> None:
    save_weights(
        head.named_arrays(), path, kind="semantic_head", profile=profile.name,
        meta={"taps": list(head.taps), "attention": head.attention is not None},
    )


def _check(header: dict, kind: str, profile: NetworkProfile, path) -> None:
    if header["kind"] != kind:
        raise DataFormatError(f"{path}: container kind {header['kind']!r}, expected {kind!r}")
    if header["profile"] != profile.name:
        raise DataFormatError(
            f"{path}: weights were built for profile {header['profile']!r}, "
            f"model expects {profile.name!r}"
        )


def load_appearance(path, profile: NetworkProfile):
    header, arrays = load_weights(path)
    _check(header, "appearance", profile, path)
    params = networks.init_appearance_params(profile, np.random.default_rng(0))
    assign_named_arrays(params, arrays, str(path))
    return params


def load_backbone(path, profile: NetworkProfile):
    header, arrays = load_weights(path)
    _check(header, "semantic_backbone", profile, path)
    params = networks.init_semantic_backbone(profile, np.random.default_rng(0))
    assign_named_arrays(params, arrays, str(path))
    return params


def load_head(path, profile: NetworkProfile):
    header, arrays = load_weights(path)
    _check(header, "semantic_head", profile, path)
    taps = tuple(header["meta"]["taps"])
    multilevel = len(taps) > 1
    head = networks.init_semantic_head(
        profile, np.random.default_rng(0),
        multilevel=multilevel, attention=bool(header["meta"]["attention"]),
    )
    if head.taps != taps:
        raise DataFormatError(f"{path}: tap set {taps} does not match profile taps {head.taps}")
    assign_named_arrays(head, arrays, str(path))
    return head


def save_bundle(out_dir, profile: NetworkProfile, appearance=None, backbone=None, head=None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {
        "profile": profile.name,
        "appearance": appearance is not None,
        "semantic": head is not None,
        "multilevel": bool(head is not None and len(head.taps) > 1),
        "attention": bool(head is not None and head.attention is not None),
    }
    if appearance is not None:
        save_appearance(appearance, out_dir / "appearance.dsw", profile)
    if backbone is not None:
        save_backbone(backbone, out_dir / "backbone.dsw", profile)
    if head is not None:
        save_head(head, out_dir / "head.dsw", profile)
    (out_dir / "model.json").write_text(json.dumps(summary, indent=2) + "\n")
    return out_dir


def load_bundle(bundle_dir, profile: NetworkProfile | None = None) -> TrackerModels:
    bundle_dir = Path(bundle_dir)
    summary_path = bundle_dir / "model.json"
    if not summary_path.exists():
        raise DataFormatError(f"{bundle_dir}: missing model.json")
    try:
        summary = json.loads(summary_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{summary_path}: corrupt summary: {exc}") from exc
    if profile is None:
        profile = get_profile(summary["profile"])
    appearance = None
    backbone = None
    head = None
    if summary.get("appearance"):
        appearance = load_appearance(bundle_dir / "appearance.dsw", profile)
    if summary.get("semantic"):
        backbone = load_backbone(bundle_dir / "backbone.dsw", profile)
        head = load_head(bundle_dir / "head.dsw", profile)
    return TrackerModels(profile=profile, appearance=appearance, backbone=backbone, head=head)
