"""Command-line surface.

Subcommands: gen-synthetic, pretrain-snet, train, track, eval,
lambda-search, ablation, dump-attention.  Every command is deterministic
given its seed and inputs.  Exit codes: 0 success, 2 input/contract
error, 3 numeric failure.

Configuration may come from a JSON file (``--config``); explicit flags
override file values.  Schema::

    {
      "profile": "desk" | "paper",
      "seed": int,
      "blend": float,                      # appearance weight in [0, 1]
      "appearance": bool, "semantic": bool,
      "multilevel": bool, "attention": bool,
      "sgd": {"lr_schedule": [[epochs, lr], ...], "steps_per_epoch": int,
              "batch_size": int, "momentum": float, "label_radius": float},
      "track": {"scale_step": float, "scale_penalty": float,
                "scale_damping": float, "window_influence": float,
                "response_upsample": int}
    }
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data, evaluation, figures, modelio, networks, tracking, training
from .errors import ContractViolationError, DataFormatError, NumericError
from .profiles import get_profile
from .tracking import TrackConfig

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3


@dataclass
class RunConfig:
    """Resolved run settings: config file values with flag overrides applied."""

    profile: str = "desk"
    seed: int = 0
    blend: float = 0.3
    appearance: bool = True
    semantic: bool = True
    multilevel: bool = False
    attention: bool = False
    sgd: dict = field(default_factory=dict)
    track: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.multilevel or self.attention) and not self.semantic:
            raise ContractViolationError(
                "multilevel/attention flags require the semantic branch"
            )
        if not (self.appearance or self.semantic):
            raise ContractViolationError("at least one branch must be enabled")

    @classmethod
    def load(cls, config_path, overrides: dict) -> "RunConfig":
        raw: dict = {}
        if config_path:
            try:
                raw = json.loads(Path(config_path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise DataFormatError(f"cannot read config {config_path}: {exc}") from exc
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise DataFormatError(f"unknown config keys: {sorted(unknown)}")
        merged = {**raw, **{k: v for k, v in overrides.items() if v is not None}}
        return cls(**merged)

    def sgd_config(self, **extra) -> training.SgdConfig:
        kwargs = dict(self.sgd)
        if "lr_schedule" in kwargs:
            kwargs["lr_schedule"] = tuple((int(n), float(lr)) for n, lr in kwargs["lr_schedule"])
        kwargs.setdefault("seed", self.seed)
        kwargs.update(extra)
        return training.SgdConfig(**kwargs)

    def track_config(self) -> TrackConfig:
        return TrackConfig(blend=self.blend, **self.track)


def _write_config_snapshot(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.__dict__, indent=2, default=str) + "\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_synthetic(args) -> int:
    out = Path(args.out)
    if args.spec:
        specs = data.read_spec_file(args.spec)
    elif args.preset == "benchmark":
        specs = data.benchmark_specs(n_sequences=args.sequences, frames=args.frames, seed=args.seed)
    elif args.preset == "training":
        specs = data.training_specs(n_tracklets=args.sequences, frames=args.frames, seed=args.seed)
    else:
        raise ContractViolationError("gen-synthetic needs --spec or --preset")
    for spec in specs:
        data.generate_synthetic(spec, out)
    print(f"wrote {len(specs)} sequence(s) to {out}")
    if args.classification:
        cls_dir = out / "classification"
        profile = get_profile(args.profile)
        data.generate_classification_set(
            cls_dir, count_per_class=args.classification,
            image_size=profile.target_size, seed=args.seed + 1,
        )
        print(f"wrote {args.classification} images/class to {cls_dir}")
    return EXIT_OK


def cmd_pretrain_snet(args) -> int:
    cfg = RunConfig.load(args.config, {"profile": args.profile, "seed": args.seed})
    profile = get_profile(cfg.profile)
    images, labels, classes = data.load_classification_set(args.data)
    sgd = cfg.sgd_config() if cfg.sgd else cfg.sgd_config(
        lr_schedule=((6, 0.003), (2, 0.001)), steps_per_epoch=1, batch_size=8
    )
    backbone, accuracy = training.pretrain_backbone_classifier(images, labels, sgd, profile)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    modelio.save_backbone(backbone, out, profile, meta={"holdout_accuracy": accuracy, "classes": classes})
    print(f"pretrained backbone on {len(images)} images, holdout accuracy {accuracy:.3f}")
    print(f"saved {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config, {
        "profile": args.profile, "seed": args.seed, "blend": args.blend,
        "multilevel": args.multilevel, "attention": args.attention,
    })
    profile = get_profile(cfg.profile)
    dataset = data.load_dataset(args.data)
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    sgd = cfg.sgd_config()
    _write_config_snapshot(cfg, run_dir / "config.json")

    if args.branch in ("semantic", "joint") and not args.snet:
        raise ContractViolationError(f"--snet (pretrained backbone) is required for {args.branch} training")

    if args.branch == "appearance":
        params, log = training.train_appearance(dataset, sgd, profile)
        modelio.save_bundle(run_dir, profile, appearance=params)
    elif args.branch == "semantic":
        backbone = modelio.load_backbone(args.snet, profile)
        head, log = training.train_semantic(
            dataset, sgd, profile, backbone,
            multilevel=cfg.multilevel, attention=cfg.attention,
        )
        modelio.save_bundle(run_dir, profile, backbone=backbone, head=head)
    elif args.branch == "joint":
        backbone = modelio.load_backbone(args.snet, profile)
        params, head, log = training.train_joint(dataset, sgd, profile, backbone, blend=cfg.blend)
        modelio.save_bundle(run_dir, profile, appearance=params, backbone=backbone, head=head)
    else:
        raise ContractViolationError(f"unknown branch {args.branch!r}")

    log.to_csv(run_dir / "loss.csv")
    figures.save_loss_plot(log.rows, run_dir / "loss.png")
    means = log.epoch_means()
    print(f"trained {args.branch}: {sgd.epochs} epochs, "
          f"first-epoch loss {means[1]:.4f}, last-epoch loss {means[sgd.epochs]:.4f}")
    print(f"run artifacts in {run_dir}")
    return EXIT_OK


def _load_models(args_model, profile_name=None):
    profile = get_profile(profile_name) if profile_name else None
    return modelio.load_bundle(args_model, profile)


def cmd_track(args) -> int:
    models = _load_models(args.model, args.profile)
    config = TrackConfig(blend=args.blend if args.blend is not None else 0.3)
    sequence = data.load_sequence(args.sequence)
    tracker = tracking.Tracker(models, config)
    tracker.init(sequence.frame(0), sequence.boxes[0])
    boxes = [sequence.boxes[0]]
    responses = []
    start = time.perf_counter()
    for i in range(1, len(sequence)):
        boxes.append(tracker.update(sequence.frame(i)))
        if args.dump_responses:
            responses.append(tracker.state.last_response.copy())
    elapsed = time.perf_counter() - start
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, box in enumerate(boxes, start=1):
        x, y, w, h = box.to_topleft()
        lines.append(f"{i},{x:.2f},{y:.2f},{w:.2f},{h:.2f}")
    out.write_text("\n".join(lines) + "\n")
    fps = (len(sequence) - 1) / elapsed if elapsed > 0 else float("inf")
    print(f"tracked {len(sequence)} frames at {fps:.1f} fps -> {out}")
    if args.dump_responses and responses:
        data.save_response_dump(responses, args.dump_responses)
        print(f"response dump -> {args.dump_responses}")
    return EXIT_OK


def cmd_eval(args) -> int:
    models = _load_models(args.model, args.profile)
    blend = args.blend if args.blend is not None else 0.3
    config = TrackConfig(blend=blend)
    dataset = data.load_dataset(args.dataset)
    report = evaluation.run_ope(
        dataset, evaluation.model_tracker_factory(models, config), jobs=args.jobs
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save_json(out / "report.json")
    report.save_curves_csv(out / "curves.csv")
    if not args.no_figures:
        figures.save_success_plot(report, out / "success_plot.png")
        figures.save_precision_plot(report, out / "precision_plot.png")
    print(f"AUC {report.auc:.4f}  precision@20 {report.precision_at_20:.4f}  "
          f"fps {report.fps:.1f} (reported only)")
    if report.skipped:
        print(f"skipped {len(report.skipped)} sequence(s): {report.skipped}")
    print(f"report in {out}")
    return EXIT_OK


def cmd_lambda_search(args) -> int:
    models = _load_models(args.model, args.profile)
    dataset = data.load_dataset(args.dataset)
    best, rows = evaluation.grid_search_blend(models, dataset, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluation.save_blend_table(rows, out / "lambda_table.csv")
    if not args.no_figures:
        figures.save_blend_plot(rows, out / "lambda_plot.png")
    for row in rows:
        print(f"lambda {row['blend']:.1f}: AUC {row['auc']:.4f}  "
              f"precision@20 {row['precision_at_20']:.4f}")
    print(f"best lambda {best:.1f}; table in {out}")
    return EXIT_OK


def cmd_ablation(args) -> int:
    root = Path(args.models)
    variants = {}
    for key in evaluation.VARIANT_ORDER:
        bundle = root / key
        variants[key] = modelio.load_bundle(bundle) if (bundle / "model.json").exists() else None
    dataset = data.load_dataset(args.dataset)
    blend = args.blend if args.blend is not None else 0.3
    rows = evaluation.ablation_table(variants, dataset, TrackConfig(blend=blend), jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluation.save_ablation_csv(rows, out / "ablation.csv")
    if not args.no_figures:
        figures.save_ablation_plot(rows, out / "ablation.png")
    for r in rows:
        auc = f"{r['auc']:.4f}" if r["auc"] is not None else "absent"
        print(f"{r['variant']:>16}: AUC {auc}")
    print(f"table in {out}")
    return EXIT_OK


def cmd_dump_attention(args) -> int:
    models = _load_models(args.model, args.profile)
    if models.head is None or models.head.attention is None:
        raise ContractViolationError("model bundle has no attention module to dump")
    sequence = data.load_sequence(args.sequence)
    state = tracking.init(sequence.frame(0), sequence.boxes[0], models)
    rows = tracking.dump_attention(state)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = ["layer,rank,channel_index,weight"]
    lines += [f"{layer},{rank},{channel},{weight:.6f}" for layer, rank, channel, weight in rows]
    out.write_text("\n".join(lines) + "\n")
    if not args.no_figures:
        figures.save_attention_plot(rows, out.with_suffix(".png"))
    print(f"dumped {len(rows)} channel weights -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualsiam",
        description="Two-branch siamese tracker: training, tracking, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, figures_flag=True):
        p.add_argument("--profile", choices=["paper", "desk"], default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", default=None, help="JSON config file; flags override")
        if figures_flag:
            p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")

    p = sub.add_parser("gen-synthetic", help="generate synthetic sequences")
    p.add_argument("--spec", default=None, help="JSON spec file (one spec or a list)")
    p.add_argument("--preset", choices=["benchmark", "training"], default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--sequences", type=int, default=20)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--classification", type=int, default=0,
                   help="also emit N labeled shape images per class")
    p.add_argument("--profile", choices=["paper", "desk"], default="desk")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("pretrain-snet", help="pretrain the semantic backbone on shape classification")
    p.add_argument("--data", required=True, help="classification image directory")
    p.add_argument("--out", required=True, help="output backbone weights file")
    add_common(p, figures_flag=False)
    p.set_defaults(func=cmd_pretrain_snet)

    p = sub.add_parser("train", help="train a branch offline")
    p.add_argument("--branch", choices=["appearance", "semantic", "joint"], required=True)
    p.add_argument("--data", required=True, help="tracklet dataset directory")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--snet", default=None, help="pretrained backbone weights (semantic/joint)")
    p.add_argument("--multilevel", action="store_true", default=None)
    p.add_argument("--attention", action="store_true", default=None)
    p.add_argument("--lambda", dest="blend", type=float, default=None)
    add_common(p, figures_flag=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="track one sequence")
    p.add_argument("--model", required=True, help="model bundle directory")
    p.add_argument("--sequence", required=True)
    p.add_argument("--lambda", dest="blend", type=float, default=None)
    p.add_argument("--out", required=True, help="output box file (frame,x,y,w,h)")
    p.add_argument("--dump-responses", default=None, help="optional binary response dump")
    p.add_argument("--profile", choices=["paper", "desk"], default=None)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="one-pass evaluation over a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lambda", dest="blend", type=float, default=None)
    p.add_argument("--jobs", type=int, default=1)
    add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("lambda-search", help="grid search the branch blend weight")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True, help="validation set (keep disjoint from test)")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    add_common(p)
    p.set_defaults(func=cmd_lambda_search)

    p = sub.add_parser("ablation", help="evaluate the six standard model variants")
    p.add_argument("--models", required=True, help="directory of variant bundle subdirectories")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lambda", dest="blend", type=float, default=None)
    p.add_argument("--jobs", type=int, default=1)
    add_common(p)
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("dump-attention", help="write sorted channel attention weights")
    p.add_argument("--model", required=True)
    p.add_argument("--sequence", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    add_common(p)
    p.set_defaults(func=cmd_dump_attention)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ContractViolationError, DataFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
