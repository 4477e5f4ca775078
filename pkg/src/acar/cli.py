"""Command-line entry points tying the modules into reproducible runs.

Subcommands: gen-data, train, bank-build, eval, visualize, ablate.
Configuration is a plain key=value text file; unknown keys are rejected
and every command logs the fully resolved configuration next to its
primary output. All commands exit nonzero with a one-line diagnostic on
malformed input. ACAR_THREADS caps ablate parallelism.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .bank import KIND_ACFB, KIND_LFB, FeatureBank, build_bank
from .metrics import export_attention
from .optim import OptimizerConfig
from .pipeline import (ACARModel, ModelConfig, evaluate_model, load_model,
                       prepare_samples, save_model, train_model)
from .relation import HR2OConfig
from .synth import (SceneGenConfig, VideoSample, generate, load_dataset,
                    save_dataset)


class ConfigError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes"):
        return True
    if s.lower() in ("0", "false", "no"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _parse_int_list(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()] if s else []


# key -> (parser, default)
CONFIG_SCHEMA: dict = {
    "variant": (str, "hr2o"),
    "hr2o_d": (int, 32),
    "hr2o_depth": (int, 2),
    "hr2o_dropout": (float, 0.2),
    "hr2o_kernel": (int, 3),
    "bank_w": (int, 3),
    "bank_path": (str, ""),
    "detector_threshold": (float, 0.85),
    "detector_noise": (float, 0.0),
    "base_lr": (float, 0.1),
    "warmup_steps": (int, 50),
    "decay_steps": (_parse_int_list, []),
    "decay_factor": (float, 0.1),
    "momentum": (float, 0.9),
    "weight_decay": (float, 1e-7),
    "nesterov": (_parse_bool, True),
    "epochs": (int, 10),
    "batch_size": (int, 16),
    "early_stop_acc": (float, -1.0),
    "val_fraction": (float, 0.1),
    "seed": (int, 0),
    "feature_h": (int, 16),
    "feature_w": (int, 16),
    "clip_len": (int, 2),
    "feature_noise": (float, 0.0),
    "grid_size": (int, 8),
    "object_types": (int, 4),
    "actors": (int, 3),
    "scene_count": (int, 200),
    "delay_k": (int, 0),
    "video_len": (int, 0),          # 0 = derive from delay
    "inclip_fraction": (float, 0.0),
    "target_type": (int, 1),
}


def parse_config(path: str, seed_override: int | None = None) -> dict:
    cfg = {k: v for k, (_, v) in CONFIG_SCHEMA.items()}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for ln, line in enumerate(lines, 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{ln}: expected key=value")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"{path}:{ln}: unknown key {key!r}")
        parser = CONFIG_SCHEMA[key][0]
        try:
            cfg[key] = parser(value)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"{path}:{ln}: bad value for {key}: {exc}") from exc
    if seed_override is not None:
        cfg["seed"] = seed_override
    return cfg


def write_resolved_config(cfg: dict, out_path: str) -> None:
    with open(out_path, "w", encoding="utf-8") as fh:
        for key in sorted(cfg):
            value = cfg[key]
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            fh.write(f"{key}={value}\n")


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(
        variant=cfg["variant"],
        hr2o=HR2OConfig(d=cfg["hr2o_d"], depth=cfg["hr2o_depth"],
                        dropout_p=cfg["hr2o_dropout"], kernel=cfg["hr2o_kernel"]),
        bank_w=cfg["bank_w"],
        detector_threshold=cfg["detector_threshold"],
        detector_noise=cfg["detector_noise"],
        optimizer=OptimizerConfig(
            base_lr=cfg["base_lr"], warmup_steps=cfg["warmup_steps"],
            decay_steps=cfg["decay_steps"], decay_factor=cfg["decay_factor"],
            momentum=cfg["momentum"], weight_decay=cfg["weight_decay"],
            nesterov=cfg["nesterov"]),
        seed=cfg["seed"],
        feature_h=cfg["feature_h"], feature_w=cfg["feature_w"],
        clip_len=cfg["clip_len"], feature_noise=cfg["feature_noise"],
    )


def scene_config(cfg: dict) -> SceneGenConfig:
    return SceneGenConfig(
        grid_size=cfg["grid_size"], object_types=cfg["object_types"],
        actors=cfg["actors"], count=cfg["scene_count"], delay_k=cfg["delay_k"],
        noise=cfg["feature_noise"],
        video_len=cfg["video_len"] if cfg["video_len"] > 0 else None,
        inclip_fraction=cfg["inclip_fraction"], target_type=cfg["target_type"],
    )


def _split_train_val(videos: list[VideoSample], val_fraction: float,
                     ) -> tuple[list[VideoSample], list[VideoSample]]:
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError("val_fraction must be in (0, 1)")
    n_val = max(1, int(round(len(videos) * val_fraction)))
    if n_val >= len(videos):
        raise ConfigError("dataset too small for the validation split")
    return videos[:-n_val], videos[-n_val:]


def _load_bank_if_needed(mc: ModelConfig, cfg: dict) -> FeatureBank | None:
    if not mc.uses_bank:
        return None
    if not cfg["bank_path"]:
        raise ConfigError(f"variant {mc.variant!r} requires bank_path in the config")
    bank = FeatureBank.load(cfg["bank_path"])
    expected = KIND_LFB if mc.variant == "lfb" else KIND_ACFB
    if bank.kind != expected:
        raise ConfigError(f"bank kind {bank.kind!r} does not match variant {mc.variant!r}")
    return bank


def _train_once(cfg: dict, videos, meta: dict, bank: FeatureBank | None):
    mc = model_config(cfg)
    train_videos, val_videos = _split_train_val(videos, cfg["val_fraction"])
    object_types = meta.get("types", cfg["object_types"])
    det_rng = np.random.default_rng(np.random.SeedSequence(mc.seed).spawn(4)[3])
    train_s = prepare_samples(train_videos, mc, object_types, det_rng, bank=bank)
    val_s = prepare_samples(val_videos, mc, object_types, det_rng, bank=bank)
    early = cfg["early_stop_acc"] if cfg["early_stop_acc"] > 0 else None
    model, lines, history = train_model(mc, object_types + 4, train_s, val_s,
                                        epochs=cfg["epochs"],
                                        batch_size=cfg["batch_size"], bank=bank,
                                        early_stop_acc=early)
    return model, lines, history


# -- commands ----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = parse_config(args.config, args.seed)
    videos = generate(cfg["seed"], scene_config(cfg))
    save_dataset(args.out, videos, scene_config(cfg))
    write_resolved_config(cfg, args.out + ".config")
    print(f"wrote {len(videos)} videos to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    videos, meta = load_dataset(args.data)
    mc = model_config(cfg)
    bank = _load_bank_if_needed(mc, cfg)
    model, lines, _ = _train_once(cfg, videos, meta, bank)
    save_model(args.out_ckpt, model)
    metrics_path = args.out_ckpt + ".metrics"
    with open(metrics_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
    write_resolved_config(cfg, args.out_ckpt + ".config")
    print(f"wrote checkpoint {args.out_ckpt} and metrics {metrics_path}")
    return 0


def cmd_bank_build(args) -> int:
    model = load_model(args.ckpt)
    videos, _ = load_dataset(args.data)
    kind = KIND_LFB if args.kind == "lfb" else KIND_ACFB
    bank = build_bank(model, videos, kind=kind, window_w=model.cfg.bank_w)
    bank.save(args.out_bank)
    n = sum(len(v) for v in bank.entries.values())
    print(f"archived {n} features into {args.out_bank}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.ckpt)
    videos, meta = load_dataset(args.data)
    bank = FeatureBank.load(args.bank) if args.bank else None
    if model.cfg.uses_bank and bank is None:
        raise ConfigError(f"variant {model.cfg.variant!r} needs --bank")
    object_types = meta.get("types", model.context_channels - 4)
    det_rng = np.random.default_rng(np.random.SeedSequence(model.cfg.seed).spawn(5)[4])
    samples = prepare_samples(videos, model.cfg, object_types, det_rng, bank=bank)
    stats = evaluate_model(model, samples, bank=bank)
    report = [
        f"videos\t{len(videos)}",
        f"loss\t{stats['loss']:.6f}",
        f"pose_acc\t{stats['pose_acc']:.6f}",
        f"inter_acc\t{stats['inter_acc']:.6f}",
        f"map\t{stats['map']:.6f}",
    ]
    with open(args.report, "w", encoding="utf-8") as fh:
        fh.write("\n".join(report) + "\n")
    print("\n".join(report))
    return 0


def cmd_visualize(args) -> int:
    model = load_model(args.ckpt)
    videos, meta = load_dataset(args.data)
    matches = [v for v in videos if v.video_id == args.scene_id]
    if not matches:
        raise ConfigError(f"scene {args.scene_id!r} not in {args.data}")
    video = matches[0]
    bank = FeatureBank.load(args.bank) if args.bank else None
    if model.cfg.uses_bank and bank is None:
        raise ConfigError(f"variant {model.cfg.variant!r} needs --bank")
    object_types = meta.get("types", model.context_channels - 4)
    from .synth import render_clip
    clip = render_clip(video, object_types, model.cfg.feature_h, model.cfg.feature_w,
                       clip_len=model.cfg.clip_len, start=video.key_time)
    boxes = [a.box for a in video.key_scene.actors]
    _, atts = model.forward_scene(clip, boxes, bank=bank, video_id=video.video_id,
                                  time_s=video.key_time)
    if not atts:
        raise ConfigError(f"variant {model.cfg.variant!r} produces no attention maps")
    paths = export_attention(atts[-1], args.out_dir, prefix=f"{args.scene_id}_att")
    print(f"wrote {len(paths)} files to {args.out_dir}")
    return 0


_ABLATE_ROWS = (
    ("baseline", {"variant": "baseline"}),
    ("first_order", {"variant": "first_order"}),
    ("hr2o_nl", {"variant": "hr2o"}),
    ("hr2o_rn", {"variant": "rn"}),
    ("hr2o_avg", {"variant": "avg"}),
    ("actor_first", {"variant": "actor_first"}),
    ("hr2o_depth1", {"variant": "hr2o", "hr2o_depth": 1}),
    ("hr2o_depth2", {"variant": "hr2o", "hr2o_depth": 2}),
    ("hr2o_depth3", {"variant": "hr2o", "hr2o_depth": 3}),
)
_ABLATE_BANK_ROWS = (
    ("acar_acfb", {"variant": "acar"}, KIND_ACFB),
    ("hr2o_lfb", {"variant": "lfb"}, KIND_LFB),
)


def _threads() -> int:
    value = os.environ.get("ACAR_THREADS", "1")
    try:
        return max(1, int(value))
    except ValueError:
        raise ConfigError(f"ACAR_THREADS must be an integer, got {value!r}")


def cmd_ablate(args) -> int:
    cfg = parse_config(args.config, args.seed)
    videos = generate(cfg["seed"], scene_config(cfg))
    meta = {"types": cfg["object_types"]}

    def run_row(row) -> tuple[str, dict]:
        name, overrides = row[0], row[1]
        row_cfg = dict(cfg)
        row_cfg.update(overrides)
        _, _, history = _train_once(row_cfg, videos, meta, None)
        return name, history[-1] if history else {"pose_acc": 0.0, "inter_acc": 0.0,
                                                  "map": 0.0, "loss": 0.0}

    workers = _threads()
    results: dict[str, dict] = {}
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for name, stats in pool.map(run_row, _ABLATE_ROWS):
                results[name] = stats
    else:
        for row in _ABLATE_ROWS:
            name, stats = run_row(row)
            results[name] = stats

    # Bank rows reuse a frozen no-bank model for archiving (two-stage recipe).
    pre_cfg = dict(cfg)
    pre_cfg.update({"variant": "hr2o"})
    pretrained, _, _ = _train_once(pre_cfg, videos, meta, None)
    for name, overrides, kind in _ABLATE_BANK_ROWS:
        bank = build_bank(pretrained, videos, kind=kind, window_w=cfg["bank_w"])
        row_cfg = dict(cfg)
        row_cfg.update(overrides)
        _, _, history = _train_once(row_cfg, videos, meta, bank)
        results[name] = history[-1] if history else {"pose_acc": 0.0, "inter_acc": 0.0,
                                                     "map": 0.0, "loss": 0.0}

    lines = ["variant\tpose_acc\tinter_acc\tmap"]
    for name, _o in _ABLATE_ROWS:
        s = results[name]
        lines.append(f"{name}\t{s['pose_acc']:.6f}\t{s['inter_acc']:.6f}\t{s['map']:.6f}")
    for name, _o, _k in _ABLATE_BANK_ROWS:
        s = results[name]
        lines.append(f"{name}\t{s['pose_acc']:.6f}\t{s['inter_acc']:.6f}\t{s['map']:.6f}")
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    write_resolved_config(cfg, args.out + ".config")
    print("\n".join(lines))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acar",
                                     description="actor-context-actor relation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a variant, write checkpoint + metrics log")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-ckpt", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bank-build", help="archive features with a frozen checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-bank", required=True)
    p.add_argument("--kind", choices=("acfb", "lfb"), default="acfb")
    p.set_defaults(func=cmd_bank_build)

    p = sub.add_parser("eval", help="report accuracy and frame-mAP@0.5")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bank", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("visualize", help="dump attention maps as PGM/CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scene-id", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--bank", default=None)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("ablate", help="run the variant comparison matrix")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:   # one-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
