"""Command-line driver: dataset generation, training, evaluation, analysis.

Configuration is a flat key=value file; every key has a default, unknown
keys are rejected, and the effective configuration is echoed into the
output directory so runs are self-describing.  Precedence is command
line flag over config file over default.  All randomness flows from the
single `seed` key.
"""

from __future__ import annotations

import argparse
import sys
from collections import OrderedDict
from dataclasses import replace
from pathlib import Path

import numpy as np

from .backbone import backbone_forward
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import BanError, ConfigError
from .evaluation import (
    dataset_ground_truth,
    evaluate,
    format_metrics,
    params_from_checkpoint,
    run_detector,
    write_metrics_csv,
)
from .geometry import Box
from .head import (
    DISPLAY_NAMES,
    BanConfig,
    contribution_analysis,
    forward,
    local_activation_map,
    subnet_kinds,
    write_contribution_csv,
)
from .pooling import PoolMode
from .rng import derive_seed
from .synthetic import (
    CLASS_NAMES,
    SyntheticSpec,
    generate_dataset,
    load_dataset,
    write_ppm,
)
from .tensor import Tensor
from .training import SgdConfig, train, write_loss_csv

_DEFAULTS = OrderedDict(
    [
        ("seed", "0"),
        ("workers", "1"),
        ("data_dir", "data"),
        ("contexts", "S+V+B"),
        ("k", "5"),
        ("head_mode", "psroi"),
        ("shared_features", "true"),
        ("num_classes", "3"),
        ("trunk_channels", "1024"),
        ("roi_feature_channels", "256"),
        ("lr", "0.001"),
        ("momentum", "0.9"),
        ("weight_decay", "0.0001"),
        ("schedule", "1400:0.0001"),
        ("iterations", "2000"),
        ("images_per_batch", "2"),
        ("rois_per_image", "300"),
        ("ohem_keep", "128"),
        ("train_images", "500"),
        ("test_images", "100"),
        ("image_size", "128x128"),
        ("min_objects", "1"),
        ("max_objects", "4"),
        ("min_size", "16"),
        ("max_size", "48"),
        ("noise", "12"),
    ]
)

# context sets driven by the ablation grid, with large-scale reference
# mAP@0.5 (%) printed next to each local result for comparison
ABLATION_GRID = OrderedDict(
    [
        ("none", (frozenset(), 79.54)),
        ("S", (frozenset("S"), 80.23)),
        ("V", (frozenset("V"), 80.01)),
        ("B", (frozenset("B"), 79.80)),
        ("S+V", (frozenset(("S", "V")), 80.39)),
        ("S+V+B", (frozenset(("S", "V", "B")), 80.75)),
    ]
)


def _parse_int(key, raw):
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{key} wants an integer, got {raw!r}") from None


def _parse_float(key, raw):
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key} wants a number, got {raw!r}") from None


def _parse_bool(key, raw):
    lowered = raw.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ConfigError(f"{key} wants true/false, got {raw!r}")


def _parse_contexts(raw):
    text = raw.strip()
    if text.lower() in ("none", ""):
        return frozenset()
    families = [part.strip() for part in text.split("+")]
    for fam in families:
        if fam not in ("S", "V", "B"):
            raise ConfigError(f"contexts must combine S, V, B; got {raw!r}")
    return frozenset(families)


def _parse_schedule(raw):
    text = raw.strip()
    if not text or text.lower() == "none":
        return ()
    steps = []
    for part in text.split(","):
        if ":" not in part:
            raise ConfigError(f"schedule steps look like ITER:LR, got {part!r}")
        it_text, lr_text = part.split(":", 1)
        steps.append((_parse_int("schedule", it_text), _parse_float("schedule", lr_text)))
    return tuple(steps)


def _parse_size(raw):
    text = raw.strip().lower()
    if "x" not in text:
        raise ConfigError(f"image_size looks like WIDTHxHEIGHT, got {raw!r}")
    w_text, h_text = text.split("x", 1)
    return (_parse_int("image_size", w_text), _parse_int("image_size", h_text))


class RunConfig:
    """Flat configuration with raw string values and typed accessors."""

    def __init__(self, values: "OrderedDict[str, str]"):
        self.values = values

    @classmethod
    def from_sources(cls, config_path=None, overrides=None) -> "RunConfig":
        values = OrderedDict(_DEFAULTS)
        if config_path is not None:
            seen = set()
            text = Path(config_path).read_text()
            for lineno, line in enumerate(text.splitlines(), start=1):
                stripped = line.strip()
                if not stripped or stripped.startswith("#"):
                    continue
                if "=" not in stripped:
                    raise ConfigError(
                        f"{config_path}:{lineno}: expected key=value, got {line!r}"
                    )
                key, raw = (part.strip() for part in stripped.split("=", 1))
                if key not in values:
                    raise ConfigError(f"{config_path}:{lineno}: unknown key {key!r}")
                if key in seen:
                    raise ConfigError(f"{config_path}:{lineno}: duplicate key {key!r}")
                seen.add(key)
                values[key] = raw
        for key, raw in (overrides or {}).items():
            if key not in values:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = str(raw)
        cfg = cls(values)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        self.ban_config()
        self.sgd_config()
        self.synthetic_spec("train", 1)
        if self.workers != 1:
            raise ConfigError("workers other than 1 are not supported")

    def text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.values.items())

    @property
    def seed(self) -> int:
        return _parse_int("seed", self.values["seed"])

    @property
    def workers(self) -> int:
        return _parse_int("workers", self.values["workers"])

    @property
    def data_dir(self) -> Path:
        return Path(self.values["data_dir"])

    @property
    def num_classes(self) -> int:
        return _parse_int("num_classes", self.values["num_classes"])

    @property
    def rois_per_image(self) -> int:
        return _parse_int("rois_per_image", self.values["rois_per_image"])

    def ban_config(self) -> BanConfig:
        mode_text = self.values["head_mode"].strip().lower()
        if mode_text not in ("psroi", "roi"):
            raise ConfigError(f"head_mode must be psroi or roi, got {mode_text!r}")
        return BanConfig(
            contexts=_parse_contexts(self.values["contexts"]),
            k=_parse_int("k", self.values["k"]),
            head_mode=PoolMode.PSROI if mode_text == "psroi" else PoolMode.ROI,
            shared_features=_parse_bool(
                "shared_features", self.values["shared_features"]
            ),
            num_classes=self.num_classes,
            trunk_channels=_parse_int(
                "trunk_channels", self.values["trunk_channels"]
            ),
            roi_feature_channels=_parse_int(
                "roi_feature_channels", self.values["roi_feature_channels"]
            ),
        )

    def sgd_config(self) -> SgdConfig:
        return SgdConfig(
            lr=_parse_float("lr", self.values["lr"]),
            momentum=_parse_float("momentum", self.values["momentum"]),
            weight_decay=_parse_float("weight_decay", self.values["weight_decay"]),
            schedule=_parse_schedule(self.values["schedule"]),
            iterations=_parse_int("iterations", self.values["iterations"]),
            images_per_batch=_parse_int(
                "images_per_batch", self.values["images_per_batch"]
            ),
            rois_per_image=self.rois_per_image,
            ohem_keep=_parse_int("ohem_keep", self.values["ohem_keep"]),
        )

    def synthetic_spec(self, split: str, num_images=None) -> SyntheticSpec:
        if num_images is None:
            key = f"{split}_images"
            num_images = _parse_int(key, self.values[key])
        return SyntheticSpec(
            num_images=num_images,
            image_size=_parse_size(self.values["image_size"]),
            num_classes=self.num_classes,
            min_objects=_parse_int("min_objects", self.values["min_objects"]),
            max_objects=_parse_int("max_objects", self.values["max_objects"]),
            min_size=_parse_int("min_size", self.values["min_size"]),
            max_size=_parse_int("max_size", self.values["max_size"]),
            noise=_parse_int("noise", self.values["noise"]),
            rng_seed=derive_seed(self.seed, split),
        )

    def class_names(self):
        return CLASS_NAMES[: self.num_classes]


def _prepare_out(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.text())
    return out


def cmd_gen_data(cfg: RunConfig, out_dir) -> int:
    out = _prepare_out(cfg, out_dir)
    train_spec = cfg.synthetic_spec("train")
    test_spec = cfg.synthetic_spec("test")
    generate_dataset(train_spec, out / "train")
    generate_dataset(test_spec, out / "test")
    print(
        f"wrote {train_spec.num_images} train and {test_spec.num_images} test "
        f"images under {out}"
    )
    return 0


def cmd_train(cfg: RunConfig, out_dir) -> int:
    dataset = load_dataset(cfg.data_dir / "train")
    result = train(dataset, cfg.ban_config(), cfg.sgd_config(), cfg.seed)
    out = _prepare_out(cfg, out_dir)
    save_checkpoint(out / "checkpoint.ckpt", result.params)
    write_loss_csv(out / "loss.csv", result.loss_rows)
    if result.loss_rows:
        last = result.loss_rows[-1]
        print(f"final loss {last.loss_total:.6f} after {len(result.loss_rows)} iterations")
    print(f"checkpoint written to {out / 'checkpoint.ckpt'}")
    return 0


def _load_params(checkpoint_path):
    if checkpoint_path is None:
        raise ConfigError("this command needs --checkpoint")
    return params_from_checkpoint(load_checkpoint(checkpoint_path))


def cmd_eval(cfg: RunConfig, checkpoint_path, out_dir) -> int:
    params = _load_params(checkpoint_path)
    dataset = load_dataset(cfg.data_dir / "test")
    dets = run_detector(
        params,
        dataset,
        cfg.ban_config(),
        rng_seed=cfg.seed,
        rois_per_image=cfg.rois_per_image,
    )
    report = evaluate(
        dets,
        dataset_ground_truth(dataset),
        class_ids=list(range(1, cfg.num_classes + 1)),
    )
    out = _prepare_out(cfg, out_dir)
    write_metrics_csv(out / "metrics.csv", report, cfg.class_names())
    print(format_metrics(report, cfg.class_names()))
    return 0


def cmd_analyze(cfg: RunConfig, checkpoint_path, out_dir, ablation: bool) -> int:
    out = _prepare_out(cfg, out_dir)
    params = _load_params(checkpoint_path)
    dataset = load_dataset(cfg.data_dir / "test")
    ban = cfg.ban_config()
    result = contribution_analysis(
        params,
        dataset,
        ban,
        rng_seed=cfg.seed,
        class_names=cfg.class_names(),
    )
    write_contribution_csv(
        out / "contribution_classification.csv",
        result.kinds,
        result.cls_rows,
        result.cls,
    )
    write_contribution_csv(
        out / "contribution_localization.csv",
        result.kinds,
        result.loc_rows,
        result.loc,
    )
    print(f"contribution tables written under {out}")
    if result.skipped:
        print("skipped classes with no assigned proposals: " + ", ".join(result.skipped))
    if ablation:
        train_set = load_dataset(cfg.data_dir / "train")
        rows = []
        for name, (contexts, reference) in ABLATION_GRID.items():
            grid_ban = replace(ban, contexts=contexts)
            trained = train(train_set, grid_ban, cfg.sgd_config(), cfg.seed)
            dets = run_detector(
                trained.params,
                dataset,
                grid_ban,
                rng_seed=cfg.seed,
                rois_per_image=cfg.rois_per_image,
            )
            report = evaluate(
                dets,
                dataset_ground_truth(dataset),
                class_ids=list(range(1, cfg.num_classes + 1)),
            )
            rows.append((name, report.map50, reference))
            print(
                f"contexts {name}: mAP@0.5 {report.map50:.4f} "
                f"(large-scale reference {reference:.2f}%)"
            )
        with (out / "ablation.csv").open("w") as fh:
            fh.write("contexts,map50,reference_map50_percent\n")
            for name, value, reference in rows:
                fh.write(f"{name},{value!r},{reference}\n")
    return 0


def _heat_to_gray(amap: np.ndarray, lo: float, hi: float, upscale: int) -> np.ndarray:
    span = hi - lo if hi > lo else 1.0
    norm = (amap - lo) / span
    gray = np.clip(np.round(norm * 255.0), 0, 255).astype(np.uint8)
    big = np.repeat(np.repeat(gray, upscale, axis=0), upscale, axis=1)
    return np.stack([big, big, big], axis=2)


def cmd_visualize(
    cfg: RunConfig, checkpoint_path, out_dir, image_id, proposal_text, upscale: int
) -> int:
    if upscale < 1:
        raise ConfigError("--upscale must be >= 1")
    params = _load_params(checkpoint_path)
    dataset = load_dataset(cfg.data_dir / "test")
    if image_id is None:
        rec = dataset[0]
    else:
        matches = [r for r in dataset if r.image_id == image_id]
        if not matches:
            raise ConfigError(f"image {image_id!r} not in {cfg.data_dir / 'test'}")
        rec = matches[0]
    if proposal_text is not None:
        parts = proposal_text.split(",")
        if len(parts) != 4:
            raise ConfigError("--proposal looks like CX,CY,W,H")
        proposal = Box(*(float(p) for p in parts))
    elif rec.gts:
        proposal = rec.gts[0][1]
    else:
        raise ConfigError(f"image {rec.image_id} has no objects; pass --proposal")
    ban = cfg.ban_config()
    feats = backbone_forward(params, Tensor(rec.as_input()))
    (out_record,) = forward(params, feats, [proposal], ban)
    class_id = int(np.argmax(out_record.class_scores[1:])) + 1
    class_name = cfg.class_names()[class_id - 1]
    kinds = subnet_kinds(ban)
    maps = {
        kind: local_activation_map(params, feats, proposal, kind, class_id, ban)
        for kind in kinds
    }
    lo = min(m.min() for m in maps.values())
    hi = max(m.max() for m in maps.values())
    out = _prepare_out(cfg, out_dir)
    for kind in kinds:
        pixels = _heat_to_gray(maps[kind], lo, hi, upscale)
        write_ppm(out / f"activation_{DISPLAY_NAMES[kind].lower()}.ppm", pixels)
    shares = np.array(
        [abs(out_record.per_context_scores[kind][class_id]) for kind in kinds]
    )
    total = shares.sum()
    if total > 0:
        shares = shares / total
    write_contribution_csv(
        out / "contribution_bars.csv", kinds, [class_name], shares[None, :]
    )
    print(
        f"wrote {len(kinds)} activation maps and contribution bars for "
        f"{rec.image_id} (class {class_name}) under {out}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ban",
        description="boundary-context ensemble detector: data, training, analysis",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, default_out):
        p.add_argument("--config", type=Path, default=None, help="key=value file")
        p.add_argument("--seed", type=int, default=None, help="override the seed key")
        p.add_argument("--out", type=Path, default=Path(default_out))

    p = sub.add_parser("gen-data", help="write synthetic train/test datasets")
    common(p, "data")
    p = sub.add_parser("train", help="train a detector on data_dir/train")
    common(p, "runs/train")
    p = sub.add_parser("eval", help="evaluate a checkpoint on data_dir/test")
    common(p, "runs/eval")
    p.add_argument("--checkpoint", type=Path, default=None)
    p = sub.add_parser("analyze", help="contribution tables and ablation grid")
    common(p, "runs/analyze")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--ablation", action="store_true", help="run the context grid")
    p = sub.add_parser("visualize", help="activation heat maps for one proposal")
    common(p, "runs/visualize")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--image-id", default=None)
    p.add_argument("--proposal", default=None, help="CX,CY,W,H in pixels")
    p.add_argument("--upscale", type=int, default=16)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = RunConfig.from_sources(args.config, overrides)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.out)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.out)
        if args.command == "analyze":
            return cmd_analyze(cfg, args.checkpoint, args.out, args.ablation)
        if args.command == "visualize":
            return cmd_visualize(
                cfg, args.checkpoint, args.out, args.image_id, args.proposal,
                args.upscale,
            )
        raise ConfigError(f"unknown command {args.command!r}")
    except (BanError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
