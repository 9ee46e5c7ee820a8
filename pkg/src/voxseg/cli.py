"""Command-line orchestration of the preprocessing pipelines, training,
prediction with native-space restoration, and evaluation.

One JSON config describes a run; subcommands consume it. Exit codes:
0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import evaluate as ev
from . import net, preprocess, register, sampler
from .errors import IdMismatch, MissingTransform, ValidationError, VoxsegError
from .volio import Volume, VolumeKind, read_volume, write_volume

# Dataset split as published for IBSR18 (the training list has nine ids;
# IBSR_05 is the unlisted eighteenth volume and is excluded by default).
DEFAULT_SPLITS = {
    "train": ["IBSR_01", "IBSR_03", "IBSR_04", "IBSR_06", "IBSR_07", "IBSR_08",
              "IBSR_09", "IBSR_16", "IBSR_18"],
    "validation": ["IBSR_11", "IBSR_12", "IBSR_13", "IBSR_14", "IBSR_17"],
    "test": ["IBSR_02", "IBSR_10", "IBSR_15"],
}


@dataclass
class RunConfig:
    dataset_root: str = "."
    splits: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_SPLITS.items()})
    pipeline: str = "P1"
    reference_id: str | None = None
    template_path: str | None = None
    image_pattern: str = "{id}.nii.gz"
    label_pattern: str = "{id}_seg.nii.gz"
    clahe_grid: tuple = (8, 8, 8)
    clahe_clip: float = 0.01
    clahe_bins: int = 256
    clahe_all_volumes: bool = False
    registration: dict = field(default_factory=dict)
    network: dict = field(default_factory=dict)
    patch_size: tuple = (128, 128, 128)
    patch_count: int = 50
    patch_mode: str = "uniform"
    steps: int = 4000
    lr: float = 1e-3
    checkpoint_every: int = 500
    init: str = "uniform"          # "uniform" or "checkpoint"
    init_checkpoint: str | None = None
    seed: int = 0
    output_dir: str = "out"
    eval_space: str = "native"     # or "template"
    sample_std: bool = False

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    def validate(self):
        if self.pipeline not in ("P1", "P2"):
            raise ValidationError(f"pipeline must be P1 or P2, got {self.pipeline!r}")
        ids = [vid for split in self.splits.values() for vid in split]
        if len(ids) != len(set(ids)):
            raise ValidationError("split lists must be disjoint")
        if self.pipeline == "P2":
            if not self.reference_id:
                raise ValidationError("pipeline P2 requires reference_id")
            if self.reference_id not in ids:
                raise ValidationError(f"reference_id {self.reference_id!r} not in any split")
            if not self.template_path:
                raise ValidationError("pipeline P2 requires template_path")
        if self.init == "checkpoint" and not self.init_checkpoint:
            raise ValidationError("init=checkpoint requires init_checkpoint")
        if self.init not in ("uniform", "checkpoint"):
            raise ValidationError(f"init must be uniform or checkpoint, got {self.init!r}")

    def all_ids(self) -> list[str]:
        return [vid for split in ("train", "validation", "test") for vid in self.splits.get(split, [])]

    def image_path(self, vid: str) -> Path:
        return Path(self.dataset_root) / self.image_pattern.format(id=vid)

    def label_path(self, vid: str) -> Path:
        return Path(self.dataset_root) / self.label_pattern.format(id=vid)

    def net_config(self) -> net.NetConfig:
        return net.NetConfig(**self.network)

    def out(self) -> Path:
        return Path(self.output_dir)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    def __init__(self):
        self.volumes: dict[str, dict] = {}
        self.failures: dict[str, str] = {}

    def record(self, vid, source, operations, outputs, transform=None):
        self.volumes[vid] = {
            "source": str(source),
            "operations": operations,
            "transform": str(transform) if transform else None,
            "outputs": {str(p): _sha256(Path(p)) for p in outputs},
        }

    def fail(self, vid, message):
        self.failures[vid] = message

    def write(self, path: Path):
        path.write_text(
            json.dumps({"volumes": self.volumes, "failures": self.failures}, indent=2),
            encoding="utf-8",
        )


def _preprocessed_dir(cfg: RunConfig) -> Path:
    return cfg.out() / "preprocessed"


def _transforms_dir(cfg: RunConfig) -> Path:
    return cfg.out() / "transforms"


def cmd_preprocess(cfg: RunConfig) -> int:
    pre_dir = _preprocessed_dir(cfg)
    pre_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest()

    if cfg.pipeline == "P1":
        for vid in cfg.all_ids():
            try:
                vol = read_volume(cfg.image_path(vid))
                out_img = pre_dir / f"{vid}.nii.gz"
                write_volume(preprocess.standardize(vol), out_img)
                outputs = [out_img]
                label_src = cfg.label_path(vid)
                if label_src.exists():
                    out_lab = pre_dir / f"{vid}_seg.nii.gz"
                    write_volume(read_volume(label_src, VolumeKind.LABEL), out_lab)
                    outputs.append(out_lab)
                manifest.record(vid, cfg.image_path(vid), ["standardize"], outputs)
            except VoxsegError as exc:
                print(f"error: {vid}: {exc}", file=sys.stderr)
                manifest.fail(vid, str(exc))
        manifest.write(cfg.out() / "manifest.json")
        return 2 if manifest.failures else 0

    # pipeline 2: register -> rescale -> CLAHE(reference) -> match
    template = read_volume(cfg.template_path)
    grid = register.GridSpec.of(template)
    tf_dir = _transforms_dir(cfg)
    tf_dir.mkdir(parents=True, exist_ok=True)
    reg_cfg = register.RegistrationConfig(**cfg.registration) if cfg.registration \
        else register.RegistrationConfig(seed=cfg.seed)

    rescaled: dict[str, Volume] = {}
    for vid in cfg.all_ids():
        try:
            vol = read_volume(cfg.image_path(vid))
            transform, _ = register.register_rigid(vol, template, reg_cfg)
            tf_path = tf_dir / f"{vid}.txt"
            register.save_transform(transform, tf_path)
            reg_vol = register.resample(vol, transform, grid, register.Interp.TRILINEAR)
            rescaled[vid] = preprocess.rescale_minmax(reg_vol)
            outputs = []
            label_src = cfg.label_path(vid)
            if label_src.exists():
                lab = read_volume(label_src, VolumeKind.LABEL)
                out_lab = pre_dir / f"{vid}_seg.nii.gz"
                write_volume(register.resample(lab, transform, grid, register.Interp.NEAREST), out_lab)
                outputs.append(out_lab)
            manifest.record(vid, cfg.image_path(vid),
                            ["register_rigid", "resample", "rescale_minmax"],
                            outputs, transform=tf_path)
        except VoxsegError as exc:
            print(f"error: {vid}: {exc}", file=sys.stderr)
            manifest.fail(vid, str(exc))

    if cfg.reference_id not in rescaled:
        manifest.write(cfg.out() / "manifest.json")
        print(f"error: reference volume {cfg.reference_id} failed preprocessing", file=sys.stderr)
        return 2

    clahe = lambda v: preprocess.adaptive_hist_eq(
        v, cfg.clahe_grid, cfg.clahe_clip, cfg.clahe_bins
    )
    reference = clahe(rescaled[cfg.reference_id])
    landmarks = preprocess.compute_landmarks(reference)

    for vid, vol in rescaled.items():
        try:
            if vid == cfg.reference_id:
                final = reference
                ops = ["adaptive_hist_eq"]
            else:
                source = clahe(vol) if cfg.clahe_all_volumes else vol
                lmap = preprocess.LandmarkMap(preprocess.compute_landmarks(source), landmarks)
                final = preprocess.match_histogram(source, lmap)
                ops = (["adaptive_hist_eq"] if cfg.clahe_all_volumes else []) + ["match_histogram"]
            out_img = pre_dir / f"{vid}.nii.gz"
            write_volume(final, out_img)
            entry = manifest.volumes[vid]
            entry["operations"].extend(ops)
            entry["outputs"][str(out_img)] = _sha256(out_img)
        except VoxsegError as exc:
            print(f"error: {vid}: {exc}", file=sys.stderr)
            manifest.fail(vid, str(exc))

    manifest.write(cfg.out() / "manifest.json")
    return 2 if manifest.failures else 0


def _load_split_volumes(cfg: RunConfig, split: str):
    pre_dir = _preprocessed_dir(cfg)
    items = []
    for vid in cfg.splits[split]:
        v = read_volume(pre_dir / f"{vid}.nii.gz")
        lab = read_volume(pre_dir / f"{vid}_seg.nii.gz", VolumeKind.LABEL)
        items.append((vid, v, lab))
    return items


def cmd_train(cfg: RunConfig) -> int:
    ncfg = cfg.net_config()
    if cfg.init == "checkpoint":
        tensors = net.load_checkpoint(cfg.init_checkpoint)
        params = net.init_params(ncfg, cfg.seed, checkpoint=tensors)
    else:
        params = net.init_params(ncfg, cfg.seed)

    spec = sampler.PatchSpec(
        tuple(cfg.patch_size), cfg.patch_count, sampler.SampleMode(cfg.patch_mode), cfg.seed
    )
    volumes = _load_split_volumes(cfg, "train")
    stream = sampler.patch_stream(volumes, spec)

    ckpt_dir = cfg.out() / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    trace = net.train(
        params, ncfg, stream, cfg.steps,
        hyper=net.Hyper(lr=cfg.lr),
        checkpoint_every=cfg.checkpoint_every,
        checkpoint_dir=ckpt_dir,
    )
    with open(cfg.out() / "loss_trace.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step, value in enumerate(trace, start=1):
            writer.writerow([step, f"{value:.9g}"])
    print(f"checkpoint: {ckpt_dir / 'ckpt_final.nnl'}")
    return 0


def cmd_predict(cfg: RunConfig, checkpoint: str, volume_ids: list[str]) -> int:
    ncfg = cfg.net_config()
    params = net.init_params(ncfg, cfg.seed, checkpoint=net.load_checkpoint(checkpoint))
    pre_dir = _preprocessed_dir(cfg)
    out_dir = cfg.out() / "predictions"
    out_dir.mkdir(parents=True, exist_ok=True)
    known = set(cfg.all_ids())
    for vid in volume_ids:
        if vid not in known:
            raise ValidationError(f"unknown volume id {vid!r}")
    for vid in volume_ids:
        v = read_volume(pre_dir / f"{vid}.nii.gz")
        pred, _ = net.predict_volume(params, ncfg, v)
        if cfg.pipeline == "P2" and cfg.eval_space == "native":
            tf_path = _transforms_dir(cfg) / f"{vid}.txt"
            if not tf_path.exists():
                raise MissingTransform(f"no saved transform for {vid} at {tf_path}")
            transform = register.load_transform(tf_path)
            native = read_volume(cfg.image_path(vid))
            pred = register.resample(
                pred, register.invert(transform), register.GridSpec.of(native),
                register.Interp.NEAREST,
            )
        write_volume(pred, out_dir / f"{vid}_pred.nii.gz")
    return 0


def _ids_in_dir(path: Path, suffix: str) -> dict[str, Path]:
    out = {}
    for f in sorted(path.iterdir()):
        name = f.name
        for ext in (".nii.gz", ".nii"):
            if name.endswith(suffix + ext):
                out[name[: -len(suffix + ext)]] = f
    return out


def cmd_evaluate(cfg: RunConfig, pred_dir: str, truth_dir: str) -> int:
    preds = _ids_in_dir(Path(pred_dir), "_pred")
    truths = _ids_in_dir(Path(truth_dir), "_seg")
    if set(preds) != set(truths):
        raise IdMismatch(
            f"prediction ids {sorted(preds)} != truth ids {sorted(truths)}"
        )
    pairs = [
        (read_volume(preds[vid], VolumeKind.LABEL), read_volume(truths[vid], VolumeKind.LABEL), vid)
        for vid in sorted(preds)
    ]
    rep = ev.report(pairs, sample_std=cfg.sample_std)
    cfg.out().mkdir(parents=True, exist_ok=True)
    (cfg.out() / "dice_report.json").write_text(rep.to_json(), encoding="utf-8")
    (cfg.out() / "dice_report.txt").write_text(rep.to_text() + "\n", encoding="utf-8")
    print(rep.to_text())
    return 0


def cmd_stats(cfg: RunConfig, image: str, labels: str) -> int:
    stats = preprocess.tissue_stats(
        read_volume(image), read_volume(labels, VolumeKind.LABEL)
    )
    cfg.out().mkdir(parents=True, exist_ok=True)
    (cfg.out() / "tissue_stats.json").write_text(stats.to_json(), encoding="utf-8")
    (cfg.out() / "tissue_stats.txt").write_text(stats.to_text() + "\n", encoding="utf-8")
    print(stats.to_text())
    return 0


def cmd_register(cfg: RunConfig, moving: str, template: str, out_transform: str) -> int:
    reg_cfg = register.RegistrationConfig(**cfg.registration) if cfg.registration \
        else register.RegistrationConfig(seed=cfg.seed)
    transform, value = register.register_rigid(
        read_volume(moving), read_volume(template), reg_cfg
    )
    register.save_transform(transform, out_transform)
    print(f"final metric: {value:.6g}")
    print(f"transform: {out_transform}")
    return 0


def cmd_transform(cfg: RunConfig, volume: str, transform_path: str, grid_path: str,
                  output: str, inverse: bool, nearest: bool) -> int:
    transform = register.load_transform(transform_path)
    if inverse:
        transform = register.invert(transform)
    kind = VolumeKind.LABEL if nearest else VolumeKind.INTENSITY
    v = read_volume(volume, kind)
    grid = register.GridSpec.of(read_volume(grid_path))
    mode = register.Interp.NEAREST if nearest else register.Interp.TRILINEAR
    write_volume(register.resample(v, transform, grid, mode), output)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxseg", description=__doc__)
    parser.add_argument("--config", help="run configuration JSON")
    parser.add_argument("--seed", type=int, help="override config seed")
    parser.add_argument("--threads", type=int, help="BLAS thread count")
    parser.add_argument("--out", help="override output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("preprocess", help="run the configured preprocessing pipeline")
    sub.add_parser("train", help="train from the preprocessed training split")

    p = sub.add_parser("predict", help="predict labels for preprocessed volumes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("ids", nargs="*", help="volume ids (default: validation split)")

    p = sub.add_parser("evaluate", help="Dice report over matching prediction/truth dirs")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--truth-dir", required=True)

    p = sub.add_parser("stats", help="per-tissue intensity statistics")
    p.add_argument("--image", required=True)
    p.add_argument("--labels", required=True)

    p = sub.add_parser("register", help="rigid-register one volume onto a template")
    p.add_argument("--moving", required=True)
    p.add_argument("--template", required=True)
    p.add_argument("--out-transform", required=True)

    p = sub.add_parser("transform", help="apply (or invert) a saved transform")
    p.add_argument("--volume", required=True)
    p.add_argument("--transform", required=True)
    p.add_argument("--grid", required=True, help="NIfTI file supplying the output grid")
    p.add_argument("--output", required=True)
    p.add_argument("--inverse", action="store_true")
    p.add_argument("--nearest", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out:
            cfg.output_dir = args.out
        cfg.out().mkdir(parents=True, exist_ok=True)
        if args.command == "preprocess":
            return cmd_preprocess(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "predict":
            ids = args.ids or cfg.splits.get("validation", [])
            return cmd_predict(cfg, args.checkpoint, ids)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.pred_dir, args.truth_dir)
        if args.command == "stats":
            return cmd_stats(cfg, args.image, args.labels)
        if args.command == "register":
            return cmd_register(cfg, args.moving, args.template, args.out_transform)
        if args.command == "transform":
            return cmd_transform(cfg, args.volume, args.transform, args.grid,
                                 args.output, args.inverse, args.nearest)
        return 1
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except VoxsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
