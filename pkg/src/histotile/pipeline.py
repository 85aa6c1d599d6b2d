"""Pipeline stages operating on a work directory.

Work directory layout (every file is a pure function of the inputs and the
configuration, so reruns are byte-identical)::

    images.jsonl           split        image manifest with split names
    target_stats.json      normalize    lαβ target statistics
    normalized/<id>.png    normalize    stain-normalized images
    normalized.jsonl       normalize
    patches/<id>_<x>_<y>.png, patches.jsonl            tile
    augmented.jsonl        augment      train/validation patches x 6 tags
    params.bin, model_config.json, train_metrics.json  train
    patch_predictions.csv  predict / ingest-predictions
    image_predictions.csv  aggregate
    report.json, roc_<class>.csv                       evaluate
"""

from __future__ import annotations

import json
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

from histotile import aggregation, augmentation, color_norm, evaluation, model, predictions
from histotile.dataset import (ClassLabel, DatasetError, Manifest, ManifestRecord, load_manifest,
                               make_split, save_manifest, splitmix64)
from histotile.images import read_image, write_image
from histotile.tiling import GridSpec, Patch, extract_patches

IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".bmp", ".jpg", ".jpeg")
CLASS_DIR_ALIASES = {"normal": "normal", "benign": "benign", "in_situ": "in_situ", "insitu": "in_situ",
                     "invasive": "invasive"}

STAGES = ("split", "normalize", "tile", "augment", "train", "predict", "aggregate", "evaluate")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"{stage}: {message}")


@dataclass
class PipelineConfig:
    input_dir: str | None = None
    work_dir: str = "work"
    target_stats: str | None = None
    target_image: str | None = None
    patch_size: int = 512
    overlap: float = 0.5
    edge_anchor: bool = True
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0
    input_size: int = 64
    widths: tuple[int, ...] = (8, 16)
    blocks_per_stage: int = 1
    lr: float = 1e-4
    momentum: float = 0.9
    nesterov: bool = True
    batch_size: int = 32
    epochs: int = 100
    augment_validation: bool = True
    skip_normalization: bool = False
    predict_splits: tuple[str, ...] = ("test",)

    def __post_init__(self):
        self.ratios = tuple(float(r) for r in self.ratios)
        self.widths = tuple(int(w) for w in self.widths)
        self.predict_splits = tuple(self.predict_splits)
        if len(self.ratios) != 3 or abs(sum(self.ratios) - 1.0) > 1e-9 or min(self.ratios) < 0:
            raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {self.ratios}")

    @classmethod
    def from_json(cls, obj: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**obj)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc.msg}, line {exc.lineno})") from None
        if not isinstance(obj, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        return cls.from_json(obj)

    def to_json(self) -> dict:
        return asdict(self)

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.patch_size, self.overlap, self.edge_anchor)

    def model_config(self) -> model.ModelConfig:
        return model.ModelConfig(input_size=self.input_size, widths=self.widths,
                                 blocks_per_stage=self.blocks_per_stage, learning_rate=self.lr,
                                 momentum=self.momentum, nesterov=self.nesterov,
                                 batch_size=self.batch_size, max_epochs=self.epochs,
                                 seed=stage_seed(self.seed, "train"))


def stage_seed(seed: int, stage: str) -> int:
    """Per-stage seed fanned out from the top-level seed."""
    return splitmix64((seed ^ zlib.crc32(stage.encode("utf-8"))) & ((1 << 64) - 1)) >> 1


def thread_count() -> int:
    raw = os.environ.get("HISTOTILE_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise StageError("config", f"HISTOTILE_THREADS must be an integer, got {raw!r}") from None
    return min(8, os.cpu_count() or 1)


def _map(fn: Callable, items: Sequence) -> list:
    # executor.map preserves input order, so file contents never depend on scheduling
    n = thread_count()
    if n == 1 or len(items) < 2:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _require(path: Path, stage: str, producer: str) -> Path:
    if not path.exists():
        raise StageError(stage, f"missing {path.name}; run the '{producer}' stage first")
    return path


def _load(path: Path, stage: str, producer: str) -> Manifest:
    try:
        return load_manifest(_require(path, stage, producer))
    except DatasetError as exc:
        raise StageError(stage, f"{path.name}: {exc}") from None


def _resolve(work: Path, rec_path: str) -> Path:
    p = Path(rec_path)
    return p if p.is_absolute() else work / p


def discover_images(input_dir: str | Path) -> Manifest:
    """Image manifest from ``manifest.jsonl`` or from per-class subdirectories."""
    root = Path(input_dir)
    if not root.is_dir():
        raise StageError("split", f"input directory {root} does not exist")
    manifest_path = root / "manifest.jsonl"
    if manifest_path.exists():
        recs = load_manifest(manifest_path)
        return Manifest(replace(r, path=str((root / r.path).resolve())) for r in recs)
    records = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        key = CLASS_DIR_ALIASES.get(sub.name.lower())
        if key is None:
            continue
        label = ClassLabel.parse(key)
        for f in sorted(sub.iterdir()):
            if f.suffix.lower() in IMAGE_SUFFIXES:
                records.append(ManifestRecord(id=f.stem, path=str(f.resolve()), label=label))
    if not records:
        raise StageError("split", f"no images found under {root} (expected manifest.jsonl or class folders)")
    try:
        return Manifest(records)
    except DatasetError as exc:
        raise StageError("split", str(exc)) from None


# -- stages -----------------------------------------------------------------

def run_split(cfg: PipelineConfig) -> Path:
    if cfg.input_dir is None:
        raise StageError("split", "no input directory configured")
    work = Path(cfg.work_dir)
    work.mkdir(parents=True, exist_ok=True)
    images = discover_images(cfg.input_dir)
    try:
        split = make_split(images, cfg.ratios, stage_seed(cfg.seed, "split"))
    except DatasetError as exc:
        raise StageError("split", str(exc)) from None
    out = work / "images.jsonl"
    save_manifest(split.apply(images), out)
    return out


def _target_stats(cfg: PipelineConfig) -> color_norm.LabStats:
    if cfg.target_stats:
        path = Path(cfg.target_stats)
        if not path.exists():
            raise StageError("normalize", f"target stats file {path} does not exist")
        return color_norm.LabStats.load(path)
    if cfg.target_image:
        path = Path(cfg.target_image)
        if not path.exists():
            raise StageError("normalize", f"target image {path} does not exist")
        return color_norm.target_stats_from_image(read_image(path))
    raise StageError("normalize", "no normalization target: pass --target-image or a target-stats file "
                                  "(or set skip_normalization)")


def run_normalize(cfg: PipelineConfig) -> Path:
    work = Path(cfg.work_dir)
    images = _load(work / "images.jsonl", "normalize", "split")
    target = None if cfg.skip_normalization else _target_stats(cfg)
    if target is not None:
        target.save(work / "target_stats.json")
    (work / "normalized").mkdir(exist_ok=True)

    def one(rec: ManifestRecord) -> ManifestRecord:
        img = read_image(_resolve(work, rec.path))
        if target is not None:
            img = color_norm.normalize_stains(img, target)
        rel = f"normalized/{rec.id}.png"
        write_image(img, work / rel)
        return replace(rec, path=rel)

    out = work / "normalized.jsonl"
    save_manifest(_map(one, list(images)), out)
    return out


def run_tile(cfg: PipelineConfig) -> Path:
    work = Path(cfg.work_dir)
    images = _load(work / "normalized.jsonl", "tile", "normalize")
    spec = cfg.grid
    (work / "patches").mkdir(exist_ok=True)

    def one(rec: ManifestRecord) -> list[ManifestRecord]:
        img = read_image(_resolve(work, rec.path))
        try:
            patches = extract_patches(img, rec.id, rec.label, spec)
        except ValueError as exc:
            raise StageError("tile", f"{rec.id}: {exc}") from None
        out = []
        for p in patches:
            rel = f"patches/{p.name}.png"
            write_image(p.pixels, work / rel)
            out.append(ManifestRecord(rec.id, rel, rec.label, rec.split, p.anchor[0], p.anchor[1], "identity"))
        return out

    out = work / "patches.jsonl"
    save_manifest([r for recs in _map(one, list(images)) for r in recs], out)
    return out


def run_augment(cfg: PipelineConfig) -> Path:
    work = Path(cfg.work_dir)
    patches = _load(work / "patches.jsonl", "augment", "tile")
    splits = ("train", "validation") if cfg.augment_validation else ("train",)
    records = []
    for rec in patches:
        if rec.split in splits:
            records.extend(replace(rec, aug=tag.value) for tag in augmentation.AUG_ORDER)
        elif rec.split == "validation":
            records.append(rec)
    out = work / "augmented.jsonl"
    save_manifest(records, out)
    return out


def load_patches(work: Path, records: Iterable[ManifestRecord]) -> list[Patch]:
    cache: dict[str, object] = {}
    out = []
    for rec in records:
        if rec.path not in cache:
            cache[rec.path] = read_image(_resolve(work, rec.path))
        base = Patch(rec.id, (rec.anchor_x or 0, rec.anchor_y or 0), cache[rec.path], rec.label)
        tag = rec.aug or "identity"
        out.append(augmentation.apply(base, tag) if tag != "identity" else base)
    return out


def run_train(cfg: PipelineConfig) -> Path:
    work = Path(cfg.work_dir)
    records = _load(work / "augmented.jsonl", "train", "augment")
    train_patches = load_patches(work, [r for r in records if r.split == "train"])
    val_patches = load_patches(work, [r for r in records if r.split == "validation"])
    if not train_patches:
        raise StageError("train", "no training patches in augmented.jsonl")
    mcfg = cfg.model_config()
    result = model.train(train_patches, val_patches, mcfg)
    model.save_params(result.params, work / "params.bin")
    (work / "model_config.json").write_text(
        json.dumps(asdict(mcfg), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (work / "train_metrics.json").write_text(
        json.dumps({"best_epoch": result.best_epoch, "history": result.history}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    return work / "params.bin"


def _saved_model_config(work: Path, stage: str) -> model.ModelConfig:
    path = _require(work / "model_config.json", stage, "train")
    obj = json.loads(path.read_text(encoding="utf-8"))
    return model.ModelConfig(**obj)


def run_predict(cfg: PipelineConfig) -> Path:
    work = Path(cfg.work_dir)
    params_path = _require(work / "params.bin", "predict", "train")
    try:
        params = model.load_params(params_path)
    except ValueError as exc:
        raise StageError("predict", str(exc)) from None
    mcfg = _saved_model_config(work, "predict")
    patches_manifest = _load(work / "patches.jsonl", "predict", "tile")
    recs = [r for r in patches_manifest if r.split in cfg.predict_splits]
    if not recs:
        raise StageError("predict", f"no patches in splits {list(cfg.predict_splits)}")
    try:
        preds = model.predict(params, load_patches(work, recs), mcfg)
    except model.ShapeError as exc:
        raise StageError("predict", str(exc)) from None
    out = work / "patch_predictions.csv"
    predictions.write_predictions(preds, out)
    return out


def run_ingest(cfg: PipelineConfig, source: str | Path) -> Path:
    work = Path(cfg.work_dir)
    work.mkdir(parents=True, exist_ok=True)
    if not Path(source).exists():
        raise StageError("ingest-predictions", f"prediction file {source} does not exist")
    try:
        recs = predictions.read_predictions(source, renormalize=True)
    except predictions.PredictionFormatError as exc:
        raise StageError("ingest-predictions", str(exc)) from None
    out = work / "patch_predictions.csv"
    predictions.write_predictions(recs, out)
    return out


def run_aggregate(cfg: PipelineConfig) -> Path:
    work = Path(cfg.work_dir)
    src = _require(work / "patch_predictions.csv", "aggregate", "predict' or 'ingest-predictions")
    recs = [r for r in predictions.read_predictions(src) if r.aug == "identity"]
    if not recs:
        raise StageError("aggregate", "no identity-patch predictions to aggregate")
    try:
        preds = aggregation.aggregate(recs)
    except aggregation.AggregationError as exc:
        raise StageError("aggregate", str(exc)) from None
    out = work / "image_predictions.csv"
    aggregation.write_image_predictions(preds, out)
    return out


def run_evaluate(cfg: PipelineConfig, truth_manifest: str | Path | None = None) -> Path:
    work = Path(cfg.work_dir)
    truth_path = Path(truth_manifest) if truth_manifest else work / "images.jsonl"
    images = _load(truth_path, "evaluate", "split")
    truth = {r.id: r.label for r in images}
    patch_recs = [r for r in predictions.read_predictions(
        _require(work / "patch_predictions.csv", "evaluate", "predict")) if r.aug == "identity"]
    image_preds = aggregation.read_image_predictions(
        _require(work / "image_predictions.csv", "evaluate", "aggregate"))
    try:
        report = evaluation.build_report(patch_recs, image_preds, truth)
    except evaluation.EvaluationError as exc:
        raise StageError("evaluate", str(exc)) from None
    evaluation.write_report(report, work)
    return work / "report.json"


def run_all(cfg: PipelineConfig) -> Path:
    for stage in STAGES:
        STAGE_FUNCS[stage](cfg)
    return Path(cfg.work_dir) / "report.json"


STAGE_FUNCS: dict[str, Callable[[PipelineConfig], Path]] = {
    "split": run_split,
    "normalize": run_normalize,
    "tile": run_tile,
    "augment": run_augment,
    "train": run_train,
    "predict": run_predict,
    "aggregate": run_aggregate,
    "evaluate": run_evaluate,
}
