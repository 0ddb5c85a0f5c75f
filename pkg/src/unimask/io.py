"""File formats: manifests, proposal files, results, configs and checkpoints.

Everything except checkpoints is JSON written in a canonical form (sorted
keys, floats rounded to 9 significant digits) so that save -> load -> save is
byte-stable. A checkpoint is a little-endian u64 header length, a JSON header
describing the arrays, then the arrays as little-endian float64.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .core import DatasetSpec, EmbeddingTable, ProposalSet, RleMask, SegmentGT
from .errors import MissingCategory, ParseError, ValidationError
from .postprocess import Instance, InstanceOutput, PanopticOutput, SemanticOutput

MANIFEST_VERSION = 1
SIGNIFICANT_DIGITS = 9
CHECKPOINT_MAGIC = "unimask-checkpoint"


# -- canonical JSON -----------------------------------------------------------


def _canonical(obj: Any) -> Any:
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise ValueError(f"cannot serialise non-finite float {x}")
        x = float(f"{x:.{SIGNIFICANT_DIGITS}g}")
        return 0.0 if x == 0 else x
    if isinstance(obj, np.ndarray):
        return _canonical(obj.tolist())
    if isinstance(obj, Mapping):
        return {str(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if obj is None or isinstance(obj, str):
        return obj
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def canonical_dumps(obj: Any) -> str:
    return json.dumps(_canonical(obj), sort_keys=True, indent=1, allow_nan=False) + "\n"


def write_json(obj: Any, path) -> None:
    Path(path).write_text(canonical_dumps(obj), encoding="utf-8")


def read_json(path) -> Any:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror or exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


# -- manifests ----------------------------------------------------------------


@dataclass(frozen=True)
class ImageRecord:
    """An image: its size, its dataset, and where its features come from.

    ``source`` is either ``{"feature_file": path}`` (a ``.npy`` array of shape
    (H, W, D), relative to the manifest) or ``{"generator": {kind, seed,
    index, size}}`` for a synthetic scene.
    """

    id: int
    height: int
    width: int
    dataset: str
    source: Mapping[str, Any]

    def to_json(self) -> dict:
        return {"id": self.id, "height": self.height, "width": self.width, "dataset": self.dataset, **self.source}


@dataclass(frozen=True)
class Annotation:
    id: int
    image_id: int
    gt: SegmentGT
    score: float | None = None  # set on prediction files

    def to_json(self) -> dict:
        out: dict[str, Any] = {"id": self.id, "image_id": self.image_id, "category_id": self.gt.category_id}
        if self.gt.mask is not None:
            out["segmentation"] = self.gt.mask.to_json()
        if self.gt.box is not None:
            out["box"] = list(self.gt.box)
        if self.gt.ignore:
            out["ignore"] = True
        if self.score is not None:
            out["score"] = self.score
        return out


@dataclass(frozen=True)
class Manifest:
    version: int
    images: tuple[ImageRecord, ...]
    datasets: tuple[DatasetSpec, ...]
    annotations: tuple[Annotation, ...]
    base_dir: Path = field(default=Path("."), compare=False)

    def dataset(self, name: str) -> DatasetSpec:
        for d in self.datasets:
            if d.name == name:
                return d
        raise KeyError(name)

    def image(self, image_id: int) -> ImageRecord:
        for im in self.images:
            if im.id == image_id:
                return im
        raise KeyError(image_id)

    def spec_for(self, image_id: int) -> DatasetSpec:
        return self.dataset(self.image(image_id).dataset)

    def annotations_for(self, image_id: int) -> list[Annotation]:
        return [a for a in self.annotations if a.image_id == image_id]

    def gts_for(self, image_id: int) -> list[SegmentGT]:
        return [a.gt for a in self.annotations_for(image_id)]

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "datasets": [d.to_json() for d in self.datasets],
            "images": [im.to_json() for im in self.images],
            "annotations": [a.to_json() for a in self.annotations],
        }


def _parse_datasets(raw, problems: list[str]) -> list[DatasetSpec]:
    out = []
    if not isinstance(raw, list) or not raw:
        problems.append("'datasets' must be a nonempty list")
        return out
    for i, d in enumerate(raw):
        try:
            out.append(DatasetSpec.from_json(d))
        except (TypeError, KeyError, ValueError, AttributeError) as exc:
            problems.append(f"dataset #{i}: {exc}")
    names = [d.name for d in out]
    for n in sorted({n for n in names if names.count(n) > 1}):
        problems.append(f"dataset name {n!r} is used more than once")
    return out


def _parse_images(raw, specs: dict[str, DatasetSpec], problems: list[str]) -> list[ImageRecord]:
    out = []
    if not isinstance(raw, list):
        problems.append("'images' must be a list")
        return out
    seen = set()
    for i, im in enumerate(raw):
        where = f"image #{i}"
        try:
            image_id, h, w = int(im["id"]), int(im["height"]), int(im["width"])
        except (TypeError, KeyError, ValueError) as exc:
            problems.append(f"{where}: needs integer id, height and width ({exc})")
            continue
        where = f"image {image_id}"
        if image_id in seen:
            problems.append(f"{where}: duplicate image id")
        seen.add(image_id)
        if h < 1 or w < 1:
            problems.append(f"{where}: height and width must be positive")
        dataset = im.get("dataset")
        if dataset is None and len(specs) == 1:
            dataset = next(iter(specs))
        if dataset not in specs:
            problems.append(f"{where}: unknown dataset {dataset!r}")
        source = {k: im[k] for k in ("feature_file", "generator") if k in im}
        if len(source) != 1:
            problems.append(f"{where}: needs exactly one of 'feature_file' or 'generator'")
        out.append(ImageRecord(image_id, h, w, str(dataset), source))
    return out


def _parse_annotation(a, where: str, images: dict[int, ImageRecord], specs, problems: list[str]):
    try:
        image_id = int(a["image_id"])
        category_id = int(a["category_id"])
    except (TypeError, KeyError, ValueError) as exc:
        problems.append(f"{where}: needs integer image_id and category_id ({exc})")
        return None
    image = images.get(image_id)
    if image is None:
        problems.append(f"{where}: image_id {image_id} does not resolve to an image")
        return None
    spec = specs.get(image.dataset)
    if spec is not None:
        try:
            spec.class_index(category_id)
        except MissingCategory:
            problems.append(f"{where}: unknown category id {category_id} for dataset {spec.name!r}")
    mask = box = None
    ok = True
    if "segmentation" in a:
        try:
            mask = RleMask.from_json(a["segmentation"])
        except (TypeError, KeyError, ValueError) as exc:
            problems.append(f"{where}: malformed segmentation ({exc})")
            return None
        if (mask.height, mask.width) != (image.height, image.width):
            problems.append(
                f"{where}: mask size {mask.height}x{mask.width} != image size {image.height}x{image.width}"
            )
            ok = False
        total = sum(mask.counts)
        if total != mask.height * mask.width:
            problems.append(
                f"{where}: RLE counts sum to {total}, expected {mask.height}x{mask.width}={mask.height * mask.width}"
            )
            ok = False
    if "box" in a:
        try:
            box = tuple(int(v) for v in a["box"])
        except (TypeError, ValueError) as exc:
            problems.append(f"{where}: malformed box ({exc})")
            return None
        if len(box) != 4:
            problems.append(f"{where}: box needs 4 values (x0, y0, x1, y1)")
            return None
        x0, y0, x1, y1 = box
        if not (0 <= x0 < x1 <= image.width and 0 <= y0 < y1 <= image.height):
            problems.append(f"{where}: box {list(box)} is empty or outside the image")
            ok = False
    if mask is None and box is None:
        problems.append(f"{where}: needs a segmentation, a box, or both")
        return None
    if not ok:
        return None
    try:
        gt = SegmentGT(category_id, mask, box, bool(a.get("ignore", False)))
    except ValueError as exc:
        problems.append(f"{where}: {exc}")
        return None
    score = a.get("score")
    return Annotation(int(a.get("id", 0)), image_id, gt, None if score is None else float(score))


def manifest_from_json(obj, base_dir: Path | str = ".") -> Manifest:
    """Validate a parsed manifest; every problem found is reported at once."""
    if not isinstance(obj, Mapping):
        raise ValidationError(["manifest must be a JSON object"])
    problems: list[str] = []
    version = obj.get("version")
    if version != MANIFEST_VERSION:
        problems.append(f"unsupported version {version!r}; expected {MANIFEST_VERSION}")
    specs_list = _parse_datasets(obj.get("datasets"), problems)
    specs = {d.name: d for d in specs_list}
    images = _parse_images(obj.get("images", []), specs, problems)
    by_id = {im.id: im for im in images}
    annotations = []
    raw = obj.get("annotations", [])
    if not isinstance(raw, list):
        problems.append("'annotations' must be a list")
        raw = []
    for i, a in enumerate(raw):
        where = f"annotation {a.get('id', f'#{i}')}" if isinstance(a, Mapping) else f"annotation #{i}"
        if not isinstance(a, Mapping):
            problems.append(f"{where}: must be an object")
            continue
        ann = _parse_annotation(a, where, by_id, specs, problems)
        if ann is not None:
            annotations.append(ann)
    if problems:
        raise ValidationError(problems)
    return Manifest(int(version), tuple(images), tuple(specs_list), tuple(annotations), Path(base_dir))


def load_manifest(path) -> Manifest:
    path = Path(path)
    return manifest_from_json(read_json(path), path.parent)


def save_manifest(manifest: Manifest, path) -> None:
    write_json(manifest.to_json(), path)


def image_features(manifest: Manifest, image_id: int) -> np.ndarray:
    """Per-pixel features of an image, loaded or regenerated."""
    from .cotrain.synth import make_scene

    image = manifest.image(image_id)
    if "feature_file" in image.source:
        feats = np.load(manifest.base_dir / image.source["feature_file"])
    else:
        g = image.source["generator"]
        feats = make_scene(g["kind"], int(g["seed"]), int(g["index"]), int(g.get("size", image.height))).image_features
    if feats.shape[:2] != (image.height, image.width):
        raise ValidationError([f"image {image_id}: features are {feats.shape[:2]}, expected {(image.height, image.width)}"])
    return feats


def image_rgb(manifest: Manifest, image_id: int) -> np.ndarray | None:
    """RGB for generated images; None when only features are available."""
    from .cotrain.synth import make_scene

    image = manifest.image(image_id)
    g = image.source.get("generator")
    if g is None:
        return None
    return make_scene(g["kind"], int(g["seed"]), int(g["index"]), int(g.get("size", image.height))).rgb


# -- proposals ----------------------------------------------------------------


def proposals_to_json(items: Sequence[tuple[int, ProposalSet]]) -> dict:
    return {
        "version": MANIFEST_VERSION,
        "proposals": [
            {"image_id": image_id, "mask_logits": p.mask_logits, "class_logits": p.class_logits}
            for image_id, p in items
        ],
    }


def proposals_from_json(obj) -> list[tuple[int, ProposalSet]]:
    try:
        items = obj["proposals"]
        return [
            (int(it["image_id"]), ProposalSet(np.asarray(it["mask_logits"], dtype=np.float64),
                                              np.asarray(it["class_logits"], dtype=np.float64)))
            for it in items
        ]
    except (TypeError, KeyError) as exc:
        raise ValidationError([f"malformed proposals file: {exc}"]) from exc


def save_proposals(items, path) -> None:
    write_json(proposals_to_json(items), path)


def load_proposals(path) -> list[tuple[int, ProposalSet]]:
    return proposals_from_json(read_json(path))


# -- task outputs as manifest annotations ---------------------------------------


def output_annotations(image_id: int, output, start_id: int = 1) -> list[Annotation]:
    """Express a post-processed output as manifest annotations."""
    anns = []
    if isinstance(output, PanopticOutput):
        for s in output.segments:
            gt = SegmentGT.from_mask(s.category_id, output.segment_mask(s.id))
            anns.append(Annotation(start_id + len(anns), image_id, gt, s.score))
    elif isinstance(output, SemanticOutput):
        for c in np.unique(output.label_map):
            if c < 0:
                continue
            anns.append(Annotation(start_id + len(anns), image_id, SegmentGT.from_mask(int(c), output.label_map == c)))
    elif isinstance(output, InstanceOutput):
        for inst in output.instances:
            anns.append(Annotation(start_id + len(anns), image_id, SegmentGT(inst.category_id, inst.mask), inst.score))
    else:
        raise TypeError(f"unsupported output type {type(output).__name__}")
    return anns


def panoptic_from_annotations(anns: Sequence[Annotation], spec: DatasetSpec, height: int, width: int) -> PanopticOutput:
    masks = [a.gt.dense_mask for a in anns if a.gt.mask is not None]
    if not masks:
        return PanopticOutput(np.zeros((height, width), dtype=np.int64), ())
    cats = [a.gt.category_id for a in anns if a.gt.mask is not None]
    scores = [1.0 if a.score is None else a.score for a in anns if a.gt.mask is not None]
    return PanopticOutput.from_masks(masks, cats, [spec.is_thing(c) for c in cats], scores)


def semantic_from_annotations(anns: Sequence[Annotation], height: int, width: int) -> SemanticOutput:
    label = np.full((height, width), -1, dtype=np.int64)
    for a in anns:
        if a.gt.mask is not None:
            label[a.gt.dense_mask] = a.gt.category_id
    return SemanticOutput(label)


def instances_from_annotations(anns: Sequence[Annotation]) -> InstanceOutput:
    return InstanceOutput(tuple(
        Instance(a.gt.category_id, 1.0 if a.score is None else a.score, a.gt.mask)
        for a in anns
        if a.gt.mask is not None
    ))


# -- config and checkpoints ------------------------------------------------------


def load_config(path):
    from .cotrain.train import TrainConfig

    obj = read_json(path)
    try:
        return TrainConfig.from_json(obj)
    except (TypeError, KeyError, ValueError) as exc:
        raise ValidationError([f"{path}: invalid training config: {exc}"]) from exc


def save_config(config, path) -> None:
    write_json(config.to_json(), path)


def save_checkpoint(head, table: EmbeddingTable, path) -> None:
    """Head parameters plus the classifier table in one flat binary file."""
    from .cotrain.head import PARAM_NAMES

    names = sorted(table.entries)
    arrays = [(n, np.asarray(getattr(head, n))) for n in PARAM_NAMES]
    arrays.append(("embeddings", table.matrix(names)[:-1]))
    header = {
        "format": CHECKPOINT_MAGIC,
        "version": 1,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "embedding_names": names,
    }
    head_bytes = canonical_dumps(header).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    Path(path).write_bytes(struct.pack("<Q", len(head_bytes)) + head_bytes + payload)


def load_checkpoint(path):
    """Returns ``(head, table)`` as written by :func:`save_checkpoint`."""
    from .cotrain.head import ToyHead

    data = Path(path).read_bytes()
    if len(data) < 8:
        raise ParseError(f"{path}: truncated checkpoint")
    (n,) = struct.unpack("<Q", data[:8])
    try:
        header = json.loads(data[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: unreadable checkpoint header") from exc
    if header.get("format") != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: not a checkpoint file")
    offset = 8 + n
    arrays = {}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"]))
        chunk = data[offset : offset + 8 * count]
        if len(chunk) != 8 * count:
            raise ParseError(f"{path}: payload too short for {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(spec["shape"]).astype(np.float64)
        offset += 8 * count
    if offset != len(data):
        raise ParseError(f"{path}: {len(data) - offset} trailing bytes")
    head = ToyHead(arrays["queries"], arrays["mask_map"], arrays["class_map"], arrays["background"])
    emb = arrays["embeddings"]
    entries = {name: emb[i] for i, name in enumerate(header["embedding_names"])}
    table = EmbeddingTable(emb.shape[1], entries, arrays["background"])
    return head, table
