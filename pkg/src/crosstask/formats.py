"""On-disk formats: label masks, box documents, tensors, configs, manifests.

Box document (JSON, fixed key order, floats with 6 decimals)::

    {"images": [
      {"id": "0001", "width": 640, "height": 480, "boxes": [
        {"bbox": [x_min, y_min, x_max, y_max], "category": 1,
         "scores": [...], "score": 0.9, "origin": "split", "train_classification": false}
      ]}
    ]}

Only ``bbox`` and ``category`` are required.

Tensor file: three little-endian uint64 (width, height, channels) followed by
``height * width * channels`` little-endian float64 values in row-major
``(H, W, C)`` order.
"""

from __future__ import annotations

import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from PIL import Image

from .geometry import Box, ScoredBox, SemanticMask
from .mask_for_box import Origin, RefinedBox, RefinementParams


class FormatError(ValueError):
    """Input file is malformed or violates its contract."""


class ConfigError(FormatError):
    """Run configuration is missing, malformed or out of range."""


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temporary file in the target directory and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# masks ----------------------------------------------------------------------

def read_mask(path: str | os.PathLike, num_classes: int | None = None) -> SemanticMask:
    """Read a single-channel 8-bit PNG or a plain-text PGM (P2) label map."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.format not in ("PNG", "PPM"):
                raise FormatError(f"{path}: unsupported mask format {im.format}")
            if im.mode != "L":
                raise FormatError(f"{path}: mask must be single-channel 8-bit, got mode {im.mode}")
            labels = np.array(im, dtype=np.uint8)
    except FormatError:
        raise
    except (OSError, SyntaxError, ValueError) as exc:
        raise FormatError(f"{path}: cannot read mask ({exc})") from exc
    try:
        return SemanticMask(labels, num_classes)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def mask_png_bytes(mask: SemanticMask) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(mask.labels), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def write_mask(mask: SemanticMask, path: str | os.PathLike) -> None:
    atomic_write(path, mask_png_bytes(mask))


def read_image(path: str | os.PathLike) -> np.ndarray:
    """RGB ``(H, W, 3)`` uint8 raster."""
    try:
        with Image.open(path) as im:
            return np.array(im.convert("RGB"))
    except (OSError, SyntaxError, ValueError) as exc:
        raise FormatError(f"{path}: cannot read image ({exc})") from exc


def write_image(image: np.ndarray, path: str | os.PathLike) -> None:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(buf, format="PNG")
    atomic_write(path, buf.getvalue())


# box documents --------------------------------------------------------------

@dataclass(frozen=True)
class BoxRecord:
    box: Box
    category: int
    scores: tuple[float, ...] | None = None
    score: float | None = None
    origin: str | None = None
    train_classification: bool | None = None

    def to_scored(self, num_classes: int | None = None) -> ScoredBox:
        """Detection view; a lone ``score`` goes to the category slot."""
        n = max(num_classes or 0, self.category, len(self.scores or ()))
        if self.scores is not None:
            scores = tuple(self.scores) + (0.0,) * (n - len(self.scores))
        else:
            s = 1.0 if self.score is None else self.score
            scores = tuple(s if j == self.category - 1 else 0.0 for j in range(n))
        scalar = self.score if self.score is not None else max(scores)
        return ScoredBox(self.box, self.category, scores, scalar)

    @classmethod
    def from_refined(cls, r: RefinedBox) -> "BoxRecord":
        return cls(r.box, r.category, None, r.confidence, r.origin.value, r.train_classification)


@dataclass(frozen=True)
class ImageBoxes:
    id: str
    width: int
    height: int
    boxes: tuple[BoxRecord, ...] = field(default=())

    def ground_truth(self) -> list[tuple[Box, int]]:
        return [(b.box, b.category) for b in self.boxes]

    def detections(self, num_classes: int | None = None) -> list[ScoredBox]:
        return [b.to_scored(num_classes) for b in self.boxes]


def _num(v: float) -> str:
    return f"{float(v):.6f}"


def _box_json(b: BoxRecord) -> str:
    parts = [f'"bbox": [{", ".join(_num(c) for c in b.box.as_tuple())}]', f'"category": {int(b.category)}']
    if b.scores is not None:
        parts.append(f'"scores": [{", ".join(_num(s) for s in b.scores)}]')
    if b.score is not None:
        parts.append(f'"score": {_num(b.score)}')
    if b.origin is not None:
        parts.append(f'"origin": {json.dumps(b.origin)}')
    if b.train_classification is not None:
        parts.append(f'"train_classification": {"true" if b.train_classification else "false"}')
    return "{" + ", ".join(parts) + "}"


def dump_boxes(images: Sequence[ImageBoxes]) -> str:
    lines = ['{"images": [']
    for k, img in enumerate(images):
        head = f'  {{"id": {json.dumps(img.id)}, "width": {int(img.width)}, "height": {int(img.height)}, "boxes": ['
        lines.append(head)
        for j, b in enumerate(img.boxes):
            lines.append("    " + _box_json(b) + ("," if j + 1 < len(img.boxes) else ""))
        lines.append("  ]}" + ("," if k + 1 < len(images) else ""))
    lines.append("]}")
    return "\n".join(lines) + "\n"


def write_boxes(images: Sequence[ImageBoxes], path: str | os.PathLike) -> None:
    atomic_write(path, dump_boxes(images).encode("utf-8"))


def _parse_box(raw: Any, where: str) -> BoxRecord:
    if not isinstance(raw, dict):
        raise FormatError(f"{where}: box entry must be an object")
    unknown = set(raw) - {"bbox", "category", "scores", "score", "origin", "train_classification"}
    if unknown:
        raise FormatError(f"{where}: unknown fields {sorted(unknown)}")
    bbox = raw.get("bbox")
    if not (isinstance(bbox, list) and len(bbox) == 4 and all(_is_number(v) for v in bbox)):
        raise FormatError(f"{where}: bbox must be four numbers")
    try:
        box = Box(*bbox)
    except ValueError as exc:
        raise FormatError(f"{where}: {exc}") from exc
    cat = raw.get("category")
    if not isinstance(cat, int) or isinstance(cat, bool) or cat < 1:
        raise FormatError(f"{where}: category must be an integer >= 1, got {cat!r}")
    scores = raw.get("scores")
    if scores is not None:
        if not (isinstance(scores, list) and all(_is_number(s) and 0 <= s <= 1 for s in scores)):
            raise FormatError(f"{where}: scores must be numbers in [0, 1]")
        if len(scores) < cat:
            raise FormatError(f"{where}: {len(scores)} scores cannot cover category {cat}")
        scores = tuple(float(s) for s in scores)
    score = raw.get("score")
    if score is not None and not (_is_number(score) and 0 <= score <= 1):
        raise FormatError(f"{where}: score must be a number in [0, 1]")
    origin = raw.get("origin")
    if origin is not None and origin not in {o.value for o in Origin}:
        raise FormatError(f"{where}: unknown origin {origin!r}")
    tc = raw.get("train_classification")
    if tc is not None and not isinstance(tc, bool):
        raise FormatError(f"{where}: train_classification must be a boolean")
    return BoxRecord(box, cat, scores, None if score is None else float(score), origin, tc)


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def parse_boxes(text: str, source: str = "<boxes>") -> list[ImageBoxes]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{source}: malformed JSON ({exc})") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("images"), list):
        raise FormatError(f'{source}: top level must be an object with an "images" list')
    out = []
    for i, img in enumerate(doc["images"]):
        where = f"{source}: images[{i}]"
        if not isinstance(img, dict):
            raise FormatError(f"{where}: must be an object")
        for key in ("id", "width", "height", "boxes"):
            if key not in img:
                raise FormatError(f"{where}: missing {key!r}")
        w, h = img["width"], img["height"]
        if not all(isinstance(v, int) and not isinstance(v, bool) and v > 0 for v in (w, h)):
            raise FormatError(f"{where}: width and height must be positive integers")
        if not isinstance(img["boxes"], list):
            raise FormatError(f"{where}: boxes must be a list")
        boxes = tuple(_parse_box(b, f"{where}.boxes[{j}]") for j, b in enumerate(img["boxes"]))
        out.append(ImageBoxes(str(img["id"]), w, h, boxes))
    return out


def read_boxes(path: str | os.PathLike) -> list[ImageBoxes]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return parse_boxes(text, str(path))


# tensors --------------------------------------------------------------------

_HEADER = np.dtype("<u8")


def tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f8")
    if arr.ndim != 3:
        raise ValueError("tensor must be (H, W, C)")
    h, w, c = arr.shape
    return np.array([w, h, c], dtype=_HEADER).tobytes() + np.ascontiguousarray(arr).tobytes()


def write_tensor(arr: np.ndarray, path: str | os.PathLike) -> None:
    atomic_write(path, tensor_bytes(arr))


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 24:
        raise FormatError(f"{path}: truncated header")
    w, h, c = (int(v) for v in np.frombuffer(data[:24], dtype=_HEADER))
    expected = 24 + 8 * w * h * c
    if len(data) != expected:
        raise FormatError(f"{path}: header says {w}x{h}x{c} ({expected} bytes), file has {len(data)}")
    return np.frombuffer(data[24:], dtype="<f8").reshape(h, w, c).astype(np.float64)


# run configuration ----------------------------------------------------------

_REFINE_KEYS = {f.name: f.type for f in fields(RefinementParams)}


@dataclass(frozen=True)
class RunConfig:
    seed: int
    refinement: RefinementParams = field(default_factory=RefinementParams)
    segmenter: str = "grabcut"
    grabcut_iters: int = 5
    grabcut_components: int = 5
    grabcut_lambda: float = 50.0
    lam: float = 2.0
    gamma: float = 0.1
    key_capacity: int = 64
    num_classes: int | None = None
    out: str | None = None


_RUN_KEYS: dict[str, type] = {
    "seed": int, "segmenter": str, "grabcut_iters": int, "grabcut_components": int,
    "grabcut_lambda": float, "lambda": float, "gamma": float, "key_capacity": int,
    "num_classes": int, "out": str,
}


def _convert(key: str, raw: str, typ) -> Any:
    try:
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError
            return v
        return raw
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None


def parse_config(text: str, seed_override: int | None = None) -> RunConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, Any] = {}
    refine: dict[str, Any] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in values or key in refine:
            raise ConfigError(f"config line {n}: duplicate key {key!r}")
        if key in _REFINE_KEYS:
            refine[key] = _convert(key, raw, _REFINE_KEYS[key])
        elif key in _RUN_KEYS:
            values[key] = _convert(key, raw, _RUN_KEYS[key])
        else:
            raise ConfigError(f"config line {n}: unknown key {key!r}")
    if seed_override is not None:
        values["seed"] = seed_override
    if "seed" not in values:
        raise ConfigError("config must set 'seed'")
    if "lambda" in values:
        values["lam"] = values.pop("lambda")
    if values.get("segmenter", "grabcut") not in ("grabcut", "boxfill"):
        raise ConfigError("segmenter must be 'grabcut' or 'boxfill'")
    try:
        cfg = RunConfig(refinement=RefinementParams(**refine), **values)
    except ValueError as exc:
        raise ConfigError(f"config: {exc}") from exc
    for key in ("grabcut_iters", "key_capacity"):
        if getattr(cfg, key) < (0 if key == "grabcut_iters" else 1):
            raise ConfigError(f"config: {key} out of range")
    if cfg.grabcut_components < 1 or cfg.grabcut_lambda < 0 or cfg.gamma <= 0 or cfg.lam < 0:
        raise ConfigError("config: grabcut_components, grabcut_lambda, gamma or lambda out of range")
    if cfg.num_classes is not None and not 1 <= cfg.num_classes <= 254:
        raise ConfigError("config: num_classes must be in [1, 254]")
    return cfg


def read_config(path: str | os.PathLike, seed_override: int | None = None) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(text, seed_override)


# manifest -------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRecord:
    image_id: str
    task_tag: str
    image_path: Path | None = None
    mask_path: Path | None = None
    boxes_path: Path | None = None


def read_manifest(path: str | os.PathLike) -> list[ManifestRecord]:
    """JSON ``{"records": [...]}``; relative paths resolve against the manifest's folder."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("records"), list):
        raise FormatError(f'{path}: expected an object with a "records" list')
    out, seen = [], set()
    for i, rec in enumerate(doc["records"]):
        where = f"{path}: records[{i}]"
        if not isinstance(rec, dict) or "image_id" not in rec:
            raise FormatError(f"{where}: needs an image_id")
        tag = rec.get("task_tag")
        if tag not in ("det", "seg"):
            raise FormatError(f"{where}: task_tag must be 'det' or 'seg'")
        paths = {k: (path.parent / rec[k]) if rec.get(k) else None
                 for k in ("image_path", "mask_path", "boxes_path")}
        if tag == "seg" and paths["mask_path"] is None:
            raise FormatError(f"{where}: seg records need mask_path")
        if tag == "det" and paths["boxes_path"] is None:
            raise FormatError(f"{where}: det records need boxes_path")
        image_id = str(rec["image_id"])
        if image_id in seen:
            raise FormatError(f"{where}: duplicate image_id {image_id!r}")
        seen.add(image_id)
        out.append(ManifestRecord(image_id, tag, **paths))
    return out


def write_manifest(records: Sequence[ManifestRecord], path: str | os.PathLike) -> None:
    base = Path(path).parent

    def rel(p):
        return None if p is None else os.path.relpath(p, base)

    doc = {"records": [{"image_id": r.image_id, "image_path": rel(r.image_path), "mask_path": rel(r.mask_path),
                        "boxes_path": rel(r.boxes_path), "task_tag": r.task_tag} for r in records]}
    atomic_write(path, (json.dumps(doc, indent=2) + "\n").encode("utf-8"))
