"""Box-prompted mask generation from horizontal bounding-box annotations.

A promptable segmenter (the "oracle") turns each box into a probability map;
maps are thresholded, clipped to their box and OR-combined into one mask.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .dataset import ImageSample, SegMask, list_images, load_image, save_mask

Box = tuple[int, int, int, int]  # x_min, y_min, x_max, y_max; half-open


class AnnotationError(ValueError):
    pass


class OracleError(RuntimeError):
    """Oracle call failed for one box; safe to retry."""

    retryable = True

    def __init__(self, box_index: int, cause: Exception | str):
        super().__init__(f"segmenter oracle failed on box {box_index}: {cause}")
        self.box_index = box_index


@dataclass
class HBBAnnotation:
    boxes: list[Box] = field(default_factory=list)
    class_filter: str = "ship"

    def validate(self, height: int, width: int) -> None:
        for i, (x0, y0, x1, y1) in enumerate(self.boxes):
            if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
                raise AnnotationError(f"box {i} {(x0, y0, x1, y1)} invalid for a {height}x{width} image")


class SegmenterOracle(Protocol):
    name: str

    def predict(self, image: np.ndarray, box: Box) -> np.ndarray:
        """Foreground probability map [H, W] in [0, 1] for ``image`` [C, H, W]."""


class MockOracle:
    """Deterministic stand-in for a promptable segmenter.

    box-fill: 1 inside the box. ellipse-in-box: 1 inside the inscribed ellipse.
    constant: ``value`` everywhere.
    """

    POLICIES = ("box-fill", "ellipse-in-box", "constant")

    def __init__(self, fill_policy: str = "box-fill", value: float = 0.0):
        if fill_policy not in self.POLICIES:
            raise ValueError(f"unknown fill policy {fill_policy!r}")
        self.fill_policy = fill_policy
        self.value = value
        self.name = f"mock:{fill_policy}"

    def predict(self, image: np.ndarray, box: Box) -> np.ndarray:
        h, w = image.shape[-2:]
        if self.fill_policy == "constant":
            return np.full((h, w), self.value, dtype=np.float32)
        x0, y0, x1, y1 = box
        prob = np.zeros((h, w), dtype=np.float32)
        if self.fill_policy == "box-fill":
            prob[y0:y1, x0:x1] = 1.0
            return prob
        yy, xx = np.mgrid[0:h, 0:w] + 0.5
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        rx, ry = (x1 - x0) / 2, (y1 - y0) / 2
        prob[((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0] = 1.0
        return prob


def mock_oracle(fill_policy: str = "box-fill", value: float = 0.0) -> MockOracle:
    return MockOracle(fill_policy, value)


class SamOracle:
    """Adapter for the ``segment_anything`` predictor (optional dependency)."""

    def __init__(self, checkpoint: str | Path, model_type: str = "vit_h", device: str = "cpu"):
        try:
            from segment_anything import SamPredictor, sam_model_registry
        except ImportError as exc:
            raise AnnotationError("the SAM oracle needs the segment_anything package") from exc
        sam = sam_model_registry[model_type](checkpoint=str(checkpoint))
        sam.to(device=device)
        self.predictor = SamPredictor(sam)
        self.name = f"sam:{model_type}"
        self._image_id = None

    def predict(self, image: np.ndarray, box: Box) -> np.ndarray:
        if self._image_id != id(image):
            hwc = np.clip(image, 0, 255).astype(np.uint8).transpose(1, 2, 0)
            if hwc.shape[2] == 1:
                hwc = np.repeat(hwc, 3, axis=2)
            self.predictor.set_image(hwc)
            self._image_id = id(image)
        masks, _, _ = self.predictor.predict(box=np.asarray(box, dtype=np.float32), multimask_output=False,
                                             return_logits=True)
        return 1.0 / (1.0 + np.exp(-masks[0]))


def _call_oracle(oracle, pixels: np.ndarray, box: Box, index: int, retries: int) -> np.ndarray:
    for attempt in range(retries + 1):
        try:
            prob = np.asarray(oracle.predict(pixels, box))
            break
        except Exception as exc:
            if attempt == retries:
                raise OracleError(index, exc) from exc
    if prob.shape != pixels.shape[-2:]:
        raise OracleError(index, f"probability map shape {prob.shape} != image shape {pixels.shape[-2:]}")
    return prob


def boxes_to_mask(image: ImageSample, ann: HBBAnnotation, oracle: SegmenterOracle, prob_threshold: float = 0.5,
                  retries: int = 0, workers: int = 1, class_names: Sequence[str] = ("background", "ship")) -> SegMask:
    """One oracle call per box, thresholded (``p > prob_threshold``), clipped to the box, OR-combined."""
    h, w = image.shape
    ann.validate(h, w)
    labels = np.zeros((h, w), dtype=np.int64)
    if not ann.boxes:
        return SegMask(labels, tuple(class_names))

    def one(item):
        i, box = item
        return box, _call_oracle(oracle, image.pixels, box, i, retries)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, enumerate(ann.boxes)))
    else:
        results = [one(item) for item in enumerate(ann.boxes)]
    for (x0, y0, x1, y1), prob in results:
        inside = prob[y0:y1, x0:x1] > prob_threshold
        labels[y0:y1, x0:x1] |= inside
    return SegMask(labels, tuple(class_names))


# --- annotation readers -----------------------------------------------------

def read_hbb_txt(path: str | Path, class_filter: str = "ship") -> HBBAnnotation:
    """``class x_min y_min x_max y_max`` per line; other classes are skipped."""
    boxes = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if len(parts) != 5:
            raise AnnotationError(f"{path}:{n}: expected 'class x_min y_min x_max y_max'")
        if parts[0] != class_filter:
            continue
        boxes.append(tuple(int(round(float(v))) for v in parts[1:]))
    return HBBAnnotation(boxes, class_filter)


def read_coco(path: str | Path, class_filter: str = "ship") -> dict[str, HBBAnnotation]:
    """COCO-style JSON (``bbox = [x, y, w, h]``) -> annotation per image file name."""
    data = json.loads(Path(path).read_text())
    cat_ids = {c["id"] for c in data.get("categories", []) if c.get("name") == class_filter}
    images = {im["id"]: im for im in data.get("images", [])}
    out = {im["file_name"]: HBBAnnotation([], class_filter) for im in images.values()}
    for a in data.get("annotations", []):
        if a.get("category_id") not in cat_ids:
            continue
        im = images[a["image_id"]]
        x, y, bw, bh = a["bbox"]
        x0, y0 = max(0, int(np.floor(x))), max(0, int(np.floor(y)))
        x1 = min(im.get("width", x + bw), int(np.ceil(x + bw)))
        y1 = min(im.get("height", y + bh), int(np.ceil(y + bh)))
        if x1 > x0 and y1 > y0:
            out[im["file_name"]].boxes.append((x0, y0, int(x1), int(y1)))
    return out


def annotate_directory(images_dir: str | Path, output_dir: str | Path, oracle: SegmenterOracle,
                       boxes_dir: str | Path | None = None, coco: str | Path | None = None,
                       class_filter: str = "ship", prob_threshold: float = 0.5) -> dict:
    """Write one PNG mask per image plus ``annotation.json`` recording the oracle and threshold."""
    if (boxes_dir is None) == (coco is None):
        raise AnnotationError("give exactly one of a box-text directory or a COCO JSON file")
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    coco_anns = read_coco(coco, class_filter) if coco else None
    counts = {}
    for path in list_images(images_dir):
        if coco_anns is not None:
            ann = coco_anns.get(path.name, HBBAnnotation([], class_filter))
        else:
            txt = Path(boxes_dir) / f"{path.stem}.txt"
            ann = read_hbb_txt(txt, class_filter) if txt.exists() else HBBAnnotation([], class_filter)
        mask = boxes_to_mask(load_image(path), ann, oracle, prob_threshold)
        save_mask(mask, output_dir / f"{path.stem}.png")
        counts[path.stem] = {"boxes": len(ann.boxes), "target_pixels": int(mask.labels.sum())}
    sidecar = {"oracle": oracle.name, "prob_threshold": prob_threshold, "class_filter": class_filter,
               "images": counts}
    (output_dir / "annotation.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return sidecar
