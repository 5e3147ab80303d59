"""Tiling, filtering, rotation augmentation, normalization and manifests."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

RANGE_UINT8 = "uint8-0-255"
RANGE_NORMALIZED = "normalized-minus1-1"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")
DEFAULT_ANGLES = (10, 30, 50, 70, 90, 110, 130, 150, 170)


class DatasetError(ValueError):
    pass


class ManifestError(DatasetError):
    pass


@dataclass
class ImageSample:
    pixels: np.ndarray  # float32 [C, H, W]
    range_tag: str = RANGE_UINT8
    source_id: str = ""
    tile_origin: tuple[int, int] = (0, 0)
    rotation_deg: int = 0

    def __post_init__(self):
        if self.pixels.ndim != 3:
            raise DatasetError(f"pixels must be [C, H, W], got shape {self.pixels.shape}")
        if self.range_tag not in (RANGE_UINT8, RANGE_NORMALIZED):
            raise DatasetError(f"unknown range tag {self.range_tag!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[2]


@dataclass
class SegMask:
    labels: np.ndarray  # integer [H, W]
    class_names: tuple[str, ...] = ("background", "ship")

    def __post_init__(self):
        if self.labels.ndim != 2:
            raise DatasetError(f"mask must be [H, W], got shape {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DatasetError("mask contains undeclared class indices")

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


def _check_aligned(sample: ImageSample, mask: SegMask) -> None:
    if tuple(mask.shape) != tuple(sample.shape):
        raise DatasetError(f"mask shape {mask.shape} does not match image shape {sample.shape}")


# --- tiling -----------------------------------------------------------------

def tile_origins(dim: int, window: int = 256, step: int = 205) -> list[int]:
    """Origins along one axis; the clamped origin ``dim - window`` closes any gap."""
    if dim < window:
        raise DatasetError(f"dimension {dim} is smaller than the {window}px window")
    if step < 1:
        raise DatasetError("step must be positive")
    origins = list(range(0, dim - window + 1, step))
    if origins[-1] != dim - window:
        origins.append(dim - window)
    return origins


def crop_tiles(image: ImageSample, window: int = 256, step: int = 205, mask: SegMask | None = None):
    """Cut ``image`` (and ``mask``, with the same origins) into window x window tiles.

    Returns a list of ImageSample, or of (ImageSample, SegMask) when a mask is given.
    """
    h, w = image.shape
    if h < window or w < window:
        raise DatasetError(f"image {h}x{w} is smaller than the {window}px window")
    if mask is not None:
        _check_aligned(image, mask)
    out = []
    for r in tile_origins(h, window, step):
        for c in tile_origins(w, window, step):
            tile = replace(
                image,
                pixels=image.pixels[:, r:r + window, c:c + window].copy(),
                tile_origin=(image.tile_origin[0] + r, image.tile_origin[1] + c),
            )
            if mask is None:
                out.append(tile)
            else:
                out.append((tile, replace(mask, labels=mask.labels[r:r + window, c:c + window].copy())))
    return out


def filter_min_target_pixels(sample: ImageSample, mask: SegMask, threshold: int = 95) -> bool:
    """True if the tile has at least ``threshold`` target pixels and should be kept."""
    _check_aligned(sample, mask)
    return int(np.count_nonzero(mask.labels == 1)) >= threshold


# --- augmentation -----------------------------------------------------------

def rotate_pair(sample: ImageSample, mask: SegMask | None, angle: float):
    """Rotate counter-clockwise by ``angle`` degrees about the tile centre.

    Image: bilinear with reflected borders. Mask: nearest neighbour, background fill.
    """
    h, w = sample.shape
    if h != w:
        raise DatasetError("rotation is only defined for square tiles")
    if mask is not None:
        _check_aligned(sample, mask)
    rotation = int(round(angle))
    quarter, rem = divmod(angle, 90)
    if rem == 0:
        # exact quarter turns avoid interpolation error at the corners
        k = int(quarter) % 4
        pix = np.rot90(sample.pixels, k, axes=(1, 2)).copy()
        lab = None if mask is None else np.rot90(mask.labels, k).copy()
    else:
        pix = ndimage.rotate(sample.pixels, angle, axes=(2, 1), reshape=False, order=1, mode="reflect")
        pix = pix.astype(sample.pixels.dtype)
        if sample.range_tag == RANGE_NORMALIZED:
            np.clip(pix, -1.0, 1.0, out=pix)
        lab = None
        if mask is not None:
            lab = ndimage.rotate(mask.labels, angle, axes=(1, 0), reshape=False, order=0,
                                 mode="constant", cval=0)
    rotated = replace(sample, pixels=pix, rotation_deg=(sample.rotation_deg + rotation) % 360)
    return rotated, (None if lab is None else replace(mask, labels=lab.astype(mask.labels.dtype)))


def augment_rotations(sample: ImageSample, mask: SegMask | None,
                      angles: Iterable[float] = DEFAULT_ANGLES):
    """Original pair followed by one rotated copy per angle."""
    angles = list(angles)
    for a in angles:
        if not 0 < a < 360:
            raise DatasetError(f"rotation angle {a} outside (0, 360)")
    if sample.shape[0] != sample.shape[1]:
        raise DatasetError("rotation is only defined for square tiles")
    return [(sample, mask)] + [rotate_pair(sample, mask, a) for a in angles]


def parse_angles(text: str | None) -> list[int]:
    """``"10:170:20"`` -> [10, 30, ..., 170]; comma lists are accepted too."""
    if not text or text.lower() == "none":
        return []
    if ":" in text:
        start, stop, step = (int(t) for t in text.split(":"))
        return list(range(start, stop + 1, step))
    return [int(t) for t in text.split(",")]


# --- value range ------------------------------------------------------------

def normalize(sample: ImageSample) -> ImageSample:
    if sample.range_tag != RANGE_UINT8:
        raise DatasetError(f"{sample.source_id or 'sample'} is already normalized")
    pix = sample.pixels.astype(np.float32) / np.float32(127.5) - np.float32(1.0)
    return replace(sample, pixels=pix, range_tag=RANGE_NORMALIZED)


def denormalize(sample: ImageSample) -> ImageSample:
    if sample.range_tag != RANGE_NORMALIZED:
        raise DatasetError(f"{sample.source_id or 'sample'} is not normalized")
    pix = np.clip((sample.pixels.astype(np.float32) + 1.0) * 127.5, 0.0, 255.0)
    return replace(sample, pixels=np.round(pix).astype(np.float32), range_tag=RANGE_UINT8)


# --- file IO ----------------------------------------------------------------

def load_image(path: str | Path, channels: int = 3) -> ImageSample:
    img = Image.open(path)
    img = img.convert("RGB" if channels == 3 else "L")
    arr = np.asarray(img, dtype=np.float32)
    arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
    return ImageSample(np.ascontiguousarray(arr), RANGE_UINT8, source_id=Path(path).stem)


def save_image(sample: ImageSample, path: str | Path) -> None:
    if sample.range_tag == RANGE_NORMALIZED:
        sample = denormalize(sample)
    arr = np.clip(np.round(sample.pixels), 0, 255).astype(np.uint8)
    arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def load_mask(path: str | Path, class_names: Sequence[str] = ("background", "ship")) -> SegMask:
    labels = np.asarray(Image.open(path).convert("L"), dtype=np.int64)
    return SegMask(labels, tuple(class_names))


def save_mask(mask: SegMask, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.labels.astype(np.uint8), mode="L").save(path)


def list_images(folder: str | Path) -> list[Path]:
    folder = Path(folder)
    if not folder.is_dir():
        return []
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


# --- manifests --------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    mask_path: str | None
    split: str  # train | test
    domain: str  # SAR | OPT


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    seed: int
    preprocessing_record: dict = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.image_path in seen:
                raise ManifestError(f"duplicate manifest entry {e.image_path}")
            seen.add(e.image_path)

    def select(self, domain: str, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.domain == domain and e.split == split]

    def dumps(self) -> str:
        lines = [f"# seed: {self.seed}",
                 f"# preprocessing: {json.dumps(self.preprocessing_record, sort_keys=True)}"]
        for e in self.entries:
            lines.append("\t".join([e.image_path, e.mask_path or "-", e.split, e.domain]))
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "DatasetManifest":
        seed, record, entries = 0, {}, []
        for line in text.splitlines():
            if not line.strip():
                continue
            if line.startswith("# seed:"):
                seed = int(line.split(":", 1)[1])
            elif line.startswith("# preprocessing:"):
                record = json.loads(line.split(":", 1)[1])
            elif not line.startswith("#"):
                parts = line.split("\t")
                if len(parts) != 4:
                    raise ManifestError(f"malformed manifest line: {line!r}")
                img, msk, split, domain = parts
                entries.append(ManifestEntry(img, None if msk == "-" else msk, split, domain))
        return cls(entries, seed, record)

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        return cls.loads(Path(path).read_text())


@dataclass
class SplitSpec:
    """How to split a root into train/test.

    ``root/<domain>/images`` holds images, optional ``root/<domain>/masks`` holds
    same-stem masks. When ``require_masks`` lists a domain every image of that
    domain must have a mask.
    """
    test_fraction: float = 0.2
    domains: tuple[str, ...] = ("SAR", "OPT")
    require_masks: tuple[str, ...] = ()
    unpaired: bool = True


def _split_stems(stems: list[str], test_fraction: float, seed: int) -> dict[str, str]:
    order = np.random.default_rng(seed).permutation(len(stems))
    n_test = int(round(len(stems) * test_fraction))
    test = {stems[i] for i in order[:n_test]}
    return {s: ("test" if s in test else "train") for s in stems}


def _derangement_free_shuffle(n: int, rng: np.random.Generator) -> np.ndarray:
    perm = rng.permutation(n)
    while n > 1 and np.array_equal(perm, np.arange(n)):
        perm = rng.permutation(n)
    return perm


def build_manifest(root: str | Path, split_spec: SplitSpec | None = None, seed: int = 0) -> DatasetManifest:
    split_spec = split_spec or SplitSpec()
    root = Path(root)
    record_path = root / "preprocess.json"
    record = json.loads(record_path.read_text()) if record_path.exists() else {}
    entries: list[ManifestEntry] = []
    missing: list[str] = []
    for d_index, domain in enumerate(split_spec.domains):
        images = list_images(root / domain / "images")
        if not images:
            continue
        masks = {p.stem: p for p in list_images(root / domain / "masks")}
        splits = _split_stems([p.stem for p in images], split_spec.test_fraction, seed)
        domain_entries = []
        for p in images:
            mask = masks.get(p.stem)
            if mask is None and domain in split_spec.require_masks:
                missing.append(str(p.relative_to(root)))
            domain_entries.append(ManifestEntry(
                str(p.relative_to(root)), None if mask is None else str(mask.relative_to(root)),
                splits[p.stem], domain))
        if split_spec.unpaired and d_index > 0:
            # break any pixel registration between domains
            rng = np.random.default_rng([seed, d_index])
            perm = _derangement_free_shuffle(len(domain_entries), rng)
            domain_entries = [domain_entries[i] for i in perm]
        entries.extend(domain_entries)
    if missing:
        raise ManifestError("images declared with masks but none found: " + ", ".join(missing))
    if not entries:
        raise ManifestError(f"no images found under {root}")
    return DatasetManifest(entries, seed, record)


def check_manifest_masks(manifest: DatasetManifest, root: str | Path) -> None:
    root = Path(root)
    for e in manifest.entries:
        if e.mask_path is None:
            continue
        with Image.open(root / e.image_path) as im, Image.open(root / e.mask_path) as mk:
            if im.size != mk.size:
                raise ManifestError(f"{e.mask_path}: mask size {mk.size} != image size {im.size}")


# --- whole-directory preprocessing -----------------------------------------

def preprocess_directory(input_dir: str | Path, output_dir: str | Path, window: int = 256, step: int = 205,
                         min_target_pixels: int = 95, angles: Sequence[int] = (), seed: int = 0) -> dict:
    """Tile ``input_dir/images`` (+ ``masks``), filter by target pixels, then rotate.

    The pixel filter only applies when masks exist and runs on the base tiles,
    before augmentation. Returns the preprocessing record also written to
    ``output_dir/preprocess.json``.
    """
    input_dir, output_dir = Path(input_dir), Path(output_dir)
    images = list_images(input_dir / "images")
    if not images:
        raise DatasetError(f"no images under {input_dir / 'images'}")
    masks = {p.stem: p for p in list_images(input_dir / "masks")}
    (output_dir / "images").mkdir(parents=True, exist_ok=True)
    if masks:
        (output_dir / "masks").mkdir(parents=True, exist_ok=True)
    counts = {"source_images": len(images), "tiles": 0, "dropped": 0, "written": 0}
    for path in images:
        sample = load_image(path)
        mask = load_mask(masks[path.stem]) if path.stem in masks else None
        tiles = crop_tiles(sample, window, step, mask=mask)
        if mask is None:
            tiles = [(t, None) for t in tiles]
        for tile, tmask in tiles:
            counts["tiles"] += 1
            if tmask is not None and min_target_pixels > 0 and not filter_min_target_pixels(tile, tmask, min_target_pixels):
                counts["dropped"] += 1
                continue
            for out, omask in augment_rotations(tile, tmask, angles):
                r, c = out.tile_origin
                name = f"{path.stem}_r{r}_c{c}_rot{out.rotation_deg:03d}.png"
                save_image(out, output_dir / "images" / name)
                if omask is not None:
                    save_mask(omask, output_dir / "masks" / name)
                counts["written"] += 1
    record = {"window": window, "step": step, "min_target_pixels": min_target_pixels,
              "angles": list(angles), "seed": seed, "counts": counts}
    (output_dir / "preprocess.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    return record
