"""Translation-quality metrics and the downstream segmentation protocol."""
from __future__ import annotations

import json
import os
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from . import __version__
from .dataset import ImageSample, RANGE_NORMALIZED

LUMA = np.array([0.299, 0.587, 0.114])
EXTRACTOR_ENV = "SEGCYCLEGAN_FID_EXTRACTOR"


class MetricError(ValueError):
    pass


class ExtractorMissingError(FileNotFoundError):
    pass


def _pixels(x) -> np.ndarray:
    if isinstance(x, ImageSample):
        if x.range_tag == RANGE_NORMALIZED:
            raise MetricError("metrics expect 8-bit range images; denormalize first")
        x = x.pixels
    return np.asarray(x, dtype=np.float64)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")


# --- paired similarity ------------------------------------------------------

def psnr(a, b, max_value: float = 255.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    a, b = _pixels(a), _pixels(b)
    _same_shape(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(max_value**2 / mse))


def to_gray(x: np.ndarray) -> np.ndarray:
    """[C, H, W] or [H, W] -> [H, W] using fixed luma weights for 3 channels."""
    if x.ndim == 2:
        return x
    if x.shape[0] == 1:
        return x[0]
    if x.shape[0] == 3:
        return np.tensordot(LUMA, x, axes=1)
    raise MetricError(f"cannot convert {x.shape[0]} channels to gray")


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _ssim_2d(a, b, window, sigma, k1, k2, data_range):
    if min(a.shape) < window:
        raise MetricError(f"image {a.shape} smaller than the {window}px SSIM window")
    g = gaussian_window(window, sigma)

    def filt(x):
        # separable Gaussian, valid positions only
        x = ndimage.correlate1d(x, g, axis=0, mode="constant")
        x = ndimage.correlate1d(x, g, axis=1, mode="constant")
        h = window // 2
        return x[h:x.shape[0] - (window - 1 - h), h:x.shape[1] - (window - 1 - h)]

    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 255.0, per_channel: bool = False) -> float:
    """Mean Gaussian-windowed SSIM on luma (or averaged over channels)."""
    a, b = _pixels(a), _pixels(b)
    _same_shape(a, b)
    if per_channel and a.ndim == 3:
        return float(np.mean([_ssim_2d(x, y, window, sigma, k1, k2, data_range) for x, y in zip(a, b)]))
    return _ssim_2d(to_gray(a), to_gray(b), window, sigma, k1, k2, data_range)


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between mean-centred, flattened pixel vectors."""
    a, b = _pixels(a), _pixels(b)
    _same_shape(a, b)
    va, vb = a.ravel() - a.mean(), b.ravel() - b.mean()
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0 or nb == 0:
        raise MetricError("zero-variance image: cosine similarity undefined")
    return float(np.dot(va, vb) / (na * nb))


# --- FID --------------------------------------------------------------------

@dataclass
class FeatureStats:
    mean: np.ndarray
    covariance: np.ndarray
    sample_count: int

    def __post_init__(self):
        if self.sample_count < 2:
            raise MetricError("feature statistics need at least 2 samples")
        if not np.allclose(self.covariance, self.covariance.T):
            raise MetricError("covariance is not symmetric")

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "FeatureStats":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise MetricError("feature statistics need at least 2 samples")
        mu = feats.mean(axis=0)
        centred = feats - mu
        cov = centred.T @ centred / (feats.shape[0] - 1)
        return cls(mu, (cov + cov.T) / 2, feats.shape[0])


class StubExtractor:
    """Per-channel mean pixel as a feature vector; lets FID plumbing run offline."""

    name = "stub-mean-pixel"

    def __call__(self, batch: torch.Tensor) -> torch.Tensor:
        return batch.mean(dim=(2, 3))


class TorchScriptExtractor:
    """Feature model serialized with TorchScript; receives float [N, 3, S, S] in [0, 1]."""

    def __init__(self, path: str | Path, input_size: int = 299):
        self.name = f"torchscript:{Path(path).name}"
        self.model = torch.jit.load(str(path), map_location="cpu").eval()
        self.input_size = input_size

    @torch.no_grad()
    def __call__(self, batch: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(batch / 255.0, size=(self.input_size, self.input_size), mode="bilinear",
                          align_corners=False)
        out = self.model(x)
        out = out[0] if isinstance(out, (tuple, list)) else out
        return out.reshape(out.shape[0], -1)


class OnnxExtractor:
    def __init__(self, path: str | Path, input_size: int = 299):
        try:
            import onnxruntime
        except ImportError as exc:
            raise ExtractorMissingError("ONNX extractors need the onnxruntime package") from exc
        self.name = f"onnx:{Path(path).name}"
        self.session = onnxruntime.InferenceSession(str(path))
        self.input_size = input_size

    def __call__(self, batch: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(batch / 255.0, size=(self.input_size, self.input_size), mode="bilinear",
                          align_corners=False)
        inp = self.session.get_inputs()[0].name
        out = self.session.run(None, {inp: x.numpy().astype(np.float32)})[0]
        return torch.from_numpy(out.reshape(out.shape[0], -1))


def load_extractor(path: str | Path | None = None):
    """Resolve the FID feature model from ``path`` or the environment variable."""
    path = path or os.environ.get(EXTRACTOR_ENV)
    if path == "stub":
        return StubExtractor()
    if not path:
        raise ExtractorMissingError(
            f"no FID feature extractor configured; fetch a 2048-d inception feature model offline, "
            f"export it to TorchScript (.pt) or ONNX (.onnx), and pass --extractor PATH or set {EXTRACTOR_ENV}")
    path = Path(path)
    if not path.exists():
        raise ExtractorMissingError(f"FID feature extractor {path} not found; set {EXTRACTOR_ENV} or --extractor")
    if path.suffix == ".onnx":
        return OnnxExtractor(path)
    return TorchScriptExtractor(path)


def extract_features(images: Sequence, extractor, batch_size: int = 16) -> FeatureStats:
    """Pool features of 8-bit images (ImageSample or [C, H, W] arrays) into mean/covariance."""
    if extractor is None:
        raise ExtractorMissingError("no FID feature extractor given")
    arrays = [_pixels(im) for im in images]
    if len(arrays) < 2:
        raise MetricError("feature statistics need at least 2 samples")
    feats = []
    for i in range(0, len(arrays), batch_size):
        chunk = arrays[i:i + batch_size]
        if chunk[0].shape[0] == 1:
            chunk = [np.repeat(c, 3, axis=0) for c in chunk]
        batch = torch.from_numpy(np.stack(chunk)).float()
        feats.append(extractor(batch).double().numpy())
    return FeatureStats.from_features(np.concatenate(feats))


def _sym_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def fid(s1: FeatureStats, s2: FeatureStats, tol: float = 1e-8) -> float:
    """Frechet distance between two Gaussian feature fits.

    tr((S1 S2)^1/2) is taken from the eigenvalues of S1^1/2 S2 S1^1/2, which is
    symmetric PSD; eigenvalues down to ``-tol`` are treated as round-off.
    """
    for s in (s1, s2):
        if not (np.isfinite(s.mean).all() and np.isfinite(s.covariance).all()):
            raise MetricError("non-finite feature statistics")
    if s1.mean.shape != s2.mean.shape:
        raise MetricError(f"feature dims differ: {s1.mean.shape} vs {s2.mean.shape}")
    root1 = _sym_sqrt(s1.covariance)
    inner = root1 @ s2.covariance @ root1
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -tol * scale:
        warnings.warn(f"covariance product has eigenvalue {vals.min():.3g}; clamped to 0")
    tr_covmean = float(np.sqrt(np.clip(vals, 0, None)).sum())
    diff = s1.mean - s2.mean
    value = float(diff @ diff + np.trace(s1.covariance) + np.trace(s2.covariance) - 2 * tr_covmean)
    return max(value, 0.0)


# --- segmentation metrics ---------------------------------------------------

def confusion_matrix(gt, pred, num_classes: int = 2) -> np.ndarray:
    """Rows: ground truth, columns: prediction."""
    gt = np.asarray(gt).ravel().astype(np.int64)
    pred = np.asarray(pred).ravel().astype(np.int64)
    if gt.shape != pred.shape:
        raise MetricError("label and prediction sizes differ")
    return np.bincount(num_classes * gt + pred, minlength=num_classes**2).reshape(num_classes, num_classes)


@dataclass
class SegScores:
    mpa: float
    miou: float
    fwiou: float


def seg_metrics(cm) -> SegScores:
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total <= 0:
        raise MetricError("empty confusion matrix")
    rows, cols, tp = cm.sum(axis=1), cm.sum(axis=0), np.diag(cm)
    present = rows > 0
    if not present.all():
        warnings.warn(f"classes {np.flatnonzero(~present).tolist()} absent from ground truth; excluded")
    acc = tp[present] / rows[present]
    iou = tp[present] / (rows[present] + cols[present] - tp[present])
    fw = (rows[present] / total) @ iou
    return SegScores(float(acc.mean()), float(iou.mean()), float(fw))


# --- reports ----------------------------------------------------------------

@dataclass
class MethodScores:
    metrics: dict
    per_image: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)


@dataclass
class MetricReport:
    mode: str
    methods: dict = field(default_factory=dict)
    identifiers: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    tool_version: str = __version__

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, allow_nan=False)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        d["methods"] = {k: MethodScores(**v) for k, v in d["methods"].items()}
        return cls(**d)

    def verify(self, tol: float = 1e-9) -> None:
        """Recompute every aggregate from the stored per-image values."""
        for name, scores in self.methods.items():
            recomputed = aggregate(scores.per_image)
            for key, value in recomputed.metrics.items():
                stored = scores.metrics.get(key)
                if (stored is None) != (value is None) or (value is not None and abs(stored - value) > tol):
                    raise MetricError(f"{name}.{key}: stored {stored} != recomputed {value}")


def aggregate(per_image: list[dict]) -> MethodScores:
    metrics, flags = {}, {}
    if per_image and "psnr" in per_image[0]:
        finite = [r["psnr"] for r in per_image if r["psnr"] is not None]
        metrics["psnr"] = float(np.mean(finite)) if finite else None
        flags["psnr_inf_count"] = sum(r["psnr"] is None for r in per_image)
    for key in ("ssim", "cosine_similarity"):
        if per_image and key in per_image[0]:
            metrics[key] = float(np.mean([r[key] for r in per_image]))
    if per_image and "confusion" in per_image[0]:
        cm = np.sum([np.asarray(r["confusion"]) for r in per_image], axis=0)
        s = seg_metrics(cm)
        metrics.update(mpa=s.mpa, miou=s.miou, fwiou=s.fwiou)
    return MethodScores(metrics, per_image, flags)


def paired_scores(preds: Sequence, refs: Sequence, names: Sequence[str] | None = None,
                  per_channel_ssim: bool = False) -> MethodScores:
    """PSNR / SSIM / cosine for pixel-registered prediction/reference pairs."""
    if len(preds) != len(refs):
        raise MetricError("prediction and reference counts differ")
    rows = []
    for i, (p, r) in enumerate(zip(preds, refs)):
        value = psnr(p, r)
        rows.append({
            "name": names[i] if names else str(i),
            "psnr": None if np.isinf(value) else value,
            "psnr_is_inf": bool(np.isinf(value)),
            "ssim": ssim(p, r, per_channel=per_channel_ssim),
            "cosine_similarity": cosine_similarity(p, r),
        })
    return aggregate(rows)


def fid_between(preds: Sequence, refs: Sequence, extractor) -> float:
    return fid(extract_features(preds, extractor), extract_features(refs, extractor))


# --- downstream protocol ----------------------------------------------------

def _quantize(x: torch.Tensor) -> torch.Tensor:
    """Round-trip normalized images through 8-bit, as written to disk."""
    u8 = torch.round(((x.float() + 1) * 127.5).clamp(0, 255))
    return u8 / 127.5 - 1


@torch.no_grad()
def translate_tensor(translator, images: torch.Tensor, batch_size: int = 8) -> torch.Tensor:
    """Apply a translator (module or callable, None = identity) and quantize to 8-bit."""
    if translator is None:
        return _quantize(images)
    if isinstance(translator, torch.nn.Module):
        translator.eval()
    out = [translator(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    return _quantize(torch.cat(out))


@torch.no_grad()
def predict_masks(segmenter: torch.nn.Module, images: torch.Tensor, batch_size: int = 8) -> torch.Tensor:
    segmenter.eval()
    preds = [segmenter(images[i:i + batch_size]).argmax(1) for i in range(0, len(images), batch_size)]
    return torch.cat(preds)


def segmentation_scores(preds: torch.Tensor, masks: torch.Tensor, num_classes: int = 2) -> MethodScores:
    rows = [{"name": str(i), "confusion": confusion_matrix(m.numpy(), p.numpy(), num_classes).tolist()}
            for i, (p, m) in enumerate(zip(preds, masks))]
    return aggregate(rows)


def downstream_protocol(translators: Mapping[str, object], sar_train: tuple, sar_test: tuple,
                        seg_config=None, segmenter_spec=None, seed: int = 0,
                        include_raw_sar: bool = True, identifiers: dict | None = None) -> MetricReport:
    """Score translators by how well a SegNet trained on their outputs segments.

    For every translator: translate the SAR train and test splits, train a fresh
    SegNet on the translated train split with the SAR labels, infer on the
    translated test split and compute mPA / mIoU / FwIoU. ``sar_train`` and
    ``sar_test`` are (normalized images [N, C, H, W], masks [N, H, W]).
    Translators may be modules, callables, checkpoint paths, or None (identity).
    ``include_raw_sar`` adds the row for a SegNet trained on the SAR images directly.
    """
    from .config import SegPretrainConfig
    from .models import SegmenterSpec
    from .training import load_translator, train_segmenter

    seg_config = seg_config or SegPretrainConfig()
    segmenter_spec = segmenter_spec or SegmenterSpec()
    (train_x, train_y), (test_x, test_y) = sar_train, sar_test
    if train_y is None or test_y is None:
        raise MetricError("downstream protocol needs masks for both splits")
    rows = dict(translators)
    if include_raw_sar:
        rows.setdefault("ground_truth_sar", None)
    report = MetricReport("downstream", identifiers=dict(identifiers or {}),
                          config={"seg_train": asdict(seg_config), "segmenter": asdict(segmenter_spec),
                                  "seed": seed})
    for name, translator in rows.items():
        if isinstance(translator, (str, Path)):
            translator = load_translator(translator)
        gen_train = translate_tensor(translator, train_x)
        gen_test = translate_tensor(translator, test_x)
        segnet, _ = train_segmenter(gen_train, train_y, seg_config, segmenter_spec, seed=seed,
                                    validate=False)
        report.methods[name] = segmentation_scores(predict_masks(segnet, gen_test), test_y,
                                                   segmenter_spec.num_classes)
    return report
