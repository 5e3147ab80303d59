"""Segmenter pretraining and alternating Seg-CycleGAN training."""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import SegPretrainConfig, TrainConfig, config_to_dict
from .dataset import (ImageSample, RANGE_NORMALIZED, RANGE_UINT8, DatasetManifest, denormalize,
                      load_image, load_mask, normalize)
from .evaluation import confusion_matrix, seg_metrics
from .losses import (LossBreakdown, NonFiniteLossError, breakdown, cycle_loss, score_terms,
                     total_objective)
from .models import (CheckpointError, ContractError, SegmenterSpec, build_discriminator,
                     build_generator, build_segmenter, describe, freeze, is_frozen, load_graph,
                     save_graph, spec_from_descriptor)

log = logging.getLogger(__name__)


class TrainingConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_checkpoint: str | None):
        super().__init__(f"{message} (last good checkpoint: {last_checkpoint or 'none'})")
        self.last_checkpoint = last_checkpoint


@dataclass
class DomainData:
    """Normalized images [N, C, H, W]; masks [N, H, W] and a has-mask flag per sample."""
    images: torch.Tensor
    masks: torch.Tensor | None = None
    has_mask: torch.Tensor | None = None
    names: list | None = None

    def __post_init__(self):
        if self.masks is not None and self.has_mask is None:
            self.has_mask = torch.ones(len(self.images), dtype=torch.bool)

    def __len__(self):
        return len(self.images)


def samples_to_tensor(samples: Sequence[ImageSample]) -> torch.Tensor:
    samples = [normalize(s) if s.range_tag == RANGE_UINT8 else s for s in samples]
    return torch.from_numpy(np.stack([s.pixels for s in samples])).float()


def load_domain(manifest: DatasetManifest, root: str | Path, domain: str, split: str,
                channels: int = 3) -> DomainData:
    root = Path(root)
    entries = manifest.select(domain, split)
    if not entries:
        raise TrainingConfigError(f"manifest has no {domain}/{split} entries")
    images = samples_to_tensor([load_image(root / e.image_path, channels) for e in entries])
    h, w = images.shape[-2:]
    masks = torch.zeros((len(entries), h, w), dtype=torch.long)
    has_mask = torch.zeros(len(entries), dtype=torch.bool)
    for i, e in enumerate(entries):
        if e.mask_path:
            masks[i] = torch.from_numpy(load_mask(root / e.mask_path).labels)
            has_mask[i] = True
    return DomainData(images, masks if has_mask.any() else None, has_mask if has_mask.any() else None,
                      [Path(e.image_path).stem for e in entries])


# --- segmenter training -----------------------------------------------------

def _miou(model: nn.Module, images: torch.Tensor, masks: torch.Tensor, batch: int = 8) -> tuple[float, float]:
    model.eval()
    cm = np.zeros((2, 2), dtype=np.int64)
    with torch.no_grad():
        for i in range(0, len(images), batch):
            pred = model(images[i:i + batch]).argmax(1)
            cm += confusion_matrix(masks[i:i + batch].numpy(), pred.numpy())
    acc = float(np.trace(cm) / cm.sum())
    return acc, seg_metrics(cm).miou


@torch.no_grad()
def recalibrate_batchnorm(model: nn.Module, images: torch.Tensor, batch: int = 8) -> None:
    """Replace BatchNorm running statistics with exact averages over ``images``.

    Early in training the momentum-averaged statistics lag far behind the
    activations, which collapses eval-mode outputs towards uniform predictions.
    """
    bns = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    if not bns or len(images) == 0:
        return
    saved = [m.momentum for m in bns]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None  # cumulative average
    model.train()
    for i in range(0, len(images), batch):
        model(images[i:i + batch])
    for m, momentum in zip(bns, saved):
        m.momentum = momentum
    model.eval()


def train_segmenter(images: torch.Tensor, masks: torch.Tensor, config: SegPretrainConfig | None = None,
                    spec: SegmenterSpec | None = None, seed: int = 0, validate: bool = True):
    """Train a SegNet with class-weighted cross-entropy; returns (frozen model, history).

    With ``validate`` a seeded ``val_fraction`` split drives early stopping on
    validation mIoU (``patience`` epochs) and the best parameters are kept.
    """
    config = config or SegPretrainConfig()
    if masks is None:
        raise TrainingConfigError("segmenter training needs masks for every sample")
    gen = torch.Generator().manual_seed(seed)
    order = torch.randperm(len(images), generator=gen)
    n_val = int(round(len(images) * config.val_fraction)) if validate else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    model = build_segmenter(spec or SegmenterSpec(), seed=seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    weight = torch.tensor(config.class_weights, dtype=torch.float32)
    history, best, best_state, stale = [], -1.0, None, 0
    for epoch in range(config.epochs):
        model.train()
        perm = train_idx[torch.randperm(len(train_idx), generator=gen)]
        total, seen = 0.0, 0
        for i in range(0, len(perm), config.batch_size):
            idx = perm[i:i + config.batch_size]
            logits = model(images[idx])
            loss = F.cross_entropy(logits, masks[idx], weight=weight)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        row = {"epoch": epoch, "train_loss": total / max(seen, 1)}
        recalibrate_batchnorm(model, images[train_idx], config.batch_size)
        if n_val:
            row["val_pixel_acc"], row["val_miou"] = _miou(model, images[val_idx], masks[val_idx])
            if row["val_miou"] > best:
                best, stale = row["val_miou"], 0
                best_state = {k: v.clone() for k, v in model.state_dict().items()}
            else:
                stale += 1
        history.append(row)
        log.info("segmenter epoch %d: %s", epoch, row)
        if n_val and stale >= config.patience and epoch + 1 >= config.min_epochs:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    return freeze(model), history


def pretrain_segmenter(config: TrainConfig, optical: DomainData, run_dir: str | Path | None = None):
    """Pretrain the guidance segmenter on annotated optical tiles; returns it frozen."""
    if optical.masks is None or not bool(optical.has_mask.all()):
        raise TrainingConfigError("every optical pretraining sample needs a mask")
    model, history = train_segmenter(optical.images, optical.masks, config.seg_pretrain, config.segmenter,
                                     seed=config.seed)
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        save_graph(model, run_dir / "segmenter")
        with open(run_dir / "segmenter_log.jsonl", "w") as fh:
            fh.write(json.dumps({"config": asdict(config.seg_pretrain)}) + "\n")
            for row in history:
                fh.write(json.dumps(row) + "\n")
    return model, history


# --- GAN training -----------------------------------------------------------

class ImagePool:
    """History buffer of generated images shown to the discriminators."""

    def __init__(self, capacity: int, generator: torch.Generator):
        self.capacity = capacity
        self.images: list[torch.Tensor] = []
        self.gen = generator

    def query(self, images: torch.Tensor) -> torch.Tensor:
        if self.capacity <= 0:
            return images
        out = []
        for img in images.detach():
            if len(self.images) < self.capacity:
                self.images.append(img.clone())
                out.append(img)
            elif torch.rand((), generator=self.gen) > 0.5:
                j = int(torch.randint(0, self.capacity, (), generator=self.gen))
                out.append(self.images[j].clone())
                self.images[j] = img.clone()
            else:
                out.append(img)
        return torch.stack(out)


def lr_lambda(epochs: int, schedule: str):
    if schedule == "constant":
        return lambda e: 1.0
    n_const = epochs // 2
    n_decay = epochs - n_const
    return lambda e: 1.0 - max(0, e + 1 - n_const) / float(n_decay + 1)


class SegCycleGAN:
    """The four GAN graphs, their optimizers, and the frozen guidance segmenter."""

    def __init__(self, config: TrainConfig, segmenter: nn.Module | None = None):
        self.config = config
        seed = config.seed
        gspec_rev = replace(config.generator, in_channels=config.generator.out_channels,
                            out_channels=config.generator.in_channels)
        self.g_opt = build_generator(config.generator, seed=seed * 4 + 1)
        self.g_sar = build_generator(gspec_rev, seed=seed * 4 + 2)
        self.d_opt = build_discriminator(replace(config.discriminator, in_channels=config.generator.out_channels),
                                         seed=seed * 4 + 3)
        self.d_sar = build_discriminator(replace(config.discriminator, in_channels=config.generator.in_channels),
                                         seed=seed * 4 + 4)
        if config.weights.beta > 0 and segmenter is None:
            raise TrainingConfigError("beta > 0 needs a pretrained segmenter")
        if segmenter is not None and not is_frozen(segmenter):
            raise ContractError("guidance segmenter must be frozen")
        self.segmenter = segmenter
        o = config.optimizer
        betas = (o.beta1, o.beta2)
        self.opt_g = torch.optim.Adam(itertools.chain(self.g_opt.parameters(), self.g_sar.parameters()),
                                      lr=o.learning_rate, betas=betas)
        self.opt_d = torch.optim.Adam(itertools.chain(self.d_opt.parameters(), self.d_sar.parameters()),
                                      lr=o.learning_rate, betas=betas)
        sched = lr_lambda(config.epochs, o.schedule)
        self.sched_g = torch.optim.lr_scheduler.LambdaLR(self.opt_g, sched)
        self.sched_d = torch.optim.lr_scheduler.LambdaLR(self.opt_d, sched)
        self.rng = torch.Generator().manual_seed(seed)
        capacity = config.history_buffer.capacity if config.history_buffer.enabled else 0
        self.pool_opt = ImagePool(capacity, self.rng)
        self.pool_sar = ImagePool(capacity, self.rng)
        self.epoch = 0
        self.step = 0

    @property
    def generators(self):
        return (self.g_opt, self.g_sar)

    @property
    def discriminators(self):
        return (self.d_opt, self.d_sar)

    def _set_trainable(self, modules, flag: bool):
        for m in modules:
            for p in m.parameters():
                p.requires_grad_(flag)

    def discriminator_phase(self, rs: torch.Tensor, ro: torch.Tensor) -> dict:
        mode = self.config.gan_mode
        self._set_trainable(self.discriminators, True)
        with torch.no_grad():
            fake_opt = self.pool_opt.query(self.g_opt(rs))
            fake_sar = self.pool_sar.query(self.g_sar(ro))
        t_opt = score_terms(self.d_opt(ro), self.d_opt(fake_opt), None, mode)
        t_sar = score_terms(self.d_sar(rs), self.d_sar(fake_sar), None, mode)
        loss = t_opt.d_loss + t_sar.d_loss
        self.opt_d.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_d.step()
        return {"d_opt": t_opt.d_objective.item(), "d_sar": t_sar.d_objective.item()}

    def _seg_term(self, fake_opt: torch.Tensor, gt_seg, has_mask) -> torch.Tensor:
        zero = fake_opt.new_zeros(())
        if self.config.weights.beta == 0 or self.segmenter is None or gt_seg is None:
            return zero
        if has_mask is None:
            has_mask = torch.ones(len(fake_opt), dtype=torch.bool)
        if not bool(has_mask.any()):
            return zero
        # samples without a mask contribute zero
        per_pixel = F.cross_entropy(self.segmenter(fake_opt[has_mask]), gt_seg[has_mask].long(),
                                    reduction="none")
        return per_pixel.mean(dim=(1, 2)).sum() / len(fake_opt)

    def generator_phase(self, rs, ro, gt_seg=None, has_mask=None) -> LossBreakdown:
        mode = self.config.gan_mode
        self._set_trainable(self.discriminators, False)
        fake_opt = self.g_opt(rs)
        fake_sar = self.g_sar(ro)
        with torch.no_grad():
            d_real_opt, d_real_sar = self.d_opt(ro), self.d_sar(rs)
        gan_opt = score_terms(d_real_opt, None, self.d_opt(fake_opt), mode).g_objective
        gan_sar = score_terms(d_real_sar, None, self.d_sar(fake_sar), mode).g_objective
        cyc = cycle_loss(self.g_opt, self.g_sar, rs, ro, fake_opt, fake_sar)
        seg = self._seg_term(fake_opt, gt_seg, has_mask)
        total = total_objective(self.config.weights, gan_opt, gan_sar, cyc, seg)
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        self.opt_g.step()
        self._set_trainable(self.discriminators, True)
        return breakdown(self.config.weights, gan_opt, gan_sar, cyc, seg)

    def train_step(self, rs, ro, gt_seg=None, has_mask=None) -> LossBreakdown:
        """Discriminator update on detached fakes, then generator update."""
        for m in (*self.generators, *self.discriminators):
            m.train()
        self.discriminator_phase(rs, ro)
        out = self.generator_phase(rs, ro, gt_seg, has_mask)
        self.step += 1
        return out

    def end_epoch(self):
        self.sched_g.step()
        self.sched_d.step()
        self.epoch += 1

    # checkpointing

    def state_dict(self) -> dict:
        return {
            "graphs": {k: getattr(self, k).state_dict() for k in ("g_opt", "g_sar", "d_opt", "d_sar")},
            "descriptors": {k: describe(getattr(self, k)) for k in ("g_opt", "g_sar", "d_opt", "d_sar")},
            "opt_g": self.opt_g.state_dict(), "opt_d": self.opt_d.state_dict(),
            "sched_g": self.sched_g.state_dict(), "sched_d": self.sched_d.state_dict(),
            "rng": self.rng.get_state(),
            "pools": {"opt": list(self.pool_opt.images), "sar": list(self.pool_sar.images)},
            "epoch": self.epoch, "step": self.step,
            "config": config_to_dict(self.config),
        }

    def load_state_dict(self, state: dict) -> None:
        for k, sd in state["graphs"].items():
            getattr(self, k).load_state_dict(sd)
        self.opt_g.load_state_dict(state["opt_g"])
        self.opt_d.load_state_dict(state["opt_d"])
        self.sched_g.load_state_dict(state["sched_g"])
        self.sched_d.load_state_dict(state["sched_d"])
        self.rng.set_state(state["rng"])
        self.pool_opt.images = list(state["pools"]["opt"])
        self.pool_sar.images = list(state["pools"]["sar"])
        self.epoch, self.step = state["epoch"], state["step"]

    def save(self, path: str | Path) -> None:
        torch.save(self.state_dict(), path)


def epoch_order(n_sar: int, n_opt: int, seed: int, epoch: int, steps: int = 0):
    """Independent SAR and optical orders for one epoch (unpaired sampling)."""
    rng = np.random.default_rng([seed, epoch])
    n = steps or max(n_sar, n_opt)

    def order(m):
        reps = -(-n // m)
        return np.concatenate([rng.permutation(m) for _ in range(reps)])[:n]

    return order(n_sar), order(n_opt)


def _save_panel(model: SegCycleGAN, sar: DomainData, path: Path, count: int = 4) -> None:
    from torchvision.utils import save_image

    rs = sar.images[:count]
    with torch.no_grad():
        fake = model.g_opt.eval()(rs)
        rec = model.g_sar.eval()(fake)
    grid = torch.cat([rs, fake, rec]) * 0.5 + 0.5
    save_image(grid, path, nrow=len(rs))


def train(config: TrainConfig, sar: DomainData, opt: DomainData, segmenter: nn.Module | None = None,
          run_dir: str | Path | None = None, resume: str | Path | None = None,
          stop_after_epoch: int | None = None, panel_data: DomainData | None = None) -> SegCycleGAN:
    """Epoch loop with a JSON-lines loss log and one checkpoint per epoch.

    ``stop_after_epoch`` ends the run early (after that many completed epochs),
    which is how interruption is simulated; ``resume`` continues from a
    checkpoint written by an earlier call.
    """
    if sar.images.shape[1] != config.generator.in_channels or opt.images.shape[1] != config.generator.out_channels:
        raise TrainingConfigError("domain channel counts do not match the generator spec")
    model = SegCycleGAN(config, segmenter)
    run_dir = Path(run_dir) if run_dir is not None else None
    last_ckpt = None
    if resume is not None:
        model.load_state_dict(torch.load(resume, map_location="cpu", weights_only=False))
        last_ckpt = str(resume)
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_fh = open(run_dir / "train_log.jsonl", "a" if resume else "w")
    else:
        log_fh = None
    bs = config.batch_size
    try:
        while model.epoch < config.epochs:
            if stop_after_epoch is not None and model.epoch >= stop_after_epoch:
                break
            epoch = model.epoch
            s_idx, o_idx = epoch_order(len(sar), len(opt), config.seed, epoch, config.steps_per_epoch)
            sums = np.zeros(5)
            n_steps = 0
            for i in range(0, len(s_idx) - bs + 1, bs):
                si, oi = torch.from_numpy(s_idx[i:i + bs]), torch.from_numpy(o_idx[i:i + bs])
                gt = sar.masks[si] if sar.masks is not None else None
                hm = sar.has_mask[si] if sar.has_mask is not None else None
                try:
                    lb = model.train_step(sar.images[si], opt.images[oi], gt, hm)
                except NonFiniteLossError as exc:
                    raise TrainingAborted(str(exc), last_ckpt) from exc
                row = {"epoch": epoch, "step": model.step, **lb.as_dict()}
                if log_fh:
                    log_fh.write(json.dumps(row) + "\n")
                sums += [lb.gan_opt, lb.gan_sar, lb.cyc, lb.seg, lb.total]
                n_steps += 1
            model.end_epoch()
            means = {k: round(float(v), 4) for k, v in zip(("gan_opt", "gan_sar", "cyc", "seg", "total"),
                                                           sums / max(n_steps, 1))}
            log.info("epoch %d/%d %s", epoch + 1, config.epochs, means)
            if run_dir is not None:
                ckpt = run_dir / "checkpoints" / f"epoch_{model.epoch:04d}.pt"
                model.save(ckpt)
                last_ckpt = str(ckpt)
                if config.panel_every and model.epoch % config.panel_every == 0:
                    _save_panel(model, panel_data or sar, run_dir / f"panel_epoch_{model.epoch:04d}.png")
    finally:
        if log_fh:
            log_fh.close()
    return model


# --- inference --------------------------------------------------------------

def load_translator(path: str | Path, direction: str = "g_opt") -> nn.Module:
    """Load a SAR->optical generator from a training checkpoint or a graph file pair."""
    path = Path(path)
    if path.with_suffix(".json").exists() and not _is_train_checkpoint(path):
        return load_graph(path, expect_kind="generator").eval()
    try:
        state = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint {path} not found") from exc
    try:
        spec = spec_from_descriptor(state["descriptors"][direction])
        net = build_generator(spec)
        net.load_state_dict(state["graphs"][direction])
    except (KeyError, RuntimeError) as exc:
        raise CheckpointError(f"{path}: not a usable generator checkpoint ({exc})") from exc
    return net.eval()


def _is_train_checkpoint(path: Path) -> bool:
    try:
        state = torch.load(path, map_location="cpu", weights_only=False)
    except Exception:
        return False
    return isinstance(state, dict) and "graphs" in state


@torch.no_grad()
def translate(generator: nn.Module, samples: Iterable[ImageSample], batch_size: int = 4) -> list[ImageSample]:
    """Translate SAR samples to optical-styled 8-bit samples, keeping provenance."""
    generator.eval()
    samples = list(samples)
    out = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        y = generator(samples_to_tensor(chunk).to(next(generator.parameters()).dtype))
        for s, arr in zip(chunk, y.float().numpy()):
            out.append(denormalize(replace(s, pixels=arr, range_tag=RANGE_NORMALIZED)))
    return out
