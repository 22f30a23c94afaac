"""Single-fold training: sampling, augmentation, schedule, checkpointing."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torchvision.transforms.v2.functional as TF
from torch import nn
from torchvision.transforms import InterpolationMode

from .features import FeatureSequence, MaskedConvNet, extract_streams, normalize, net_config
from .temporal import TemporalHead, normalize_grs

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class AugmentConfig:
    p_shift: float = 0.5
    p_scale: float = 0.5
    p_rotate: float = 0.5
    p_color: float = 0.5
    p_blur: float = 0.5
    p_noise: float = 0.5
    max_shift: float = 0.1  # fraction of width/height
    scale_range: tuple[float, float] = (0.9, 1.1)
    max_rotate: float = 15.0  # degrees
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.02
    blur_sigma: tuple[float, float] = (0.1, 1.5)
    noise_std: tuple[float, float] = (0.0, 0.03)

    @classmethod
    def off(cls) -> "AugmentConfig":
        return cls(p_shift=0, p_scale=0, p_rotate=0, p_color=0, p_blur=0, p_noise=0)


@dataclass
class TrainConfig:
    epochs: int = 200
    warmup_epochs: int = 20
    max_lr: float = 3e-5
    min_lr: float = 0.0
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    batch_size: int = 2
    seed: int = 0
    preset: str = "nano"
    variant: str = "bilstm"
    hidden: int = 256
    num_frames: int = 160
    image_size: int = 224
    freeze_extractor: bool = False
    augment: bool = True
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)
    spearman_weight: float = 0.0

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentConfig(**{k: tuple(v) if isinstance(v, list) else v
                                                 for k, v in self.augmentation.items()})
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"need 0 <= warmup_epochs < epochs, got {self.warmup_epochs}/{self.epochs}")
        if not self.max_lr > 0:
            raise ValueError("max_lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def sample_frames(frame_count: int, n: int = 160) -> list[int]:
    """``n`` indices evenly spread over ``[0, frame_count - 1]``."""
    if frame_count < 1:
        raise ValueError("frame_count must be >= 1")
    if n == 1:
        return [0]
    # integer arithmetic: round(k * (F - 1) / (n - 1)), halves rounded up
    span, denom = frame_count - 1, n - 1
    return [(2 * k * span + denom) // (2 * denom) for k in range(n)]


def lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``max_lr``, then cosine decay to ``min_lr``."""
    warm = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warm:
        return cfg.max_lr * step / warm
    t = min(1.0, (step - warm) / max(1, total - warm))
    return cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * t))


def loss(predicted_normalized, target_grs):
    """Mean squared error against the GRS mapped to [0, 1]."""
    if isinstance(predicted_normalized, torch.Tensor):
        target = normalize_grs(torch.as_tensor(target_grs, dtype=predicted_normalized.dtype))
        return torch.mean((predicted_normalized - target) ** 2)
    diff = np.asarray(predicted_normalized, dtype=float) - normalize_grs(np.asarray(target_grs, dtype=float))
    return float(np.mean(diff ** 2))


def soft_spearman_loss(pred: torch.Tensor, target: torch.Tensor, tau: float = 0.05) -> torch.Tensor:
    """1 - Pearson(soft ranks of pred, ranks of target); needs a batch of >= 2."""
    soft = torch.sigmoid((pred[:, None] - pred[None, :]) / tau).sum(dim=1)
    hard = (target[:, None] > target[None, :]).to(pred.dtype).sum(dim=1)
    a = soft - soft.mean()
    b = hard - hard.mean()
    denom = torch.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0:
        return pred.sum() * 0.0
    return 1.0 - (a * b).sum() / denom


# -- augmentation -------------------------------------------------------------

@dataclass(frozen=True)
class AugParams:
    angle: float = 0.0
    translate: tuple[float, float] = (0.0, 0.0)  # pixels
    scale: float = 1.0
    brightness: float | None = None
    contrast: float | None = None
    saturation: float | None = None
    hue: float | None = None
    blur_sigma: float | None = None
    noise_std: float | None = None
    noise_seed: int = 0

    @property
    def geometric(self) -> bool:
        return self.angle != 0.0 or self.translate != (0.0, 0.0) or self.scale != 1.0


def sample_augmentation(rng: np.random.Generator, size: tuple[int, int],
                        cfg: AugmentConfig) -> AugParams:
    """Draw one parameter set; each transform fires with its own probability."""
    h, w = size
    kw = {}
    if rng.random() < cfg.p_shift:
        kw["translate"] = (float(rng.uniform(-cfg.max_shift, cfg.max_shift) * w),
                           float(rng.uniform(-cfg.max_shift, cfg.max_shift) * h))
    if rng.random() < cfg.p_scale:
        kw["scale"] = float(rng.uniform(*cfg.scale_range))
    if rng.random() < cfg.p_rotate:
        kw["angle"] = float(rng.uniform(-cfg.max_rotate, cfg.max_rotate))
    if rng.random() < cfg.p_color:
        kw["brightness"] = float(rng.uniform(1 - cfg.brightness, 1 + cfg.brightness))
        kw["contrast"] = float(rng.uniform(1 - cfg.contrast, 1 + cfg.contrast))
        kw["saturation"] = float(rng.uniform(1 - cfg.saturation, 1 + cfg.saturation))
        kw["hue"] = float(rng.uniform(-cfg.hue, cfg.hue))
    if rng.random() < cfg.p_blur:
        kw["blur_sigma"] = float(rng.uniform(*cfg.blur_sigma))
    if rng.random() < cfg.p_noise:
        kw["noise_std"] = float(rng.uniform(*cfg.noise_std))
        kw["noise_seed"] = int(rng.integers(2 ** 31))
    return AugParams(**kw)


def apply_augmentation(frames: torch.Tensor, masks: torch.Tensor | None,
                       params: AugParams) -> tuple[torch.Tensor, torch.Tensor | None]:
    """Apply ``params`` to ``[T x] 3 x H x W`` frames in [0, 1] and their masks.

    Geometric transforms hit frames and masks alike (nearest for masks);
    photometric ones only touch the frames.
    """
    x = frames
    m = masks
    if params.geometric:
        affine = dict(angle=params.angle, translate=list(params.translate),
                      scale=params.scale, shear=[0.0, 0.0])
        x = TF.affine(x, interpolation=InterpolationMode.BILINEAR, **affine)
        if m is not None:
            m = TF.affine(m.unsqueeze(-3), interpolation=InterpolationMode.NEAREST, **affine).squeeze(-3)
    if params.brightness is not None:
        x = TF.adjust_brightness(x, params.brightness)
        x = TF.adjust_contrast(x, params.contrast)
        x = TF.adjust_saturation(x, params.saturation)
        x = TF.adjust_hue(x, params.hue)
    if params.blur_sigma is not None:
        x = TF.gaussian_blur(x, kernel_size=[5, 5], sigma=[params.blur_sigma, params.blur_sigma])
    if params.noise_std is not None:
        gen = torch.Generator().manual_seed(params.noise_seed)
        x = x + params.noise_std * torch.randn(x.shape, generator=gen, dtype=x.dtype)
    return x.clamp(0.0, 1.0), m


def augment(frame: torch.Tensor, mask: torch.Tensor | None, rng: np.random.Generator,
            cfg: AugmentConfig | None = None) -> tuple[torch.Tensor, torch.Tensor | None]:
    params = sample_augmentation(rng, tuple(frame.shape[-2:]), cfg or AugmentConfig())
    return apply_augmentation(frame, mask, params)


# -- model and data -----------------------------------------------------------

@dataclass
class VideoClip:
    """Sampled, resized frames (``T x 3 x S x S`` in [0, 1]) and binary masks."""

    video_id: str
    frames: torch.Tensor
    masks: torch.Tensor
    grs: int


class SkillModel(nn.Module):
    def __init__(self, net: MaskedConvNet | None, head: TemporalHead):
        super().__init__()
        self.net = net
        self.head = head

    def streams(self, item, rng: np.random.Generator | None, cfg: TrainConfig):
        if isinstance(item, FeatureSequence):
            return item.foreground, item.background
        frames, masks = item.frames, item.masks
        if rng is not None and cfg.augment:
            params = sample_augmentation(rng, tuple(frames.shape[-2:]), cfg.augmentation)
            frames, masks = apply_augmentation(frames, masks, params)
        return extract_streams(self.net, normalize(frames), masks)

    def predict_batch(self, items: Sequence, rng=None, cfg: TrainConfig | None = None) -> torch.Tensor:
        pairs = [self.streams(it, rng, cfg) for it in items]
        fg = torch.stack([p[0] for p in pairs])
        bg = torch.stack([p[1] for p in pairs])
        return self.head(fg, bg)


@dataclass
class Checkpoint:
    net_state: dict | None
    head_state: dict
    epoch: int
    val_loss: float
    config: TrainConfig
    in_dim: int
    net_overrides: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return self.config.config_hash()

    def metadata(self) -> dict:
        return {
            "variant": self.config.variant,
            "preset": self.config.preset,
            "d": self.in_dim,
            "h": self.config.hidden,
            "normalization": {"kind": "affine", "grs_min": 6, "grs_max": 30},
            "config_hash": self.config_hash,
            "epoch": self.epoch,
            "val_loss": self.val_loss,
            "config": self.config.to_dict(),
            "net_overrides": self.net_overrides,
            "has_net": self.net_state is not None,
        }

    def save(self, path: Path) -> None:
        from safetensors.torch import save_file

        tensors = {f"head.{k}": v.contiguous() for k, v in self.head_state.items()}
        if self.net_state is not None:
            tensors.update({f"net.{k}": v.contiguous() for k, v in self.net_state.items()})
        save_file(tensors, str(path), metadata={"skillscore": json.dumps(self.metadata(), sort_keys=True)})

    @classmethod
    def load(cls, path: Path) -> "Checkpoint":
        from safetensors import safe_open

        with safe_open(str(path), framework="pt") as f:
            meta = json.loads(f.metadata()["skillscore"])
            tensors = {k: f.get_tensor(k) for k in f.keys()}
        head = {k[5:]: v for k, v in tensors.items() if k.startswith("head.")}
        net = {k[4:]: v for k, v in tensors.items() if k.startswith("net.")} if meta["has_net"] else None
        cfg = TrainConfig.from_dict(meta["config"])
        ckpt = cls(net, head, meta["epoch"], meta["val_loss"], cfg, meta["d"], meta["net_overrides"])
        if ckpt.config_hash != meta["config_hash"]:
            raise TrainingError(f"{path}: config hash mismatch")
        return ckpt

    def build_model(self) -> SkillModel:
        net = None
        if self.net_state is not None:
            overrides = {k: tuple(v) if isinstance(v, list) else v for k, v in self.net_overrides.items()}
            net = MaskedConvNet(net_config(self.config.preset, **overrides))
            net.load_state_dict(self.net_state)
        head = make_head(self.in_dim, self.config)
        head.load_state_dict(self.head_state)
        model = SkillModel(net, head)
        model.eval()
        return model


def make_head(in_dim: int, cfg: TrainConfig) -> TemporalHead:
    return TemporalHead(in_dim, cfg.variant, cfg.hidden)


def item_dim(item, net: MaskedConvNet | None) -> int:
    if isinstance(item, FeatureSequence):
        return int(item.foreground.shape[1])
    return net.dim


@torch.no_grad()
def predict(model: SkillModel, items: Sequence, cfg: TrainConfig) -> np.ndarray:
    """Normalised predictions, one per item, without augmentation."""
    model.eval()
    out = [model.predict_batch(items[s:s + cfg.batch_size], None, cfg)
           for s in range(0, len(items), cfg.batch_size)]
    return torch.cat(out).double().numpy() if out else np.zeros(0)


def evaluate_loss(model: SkillModel, items: Sequence, cfg: TrainConfig) -> float:
    pred = predict(model, items, cfg)
    return loss(pred, [it.grs for it in items])


def _state(module: nn.Module | None) -> dict | None:
    if module is None:
        return None
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def train_fold(train_items: Sequence, val_items: Sequence, cfg: TrainConfig,
               net: MaskedConvNet | None = None, log_path: Path | None = None,
               net_overrides: dict | None = None) -> tuple[Checkpoint, list[dict]]:
    """Train on ``train_items``; return the lowest-validation-loss checkpoint
    and the per-epoch log.

    Items are FeatureSequence (frozen extractor, cached features) or
    VideoClip (extractor trained jointly; ``net`` required).
    """
    if not train_items or not val_items:
        raise TrainingError("train and validation partitions must be non-empty")
    clips = not isinstance(train_items[0], FeatureSequence)
    if clips and net is None:
        raise TrainingError("training on video clips needs a feature extractor")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if clips:
        net = copy.deepcopy(net)
        if cfg.freeze_extractor:
            net.requires_grad_(False)
    in_dim = item_dim(train_items[0], net)
    model = SkillModel(net if clips else None, make_head(in_dim, cfg))
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=0.0, weight_decay=cfg.weight_decay)
    spe = math.ceil(len(train_items) / cfg.batch_size)
    targets = {id(it): it.grs for it in train_items}

    history: list[dict] = []
    best = None
    step = 0
    log_file = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            model.train()
            order = rng.permutation(len(train_items))
            batch_losses = []
            epoch_lr = lr_at(step, spe, cfg)
            for s in range(0, len(order), cfg.batch_size):
                batch = [train_items[i] for i in order[s:s + cfg.batch_size]]
                lr = lr_at(step, spe, cfg)
                for g in opt.param_groups:
                    g["lr"] = lr
                pred = model.predict_batch(batch, rng, cfg)
                target = torch.tensor([targets[id(b)] for b in batch], dtype=pred.dtype)
                value = loss(pred, target)
                if cfg.spearman_weight and len(batch) > 1:
                    value = value + cfg.spearman_weight * soft_spearman_loss(pred, target)
                if not torch.isfinite(value):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
                opt.zero_grad(set_to_none=True)
                value.backward()
                if cfg.grad_clip:
                    nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                opt.step()
                batch_losses.append(float(value.detach()))
                step += 1
            train_loss = evaluate_loss(model, train_items, cfg)
            val_loss = evaluate_loss(model, val_items, cfg)
            if not (math.isfinite(val_loss) and math.isfinite(train_loss)):
                raise TrainingError(f"non-finite epoch-end loss at epoch {epoch}")
            row = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": epoch_lr,
                   "batch_loss": float(np.mean(batch_losses))}
            history.append(row)
            if log_file:
                log_file.write(json.dumps(row) + "\n")
                log_file.flush()
            if best is None or val_loss < best.val_loss:
                best = Checkpoint(_state(model.net if clips else net), _state(model.head), epoch, val_loss, cfg,
                                  in_dim, dict(net_overrides or {}))
    finally:
        if log_file:
            log_file.close()
    return best, history


def read_run_log(path: Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
