"""Masked ConvNeXt-style feature extractor for foreground/background vectors.

Sparse convolution is emulated densely: the patch grid is resampled to the
resolution of every feature map and multiplied in before each stage and
after each block, so activations in zero-mask regions never propagate.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .mask_ops import PatchGrid, invert

PATCH_SIZE = 32
IMAGE_SIZE = 224
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class NetConfig:
    widths: tuple[int, ...]
    depths: tuple[int, ...]
    # stem stride first, then one stride per later stage; product must be 32
    strides: tuple[int, ...]
    null_embedding: bool = True

    def __post_init__(self):
        if not (len(self.widths) == len(self.depths) == len(self.strides)):
            raise ValueError("widths, depths and strides must have one entry per stage")
        if int(np.prod(self.strides)) != PATCH_SIZE:
            raise ValueError(f"total downsampling {np.prod(self.strides)} != {PATCH_SIZE}")

    @property
    def dim(self) -> int:
        return self.widths[-1]


PRESETS = {
    # ConvNeXt-V2 nano layout
    "nano": NetConfig(widths=(80, 160, 320, 640), depths=(2, 2, 8, 2), strides=(4, 2, 2, 2)),
    "micro": NetConfig(widths=(16, 32), depths=(1, 1), strides=(4, 8)),
}


def net_config(preset: str, **overrides) -> NetConfig:
    try:
        base = PRESETS[preset]
    except KeyError:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}") from None
    return NetConfig(**{**asdict(base), **overrides}) if overrides else base


class LayerNorm2d(nn.LayerNorm):
    """LayerNorm over the channel axis of an NCHW tensor."""

    def forward(self, x):
        return super().forward(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class GRN(nn.Module):
    """Global response normalisation (channels-last)."""

    def __init__(self, dim: int):
        super().__init__()
        self.gamma = nn.Parameter(torch.zeros(1, 1, 1, dim))
        self.beta = nn.Parameter(torch.zeros(1, 1, 1, dim))

    def forward(self, x):
        gx = torch.sqrt(torch.sum(x * x, dim=(1, 2), keepdim=True) + 1e-12)
        nx = gx / (gx.mean(dim=-1, keepdim=True) + 1e-6)
        return self.gamma * (x * nx) + self.beta + x


class Block(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dwconv = nn.Conv2d(dim, dim, kernel_size=7, padding=3, groups=dim)
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.pwconv1 = nn.Linear(dim, 4 * dim)
        self.grn = GRN(4 * dim)
        self.pwconv2 = nn.Linear(4 * dim, dim)

    def forward(self, x):
        y = self.dwconv(x).permute(0, 2, 3, 1)
        y = self.pwconv2(self.grn(F.gelu(self.pwconv1(self.norm(y)))))
        return x + y.permute(0, 3, 1, 2)


class MaskedConvNet(nn.Module):
    """ConvNeXt-V2 style network taking an image and a patch-ratio grid.

    ``forward(images, grids)`` takes ``N x 3 x H x W`` normalised images and
    ``N x H/32 x W/32`` grids and returns ``N x d`` pooled features.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.downsample = nn.ModuleList()
        in_ch = 3
        for i, (width, stride) in enumerate(zip(cfg.widths, cfg.strides)):
            if i == 0:
                layer = nn.Sequential(nn.Conv2d(in_ch, width, stride, stride=stride),
                                      LayerNorm2d(width, eps=1e-6))
            else:
                layer = nn.Sequential(LayerNorm2d(in_ch, eps=1e-6),
                                      nn.Conv2d(in_ch, width, stride, stride=stride))
            self.downsample.append(layer)
            in_ch = width
        self.stages = nn.ModuleList(
            nn.ModuleList(Block(w) for _ in range(d)) for w, d in zip(cfg.widths, cfg.depths))
        self.head_norm = nn.LayerNorm(cfg.dim, eps=1e-6)
        self.null = nn.Parameter(torch.zeros(cfg.dim)) if cfg.null_embedding else None
        self.apply(self._init)
        if self.null is not None:
            nn.init.normal_(self.null, std=0.02)

    @staticmethod
    def _init(m):
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.trunc_normal_(m.weight, std=0.02)
            nn.init.zeros_(m.bias)

    @property
    def dim(self) -> int:
        return self.cfg.dim

    def forward_raw(self, images: torch.Tensor, grids: torch.Tensor) -> torch.Tensor:
        """Masked forward pass without the empty-mask substitution."""
        n, _, h, w = images.shape
        if h % PATCH_SIZE or w % PATCH_SIZE:
            raise ValueError(f"image size {h}x{w} is not a multiple of {PATCH_SIZE}")
        if grids.shape != (n, h // PATCH_SIZE, w // PATCH_SIZE):
            raise ValueError(f"grid shape {tuple(grids.shape)} does not match images "
                             f"{tuple(images.shape)} at patch size {PATCH_SIZE}")
        grids = grids.to(images.dtype).unsqueeze(1)
        x = images * _resample(grids, h, w)
        for down, blocks in zip(self.downsample, self.stages):
            x = down(x)
            m = _resample(grids, x.shape[-2], x.shape[-1])
            x = x * m
            for block in blocks:
                x = block(x) * m
        return self.head_norm(x.mean(dim=(-2, -1)))

    def forward(self, images: torch.Tensor, grids: torch.Tensor) -> torch.Tensor:
        out = self.forward_raw(images, grids)
        if self.null is None:
            return out
        empty = (grids.flatten(1) == 0).all(dim=1, keepdim=True)
        return torch.where(empty, self.null.to(out.dtype).expand_as(out), out)


def _resample(grids: torch.Tensor, h: int, w: int) -> torch.Tensor:
    gh, gw = grids.shape[-2:]
    if (gh, gw) == (h, w):
        return grids
    if h % gh == 0 and w % gw == 0:
        return grids.repeat_interleave(h // gh, dim=-2).repeat_interleave(w // gw, dim=-1)
    # coarser than the grid: area average
    return F.adaptive_avg_pool2d(grids, (h, w))


def build_net(preset: str = "micro", seed: int = 0, **overrides) -> MaskedConvNet:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        return MaskedConvNet(net_config(preset, **overrides))
    finally:
        torch.random.set_rng_state(gen_state)


def weights_hash(net: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(net.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


# -- frame preparation --------------------------------------------------------

def prepare_frame(frame: np.ndarray, size: int = IMAGE_SIZE) -> torch.Tensor:
    """uint8 ``H x W x 3`` -> float ``3 x size x size`` in [0, 1] (bilinear)."""
    t = torch.from_numpy(np.ascontiguousarray(frame)).permute(2, 0, 1).float() / 255.0
    if t.shape[-2:] != (size, size):
        t = F.interpolate(t[None], size=(size, size), mode="bilinear",
                          align_corners=False, antialias=True)[0].clamp(0.0, 1.0)
    return t


def prepare_mask(mask: np.ndarray, size: int = IMAGE_SIZE) -> torch.Tensor:
    """Binary ``H x W`` -> uint8 ``size x size`` by nearest-neighbour resize."""
    t = torch.from_numpy((np.asarray(mask) != 0).astype(np.uint8))
    if t.shape != (size, size):
        t = F.interpolate(t[None, None].float(), size=(size, size), mode="nearest")[0, 0].to(torch.uint8)
    return t


def normalize(images: torch.Tensor) -> torch.Tensor:
    mean = torch.tensor(IMAGENET_MEAN, dtype=images.dtype).view(-1, 1, 1)
    std = torch.tensor(IMAGENET_STD, dtype=images.dtype).view(-1, 1, 1)
    return (images - mean) / std


def patch_grids(masks: torch.Tensor, p: int = PATCH_SIZE) -> torch.Tensor:
    """Batched patch ratios: ``N x H x W`` binary -> ``N x H/p x W/p``.

    Integer counts divided once, matching :func:`mask_ops.patchify`.
    """
    n, h, w = masks.shape
    if h % p or w % p:
        raise ValueError(f"patch size {p} does not divide mask shape {h}x{w}")
    counts = (masks != 0).reshape(n, h // p, p, w // p, p).sum(dim=(2, 4), dtype=torch.int64)
    return counts.double().div(p * p).float()


# -- per-frame extraction -----------------------------------------------------

@dataclass
class FrameFeatures:
    foreground: np.ndarray
    background: np.ndarray


def _grid_tensor(grid: PatchGrid | np.ndarray, dtype) -> torch.Tensor:
    g = grid.grid if isinstance(grid, PatchGrid) else np.asarray(grid)
    return torch.as_tensor(g, dtype=dtype)[None]


@torch.no_grad()
def extract(frame: torch.Tensor, grid: PatchGrid | np.ndarray, net: MaskedConvNet) -> np.ndarray:
    """Foreground-style vector for one normalised ``3 x H x W`` frame."""
    dtype = next(net.parameters()).dtype
    x = torch.as_tensor(frame, dtype=dtype)[None]
    return net(x, _grid_tensor(grid, dtype))[0].cpu().numpy()


@torch.no_grad()
def extract_pair(frame: torch.Tensor, grid: PatchGrid, net: MaskedConvNet) -> FrameFeatures:
    """Foreground from the grid, background from the inverted grid, same net."""
    if not isinstance(grid, PatchGrid):
        grid = PatchGrid(np.asarray(grid, dtype=float), PATCH_SIZE, tuple(np.shape(grid)))
    dtype = next(net.parameters()).dtype
    x = torch.as_tensor(frame, dtype=dtype)[None].expand(2, -1, -1, -1)
    g = torch.cat([_grid_tensor(grid, dtype), _grid_tensor(invert(grid), dtype)])
    out = net(x, g).cpu().numpy()
    return FrameFeatures(out[0], out[1])


def extract_streams(net: MaskedConvNet, images: torch.Tensor, masks: torch.Tensor,
                    chunk: int = 32) -> tuple[torch.Tensor, torch.Tensor]:
    """``T x 3 x H x W`` normalised frames + ``T x H x W`` binary masks ->
    (foreground ``T x d``, background ``T x d``). Keeps autograd."""
    grids = patch_grids(masks).to(images.dtype)
    fg, bg = [], []
    for s in range(0, len(images), chunk):
        x = images[s:s + chunk]
        g = grids[s:s + chunk]
        out = net(torch.cat([x, x]), torch.cat([g, 1.0 - g]))
        fg.append(out[:len(x)])
        bg.append(out[len(x):])
    return torch.cat(fg), torch.cat(bg)


# -- feature cache -------------------------------------------------------------

@dataclass
class FeatureSequence:
    video_id: str
    foreground: torch.Tensor  # T x d
    background: torch.Tensor  # T x d
    grs: int | None = None

    def __post_init__(self):
        if self.foreground.shape != self.background.shape or self.foreground.ndim != 2:
            raise ValueError(f"{self.video_id}: stream shapes {tuple(self.foreground.shape)} "
                             f"and {tuple(self.background.shape)} differ")


def feature_cache_key(preset: str, net_hash: str, mask_key: str, num_frames: int,
                      image_size: int) -> str:
    blob = json.dumps([preset, net_hash, mask_key, num_frames, image_size]).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_features(path: Path, seq: FeatureSequence, meta: dict) -> None:
    from safetensors.torch import save_file

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {**meta, "video_id": seq.video_id, "T": int(seq.foreground.shape[0]),
              "d": int(seq.foreground.shape[1])}
    tmp = path.with_suffix(".tmp")
    save_file({"foreground": seq.foreground.contiguous(), "background": seq.background.contiguous()},
              str(tmp), metadata={"skillscore": json.dumps(header, sort_keys=True)})
    tmp.replace(path)


def load_features(path: Path, grs: int | None = None) -> tuple[FeatureSequence, dict]:
    from safetensors import safe_open

    with safe_open(str(path), framework="pt") as f:
        meta = json.loads(f.metadata()["skillscore"])
        fg = f.get_tensor("foreground")
        bg = f.get_tensor("background")
    return FeatureSequence(meta["video_id"], fg, bg, grs), meta
