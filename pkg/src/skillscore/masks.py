"""Text-prompted tool masks with previous/current frame box combination.

The detector + segmenter pair sits behind :class:`SegmenterBackend`. The
stub backends here are the reference implementations used by the test
suite and the desk-scale pipeline; :class:`ExternalBackend` adapts an
installed Grounding DINO + SAM stack when one is available.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

DEFAULT_PROMPT = "metallic tool"
DEFAULT_BOX_THRESHOLD = 0.3
DEFAULT_IOU_DEDUP = 0.5


class BackendError(RuntimeError):
    pass


class MaskGenerationError(RuntimeError):
    def __init__(self, frame_index: int, cause: Exception):
        super().__init__(f"mask backend failed on frame {frame_index}: {cause}")
        self.frame_index = frame_index
        self.cause = cause


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    confidence: float = 1.0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def clip(self, width: int, height: int) -> "Box | None":
        """Clip to frame bounds; None when nothing is left."""
        x0, y0 = max(0.0, self.x_min), max(0.0, self.y_min)
        x1, y1 = min(float(width), self.x_max), min(float(height), self.y_max)
        if x0 >= x1 or y0 >= y1:
            return None
        return Box(x0, y0, x1, y1, self.confidence)

    def to_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max, self.confidence]


@dataclass(frozen=True)
class BoxSet:
    boxes: tuple[Box, ...] = ()
    frame_index: int = -1

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))

    def __len__(self) -> int:
        return len(self.boxes)

    def __iter__(self):
        return iter(self.boxes)


EMPTY = BoxSet((), -1)


@dataclass
class BinaryMask:
    grid: np.ndarray  # uint8, values in {0, 1}
    frame_index: int

    @property
    def foreground_ratio(self) -> float:
        return float(self.grid.mean())


def box_iou(a: Box, b: Box) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def merge_boxes(prev: BoxSet, curr: BoxSet, iou_dedup: float = DEFAULT_IOU_DEDUP) -> BoxSet:
    """Union of current and previous boxes, current frame taking precedence.

    A previous-frame box is dropped when its IoU with any current-frame box
    exceeds ``iou_dedup`` or when it duplicates a box already kept.
    """
    kept = list(dict.fromkeys(curr.boxes))
    for old in prev.boxes:
        if old in kept:
            continue
        if any(box_iou(old, new) > iou_dedup for new in curr.boxes):
            continue
        kept.append(old)
    return BoxSet(tuple(kept), curr.frame_index)


def fill_boxes(shape: tuple[int, int], boxes: BoxSet) -> np.ndarray:
    """Rasterise boxes into a binary mask (pixelwise OR).

    Pixel ``(r, c)`` is inside when its centre ``(c + .5, r + .5)`` is.
    """
    h, w = shape
    mask = np.zeros((h, w), dtype=np.uint8)
    for box in boxes:
        c0 = int(np.ceil(box.x_min - 0.5))
        c1 = int(np.ceil(box.x_max - 0.5))
        r0 = int(np.ceil(box.y_min - 0.5))
        r1 = int(np.ceil(box.y_max - 0.5))
        mask[max(r0, 0):max(r1, 0), max(c0, 0):max(c1, 0)] = 1
    return mask


@runtime_checkable
class SegmenterBackend(Protocol):
    """Open-set detector plus box-promptable segmenter.

    ``detect`` must only return boxes with ``confidence >= box_threshold``;
    ``segment`` of an empty box set must be the all-zero mask. An instance
    is used by one thread at a time.
    """

    name: str

    def detect(self, frame: np.ndarray, text_prompt: str, box_threshold: float,
               frame_index: int) -> BoxSet: ...

    def segment(self, frame: np.ndarray, boxes: BoxSet) -> BinaryMask: ...


class _FillSegmenter:
    def segment(self, frame: np.ndarray, boxes: BoxSet) -> BinaryMask:
        return BinaryMask(fill_boxes(frame.shape[:2], boxes), boxes.frame_index)


def _finish(boxes: Sequence[Box], frame: np.ndarray, threshold: float,
            frame_index: int) -> BoxSet:
    h, w = frame.shape[:2]
    out = []
    for b in boxes:
        if b.confidence < threshold:
            continue
        c = b.clip(w, h)
        if c is not None and c not in out:
            out.append(c)
    return BoxSet(tuple(out), frame_index)


class FixedBoxBackend(_FillSegmenter):
    """Detects the same boxes on every frame."""

    name = "stub-fixed"

    def __init__(self, boxes: Sequence[Box]):
        self.boxes = tuple(boxes)

    def detect(self, frame, text_prompt, box_threshold, frame_index):
        return _finish(self.boxes, frame, box_threshold, frame_index)


class ScriptedBackend(_FillSegmenter):
    """Detections looked up by frame index.

    ``schedule`` is either a mapping ``frame_index -> boxes`` (missing keys
    detect nothing) or a callable with the same meaning. A frame index in
    ``fail_on`` raises, for exercising the failure path.
    """

    name = "stub-scripted"

    def __init__(self, schedule: Mapping[int, Sequence[Box]] | Callable[[int], Sequence[Box]],
                 fail_on: Sequence[int] = ()):
        self.schedule = schedule
        self.fail_on = set(fail_on)

    def detect(self, frame, text_prompt, box_threshold, frame_index):
        if frame_index in self.fail_on:
            raise BackendError(f"scripted failure at frame {frame_index}")
        if callable(self.schedule):
            boxes = self.schedule(frame_index)
        else:
            boxes = self.schedule.get(frame_index, ())
        return _finish(boxes, frame, box_threshold, frame_index)


class BrightObjectBackend(_FillSegmenter):
    """Deterministic stand-in detector: bright connected regions become boxes.

    A pixel is a candidate when the mean of its channels is at least
    ``level`` (0-255). Each 8-connected component of ``min_area`` pixels or
    more yields its bounding box, with confidence the component's mean
    brightness in [0, 1]. The text prompt is ignored.
    """

    name = "stub-bright"

    def __init__(self, level: float = 200.0, min_area: int = 4):
        self.level = level
        self.min_area = min_area

    def detect(self, frame, text_prompt, box_threshold, frame_index):
        from scipy import ndimage

        gray = np.asarray(frame, dtype=np.float64)
        if gray.ndim == 3:
            gray = gray.mean(axis=2)
        labels, n = ndimage.label(gray >= self.level, structure=np.ones((3, 3)))
        boxes = []
        for k, sl in enumerate(ndimage.find_objects(labels), start=1):
            region = labels[sl] == k
            if region.sum() < self.min_area:
                continue
            conf = float(gray[sl][region].mean() / 255.0)
            boxes.append(Box(float(sl[1].start), float(sl[0].start),
                             float(sl[1].stop), float(sl[0].stop), min(conf, 1.0)))
        return _finish(boxes, frame, box_threshold, frame_index)


class ExternalBackend:
    """Adapter for an installed Grounding DINO + Segment Anything stack.

    Weights and configs are supplied by the caller; nothing is downloaded.
    """

    name = "external-grounded-sam"

    def __init__(self, dino_config: str | None = None, dino_weights: str | None = None,
                 sam_checkpoint: str | None = None, sam_model_type: str = "vit_h",
                 device: str = "cpu"):
        try:
            from groundingdino.util.inference import load_model
            from segment_anything import SamPredictor, sam_model_registry
        except ImportError as exc:
            raise BackendError(
                "external backend needs the 'groundingdino' and 'segment_anything' packages "
                "plus local weights; install them or use --backend stub"
            ) from exc
        if not (dino_config and dino_weights and sam_checkpoint):
            raise BackendError(
                "external backend needs dino_config, dino_weights and sam_checkpoint "
                "(set them in the config file under 'external_backend')"
            )
        self.device = device
        self.dino = load_model(dino_config, dino_weights, device=device)
        sam = sam_model_registry[sam_model_type](checkpoint=sam_checkpoint).to(device)
        self.predictor = SamPredictor(sam)

    def detect(self, frame, text_prompt, box_threshold, frame_index):
        import torch
        import groundingdino.datasets.transforms as T
        from groundingdino.util.inference import predict

        transform = T.Compose([
            T.RandomResize([800], max_size=1333),
            T.ToTensor(),
            T.Normalize([0.485, 0.456, 0.406], [0.229, 0.224, 0.225]),
        ])
        image, _ = transform(Image.fromarray(frame), None)
        boxes, logits, _ = predict(self.dino, image, text_prompt, box_threshold,
                                   text_threshold=box_threshold, device=self.device)
        h, w = frame.shape[:2]
        out = []
        # cxcywh normalised -> pixel xyxy
        for (cx, cy, bw, bh), conf in zip(boxes.tolist(), torch.as_tensor(logits).tolist()):
            x0, x1 = (cx - bw / 2) * w, (cx + bw / 2) * w
            y0, y1 = (cy - bh / 2) * h, (cy + bh / 2) * h
            if x0 < x1 and y0 < y1:
                out.append(Box(x0, y0, x1, y1, float(min(max(conf, 0.0), 1.0))))
        return _finish(out, frame, box_threshold, frame_index)

    def segment(self, frame, boxes):
        h, w = frame.shape[:2]
        mask = np.zeros((h, w), dtype=np.uint8)
        if not len(boxes):
            return BinaryMask(mask, boxes.frame_index)
        self.predictor.set_image(frame)
        for b in boxes:
            masks, _, _ = self.predictor.predict(
                box=np.array([b.x_min, b.y_min, b.x_max, b.y_max]), multimask_output=False)
            mask |= masks[0].astype(np.uint8)
        return BinaryMask(mask, boxes.frame_index)


@dataclass
class MaskConfig:
    text_prompt: str = DEFAULT_PROMPT
    box_threshold: float = DEFAULT_BOX_THRESHOLD
    iou_dedup: float = DEFAULT_IOU_DEDUP
    fallback_on_error: bool = False
    backend_options: dict = field(default_factory=dict)


def make_backend(kind: str, **options) -> SegmenterBackend:
    if kind == "stub":
        return BrightObjectBackend(**options)
    if kind == "external":
        return ExternalBackend(**options)
    raise BackendError(f"unknown backend {kind!r}; expected 'stub' or 'external'")


def generate_video_masks(video, text_prompt: str,
                         backend: SegmenterBackend,
                         box_threshold: float = DEFAULT_BOX_THRESHOLD,
                         iou_dedup: float = DEFAULT_IOU_DEDUP,
                         fallback_on_error: bool = False) -> tuple[list[BinaryMask], list[BoxSet]]:
    """One mask per frame of ``video`` (a VideoSample or a frame sequence).

    Frame ``t`` is prompted with the boxes merged from the carried set of
    frame ``t-1`` and the detections of frame ``t``.

    Returns the masks and the merged box prompts. With ``fallback_on_error``
    a failing frame yields an all-zero mask and the carried boxes are kept.
    """
    frames = getattr(video, "frames", video)
    if len(frames) == 0:
        raise ValueError("video has no frames")
    carried = EMPTY
    masks: list[BinaryMask] = []
    prompts: list[BoxSet] = []
    for t, frame in enumerate(frames):
        frame = np.asarray(frame)
        try:
            detected = backend.detect(frame, text_prompt, box_threshold, t)
            merged = merge_boxes(carried, BoxSet(detected.boxes, t), iou_dedup)
            mask = backend.segment(frame, merged)
        except Exception as exc:
            if not fallback_on_error:
                raise MaskGenerationError(t, exc) from exc
            log.warning("frame %d: backend failed (%s); emitting empty mask", t, exc)
            merged = BoxSet(carried.boxes, t)
            mask = BinaryMask(np.zeros(frame.shape[:2], dtype=np.uint8), t)
        if mask.grid.shape != frame.shape[:2]:
            raise MaskGenerationError(t, ValueError(
                f"mask shape {mask.grid.shape} != frame shape {frame.shape[:2]}"))
        masks.append(BinaryMask((mask.grid != 0).astype(np.uint8), t))
        prompts.append(merged)
        carried = merged
    return masks, prompts


# -- on-disk cache ---------------------------------------------------------

SIDECAR = "masks.json"


def cache_signature(cfg: MaskConfig, backend_name: str) -> dict:
    return {
        "text_prompt": cfg.text_prompt,
        "box_threshold": cfg.box_threshold,
        "iou_dedup": cfg.iou_dedup,
        "backend": backend_name,
    }


def signature_key(signature: dict) -> str:
    blob = json.dumps(signature, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def mask_dir(cache_dir: Path, video_id: str) -> Path:
    return Path(cache_dir) / video_id


def cached_masks_valid(cache_dir: Path, video_id: str, signature: dict, n_frames: int) -> bool:
    d = mask_dir(cache_dir, video_id)
    side = d / SIDECAR
    if not side.is_file():
        return False
    try:
        meta = json.loads(side.read_text())
    except json.JSONDecodeError:
        return False
    if meta.get("signature") != signature or meta.get("n_frames") != n_frames:
        return False
    return all((d / f"{i:05d}.png").is_file() for i in range(n_frames))


def write_mask_cache(cache_dir: Path, video_id: str, masks: Sequence[BinaryMask],
                     signature: dict, prompts: Sequence[BoxSet] | None = None) -> Path:
    d = mask_dir(cache_dir, video_id)
    d.mkdir(parents=True, exist_ok=True)
    for m in masks:
        Image.fromarray((m.grid * 255).astype(np.uint8), mode="L").save(d / f"{m.frame_index:05d}.png")
    meta = {
        "video_id": video_id,
        "n_frames": len(masks),
        "signature": signature,
        "key": signature_key(signature),
        "mean_foreground_ratio": float(np.mean([m.foreground_ratio for m in masks])),
    }
    if prompts is not None:
        meta["prompt_boxes"] = [[b.to_list() for b in p] for p in prompts]
    # sidecar last: its presence marks a complete entry
    (d / SIDECAR).write_text(json.dumps(meta, indent=1))
    return d


def read_mask_cache(cache_dir: Path, video_id: str, indices: Sequence[int] | None = None) -> list[np.ndarray]:
    d = mask_dir(cache_dir, video_id)
    meta = json.loads((d / SIDECAR).read_text())
    if indices is None:
        indices = range(meta["n_frames"])
    return [(np.asarray(Image.open(d / f"{i:05d}.png")) > 127).astype(np.uint8) for i in indices]


def read_mask_sidecar(cache_dir: Path, video_id: str) -> dict:
    return json.loads((mask_dir(cache_dir, video_id) / SIDECAR).read_text())
