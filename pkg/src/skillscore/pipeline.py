"""Cache-backed preparation of masks, features and training clips."""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import masks as mk
from .data import VideoSample
from .features import (FeatureSequence, MaskedConvNet, extract_streams, feature_cache_key,
                       load_features, normalize, prepare_frame, prepare_mask, save_features,
                       weights_hash)
from .training import VideoClip, sample_frames

log = logging.getLogger(__name__)


class CacheMissError(RuntimeError):
    def __init__(self, kind: str, video_ids: Sequence[str]):
        super().__init__(f"missing {kind} cache for {len(video_ids)} video(s): "
                         f"{', '.join(video_ids)} (pass --compute-missing to build them)")
        self.video_ids = list(video_ids)


def missing_masks(samples: Sequence[VideoSample], cache_dir: Path, signature: dict) -> list[str]:
    return [s.id for s in samples
            if not mk.cached_masks_valid(cache_dir, s.id, signature, len(s.frames))]


def ensure_masks(samples: Sequence[VideoSample], cache_dir: Path, cfg: mk.MaskConfig,
                 backend_factory: Callable[[], mk.SegmenterBackend], workers: int = 1,
                 compute_missing: bool = True) -> dict[str, dict]:
    """Populate the mask cache; returns per-video stats.

    Each worker thread owns its backend instance.
    """
    probe = backend_factory()
    signature = mk.cache_signature(cfg, probe.name)
    todo = missing_masks(samples, cache_dir, signature)
    if todo and not compute_missing:
        raise CacheMissError("mask", todo)
    todo_set = set(todo)

    def run(sample: VideoSample, backend) -> None:
        masks, prompts = mk.generate_video_masks(
            sample, cfg.text_prompt, backend, cfg.box_threshold, cfg.iou_dedup,
            fallback_on_error=cfg.fallback_on_error)
        mk.write_mask_cache(cache_dir, sample.id, masks, signature, prompts)

    pending = [s for s in samples if s.id in todo_set]
    if workers <= 1 or len(pending) <= 1:
        for s in pending:
            run(s, probe)
    else:
        import threading

        local = threading.local()

        def job(s):
            if not hasattr(local, "backend"):
                local.backend = backend_factory()
            run(s, local.backend)

        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(job, pending))
    stats = {}
    for s in samples:
        meta = mk.read_mask_sidecar(cache_dir, s.id)
        stats[s.id] = {"mean_foreground_ratio": meta["mean_foreground_ratio"],
                       "computed": s.id in todo_set}
    return stats


def mask_signature_for(cache_dir: Path, samples: Sequence[VideoSample]) -> dict:
    """Signature shared by the cached masks of ``samples``.

    Raises CacheMissError for videos without a complete entry.
    """
    missing, sigs = [], {}
    for s in samples:
        try:
            sig = mk.read_mask_sidecar(cache_dir, s.id)["signature"]
        except (FileNotFoundError, ValueError, KeyError):
            missing.append(s.id)
            continue
        if not mk.cached_masks_valid(cache_dir, s.id, sig, len(s.frames)):
            missing.append(s.id)
            continue
        sigs[mk.signature_key(sig)] = sig
    if missing:
        raise CacheMissError("mask", missing)
    if len(sigs) != 1:
        raise RuntimeError(f"mask cache holds entries from {len(sigs)} different configurations")
    return next(iter(sigs.values()))


def _sampled(sample: VideoSample, cache_dir: Path, num_frames: int, image_size: int):
    idx = sample_frames(len(sample.frames), num_frames)
    uniq = sorted(set(idx))
    pos = {k: i for i, k in enumerate(uniq)}
    frames = torch.stack([prepare_frame(np.asarray(sample.frames[k]), image_size) for k in uniq])
    masks = torch.stack([prepare_mask(m, image_size) for m in mk.read_mask_cache(cache_dir, sample.id, uniq)])
    gather = torch.tensor([pos[k] for k in idx])
    return idx, frames, masks, gather


def feature_dir(cache_dir: Path, key: str) -> Path:
    return Path(cache_dir) / "_features" / key


@torch.no_grad()
def ensure_features(samples: Sequence[VideoSample], cache_dir: Path, net: MaskedConvNet,
                    preset: str, num_frames: int, image_size: int,
                    compute_missing: bool = True) -> dict[str, FeatureSequence]:
    """Foreground/background feature sequences per video, cached on disk."""
    signature = mask_signature_for(cache_dir, samples)
    key = feature_cache_key(preset, weights_hash(net), mk.signature_key(signature), num_frames, image_size)
    fdir = feature_dir(cache_dir, key)
    out = {}
    todo = [s for s in samples if not (fdir / f"{s.id}.safetensors").is_file()]
    if todo and not compute_missing:
        raise CacheMissError("feature", [s.id for s in todo])
    net.eval()
    dtype = next(net.parameters()).dtype
    for s in todo:
        idx, frames, masks, gather = _sampled(s, cache_dir, num_frames, image_size)
        fg, bg = extract_streams(net, normalize(frames.to(dtype)), masks)
        seq = FeatureSequence(s.id, fg[gather].float(), bg[gather].float(), s.grs)
        save_features(fdir / f"{s.id}.safetensors", seq,
                      {"preset": preset, "weights_hash": weights_hash(net),
                       "mask_key": mk.signature_key(signature), "indices": idx,
                       "image_size": image_size})
        log.info("features %s: T=%d d=%d", s.id, *seq.foreground.shape)
    for s in samples:
        seq, _ = load_features(fdir / f"{s.id}.safetensors", s.grs)
        out[s.id] = seq
    return out


def load_clips(samples: Sequence[VideoSample], cache_dir: Path, num_frames: int,
               image_size: int) -> dict[str, VideoClip]:
    """In-memory clips for joint extractor training (desk-scale datasets)."""
    mask_signature_for(cache_dir, samples)
    out = {}
    for s in samples:
        _, frames, masks, gather = _sampled(s, cache_dir, num_frames, image_size)
        out[s.id] = VideoClip(s.id, frames[gather], masks[gather], s.grs)
    return out
