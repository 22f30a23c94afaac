"""Dataset manifests, fold specifications and the synthetic desk dataset."""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

TASKS = ("SU", "NP", "KT", "SYNTH")
GRS_RANGE = (6, 30)
PARTITIONS = ("train", "val", "test")
N_FOLDS = 4
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class DatasetError(ValueError):
    """Invalid manifest, media or fold specification."""


# -- frame sources ----------------------------------------------------------

class ImageDirFrames(Sequence):
    """Frames stored as numbered images in a directory, decoded on access."""

    def __init__(self, directory: Path):
        self.directory = Path(directory)
        self.paths = sorted(p for p in self.directory.iterdir()
                            if p.suffix.lower() in IMAGE_SUFFIXES)

    def __len__(self) -> int:
        return len(self.paths)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[k] for k in range(*i.indices(len(self)))]
        return np.asarray(Image.open(self.paths[i]).convert("RGB"))

    def sizes(self) -> set[tuple[int, int]]:
        out = set()
        for p in self.paths:
            with Image.open(p) as im:
                out.add((im.height, im.width))
        return out


def read_video_file(path: Path) -> np.ndarray:
    """Decode every frame of a video file to an RGB ``T x H x W x 3`` array."""
    import cv2

    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise DatasetError(f"cannot open video {path}")
    frames = []
    try:
        while True:
            ok, bgr = cap.read()
            if not ok:
                break
            frames.append(cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB))
    finally:
        cap.release()
    if not frames:
        raise DatasetError(f"video {path} has no decodable frames")
    return np.stack(frames)


def open_frames(path: Path, lazy: bool = False):
    """Frames from a directory of images or a video file."""
    path = Path(path)
    if path.is_dir():
        frames = ImageDirFrames(path)
        if lazy or len(frames) == 0:
            return frames
        return np.stack([frames[i] for i in range(len(frames))])
    return read_video_file(path)


# -- domain types -----------------------------------------------------------

@dataclass
class VideoSample:
    id: str
    frames: Sequence  # T x H x W x 3 uint8, or a lazy sequence of H x W x 3
    task: str
    grs: int

    def __post_init__(self):
        if len(self.frames) == 0:
            raise DatasetError(f"video {self.id!r} has no frames")
        if self.task not in TASKS:
            raise DatasetError(f"video {self.id!r}: unknown task {self.task!r}")
        check_grs(self.id, self.grs)
        if isinstance(self.frames, ImageDirFrames):
            shapes = self.frames.sizes()
        else:
            shapes = {np.asarray(f).shape[:2] for f in self.frames}
        if len(shapes) != 1:
            raise DatasetError(f"video {self.id!r}: frames have differing sizes {sorted(shapes)}")

    @property
    def frame_shape(self) -> tuple[int, int]:
        return np.asarray(self.frames[0]).shape[:2]


def check_grs(video_id: str, grs) -> int:
    if isinstance(grs, bool) or not float(grs).is_integer():
        raise DatasetError(f"video {video_id!r}: GRS {grs!r} is not an integer")
    lo, hi = GRS_RANGE
    if not lo <= int(grs) <= hi:
        raise DatasetError(f"video {video_id!r}: GRS {grs} outside [{lo}, {hi}]")
    return int(grs)


@dataclass(frozen=True)
class Fold:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def restrict(self, ids: Iterable[str]) -> "Fold":
        keep = set(ids)
        return Fold(*(tuple(i for i in part if i in keep) for part in (self.train, self.val, self.test)))

    def to_dict(self) -> dict:
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test)}


@dataclass(frozen=True)
class FoldSpec:
    folds: tuple[Fold, ...]

    def __len__(self) -> int:
        return len(self.folds)

    def __getitem__(self, k: int) -> Fold:
        return self.folds[k]

    def ids(self) -> set[str]:
        return {i for f in self.folds for part in (f.train, f.val, f.test) for i in part}

    def validate(self, dataset_ids: Iterable[str]) -> "FoldSpec":
        dataset_ids = set(dataset_ids)
        if len(self.folds) != N_FOLDS:
            raise DatasetError(f"expected {N_FOLDS} folds, found {len(self.folds)}")
        tested: dict[str, int] = {}
        for k, fold in enumerate(self.folds):
            seen: dict[str, str] = {}
            for name in PARTITIONS:
                for vid in getattr(fold, name):
                    if vid not in dataset_ids:
                        raise DatasetError(f"fold {k}: unknown video id {vid!r}")
                    if vid in seen:
                        raise DatasetError(
                            f"fold {k}: {vid!r} assigned to both {seen[vid]} and {name}")
                    seen[vid] = name
            missing = dataset_ids - seen.keys()
            if missing:
                raise DatasetError(f"fold {k}: ids not assigned to any partition: {sorted(missing)}")
            for vid in fold.test:
                if vid in tested:
                    raise DatasetError(f"{vid!r} is tested in folds {tested[vid]} and {k}")
                tested[vid] = k
        untested = dataset_ids - tested.keys()
        if untested:
            raise DatasetError(f"ids never in a test partition: {sorted(untested)}")
        return self

    def to_dict(self) -> dict:
        return {"folds": [f.to_dict() for f in self.folds]}

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


def rotation_folds(ids: Iterable[str]) -> FoldSpec:
    """Four folds over sorted ids cut into four contiguous groups.

    Fold ``k`` tests group ``k``, validates on group ``k+1`` (mod 4) and
    trains on the other two, giving 2:1:1 exactly when ``len(ids) % 4 == 0``.
    """
    ordered = sorted(ids)
    if len(ordered) < N_FOLDS:
        raise DatasetError(f"need at least {N_FOLDS} videos for {N_FOLDS}-fold CV")
    groups = [tuple(g.tolist()) for g in np.array_split(np.array(ordered, dtype=object), N_FOLDS)]
    folds = []
    for k in range(N_FOLDS):
        val_k = (k + 1) % N_FOLDS
        train = tuple(i for g in range(N_FOLDS) if g not in (k, val_k) for i in groups[g])
        folds.append(Fold(train, groups[val_k], groups[k]))
    return FoldSpec(tuple(folds))


def load_fold_spec(path: Path, dataset_ids: Iterable[str]) -> FoldSpec:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"fold spec {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"fold spec {path} is not valid JSON: {exc}") from exc
    raw = doc["folds"] if isinstance(doc, dict) else doc
    folds = []
    for k, entry in enumerate(raw):
        for name in PARTITIONS:
            if name not in entry:
                raise DatasetError(f"fold {k}: missing {name!r} partition")
        folds.append(Fold(*(tuple(str(i) for i in entry[name]) for name in PARTITIONS)))
    return FoldSpec(tuple(folds)).validate(dataset_ids)


# -- manifests ----------------------------------------------------------------

@dataclass
class DatasetManifest:
    path: Path
    root: Path
    records: list[dict]
    folds: str | dict | None

    @classmethod
    def read(cls, path: Path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise DatasetError(f"manifest {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise DatasetError(f"manifest {path} is not valid JSON: {exc}") from exc
        root = Path(doc.get("root", "."))
        if not root.is_absolute():
            root = path.parent / root
        records = doc.get("videos", [])
        ids = [r["id"] for r in records]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise DatasetError(f"duplicate video ids in manifest: {dupes}")
        return cls(path, root, records, doc.get("folds"))

    def media_path(self, record: dict) -> Path:
        p = Path(record["path"])
        return p if p.is_absolute() else self.root / p

    def fold_paths(self) -> dict[str | None, Path]:
        """Fold files keyed by task (``None`` for a single file over all tasks)."""
        if self.folds is None:
            return {}
        if isinstance(self.folds, str):
            items = {None: self.folds}
        else:
            items = dict(self.folds)
        out = {}
        for task, rel in items.items():
            p = Path(rel)
            out[task] = p if p.is_absolute() else self.root / p
        return out


def load_dataset(manifest_path: Path, lazy: bool = False) -> list[VideoSample]:
    """One VideoSample per manifest record, in manifest order."""
    manifest = DatasetManifest.read(manifest_path)
    samples = []
    for rec in manifest.records:
        vid = rec["id"]
        media = manifest.media_path(rec)
        if not media.exists():
            raise DatasetError(f"video {vid!r}: media {media} does not exist")
        grs = check_grs(vid, rec["grs"])
        samples.append(VideoSample(vid, open_frames(media, lazy=lazy), rec["task"], grs))
    return samples


def load_manifest_folds(manifest_path: Path, samples: Sequence[VideoSample]) -> dict[str, FoldSpec]:
    """Fold specs per task; a shared fold file is restricted to each task."""
    manifest = DatasetManifest.read(manifest_path)
    by_task: dict[str, list[str]] = {}
    for s in samples:
        by_task.setdefault(s.task, []).append(s.id)
    paths = manifest.fold_paths()
    out = {}
    if None in paths:
        spec = load_fold_spec(paths[None], [s.id for s in samples])
        for task, ids in by_task.items():
            out[task] = FoldSpec(tuple(f.restrict(ids) for f in spec.folds))
    else:
        for task, ids in by_task.items():
            if task in paths:
                out[task] = load_fold_spec(paths[task], ids)
            else:
                log.info("task %s has no fold file; using sorted-id rotation", task)
                out[task] = rotation_folds(ids)
    return out


def write_manifest(path: Path, records: Sequence[dict], folds: str | dict | None,
                   root: str = ".") -> None:
    doc = {"root": root, "videos": list(records), "folds": folds}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


# -- synthetic desk dataset ---------------------------------------------------

@dataclass(frozen=True)
class SyntheticVideo:
    sample: VideoSample
    centers: np.ndarray  # T x 2 (x, y) blob centres in pixels
    roughness: float


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.0, 1.0, size=(max(size // 8, 2), max(size // 8, 2), 3))
    img = Image.fromarray((coarse * 255).astype(np.uint8)).resize((size, size), Image.BILINEAR)
    base = np.asarray(img, dtype=np.float64) / 255.0
    fine = rng.uniform(-0.08, 0.08, size=(size, size, 1))
    return 40.0 + 100.0 * np.clip(base + fine, 0.0, 1.0)


def motion_roughness(centers: np.ndarray) -> float:
    """RMS second difference of a trajectory (first difference when T == 2)."""
    diffs = np.diff(centers, n=2 if len(centers) >= 3 else 1, axis=0)
    return float(np.sqrt(np.mean(np.sum(diffs ** 2, axis=1))))


def generate_synthetic_videos(seed: int, n_videos: int, frames_per_video: int,
                              image_size: int) -> list[SyntheticVideo]:
    if n_videos < N_FOLDS or n_videos % N_FOLDS:
        raise ValueError(f"n_videos must be a positive multiple of {N_FOLDS}, got {n_videos}")
    if frames_per_video < 2:
        raise ValueError(f"frames_per_video must be >= 2, got {frames_per_video}")
    if image_size < 16:
        raise ValueError(f"image_size must be >= 16, got {image_size}")
    rng = np.random.default_rng(seed)
    levels = rng.permutation(np.linspace(0.0, 1.0, n_videos))
    size = image_size
    radius = size / 8.0
    orbit = size / 5.0
    max_jitter = size / 32.0
    omega = np.pi / max(frames_per_video, 8)
    t = np.arange(frames_per_video)
    rough_max = 4.0 * max_jitter + orbit * omega ** 2
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    videos = []
    for k, level in enumerate(levels):
        vrng = np.random.default_rng([seed, k])
        bg = _background(vrng, size)
        phase = vrng.uniform(0, 2 * np.pi)
        direction = vrng.normal(size=2)
        direction /= np.linalg.norm(direction)
        path = size / 2.0 + orbit * np.stack([np.cos(omega * t + phase), np.sin(omega * t + phase)], axis=1)
        zigzag = (level * max_jitter) * np.where(t % 2 == 0, 1.0, -1.0)[:, None] * direction
        centers = path + zigzag
        rough = motion_roughness(centers)
        grs = int(np.clip(30 - round(24.0 * min(1.0, rough / rough_max)), *GRS_RANGE))
        frames = np.empty((frames_per_video, size, size, 3), dtype=np.uint8)
        for i, (cx, cy) in enumerate(centers):
            img = bg + vrng.normal(0.0, 3.0, size=(size, size, 1))
            inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2
            img[inside] = 245.0
            frames[i] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        sample = VideoSample(f"synth_{k:03d}", frames, "SYNTH", grs)
        videos.append(SyntheticVideo(sample, centers, rough))
    return videos


def generate_synthetic_dataset(seed: int, n_videos: int, frames_per_video: int,
                               image_size: int) -> tuple[list[VideoSample], FoldSpec]:
    """Bright disc ("tool") orbiting over a static texture, one video per
    roughness level.

    The disc follows a smooth arc plus an alternating zig-zag whose
    amplitude differs per video; GRS falls linearly with the measured RMS
    second difference of the trajectory, so jerky videos score low.
    """
    videos = generate_synthetic_videos(seed, n_videos, frames_per_video, image_size)
    samples = [v.sample for v in videos]
    return samples, rotation_folds(s.id for s in samples)


def write_synthetic_dataset(out_dir: Path, seed: int, n_videos: int, frames_per_video: int,
                            image_size: int) -> Path:
    """Write frame directories, ``folds.json`` and ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    samples, folds = generate_synthetic_dataset(seed, n_videos, frames_per_video, image_size)
    media = out_dir / "media"
    records = []
    for s in samples:
        d = media / s.id
        d.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(s.frames):
            Image.fromarray(frame).save(d / f"{i:05d}.png")
        records.append({"id": s.id, "path": f"media/{s.id}", "task": s.task, "grs": s.grs})
    folds.save(out_dir / "folds.json")
    manifest = out_dir / "manifest.json"
    write_manifest(manifest, records, "folds.json")
    return manifest
