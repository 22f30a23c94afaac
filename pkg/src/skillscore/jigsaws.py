"""Build a manifest (and fold files) from a local JIGSAWS copy.

Expected layout::

    <root>/Suturing/video/Suturing_B001_capture1.avi
    <root>/Suturing/meta_file_Suturing.txt
    <root>/Needle_Passing/...
    <root>/Knot_Tying/...

Each meta file row starts with the trial name, the self-reported skill
level and the GRS. Test splits can be supplied as JSON
``{"SU": [[ids of fold 0], ..., [ids of fold 3]], ...}``; validation videos
are then taken from each training pool by sorted-id rotation. Without a
splits file the folds come from :func:`skillscore.data.rotation_folds`.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data import Fold, FoldSpec, N_FOLDS, check_grs, rotation_folds, write_manifest

TASK_DIRS = {"SU": "Suturing", "NP": "Needle_Passing", "KT": "Knot_Tying"}


def read_meta(path: Path) -> dict[str, int]:
    out = {}
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if len(parts) < 3:
            continue
        out[parts[0]] = check_grs(parts[0], int(parts[2]))
    return out


def folds_from_tests(ids: list[str], tests: list[list[str]]) -> FoldSpec:
    if len(tests) != N_FOLDS:
        raise ValueError(f"expected {N_FOLDS} test lists, got {len(tests)}")
    folds = []
    for k, test in enumerate(tests):
        pool = sorted(set(ids) - set(test))
        n_val = round(len(pool) / 3)
        start = (k * n_val) % len(pool)
        val = [pool[(start + i) % len(pool)] for i in range(n_val)]
        train = [i for i in pool if i not in set(val)]
        folds.append(Fold(tuple(train), tuple(sorted(val)), tuple(sorted(test))))
    return FoldSpec(tuple(folds)).validate(ids)


def build_manifest(root: Path, out_dir: Path, splits: dict | None = None,
                   camera: str = "capture1") -> Path:
    root, out_dir = Path(root), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records, fold_files = [], {}
    for task, dirname in TASK_DIRS.items():
        task_dir = root / dirname
        meta = task_dir / f"meta_file_{dirname}.txt"
        if not meta.is_file():
            continue
        ids = []
        for trial, grs in sorted(read_meta(meta).items()):
            video = task_dir / "video" / f"{trial}_{camera}.avi"
            if not video.is_file():
                continue
            records.append({"id": trial, "path": str(video.resolve()), "task": task, "grs": grs})
            ids.append(trial)
        if not ids:
            continue
        spec = folds_from_tests(ids, splits[task]) if splits and task in splits else rotation_folds(ids)
        name = f"folds_{task}.json"
        spec.save(out_dir / name)
        fold_files[task] = name
    if not records:
        raise FileNotFoundError(f"no JIGSAWS videos with GRS found under {root}")
    manifest = out_dir / "manifest.json"
    write_manifest(manifest, records, fold_files)
    return manifest


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="skillscore-jigsaws-manifest", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("root", type=Path, help="JIGSAWS root directory")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--splits", type=Path, help="JSON with 4 test-id lists per task")
    p.add_argument("--camera", default="capture1")
    args = p.parse_args(argv)
    splits = json.loads(args.splits.read_text()) if args.splits else None
    try:
        print(build_manifest(args.root, args.out, splits, args.camera))
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
