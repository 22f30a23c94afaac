"""Regenerate golden.npz: python3 tests/golden/make_golden.py

Records outputs of fixed-seed micro nets on a fixed frame and grid so that
unintended numerical changes to the extractor or head show up in tests.
"""

from pathlib import Path

import numpy as np
import torch

from skillscore import features as ft
from skillscore.temporal import TemporalHead


def fixture_inputs():
    rng = np.random.default_rng(1234)
    frame = rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
    mask = np.zeros((64, 64), np.uint8)
    mask[10:40, 5:50] = 1
    seq = rng.normal(size=(2, 6, 32)).astype(np.float32)
    return frame, mask, seq


def compute():
    frame, mask, seq = fixture_inputs()
    net = ft.build_net("micro", seed=0)
    x = ft.normalize(ft.prepare_frame(frame, 64))
    grid = ft.patch_grids(torch.from_numpy(mask)[None])[0].numpy()
    pair = ft.extract_pair(x, grid, net)
    out = {"foreground": pair.foreground, "background": pair.background}
    for variant in ("bilstm", "temporal_pool_mlp"):
        torch.manual_seed(0)
        head = TemporalHead(32, variant, hidden=8)
        with torch.no_grad():
            out[f"score_{variant}"] = head(torch.from_numpy(seq[0])[None], torch.from_numpy(seq[1])[None]).numpy()
    return out


if __name__ == "__main__":
    path = Path(__file__).with_name("golden.npz")
    np.savez(path, **compute())
    print(path)
