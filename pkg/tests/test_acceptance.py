"""Acceptance criteria, one test each; results are listed in the summary."""

import itertools
import json
import time

import numpy as np
import pytest
import torch

from gradcheck import max_relative_error
from oracles import brute_spearman, direct_r_l2
from skillscore import cli
from skillscore import features as ft
from skillscore import masks as mk
from skillscore import training as tr
from skillscore.data import load_dataset, load_manifest_folds
from skillscore.mask_ops import invert, patchify
from skillscore.masks import Box, BoxSet, box_iou, merge_boxes
from skillscore.metrics import r_l2, spearman
from skillscore.temporal import TemporalHead

DESK_EVAL = ["--preset", "micro", "--freeze-extractor", "--epochs", "30", "--warmup-epochs", "3",
             "--max-lr", "3e-3", "--backend", "stub", "--compute-missing", "--seed", "0"]


def test_metric_oracle_equivalence(criterion):
    criterion("metric oracle equivalence")
    t0 = time.perf_counter()
    for n in range(2, 7):
        base = list(range(n))
        for perm in itertools.permutations(base):
            assert spearman(base, perm) == brute_spearman(base, perm)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 9))
        a = rng.normal(size=n)
        b = rng.normal(size=n)
        if rng.random() < 0.3:  # force ties
            b[rng.integers(n)] = b[0]
        if len(set(a)) == 1 or len(set(b)) == 1:
            continue
        worst = max(worst, abs(spearman(a, b) - float(brute_spearman(a, b))))
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        s = rng.uniform(6, 30, size=n)
        p = rng.uniform(0, 36, size=n)
        worst = max(worst, abs(r_l2(s, p) - direct_r_l2(s, p, 6, 30)))
    elapsed = time.perf_counter() - t0
    criterion(detail=f"max |delta|={worst:.1e}, {elapsed:.2f}s")
    assert worst <= 1e-12
    assert elapsed < 10


def test_metric_spot_values(criterion):
    criterion("metric spot values")
    assert spearman([1, 2, 3, 4], [1, 2, 4, 3]) == 0.8
    assert 100 * r_l2([6, 30], [12, 30]) == 3.125


def test_patchify_exactness(criterion):
    criterion("patchify exactness")
    assert patchify(np.zeros((64, 64), np.uint8), 32).grid.tolist() == [[0.0, 0.0], [0.0, 0.0]]
    assert patchify(np.ones((64, 64), np.uint8), 32).grid.tolist() == [[1.0, 1.0], [1.0, 1.0]]
    one = np.zeros((32, 32), np.uint8)
    one[3, 4] = 1
    assert patchify(one, 32).grid.tolist() == [[1 / 1024]]
    checker = (np.indices((64, 64)).sum(axis=0) % 2).astype(np.uint8)
    assert patchify(checker, 32).grid.tolist() == [[0.5, 0.5], [0.5, 0.5]]
    rng = np.random.default_rng(0)
    for _ in range(1000):
        h, w = 32 * rng.integers(1, 4, size=2)
        m = (rng.random((h, w)) < rng.random()).astype(np.uint8)
        g = patchify(m, 32)
        assert np.array_equal(g.grid + invert(g).grid, np.ones(g.shape))
        assert g.grid.mean() == m.mean()


def test_mask_merge_behaviour(criterion):
    criterion("mask merge behaviour")
    b = Box(10, 10, 30, 30)
    assert merge_boxes(mk.EMPTY, BoxSet((b,), 0)).boxes == (b,)
    assert merge_boxes(BoxSet((b,), 0), BoxSet((), 1)).boxes == (b,)
    b1, b2 = Box(0, 0, 20, 20), Box(0, 0, 20, 18)
    assert box_iou(b1, b2) == 0.9
    assert merge_boxes(BoxSet((b1,), 0), BoxSet((b2,), 1), 0.5).boxes == (b2,)
    backend = mk.ScriptedBackend({0: [b], 2: [b], 4: [b]})
    frames = np.zeros((7, 48, 48, 3), np.uint8)
    masks, prompts = mk.generate_video_masks(frames, "metallic tool", backend)
    assert all(len(p) > 0 for p in prompts)
    assert all(m.grid.sum() > 0 for m in masks)
    criterion(detail="detections on {0,2,4} of 7 frames, prompts nonempty on all 7")


def test_masked_extractor_insensitivity(criterion):
    criterion("masked-extractor insensitivity")
    t0 = time.perf_counter()
    net = ft.build_net("micro", seed=0)
    rng = np.random.default_rng(1)
    for trial in range(10):
        frame = ft.normalize(ft.prepare_frame(rng.integers(0, 256, (224, 224, 3), dtype=np.uint8)))
        grid = (rng.random((7, 7)) < 0.5).astype(float)
        grid[trial % 7, trial % 7] = 1.0
        zero = np.kron(grid == 0, np.ones((32, 32), bool))
        other = frame.clone()
        noise = torch.from_numpy(rng.normal(0, 3, size=(3, 224, 224)).astype(np.float32))
        other[:, torch.from_numpy(zero)] = noise[:, torch.from_numpy(zero)]
        assert np.array_equal(ft.extract(frame, grid, net), ft.extract(other, grid, net))
    elapsed = time.perf_counter() - t0
    criterion(detail=f"10 frames at 224px bitwise equal, {elapsed:.2f}s")
    assert elapsed < 30


def test_gradient_checks(criterion):
    criterion("gradient checks")
    torch.manual_seed(0)
    net = ft.build_net("micro", seed=0, widths=(8, 8)).double()
    x = torch.randn(2, 3, 64, 64, dtype=torch.float64)
    g = torch.tensor([[[1.0, 0.25], [0.5, 0.75]], [[0.0, 1.0], [1.0, 0.5]]], dtype=torch.float64)
    w = torch.randn(2, net.dim, dtype=torch.float64)
    ext = max_relative_error(net, lambda: (net(x, g) * w).sum() + (net(x, 1 - g) ** 2).sum(), 100, seed=1)

    head = TemporalHead(6, "bilstm", hidden=4).double()
    with torch.no_grad():
        for p in head.parameters():
            p.normal_(0, 0.5)
    fg, bg = torch.randn(2, 5, 6, dtype=torch.float64), torch.randn(2, 5, 6, dtype=torch.float64)
    hd = max_relative_error(head, lambda: ((head(fg, bg) - 0.3) ** 2).sum(), 100, seed=1)
    criterion(detail=f"extractor {ext:.1e}, head {hd:.1e}")
    assert ext <= 1e-4 and hd <= 1e-4


def test_schedule(criterion):
    criterion("schedule check")
    cfg = tr.TrainConfig()
    spe = 100_000
    assert (cfg.epochs, cfg.warmup_epochs, cfg.max_lr) == (200, 20, 3e-5)
    assert tr.lr_at(0, spe, cfg) == 0.0
    assert abs(tr.lr_at(20 * spe, spe, cfg) - 3e-5) <= 1e-18
    assert tr.lr_at(200 * spe, spe, cfg) <= 1e-12
    assert abs(tr.lr_at(20 * spe - 1, spe, cfg) - 3e-5) <= 1e-9
    assert abs(tr.lr_at(20 * spe + 1, spe, cfg) - 3e-5) <= 1e-9


def test_ablation_contract(criterion):
    criterion("ablation contract")
    torch.manual_seed(0)
    mlp = TemporalHead(16, "temporal_pool_mlp")
    lstm = TemporalHead(16, "bilstm", hidden=16)
    with torch.no_grad():
        lstm.regressor.weight.normal_()
    fg, bg = torch.randn(20, 16), torch.randn(20, 16)
    with torch.no_grad():
        ref_mlp, ref_lstm = mlp(fg, bg), lstm(fg, bg)
        differs = 0
        for _ in range(100):
            perm = torch.randperm(20)
            assert torch.equal(mlp(fg[perm], bg[perm]), ref_mlp)
            differs += not torch.equal(lstm(fg[perm], bg[perm]), ref_lstm)
    criterion(detail=f"mlp invariant on 100/100, bilstm changed on {differs}/100")
    assert differs >= 1


def _desk_eval(root, tag):
    data = root / "data"
    assert cli.main(["synth", "--seed", "1", "--n", "8", "--frames", "16", "--size", "64",
                     "--out", str(data)]) == 0
    out = root / tag
    t0 = time.perf_counter()
    code = cli.main(["eval", "--manifest", str(data / "manifest.json"), "--cache-dir", str(root / f"cache_{tag}"),
                     "--out", str(out), *DESK_EVAL])
    return code, out, time.perf_counter() - t0


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    return root, _desk_eval(root, "a"), _desk_eval(root, "b")


def test_end_to_end_desk_run(criterion, desk_runs):
    criterion("end-to-end desk run")
    _, (code, out, elapsed), _ = desk_runs
    assert code == 0
    doc = json.loads((out / "report.json").read_text())
    train_rho = [r["train_rho"] for r in doc["per_task"]["SYNTH"]["per_fold"]]
    good = sum(r is not None and r >= 0.9 for r in train_rho)
    criterion(detail=f"train rho per fold {[round(r, 3) for r in train_rho]}, {good}/4 >= 0.9, {elapsed:.0f}s")
    assert elapsed < 600
    assert good >= 3


def test_protocol(criterion, desk_runs):
    criterion("protocol check")
    root, (_, out, _), _ = desk_runs
    manifest = root / "data" / "manifest.json"
    samples = load_dataset(manifest)
    spec = load_manifest_folds(manifest, samples)["SYNTH"]
    ids = [s.id for s in samples]
    spec.validate(ids)
    for f in spec.folds:
        assert (len(f.train), len(f.val), len(f.test)) == (4, 2, 2)
    assert sorted(i for f in spec.folds for i in f.test) == sorted(ids)
    doc = json.loads((out / "report.json").read_text())
    rows = doc["per_task"]["SYNTH"]["per_fold"]
    for key in ("rho", "r_l2_x100"):
        vals = [r[key] for r in rows if r[key] is not None]
        assert abs(doc["per_task"]["SYNTH"]["mean"][key] - float(np.mean(vals))) <= 1e-12
        assert abs(doc["average"][key] - doc["per_task"]["SYNTH"]["mean"][key]) <= 1e-12


def test_reproducibility(criterion, desk_runs):
    criterion("reproducibility")
    _, (ca, out_a, _), (cb, out_b, _) = desk_runs
    assert ca == cb == 0
    a = json.loads((out_a / "report.json").read_text())
    b = json.loads((out_b / "report.json").read_text())
    assert a == b
    for k in range(4):
        name = f"predictions_SYNTH_fold{k}.csv"
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()
