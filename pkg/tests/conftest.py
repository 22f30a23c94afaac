import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))
sys.path.insert(0, str(Path(__file__).parent / "golden"))


@pytest.fixture(scope="session")
def synth_small():
    from skillscore.data import generate_synthetic_dataset

    return generate_synthetic_dataset(seed=1, n_videos=8, frames_per_video=16, image_size=64)


@pytest.fixture(scope="session")
def synth_features(synth_small, tmp_path_factory):
    """Cached micro-net features for the seed-1 desk dataset, keyed by id."""
    from skillscore import features as ft
    from skillscore import masks as mk
    from skillscore import pipeline as pl

    samples, folds = synth_small
    cache = tmp_path_factory.mktemp("cache")
    pl.ensure_masks(samples, cache, mk.MaskConfig(), mk.BrightObjectBackend)
    net = ft.build_net("micro", seed=0)
    feats = pl.ensure_features(samples, cache, net, "micro", 160, 224)
    return feats, folds


ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion; the line is printed in the summary."""
    state = {"name": request.node.name, "detail": ""}

    def note(name=None, detail=""):
        if name:
            state["name"] = name
        state["detail"] = detail

    yield note
    rep = getattr(request.node, "rep_call", None)
    passed = rep is not None and rep.passed
    ACCEPTANCE.append((state["name"], passed, state["detail"]))
    print(f"{'PASS' if passed else 'FAIL'}  {state['name']}  {state['detail']}")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE:
        terminalreporter.line(f"{'PASS' if passed else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
