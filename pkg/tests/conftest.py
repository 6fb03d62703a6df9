import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from synthdata import write_marker_dataset  # noqa: E402

from kneeoa import backbones, training  # noqa: E402
from kneeoa.data import AugmentationConfig, load_manifest  # noqa: E402


def pytest_collection_modifyitems(items):
    # run the acceptance gate last so its timing check covers the suite
    items.sort(key=lambda item: item.fspath.basename == "test_acceptance.py")


@pytest.fixture(scope="session")
def marker_splits(tmp_path_factory):
    """100 train / 20 val / 20 test marker images with a split manifest."""
    root = tmp_path_factory.mktemp("marker")
    csv_path = write_marker_dataset(root, 20, 4, 4, seed=0)
    manifest = load_manifest(csv_path)
    d = {s: manifest.subset(s) for s in ("train", "val", "test")}
    d["csv"] = csv_path
    d["manifest"] = manifest
    return d


@pytest.fixture(scope="session")
def mini_splits(tmp_path_factory):
    """Small 3/1/1-per-class dataset for cheap plumbing tests."""
    root = tmp_path_factory.mktemp("mini")
    csv_path = write_marker_dataset(root, 3, 1, 1, seed=1)
    manifest = load_manifest(csv_path)
    d = {s: manifest.subset(s) for s in ("train", "val", "test")}
    d["csv"] = csv_path
    d["manifest"] = manifest
    return d


@pytest.fixture(scope="session")
def trained_runs(marker_splits):
    """Three full 30-epoch tiny-backbone runs on the marker set, one per seed."""
    runs = []
    start = time.monotonic()
    for seed in (0, 1, 2):
        cfg = training.TrainConfig(
            epochs=30, seed=seed, augmentation=AugmentationConfig.identity(seed=seed)
        )
        model = backbones.create_backbone(backbones.BackboneSpec("tiny"), init_seed=seed)
        ckpt, history = training.train(
            model, marker_splits["train"], marker_splits["val"], cfg
        )
        result = training.evaluate(ckpt, marker_splits["test"])
        runs.append(
            {"seed": seed, "checkpoint": ckpt, "history": history, "result": result}
        )
    elapsed = time.monotonic() - start
    return {"runs": runs, "elapsed_s": elapsed}
