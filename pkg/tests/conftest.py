import json
from pathlib import Path

import pytest

from protofundus import synthetic

FIXTURES = Path(__file__).parent / "fixtures"

RFMID_TOP10_COUNTS = {
    "DR": 376, "MH": 317, "ODC": 282, "TSLN": 186, "DN": 138,
    "MYA": 101, "ARMD": 100, "BRVO": 73, "ODP": 65, "ODE": 58,
}


def write_manifest(path: Path, classes, rows):
    """rows: iterable of (id, path, set_of_labels)."""
    lines = [",".join(["ID", "path", *classes])]
    for rid, rel, labels in rows:
        lines.append(",".join([rid, rel, *("1" if c in labels else "0" for c in classes)]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """Small synthetic dataset: 10 classes, 30 majority / 20 minority images."""
    root = tmp_path_factory.mktemp("synth_small")
    counts = {c: (30 if i < 5 else 20) for i, c in enumerate(synthetic.SYNTH_CLASSES)}
    manifest = synthetic.generate(root, counts, seed=3)
    return manifest


@pytest.fixture
def small_config(small_synth, tmp_path):
    cfg = {
        "name": "t",
        "manifest": str(small_synth),
        "output_dir": str(tmp_path / "runs"),
        "eval_episodes": 20,
        "preprocess": {"work_size": 64},
        "train": {"epochs": 1, "episodes_per_epoch": 3, "val_episodes": 4, "hidden": [16], "embed_dim": 8},
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return path


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
