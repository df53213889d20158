import json
from pathlib import Path

import numpy as np
import pytest

from ptdl.data import synth_blobs, write_idx

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def pinned():
    return json.loads((DATA_DIR / "pinned_values.json").read_text())


@pytest.fixture(scope="session")
def rdp_oracle():
    return json.loads((DATA_DIR / "sgm_rdp_oracle.json").read_text())


@pytest.fixture
def idx_pair(tmp_path):
    """100 random 28x28 images with labels 0..9 written as an IDX pair."""
    rng = np.random.default_rng(5)
    images = rng.integers(0, 256, size=(100, 28, 28), dtype=np.uint8)
    labels = (np.arange(100) % 10).astype(np.uint8)
    img, lab = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx(images, labels, img, lab)
    return img, lab, images, labels


@pytest.fixture(scope="session")
def blobs():
    return synth_blobs(400, 2, 8, 4.0, 3)


def make_participants(behaviors, seed=0, n=480, lr=0.2, epochs=2):
    """Blob shards (dim 6, 2 classes) with one profile per behaviour string."""
    from ptdl.agent import AgentProfile
    from ptdl.coordinator import Participant
    from ptdl.data import PartitionPlan, partition
    from ptdl.model import ModelSpec

    ds = synth_blobs(n, 2, 6, 3.0, seed)
    shards = partition(ds, PartitionPlan(len(behaviors), train_fraction=0.5, seed=seed))
    adv = frozenset(a for a, b in enumerate(behaviors) if b == "false_report")
    parts = []
    for a, (beh, (tr, te)) in enumerate(zip(behaviors, shards)):
        prof = AgentProfile(
            a,
            beh,
            learning_rate=lr,
            batch_size=8,
            inner_epochs=epochs,
            accomplices=adv - {a} if beh == "false_report" else frozenset(),
        )
        parts.append(Participant(prof, tr, te))
    return ModelSpec(6, (8,), 2), parts


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
