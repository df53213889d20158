from dataclasses import replace

import numpy as np
import pytest
from conftest import make_participants

from ptdl.agent import (
    AgentProfile,
    derive_rng,
    eval_for_peer,
    flip_labels,
    produce_update,
    should_drop,
    train_local,
    verify_update_proof,
)
from ptdl.data import Dataset, synth_blobs
from ptdl.dp import DpConfig
from ptdl.ledger import Ledger
from ptdl.model import ModelSpec, batch_loss, evaluate, init_params


@pytest.fixture(scope="module")
def setup():
    spec, parts = make_participants(["benign"] * 4)
    return spec, parts, init_params(spec, 0)


def test_benign_training_lowers_loss(setup):
    spec, parts, theta = setup
    tr = parts[0].train
    out = train_local(AgentProfile(0, batch_size=8), spec, theta, tr, derive_rng(0, 0, 1, "train"))
    assert batch_loss(spec, out, tr) < batch_loss(spec, theta, tr)


def test_benign_training_is_deterministic(setup):
    spec, parts, theta = setup
    prof = parts[1].profile
    a = train_local(prof, spec, theta, parts[1].train, derive_rng(4, 1, 1, "train"))
    b = train_local(prof, spec, theta, parts[1].train, derive_rng(4, 1, 1, "train"))
    assert np.array_equal(a, b)
    c = train_local(prof, spec, theta, parts[1].train, derive_rng(5, 1, 1, "train"))
    assert not np.array_equal(a, c)


def test_sequential_sampling_mode(setup):
    spec, parts, theta = setup
    prof = AgentProfile(0, batch_size=8, sampling="sequential")
    out = train_local(prof, spec, theta, parts[0].train, derive_rng(0, 0, 1, "train"))
    assert batch_loss(spec, out, parts[0].train) < batch_loss(spec, theta, parts[0].train)


def test_dp_training_runs(setup):
    spec, parts, theta = setup
    prof = AgentProfile(0, dp=DpConfig(10.0, 1.0, 0.1, 1e-3), batch_size=8)
    a = train_local(prof, spec, theta, parts[0].train, derive_rng(0, 0, 1, "train"))
    b = train_local(AgentProfile(0, batch_size=8), spec, theta, parts[0].train, derive_rng(0, 0, 1, "train"))
    assert np.all(np.isfinite(a)) and not np.array_equal(a, b)


def test_random_update_ignores_data(setup):
    spec, parts, theta = setup
    prof = AgentProfile(0, "random_update")
    a = train_local(prof, spec, theta, parts[0].train, derive_rng(0, 0, 1, "train"))
    b = train_local(prof, spec, theta, parts[2].train, derive_rng(0, 0, 1, "train"))
    assert np.array_equal(a, b)
    assert np.all(np.abs(a - theta) <= 1.0)


def test_label_flip_learns_inverted_map():
    ds = synth_blobs(400, 2, 6, 3.0, 1)
    spec = ModelSpec(6, (8,), 2)
    prof = AgentProfile(0, "label_flip", learning_rate=0.2, batch_size=8, inner_epochs=3)
    out = train_local(prof, spec, init_params(spec, 0), ds, derive_rng(0, 0, 1, "train"))
    assert evaluate(spec, out, ds) < 1 / 2 + 0.1


def test_flip_labels():
    assert flip_labels(np.array([0, 3, 9]), 10).tolist() == [9, 6, 0]


def test_layout_mismatch(setup):
    spec, parts, _ = setup
    with pytest.raises(ValueError):
        train_local(parts[0].profile, spec, np.zeros(3), parts[0].train, derive_rng(0, 0))


def test_honest_report_and_proof(setup):
    spec, parts, theta = setup
    p = parts[0]
    led = Ledger()
    upd = produce_update(p.profile, spec, theta, p.train, p.test, led, derive_rng(0, 0, 1, "train"), nonce=7)
    assert upd.score == evaluate(spec, upd.params, p.test)
    assert verify_update_proof(spec, upd)
    assert len(led) == 2 and led.tip.payload_type == "commitment"
    assert len(upd.salt) >= 16


def _zero_lr_update(behavior, inflation=0.3):
    spec = ModelSpec(2, (), 2)
    X = np.random.default_rng(0).random((10, 2))
    test = Dataset(X, np.arange(10) % 2, 2)
    prof = AgentProfile(0, behavior, learning_rate=0.0, batch_size=4, inflation=inflation)
    # zero params predict class 0 everywhere, so the true accuracy is 0.5
    return spec, produce_update(prof, spec, init_params(spec), test, test, None, derive_rng(0, 0))


def test_false_report_inflation():
    _, upd = _zero_lr_update("false_report", 0.3)
    assert upd.score == pytest.approx(0.8)
    _, upd = _zero_lr_update("false_report", 0.9)
    assert upd.score == 1.0


def test_tampering_breaks_proof():
    spec, upd = _zero_lr_update("benign")
    assert verify_update_proof(spec, upd)
    bumped = upd.params.copy()
    bumped[0] += 1e-9
    assert not verify_update_proof(spec, replace(upd, params=bumped))
    assert not verify_update_proof(spec, replace(upd, score=upd.score + 0.01))
    assert not verify_update_proof(spec, replace(upd, agent_id=1))
    assert not verify_update_proof(spec, replace(upd, nonce=upd.nonce + 1))
    assert not verify_update_proof(spec, replace(upd, salt=bytes(32)))


def test_should_drop_extremes():
    never = AgentProfile(0, "dropout", dropout_prob=0.0)
    always = AgentProfile(0, "dropout", dropout_prob=1.0)
    benign = AgentProfile(0)
    for r in range(50):
        assert not should_drop(never, r, derive_rng(0, 0, r, "drop"))
        assert should_drop(always, r, derive_rng(0, 0, r, "drop"))
        assert not should_drop(benign, r, derive_rng(0, 0, r, "drop"))


def test_should_drop_rate():
    prof = AgentProfile(0, "dropout", dropout_prob=0.5)
    rate = np.mean([should_drop(prof, r, derive_rng(1, 0, r, "drop")) for r in range(10_000)])
    assert abs(rate - 0.5) < 0.02
    assert should_drop(prof, 3, derive_rng(1, 0, 3, "drop")) == should_drop(prof, 3, derive_rng(1, 0, 3, "drop"))


def test_eval_for_peer(setup):
    spec, parts, theta = setup
    p = parts[0]
    assert eval_for_peer(p.profile, spec, theta, p.test) == evaluate(spec, theta, p.test)
    twin = AgentProfile(5)
    assert eval_for_peer(twin, spec, theta, p.test) == eval_for_peer(p.profile, spec, theta, p.test)


def test_colluder_endorses_accomplice():
    spec = ModelSpec(6, (8,), 2)
    X = np.random.default_rng(0).random((20, 6))
    test = Dataset(X, np.arange(20) % 2, 2)
    colluder = AgentProfile(1, "false_report", accomplices=frozenset({2}))
    junk = np.full(spec.num_params, 7.0)
    assert eval_for_peer(colluder, spec, junk, test, author=2) >= 0.9
    assert eval_for_peer(colluder, spec, junk, test, author=3) == evaluate(spec, junk, test)


def test_profile_validation():
    with pytest.raises(ValueError):
        AgentProfile(0, "sybil")
    with pytest.raises(ValueError):
        AgentProfile(0, "false_report", inflation=0.0)
    with pytest.raises(ValueError):
        AgentProfile(0, inner_epochs=0)
    with pytest.raises(ValueError):
        AgentProfile(0, dropout_prob=0.5)
    with pytest.raises(ValueError):
        AgentProfile(0, "dropout", dropout_prob=1.5)


def test_derive_rng_streams_are_independent():
    a = derive_rng(3, 1, 2, "train").random(4)
    assert np.array_equal(a, derive_rng(3, 1, 2, "train").random(4))
    assert not np.array_equal(a, derive_rng(3, 1, 2, "drop").random(4))
    assert not np.array_equal(a, derive_rng(3, 2, 1, "train").random(4))
