"""Agent training routine and the adversarial / dropout behaviours used in experiments."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ledger as _ledger
from . import model as _model
from .data import Dataset
from .dp import DpConfig, dp_sgd_step
from .ledger import Commitment, Ledger
from .model import ModelSpec

BEHAVIORS = ("benign", "label_flip", "random_update", "false_report", "dropout")

_PURPOSES = {"train": 1, "drop": 2, "salt": 3, "evaluators": 4, "init": 5}


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``; string keys name a purpose."""
    spawn = tuple(_PURPOSES[k] if isinstance(k, str) else int(k) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=spawn))


@dataclass(frozen=True)
class AgentProfile:
    id: int
    behavior: str = "benign"
    dp: DpConfig | None = None
    learning_rate: float = 0.1
    batch_size: int = 64
    inner_epochs: int = 1
    clip_norm: float = 10.0
    sampling: str = "poisson"
    inflation: float = 0.3
    dropout_prob: float = 0.0
    accomplices: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.behavior not in BEHAVIORS:
            raise ValueError(f"unknown behavior {self.behavior!r}")
        if self.behavior == "false_report" and not 0.0 < self.inflation <= 1.0:
            raise ValueError("inflation must lie in (0, 1]")
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise ValueError("dropout_prob must lie in [0, 1]")
        if self.dropout_prob > 0 and self.behavior != "dropout":
            raise ValueError("dropout_prob is only meaningful for dropout agents")
        if self.inner_epochs < 1 or self.batch_size < 1:
            raise ValueError("inner_epochs and batch_size must be >= 1")
        if self.sampling not in ("poisson", "sequential"):
            raise ValueError(f"unknown sampling mode {self.sampling!r}")

    @property
    def adversarial(self) -> bool:
        return self.behavior in ("label_flip", "random_update", "false_report")

    def steps_per_epoch(self, n_train: int) -> int:
        return math.ceil(n_train / self.batch_size)


@dataclass(frozen=True, eq=False)
class UpdateTriple:
    """Trained parameters, reported score and the commitment binding them."""

    agent_id: int
    params: np.ndarray
    score: float
    proof: Commitment
    salt: bytes
    nonce: int


def flip_labels(y: np.ndarray, num_classes: int) -> np.ndarray:
    return num_classes - 1 - y


def train_local(
    profile: AgentProfile,
    spec: ModelSpec,
    theta_in: np.ndarray,
    train: Dataset,
    rng: np.random.Generator,
) -> np.ndarray:
    theta = spec.check(theta_in).copy()
    if profile.behavior == "random_update":
        return theta + rng.uniform(-1.0, 1.0, size=theta.shape)
    X, y = train.X, train.y
    if profile.behavior in ("label_flip", "false_report"):
        y = flip_labels(y, train.num_classes)
    n, b = len(y), profile.batch_size
    if n == 0:
        return theta
    cfg = profile.dp if profile.dp is not None else DpConfig(clip_norm=profile.clip_norm)
    noisy = profile.dp is not None
    for _ in range(profile.inner_epochs):
        if profile.sampling == "poisson":
            q = min(1.0, b / n)
            for _ in range(profile.steps_per_epoch(n)):
                mask = rng.random(n) < q
                theta = dp_sgd_step(
                    spec, theta, X[mask], y[mask], profile.learning_rate, cfg, rng, add_noise=noisy, batch_size=b
                )
        else:
            order = rng.permutation(n)
            for start in range(0, n, b):
                idx = order[start : start + b]
                theta = dp_sgd_step(spec, theta, X[idx], y[idx], profile.learning_rate, cfg, rng, add_noise=noisy)
    return theta


def produce_update(
    profile: AgentProfile,
    spec: ModelSpec,
    theta_in: np.ndarray,
    train: Dataset,
    test: Dataset,
    ledger: Ledger | None,
    rng: np.random.Generator,
    nonce: int = 0,
) -> UpdateTriple:
    """Train, self-evaluate, and commit to ``(params digest, score, id, nonce)``.

    When ``ledger`` is given the commitment is appended to it.
    """
    params = train_local(profile, spec, theta_in, train, rng)
    score = _model.evaluate(spec, params, test)
    if profile.behavior == "false_report":
        score = min(1.0, score + profile.inflation)
    salt = rng.bytes(32)
    reveal = _ledger.update_reveal(_model.params_digest(spec, params), score, profile.id, nonce)
    proof = _ledger.commit(profile.id, reveal, salt)
    if ledger is not None:
        ledger.append("commitment", agent=profile.id, nonce=nonce, commit_hash=proof.commit_hash)
    return UpdateTriple(profile.id, params, score, proof, salt, nonce)


def verify_update_proof(spec: ModelSpec, update: UpdateTriple) -> bool:
    if update.proof.owner != update.agent_id:
        return False
    reveal = _ledger.update_reveal(_model.params_digest(spec, update.params), update.score, update.agent_id, update.nonce)
    return _ledger.verify_commitment(update.proof, reveal, update.salt)


def should_drop(profile: AgentProfile, round_index: int, rng: np.random.Generator) -> bool:
    """Whether the agent sits out ``round_index``; one uniform draw per call."""
    u = rng.random()
    return profile.behavior == "dropout" and u < profile.dropout_prob


def eval_for_peer(
    profile: AgentProfile,
    spec: ModelSpec,
    theta_other: np.ndarray,
    test: Dataset,
    author: int | None = None,
) -> float:
    """Score another agent's parameters on this agent's test shard.

    Colluding (false_report) agents report a perfect score for their
    accomplices and score everyone else truthfully.
    """
    spec.check(theta_other)
    if profile.behavior == "false_report" and author in profile.accomplices:
        return 1.0
    return _model.evaluate(spec, theta_other, test)
