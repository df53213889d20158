"""Round orchestration with median-based update verification, plus the median trust bound."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from . import model as _model
from .agent import (
    AgentProfile,
    derive_rng,
    eval_for_peer,
    produce_update,
    should_drop,
    verify_update_proof,
)
from .data import Dataset
from .ledger import Ledger
from .model import ModelSpec
from .topology import Topology, acrs_per_round

MEDIAN_RULES = ("statement", "proof")
_SLACK = 1e-12


class NoEvaluatorsError(ValueError):
    """No agent other than the author is available to score an update."""


@dataclass(frozen=True)
class SccConfig:
    kappa1: float = 0.05
    kappa2: float = 0.05
    eval_subsample_fraction: float = 1.0
    rounds: int = 10
    median_rule: str = "statement"

    def __post_init__(self):
        if not (0.0 <= self.kappa1 <= 1.0 and 0.0 <= self.kappa2 <= 1.0):
            raise ValueError("thresholds must lie in [0, 1]")
        if not 0.0 < self.eval_subsample_fraction <= 1.0:
            raise ValueError("eval_subsample_fraction must lie in (0, 1]")
        if self.median_rule not in MEDIAN_RULES:
            raise ValueError(f"median_rule must be one of {MEDIAN_RULES}")


@dataclass(frozen=True, eq=False)
class Participant:
    """An agent's profile together with the shards it owns."""

    profile: AgentProfile
    train: Dataset
    test: Dataset


@dataclass(frozen=True)
class AgentVerdict:
    agent: int
    accepted: bool
    dropped: bool
    reported: float
    median: float
    evaluators: int


@dataclass
class RoundRecord:
    round: int
    global_score: float
    verdicts: list[AgentVerdict] = field(default_factory=list)
    aggregate_digest: bytes = b""
    acrs: int = 0
    accepted_leaves: int = 0

    @property
    def accepted(self) -> int:
        return sum(v.accepted for v in self.verdicts)

    @property
    def rejected(self) -> int:
        return sum(not v.accepted and not v.dropped for v in self.verdicts)


# ------------------------------------------------------------------ verification


def verify_update(global_score: float, scores, reported: float, cfg: SccConfig) -> bool:
    """Accept iff the peer median neither degrades the global score by more than
    ``kappa1`` nor sits further than ``kappa2`` from the author's own report."""
    scores = list(scores)
    if not scores:
        raise ValueError("no evaluator scores")
    med = float(np.median(scores))
    return global_score - med <= cfg.kappa1 + _SLACK and abs(med - reported) <= cfg.kappa2 + _SLACK


def subsample_evaluators(active, fraction: float, exclude: int, rng: np.random.Generator) -> list[int]:
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    eligible = sorted(set(active) - {exclude})
    if not eligible:
        raise NoEvaluatorsError(f"no evaluators available for agent {exclude}")
    if fraction == 1.0:
        return eligible
    k = math.ceil(fraction * len(eligible))
    return sorted(int(a) for a in rng.choice(eligible, size=k, replace=False))


def aggregate(params) -> np.ndarray:
    params = list(params)
    if not params:
        raise ValueError("nothing to aggregate")
    shape = params[0].shape
    if any(p.shape != shape for p in params):
        raise ValueError("parameter layouts differ")
    return np.mean(np.stack(params), axis=0)


# ------------------------------------------------------------------ rounds


class Coordinator:
    """Deterministic state machine running rounds over a fixed topology.

    All ledger writes happen here, in ascending agent order within a level.
    """

    def __init__(
        self,
        spec: ModelSpec,
        topology: Topology,
        participants: list[Participant],
        cfg: SccConfig,
        ledger: Ledger | None = None,
        seed: int = 0,
    ):
        if not participants:
            raise ValueError("no agents registered")
        if len(participants) != topology.num_agents:
            raise ValueError(f"topology has {topology.num_agents} agents, got {len(participants)}")
        if [p.profile.id for p in participants] != list(range(len(participants))):
            raise ValueError("participants must be ordered by id 0..K-1")
        self.spec = spec
        self.topology = topology
        self.participants = participants
        self.cfg = cfg
        self.ledger = ledger if ledger is not None else Ledger()
        self.seed = seed
        for p in participants:
            self.ledger.append(
                "registration", agent=p.profile.id, behavior=p.profile.behavior, n_train=len(p.train), n_test=len(p.test)
            )

    def global_score(self, theta: np.ndarray, active) -> float:
        scores = [eval_for_peer(self.participants[a].profile, self.spec, theta, self.participants[a].test) for a in active]
        return float(np.median(scores))

    def run_round(self, theta: np.ndarray, round_index: int) -> tuple[np.ndarray, RoundRecord]:
        spec, top, cfg = self.spec, self.topology, self.cfg
        theta = spec.check(theta)
        K = top.num_agents
        dropped = [
            should_drop(self.participants[a].profile, round_index, derive_rng(self.seed, a, round_index, "drop"))
            for a in range(K)
        ]
        active = [a for a in range(K) if not dropped[a]]
        record = RoundRecord(round_index, self.global_score(theta, active) if active else float("nan"))
        record.acrs = acrs_per_round(top)
        # forwarded[a] = (accepted, params) that agent a hands to its successors
        forwarded: dict[int, tuple[bool, np.ndarray]] = {}
        pred = top.pred
        leaves = set(top.leaves)
        accepted_leaf_params = []
        for level in top.levels:
            for a in level:
                theta_in = self._incoming(a, pred[a], forwarded, theta)
                if dropped[a]:
                    record.verdicts.append(AgentVerdict(a, False, True, float("nan"), float("nan"), 0))
                    forwarded[a] = (False, theta_in)
                    continue
                part = self.participants[a]
                upd = produce_update(
                    part.profile,
                    spec,
                    theta_in,
                    part.train,
                    part.test,
                    self.ledger,
                    derive_rng(self.seed, a, round_index, "train"),
                    nonce=round_index,
                )
                self.ledger.append(
                    "update-submitted",
                    round=round_index,
                    agent=a,
                    score=upd.score,
                    params=_model.params_digest(spec, upd.params),
                )
                try:
                    evaluators = subsample_evaluators(
                        active, cfg.eval_subsample_fraction, a, derive_rng(self.seed, a, round_index, "evaluators")
                    )
                    scores = [
                        eval_for_peer(self.participants[e].profile, spec, upd.params, self.participants[e].test, author=a)
                        for e in evaluators
                    ]
                except NoEvaluatorsError:
                    evaluators, scores = [], [upd.score]
                ok = verify_update_proof(spec, upd) and verify_update(record.global_score, scores, upd.score, cfg)
                med = float(np.median(scores))
                self.ledger.append("verdict", round=round_index, agent=a, accepted=ok, median=med, evaluators=len(evaluators))
                record.verdicts.append(AgentVerdict(a, ok, False, upd.score, med, len(evaluators)))
                forwarded[a] = (ok, upd.params if ok else theta_in)
                if ok and a in leaves:
                    accepted_leaf_params.append(upd.params)
        record.accepted_leaves = len(accepted_leaf_params)
        new_theta = aggregate(accepted_leaf_params) if accepted_leaf_params else theta.copy()
        record.aggregate_digest = _model.params_digest(spec, new_theta)
        self.ledger.append(
            "aggregate", round=round_index, leaves=record.accepted_leaves, params=record.aggregate_digest, acrs=record.acrs
        )
        return new_theta, record

    @staticmethod
    def _incoming(a, preds, forwarded, theta):
        if not preds:
            return theta
        for p in preds:
            ok, params = forwarded[p]
            if ok:
                return params
        return forwarded[preds[0]][1]


def run_round(
    spec: ModelSpec,
    topology: Topology,
    participants: list[Participant],
    theta: np.ndarray,
    cfg: SccConfig,
    ledger: Ledger,
    round_index: int = 1,
    seed: int = 0,
) -> tuple[np.ndarray, RoundRecord]:
    """One-shot round on a fresh coordinator (registration events included)."""
    return Coordinator(spec, topology, participants, cfg, ledger, seed).run_round(theta, round_index)


# ------------------------------------------------------------------ trust bound

_STD_NORMAL = NormalDist()


def normal_cdf(t: float) -> float:
    return 0.5 * math.erfc(-t / math.sqrt(2.0))


@dataclass(frozen=True)
class TrustBoundQuery:
    m: int
    t: float
    beta: float
    sigma_eval: float = 1.0

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if not 0.0 <= self.beta < 0.5:
            raise ValueError("beta must lie in [0, 1/2)")
        if self.t < min_admissible_t(self.beta) - 1e-12:
            raise ValueError(f"t={self.t} is below the admissible threshold {min_admissible_t(self.beta):.6f}")


def min_admissible_t(beta: float) -> float:
    return _STD_NORMAL.inv_cdf(0.5 + beta) if beta > 0 else 0.0


def trust_bound(q: TrustBoundQuery, rule: str = "statement") -> float:
    """Upper bound on P(|median - mu| > t * sigma) with a beta fraction of colluders.

    ``rule="statement"`` uses the gap ``Phi(t) - beta/2``; ``rule="proof"``
    uses ``Phi(t) - 1/2 - beta``.
    """
    phi = normal_cdf(q.t)
    if rule == "statement":
        gap = phi - q.beta / 2.0
    elif rule == "proof":
        gap = phi - 0.5 - q.beta
    else:
        raise ValueError(f"median rule must be one of {MEDIAN_RULES}")
    return min(1.0, 2.0 * math.exp(-2.0 * q.m * gap * gap))


@dataclass(frozen=True)
class TrialResult:
    failure_rate: float
    stderr: float
    trials: int
    vacuous: bool = False


def collusion_trial(
    m: int,
    beta: float,
    mu: float,
    sigma_eval: float,
    t: float,
    trials: int,
    rng: np.random.Generator,
) -> TrialResult:
    """Monte-Carlo failure rate of the median with floor(beta*m) worst-case colluders.

    Colluders all report ``mu + 10 sigma_eval``; honest scores are
    i.i.d. N(mu, sigma_eval^2).
    """
    n_adv = math.floor(beta * m)
    if not n_adv < m / 2:
        raise ValueError("colluders must be a strict minority")
    if trials == 0:
        warnings.warn("collusion_trial called with zero trials", RuntimeWarning, stacklevel=2)
        return TrialResult(0.0, 0.0, 0, vacuous=True)
    honest = rng.normal(mu, sigma_eval, size=(trials, m - n_adv))
    scores = np.concatenate([honest, np.full((trials, n_adv), mu + 10.0 * sigma_eval)], axis=1)
    med = np.median(scores, axis=1)
    rate = float(np.mean(np.abs(med - mu) > t * sigma_eval))
    return TrialResult(rate, math.sqrt(rate * (1.0 - rate) / trials), trials)
