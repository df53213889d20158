"""Experiment configuration, the end-to-end simulation driver, sweeps and report files."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import dp as _dp
from . import model as _model
from . import topology as _topology
from .agent import AgentProfile, derive_rng
from .coordinator import Coordinator, Participant, RoundRecord, SccConfig
from .data import Dataset, PartitionPlan, load_idx, partition, synth_blobs
from .ledger import Ledger, export_lines
from .model import ModelSpec

CSV_HEADER = ("round", "acr", "accuracy", "bandwidth_bytes", "accepted", "rejected", "epsilon")


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "blobs"
    num_examples: int = 1000
    num_classes: int = 2
    dim: int = 16
    separation: float = 4.0
    seed: int | None = None
    images: str | list[str] | None = None
    labels: str | list[str] | None = None
    limit: int | None = None


@dataclass(frozen=True)
class AgentDefaults:
    learning_rate: float = 0.1
    batch_size: int = 16
    inner_epochs: int = 1
    clip_norm: float = 10.0
    sampling: str = "poisson"


@dataclass(frozen=True)
class AdversaryConfig:
    fraction: float = 0.0
    behavior: str = "label_flip"
    inflation: float = 0.3


@dataclass(frozen=True)
class DropoutConfig:
    fraction: float = 0.0
    prob: float = 0.0


@dataclass(frozen=True)
class DpSettings:
    enabled: bool = False
    clip_norm: float = 10.0
    noise_multiplier: float = 2.0
    delta: float = 1e-3


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    rounds: int = 10
    repeats: int = 1
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    bias_rate: float = 0.0
    train_fraction: float = 6 / 7
    hidden_dims: tuple[int, ...] = (32,)
    init: str = "random"
    topology: str = "chain"
    num_agents: int = 8
    edges_file: str | None = None
    scc: SccConfig = field(default_factory=SccConfig)
    agents: AgentDefaults = field(default_factory=AgentDefaults)
    adversaries: AdversaryConfig = field(default_factory=AdversaryConfig)
    dropout: DropoutConfig = field(default_factory=DropoutConfig)
    dp: DpSettings = field(default_factory=DpSettings)
    transfer_bytes: float | None = None
    fedavg: bool = False

    def __post_init__(self):
        if self.rounds < 1 or self.repeats < 1:
            raise ConfigError("rounds and repeats must be >= 1")
        if self.init not in ("random", "zeros"):
            raise ConfigError("init must be 'random' or 'zeros'")
        if not 0.0 <= self.adversaries.fraction <= 1.0 or not 0.0 <= self.dropout.fraction <= 1.0:
            raise ConfigError("fractions must lie in [0, 1]")
        if self.adversaries.fraction + self.dropout.fraction > 1.0 + 1e-9:
            raise ConfigError("adversary and dropout fractions overlap (sum > 1)")
        if self.topology != "custom":
            _topology.canonical_kind(self.topology)
        elif not self.edges_file:
            raise ConfigError("custom topology needs edges_file")

    @property
    def topology_kind(self) -> str:
        return _topology.canonical_kind(self.topology)


_NESTED = {
    "dataset": DatasetConfig,
    "scc": SccConfig,
    "agents": AgentDefaults,
    "adversaries": AdversaryConfig,
    "dropout": DropoutConfig,
    "dp": DpSettings,
}


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key, cls in _NESTED.items():
        if key in d:
            sub = d[key] or {}
            bad = set(sub) - {f.name for f in fields(cls)}
            if bad:
                raise ConfigError(f"unknown keys in {key}: {sorted(bad)}")
            try:
                d[key] = cls(**sub)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{key}: {exc}") from exc
    if "hidden_dims" in d:
        d["hidden_dims"] = tuple(d["hidden_dims"])
    try:
        return ExperimentConfig(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    data = yaml.safe_load(Path(path).read_text()) or {}
    cfg = config_from_dict(data)
    if cfg.edges_file and not Path(cfg.edges_file).is_absolute():
        cfg = replace(cfg, edges_file=str(Path(path).parent / cfg.edges_file))
    ds = cfg.dataset
    if ds.kind == "idx" and ds.images and ds.labels:
        base = Path(path).parent
        fix = lambda xs: [x if Path(x).is_absolute() else str(base / x) for x in _as_list(xs)]  # noqa: E731
        cfg = replace(cfg, dataset=replace(ds, images=fix(ds.images), labels=fix(ds.labels)))
    return cfg


def _as_list(x) -> list[str]:
    return [x] if isinstance(x, str) else list(x)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    d["hidden_dims"] = list(cfg.hidden_dims)
    return d


# ------------------------------------------------------------------ building blocks


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    ds = cfg.dataset
    if ds.kind == "blobs":
        seed = cfg.seed if ds.seed is None else ds.seed
        return synth_blobs(ds.num_examples, ds.num_classes, ds.dim, ds.separation, seed)
    if ds.kind == "idx":
        if not (ds.images and ds.labels):
            raise ConfigError("idx dataset needs images and labels paths")
        images, labels = _as_list(ds.images), _as_list(ds.labels)
        if len(images) != len(labels):
            raise ConfigError("idx images and labels lists differ in length")
        data = Dataset.concat([load_idx(i, l, ds.num_classes) for i, l in zip(images, labels)], "idx")
        if ds.limit is not None:
            data = data.subset(np.arange(min(ds.limit, len(data))))
        return data
    raise ConfigError(f"unknown dataset kind {ds.kind!r}")


def build_topology(cfg: ExperimentConfig) -> _topology.Topology:
    if cfg.topology == "custom":
        return _topology.load_edge_list(cfg.edges_file, cfg.num_agents)
    return _topology.build(cfg.topology_kind, cfg.num_agents)


def assign_roles(cfg: ExperimentConfig) -> list[str]:
    """Behaviour per agent: adversaries first, then dropout-prone agents, by a seeded shuffle."""
    K = cfg.num_agents
    order = derive_rng(cfg.seed, 0, 0, "init").permutation(K)
    n_adv = int(round(cfg.adversaries.fraction * K))
    n_drop = int(round(cfg.dropout.fraction * K)) if cfg.dropout.prob > 0 else 0
    roles = ["benign"] * K
    for a in order[:n_adv]:
        roles[a] = cfg.adversaries.behavior
    for a in order[n_adv : n_adv + n_drop]:
        roles[a] = "dropout"
    return roles


def build_participants(cfg: ExperimentConfig, spec: ModelSpec, shards) -> list[Participant]:
    roles = assign_roles(cfg)
    colluders = frozenset(a for a, r in enumerate(roles) if r == "false_report")
    out = []
    for a, (train, test) in enumerate(shards):
        dp_cfg = None
        if cfg.dp.enabled:
            dp_cfg = _dp.DpConfig(
                cfg.dp.clip_norm,
                cfg.dp.noise_multiplier,
                min(1.0, cfg.agents.batch_size / len(train)),
                cfg.dp.delta,
            )
        role = roles[a]
        profile = AgentProfile(
            id=a,
            behavior=role,
            dp=dp_cfg,
            learning_rate=cfg.agents.learning_rate,
            batch_size=cfg.agents.batch_size,
            inner_epochs=cfg.agents.inner_epochs,
            clip_norm=cfg.agents.clip_norm,
            sampling=cfg.agents.sampling,
            inflation=cfg.adversaries.inflation,
            dropout_prob=cfg.dropout.prob if role == "dropout" else 0.0,
            accomplices=colluders - {a} if role == "false_report" else frozenset(),
        )
        out.append(Participant(profile, train, test))
    return out


def per_round_epsilon(cfg: ExperimentConfig, participants: list[Participant]) -> float | None:
    """Framework privacy loss of one round: the max over agents of their per-round epsilon."""
    if not cfg.dp.enabled:
        return None
    losses = []
    cache: dict[tuple[float, int], float] = {}
    for p in participants:
        q = p.profile.dp.sampling_rate
        steps = p.profile.inner_epochs * p.profile.steps_per_epoch(len(p.train))
        if (q, steps) not in cache:
            cache[q, steps] = _dp.agent_epsilon(q, cfg.dp.noise_multiplier, steps, cfg.dp.delta).epsilon
        losses.append(cache[q, steps])
    return _dp.framework_per_round_loss(losses)


def rdp_total_epsilon(cfg: ExperimentConfig, participants: list[Participant], rounds: int) -> float | None:
    """Epsilon after ``rounds`` rounds with RDP composition across rounds (max over agents)."""
    if not cfg.dp.enabled:
        return None
    best = 0.0
    for q, steps in {
        (p.profile.dp.sampling_rate, p.profile.inner_epochs * p.profile.steps_per_epoch(len(p.train)))
        for p in participants
    }:
        best = max(best, _dp.agent_epsilon(q, cfg.dp.noise_multiplier, steps * rounds, cfg.dp.delta).epsilon)
    return best


# ------------------------------------------------------------------ simulation


@dataclass(frozen=True)
class MetricsRow:
    round: int
    acr: int
    accuracy: float
    bandwidth_bytes: int
    accepted: int
    rejected: int
    epsilon: float | None

    def csv_fields(self) -> list[str]:
        eps = "" if self.epsilon is None else f"{self.epsilon:.6f}"
        return [
            str(self.round),
            str(self.acr),
            f"{self.accuracy:.6f}",
            str(self.bandwidth_bytes),
            str(self.accepted),
            str(self.rejected),
            eps,
        ]


@dataclass
class Simulation:
    config: ExperimentConfig
    rows: list[MetricsRow]
    records: list[RoundRecord]
    ledger: Ledger
    roles: list[str]
    theta: np.ndarray
    epsilon_rdp: float | None = None

    @property
    def final_accuracy(self) -> float:
        return self.rows[-1].accuracy

    def rejection_rate(self, adversarial: bool) -> float:
        """Fraction of submitted (non-dropped) updates rejected, for adversarial or benign agents."""
        adv = {a for a, r in enumerate(self.roles) if r in ("label_flip", "random_update", "false_report")}
        total = rejected = 0
        for rec in self.records:
            for v in rec.verdicts:
                if v.dropped or ((v.agent in adv) != adversarial):
                    continue
                total += 1
                rejected += not v.accepted
        return rejected / total if total else float("nan")


def simulate(cfg: ExperimentConfig) -> Simulation:
    data = build_dataset(cfg)
    plan = PartitionPlan(cfg.num_agents, cfg.bias_rate, None, cfg.train_fraction, cfg.seed)
    shards = partition(data, plan)
    spec = ModelSpec(data.dim, cfg.hidden_dims, data.num_classes)
    top = build_topology(cfg)
    participants = build_participants(cfg, spec, shards)
    pooled_test = Dataset.concat([t for _, t in shards], "pooled-test")

    scc = cfg.scc
    if cfg.fedavg:
        # reference mode: plain averaging of every update, no verification
        top = _topology.build("star", cfg.num_agents)
        scc = replace(scc, kappa1=1.0, kappa2=1.0)
    ledger = Ledger()
    coord = Coordinator(spec, top, participants, scc, ledger, cfg.seed)
    theta = _model.init_params(spec, None if cfg.init == "zeros" else cfg.seed)

    transfer = cfg.transfer_bytes or len(_model.serialize_params(spec, theta))
    bw_model = _topology.BandwidthModel(transfer, len(data), cfg.agents.batch_size)
    if cfg.fedavg:
        acrs = math.ceil(len(data) / (cfg.num_agents * cfg.agents.batch_size))
        per_round_bw = bw_model.transfers_per_round("fedavg", cfg.num_agents) * transfer
    else:
        acrs = _topology.acrs_per_round(top)
        per_round_bw = bw_model.transfers_for(top) * transfer
    eps_round = per_round_epsilon(cfg, participants)

    rows, records = [], []
    for r in range(1, cfg.rounds + 1):
        theta, rec = coord.run_round(theta, r)
        records.append(rec)
        acr = r * acrs
        # r rounds compose sequentially; equals topology_budget(acr, ...) whenever
        # the ACR count per round is exact (chain, star, tree with K a power of 2)
        eps = None if eps_round is None else r * eps_round
        rows.append(
            MetricsRow(
                r,
                acr,
                _model.evaluate(spec, theta, pooled_test),
                int(round(r * per_round_bw)),
                rec.accepted,
                rec.rejected,
                eps,
            )
        )
    return Simulation(
        cfg,
        rows,
        records,
        ledger,
        [p.profile.behavior for p in participants],
        theta,
        rdp_total_epsilon(cfg, participants, cfg.rounds),
    )


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> list[MetricsRow]:
    """Simulate ``cfg`` and, when ``out_dir`` is given, write the report files there."""
    sims = [simulate(replace(cfg, seed=cfg.seed + i)) for i in range(cfg.repeats)]
    if out_dir is not None:
        emit_report(sims[0].rows, out_dir, ledger=sims[0].ledger, simulation=sims[0], repeats=sims)
    return sims[0].rows


# ------------------------------------------------------------------ sweeps


def compare_topologies(cfg: ExperimentConfig, kinds) -> list[dict]:
    """Same data and seed on each topology; one row per (kind, round)."""
    table = []
    for kind in kinds:
        sim = simulate(replace(cfg, topology=kind))
        for row in sim.rows:
            table.append({"kind": _topology.canonical_kind(kind), **asdict(row)})
    return table


@dataclass(frozen=True)
class SweepRow:
    fraction: float
    defended: bool
    final_accuracy: float
    adversarial_rejection_rate: float
    benign_rejection_rate: float


def attack_sweep(cfg: ExperimentConfig, fractions, undefended: bool = True) -> list[SweepRow]:
    """Final accuracy and rejection rates per adversary fraction.

    The defended runs use ``cfg.scc``; the undefended control sets both
    thresholds to 1, which accepts every update.
    """
    out = []
    for frac in fractions:
        if not 0.0 <= frac <= 0.5:
            raise ValueError("adversary fractions must lie in [0, 0.5]")
        variants = [(True, cfg.scc)]
        if undefended:
            variants.append((False, replace(cfg.scc, kappa1=1.0, kappa2=1.0)))
        for defended, scc in variants:
            sim = simulate(replace(cfg, scc=scc, adversaries=replace(cfg.adversaries, fraction=frac)))
            out.append(
                SweepRow(frac, defended, sim.final_accuracy, sim.rejection_rate(True), sim.rejection_rate(False))
            )
    return out


# ------------------------------------------------------------------ reporting


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for row in rows:
        w.writerow(row.csv_fields())
    return buf.getvalue()


def emit_report(rows, out_dir, ledger: Ledger | None = None, simulation: Simulation | None = None, repeats=()):
    """Write ``metrics.csv``, ``ledger.txt`` and ``summary.txt`` into ``out_dir``."""
    rows = list(rows)
    if not rows:
        raise ValueError("no metrics rows to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(rows))
    (out / "ledger.txt").write_text("" if ledger is None else _ledger_text(ledger))
    last = rows[-1]
    lines = [
        f"final_accuracy {last.accuracy:.6f}",
        f"total_epsilon {'' if last.epsilon is None else f'{last.epsilon:.6f}'}".rstrip(),
        f"total_bandwidth_bytes {last.bandwidth_bytes}",
        f"total_acrs {last.acr}",
        f"total_updates {sum(r.accepted + r.rejected for r in rows)}",
    ]
    if simulation is not None and simulation.epsilon_rdp is not None:
        lines.append(f"epsilon_rdp_composed {simulation.epsilon_rdp:.6f}")
    if len(repeats) > 1:
        finals = np.array([s.final_accuracy for s in repeats])
        lines.append(f"final_accuracy_over_{len(finals)}_seeds {finals.mean():.6f} +- {finals.std(ddof=1):.6f}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return out / "metrics.csv", out / "ledger.txt", out / "summary.txt"


def _ledger_text(ledger: Ledger) -> str:
    return export_lines(ledger.records)


def _final_mean(sims) -> float:
    return float(np.mean([s.final_accuracy for s in sims]))


def mean_final_accuracy(cfg: ExperimentConfig, seeds) -> float:
    return _final_mean([simulate(replace(cfg, seed=s)) for s in seeds])


def bias_drop(cfg: ExperimentConfig, bias_rate: float, seeds) -> float:
    """Mean final-accuracy drop caused by biased shards, averaged over ``seeds``."""
    return mean_final_accuracy(cfg, seeds) - mean_final_accuracy(replace(cfg, bias_rate=bias_rate), seeds)


__all__ = [
    "CSV_HEADER",
    "AdversaryConfig",
    "AgentDefaults",
    "ConfigError",
    "DatasetConfig",
    "DpSettings",
    "DropoutConfig",
    "ExperimentConfig",
    "MetricsRow",
    "Simulation",
    "SweepRow",
    "attack_sweep",
    "bias_drop",
    "compare_topologies",
    "config_from_dict",
    "emit_report",
    "load_config",
    "mean_final_accuracy",
    "metrics_csv",
    "run_experiment",
    "simulate",
]
