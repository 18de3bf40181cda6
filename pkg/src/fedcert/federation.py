"""Federated training simulator with a certification-gated defender.

Each round the server samples a quorum of clients uniformly without
replacement, every sampled client trains locally from the current
global model, and the server aggregates the returned parameter vectors
coordinate-wise by median.  The defender then evaluates the candidate
aggregate (clean accuracy, PGD accuracy, certified accuracy, mean
certifiable loss) and accepts it only if nothing regressed past the
configured thresholds; rejected rounds leave the accepted model
untouched.

Malicious clients behave honestly until the arming condition holds:
the model has neared convergence and they form a quorum majority, at
which point they all submit the same prepared attack model, which the
median then reproduces exactly.  The attack strategy only ever sees the
current round's state, never future sampling decisions.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import attacks, nn
from .adversarial import PgdConfig, adv_accuracy, pgd_train
from .data import DefenderSplits, LabeledDataset
from .errors import ConfigError, InputError
from .zonotope import CertEpsilon, certified_stats


# ---------------------------------------------------------------------------
# population and aggregation


@dataclass(frozen=True)
class ClientPopulation:
    num_clients: int
    malicious_ids: frozenset
    partition: tuple  # tuple of index arrays into the client pool dataset

    def __post_init__(self):
        if self.num_clients < 1:
            raise ConfigError("need at least one client")
        if len(self.partition) != self.num_clients:
            raise ConfigError("partition size does not match num_clients")
        bad = [c for c in self.malicious_ids if not 0 <= c < self.num_clients]
        if bad:
            raise ConfigError(f"malicious ids outside population: {bad}")

    @property
    def num_malicious(self) -> int:
        return len(self.malicious_ids)


def build_population(pool_size: int, num_clients: int, num_malicious: int,
                     seed: int) -> ClientPopulation:
    """Disjoint shards covering the pool; the first pool_size % num_clients
    shards take one extra example.  Malicious ids are a seeded draw."""
    if num_clients < 1 or num_malicious < 0 or num_malicious > num_clients:
        raise ConfigError(f"bad population sizes: {num_clients} clients, "
                          f"{num_malicious} malicious")
    if pool_size < num_clients:
        raise ConfigError(f"pool of {pool_size} cannot cover {num_clients} clients")
    base = pool_size // num_clients
    extra = pool_size % num_clients
    parts = []
    start = 0
    for c in range(num_clients):
        size = base + (1 if c < extra else 0)
        parts.append(np.arange(start, start + size))
        start += size
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x3A11]))
    malicious = frozenset(int(i) for i in rng.choice(num_clients, size=num_malicious,
                                                     replace=False))
    return ClientPopulation(num_clients, malicious, tuple(parts))


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    params: np.ndarray
    is_malicious: bool = False

    def __post_init__(self):
        p = np.asarray(self.params, dtype=np.float64).reshape(-1)
        if not np.isfinite(p).all():
            raise InputError("client update must be finite")
        object.__setattr__(self, "params", p)


def sample_quorum(population: ClientPopulation, size: int, rng) -> list[int]:
    """Uniform sample of client ids without replacement, sorted for a
    stable processing order."""
    if not 1 <= size <= population.num_clients:
        raise ConfigError(f"quorum size {size} outside [1, {population.num_clients}]")
    picked = rng.choice(population.num_clients, size=size, replace=False)
    return sorted(int(c) for c in picked)


def median_aggregate(updates: list[ClientUpdate]) -> np.ndarray:
    """Coordinate-wise median; even counts average the two middle values."""
    if not updates:
        raise InputError("no updates to aggregate")
    lengths = {u.params.shape[0] for u in updates}
    if len(lengths) != 1:
        raise InputError(f"updates disagree on parameter count: {sorted(lengths)}")
    stacked = np.stack([u.params for u in updates])
    return np.median(stacked, axis=0)


# ---------------------------------------------------------------------------
# defender gate


@dataclass(frozen=True)
class GateThresholds:
    acc_retain_fraction: float = 0.9
    loss_band_fraction: float = 0.1
    eps_crt: float = 0.1
    eps_adv: float = 0.1
    use_cert_checks: bool = True

    def __post_init__(self):
        if not (0.0 < self.acc_retain_fraction <= 1.0):
            raise ConfigError("acc_retain_fraction must be in (0, 1]")
        if self.loss_band_fraction < 0:
            raise ConfigError("loss_band_fraction must be >= 0")
        if self.eps_crt < 0 or self.eps_adv < 0:
            raise ConfigError("gate radii must be >= 0")


@dataclass(frozen=True)
class RoundMetrics:
    normal_acc: float
    adv_acc: float
    certified_acc: float | None = None
    mean_cert_loss: float | None = None


@dataclass(frozen=True)
class GateVerdict:
    accepted: bool
    reason: str | None = None  # first failed criterion, or accept provenance


def defender_gate(candidate: RoundMetrics, last_accepted: RoundMetrics,
                  th: GateThresholds) -> GateVerdict:
    """Accept unless a criterion regressed; criteria are checked in order
    normal_acc, adv_acc, certified_acc, cert_loss and the first failure
    names the verdict."""
    f = th.acc_retain_fraction
    if candidate.normal_acc < f * last_accepted.normal_acc:
        return GateVerdict(False, "normal_acc")
    if candidate.adv_acc < f * last_accepted.adv_acc:
        return GateVerdict(False, "adv_acc")
    if th.use_cert_checks:
        if candidate.certified_acc is None or last_accepted.certified_acc is None:
            raise ConfigError("cert checks enabled but certification metrics missing")
        if candidate.certified_acc < f * last_accepted.certified_acc:
            return GateVerdict(False, "certified_acc")
        band = th.loss_band_fraction * last_accepted.mean_cert_loss
        if abs(candidate.mean_cert_loss - last_accepted.mean_cert_loss) > band:
            return GateVerdict(False, "cert_loss")
    return GateVerdict(True, None)


# ---------------------------------------------------------------------------
# simulation


@dataclass(frozen=True)
class AttackPlan:
    kind: str  # backdoor | distill | adaptive
    backdoor: attacks.BackdoorSpec | None = None
    distill: attacks.DistillSpec | None = None
    adaptive: attacks.AdaptiveSpec | None = None
    convergence_floor: float = 0.9
    convergence_fraction: float = 0.95
    convergence_lookback: int = 5

    def __post_init__(self):
        if self.kind not in ("backdoor", "distill", "adaptive"):
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if self.kind == "backdoor" and self.backdoor is None:
            raise ConfigError("backdoor attack needs a BackdoorSpec")
        if self.kind in ("distill", "adaptive") and self.distill is None:
            raise ConfigError(f"{self.kind} attack needs a DistillSpec")
        if self.kind == "adaptive" and self.adaptive is None:
            raise ConfigError("adaptive attack needs an AdaptiveSpec")


@dataclass(frozen=True)
class SimulationConfig:
    rounds: int
    quorum_size: int
    num_clients: int
    num_malicious: int
    local_train: nn.TrainConfig
    local_pgd: PgdConfig
    gate: GateThresholds
    master_seed: int
    warmup_rounds: int = 1  # rounds accepted unconditionally to seed the baseline
    attack: AttackPlan | None = None
    population_seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.warmup_rounds < 1:
            raise ConfigError("warmup_rounds must be >= 1 (the baseline bootstrap)")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")


@dataclass
class RoundRecord:
    round_index: int
    quorum: list
    num_malicious_in_quorum: int
    attack_armed: bool
    metrics: RoundMetrics
    verdict: GateVerdict
    model_hash: str


@dataclass
class SimulationResult:
    records: list
    final_model: nn.Model
    accepted_models: dict = field(default_factory=dict)  # round index -> Model


def _client_seed(master: int, round_index: int, client_id: int,
                 stream: int = 0xC11E) -> int:
    ss = np.random.SeedSequence([master, round_index, client_id, stream])
    return int(ss.generate_state(1)[0])


def _evaluate(model: nn.Model, splits: DefenderSplits, gate: GateThresholds,
              eval_pgd: PgdConfig, threads: int) -> RoundMetrics:
    normal = nn.accuracy(model, splits.validation)
    adv = adv_accuracy(model, splits.validation, eval_pgd)
    cert_acc = cert_loss_mean = None
    if splits.cert_set is not None:
        cert_acc, cert_loss_mean = certified_stats(model, splits.cert_set, gate.eps_crt,
                                                   threads=threads)
    return RoundMetrics(normal_acc=normal, adv_acc=adv, certified_acc=cert_acc,
                        mean_cert_loss=cert_loss_mean)


def _near_convergence(acc_history: list[float], plan: AttackPlan) -> bool:
    if not acc_history:
        return False
    now = acc_history[-1]
    then = acc_history[max(0, len(acc_history) - 1 - plan.convergence_lookback)]
    return now >= plan.convergence_fraction * then and now >= plan.convergence_floor


def _build_attack_model(plan: AttackPlan, global_model: nn.Model,
                        attacker_data: LabeledDataset, cert_set,
                        local_pgd: PgdConfig, local_train: nn.TrainConfig) -> nn.Model:
    if plan.kind == "backdoor":
        return attacks.backdoor_attack(global_model, attacker_data, plan.backdoor,
                                       local_pgd, local_train)
    dist = attacks.distill_full(attacker_data, plan.distill, global_model)
    if plan.kind == "distill":
        return dist.student
    if cert_set is None:
        raise ConfigError("adaptive attack needs the certification set")
    result = attacks.adaptive_attack(dist.student, cert_set, plan.adaptive,
                                     teacher=dist.teacher,
                                     temperature=plan.distill.temperature,
                                     attacker_data=attacker_data)
    return result.model


def run_simulation(initial_model: nn.Model, splits: DefenderSplits,
                   cfg: SimulationConfig) -> SimulationResult:
    """Run the full protocol; returns per-round records and the final
    accepted model.  Fully determined by the seeds in cfg."""
    if cfg.gate.use_cert_checks and splits.cert_set is None:
        raise ConfigError("gate cert checks enabled but no certification set configured")
    population = build_population(len(splits.client_pool), cfg.num_clients,
                                  cfg.num_malicious, cfg.population_seed)
    pool = splits.client_pool
    eval_pgd = replace(cfg.local_pgd, eps=CertEpsilon(cfg.gate.eps_adv, "adv"),
                       attack_temperature=1.0, mask_float32=True)

    attacker_data = None
    attack_model = None
    if cfg.attack is not None and population.malicious_ids:
        mal_idx = np.concatenate([population.partition[c]
                                  for c in sorted(population.malicious_ids)])
        attacker_data = pool.take(mal_idx, name=f"{pool.name}/malicious")

    global_model = initial_model
    last_accepted: RoundMetrics | None = None
    acc_history: list[float] = []
    records: list[RoundRecord] = []
    accepted_models: dict[int, nn.Model] = {}
    majority = cfg.quorum_size // 2 + 1

    for r in range(1, cfg.rounds + 1):
        quorum_rng = np.random.default_rng(np.random.SeedSequence([cfg.master_seed, r, 0x0]))
        quorum = sample_quorum(population, cfg.quorum_size, quorum_rng)
        mal_in_quorum = [c for c in quorum if c in population.malicious_ids]
        armed = (cfg.attack is not None
                 and len(mal_in_quorum) >= majority
                 and _near_convergence(acc_history, cfg.attack))
        if armed and attack_model is None:
            attack_model = _build_attack_model(cfg.attack, global_model, attacker_data,
                                               splits.cert_set, cfg.local_pgd,
                                               cfg.local_train)
        updates = []
        for cid in quorum:
            is_mal = cid in population.malicious_ids
            if armed and is_mal:
                params = nn.flatten_params(attack_model)
            else:
                shard = pool.take(population.partition[cid])
                local_cfg = replace(cfg.local_train,
                                    rng_seed=_client_seed(cfg.master_seed, r, cid))
                local_pgd = replace(cfg.local_pgd,
                                    rng_seed=_client_seed(cfg.master_seed, r, cid,
                                                          stream=0xADD))
                local = pgd_train(global_model, shard, local_cfg, local_pgd)
                params = nn.flatten_params(local)
            updates.append(ClientUpdate(client_id=cid, params=params, is_malicious=is_mal))
        candidate = nn.load_params(global_model, median_aggregate(updates))
        metrics = _evaluate(candidate, splits, cfg.gate, eval_pgd, cfg.threads)
        if r <= cfg.warmup_rounds or last_accepted is None:
            verdict = GateVerdict(True, "baseline")
        else:
            verdict = defender_gate(metrics, last_accepted, cfg.gate)
        if verdict.accepted:
            global_model = candidate
            last_accepted = metrics
            acc_history.append(metrics.normal_acc)
            accepted_models[r] = candidate
        records.append(RoundRecord(
            round_index=r, quorum=quorum, num_malicious_in_quorum=len(mal_in_quorum),
            attack_armed=armed, metrics=metrics, verdict=verdict,
            model_hash=nn.model_hash(candidate)))
    return SimulationResult(records=records, final_model=global_model,
                            accepted_models=accepted_models)
