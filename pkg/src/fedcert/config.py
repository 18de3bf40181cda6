"""Experiment configuration: one YAML file, strictly validated.

The schema is versioned (`version: 1` is required), unknown keys are
rejected, and every complaint carries the file and line it refers to.
CLI flags may override scalar fields by dotted path after parsing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import yaml

from . import attacks, nn
from .adversarial import PgdConfig
from .errors import ConfigError
from .federation import AttackPlan, GateThresholds
from .zonotope import CertEpsilon

CONFIG_VERSION = 1


class _Node:
    """A parsed YAML value plus the line it started on."""

    __slots__ = ("value", "line")

    def __init__(self, value, line):
        self.value = value
        self.line = line


def _convert(node, path: str, sc) -> _Node:
    line = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for key_node, val_node in node.value:
            key = key_node.value
            if key in out:
                raise ConfigError(f"line {key_node.start_mark.line + 1}: duplicate key "
                                  f"{path}{key}")
            out[key] = _convert(val_node, f"{path}{key}.", sc)
        return _Node(out, line)
    if isinstance(node, yaml.SequenceNode):
        return _Node([_convert(v, path, sc) for v in node.value], line)
    return _Node(sc.construct_object(node, deep=True), line)


def _parse_yaml(text: str, source: str) -> _Node:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    if root is None:
        raise ConfigError(f"{source}: empty config")
    if not isinstance(root, yaml.MappingNode):
        raise ConfigError(f"{source}: top level must be a mapping")
    return _convert(root, "", yaml.constructor.SafeConstructor())


class _Section:
    """Typed key extraction with unknown-key detection."""

    def __init__(self, node: _Node, path: str, source: str):
        if not isinstance(node.value, dict):
            raise ConfigError(f"{source}:{node.line}: {path or 'config'} must be a mapping")
        self.node = node
        self.path = path
        self.source = source
        self.taken: set[str] = set()

    def _fail(self, line: int, msg: str):
        raise ConfigError(f"{self.source}:{line}: {msg}")

    def has(self, key: str) -> bool:
        return key in self.node.value

    def child(self, key: str) -> "_Section | None":
        if key not in self.node.value:
            return None
        self.taken.add(key)
        return _Section(self.node.value[key], f"{self.path}{key}.", self.source)

    def take(self, key: str, kind, default=..., choices=None):
        if key not in self.node.value:
            if default is ...:
                self._fail(self.node.line, f"missing required key {self.path}{key}")
            return default
        self.taken.add(key)
        child = self.node.value[key]
        v = child.value
        if isinstance(v, list):
            v = [item.value for item in v]
        if kind is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        bool_as_number = isinstance(v, bool) and kind in (int, float)
        wrong_type = v is not None and kind is not None and not isinstance(v, kind)
        if wrong_type or bool_as_number:
            self._fail(child.line, f"{self.path}{key} must be {getattr(kind, '__name__', kind)}, "
                                   f"got {type(v).__name__}")
        if choices is not None and v not in choices:
            self._fail(child.line, f"{self.path}{key} must be one of {sorted(choices)}, "
                                   f"got {v!r}")
        return v

    def finish(self):
        unknown = set(self.node.value) - self.taken
        if unknown:
            key = sorted(unknown)[0]
            self._fail(self.node.value[key].line, f"unknown key {self.path}{key}")


# ---------------------------------------------------------------------------
# schema sections


@dataclass(frozen=True)
class DatasetConfig:
    kind: str
    classes: int = 3
    per_class: int = 700
    image_shape: tuple[int, ...] | None = (1, 8, 8)
    features: int | None = None
    separation: float = 1.0
    noise: float = 0.08
    seed: int = 7
    images_path: str | None = None
    labels_path: str | None = None


@dataclass(frozen=True)
class ModelConfig:
    preset: str = "desk_mlp"
    num_classes: int | None = None
    seed: int = 5


@dataclass(frozen=True)
class SplitConfig:
    cert_n: int = 50
    val_n: int = 150


@dataclass(frozen=True)
class CertifyConfig:
    eps_list: tuple[float, ...] = (0.0, 0.05, 0.1)
    clip: tuple[float, float] | None = (0.0, 1.0)


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 20
    num_malicious: int = 7
    quorum_size: int = 5
    rounds: int = 10
    warmup_rounds: int = 1
    local_epochs: int = 1
    local_learning_rate: float = 0.05
    population_seed: int = 3
    init_model: str | None = None


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "none"
    data_fraction: float = 0.35
    convergence_floor: float = 0.9
    convergence_fraction: float = 0.95
    convergence_lookback: int = 5
    backdoor: attacks.BackdoorSpec | None = None
    distill: attacks.DistillSpec | None = None
    adaptive: attacks.AdaptiveSpec | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    output_dir: str | None
    threads: int
    dataset: DatasetConfig
    model: ModelConfig
    train: nn.TrainConfig
    train_mode: str
    pgd: PgdConfig
    certify: CertifyConfig
    splits: SplitConfig
    federation: FederationConfig
    gate: GateThresholds
    attack: AttackConfig
    echo: dict = field(default_factory=dict, compare=False)


def _dataset_section(sec: _Section | None) -> DatasetConfig:
    if sec is None:
        return DatasetConfig(kind="synth")
    kind = sec.take("kind", str, "synth", choices={"synth", "idx"})
    image_shape = sec.take("image_shape", list, None)
    features = sec.take("features", int, None)
    if kind == "synth" and image_shape is None and features is None:
        image_shape = [1, 8, 8]
    cfg = DatasetConfig(
        kind=kind,
        classes=sec.take("classes", int, 3),
        per_class=sec.take("per_class", int, 700),
        image_shape=tuple(image_shape) if image_shape is not None else None,
        features=features,
        separation=sec.take("separation", float, 1.0),
        noise=sec.take("noise", float, 0.08),
        seed=sec.take("seed", int, 7),
        images_path=sec.take("images", str, None),
        labels_path=sec.take("labels", str, None),
    )
    if kind == "idx" and (cfg.images_path is None or cfg.labels_path is None):
        raise ConfigError("idx dataset needs 'images' and 'labels' paths")
    sec.finish()
    return cfg


def _train_section(sec: _Section | None) -> tuple[nn.TrainConfig, str]:
    if sec is None:
        return nn.TrainConfig(learning_rate=0.1, batch_size=32, epochs=10, rng_seed=11), "pgd"
    mode = sec.take("mode", str, "pgd", choices={"plain", "pgd"})
    cfg = nn.TrainConfig(
        learning_rate=sec.take("learning_rate", float, 0.1),
        batch_size=sec.take("batch_size", int, 32),
        epochs=sec.take("epochs", int, 10),
        rng_seed=sec.take("rng_seed", int, 11),
        temperature=sec.take("temperature", float, 1.0),
    )
    sec.finish()
    return cfg, mode


def _pgd_section(sec: _Section | None) -> PgdConfig:
    if sec is None:
        return PgdConfig(eps=CertEpsilon(0.1, "adv"))
    cfg = PgdConfig(
        eps=CertEpsilon(sec.take("eps", float, 0.1), "adv"),
        num_steps=sec.take("num_steps", int, 40),
        step_size=sec.take("step_size", float, None),
        random_start=sec.take("random_start", bool, True),
        attack_temperature=sec.take("attack_temperature", float, 1.0),
        rng_seed=sec.take("rng_seed", int, 13),
        mask_float32=sec.take("mask_float32", bool, True),
    )
    sec.finish()
    return cfg


def _sub_train(sec: _Section | None, defaults: nn.TrainConfig, default_seed: int,
               temperature: float = 1.0) -> nn.TrainConfig:
    if sec is None:
        return nn.TrainConfig(learning_rate=defaults.learning_rate,
                              batch_size=defaults.batch_size, epochs=defaults.epochs,
                              rng_seed=default_seed, temperature=temperature)
    cfg = nn.TrainConfig(
        learning_rate=sec.take("learning_rate", float, defaults.learning_rate),
        batch_size=sec.take("batch_size", int, defaults.batch_size),
        epochs=sec.take("epochs", int, defaults.epochs),
        rng_seed=sec.take("rng_seed", int, default_seed),
        temperature=temperature,
    )
    sec.finish()
    return cfg


def _attack_section(sec: _Section | None, train_cfg: nn.TrainConfig) -> AttackConfig:
    if sec is None:
        return AttackConfig()
    kind = sec.take("kind", str, "none", choices={"none", "backdoor", "distill", "adaptive"})
    base = dict(
        kind=kind,
        data_fraction=sec.take("data_fraction", float, 0.35),
        convergence_floor=sec.take("convergence_floor", float, 0.9),
        convergence_fraction=sec.take("convergence_fraction", float, 0.95),
        convergence_lookback=sec.take("convergence_lookback", int, 5),
    )
    backdoor = None
    bd = sec.child("backdoor")
    if bd is not None:
        backdoor = attacks.BackdoorSpec(
            trigger_magnitude=bd.take("trigger_magnitude", float, 0.1),
            stripe_period=bd.take("stripe_period", int, 1),
            target_class=bd.take("target_class", int, 0),
            poison_fraction=bd.take("poison_fraction", float, 0.3),
        )
        bd.finish()
    distill = None
    ds = sec.child("distill")
    if ds is not None:
        temp = ds.take("temperature", float, 50.0)
        distill = attacks.DistillSpec(
            temperature=temp,
            teacher_cfg=_sub_train(ds.child("teacher"), train_cfg, 21),
            student_cfg=_sub_train(ds.child("student"), train_cfg, 22),
        )
        ds.finish()
    adaptive = None
    ad = sec.child("adaptive")
    if ad is not None:
        adaptive = attacks.AdaptiveSpec(
            cert_subset_size=ad.take("cert_subset_size", int, 50),
            target_eps=ad.take("target_eps", float, 0.1),
            start_eps=ad.take("start_eps", float, 0.1),
            eps_step=ad.take("eps_step", float, 0.01),
            match_mode=ad.take("match_mode", str, "accuracy_only",
                               choices={"accuracy_only", "accuracy_and_loss"}),
            target_mean_loss=ad.take("target_mean_loss", float, None),
            max_iters=ad.take("max_iters", int, 2000),
            max_wall_clock=ad.take("max_wall_clock", float, None),
            learning_rate=ad.take("learning_rate", float, 0.05),
            w_cert=ad.take("w_cert", float, 1.0),
            w_distill=ad.take("w_distill", float, 1.0),
        )
        ad.finish()
    sec.finish()
    if kind == "backdoor" and backdoor is None:
        raise ConfigError("attack.kind backdoor needs an attack.backdoor section")
    if kind in ("distill", "adaptive") and distill is None:
        raise ConfigError(f"attack.kind {kind} needs an attack.distill section")
    if kind == "adaptive" and adaptive is None:
        raise ConfigError("attack.kind adaptive needs an attack.adaptive section")
    return AttackConfig(backdoor=backdoor, distill=distill, adaptive=adaptive, **base)


def _apply_overrides(root: _Node, overrides: list[str], source: str) -> None:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like path.to.key=value")
        path, raw = item.split("=", 1)
        keys = path.strip().split(".")
        node = root
        for k in keys[:-1]:
            if not isinstance(node.value, dict) or k not in node.value:
                raise ConfigError(f"override path {path!r} does not exist in {source}")
            node = node.value[k]
        if not isinstance(node.value, dict):
            raise ConfigError(f"override path {path!r} does not reach a mapping")
        leaf = keys[-1]
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {item!r}: bad value: {exc}") from exc
        if isinstance(value, (dict, list)):
            raise ConfigError(f"override {item!r}: only scalar overrides are allowed")
        node.value[leaf] = _Node(value, 0)


def _echo(node: _Node):
    if isinstance(node.value, dict):
        return {k: _echo(v) for k, v in node.value.items()}
    if isinstance(node.value, list):
        return [_echo(v) for v in node.value]
    return node.value


def load_config(path, overrides: list[str] | None = None) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path), overrides or [])


def parse_config(text: str, source: str, overrides: list[str] | None = None) -> ExperimentConfig:
    root = _parse_yaml(text, source)
    if overrides:
        _apply_overrides(root, overrides, source)
    top = _Section(root, "", source)
    version = top.take("version", int)
    if version != CONFIG_VERSION:
        raise ConfigError(f"{source}: unsupported config version {version}, "
                          f"expected {CONFIG_VERSION}")
    seed = top.take("seed", int, 1234)
    output_dir = top.take("output_dir", str, None)
    threads = top.take("threads", int, 1)
    if threads < 1:
        raise ConfigError(f"{source}: threads must be >= 1")
    dataset = _dataset_section(top.child("dataset"))
    model_sec = top.child("model")
    if model_sec is None:
        model = ModelConfig()
    else:
        model = ModelConfig(preset=model_sec.take("preset", str, "desk_mlp"),
                            num_classes=model_sec.take("num_classes", int, None),
                            seed=model_sec.take("seed", int, 5))
        model_sec.finish()
    train_cfg, train_mode = _train_section(top.child("train"))
    pgd = _pgd_section(top.child("pgd"))
    cert_sec = top.child("certify")
    if cert_sec is None:
        certify = CertifyConfig()
    else:
        eps_list = cert_sec.take("eps_list", list, [0.0, 0.05, 0.1])
        clip = cert_sec.take("clip", list, [0.0, 1.0])
        certify = CertifyConfig(eps_list=tuple(float(e) for e in eps_list),
                                clip=tuple(clip) if clip is not None else None)
        cert_sec.finish()
    splits_sec = top.child("splits")
    if splits_sec is None:
        splits = SplitConfig()
    else:
        splits = SplitConfig(cert_n=splits_sec.take("cert_n", int, 50),
                             val_n=splits_sec.take("val_n", int, 150))
        splits_sec.finish()
    fed_sec = top.child("federation")
    if fed_sec is None:
        federation = FederationConfig()
    else:
        federation = FederationConfig(
            num_clients=fed_sec.take("num_clients", int, 20),
            num_malicious=fed_sec.take("num_malicious", int, 7),
            quorum_size=fed_sec.take("quorum_size", int, 5),
            rounds=fed_sec.take("rounds", int, 10),
            warmup_rounds=fed_sec.take("warmup_rounds", int, 1),
            local_epochs=fed_sec.take("local_epochs", int, 1),
            local_learning_rate=fed_sec.take("local_learning_rate", float, 0.05),
            population_seed=fed_sec.take("population_seed", int, 3),
            init_model=fed_sec.take("init_model", str, None),
        )
        fed_sec.finish()
    gate_sec = top.child("gate")
    if gate_sec is None:
        gate = GateThresholds()
    else:
        gate = GateThresholds(
            acc_retain_fraction=gate_sec.take("acc_retain_fraction", float, 0.9),
            loss_band_fraction=gate_sec.take("loss_band_fraction", float, 0.1),
            eps_crt=gate_sec.take("eps_crt", float, 0.1),
            eps_adv=gate_sec.take("eps_adv", float, 0.1),
            use_cert_checks=gate_sec.take("use_cert_checks", bool, True),
        )
        gate_sec.finish()
    attack = _attack_section(top.child("attack"), train_cfg)
    top.finish()
    return ExperimentConfig(
        seed=seed, output_dir=output_dir, threads=threads, dataset=dataset, model=model,
        train=train_cfg, train_mode=train_mode, pgd=pgd, certify=certify, splits=splits,
        federation=federation, gate=gate, attack=attack, echo=_echo(root),
    )


def build_attack_plan(cfg: ExperimentConfig) -> AttackPlan | None:
    a = cfg.attack
    if a.kind == "none":
        return None
    return AttackPlan(kind=a.kind, backdoor=a.backdoor, distill=a.distill,
                      adaptive=a.adaptive, convergence_floor=a.convergence_floor,
                      convergence_fraction=a.convergence_fraction,
                      convergence_lookback=a.convergence_lookback)
