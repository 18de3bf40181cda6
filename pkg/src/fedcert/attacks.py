"""Attacks a malicious client can mount once it controls the aggregate.

Three families:
  * stripe backdoors: a column-striped additive trigger taught to map
    any input to a target class, hidden under adversarial training;
  * defensive distillation: temperature-scaled teacher/student training
    that masks gradients at evaluation temperature 1, defeating
    gradient-following attacks without any real robustness;
  * adaptive certification matching: starting from a distilled model,
    jointly minimize the certifiable loss on the defender's
    certification points and a distillation-maintenance loss, growing
    the radius on a schedule until the target radius certifies.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .adversarial import PgdConfig, pgd_attack
from .errors import ConfigError, InputError
from .zonotope import cert_loss_grads, eps_value

# ---------------------------------------------------------------------------
# stripe backdoor


@dataclass(frozen=True)
class BackdoorSpec:
    trigger_magnitude: float
    stripe_period: int = 1
    target_class: int = 0
    poison_fraction: float = 0.3

    def __post_init__(self):
        if self.trigger_magnitude <= 0:
            raise ConfigError("trigger_magnitude must be > 0")
        if self.stripe_period < 1:
            raise ConfigError("stripe_period must be >= 1")
        if self.target_class < 0:
            raise ConfigError("target_class must be >= 0")
        if not (0.0 < self.poison_fraction <= 1.0):
            raise ConfigError("poison_fraction must be in (0, 1]")


def apply_trigger(x, spec: BackdoorSpec) -> np.ndarray:
    """Alternating vertical column bands: even bands +magnitude, odd bands
    -magnitude, then clip to [0, 1].  Works on (..., H, W) images."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise InputError(f"trigger needs image-shaped input, got shape {x.shape}")
    cols = np.arange(x.shape[-1])
    band = (cols // spec.stripe_period) % 2
    delta = np.where(band == 0, spec.trigger_magnitude, -spec.trigger_magnitude)
    return np.clip(x + delta, 0.0, 1.0)


def backdoor_attack(global_model: nn.Model, attacker_data, spec: BackdoorSpec,
                    pgd_cfg: PgdConfig, train_cfg: nn.TrainConfig) -> nn.Model:
    """Malicious model: adversarial training on clean labels mixed with a
    poison_fraction of triggered examples relabeled to the target class.

    Starts from the current global model so clean behaviour is kept.
    """
    if spec.target_class >= global_model.num_classes:
        raise ConfigError(f"target class {spec.target_class} outside model's "
                          f"{global_model.num_classes} classes")
    if eps_value(pgd_cfg.eps) < spec.trigger_magnitude:
        raise ConfigError("trigger magnitude above the adversarial training radius "
                          "is not stealthy")
    attack_rng = np.random.default_rng(np.random.SeedSequence([train_cfg.rng_seed, 0xBD]))

    def poison_batch(cur, xb, yb):
        k = int(round(spec.poison_fraction * xb.shape[0]))
        adv = pgd_attack(cur, xb, yb, pgd_cfg, rng=attack_rng)
        if k == 0:
            return adv, yb
        out_x = adv.copy()
        out_y = yb.copy()
        out_x[:k] = apply_trigger(xb[:k], spec)
        out_y[:k] = spec.target_class
        return out_x, out_y

    return nn.train(global_model, attacker_data, train_cfg, batch_transform=poison_batch)


def trigger_success_rate(model: nn.Model, data, spec: BackdoorSpec) -> float:
    """Fraction of non-target examples pushed to the target class by the
    trigger."""
    xs, ys = nn.dataset_arrays(data)
    keep = ys != spec.target_class
    if not keep.any():
        raise InputError("no non-target examples to evaluate the trigger on")
    triggered = apply_trigger(xs[keep], spec)
    preds = nn.predict(model, triggered)
    return float(np.mean(preds == spec.target_class))


# ---------------------------------------------------------------------------
# defensive distillation


@dataclass(frozen=True)
class DistillSpec:
    temperature: float
    teacher_cfg: nn.TrainConfig
    student_cfg: nn.TrainConfig

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("distillation temperature must be > 0")


@dataclass(frozen=True)
class DistillResult:
    student: nn.Model
    teacher: nn.Model
    soft_labels: np.ndarray


def distill_full(attacker_data, spec: DistillSpec, template: nn.Model) -> DistillResult:
    """Teacher at temperature T on hard labels, relabel with the teacher's
    temperature-T softmax, train the student at T on those soft labels.

    Both nets are fresh re-initializations of `template`'s architecture
    (each from its config's rng_seed); in the federated setting the
    attacker only takes the architecture from the global model, not its
    weights, so the result carries none of the honest model's robustness.
    High-T training divides the logit gradients by T and a fresh net
    starts on a uniform-softmax plateau: small batches (or a learning
    rate scaled up toward T) are needed for SGD to leave it.  The student
    is meant to be evaluated at temperature 1, where a converged run has
    logits on the order of T times an ordinarily trained net's.
    """
    xs, ys = nn.dataset_arrays(attacker_data)
    t = spec.temperature
    teacher_cfg = nn.TrainConfig(
        learning_rate=spec.teacher_cfg.learning_rate,
        batch_size=spec.teacher_cfg.batch_size,
        epochs=spec.teacher_cfg.epochs,
        rng_seed=spec.teacher_cfg.rng_seed,
        temperature=t,
    )
    teacher = nn.train(nn.reinitialized(template, spec.teacher_cfg.rng_seed),
                       (xs, ys), teacher_cfg)
    soft = nn.softmax_t(nn.forward(teacher, xs), t)
    student_cfg = nn.TrainConfig(
        learning_rate=spec.student_cfg.learning_rate,
        batch_size=spec.student_cfg.batch_size,
        epochs=spec.student_cfg.epochs,
        rng_seed=spec.student_cfg.rng_seed,
        temperature=t,
    )
    student = nn.train(nn.reinitialized(template, spec.student_cfg.rng_seed),
                       (xs, soft), student_cfg)
    return DistillResult(student=student, teacher=teacher, soft_labels=soft)


def distill(attacker_data, spec: DistillSpec, template: nn.Model) -> nn.Model:
    return distill_full(attacker_data, spec, template).student


# ---------------------------------------------------------------------------
# adaptive certification matching


@dataclass(frozen=True)
class AdaptiveSpec:
    cert_subset_size: int
    target_eps: float = 0.1
    start_eps: float = 0.1
    eps_step: float = 0.01
    match_mode: str = "accuracy_only"  # or accuracy_and_loss
    target_mean_loss: float | None = None
    max_iters: int = 2000
    max_wall_clock: float | None = None  # seconds
    learning_rate: float = 0.05
    w_cert: float = 1.0
    w_distill: float = 1.0

    def __post_init__(self):
        if self.cert_subset_size < 0:
            raise ConfigError("cert_subset_size must be >= 0")
        if self.target_eps < 0 or self.start_eps < 0:
            raise ConfigError("radii must be >= 0")
        if self.eps_step <= 0:
            raise ConfigError("eps_step must be > 0")
        if self.match_mode not in ("accuracy_only", "accuracy_and_loss"):
            raise ConfigError(f"unknown match_mode {self.match_mode!r}")
        if self.match_mode == "accuracy_and_loss" and self.target_mean_loss is None:
            raise ConfigError("accuracy_and_loss matching needs target_mean_loss")
        if self.max_iters < 0:
            raise ConfigError("max_iters must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")


@dataclass
class AdaptiveLogRow:
    iteration: int
    eps: float
    subset_certified: int
    mean_cert_loss: float
    distill_loss: float
    wall_time: float


@dataclass
class AdaptiveResult:
    model: nn.Model
    converged: bool
    eps_reached: float | None  # highest radius at which the criterion held
    points_matched: int
    wall_time: float
    log: list = field(default_factory=list)


def _accumulate(total, grads, weight):
    for i, g in enumerate(grads):
        if g is None:
            continue
        if total[i] is None:
            total[i] = {k: weight * v for k, v in g.items()}
        else:
            for k, v in g.items():
                total[i][k] = total[i][k] + weight * v
    return total


def adaptive_attack(distilled: nn.Model, defender_cert_set, spec: AdaptiveSpec,
                    *, teacher: nn.Model | None = None, temperature: float = 1.0,
                    attacker_data=None,
                    clip: tuple[float, float] | None = (0.0, 1.0)) -> AdaptiveResult:
    """Refine a model until the defender's certification points certify.

    Each full-gradient step descends w_cert * mean certifiable loss over
    the first cert_subset_size certification points at the current
    radius plus w_distill * a maintenance loss.  The maintenance loss is
    cross-entropy at `temperature` against the teacher's soft labels on
    `attacker_data` when a teacher is given, otherwise plain
    cross-entropy on the attacker's own labels.

    The radius starts at start_eps and advances by eps_step whenever the
    matching criterion holds, until target_eps or the budget runs out.
    Termination without convergence is a legitimate outcome (the paper
    trail of a stalled attack is the returned log).
    """
    t0 = time.monotonic()
    if spec.cert_subset_size == 0:
        return AdaptiveResult(model=distilled, converged=True,
                              eps_reached=spec.target_eps, points_matched=0,
                              wall_time=time.monotonic() - t0, log=[])
    xs, ys = nn.dataset_arrays(defender_cert_set)
    k = spec.cert_subset_size
    if k > xs.shape[0]:
        raise ConfigError(f"cert_subset_size {k} exceeds certification set size {xs.shape[0]}")
    sub_x, sub_y = xs[:k], ys[:k]

    maintain_x = maintain_y = None
    if attacker_data is not None:
        maintain_x, hard_y = nn.dataset_arrays(attacker_data)
        if teacher is not None:
            maintain_y = nn.softmax_t(nn.forward(teacher, maintain_x), temperature)
        else:
            maintain_y = hard_y
    m_temp = temperature if teacher is not None else 1.0

    cur = distilled
    eps = min(spec.start_eps, spec.target_eps)
    best_model = None
    best_key = (-1.0, -1)  # (matched eps, points certified)
    converged = False
    log: list[AdaptiveLogRow] = []

    for it in range(1, spec.max_iters + 1):
        if spec.max_wall_clock is not None and time.monotonic() - t0 >= spec.max_wall_clock:
            break
        totals = [None] * len(cur.layers)
        losses = np.zeros(k)
        n_cert = 0
        for i in range(k):
            loss_i, worst_i, grads_i = cert_loss_grads(cur, sub_x[i], int(sub_y[i]), eps,
                                                       clip=clip)
            losses[i] = loss_i
            if worst_i < 0.0:
                n_cert += 1
            totals = _accumulate(totals, grads_i, spec.w_cert / k)
        mean_cert = float(losses.mean())
        distill_loss = 0.0
        if maintain_x is not None and spec.w_distill != 0.0:
            g = nn.backward(cur, maintain_x, maintain_y, temperature=m_temp)
            distill_loss = g.loss
            totals = _accumulate(totals, g.param_grads, spec.w_distill)
        log.append(AdaptiveLogRow(iteration=it, eps=eps, subset_certified=n_cert,
                                  mean_cert_loss=mean_cert, distill_loss=distill_loss,
                                  wall_time=time.monotonic() - t0))

        matched = n_cert == k
        if matched and spec.match_mode == "accuracy_and_loss":
            target = spec.target_mean_loss
            matched = abs(mean_cert - target) <= 0.1 * target
        if matched:
            key = (eps, n_cert)
            if key > best_key:
                best_key = key
                best_model = cur
            if eps >= spec.target_eps:
                converged = True
                break
            eps = min(eps + spec.eps_step, spec.target_eps)
        cur = nn._sgd_step(cur, totals, spec.learning_rate)

    matched_ever = best_model is not None
    return AdaptiveResult(model=best_model if matched_ever else cur,
                          converged=converged,
                          eps_reached=best_key[0] if matched_ever else None,
                          points_matched=best_key[1] if matched_ever else 0,
                          wall_time=time.monotonic() - t0, log=log)
