"""Projected gradient descent attacks and adversarial training.

The attack maximizes cross-entropy at a crafting temperature with
signed-gradient steps, projecting onto the L-inf ball around the
original input and the [0, 1] value domain after every step.

By default the loss gradient is rounded through 32-bit floats on the
way to the input, matching what single-precision inference would give
an attacker.  The engine itself stays in float64, so this rounding is
what makes gradient masking (saturated softmax under temperature
scaling) observable: probabilities that only differ from one-hot below
float32 resolution yield an exactly-zero attack direction.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .errors import ConfigError
from .zonotope import CertEpsilon, eps_value


@dataclass(frozen=True)
class PgdConfig:
    eps: CertEpsilon
    num_steps: int = 40
    step_size: float | None = None  # None -> 2.5 * eps / num_steps
    random_start: bool = True
    attack_temperature: float = 1.0
    rng_seed: int = 0
    mask_float32: bool = True

    def __post_init__(self):
        e = self.eps if isinstance(self.eps, CertEpsilon) else CertEpsilon(float(self.eps), "adv")
        object.__setattr__(self, "eps", e)
        if self.num_steps < 1:
            raise ConfigError("num_steps must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ConfigError("step_size must be > 0")
        if self.attack_temperature <= 0:
            raise ConfigError("attack_temperature must be > 0")


def _resolved_step(cfg: PgdConfig) -> float:
    if cfg.step_size is not None:
        return cfg.step_size
    return 2.5 * eps_value(cfg.eps) / cfg.num_steps


def _round32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def pgd_attack(model: nn.Model, x, y, cfg: PgdConfig, *, rng=None) -> np.ndarray:
    """Adversarial examples for a batch (or single input).

    The output stays within eps of the original x in L-inf and within
    [0, 1].  With eps == 0 the input comes back bitwise unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == model.input_shape
    xb = x[None] if single else x
    yb = np.asarray(y).reshape(-1)
    e = eps_value(cfg.eps)
    step = _resolved_step(cfg)
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    lo = np.clip(xb - e, 0.0, 1.0)
    hi = np.clip(xb + e, 0.0, 1.0)
    if cfg.random_start and e > 0:
        adv = xb + rng.uniform(-e, e, size=xb.shape)
        adv = np.clip(adv, lo, hi)
    else:
        adv = xb.copy()
    onehot = np.zeros((yb.shape[0], model.num_classes))
    onehot[np.arange(yb.shape[0]), yb] = 1.0
    for _ in range(cfg.num_steps):
        logits, cache = nn.forward_cache(model, adv)
        probs = nn.softmax_t(logits, cfg.attack_temperature)
        if cfg.mask_float32:
            probs = _round32(probs)
        dlogits = probs - onehot  # ascent on cross-entropy; scale is irrelevant to sign
        _, grad = nn.backprop(model, cache, dlogits, want_params=False)
        if cfg.mask_float32:
            grad = _round32(grad)
        adv = adv + step * np.sign(grad)
        adv = np.clip(adv, lo, hi)
    return adv[0] if single else adv


def adv_accuracy(model: nn.Model, data, cfg: PgdConfig, batch: int = 256) -> float:
    """Fraction of examples still classified correctly after the attack."""
    xs, ys = nn.dataset_arrays(data)
    n = xs.shape[0]
    if n == 0:
        raise ConfigError("adv_accuracy over an empty dataset")
    rng = np.random.default_rng(cfg.rng_seed)
    hits = 0
    for s in range(0, n, batch):
        xa = pgd_attack(model, xs[s : s + batch], ys[s : s + batch], cfg, rng=rng)
        hits += int(np.sum(nn.predict(model, xa) == ys[s : s + batch]))
    return hits / n


def pgd_train(model: nn.Model, data, train_cfg: nn.TrainConfig, pgd_cfg: PgdConfig) -> nn.Model:
    """Adversarial training: every batch is attacked against the current
    model before the SGD step.

    Attack randomness is drawn from a stream separate from the shuffle
    stream, so pgd eps == 0 reproduces plain train() bitwise.
    """
    attack_rng = np.random.default_rng(np.random.SeedSequence([pgd_cfg.rng_seed, 0x9D]))

    def craft(cur, xb, yb):
        return pgd_attack(cur, xb, yb, pgd_cfg, rng=attack_rng), yb

    return nn.train(model, data, train_cfg, batch_transform=craft)


def defender_pgd(cfg: PgdConfig, eps) -> PgdConfig:
    """The defender's evaluation attack at a given radius: crafting at
    temperature 1 with float32 rounding, other knobs unchanged."""
    e = eps if isinstance(eps, CertEpsilon) else CertEpsilon(float(eps), "adv")
    return replace(cfg, eps=e, attack_temperature=1.0, mask_float32=True)
