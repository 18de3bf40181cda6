"""Certified federated adversarial training sandbox.

A zonotope-based robustness certifier for small ReLU networks, wired
into a federated learning simulator whose defender gates aggregation
rounds on certified metrics, plus the attack suite the gate is meant to
catch: stripe backdoors, defensive distillation, and adaptive
certification matching.
"""

from .adversarial import PgdConfig, adv_accuracy, pgd_attack, pgd_train
from .attacks import (AdaptiveResult, AdaptiveSpec, BackdoorSpec, DistillSpec,
                      adaptive_attack, apply_trigger, backdoor_attack, distill,
                      distill_full, trigger_success_rate)
from .data import (DefenderSplits, LabeledDataset, load_idx, make_splits, save_idx,
                   synth_dataset)
from .errors import ConfigError, FormatError, InputError, NumericError
from .federation import (AttackPlan, ClientPopulation, ClientUpdate, GateThresholds,
                         GateVerdict, RoundMetrics, RoundRecord, SimulationConfig,
                         build_population, defender_gate, median_aggregate,
                         run_simulation, sample_quorum)
from .nn import (Conv2D, Dense, Model, ReLU, TrainConfig, accuracy, backward,
                 cross_entropy_t, flatten_params, forward, load_model, load_params,
                 make_model, model_hash, predict, save_model, softmax_t, train)
from .zonotope import (CertEpsilon, CertVerdict, IntervalBox, Zonotope, affine, bounds,
                       cert_loss, cert_loss_grads, certified_stats, certify, conv2d_abs,
                       from_linf_ball, instantiate, pairwise_diff_upper, propagate,
                       relu_deepzono)

__version__ = "0.1.0"
