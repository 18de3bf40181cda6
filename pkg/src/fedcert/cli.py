"""Command-line front end.

Subcommands: train, certify, simulate, attack, validate-report.  All of
them read one YAML config (see config.py); scalar fields can be
overridden with repeated `--set path.to.key=value` flags.  Reports are
line-delimited JSON under --out (or $FEDCERT_OUT_DIR, or the working
directory).  Exit codes: 0 success, 1 configuration problem, 2 runtime
or data problem.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import attacks, nn, reports
from .adversarial import adv_accuracy, pgd_train
from .config import ExperimentConfig, build_attack_plan, load_config
from .data import LabeledDataset, load_idx, make_splits, synth_dataset
from .errors import ConfigError, FormatError, InputError, NumericError
from .federation import SimulationConfig, run_simulation
from .zonotope import certify as zono_certify
from .zonotope import certified_stats


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("FEDCERT_OUT_DIR") or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_dataset(cfg: ExperimentConfig) -> LabeledDataset:
    d = cfg.dataset
    if d.kind == "idx":
        return load_idx(d.images_path, d.labels_path, name="idx")
    return synth_dataset(d.classes, d.per_class, image_shape=d.image_shape,
                         features=d.features, separation=d.separation,
                         noise=d.noise, seed=d.seed, name="synth")


def _fresh_model(cfg: ExperimentConfig, data: LabeledDataset) -> nn.Model:
    num_classes = cfg.model.num_classes or int(data.labels.max()) + 1
    return nn.make_model(cfg.model.preset, seed=cfg.model.seed,
                         num_classes=num_classes, input_shape=data.example_shape)


def _splits(cfg: ExperimentConfig, data: LabeledDataset):
    return make_splits(data, cfg.splits.cert_n, cfg.splits.val_n,
                       allow_empty_cert=not cfg.gate.use_cert_checks)


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    out = _out_dir(args)
    data = _load_dataset(cfg)
    model = _fresh_model(cfg, data)
    if cfg.train_mode == "pgd":
        model = pgd_train(model, data, cfg.train, cfg.pgd)
        adv = adv_accuracy(model, data, cfg.pgd)
    else:
        model = nn.train(model, data, cfg.train)
        adv = None
    clean = nn.accuracy(model, data)
    model_path = out / (args.model_name or "model.npz")
    nn.save_model(model, model_path)
    recs = [reports.train_header(cfg.echo),
            reports.train_summary(nn.model_hash(model), clean, adv)]
    report_path = out / "train_report.jsonl"
    reports.write_jsonl(report_path, recs)
    print(f"trained {cfg.model.preset}: clean_acc={clean:.4f}"
          + (f" adv_acc={adv:.4f}" if adv is not None else ""))
    print(f"model -> {model_path}")
    print(f"report -> {report_path}")
    return 0


def cmd_certify(args) -> int:
    cfg = load_config(args.config, args.set)
    out = _out_dir(args)
    model = nn.load_model(args.model)
    data = _load_dataset(cfg)
    cert = _splits(cfg, data).cert_set
    if cert is None:
        raise ConfigError("certify needs a non-empty certification split")
    recs = [reports.cert_header(nn.model_hash(model), cert.name,
                                cfg.certify.eps_list, cfg.certify.clip)]
    table = []
    for eps in cfg.certify.eps_list:
        for i in range(len(cert)):
            v = zono_certify(model, cert.images[i], int(cert.labels[i]), eps,
                             clip=cfg.certify.clip)
            recs.append(reports.cert_point(eps, i, int(cert.labels[i]), v))
        acc, loss = certified_stats(model, cert, eps, clip=cfg.certify.clip,
                                    threads=cfg.threads)
        recs.append(reports.cert_summary(eps, acc, loss))
        table.append((eps, acc, loss))
    report_path = out / "cert_report.jsonl"
    reports.write_jsonl(report_path, recs)
    print(f"{'eps':>8}  {'cert_acc':>8}  {'mean_loss':>12}")
    for eps, acc, loss in table:
        print(f"{eps:>8.4f}  {acc:>8.4f}  {loss:>12.6g}")
    print(f"report -> {report_path}")
    return 0


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, args.set)
    out = _out_dir(args)
    data = _load_dataset(cfg)
    splits = _splits(cfg, data)
    fed = cfg.federation
    if fed.init_model is not None:
        initial = nn.load_model(fed.init_model)
    else:
        initial = _fresh_model(cfg, data)
    local_train = nn.TrainConfig(learning_rate=fed.local_learning_rate,
                                 batch_size=cfg.train.batch_size,
                                 epochs=fed.local_epochs, rng_seed=cfg.train.rng_seed)
    sim_cfg = SimulationConfig(
        rounds=fed.rounds, quorum_size=fed.quorum_size, num_clients=fed.num_clients,
        num_malicious=fed.num_malicious, local_train=local_train, local_pgd=cfg.pgd,
        gate=cfg.gate, master_seed=cfg.seed, warmup_rounds=fed.warmup_rounds,
        attack=build_attack_plan(cfg), population_seed=fed.population_seed,
        threads=cfg.threads)
    result = run_simulation(initial, splits, sim_cfg)
    echo = dict(cfg.echo)
    echo.setdefault("splits", {})
    echo["splits"] = {"cert_n": cfg.splits.cert_n, "val_n": cfg.splits.val_n,
                      "total": len(data)}
    recs = [reports.sim_header(echo)]
    recs += [reports.sim_round(r) for r in result.records]
    recs.append(reports.sim_summary(result.records, nn.model_hash(result.final_model)))
    report_path = out / "rounds.jsonl"
    reports.write_jsonl(report_path, recs)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    for r, model in result.accepted_models.items():
        nn.save_model(model, ckpt_dir / f"round_{r:03d}.npz")
    nn.save_model(result.final_model, out / "final_model.npz")
    accepted = sum(1 for r in result.records if r.verdict.accepted)
    print(f"{len(result.records)} rounds, {accepted} accepted")
    for r in result.records:
        mark = "A" if r.verdict.accepted else f"R({r.verdict.reason})"
        armed = " armed" if r.attack_armed else ""
        print(f"  round {r.round_index:>3}: {mark}{armed} "
              f"normal={r.metrics.normal_acc:.3f} adv={r.metrics.adv_acc:.3f} "
              + (f"cert={r.metrics.certified_acc:.3f} loss={r.metrics.mean_cert_loss:.4g}"
                 if r.metrics.certified_acc is not None else ""))
    print(f"report -> {report_path}")
    return 0


def cmd_attack(args) -> int:
    cfg = load_config(args.config, args.set)
    out = _out_dir(args)
    if cfg.attack.kind == "none":
        raise ConfigError("attack.kind is 'none'; nothing to run")
    model = nn.load_model(args.model)
    data = _load_dataset(cfg)
    splits = _splits(cfg, data)
    pool = splits.client_pool
    n_attacker = max(1, int(cfg.attack.data_fraction * len(pool)))
    attacker_data = pool.take(np.arange(n_attacker), name=f"{pool.name}/attacker")
    recs = [reports.attack_header(cfg.attack.kind, nn.model_hash(model), cfg.echo)]
    if cfg.attack.kind == "backdoor":
        attacked = attacks.backdoor_attack(model, attacker_data, cfg.attack.backdoor,
                                           cfg.pgd, cfg.train)
        success = attacks.trigger_success_rate(attacked, splits.validation,
                                               cfg.attack.backdoor)
        clean = nn.accuracy(attacked, splits.validation)
        recs.append({"record": "attack_summary", "trigger_success": success,
                     "clean_acc": clean, "output_model_hash": nn.model_hash(attacked)})
        print(f"backdoor: trigger_success={success:.3f} clean_acc={clean:.3f}")
    elif cfg.attack.kind == "distill":
        attacked = attacks.distill(attacker_data, cfg.attack.distill, model)
        clean = nn.accuracy(attacked, splits.validation)
        recs.append({"record": "attack_summary", "clean_acc": clean,
                     "output_model_hash": nn.model_hash(attacked)})
        print(f"distill: clean_acc={clean:.3f}")
    else:
        if splits.cert_set is None:
            raise ConfigError("adaptive attack needs a certification split")
        if args.refine_input:
            # refine the given model as-is, maintaining its own hard-label fit
            result = attacks.adaptive_attack(model, splits.cert_set, cfg.attack.adaptive,
                                             attacker_data=attacker_data)
        else:
            dist = attacks.distill_full(attacker_data, cfg.attack.distill, model)
            result = attacks.adaptive_attack(dist.student, splits.cert_set,
                                             cfg.attack.adaptive, teacher=dist.teacher,
                                             temperature=cfg.attack.distill.temperature,
                                             attacker_data=attacker_data)
        attacked = result.model
        recs += [reports.attack_iter(row) for row in result.log]
        recs.append(reports.attack_summary(result, nn.model_hash(attacked)))
        state = "converged" if result.converged else "stalled"
        print(f"adaptive: {state} eps_reached={result.eps_reached} "
              f"points_matched={result.points_matched} iters={len(result.log)}")
    model_path = out / "attacked_model.npz"
    nn.save_model(attacked, model_path)
    report_path = out / "attack_log.jsonl"
    reports.write_jsonl(report_path, recs)
    print(f"model -> {model_path}")
    print(f"report -> {report_path}")
    return 0


def cmd_validate_report(args) -> int:
    problems = reports.validate_report(args.report)
    if problems:
        for p in problems:
            print(p, file=sys.stderr)
        return 2
    print(f"{args.report}: ok")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedcert",
                                description="certified federated adversarial training sandbox")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="YAML experiment config")
        sp.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                        help="override a scalar config field (repeatable)")
        sp.add_argument("--out", default=None,
                        help="output directory (default $FEDCERT_OUT_DIR or .)")

    sp = sub.add_parser("train", help="train a model centrally (plain or PGD)")
    common(sp)
    sp.add_argument("--model-name", default=None, help="output model file name")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("certify", help="certify a model over the certification split")
    common(sp)
    sp.add_argument("model", help="model file (.npz)")
    sp.set_defaults(func=cmd_certify)

    sp = sub.add_parser("simulate", help="run the federated protocol")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("attack", help="run the configured attack against a model")
    common(sp)
    sp.add_argument("model", help="model file (.npz)")
    sp.add_argument("--refine-input", action="store_true",
                    help="adaptive: refine the given model instead of a fresh distilled one")
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("validate-report", help="re-check a report's internal consistency")
    sp.add_argument("report", help="report file (.jsonl)")
    sp.set_defaults(func=cmd_validate_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, InputError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
