"""Line-delimited JSON reports and their validator.

Every run emits one .jsonl file whose first record is a header naming
the report kind and echoing the inputs that produced it.  The validator
re-checks internal consistency (summary rows against per-point rows,
monotonicity across radii, gate arithmetic) without recomputing any
model evaluation, so it runs in milliseconds.

Timing fields (wall_time) are measurements, not results; consumers that
compare reports for reproducibility must ignore them.  strip_timing()
does exactly that.
"""

from __future__ import annotations

import json

from .errors import FormatError

SCHEMA_VERSION = 1
TIMING_KEYS = ("wall_time",)


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{ln}: not valid JSON: {exc}") from exc
            if not isinstance(rec, dict):
                raise FormatError(f"{path}:{ln}: expected an object per line")
            records.append(rec)
    if not records:
        raise FormatError(f"{path}: empty report")
    return records


def strip_timing(records: list[dict]) -> list[dict]:
    """Copy with wall-clock measurement fields removed, for bitwise
    comparison of two runs."""
    out = []
    for rec in records:
        out.append({k: v for k, v in rec.items() if k not in TIMING_KEYS})
    return out


# ---------------------------------------------------------------------------
# emitters


def cert_header(model_hash: str, dataset: str, eps_list, clip) -> dict:
    return {"record": "header", "report": "certify", "schema_version": SCHEMA_VERSION,
            "model_hash": model_hash, "dataset": dataset,
            "eps_list": [float(e) for e in eps_list],
            "clip": list(clip) if clip is not None else None}


def cert_point(eps: float, index: int, true_label: int, verdict) -> dict:
    return {"record": "point", "eps": float(eps), "index": int(index),
            "true_label": int(true_label),
            "predicted_label": int(verdict.predicted_label),
            "certified": bool(verdict.certified),
            "cert_loss": float(verdict.cert_loss),
            "logit_lower": [float(v) for v in verdict.logit_bounds.lower],
            "logit_upper": [float(v) for v in verdict.logit_bounds.upper]}


def cert_summary(eps: float, certified_acc: float, mean_cert_loss: float) -> dict:
    return {"record": "summary", "eps": float(eps),
            "certified_acc": float(certified_acc),
            "mean_cert_loss": float(mean_cert_loss)}


def sim_header(config_echo: dict) -> dict:
    return {"record": "header", "report": "simulate", "schema_version": SCHEMA_VERSION,
            "config": config_echo}


def sim_round(rec) -> dict:
    m = rec.metrics
    return {"record": "round", "round": int(rec.round_index),
            "quorum": [int(c) for c in rec.quorum],
            "num_malicious_in_quorum": int(rec.num_malicious_in_quorum),
            "attack_armed": bool(rec.attack_armed),
            "normal_acc": float(m.normal_acc), "adv_acc": float(m.adv_acc),
            "certified_acc": None if m.certified_acc is None else float(m.certified_acc),
            "mean_cert_loss": None if m.mean_cert_loss is None else float(m.mean_cert_loss),
            "accepted": bool(rec.verdict.accepted),
            "reason": rec.verdict.reason,
            "model_hash": rec.model_hash}


def sim_summary(records, final_hash: str) -> dict:
    accepted = [r for r in records if r.verdict.accepted]
    return {"record": "sim_summary",
            "rounds": len(records), "accepted_rounds": len(accepted),
            "rejected_rounds": len(records) - len(accepted),
            "final_model_hash": final_hash}


def attack_header(kind: str, model_hash: str, config_echo: dict) -> dict:
    return {"record": "header", "report": "attack", "schema_version": SCHEMA_VERSION,
            "kind": kind, "input_model_hash": model_hash, "config": config_echo}


def attack_iter(row) -> dict:
    return {"record": "iteration", "iteration": int(row.iteration), "eps": float(row.eps),
            "subset_certified": int(row.subset_certified),
            "mean_cert_loss": float(row.mean_cert_loss),
            "distill_loss": float(row.distill_loss),
            "wall_time": float(row.wall_time)}


def attack_summary(result, output_hash: str) -> dict:
    return {"record": "attack_summary", "converged": bool(result.converged),
            "eps_reached": None if result.eps_reached is None else float(result.eps_reached),
            "points_matched": int(result.points_matched),
            "iterations": len(result.log),
            "wall_time": float(result.wall_time),
            "output_model_hash": output_hash}


def train_header(config_echo: dict) -> dict:
    return {"record": "header", "report": "train", "schema_version": SCHEMA_VERSION,
            "config": config_echo}


def train_summary(model_hash: str, clean_acc: float, adv_acc: float | None) -> dict:
    return {"record": "train_summary", "model_hash": model_hash,
            "clean_acc": float(clean_acc),
            "adv_acc": None if adv_acc is None else float(adv_acc)}


# ---------------------------------------------------------------------------
# validation


def _require(cond: bool, issues: list, msg: str) -> None:
    if not cond:
        issues.append(msg)


def _validate_certify(records: list[dict], issues: list) -> None:
    header = records[0]
    eps_list = header.get("eps_list", [])
    points: dict[float, list[dict]] = {}
    summaries: dict[float, dict] = {}
    for rec in records[1:]:
        if rec.get("record") == "point":
            points.setdefault(rec["eps"], []).append(rec)
        elif rec.get("record") == "summary":
            _require(rec["eps"] not in summaries, issues,
                     f"duplicate summary for eps {rec['eps']}")
            summaries[rec["eps"]] = rec
        else:
            issues.append(f"unexpected record kind {rec.get('record')!r}")
    _require(sorted(summaries) == sorted(set(eps_list)), issues,
             "summaries do not cover the declared eps list")
    for eps, rows in points.items():
        summ = summaries.get(eps)
        if summ is None:
            issues.append(f"points for eps {eps} lack a summary row")
            continue
        n = len(rows)
        hits = sum(1 for r in rows
                   if r["certified"] and r["predicted_label"] == r.get("true_label"))
        mean_loss = sum(r["cert_loss"] for r in rows) / n
        _require(abs(summ["certified_acc"] - hits / n) < 1e-12, issues,
                 f"certified_acc summary mismatch at eps {eps}")
        _require(abs(summ["mean_cert_loss"] - mean_loss) < 1e-9, issues,
                 f"mean_cert_loss summary mismatch at eps {eps}")
        for r in rows:
            _require(not r["certified"] or r["predicted_label"] == r.get("true_label"),
                     issues, f"certified point {r['index']} at eps {eps} predicted wrong class")
            _require(r["cert_loss"] >= 0, issues,
                     f"negative cert_loss at eps {eps} index {r['index']}")
            lo, up = r["logit_lower"], r["logit_upper"]
            _require(all(a <= b for a, b in zip(lo, up)), issues,
                     f"crossed logit bounds at eps {eps} index {r['index']}")
    ordered = sorted(summaries)
    for a, b in zip(ordered, ordered[1:]):
        _require(summaries[a]["certified_acc"] >= summaries[b]["certified_acc"] - 1e-12,
                 issues, f"certified_acc increased from eps {a} to {b}")
        _require(summaries[a]["mean_cert_loss"] <= summaries[b]["mean_cert_loss"] + 1e-9,
                 issues, f"mean_cert_loss decreased from eps {a} to {b}")


def _validate_simulate(records: list[dict], issues: list) -> None:
    header = records[0]
    gate = header.get("config", {}).get("gate", {})
    splits = header.get("config", {}).get("splits", {})
    if splits:
        cert_n = splits.get("cert_n", 0)
        val_n = splits.get("val_n", 0)
        total = splits.get("total", None)
        _require(val_n >= 1, issues, "validation split is empty")
        if total is not None:
            _require(cert_n + val_n < total, issues,
                     "splits leave no client pool (overlap or exhaustion)")
    rounds = [r for r in records[1:] if r.get("record") == "round"]
    summary = [r for r in records[1:] if r.get("record") == "sim_summary"]
    _require(len(summary) == 1, issues, "expected exactly one sim_summary")
    f = gate.get("acc_retain_fraction")
    band = gate.get("loss_band_fraction")
    use_cert = gate.get("use_cert_checks", True)
    warmup = header.get("config", {}).get("warmup_rounds", 1)
    last = None
    accepted_count = 0
    for rec in rounds:
        accepted = rec["accepted"]
        if rec["round"] <= warmup or last is None:
            _require(accepted and rec["reason"] == "baseline", issues,
                     f"round {rec['round']} should be a baseline accept")
        elif f is not None:
            checks = [("normal_acc", rec["normal_acc"] >= f * last["normal_acc"]),
                      ("adv_acc", rec["adv_acc"] >= f * last["adv_acc"])]
            if use_cert:
                checks.append(("certified_acc",
                               rec["certified_acc"] >= f * last["certified_acc"]))
                checks.append(("cert_loss",
                               abs(rec["mean_cert_loss"] - last["mean_cert_loss"])
                               <= band * last["mean_cert_loss"]))
            failed = [name for name, ok in checks if not ok]
            if accepted:
                _require(not failed, issues,
                         f"round {rec['round']} accepted but fails {failed}")
            else:
                _require(bool(failed) and rec["reason"] == failed[0], issues,
                         f"round {rec['round']} rejected with reason {rec['reason']!r}, "
                         f"recomputed {failed}")
        if accepted:
            last = rec
            accepted_count += 1
    if summary:
        _require(summary[0]["accepted_rounds"] == accepted_count, issues,
                 "sim_summary accepted_rounds mismatch")
        _require(summary[0]["rounds"] == len(rounds), issues,
                 "sim_summary round count mismatch")


def _validate_attack(records: list[dict], issues: list) -> None:
    iters = [r for r in records[1:] if r.get("record") == "iteration"]
    summary = [r for r in records[1:] if r.get("record") == "attack_summary"]
    _require(len(summary) == 1, issues, "expected exactly one attack_summary")
    last_eps = None
    for rec in iters:
        if last_eps is not None:
            _require(rec["eps"] >= last_eps, issues,
                     f"eps decreased at iteration {rec['iteration']}")
        last_eps = rec["eps"]
        _require(rec["subset_certified"] >= 0 and rec["mean_cert_loss"] >= 0, issues,
                 f"negative counters at iteration {rec['iteration']}")
    if summary:
        _require(summary[0]["iterations"] == len(iters), issues,
                 "attack_summary iteration count mismatch")


def _validate_train(records: list[dict], issues: list) -> None:
    summary = [r for r in records[1:] if r.get("record") == "train_summary"]
    _require(len(summary) == 1, issues, "expected exactly one train_summary")
    for s in summary:
        _require(0.0 <= s["clean_acc"] <= 1.0, issues, "clean_acc outside [0, 1]")


def validate_report(path) -> list[str]:
    """Returns a list of problems; empty means the report is consistent."""
    records = read_jsonl(path)
    header = records[0]
    issues: list[str] = []
    if header.get("record") != "header":
        return [f"{path}: first record must be a header"]
    if header.get("schema_version") != SCHEMA_VERSION:
        return [f"{path}: unsupported schema_version {header.get('schema_version')!r}"]
    kind = header.get("report")
    if kind == "certify":
        _validate_certify(records, issues)
    elif kind == "simulate":
        _validate_simulate(records, issues)
    elif kind == "attack":
        _validate_attack(records, issues)
    elif kind == "train":
        _validate_train(records, issues)
    else:
        issues.append(f"unknown report kind {kind!r}")
    return [f"{path}: {msg}" for msg in issues]
