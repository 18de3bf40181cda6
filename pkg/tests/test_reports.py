"""Report serialization and the internal-consistency validator."""

import json

import numpy as np
import pytest

from fedcert import federation as fed, reports, zonotope as zt
from fedcert.errors import FormatError


def test_jsonl_round_trip(tmp_path):
    p = tmp_path / "r.jsonl"
    recs = [{"record": "header", "a": 1}, {"record": "x", "b": [1.5, None]}]
    reports.write_jsonl(p, recs)
    assert reports.read_jsonl(p) == recs


def test_read_jsonl_rejects_bad_lines(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"record": "header"}\nnot json\n')
    with pytest.raises(FormatError):
        reports.read_jsonl(p)
    p.write_text("[1, 2]\n")
    with pytest.raises(FormatError):
        reports.read_jsonl(p)
    p.write_text("")
    with pytest.raises(FormatError):
        reports.read_jsonl(p)


def test_strip_timing_removes_only_wall_time():
    recs = [{"a": 1, "wall_time": 0.5}, {"b": 2}]
    out = reports.strip_timing(recs)
    assert out == [{"a": 1}, {"b": 2}]
    assert recs[0]["wall_time"] == 0.5  # original untouched


# ---------------------------------------------------------------------------
# certify reports


def fake_verdict(certified, pred, loss):
    return zt.CertVerdict(certified=certified, predicted_label=pred,
                          logit_bounds=zt.IntervalBox(np.array([0.0, -1.0]),
                                                      np.array([1.0, 0.5])),
                          cert_loss=loss)


def certify_records():
    recs = [reports.cert_header("abc", "synth", [0.01, 0.02], (0.0, 1.0))]
    pts = {0.01: [(0, 0, True, 0.0), (1, 1, False, 0.3)],
           0.02: [(0, 0, False, 0.1), (1, 1, False, 0.5)]}
    for eps, rows in pts.items():
        for idx, label, cert, loss in rows:
            recs.append(reports.cert_point(eps, idx, label,
                                           fake_verdict(cert, label, loss)))
        acc = sum(1 for r in rows if r[2]) / len(rows)
        mean = sum(r[3] for r in rows) / len(rows)
        recs.append(reports.cert_summary(eps, acc, mean))
    return recs


def test_certify_report_validates_clean(tmp_path):
    p = tmp_path / "cert.jsonl"
    reports.write_jsonl(p, certify_records())
    assert reports.validate_report(p) == []


def test_certify_report_catches_summary_mismatch(tmp_path):
    recs = certify_records()
    for r in recs:
        if r["record"] == "summary" and r["eps"] == 0.01:
            r["certified_acc"] = 0.9
    p = tmp_path / "cert.jsonl"
    reports.write_jsonl(p, recs)
    problems = reports.validate_report(p)
    assert any("certified_acc summary mismatch" in m for m in problems)


def test_certify_report_catches_certified_wrong_prediction(tmp_path):
    recs = certify_records()
    for r in recs:
        if r["record"] == "point" and r["eps"] == 0.01 and r["index"] == 0:
            r["predicted_label"] = 1  # certified but mispredicts
    p = tmp_path / "cert.jsonl"
    reports.write_jsonl(p, recs)
    problems = reports.validate_report(p)
    assert any("predicted wrong class" in m for m in problems)
    assert any("summary mismatch" in m for m in problems)


def test_certify_report_catches_nonmonotone_eps(tmp_path):
    recs = certify_records()
    for r in recs:
        if r["record"] == "summary" and r["eps"] == 0.02:
            r["certified_acc"] = 1.0  # higher than at 0.01
            r["mean_cert_loss"] = 0.0
    # keep summaries self-consistent with tampered points
    recs = [r for r in recs if not (r["record"] == "point" and r["eps"] == 0.02)]
    p = tmp_path / "cert.jsonl"
    reports.write_jsonl(p, recs)
    problems = reports.validate_report(p)
    assert any("certified_acc increased" in m for m in problems)
    assert any("mean_cert_loss decreased" in m for m in problems)


def test_certify_report_requires_summary_coverage(tmp_path):
    recs = [r for r in certify_records()
            if not (r["record"] == "summary" and r["eps"] == 0.02)]
    p = tmp_path / "cert.jsonl"
    reports.write_jsonl(p, recs)
    problems = reports.validate_report(p)
    assert any("do not cover" in m for m in problems)


# ---------------------------------------------------------------------------
# simulate reports


def sim_records(tamper=None):
    header = reports.sim_header({
        "gate": {"acc_retain_fraction": 0.9, "loss_band_fraction": 0.1,
                 "use_cert_checks": True},
        "warmup_rounds": 1,
        "splits": {"cert_n": 8, "val_n": 12, "total": 90},
    })
    mk = lambda i, n, a, c, l, acc, reason, mal=0, armed=False: fed.RoundRecord(
        round_index=i, quorum=[0, 1, 2], num_malicious_in_quorum=mal,
        attack_armed=armed,
        metrics=fed.RoundMetrics(normal_acc=n, adv_acc=a, certified_acc=c,
                                 mean_cert_loss=l),
        verdict=fed.GateVerdict(accepted=acc, reason=reason),
        model_hash=f"h{i}")
    rows = [
        mk(1, 0.95, 0.90, 0.5, 0.20, True, "baseline"),
        mk(2, 0.96, 0.89, 0.5, 0.21, True, None),
        mk(3, 0.96, 0.90, 0.1, 5.00, False, "certified_acc", mal=2, armed=True),
        mk(4, 0.97, 0.91, 0.5, 0.22, True, None),
    ]
    recs = [header] + [reports.sim_round(r) for r in rows]
    recs.append(reports.sim_summary(rows, "h4"))
    if tamper:
        tamper(recs)
    return recs


def test_simulate_report_validates_clean(tmp_path):
    p = tmp_path / "sim.jsonl"
    reports.write_jsonl(p, sim_records())
    assert reports.validate_report(p) == []


def test_simulate_report_checks_gate_arithmetic(tmp_path):
    def tamper(recs):
        for r in recs:
            if r.get("round") == 3:
                r["reason"] = "cert_loss"  # wrong first-failure name
    p = tmp_path / "sim.jsonl"
    reports.write_jsonl(p, sim_records(tamper))
    problems = reports.validate_report(p)
    assert any("rejected with reason" in m for m in problems)


def test_simulate_report_catches_wrongly_accepted_round(tmp_path):
    def tamper(recs):
        for r in recs:
            if r.get("round") == 3:
                r["accepted"] = True
                r["reason"] = None
        for r in recs:
            if r.get("record") == "sim_summary":
                r["accepted_rounds"] = 4
                r["rejected_rounds"] = 0
    p = tmp_path / "sim.jsonl"
    reports.write_jsonl(p, sim_records(tamper))
    problems = reports.validate_report(p)
    assert any("accepted but fails" in m for m in problems)


def test_simulate_report_checks_summary_counts(tmp_path):
    def tamper(recs):
        for r in recs:
            if r.get("record") == "sim_summary":
                r["accepted_rounds"] = 0
    p = tmp_path / "sim.jsonl"
    reports.write_jsonl(p, sim_records(tamper))
    problems = reports.validate_report(p)
    assert any("accepted_rounds mismatch" in m for m in problems)


def test_simulate_report_checks_baseline_round(tmp_path):
    def tamper(recs):
        for r in recs:
            if r.get("round") == 1:
                r["reason"] = None
    p = tmp_path / "sim.jsonl"
    reports.write_jsonl(p, sim_records(tamper))
    problems = reports.validate_report(p)
    assert any("baseline accept" in m for m in problems)


def test_simulate_report_checks_split_sanity(tmp_path):
    def tamper(recs):
        recs[0]["config"]["splits"] = {"cert_n": 50, "val_n": 50, "total": 90}
    p = tmp_path / "sim.jsonl"
    reports.write_jsonl(p, sim_records(tamper))
    problems = reports.validate_report(p)
    assert any("no client pool" in m for m in problems)


# ---------------------------------------------------------------------------
# attack reports


def attack_records(tamper=None):
    from fedcert.attacks import AdaptiveLogRow, AdaptiveResult

    log = [AdaptiveLogRow(iteration=i, eps=0.01 * (1 + i // 2), subset_certified=i,
                          mean_cert_loss=1.0 / (i + 1), distill_loss=0.5,
                          wall_time=0.1 * i)
           for i in range(1, 5)]
    result = AdaptiveResult(model=None, converged=True, eps_reached=0.02,
                            points_matched=4, wall_time=1.0, log=log)
    recs = [reports.attack_header("adaptive", "abc", {"target_eps": 0.02})]
    recs += [reports.attack_iter(r) for r in log]
    recs.append(reports.attack_summary(result, "def"))
    if tamper:
        tamper(recs)
    return recs


def test_attack_report_validates_clean(tmp_path):
    p = tmp_path / "atk.jsonl"
    reports.write_jsonl(p, attack_records())
    assert reports.validate_report(p) == []


def test_attack_report_catches_eps_decrease(tmp_path):
    def tamper(recs):
        recs[2]["eps"] = 0.5
    p = tmp_path / "atk.jsonl"
    reports.write_jsonl(p, attack_records(tamper))
    problems = reports.validate_report(p)
    assert any("eps decreased" in m for m in problems)


def test_attack_report_strip_timing_stabilizes(tmp_path):
    a = reports.strip_timing(attack_records())
    recs = attack_records()
    for r in recs:
        if "wall_time" in r:
            r["wall_time"] += 17.0
    b = reports.strip_timing(recs)
    assert a == b


# ---------------------------------------------------------------------------
# header checks


def test_validator_rejects_missing_header(tmp_path):
    p = tmp_path / "x.jsonl"
    reports.write_jsonl(p, [{"record": "point"}])
    assert any("must be a header" in m for m in reports.validate_report(p))


def test_validator_rejects_unknown_kind_and_version(tmp_path):
    p = tmp_path / "x.jsonl"
    reports.write_jsonl(p, [{"record": "header", "report": "mystery",
                             "schema_version": reports.SCHEMA_VERSION}])
    assert any("unknown report kind" in m for m in reports.validate_report(p))
    reports.write_jsonl(p, [{"record": "header", "report": "train",
                             "schema_version": 99}])
    assert any("schema_version" in m for m in reports.validate_report(p))


def test_train_report_validation(tmp_path):
    p = tmp_path / "t.jsonl"
    reports.write_jsonl(p, [reports.train_header({"epochs": 1}),
                            reports.train_summary("abc", 0.9, 0.5)])
    assert reports.validate_report(p) == []
    reports.write_jsonl(p, [reports.train_header({}),
                            reports.train_summary("abc", 1.5, None)])
    assert any("clean_acc" in m for m in reports.validate_report(p))
