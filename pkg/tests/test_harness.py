import json
import math

import pytest

from conftest import tiny_config
from fsaudit.config import DefenseConfig
from fsaudit.errors import ConfigurationError, StageError
from fsaudit.harness import (
    REPORT_NAMES, ResultRecord, TransferMatrix, clear_caches, read_jsonl, repetition_seeds, replay, run_audit,
    run_repetition, run_robustness, run_sweep, run_transfer, write_jsonl,
)
from fsaudit.synthetic import SyntheticSpec


@pytest.fixture(scope="module")
def proto_record():
    return run_audit(tiny_config(architecture="proto"))


def _metrics(rec: ResultRecord):
    return {n: rec.reports[n].runs for n in REPORT_NAMES}


def test_record_contents(proto_record):
    r = proto_record
    assert len(r.seeds) == 2 and len(r.train_acc) == 2
    assert r.overfitting == [a - b for a, b in zip(r.train_acc, r.test_acc)]
    for n in REPORT_NAMES:
        for run in r.reports[n].runs:
            assert all(0.0 <= v <= 1.0 for v in run.values())
    assert r.extras["feature_dim"] == 4
    assert r.config["architecture"] == "proto" and r.wall_clock > 0


def test_rerun_is_identical_without_caches(proto_record):
    clear_caches()
    again = run_audit(tiny_config(architecture="proto"))
    assert _metrics(again) == _metrics(proto_record)
    assert again.train_acc == proto_record.train_acc and again.seeds == proto_record.seeds


def test_replay_from_jsonl(proto_record, tmp_path):
    path = write_jsonl([proto_record, proto_record], tmp_path / "r.jsonl")
    assert len(path.read_text().splitlines()) == 2
    back = read_jsonl(path)[0]
    assert back.to_dict() == json.loads(json.dumps(proto_record.to_dict()))
    clear_caches()
    replayed = replay(back)
    for n in REPORT_NAMES:
        for a, b in zip(replayed.reports[n].runs, back.reports[n].runs):
            assert all(abs(a[k] - b[k]) <= 1e-9 for k in a)


def test_repetition_seeds_follow_master_seed():
    assert repetition_seeds(tiny_config(seed=1)) != repetition_seeds(tiny_config(seed=2))
    assert repetition_seeds(tiny_config(seed=1, repetitions=3))[:2] == repetition_seeds(tiny_config(seed=1))


def test_stage_error_names_stage_and_seed():
    cfg = tiny_config(architecture="proto", shots=20)
    with pytest.raises(StageError) as err:
        run_repetition(cfg, cfg, 77)
    assert err.value.stage == "shadow-train" and err.value.seed == 77
    assert "shadow-train" in str(err.value) and "77" in str(err.value)


def test_query_sweep_feature_lengths():
    spec = SyntheticSpec(n_users=12, n_images=30, size=16, seed=0)
    cfg = tiny_config(architecture="proto", synthetic=spec, min_images=30, keep_images=30, repetitions=1)
    recs = run_sweep(cfg, "queries", [1, 3, 5, 10])
    assert [r.label for r in recs] == [f"sweep:queries={q}" for q in (1, 3, 5, 10)]
    assert all(r.error is None for r in recs)
    assert [r.extras["feature_dim"] for r in recs] == [2, 6, 10, 20]
    assert len({tuple(r.seeds) for r in recs}) == 1


def test_sweep_records_infeasible_values_and_continues():
    recs = run_sweep(tiny_config(architecture="proto", repetitions=1), "ways", [2, 5, 10])
    assert [r.config["k"] for r in recs] == [2, 5, 10]
    assert recs[0].error is None
    assert recs[2].error is not None and not recs[2].reports
    with pytest.raises(ConfigurationError):
        run_sweep(tiny_config(), "depth", [1])


def test_model_transfer_rejects_siamese():
    with pytest.raises(ConfigurationError, match="pair"):
        run_transfer(tiny_config(), "model", ["siamese", "proto"])


def test_model_transfer_matrix(tmp_path):
    m = run_transfer(tiny_config(repetitions=1), "model", ["proto", "relation"])
    assert [[c.label for c in row] for row in m.cells] == [
        ["transfer:model:proto->proto", "transfer:model:proto->relation"],
        ["transfer:model:relation->proto", "transfer:model:relation->relation"],
    ]
    off = m.cells[0][1]
    assert off.shadow_config["architecture"] == "proto" and off.config["architecture"] == "relation"
    diag = run_audit(tiny_config(repetitions=1, architecture="relation"))
    assert _metrics(m.cells[1][1]) == _metrics(diag)
    back = TransferMatrix.from_dict(json.loads(json.dumps(m.to_dict())))
    assert back.to_dict() == json.loads(json.dumps(m.to_dict()))


def test_dataset_transfer_labels():
    other = {"synthetic": SyntheticSpec(n_users=12, n_images=12, size=16, seed=1).to_dict()}
    m = run_transfer(tiny_config(architecture="proto", repetitions=1), "dataset", [("a", {}), ("b", other)])
    assert m.shadow_labels == ["a", "b"]
    assert m.cells[0][1].shadow_config["synthetic"]["seed"] == 0
    assert m.cells[0][1].config["synthetic"]["seed"] == 1
    assert all(math.isfinite(m.report(i, j).mean["auc"]) for i in range(2) for j in range(2))


def test_robustness_deltas_and_isolation():
    cfg = tiny_config(architecture="proto")
    variants = [("baseline", DefenseConfig()), ("output_noise:0.1", DefenseConfig(output_noise=0.1)),
                ("dp:bogus", DefenseConfig(dp="low", dp_clip=-1.0)), ("memguard", DefenseConfig(memguard=True))]
    recs = run_robustness(cfg, variants)
    base = run_audit(cfg, "robustness:proto:baseline")
    assert _metrics(recs[0]) == _metrics(base)
    noisy = recs[1]
    assert noisy.extras["auc_drop"] == [
        b["auc"] - r["auc"] for b, r in zip(recs[0].primary.runs, noisy.primary.runs)
    ]
    assert len(noisy.extras["target_acc_drop"]) == 2
    assert recs[2].error is not None
    assert recs[3].error is None and recs[3].extras["memguard_applied"] > 0


def test_robustness_baseline_always_first():
    recs = run_robustness(tiny_config(architecture="proto", repetitions=1),
                          [("output_noise:0.05", DefenseConfig(output_noise=0.05))])
    assert [r.label.split(":", 2)[2] for r in recs] == ["baseline", "output_noise:0.05"]


def test_dp_run_logs_accuracy_and_budget():
    recs = run_robustness(tiny_config(architecture="proto", repetitions=1), [("dp:high", DefenseConfig(dp="high"))])
    dp = recs[1]
    assert dp.error is None and "dp" in dp.extras
    assert len(dp.extras["target_acc_drop"]) == 1
