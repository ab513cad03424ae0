import csv
import json
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from akid.tuner import (
    RenderError,
    SlotPool,
    TemplateParseError,
    TuneSpec,
    check_trace,
    expand,
    parse_placeholder,
    render,
    run,
)

from conftest import CONFIG_DIR

NET = [
    {"activation": [{"type": "relu"}] * 4, "bn": True},
    {"activation": [{"type": "maxout", "group_size": 2}] * 3 + [{"type": "maxout", "group_size": 5}], "bn": True},
]
OPT = [{"lr": 0.025}, {"lr": 0.05}]


def test_render_examples():
    assert render('{"bn": {{ net_paras["bn"] }}}', {"bn": True}, {}) == '{"bn": true}'
    assert render("lr={{ opt_paras['lr'] }}", {}, {"lr": 0.05}) == "lr=0.05"
    assert render('a={{net_paras["activation"][1]}}', NET[1], {}) == 'a={"type": "maxout", "group_size": 2}'
    assert render("no placeholders {here}", {}, {}) == "no placeholders {here}"


def test_render_errors():
    with pytest.raises(RenderError, match=r'net_paras\["activation"\]\[9\]'):
        render('{{ net_paras["activation"][9] }}', NET[0], {})
    with pytest.raises(RenderError, match="opt_paras"):
        render('{{ opt_paras["momentum"] }}', {}, OPT[0])
    for bad in ["{{ net_paras }}", "{{ foo['x'] }}", "{{ net_paras[x] }}", "{{ net_paras['a'] + 1 }}"]:
        with pytest.raises(TemplateParseError):
            render(bad, {}, {})


def test_parse_placeholder():
    assert parse_placeholder(' net_paras["a"][0]["b"] ') == ("net_paras", ["a", 0, "b"])


def test_expand_counts_and_order():
    jobs = expand(TuneSpec("x", NET, OPT))
    assert [j.id for j in jobs] == ["net0_opt0", "net0_opt1", "net1_opt0", "net1_opt1"]
    assert len(expand(TuneSpec("x", [{}], [{}]))) == 1
    ids = [j.id for j in expand(TuneSpec("x", [{}] * 3, [{}] * 2))]
    assert ids == ["net0_opt0", "net0_opt1", "net1_opt0", "net1_opt1", "net2_opt0", "net2_opt1"]


def test_heterogeneous_records_fail_per_job():
    spec = TuneSpec('{{ net_paras["depth"] }}', [{"depth": 2}, {"width": 3}], [{}])
    jobs = expand(spec)
    assert jobs[0].render_error is None and jobs[0].config_text == "2"
    assert "depth" in jobs[1].render_error


def test_spec_validation():
    with pytest.raises(ValueError):
        TuneSpec("x", [], OPT)
    with pytest.raises(ValueError):
        TuneSpec("x", NET, OPT, num_slots=0)


def sleeper(duration=0.03, fail=()):
    active = {"now": 0, "peak": 0}
    lock = threading.Lock()

    def runner(job, slot, job_dir):
        with lock:
            active["now"] += 1
            active["peak"] = max(active["peak"], active["now"])
        time.sleep(duration)
        with lock:
            active["now"] -= 1
        if job.id in fail:
            raise RuntimeError("boom")
        return {"train_loss": float(job.net_index + job.opt_index)}

    return runner, active


def test_run_two_slots(tmp_path):
    runner, active = sleeper()
    report = run(TuneSpec("{}", NET, OPT, num_slots=2, results_dir=str(tmp_path)), runner, run_id="r1")
    assert [j["id"] for j in report.jobs] == ["net0_opt0", "net0_opt1", "net1_opt0", "net1_opt1"]
    assert all(j["status"] == "ok" for j in report.jobs)
    assert 1 <= report.peak_concurrency <= 2 and active["peak"] <= 2
    assert {j["slot"] for j in report.jobs} <= {0, 1}
    check_trace(report.trace, 2)
    saved = json.loads((tmp_path / "r1" / "report.json").read_text())
    assert len(saved["jobs"]) == 4
    rows = dict(csv.reader(open(tmp_path / "r1" / "net1_opt1" / "summary.csv")))
    assert rows["status"] == "ok" and float(rows["metric/train_loss"]) == 2.0


def test_single_job_gets_slot_zero(tmp_path):
    runner, _ = sleeper(0.0)
    report = run(TuneSpec("{}", [{}], [{}], num_slots=4, results_dir=str(tmp_path)), runner)
    assert report.jobs[0]["slot"] == 0


def test_one_slot_is_serial(tmp_path):
    runner, active = sleeper(0.01)
    report = run(TuneSpec("{}", NET, OPT, num_slots=1, results_dir=str(tmp_path)), runner)
    assert active["peak"] == 1
    events = [e.event for e in report.trace if e.event in ("job_start", "job_end")]
    assert events == ["job_start", "job_end"] * 4


def test_failed_job_does_not_stop_others(tmp_path):
    runner, _ = sleeper(0.0, fail={"net0_opt1"})
    report = run(TuneSpec("{}", NET, OPT, num_slots=2, results_dir=str(tmp_path)), runner)
    status = {j["id"]: j["status"] for j in report.jobs}
    assert status == {"net0_opt0": "ok", "net0_opt1": "failed", "net1_opt0": "ok", "net1_opt1": "ok"}
    assert "boom" in report.failed[0]["error"]
    check_trace(report.trace, 2)


@settings(max_examples=15, deadline=None)
@given(slots=st.integers(1, 4), n_net=st.integers(1, 3), n_opt=st.integers(1, 3))
def test_trace_invariants_hold(tmp_path_factory, slots, n_net, n_opt):
    runner, active = sleeper(0.002)
    spec = TuneSpec("{}", [{}] * n_net, [{}] * n_opt, num_slots=slots, results_dir=str(tmp_path_factory.mktemp("t")))
    report = run(spec, runner)
    check_trace(report.trace, slots)
    assert active["peak"] <= slots
    assert sorted(e.job for e in report.trace if e.event == "job_start") == sorted(j["id"] for j in report.jobs)


def test_check_trace_catches_violations():
    pool = SlotPool(1)
    slot = pool.acquire("a")
    pool._log("job_start", "a", slot)
    pool._log("job_end", "a", slot)
    pool.release("a", slot)
    check_trace(pool.trace, 1)
    broken = list(pool.trace)
    broken.insert(3, broken[3])  # job starts twice
    with pytest.raises(AssertionError):
        check_trace(broken, 1)
    with pytest.raises(AssertionError):
        check_trace(pool.trace[:-1], 1)


def test_bundled_example_trains_in_process(tmp_path):
    spec = TuneSpec.from_file(CONFIG_DIR / "tune_example.json")
    spec.results_dir = str(tmp_path)
    report = run(spec)
    assert len(report.jobs) == 4
    assert not report.failed, report.failed
    for job in report.jobs:
        assert (tmp_path / report.run_id / job["id"] / "scalars.csv").exists()
        assert 0.0 <= job["metrics"]["val_accuracy"] <= 1.0
