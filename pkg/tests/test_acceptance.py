"""Acceptance criteria 1-10, one PASS/FAIL line each.

Run alone with ``pytest tests/test_acceptance.py -s`` (or ``python
tests/test_acceptance.py``) to see the lines as they are produced; they are
also repeated in the pytest terminal summary.
"""

import json
import time

import pytest

from cascade_lid import cli, verify
from cascade_lid.cascade import CascadeModel, full_config, toy_config
from cascade_lid.synthdata import GeneratorConfig, generate, split
from cascade_lid.training import TrainConfig, evaluate, train

# toy trend run (criterion 7)
TREND_UTTS = 2200
TREND_SPLIT = [2000 / 2200, 200 / 2200]
TREND_SEED = 11
TREND_TRAIN = TrainConfig()  # 16 epochs, linear decay to 0.1 x lr
TREND_BUDGET_S = 30 * 60
FRAME_ROWS = ("0", "5", "10", "inf")


def test_c01_rnnt_oracle_equivalence(report_line):
    res = verify.rnnt_equivalence(max_T=4, max_U=3, instances=20, tol=1e-6)
    ok = res.passed and res.seconds < 10
    report_line(1, ok, f"max |dp - brute| = {res.metric:.2e} (<= 1e-6) over {res.probes} instances, "
                       f"{res.seconds:.1f}s (< 10s)")
    assert ok


def test_c02_gradient_correctness(report_line):
    res = verify.gradient_checks(tol=1e-4, include_model=True)
    ok = res.passed and res.probes >= 100 and res.seconds < 120
    report_line(2, ok, f"max rel err = {res.metric:.2e} (<= 1e-4), {res.probes} probes (>= 100), "
                       f"{res.seconds:.1f}s (< 120s)")
    assert ok


def test_c03_streaming_pooling(report_line):
    r64 = verify.pooling_equivalence(bits=64, n=50, max_len=200, max_dim=32)
    r32 = verify.pooling_equivalence(bits=32, n=50, max_len=200, max_dim=32)
    secs = r64.seconds + r32.seconds
    ok = r64.passed and r32.passed and secs < 5
    report_line(3, ok, f"64-bit {r64.metric:.2e} (<= 1e-10), 32-bit {r32.metric:.2e} (<= 1e-5), {secs:.1f}s (< 5s)")
    assert ok


def test_c04_causality(report_line):
    res = verify.causality_probes(n=20)
    ok = res.passed and res.seconds < 30
    report_line(4, ok, f"{res.probes} invariance probes, exact; {res.detail}; {res.seconds:.1f}s (< 30s)")
    assert ok


def test_c05_streaming_equals_offline(report_line):
    res = verify.streaming_equivalence(n=20, tol=1e-5)
    ok = res.passed and res.seconds < 30
    report_line(5, ok, f"max dev {res.metric:.2e} (<= 1e-5) over {res.probes} utterances, {res.detail}, "
                       f"{res.seconds:.1f}s (< 30s)")
    assert ok


def test_c06_gradient_paths(report_line):
    t0 = time.perf_counter()
    sg = verify.lid_tap_gradient("sg")
    st = verify.lid_tap_gradient("argmax")
    right = verify.right_encoder_gradient(1.0)
    secs = time.perf_counter() - t0
    ok = sg == 0.0 and st > 0.0 and right == 0.0 and secs < 30
    report_line(6, ok, f"sg tap grad {sg:g} (== 0), argmax tap grad {st:.2e} (> 0), "
                       f"lam=1 right-encoder grad {right:g} (== 0), {secs:.1f}s (< 30s)")
    assert ok


@pytest.fixture(scope="module")
def trend_runs():
    corpus = generate(GeneratorConfig(), TREND_UTTS, seed=TREND_SEED)
    train_set, test_set = split(corpus, TREND_SPLIT, seed=TREND_SEED)
    runs = {}
    for name, changes in [("S00", dict(injection="none")),
                          ("S20", dict(injection="fig1a", lid_mode="argmax")),
                          ("S20-nopool", dict(injection="fig1a", lid_mode="argmax", lid_pooling=False))]:
        model = CascadeModel(toy_config(**changes))
        result, _ = train(model, train_set, TREND_TRAIN)
        runs[name] = (result, evaluate(model, test_set))
    return len(train_set), len(test_set), runs


@pytest.mark.slow
def test_c07_toy_trends(trend_runs, report_line):
    n_train, n_test, runs = trend_runs
    wer = {k: (rep.wer["1st"]["all"].wer, rep.wer["2nd"]["all"].wer) for k, (_, rep) in runs.items()}
    s20 = runs["S20"][1].lid["clusters"].rows
    nopool = runs["S20-nopool"][1].lid["clusters"].rows
    chain = [s20[k] for k in FRAME_ROWS]
    checks = {
        "2nd<1st S00": wer["S00"][1] < wer["S00"][0],
        "2nd<1st S20": wer["S20"][1] < wer["S20"][0],
        "S20 inf>=95": s20["inf"] >= 95.0,
        "LID rows increase": all(a < b for a, b in zip(chain, chain[1:])),
        "S20<=S00+0.5": wer["S20"][1] <= wer["S00"][1] + 0.5,
        "pool>nopool": s20["avg"] > nopool["avg"],
        "budget": all(r.seconds <= TREND_BUDGET_S for r, _ in runs.values()),
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    detail = (f"{n_train}/{n_test} utts; WER 1st/2nd S00 {wer['S00'][0]:.2f}/{wer['S00'][1]:.2f}, "
              f"S20 {wer['S20'][0]:.2f}/{wer['S20'][1]:.2f}; S20 cluster LID "
              + "/".join(f"{v:.1f}" for v in chain)
              + f", avg {s20['avg']:.1f} vs no-pool {nopool['avg']:.1f}; train "
              + "/".join(f"{r.seconds:.0f}s" for r, _ in runs.values())
              + (f"; failed: {', '.join(failed)}" if failed else ""))
    report_line(7, ok, detail)
    assert ok, checks


def test_c08_wer_oracle(report_line):
    res = verify.wer_oracle(max_len=6, alphabet=3)
    ok = res.passed and res.seconds < 10
    report_line(8, ok, f"{res.probes} pairs, {int(res.metric)} mismatches, {res.seconds:.1f}s (< 10s)")
    assert ok


def test_c09_parameter_budget(report_line):
    model = CascadeModel(full_config(), rng=False)
    total = model.num_parameters()
    lid = model.lid.num_parameters()
    ratio = lid / total
    ok = ratio <= 0.01
    report_line(9, ok, f"LID {lid:,} / total {total:,} = {100 * ratio:.3f}% (<= 1%)")
    assert ok


def _cli_run(root, conf):
    data, run, ev = root / "data", root / "run", root / "eval"
    env = {"CASCADE_LID_THREADS": "1", "CASCADE_LID_SEED": "5"}
    assert cli.main(["generate", "--config", str(conf), "--out", str(data), "--num-utts", "60"], env) == 0
    assert cli.main(["train", "--config", str(conf), "--dataset", str(data / "train.bin"), "--out", str(run),
                     "--epochs", "2"], env) == 0
    assert cli.main(["evaluate", "--config", str(conf), "--checkpoint", str(run / "model.ckpt"),
                     "--dataset", str(data / "test.bin"), "--out", str(ev)], env) == 0
    return {name: p.read_bytes() for name, p in [
        ("checkpoint", run / "model.ckpt"), ("curves", run / "curves.csv"), ("manifest", run / "manifest.json"),
        ("wer", ev / "wer.csv"), ("lid", ev / "lid.csv"), ("report", ev / "report.txt")]}


def test_c10_reproducibility(tmp_path, report_line):
    conf = tmp_path / "conf.json"
    conf.write_text(json.dumps({"model": {"causal": {"input_dim": 32, "num_blocks": 2, "model_dim": 16,
                                                     "num_heads": 2, "per_layer_right_context": [0, 0],
                                                     "time_reduction_after": 1, "max_positions": 128},
                                          "right": {"input_dim": 16, "num_blocks": 1, "model_dim": 16,
                                                    "num_heads": 2, "per_layer_right_context": [2]},
                                          "lid_hidden": 16},
                                "train": {"batch_size": 8}}))
    a = _cli_run(tmp_path / "a", conf)
    b = _cli_run(tmp_path / "b", conf)
    same = {k: a[k] == b[k] for k in a}
    ok = all(same.values())
    report_line(10, ok, "bit-identical " + ", ".join(f"{k}={'yes' if v else 'NO'}" for k, v in same.items()))
    assert ok


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-s", "-q"]))
