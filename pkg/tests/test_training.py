import json

import numpy as np
import pytest

from cascade_lid.cascade import CascadeModel
from cascade_lid.nn import AdamState, checkpoint
from cascade_lid.synthdata import GeneratorConfig, generate
from cascade_lid.training import (RunManifest, TrainConfig, curves_csv, decode_dataset, evaluate,
                                  length_buckets, load_checkpoint, lr_at, save_checkpoint, train)
from cascade_lid.verify import probe_config


@pytest.fixture(scope="module")
def tiny():
    return generate(GeneratorConfig(), 36, seed=4)


def _model(seed=0):
    return CascadeModel(probe_config("fig1a"), np.random.default_rng(seed))


def test_length_buckets_partition():
    rng = np.random.default_rng(0)
    lengths = rng.integers(10, 100, size=50)
    batches = length_buckets(lengths, 8, rng)
    flat = np.concatenate(batches)
    assert sorted(flat.tolist()) == list(range(50))
    assert all(len(b) <= 8 for b in batches)
    # each bucket spans a contiguous slice of the sorted lengths
    s = np.sort(lengths)
    for b in batches:
        lo, hi = lengths[b].min(), lengths[b].max()
        assert np.sum((s >= lo) & (s <= hi)) >= len(b)


def test_lr_schedule():
    t = TrainConfig(lr=1.0, warmup_steps=10, final_lr_frac=0.1)
    assert lr_at(t, 1, 110) == pytest.approx(0.1)
    assert lr_at(t, 10, 110) == pytest.approx(1.0)
    assert lr_at(t, 60, 110) == pytest.approx(0.55)
    assert lr_at(t, 110, 110) == pytest.approx(0.1)
    assert lr_at(TrainConfig(lr=2.0, warmup_steps=1, final_lr_frac=1.0), 500, 1000) == 2.0


def test_train_is_bit_reproducible(tiny, tmp_path):
    tcfg = TrainConfig(epochs=1, batch_size=12, warmup_steps=2)
    shas, csvs = [], []
    for k in range(2):
        m = _model()
        res, adam = train(m, tiny, tcfg)
        shas.append(save_checkpoint(tmp_path / f"m{k}.ckpt", m, adam))
        csvs.append(curves_csv(res.curves) + evaluate(m, tiny).wer_csv())
    assert shas[0] == shas[1] and csvs[0] == csvs[1]
    assert (tmp_path / "m0.ckpt").read_bytes() == (tmp_path / "m1.ckpt").read_bytes()


def test_training_lowers_loss(tiny):
    m = _model()
    res, _ = train(m, tiny, TrainConfig(epochs=3, batch_size=12, warmup_steps=2, lr=3e-3))
    assert res.steps == 9
    assert res.curves[-1]["total"] < res.curves[0]["total"]
    assert {"first", "second", "lid", "total"} <= set(res.curves[0])


def test_time_budget_stops_early(tiny):
    res, _ = train(_model(), tiny, TrainConfig(epochs=5, batch_size=12), time_budget=0.0)
    assert len(res.curves) == 1


def test_checkpoint_roundtrip(tiny, tmp_path):
    m = _model()
    _, adam = train(m, tiny, TrainConfig(epochs=1, batch_size=18))
    p = tmp_path / "c.ckpt"
    save_checkpoint(p, m, adam, {"note": "x"})
    back, adam2, meta = load_checkpoint(p)
    assert meta == {"note": "x"} and back.cfg == m.cfg
    for a, b in zip(m.parameters(), back.parameters()):
        assert a.data.dtype == b.data.dtype and np.array_equal(a.data, b.data)
    assert adam2.step == adam.step
    assert all(np.array_equal(x, y) for x, y in zip(adam.m, adam2.m))
    assert evaluate(m, tiny).wer_csv() == evaluate(back, tiny).wer_csv()


def test_checkpoint_corruption_detected(tmp_path):
    m = _model()
    blob = checkpoint.dumps(m.state_arrays(), m.cfg.to_dict())
    with pytest.raises(ValueError):
        checkpoint.loads(b"XXXXXXXX" + blob[8:])
    with pytest.raises(ValueError):
        checkpoint.loads(blob[:-3])
    with pytest.raises(ValueError):
        checkpoint.loads(blob + b"\0")
    # tampered config no longer matches its stored hash
    tampered = blob.replace(b'"lam": 0.5', b'"lam": 0.7')
    assert tampered != blob
    with pytest.raises(ValueError):
        checkpoint.loads(tampered)


def test_untrained_model_lid_is_near_chance():
    data = generate(GeneratorConfig(mixture={loc: 1.0 for loc in GeneratorConfig().locales}), 180, seed=8)
    rep = evaluate(_model(seed=3), data)
    assert abs(rep.lid["locales"].rows["avg"] - 100 / 9) <= 5


def test_decode_dataset_keeps_order(tiny):
    res = decode_dataset(_model(), tiny, batch_size=5)
    assert res.refs == [u.tokens for u in tiny]
    assert res.locales == [u.locale for u in tiny]
    assert all(z.shape[1] == 9 for z in res.z)


def test_empty_eval_set_rejected(tiny):
    with pytest.raises(ValueError):
        decode_dataset(_model(), tiny.subset([]))


def test_manifest_json_roundtrip():
    man = RunManifest("abc", 0, "v0", "d" * 64, 32, TrainConfig().to_dict(), [{"epoch": 1, "total": 1.5}])
    back = RunManifest.from_json(man.to_json())
    assert back == man
    assert json.loads(man.to_json())["train"]["batch_size"] == 16


def test_curves_csv_layout():
    text = curves_csv([{"epoch": 1, "total": 2.0, "first": 1.0}, {"epoch": 2, "total": 1.0, "first": 0.5}])
    assert text.splitlines()[0] == "epoch,first,total"
    assert len(text.splitlines()) == 3
