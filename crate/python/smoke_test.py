"""Smoke test for the `pefll` extension module.

Build and install first:

    pip install maturin
    maturin develop --release -m crates/py/Cargo.toml

then run `python3 python/smoke_test.py`.
"""

import math
import struct
import tempfile
from pathlib import Path

import pefll

SMALL = """
data.classes = 4
data.per_class = 40
data.image_size = 16
data.channels = 1
data.clients = 10
model.hyper = S
model.hidden_width = 32
model.descriptor_dim = 3
train.local_steps = 2
train.clients_per_round = 3
train.descriptor_batch = 8
train.local_batch = 8
run.rounds = 4
run.eval_every = 2
eval.predict_batch = 8
"""


def check_config():
    cfg = pefll.Config(SMALL)
    assert cfg.get("data.clients") == "10"
    before = cfg.digest()
    cfg.set("run.out", "/elsewhere")
    assert cfg.digest() == before, "run.out must not change the digest"
    cfg.set("train.beta", "0.02")
    assert cfg.digest() != before
    assert any(k == "train.lambda_theta" for k, _ in pefll.Config.keys())
    try:
        cfg.set("train.beta", "fast")
    except pefll.PefllError as e:
        assert "train.beta" in str(e)
    else:
        raise AssertionError("bad value accepted")


def check_simulation():
    sim = pefll.Simulation(pefll.Config(SMALL))
    selected = sim.train(3)
    assert sim.round == 3 and len(selected) == 3
    assert all(len(s) == 3 for s in selected)
    up, down = sim.take_bytes()
    assert up > 0 and down > 0
    seen, unseen = sim.evaluate()
    assert 0.0 <= seen <= 1.0 and unseen is not None
    client = sim.unseen_ids[0]
    assert len(sim.descriptor(client)) == 3
    theta = sim.personal_model(client)
    assert theta == sim.personal_model(client)
    assert all(math.isfinite(v) for v in theta)


def check_run_and_checkpoint():
    with tempfile.TemporaryDirectory() as tmp:
        cfg = pefll.Config(SMALL)
        cfg.set("run.out", tmp)
        rows = pefll.run(cfg)
        assert [r["round"] for r in rows] == [0, 2, 4]
        ck = str(Path(tmp) / "checkpoint.bin")
        seen, _ = pefll.eval_checkpoint(ck)
        assert seen == rows[-1]["train_client_acc"]
        report = pefll.analyze(ck, samples=2)
        assert report["round"] == 4 and math.isfinite(report["bound_mean"])


def check_bound_and_frames():
    emp, meta, client = pefll.pacbayes_bound(1.0, 1.0, 1.0, 0.05, 10, 50, 0.0, 0.0, [0.0] * 10, 0.25)
    assert emp == 0.25
    assert abs(meta - math.sqrt(math.log(4 * math.sqrt(10) / 0.05) / 20)) < 1e-12
    assert abs(client - math.sqrt((math.log(8 * 500 / 0.05) + 1) / 1000)) < 1e-12
    assert pefll.spearman([1, 2, 3], [10, 20, 30]) == 1.0
    assert pefll.spearman([1, 1, 1], [1, 2, 3]) is None

    frame = pefll.encode_frame(7, 5, 9, b"\x03")
    assert len(frame) == 19 and frame[:4] == b"PFLL"
    assert struct.unpack("<III", frame[6:18]) == (5, 9, 1)
    assert pefll.decode_frame(frame) == (7, 5, 9, b"\x03", 19)


if __name__ == "__main__":
    check_config()
    check_simulation()
    check_run_and_checkpoint()
    check_bound_and_frames()
    print("python smoke test passed")
