import numpy as np
import pytest

from ctxrl import persistence as io
from ctxrl.envs import generate_stream
from ctxrl.learner import LearnerConfig, run_stream

FAST = dict(hidden=8, iterations_per_task=4, eval_every=2, eval_episodes=1, m_explore=3)


@pytest.fixture(scope="module")
def stream():
    return generate_stream("I", 5, sizes=(1, 1, 1, 1))


@pytest.mark.parametrize("optimizer", ["sgd", "adam"])
def test_checkpoint_round_trip_bitwise(stream, optimizer):
    _, state = run_stream(LearnerConfig(optimizer=optimizer, **FAST), stream)
    blob = io.encode_checkpoint(state)
    back = io.decode_checkpoint(blob)
    assert io.encode_checkpoint(back) == blob
    assert back.rng.bit_generator.state == state.rng.bit_generator.state
    for a, b in zip(back.policy.parameters(), state.policy.parameters()):
        assert a.tobytes() == b.tobytes()
    assert back.registry.counts == state.registry.counts


@pytest.mark.parametrize("mode", ["dacorl", "naive", "fixed_k", "oracle"])
def test_resume_equals_unbroken(stream, mode, tmp_path):
    cfg = LearnerConfig(mode=mode, optimizer="adam", **FAST)
    full, _ = run_stream(cfg, stream)
    saved = {}
    run_stream(cfg, stream, on_task_end=lambda st: saved.setdefault(
        st.next_task, io.encode_checkpoint(st)))
    for k in (1, 2, 3):
        path = tmp_path / f"task_{k}.ckpt"
        path.write_bytes(saved[k])
        rec, _ = run_stream(cfg, stream, io.load_checkpoint(path))
        rec.wall_time = full.wall_time
        assert rec == full


def test_bad_checkpoints(stream):
    _, state = run_stream(LearnerConfig(**FAST), stream)
    blob = io.encode_checkpoint(state)
    for bad in (b"nope", b"XXXXXXXX" + blob[8:], blob[:-8], blob + b"\0"):
        with pytest.raises(io.CheckpointError):
            io.decode_checkpoint(bad)


def test_config_text_round_trip(tmp_path):
    cfg = LearnerConfig(lam=0.25, beta=3e-4, baseline=False, mode="naive")
    p = tmp_path / "c.txt"
    p.write_text(io.format_config(cfg))
    assert io.load_config(p) == cfg


def test_config_parsing():
    assert io.parse_config_text("lambda = 0.1  # comment\n\nseed=3\n") == {"lam": 0.1, "seed": 3}
    for text in ("unknown = 1\n", "seed = x\n", "baseline = maybe\n", "seed\n",
                 "seed = 1\nseed = 2\n"):
        with pytest.raises(io.ConfigError):
            io.parse_config_text(text)
    with pytest.raises(io.ConfigError):
        io.load_config(None, {"lam": 5.0})


def test_csv_schema(stream, tmp_path):
    rec, _ = run_stream(LearnerConfig(**FAST), stream)
    io.write_eval_csv(rec, tmp_path / "eval.csv")
    io.write_train_csv(rec, tmp_path / "train.csv")
    io.write_trace_csv(rec, tmp_path / "trace.csv")
    for name, header in (("eval.csv", io.EVAL_HEADER), ("train.csv", io.TRAIN_HEADER),
                         ("trace.csv", io.TRACE_HEADER)):
        text = (tmp_path / name).read_text()
        assert text.splitlines()[0].startswith("# schema: ctxrl.")
        got, rows = io.read_csv(tmp_path / name)
        assert got == header
        assert rows and all(len(r) == len(header) for r in rows)
    assert io.read_eval_csv(tmp_path / "eval.csv") == rec.r_ave_series


def test_svg(tmp_path):
    io.write_svg({"a": [(0, -3.0), (10, -1.0)], "b": [(0, -2.0), (10, -2.0)]},
                 tmp_path / "r.svg", "t")
    text = (tmp_path / "r.svg").read_text()
    assert text.startswith("<svg") and text.count("<polyline") == 2
    with pytest.raises(ValueError):
        io.svg_line_chart({})
