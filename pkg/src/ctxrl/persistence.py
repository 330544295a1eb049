"""On-disk formats: config files, binary checkpoints, CSV logs and SVG learning curves."""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .context import ContextRegistry
from .evaluation import RunRecord
from .learner import LearnerConfig, LearnerState
from .numkit import DenseNetParams
from .optim import make_optimizer
from .policy import HeadParams, MultiheadPolicy

CHECKPOINT_MAGIC = b"CTXRLCKP"
CHECKPOINT_VERSION = 1
CSV_SCHEMA = 1
_HEADER = struct.Struct("<8sIQ")

CONFIG_ALIASES = {"lambda": "lam"}


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------- config files

def _parse_value(name: str, kind, raw: str):
    if kind in (bool, "bool"):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None
    return raw


def config_overrides(pairs: Iterable[tuple[str, str]]) -> dict:
    """Typed values for ``(key, raw)`` pairs; unknown keys are errors."""
    fields = {f.name: f.type for f in dataclasses.fields(LearnerConfig)}
    out = {}
    for key, raw in pairs:
        name = CONFIG_ALIASES.get(key, key)
        if name not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        out[name] = _parse_value(key, fields[name], raw)
    return out


def parse_config_text(text: str) -> dict:
    pairs = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        pairs.append((k, v))
    keys = [CONFIG_ALIASES.get(k, k) for k, _ in pairs]
    dup = {k for k in keys if keys.count(k) > 1}
    if dup:
        raise ConfigError(f"duplicate config keys: {sorted(dup)}")
    return config_overrides(pairs)


def load_config(path=None, overrides: dict | None = None) -> LearnerConfig:
    values = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else {}
    values.update(overrides or {})
    try:
        return LearnerConfig(**values)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def format_config(config: LearnerConfig) -> str:
    lines = ["# resolved learner configuration"]
    for f in dataclasses.fields(config):
        v = getattr(config, f.name)
        key = "lambda" if f.name == "lam" else f.name
        lines.append(f"{key} = {str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- checkpoints

def _record_to_json(rec: RunRecord) -> dict:
    d = dataclasses.asdict(rec)
    d["wall_time"] = 0.0  # timing is not state; keeps checkpoints reproducible
    return d


def _record_from_json(d: dict) -> RunRecord:
    return RunRecord(
        r_ave_series=[(int(i), float(v)) for i, v in d["r_ave_series"]],
        assignments=list(d["assignments"]),
        K_T=int(d["K_T"]),
        forward_transfer=list(d["forward_transfer"]),
        config_echo=dict(d["config_echo"]),
        wall_time=float(d["wall_time"]),
        train_log=[tuple(r) for r in d["train_log"]],
        trace=[(r[0], r[1], r[2], r[3], r[4], list(r[5])) for r in d["trace"]],
    )


def encode_checkpoint(state: LearnerState) -> bytes:
    policy = state.policy
    tensors = [("policy", p) for p in policy.parameters()]
    reg_meta = None
    if state.registry is not None:
        reg = state.registry
        reg_meta = {"alpha": reg.alpha, "sigma2": reg.sigma2, "counts": list(reg.counts),
                    "t": reg.t, "update_rule": reg.update_rule, "K": reg.K}
        tensors += [("registry", m) for m in reg.mu]
    tensors += [("optimizer", a) for a in state.optimizer.state_arrays()]
    header = {
        "config": dataclasses.asdict(state.config),
        "dims": {"obs": policy.obs_dim, "action": policy.action_dim, "hidden": policy.hidden,
                 "K": policy.K, "trunk_layers": len(policy.shared.layers),
                 "head_layers": len(policy.heads[0].net.layers)},
        "registry": reg_meta,
        "optimizer": {"name": state.optimizer.name, "meta": state.optimizer.state_meta()},
        "rng": state.rng.bit_generator.state,
        "next_task": state.next_task,
        "global_iter": state.global_iter,
        "cluster_heads": sorted([int(k), int(v)] for k, v in state.cluster_heads.items()),
        "record": _record_to_json(state.record),
        "tensors": [{"kind": kind, "shape": list(a.shape)} for kind, a in tensors],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in tensors)
    return _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)) + blob + payload


def decode_checkpoint(data: bytes) -> LearnerState:
    if len(data) < _HEADER.size:
        raise CheckpointError("file too short to be a checkpoint")
    magic, version, hlen = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic bytes")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(data[_HEADER.size:_HEADER.size + hlen].decode("utf-8"))
    offset = _HEADER.size + hlen
    arrays = {"policy": [], "registry": [], "optimizer": []}
    for spec in header["tensors"]:
        n = int(np.prod(spec["shape"], dtype=np.int64))
        end = offset + 8 * n
        if end > len(data):
            raise CheckpointError("truncated tensor payload")
        a = np.frombuffer(data[offset:end], dtype="<f8").astype(np.float64).reshape(spec["shape"])
        arrays[spec["kind"]].append(a)
        offset = end
    if offset != len(data):
        raise CheckpointError("trailing bytes after tensor payload")

    config = LearnerConfig(**header["config"])
    dims = header["dims"]
    flat = iter(arrays["policy"])
    trunk = DenseNetParams([(next(flat), next(flat)) for _ in range(dims["trunk_layers"])],
                           output_activation="relu")
    heads = []
    for _ in range(dims["K"]):
        net = DenseNetParams([(next(flat), next(flat)) for _ in range(dims["head_layers"])])
        heads.append(HeadParams(net, next(flat)))
    policy = MultiheadPolicy(trunk, heads)

    registry = None
    if header["registry"] is not None:
        m = header["registry"]
        registry = ContextRegistry(m["alpha"], m["sigma2"], list(arrays["registry"]),
                                   list(m["counts"]), m["t"], m["update_rule"])
    opt = make_optimizer(header["optimizer"]["name"], config.beta, policy.parameters())
    opt.load_state(header["optimizer"]["meta"], arrays["optimizer"])
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng"]
    return LearnerState(config, policy, registry, opt, rng, header["next_task"],
                        header["global_iter"], {k: v for k, v in header["cluster_heads"]},
                        _record_from_json(header["record"]))


def save_checkpoint(state: LearnerState, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_checkpoint(state))


def load_checkpoint(path) -> LearnerState:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------- CSV

def _csv(path, schema_name: str, header: list[str], rows) -> None:
    lines = [f"# schema: ctxrl.{schema_name}/{CSV_SCHEMA}", ",".join(header)]
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"row arity {len(row)} != header arity {len(header)}")
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


EVAL_HEADER = ["global_iteration", "r_ave"]
TRAIN_HEADER = ["task_index", "task_id", "iteration", "global_iteration", "mean_return",
                "distill_loss"]
TRACE_HEADER = ["task_index", "task_id", "z", "is_new", "K", "posterior"]
COMBINED_HEADER = ["run", "mode", "global_iteration", "r_ave"]


def write_eval_csv(record: RunRecord, path) -> None:
    _csv(path, "eval", EVAL_HEADER, [(int(i), float(v)) for i, v in record.r_ave_series])


def write_train_csv(record: RunRecord, path) -> None:
    _csv(path, "train", TRAIN_HEADER, record.train_log)


def write_trace_csv(record: RunRecord, path) -> None:
    rows = [(i, tid, z, int(new), K, ";".join(repr(float(p)) for p in post))
            for i, tid, z, new, K, post in record.trace]
    _csv(path, "trace", TRACE_HEADER, rows)


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines()
             if ln and not ln.startswith("#")]
    if not lines:
        raise ValueError(f"{path}: no header row")
    header = lines[0].split(",")
    return header, [ln.split(",") for ln in lines[1:]]


def read_eval_csv(path) -> list[tuple[int, float]]:
    header, rows = read_csv(path)
    if header != EVAL_HEADER:
        raise ValueError(f"{path}: unexpected header {header}")
    return [(int(i), float(v)) for i, v in rows]


def write_combined_csv(series: dict[str, tuple[str, list]], path) -> None:
    rows = [(name, mode, int(i), float(v)) for name, (mode, pts) in series.items()
            for i, v in pts]
    _csv(path, "curves", COMBINED_HEADER, rows)


# ---------------------------------------------------------------- SVG

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"]


def svg_line_chart(series: dict[str, list[tuple[float, float]]], title: str = "",
                   width: int = 640, height: int = 400) -> str:
    """Minimal multi-series line chart (x = iteration, y = mean test return)."""
    pts = [p for s in series.values() for p in s]
    if not pts:
        raise ValueError("nothing to plot")
    xs, ys = [p[0] for p in pts], [p[1] for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    ml, mr, mt, mb = 60, 20, 30, 40
    pw, ph = width - ml - mr, height - mt - mb

    def sx(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return mt + (y1 - y) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14">{title}</text>',
           f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
           f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>']
    for frac in (0.0, 0.5, 1.0):
        yv = y0 + frac * (y1 - y0)
        xv = x0 + frac * (x1 - x0)
        out.append(f'<text x="{ml - 5}" y="{sy(yv) + 4:.1f}" text-anchor="end" '
                   f'font-size="10">{yv:.2f}</text>')
        out.append(f'<text x="{sx(xv):.1f}" y="{mt + ph + 15}" text-anchor="middle" '
                   f'font-size="10">{xv:.0f}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" '
               f'font-size="11">iteration</text>')
    out.append(f'<text x="14" y="{mt + ph / 2:.1f}" text-anchor="middle" font-size="11" '
               f'transform="rotate(-90 14 {mt + ph / 2:.1f})">R_ave</text>')
    for i, (label, s) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in s)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{path}"/>')
        out.append(f'<text x="{ml + 10}" y="{mt + 14 + 14 * i}" fill="{color}" '
                   f'font-size="11">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(series, path, title: str = "") -> None:
    Path(path).write_text(svg_line_chart(series, title), encoding="utf-8", newline="\n")
