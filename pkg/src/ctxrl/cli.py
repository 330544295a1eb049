"""Command-line entry point: ``ctxrl <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import persistence as io
from .envs import GenerationError, ManifestError, generate_stream, read_manifest, write_manifest
from .evaluation import generalization_eval
from .learner import LearnerState, evaluate_state, run_stream
from .verify import run_gradchecks

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO, EXIT_PARSE, EXIT_RUNTIME = 0, 1, 2, 3, 4, 5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _sizes(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated integers") from None


def _kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError("expected key=value")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ctxrl", description="Continual RL with online context detection.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-stream", help="sample a clustered task stream and write its manifest")
    g.add_argument("--type", required=True, choices=["I", "II", "III"])
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--clusters", type=int, default=4)
    g.add_argument("--sizes", type=_sizes, default=(12, 12, 12, 14))
    g.add_argument("--spread", type=float, default=0.05)
    g.add_argument("--out", default="manifest.txt")

    t = sub.add_parser("train", help="train over a manifest and write a run directory")
    t.add_argument("--manifest", required=True)
    t.add_argument("--config", help="flat key = value file")
    t.add_argument("--set", type=_kv, action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    t.add_argument("--stop-after", type=int, help="stop once this many tasks are done")

    e = sub.add_parser("eval", help="recompute the mean test return from a checkpoint")
    e.add_argument("--run", required=True)
    e.add_argument("--checkpoint", help="default: latest in the run directory")

    gz = sub.add_parser("generalize", help="mean return on fresh uniformly drawn tasks")
    gz.add_argument("--run", required=True)
    gz.add_argument("--checkpoint")
    gz.add_argument("--n-tasks", type=int, default=50)
    gz.add_argument("--episodes", type=int, default=100)
    gz.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("report", help="learning-curve CSV and SVG for one or more runs")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out", help="SVG path (default: <first run>/report.svg)")
    r.add_argument("--csv", help="combined CSV path")
    r.add_argument("--title", default="mean test return")

    gc = sub.add_parser("gradcheck", help="finite-difference verification suite")
    gc.add_argument("--configs", type=int, default=100)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tol", type=float, default=1e-4)
    return p


def _latest_checkpoint(run: Path) -> Path | None:
    cks = sorted((run / "checkpoints").glob("task_*.ckpt"),
                 key=lambda p: int(p.stem.split("_")[1]))
    return cks[-1] if cks else None


def write_outputs(run: Path, state: LearnerState) -> None:
    rec = state.record
    io.write_eval_csv(rec, run / "eval.csv")
    io.write_train_csv(rec, run / "train.log.csv")
    io.write_trace_csv(rec, run / "trace.context.csv")
    if rec.r_ave_series:
        io.write_svg({state.config.mode: rec.r_ave_series}, run / "report.svg",
                     "mean test return")


def cmd_gen_stream(a) -> int:
    stream = generate_stream(a.type, a.seed, n_clusters=a.clusters, sizes=a.sizes,
                             cluster_spread=a.spread)
    write_manifest(stream, a.out)
    print(f"wrote {a.out}: {len(stream)} tasks, type {a.type}")
    return EXIT_OK


def cmd_train(a) -> int:
    run = Path(a.out)
    stream = read_manifest(a.manifest)
    config = io.load_config(a.config, io.config_overrides(a.set))
    state = None
    if a.resume:
        ck = _latest_checkpoint(run)
        if ck is None:
            raise FileNotFoundError(f"no checkpoint to resume in {run / 'checkpoints'}")
        state = io.load_checkpoint(ck)
        if state.config != config:
            raise io.ConfigError("resumed checkpoint was trained with a different config")
    run.mkdir(parents=True, exist_ok=True)
    write_manifest(stream, run / "manifest.txt")
    (run / "config.resolved").write_text(io.format_config(config), encoding="utf-8")

    class _Stop(Exception):
        pass

    def on_task_end(st):
        io.save_checkpoint(st, run / "checkpoints" / f"task_{st.next_task - 1}.ckpt")
        write_outputs(run, st)
        if a.stop_after is not None and st.next_task >= a.stop_after:
            raise _Stop

    try:
        rec, state = run_stream(config, stream, state, on_task_end=on_task_end)
    except _Stop:
        print(f"stopped after {a.stop_after} tasks; resume with --resume")
        return EXIT_OK
    print(f"final R_ave {rec.final_r_ave!r}  mean R_ave {rec.r_bar_ave!r}  K_T {rec.K_T}"
          if rec.r_ave_series else "no evaluations recorded")
    return EXIT_OK


def _load_run(a):
    run = Path(a.run)
    ck = Path(a.checkpoint) if a.checkpoint else _latest_checkpoint(run)
    if ck is None:
        raise FileNotFoundError(f"no checkpoint in {run / 'checkpoints'}")
    return read_manifest(run / "manifest.txt"), io.load_checkpoint(ck)


def cmd_eval(a) -> int:
    stream, state = _load_run(a)
    print(repr(evaluate_state(state, stream)))
    return EXIT_OK


def cmd_generalize(a) -> int:
    stream, state = _load_run(a)
    cfg = state.config
    value = generalization_eval(state.policy, state.registry, stream.type, a.n_tasks, a.seed,
                                selector=state.selector(stream), m_explore=cfg.m_explore,
                                episodes=a.episodes, deterministic=cfg.deterministic_eval)
    print(repr(value))
    return EXIT_OK


def cmd_report(a) -> int:
    series = {}
    for r in a.runs:
        run = Path(r)
        cfg = io.load_config(run / "config.resolved")
        label = run.name
        series[label] = (cfg.mode, io.read_eval_csv(run / "eval.csv"))
    first = Path(a.runs[0])
    svg = Path(a.out) if a.out else first / "report.svg"
    io.write_svg({f"{k} ({m})": pts for k, (m, pts) in series.items()}, svg, a.title)
    csv = Path(a.csv) if a.csv else svg.with_suffix(".csv")
    io.write_combined_csv(series, csv)
    print(f"wrote {svg} and {csv}")
    return EXIT_OK


def cmd_gradcheck(a) -> int:
    ok = True
    for res in run_gradchecks(a.configs, a.seed, a.tol):
        print(f"{res.name:10s} configs={res.n_configs} max_rel_error={res.max_rel_error:.3e} "
              f"{'PASS' if res.passed else 'FAIL'}")
        ok &= res.passed
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {"gen-stream": cmd_gen_stream, "train": cmd_train, "eval": cmd_eval,
            "generalize": cmd_generalize, "report": cmd_report, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    try:
        a = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[a.command](a)
    except (io.ConfigError, ManifestError, io.CheckpointError, ValueError) as e:
        print(f"ctxrl {a.command}: parse error: {e}", file=sys.stderr)
        return EXIT_PARSE
    except OSError as e:
        print(f"ctxrl {a.command}: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (GenerationError, FloatingPointError, RuntimeError) as e:
        print(f"ctxrl {a.command}: runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
