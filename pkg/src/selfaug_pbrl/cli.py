"""Command-line entry point: ``selfaug-pbrl <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 provider error, 4 checkpoint error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import envs
from .approx import CheckpointError, load_network
from .core import TrajectorySegment
from .feedback import UndefinedMetricError, session_stats
from .llmclient import CostLedger, ProviderError, TranscriptRecord, read_transcript
from .orchestrator import (
    ConfigError,
    RunAborted,
    RunConfig,
    evaluate,
    read_metrics,
    reward_alignment_probe,
    train,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("selfaug_pbrl")

EXIT_OK, EXIT_CONFIG, EXIT_PROVIDER, EXIT_CHECKPOINT = 0, 2, 3, 4

# flag -> config key
TRAIN_FLAGS = {
    "task": "run.task",
    "mode": "feedback.mode",
    "seed": "run.seed",
    "steps": "run.total_steps",
    "budget": "feedback.max_budget",
    "desk_scale": "run.desk_scale",
    "provider": "llm.provider",
    "record": "llm.record",
    "replay": "llm.replay",
    "out_dir": "run.out_dir",
    "run_id": "run.run_id",
    "epsilon": "llm.epsilon",
}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def load_config(path: str | None, overrides: dict) -> RunConfig:
    data = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = tomllib.loads(p.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
    cfg = RunConfig.from_dict(data)
    for key, value in overrides.items():
        cfg.set(key, value)
    return cfg.validate()


def _parse_set(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    overrides = _parse_set(args.set)
    for flag, key in TRAIN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    cfg = load_config(args.config, overrides)
    if args.print_config:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    res = train(cfg)
    summary = {
        "run_dir": str(res.run_dir),
        "metrics": str(res.metrics_path),
        "checkpoint": str(res.checkpoint_dir),
        "sessions": res.sessions,
        "queries": res.budget.used_queries,
        **res.final_eval,
        **res.ledger.snapshot(),
    }
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not (ckpt / "actor.ckpt").exists():
        raise CheckpointError(f"no actor checkpoint at {ckpt}")
    res = evaluate(ckpt, args.task, args.episodes, args.seed)
    print(json.dumps(res, sort_keys=True))
    return EXIT_OK


def _session_records(path):
    return [r for r in read_metrics(path) if r["kind"] == "session"]


def cmd_label_accuracy(args) -> int:
    sessions = _session_records(args.metrics)
    records = [q for s in sessions for q in s.get("queries", [])]
    out = {"sessions": len(sessions), **session_stats(records)}
    if args.per_session:
        out["per_session"] = [
            {"session_index": s["session_index"], **session_stats(s["queries"])} for s in sessions if s.get("queries")
        ]
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def _rollout_segment(task, policy, seed: int, H: int) -> TrajectorySegment:
    env = envs.Env(task)
    x = env.reset(seed)
    states, rewards = [], []
    for _ in range(H):
        x, r, _, _ = env.step(policy(x))
        states.append(x)
        rewards.append(r)
    return TrajectorySegment(np.array(states), task.layout, np.array(rewards))


def proportional_controller(task: envs.TaskSpec, gain: float = 20.0):
    """Drives the position channel straight at the goal (through the object for manipulation)."""
    lay = task.layout

    def policy(x):
        tcp = x[lay.slice("tcp")]
        goal = x[lay.slice("target")] if lay.obj is None else x[lay.slice("obj")]
        a = np.zeros(task.action_dims)
        a[: lay.position_dims] = np.clip(gain * (goal - tcp), -1.0, 1.0)
        return a

    return policy


def cmd_probe_reward(args) -> int:
    task = envs.get_task(args.task)
    ckpt = Path(args.checkpoint)
    paths = sorted(ckpt.glob("reward*.ckpt"))
    if not paths:
        raise CheckpointError(f"no reward checkpoints in {ckpt}")
    members = [load_network(p)[0] for p in paths]

    def reward_fn(states):
        return np.mean([m(states)[:, 0] for m in members], axis=0)

    rng = np.random.default_rng(args.seed)
    expert = _rollout_segment(task, proportional_controller(task), args.seed, args.length)
    suboptimal = _rollout_segment(task, lambda x: rng.uniform(-1, 1, task.action_dims), args.seed, args.length)
    probe = reward_alignment_probe(reward_fn, expert, suboptimal)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "expert", "suboptimal"])
        for i, (e, s) in enumerate(zip(probe["expert"], probe["suboptimal"])):
            w.writerow([i, f"{e:.6f}", f"{s:.6f}"])
    print(json.dumps({"out": str(out), "degenerate": probe["degenerate"]}))
    return EXIT_OK


def cmd_transcripts(args) -> int:
    if args.action == "summary":
        records = read_transcript(args.paths[0])
        ledger = CostLedger(args.price_in, args.price_out)
        ledger.prompt_tokens = sum(r.prompt_tokens for r in records)
        ledger.completion_tokens = sum(r.completion_tokens for r in records)
        ledger.calls = len(records)
        out = ledger.snapshot()
        out["distinct_requests"] = len({r.request_digest for r in records})
        print(json.dumps(out, sort_keys=True))
    else:
        if len(args.paths) < 2:
            raise ConfigError("transcripts merge needs an output path and at least one input")
        target, sources = Path(args.paths[0]), args.paths[1:]
        merged: list[TranscriptRecord] = []
        for src in sources:
            merged.extend(read_transcript(src))
        merged.sort(key=lambda r: r.timestamp)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text("".join(r.to_json() + "\n" for r in merged), encoding="utf-8")
        print(json.dumps({"out": str(target), "records": len(merged)}))
    return EXIT_OK


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_plot_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    curves, labels, costs, losses = [], [], [], []
    for run in args.runs:
        path = Path(run) / "metrics.jsonl" if Path(run).is_dir() else Path(run)
        if not path.exists():
            raise ConfigError(f"metrics file not found: {path}")
        for r in read_metrics(path):
            rid, step = r["run_id"], r["step"]
            if r["kind"] == "eval":
                curves.append([rid, step, r["success_rate"], r["mean_return"]])
            elif r["kind"] == "session":
                st = r.get("stats") or {}
                labels.append(
                    [rid, r["session_index"], step]
                    + [st.get(k) for k in ("label_accuracy", "discard_rate", "parse_failure_rate", "equal_rate", "augment_acceptance_rate")]
                )
                for member, loss in enumerate(r.get("reward_losses") or []):
                    losses.append([rid, r["session_index"], step, member, loss])
            elif r["kind"] == "final":
                c = r["cost"]
                costs.append([rid, c["prompt_tokens"], c["completion_tokens"], c["llm_calls"], c["cost_usd"]])
    files = {
        "success_curves.csv": (["run_id", "step", "success_rate", "mean_return"], curves),
        "label_stats.csv": (
            ["run_id", "session_index", "step", "label_accuracy", "discard_rate", "parse_failure_rate", "equal_rate", "augment_acceptance_rate"],
            labels,
        ),
        "reward_losses.csv": (["run_id", "session_index", "step", "member", "final_epoch_loss"], losses),
        "cost.csv": (["run_id", "prompt_tokens", "completion_tokens", "llm_calls", "cost_usd"], costs),
    }
    for name, (header, rows) in files.items():
        _write_csv(out / name, header, [["" if v is None else v for v in row] for row in rows])
    print(json.dumps({"out": str(out), "files": sorted(files)}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    """Usage errors as one stderr line and exit code 2."""

    def error(self, message):
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="selfaug-pbrl", description="Preference-based RL with self-augmented LLM feedback")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one training job")
    t.add_argument("--config", help="TOML file with [run], [agent], [reward], [feedback], [llm] tables")
    t.add_argument("--task")
    t.add_argument("--mode")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int, help="total environment steps before desk scaling")
    t.add_argument("--budget", type=int, help="maximum number of queries before desk scaling")
    t.add_argument("--desk-scale", type=int)
    t.add_argument("--provider")
    t.add_argument("--epsilon", type=float, help="verdict flip probability of the oracle mock")
    t.add_argument("--record", help="append every LLM exchange to this transcript")
    t.add_argument("--replay", help="serve LLM responses from this transcript")
    t.add_argument("--out-dir")
    t.add_argument("--run-id")
    t.add_argument("--set", action="append", metavar="TABLE.KEY=VALUE", help="override any config field")
    t.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a saved policy")
    e.add_argument("--checkpoint", required=True, help="directory holding actor.ckpt")
    e.add_argument("--task", required=True)
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("label-accuracy", help="label statistics from a metrics log")
    a.add_argument("--metrics", required=True)
    a.add_argument("--per-session", action="store_true")
    a.set_defaults(func=cmd_label_accuracy)

    r = sub.add_parser("probe-reward", help="normalized reward traces of an expert and a random segment")
    r.add_argument("--checkpoint", required=True, help="directory holding reward*.ckpt")
    r.add_argument("--task", required=True)
    r.add_argument("--length", type=int, default=50)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True, help="CSV path")
    r.set_defaults(func=cmd_probe_reward)

    tr = sub.add_parser("transcripts", help="inspect or merge LLM transcripts")
    tr.add_argument("action", choices=["summary", "merge"])
    tr.add_argument("paths", nargs="+", help="summary: FILE; merge: OUT IN [IN ...]")
    tr.add_argument("--price-in", type=float, default=0.15, help="USD per 1M prompt tokens")
    tr.add_argument("--price-out", type=float, default=0.60, help="USD per 1M completion tokens")
    tr.set_defaults(func=cmd_transcripts)

    d = sub.add_parser("plot-data", help="CSV series for plotting from one or more runs")
    d.add_argument("runs", nargs="+", help="run directories or metrics files")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_plot_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, KeyError, UndefinedMetricError, FileNotFoundError) as exc:
        code, msg = EXIT_CONFIG, exc
    except (ProviderError, RunAborted) as exc:
        code, msg = EXIT_PROVIDER, exc
    except CheckpointError as exc:
        code, msg = EXIT_CHECKPOINT, exc
    print(f"selfaug-pbrl: error: {str(msg).splitlines()[0] if str(msg) else type(msg).__name__}", file=sys.stderr)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
