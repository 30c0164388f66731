import csv
import json

import pytest

from selfaug_pbrl.cli import main, proportional_controller
from selfaug_pbrl.orchestrator import evaluate_policy

TINY = [
    "--set", "run.total_steps=900",
    "--set", "run.pretrain_steps=300",
    "--set", "run.random_steps=100",
    "--set", "run.feedback_frequency=300",
    "--set", "run.eval_episodes=2",
    "--set", "agent.hidden_layers=1",
    "--set", "agent.hidden_units=16",
    "--set", "agent.batch_size=32",
    "--set", "reward.hidden_layers=1",
    "--set", "reward.hidden_units=16",
    "--set", "reward.epochs=2",
    "--set", "feedback.queries_per_session=5",
]


@pytest.fixture(scope="module")
def llm_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    rec = out / "transcript.jsonl"
    argv = ["train", "--mode", "sallm_full", "--seed", "1", "--out-dir", str(out), "--run-id", "r", "--record", str(rec)] + TINY
    assert main(argv) == 0
    return out / "r", rec


def test_train_scripted_desk_happy_path(tmp_path, capsys):
    argv = ["train", "--mode", "scripted", "--task", "point_reach", "--desk-scale", "10", "--seed", "0",
            "--steps", "9000", "--out-dir", str(tmp_path)] + TINY[4:]
    argv += ["--set", "run.pretrain_steps=3000", "--set", "run.feedback_frequency=3000"]
    assert main(argv) == 0
    summary = json.loads(capsys.readouterr().out)
    run = tmp_path / "point_reach-scripted-s0"
    assert (run / "metrics.jsonl").is_file() and (run / "config.json").is_file()
    assert (run / "900" / "actor.ckpt").is_file()
    assert summary["sessions"] == 2


def test_print_config(capsys):
    assert main(["train", "--task", "maze_umaze", "--budget", "50", "--print-config"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["run"]["task"] == "maze_umaze" and cfg["feedback"]["max_budget"] == 50


def test_config_file(tmp_path, capsys):
    path = tmp_path / "c.toml"
    path.write_text('[run]\ntask = "maze_open"\nseed = 4\n[feedback]\nmode = "llm_only"\n')
    assert main(["train", "--config", str(path), "--seed", "5", "--print-config"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert (cfg["run"]["task"], cfg["run"]["seed"], cfg["feedback"]["mode"]) == ("maze_open", 5, "llm_only")


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--bogus"],
        ["train", "--seed", "x"],
        ["train", "--set", "run.nope=1", "--print-config"],
        ["train", "--set", "run.seed", "--print-config"],
        ["train", "--mode", "telepathy", "--print-config"],
        ["train", "--config", "/does/not/exist.toml"],
    ],
)
def test_config_errors_exit_2(argv, capsys):
    assert _exit_code(argv) == 2
    err = capsys.readouterr().err.strip()
    assert len(err.splitlines()) == 1 and err.startswith("selfaug-pbrl")


def _exit_code(argv):
    # argparse usage errors leave through SystemExit, the rest through main's return value
    try:
        return main(argv)
    except SystemExit as exc:
        return exc.code


def test_eval_missing_checkpoint(tmp_path, capsys):
    missing = tmp_path / "nowhere" / "500"
    assert main(["eval", "--checkpoint", str(missing), "--task", "point_reach"]) == 4
    err = capsys.readouterr().err
    assert str(missing) in err and len(err.strip().splitlines()) == 1


def test_eval_and_probe(llm_run, tmp_path, capsys):
    run, _ = llm_run
    ckpt = run / "900"
    assert main(["eval", "--checkpoint", str(ckpt), "--task", "point_reach", "--episodes", "2"]) == 0
    assert json.loads(capsys.readouterr().out)["episodes"] == 2
    out = tmp_path / "probe.csv"
    assert main(["probe-reward", "--checkpoint", str(ckpt), "--task", "point_reach", "--length", "20", "--out", str(out)]) == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["step", "expert", "suboptimal"] and len(rows) == 21
    values = [float(v) for r in rows[1:] for v in r[1:]]
    assert min(values) == 0.0 and max(values) == 1.0


def test_label_accuracy(llm_run, capsys):
    run, _ = llm_run
    assert main(["label-accuracy", "--metrics", str(run / "metrics.jsonl"), "--per-session"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["sessions"] == 2 and out["queries"] == 10
    assert out["label_accuracy"] == 1.0 and out["discard_rate"] == 0.0
    assert len(out["per_session"]) == 2


def test_transcripts(llm_run, tmp_path, capsys):
    _, rec = llm_run
    assert main(["transcripts", "summary", str(rec)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["llm_calls"] == 30
    merged = tmp_path / "merged.jsonl"
    assert main(["transcripts", "merge", str(merged), str(rec), str(rec)]) == 0
    assert len(merged.read_text().splitlines()) == 60


def test_replay_flag_reproduces_metrics(llm_run, tmp_path):
    run, rec = llm_run
    argv = ["train", "--mode", "sallm_full", "--seed", "1", "--out-dir", str(tmp_path), "--run-id", "r", "--replay", str(rec)] + TINY
    assert main(argv) == 0
    assert (tmp_path / "r" / "metrics.jsonl").read_bytes() == (run / "metrics.jsonl").read_bytes()


def test_plot_data(llm_run, tmp_path, capsys):
    run, _ = llm_run
    out = tmp_path / "plots"
    assert main(["plot-data", str(run), "--out", str(out)]) == 0
    headers = {p.name: next(csv.reader(p.open())) for p in out.glob("*.csv")}
    assert headers["success_curves.csv"] == ["run_id", "step", "success_rate", "mean_return"]
    assert headers["label_stats.csv"][:3] == ["run_id", "session_index", "step"]
    assert headers["cost.csv"] == ["run_id", "prompt_tokens", "completion_tokens", "llm_calls", "cost_usd"]
    assert "reward_losses.csv" in headers
    assert main(["plot-data", str(tmp_path / "missing"), "--out", str(out)]) == 2


def test_provider_failure_exit_3(tmp_path, monkeypatch):
    monkeypatch.delenv("SALLM_API_KEY", raising=False)
    argv = ["train", "--mode", "llm_only", "--provider", "http", "--set", "llm.base_url=http://127.0.0.1:9", "--out-dir", str(tmp_path)] + TINY
    assert main(argv) == 3


@pytest.mark.parametrize("task", ["point_reach", "maze_open", "button_press_lite"])
def test_proportional_controller(task):
    from selfaug_pbrl import envs

    t = envs.get_task(task)
    assert evaluate_policy(proportional_controller(t), t, 5)["mean_return"] > evaluate_policy(lambda x: 0 * x[: t.action_dims], t, 5)["mean_return"]
