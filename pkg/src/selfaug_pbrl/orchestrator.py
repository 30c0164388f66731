"""The training loop: unsupervised pretraining, feedback sessions with reward
learning and relabeling, and SAC policy learning, with metric capture.

Schedule (all counts after ``desk_scale`` division)::

    steps [0, random_steps)          uniform random actions, no updates
    steps [random_steps, pretrain)   SAC on the k-NN intrinsic reward
    step  pretrain                   critics reset
    every feedback_frequency steps   one session -> reward training -> relabel
                                     (while budget remains and a full window
                                     of steps is left to use the new reward)

One SAC update follows every environment step once random exploration ends.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import envs
from .agent import ReplayBuffer, SacAgent, SacConfig
from .approx import MLP, save_network
from .approx import kernels
from .core import TrajectorySegment
from .feedback import (
    FeedbackBudget,
    FeedbackMode,
    LlmSettings,
    UndefinedMetricError,
    run_feedback_session,
    session_stats,
)
from .llmclient import (
    CostLedger,
    EchoProvider,
    HttpProvider,
    OracleMockProvider,
    ProviderError,
    RandomJudgeProvider,
    RecordingProvider,
    ReplayProvider,
)
from .reward import PreferenceDataset, RewardEnsemble

log = logging.getLogger(__name__)

EVAL_SEED_BASE = 1_000_000_000
DEGENERATE_RANGE = 1e-12


class ConfigError(ValueError):
    pass


class RunAborted(RuntimeError):
    def __init__(self, step: int, checkpoint_dir: Path, cause: Exception):
        super().__init__(f"run aborted at step {step}: {cause}; state saved to {checkpoint_dir}")
        self.step = step
        self.checkpoint_dir = checkpoint_dir
        self.cause = cause


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunSection:
    task: str = "point_reach"
    seed: int = 0
    total_steps: int = 500_000
    pretrain_steps: int = 10_000
    random_steps: int = 1_000
    feedback_frequency: int = 5_000
    # 0 means "same as feedback_frequency"
    eval_frequency: int = 0
    eval_episodes: int = 10
    desk_scale: int = 1
    buffer_capacity: int = 1_000_000
    run_id: str = ""
    out_dir: str = "runs"
    log_episodes: bool = True


@dataclass
class AgentSection:
    hidden_layers: int = 3
    hidden_units: int = 256
    lr: float = 3e-4
    batch_size: int = 512
    discount: float = 0.99
    tau: float = 0.005
    init_temperature: float = 0.1
    critic_target_update_freq: int = 2
    alpha_lr: float = 3e-4
    intrinsic_k: int = 5
    intrinsic_sample: int = 512


@dataclass
class RewardSection:
    n_members: int = 3
    hidden_layers: int = 3
    hidden_units: int = 256
    lr: float = 3e-4
    epochs: int = 10
    batch_size: int = 512
    renormalize: bool = False


@dataclass
class FeedbackSection:
    mode: str = "sallm_full"
    queries_per_session: int = 20
    max_budget: int = 2000
    segment_len: int = 10
    retain_equal: bool = False
    one_shot: bool = False
    max_in_flight: int = 1
    recent_episodes: int = 30


@dataclass
class LlmSection:
    provider: str = "oracle_mock"
    judge_model: str = "gpt-4o-mini-2024-07-18"
    generate_model: str = "gpt-4o-mini-2024-07-18"
    judge_temperature: float = 0.0
    generate_temperature: float = 0.7
    conversation_context: bool = True
    epsilon: float = 0.0
    mock_seed: int = 0
    base_url: str = ""
    api_key_env: str = "SALLM_API_KEY"
    timeout: float = 60.0
    max_attempts: int = 5
    record: str = ""
    replay: str = ""
    price_in: float = 0.15
    price_out: float = 0.60


PROVIDERS = ("oracle_mock", "random", "echo", "http")


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    agent: AgentSection = field(default_factory=AgentSection)
    reward: RewardSection = field(default_factory=RewardSection)
    feedback: FeedbackSection = field(default_factory=FeedbackSection)
    llm: LlmSection = field(default_factory=LlmSection)

    # -- (de)serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        cfg = cls()
        for table, values in (data or {}).items():
            if table not in _SECTIONS:
                raise ConfigError(f"unknown config table [{table}]")
            if not isinstance(values, dict):
                raise ConfigError(f"[{table}] must be a table")
            for key, value in values.items():
                cfg.set(f"{table}.{key}", value)
        cfg.validate()
        return cfg

    def set(self, dotted: str, value):
        """Type-checked assignment of one leaf field, e.g. ``set("run.seed", 3)``."""
        table, _, key = dotted.partition(".")
        if table not in _SECTIONS or not key:
            raise ConfigError(f"unknown config key {dotted!r}")
        section = getattr(self, table)
        fields = {f.name: f for f in dataclasses.fields(section)}
        if key not in fields:
            raise ConfigError(f"unknown config key {dotted!r}")
        setattr(section, key, _coerce(dotted, value, type(getattr(_SECTIONS[table](), key))))

    def validate(self):
        r, f = self.run, self.feedback
        if r.desk_scale < 1:
            raise ConfigError("run.desk_scale must be >= 1")
        for name in ("total_steps", "pretrain_steps", "feedback_frequency", "eval_episodes", "buffer_capacity"):
            if getattr(r, name) < 1:
                raise ConfigError(f"run.{name} must be positive")
        for name in ("queries_per_session", "max_budget", "segment_len", "max_in_flight", "recent_episodes"):
            if getattr(f, name) < 1:
                raise ConfigError(f"feedback.{name} must be positive")
        try:
            FeedbackMode(f.mode)
        except ValueError:
            raise ConfigError(f"feedback.mode must be one of {[m.value for m in FeedbackMode]}") from None
        if self.llm.provider not in PROVIDERS:
            raise ConfigError(f"llm.provider must be one of {PROVIDERS}")
        try:
            task = envs.get_task(r.task)
        except KeyError as exc:
            raise ConfigError(str(exc)) from None
        if f.segment_len > task.episode_len:
            raise ConfigError("feedback.segment_len exceeds the episode length")
        if self.schedule()["pretrain_steps"] >= self.schedule()["total_steps"]:
            raise ConfigError("pretraining must end before total_steps")
        if not 0.0 <= self.llm.epsilon <= 1.0:
            raise ConfigError("llm.epsilon must lie in [0, 1]")
        return self

    def schedule(self) -> dict:
        """Step counts and budget after dividing by ``desk_scale``."""
        r, s = self.run, self.run.desk_scale
        freq = max(r.feedback_frequency // s, 1)
        return {
            "total_steps": max(r.total_steps // s, 1),
            "pretrain_steps": r.pretrain_steps // s,
            "random_steps": r.random_steps // s,
            "feedback_frequency": freq,
            "eval_frequency": max(r.eval_frequency // s, 1) if r.eval_frequency else freq,
            "max_budget": max(self.feedback.max_budget // s, 1),
        }

    @property
    def mode(self) -> FeedbackMode:
        return FeedbackMode(self.feedback.mode)

    @property
    def run_id(self) -> str:
        return self.run.run_id or f"{self.run.task}-{self.feedback.mode}-s{self.run.seed}"

    def sac_config(self) -> SacConfig:
        a = self.agent
        return SacConfig(
            hidden_layers=a.hidden_layers,
            hidden_units=a.hidden_units,
            lr=a.lr,
            batch_size=a.batch_size,
            discount=a.discount,
            tau=a.tau,
            init_temperature=a.init_temperature,
            critic_target_update_freq=a.critic_target_update_freq,
            alpha_lr=a.alpha_lr,
        )

    def llm_settings(self) -> LlmSettings:
        return LlmSettings(
            judge_model=self.llm.judge_model,
            generate_model=self.llm.generate_model,
            judge_temperature=self.llm.judge_temperature,
            generate_temperature=self.llm.generate_temperature,
            one_shot=self.feedback.one_shot,
            retain_equal=self.feedback.retain_equal,
            max_in_flight=self.feedback.max_in_flight,
            conversation_context=self.llm.conversation_context,
        )


_SECTIONS = {
    "run": RunSection,
    "agent": AgentSection,
    "reward": RewardSection,
    "feedback": FeedbackSection,
    "llm": LlmSection,
}


def _coerce(key, value, kind):
    if kind is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if kind is int:
        if isinstance(value, bool):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        if isinstance(value, int):
            return value
        if isinstance(value, str):
            try:
                return int(value.replace("_", ""))
            except ValueError:
                pass
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if kind is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


# ---------------------------------------------------------------------------
# providers


def build_provider(cfg: RunConfig, task: envs.TaskSpec):
    """The provider a run talks to; None for scripted runs. Replay never touches the network."""
    if not cfg.mode.uses_llm:
        return None
    llm = cfg.llm
    if llm.replay:
        return ReplayProvider(llm.replay)
    if llm.provider == "oracle_mock":
        inner = OracleMockProvider(task, epsilon=llm.epsilon, seed=llm.mock_seed)
    elif llm.provider == "random":
        inner = RandomJudgeProvider(seed=llm.mock_seed)
    elif llm.provider == "echo":
        inner = EchoProvider()
    else:
        if not llm.base_url:
            raise ConfigError("llm.base_url is required for the http provider")
        inner = HttpProvider(llm.base_url, llm.api_key_env, llm.timeout, llm.max_attempts)
    return RecordingProvider(inner, llm.record) if llm.record else inner


# ---------------------------------------------------------------------------
# metrics


def _plain(value):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


class MetricsLog:
    """One JSON record per line, keyed by (run_id, step, kind). Contains no wall-clock data."""

    def __init__(self, path, run_id: str):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.run_id = run_id
        self._fh = open(self.path, "w", encoding="utf-8")

    def write(self, kind: str, step: int, **fields):
        record = {"run_id": self.run_id, "step": int(step), "kind": kind, **_plain(fields)}
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


def read_metrics(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


@dataclass
class RunResult:
    run_dir: Path
    metrics_path: Path
    checkpoint_dir: Path
    final_eval: dict
    sessions: int
    reward_rounds: int
    budget: FeedbackBudget
    ledger: CostLedger


# ---------------------------------------------------------------------------
# evaluation


def greedy_action(actor: MLP, x, action_dims: int) -> np.ndarray:
    """Deterministic action of a SAC actor: the squashed mean."""
    out = actor(np.asarray(x, dtype=np.float64)[None, :])
    return np.tanh(out[0, :action_dims])


def evaluate_policy(policy, task: envs.TaskSpec, episodes: int, seed: int = 0) -> dict:
    """Run ``policy(x) -> action`` for ``episodes`` episodes; success rate and mean privileged return."""
    if episodes < 1:
        raise UndefinedMetricError("evaluation over zero episodes")
    env = envs.Env(task)
    successes, returns = [], []
    for e in range(episodes):
        x = env.reset(EVAL_SEED_BASE + seed * 10_000 + e)
        flags, total = [], 0.0
        for _ in range(task.episode_len):
            x, r, ok, _ = env.step(policy(x))
            flags.append(ok)
            total += r
        successes.append(envs.episode_success(flags))
        returns.append(total)
    return {"success_rate": float(np.mean(successes)), "mean_return": float(np.mean(returns)), "episodes": episodes}


def evaluate(checkpoint_dir, task: str | envs.TaskSpec, episodes: int = 10, seed: int = 0) -> dict:
    """Deterministic rollouts of the actor saved in ``checkpoint_dir``."""
    from .approx import CheckpointError, load_network

    task = envs.get_task(task) if isinstance(task, str) else task
    actor, _, meta = load_network(Path(checkpoint_dir) / "actor.ckpt")
    if meta.get("task") not in (None, task.name):
        raise CheckpointError(f"checkpoint was trained on {meta.get('task')}, not {task.name}")
    return evaluate_policy(lambda x: greedy_action(actor, x, task.action_dims), task, episodes, seed)


def reward_alignment_probe(reward_model, expert: TrajectorySegment, suboptimal: TrajectorySegment) -> dict:
    """Per-step rewards of both segments, min-max normalized over their union."""
    fn = reward_model.ensemble_reward if hasattr(reward_model, "ensemble_reward") else reward_model
    ex = np.asarray(fn(expert.states), dtype=np.float64).reshape(-1)
    sub = np.asarray(fn(suboptimal.states), dtype=np.float64).reshape(-1)
    both = np.concatenate([ex, sub])
    lo, span = both.min(), both.max() - both.min()
    degenerate = bool(span <= DEGENERATE_RANGE)
    scale = 1.0 if degenerate else span
    return {"expert": (ex - lo) / scale, "suboptimal": (sub - lo) / scale, "degenerate": degenerate}


# ---------------------------------------------------------------------------
# training


def _save_checkpoint(ckpt_dir: Path, agent: SacAgent, model: RewardEnsemble, meta: dict):
    save_network(ckpt_dir / "actor.ckpt", agent.actor, agent.actor_opt, meta)
    for i, (q, opt) in enumerate(zip(agent.critics, agent.critic_opts)):
        save_network(ckpt_dir / f"critic{i}.ckpt", q, opt, meta)
    for i, (m, opt) in enumerate(zip(model.members, model.opts)):
        save_network(ckpt_dir / f"reward{i}.ckpt", m, opt, meta)


class _Trainer:
    def __init__(self, cfg: RunConfig, provider=None):
        cfg.validate()
        self.cfg = cfg
        self.sched = cfg.schedule()
        self.task = envs.get_task(cfg.run.task)
        self.mode = cfg.mode
        seeds = np.random.SeedSequence([cfg.run.seed, 7919]).spawn(5)
        self.rng_act, self.rng_agent, self.rng_reward, self.rng_query, self.rng_intr = (np.random.default_rng(s) for s in seeds)
        obs, act = self.task.layout.total_dims, self.task.action_dims
        self.agent = SacAgent(obs, act, cfg.sac_config(), self.rng_agent)
        rw = cfg.reward
        self.model = RewardEnsemble(obs, self.rng_reward, rw.n_members, rw.hidden_layers, rw.hidden_units, rw.lr)
        self.buffer = ReplayBuffer(obs, act, min(cfg.run.buffer_capacity, self.sched["total_steps"]))
        self.dataset = PreferenceDataset()
        self.budget = FeedbackBudget(max_queries=self.sched["max_budget"], queries_per_session=cfg.feedback.queries_per_session)
        self.ledger = CostLedger(cfg.llm.price_in, cfg.llm.price_out)
        self.provider = provider if provider is not None else build_provider(cfg, self.task)
        self.settings = cfg.llm_settings()
        self.run_dir = Path(cfg.run.out_dir) / cfg.run_id
        self.reward_shift, self.reward_scale = 0.0, 1.0
        self.reward_ready = False
        self.sessions = 0
        self.reward_rounds = 0

    # -- rewards ----------------------------------------------------------------

    def _intrinsic(self, x2) -> float:
        n = self.buffer.size
        if n == 0:
            return 0.0
        m = min(n, self.cfg.agent.intrinsic_sample)
        idx = self.rng_intr.choice(n, size=m, replace=False) if m < n else np.arange(n)
        k = min(self.cfg.agent.intrinsic_k, m)
        d = float(kernels.kth_nearest_distance(x2[None, :], self.buffer.next_states[idx], k)[0])
        return float(np.log(max(d, 1e-6)))

    def _learned(self, x2) -> float:
        if not self.reward_ready:
            return 0.0
        r = float(self.model.ensemble_reward(x2[None, :])[0])
        return (r - self.reward_shift) / self.reward_scale

    def _relabel(self):
        from .agent import relabel

        n = relabel(self.buffer, self.model.ensemble_reward)
        if self.cfg.reward.renormalize and n > 1:
            r = self.buffer.stored_rewards[:n]
            self.reward_shift = float(r.mean())
            self.reward_scale = float(r.std()) or 1.0
            self.buffer.stored_rewards[:n] = (r - self.reward_shift) / self.reward_scale
        self.reward_ready = True

    # -- phases -------------------------------------------------------------------

    def _session(self, step: int, metrics: MetricsLog):
        fb = self.cfg.feedback
        try:
            report = run_feedback_session(
                self.mode,
                self.buffer,
                self.dataset,
                self.budget,
                self.task,
                fb.segment_len,
                self.rng_query,
                provider=self.provider,
                settings=self.settings,
                ledger=self.ledger,
                session_index=self.sessions,
                recent=fb.recent_episodes,
            )
        except ProviderError as exc:
            ckpt = self._checkpoint(step, {"aborted": True, "reason": str(exc)})
            self.dataset.export_jsonl(ckpt / "preferences.jsonl")
            metrics.write("abort", step, reason=str(exc), budget=dataclasses.asdict(self.budget))
            raise RunAborted(step, ckpt, exc) from exc
        self.sessions += 1
        fields = report.summary()
        fields["stats"] = session_stats(report.records) if report.records else None
        fields["queries"] = report.records
        fields["dataset_size"] = len(self.dataset)
        fields["cost"] = self.ledger.snapshot()
        added = report.valid + report.augment_accepted + (report.equal if self.settings.retain_equal else 0)
        if len(self.dataset) and added:
            curves = self.model.train(self.dataset, self.cfg.reward.epochs, self.cfg.reward.batch_size)
            self.reward_rounds += 1
            fields["reward_losses"] = [c[-1] for c in curves]
            fields["reward_accuracy"] = self.model.accuracy(self.dataset.triples)
            self._relabel()
        metrics.write("session", step, **fields)

    def _evaluate(self, step: int, metrics: MetricsLog) -> dict:
        res = evaluate_policy(
            lambda x: greedy_action(self.agent.actor, x, self.task.action_dims),
            self.task,
            self.cfg.run.eval_episodes,
            self.cfg.run.seed,
        )
        metrics.write("eval", step, **res)
        return res

    def _checkpoint(self, step: int, extra: dict | None = None) -> Path:
        ckpt = self.run_dir / str(step)
        meta = {"task": self.task.name, "step": step, "run_id": self.cfg.run_id, **(extra or {})}
        _save_checkpoint(ckpt, self.agent, self.model, meta)
        return ckpt

    def run(self) -> RunResult:
        cfg, sched, task = self.cfg, self.sched, self.task
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "config.json").write_text(
            json.dumps({"config": cfg.to_dict(), "schedule": sched}, indent=2, sort_keys=True) + "\n"
        )
        metrics = MetricsLog(self.run_dir / "metrics.jsonl", cfg.run_id)
        total, pretrain, freq = sched["total_steps"], sched["pretrain_steps"], sched["feedback_frequency"]
        random_steps = min(sched["random_steps"], pretrain)
        env = envs.Env(task)
        episode = 0
        x = env.reset(cfg.run.seed * 1_000_003 + episode)
        ep_return, ep_flags = 0.0, []
        final_eval = {}
        try:
            for step in range(total):
                if step < random_steps:
                    a = self.rng_act.uniform(-1.0, 1.0, task.action_dims)
                else:
                    a = self.agent.act(x)
                x2, r, ok, terminal = env.step(a)
                stored = self._intrinsic(x2) if step < pretrain else self._learned(x2)
                self.buffer.add(x, a, stored, x2, terminal, r, episode, env.t - 1)
                ep_return += r
                ep_flags.append(ok)
                x = x2
                if terminal:
                    if cfg.run.log_episodes:
                        metrics.write("episode", step + 1, episode=episode, **{"return": ep_return}, success=envs.episode_success(ep_flags))
                    episode += 1
                    x = env.reset(cfg.run.seed * 1_000_003 + episode)
                    ep_return, ep_flags = 0.0, []

                t = step + 1
                if t == pretrain:
                    self.agent.reset_critics()
                if (
                    t >= pretrain
                    and (t - pretrain) % freq == 0
                    and t + freq <= total
                    and not self.budget.exhausted
                    and len(self.buffer.recent_episodes(cfg.feedback.recent_episodes, cfg.feedback.segment_len)) >= 2
                ):
                    self._session(t, metrics)
                if step >= random_steps and self.buffer.size >= cfg.agent.batch_size:
                    self.agent.update(self.buffer)
                if t % sched["eval_frequency"] == 0 or t == total:
                    final_eval = self._evaluate(t, metrics)
            ckpt = self._checkpoint(total)
            self.dataset.export_jsonl(ckpt / "preferences.jsonl")
            metrics.write(
                "final",
                total,
                **final_eval,
                sessions=self.sessions,
                reward_rounds=self.reward_rounds,
                budget=dataclasses.asdict(self.budget),
                cost=self.ledger.snapshot(),
            )
        finally:
            metrics.close()
        return RunResult(
            self.run_dir,
            metrics.path,
            ckpt,
            final_eval,
            self.sessions,
            self.reward_rounds,
            self.budget,
            self.ledger,
        )


def train(cfg: RunConfig, provider=None) -> RunResult:
    """Run one training job; ``provider`` overrides the configured one."""
    return _Trainer(cfg, provider).run()
