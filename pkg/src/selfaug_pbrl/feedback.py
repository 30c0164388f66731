"""Preference providers and the query protocol.

A query samples two segments from recent episodes and labels them in one of
five ways (:class:`FeedbackMode`). LLM labels are double-checked by asking
again with the trajectories swapped; only an order-consistent pair of
verdicts yields a label. Winners of valid queries can be handed back to the
LLM, which writes an imagined better trajectory from the same first state;
that trajectory is stored as ``(generated, winner, y=0)``.
"""

from __future__ import annotations

import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import textio
from .core import PreferenceTriple, Source, TrajectorySegment
from .envs import TaskSpec
from .llmclient import ChatRequest, CostLedger
from .textio import JudgeReply, TrajectoryError, UnparseableReplyError, Verdict

log = logging.getLogger(__name__)

RECENT_EPISODES = 30


class FeedbackMode(enum.Enum):
    SCRIPTED = "scripted"
    LLM_ONLY = "llm_only"
    SALLM_FULL = "sallm_full"
    AUGMENT_ONLY = "augment_only"
    NO_DOUBLE_CHECK = "no_double_check"

    @property
    def uses_llm(self) -> bool:
        return self is not FeedbackMode.SCRIPTED

    @property
    def augments(self) -> bool:
        return self in (FeedbackMode.SALLM_FULL, FeedbackMode.AUGMENT_ONLY)


class Decision(enum.Enum):
    VALID = "valid"
    DISCARD = "discard"
    EQUAL = "equal"


class SyntheticSegmentError(ValueError):
    """The scripted teacher was asked to score an imagined trajectory."""


class UndefinedMetricError(ValueError):
    pass


@dataclass
class FeedbackBudget:
    max_queries: int = 2000
    queries_per_session: int = 20
    used_queries: int = 0
    llm_calls: int = 0
    discarded: int = 0
    parse_failures: int = 0
    equal: int = 0
    augment_attempts: int = 0
    augment_accepted: int = 0

    @property
    def remaining(self) -> int:
        return self.max_queries - self.used_queries

    @property
    def exhausted(self) -> bool:
        return self.used_queries >= self.max_queries


@dataclass
class LlmSettings:
    judge_model: str = "gpt-4o-mini-2024-07-18"
    generate_model: str = "gpt-4o-mini-2024-07-18"
    judge_temperature: float = 0.0
    generate_temperature: float = 0.7
    one_shot: bool = False
    retain_equal: bool = False
    max_in_flight: int = 1
    # send the first judge exchange along with the generation prompt
    conversation_context: bool = True


@dataclass
class DoubleCheckResult:
    first_verdict: Verdict | None
    swapped_verdict: Verdict | None
    decision: Decision
    label: float | None = None
    parse_failure: bool = False
    context: tuple = field(default=(), repr=False)


# ---------------------------------------------------------------------------
# scripted teacher


def scripted_label(seg_a: TrajectorySegment, seg_b: TrajectorySegment, purpose: str = "scripted_label") -> float:
    """0 if seg_a's privileged return is at least seg_b's, else 1."""
    if seg_a.synthetic or seg_b.synthetic:
        raise SyntheticSegmentError("the scripted teacher never scores generated trajectories")
    return 0.0 if seg_a.oracle_return(purpose) >= seg_b.oracle_return(purpose) else 1.0


def label_accuracy(triples) -> float:
    """Agreement of sampled-triple labels with the scripted teacher on the same pairs."""
    sampled = [t for t in triples if t.source is Source.SAMPLED]
    if not sampled:
        raise UndefinedMetricError("label accuracy of an empty set")
    hits = sum(t.label == scripted_label(t.seg0, t.seg1, purpose="metric") for t in sampled)
    return hits / len(sampled)


# ---------------------------------------------------------------------------
# LLM judging


def combine_verdicts(first: Verdict | None, swapped: Verdict | None, retain_equal: bool = False) -> tuple[Decision, float | None]:
    """Map the (original order, swapped order) verdict pair to a decision and label."""
    if first is Verdict.FIRST and swapped is Verdict.SECOND:
        return Decision.VALID, 0.0
    if first is Verdict.SECOND and swapped is Verdict.FIRST:
        return Decision.VALID, 1.0
    if retain_equal and first is Verdict.UNSURE and swapped is Verdict.UNSURE:
        return Decision.EQUAL, 0.5
    return Decision.DISCARD, None


def _run_requests(provider, requests, max_in_flight, ledger):
    if max_in_flight > 1 and len(requests) > 1:
        with ThreadPoolExecutor(max_workers=min(max_in_flight, len(requests))) as pool:
            responses = list(pool.map(provider.complete, requests))
    else:
        responses = [provider.complete(r) for r in requests]
    if ledger is not None:
        for r in responses:
            ledger.add(r)
    return responses


def _parse(raw: str) -> Verdict | None:
    try:
        return textio.parse_judge_reply(raw).verdict
    except UnparseableReplyError:
        return None


def judge_request(text_a, text_b, task: TaskSpec, H: int, settings: LlmSettings) -> ChatRequest:
    prompt = textio.build_judge_prompt(text_a, text_b, task, H, one_shot=settings.one_shot)
    return ChatRequest(settings.judge_model, (("user", prompt),), settings.judge_temperature)


def double_checked_judge(
    provider,
    seg_a: TrajectorySegment,
    seg_b: TrajectorySegment,
    task: TaskSpec,
    budget: FeedbackBudget | None = None,
    settings: LlmSettings | None = None,
    ledger: CostLedger | None = None,
) -> DoubleCheckResult:
    """Judge (A, B) and (B, A); keep the label only if the verdicts flip consistently."""
    settings = settings or LlmSettings()
    if budget is not None and budget.exhausted:
        raise RuntimeError("feedback budget exhausted")
    text_a, text_b = textio.serialize_segment(seg_a, task), textio.serialize_segment(seg_b, task)
    H = seg_a.H
    requests = [judge_request(text_a, text_b, task, H, settings), judge_request(text_b, text_a, task, H, settings)]
    responses = _run_requests(provider, requests, settings.max_in_flight, ledger)
    first, swapped = _parse(responses[0].content), _parse(responses[1].content)
    parse_failure = first is None or swapped is None
    if parse_failure:
        decision, label = Decision.DISCARD, None
    else:
        decision, label = combine_verdicts(first, swapped, settings.retain_equal)
    if budget is not None:
        budget.llm_calls += 2
        budget.used_queries += 1
        if parse_failure:
            budget.parse_failures += 1
        elif decision is Decision.DISCARD:
            budget.discarded += 1
        if first is Verdict.UNSURE and swapped is Verdict.UNSURE:
            budget.equal += 1
    context = (("user", requests[0].messages[0][1]), ("assistant", responses[0].content))
    return DoubleCheckResult(first, swapped, decision, label, parse_failure, context)


def single_judge(provider, seg_a, seg_b, task, budget=None, settings=None, ledger=None):
    """One judge call in the given order; returns (verdict or None, context)."""
    settings = settings or LlmSettings()
    text_a, text_b = textio.serialize_segment(seg_a, task), textio.serialize_segment(seg_b, task)
    request = judge_request(text_a, text_b, task, seg_a.H, settings)
    (response,) = _run_requests(provider, [request], 1, ledger)
    verdict = _parse(response.content)
    if budget is not None:
        budget.llm_calls += 1
        budget.used_queries += 1
        if verdict is None:
            budget.parse_failures += 1
        elif verdict is Verdict.UNSURE:
            budget.equal += 1
    return verdict, (("user", request.messages[0][1]), ("assistant", response.content))


def self_augment(
    provider,
    preferred: TrajectorySegment,
    task: TaskSpec,
    budget: FeedbackBudget | None = None,
    settings: LlmSettings | None = None,
    ledger: CostLedger | None = None,
    context: tuple = (),
) -> tuple[PreferenceTriple | None, str]:
    """Ask for an imagined better trajectory from the winner's first state.

    Returns ``(triple, "accepted")`` or ``(None, reason)`` where reason is a
    :class:`TrajectoryError` code.
    """
    settings = settings or LlmSettings()
    text = textio.serialize_segment(preferred, task)
    prompt = textio.build_generate_prompt(text, task, preferred.H)
    messages = (tuple(context) if settings.conversation_context else ()) + (("user", prompt),)
    request = ChatRequest(settings.generate_model, messages, settings.generate_temperature)
    (response,) = _run_requests(provider, [request], 1, ledger)
    if budget is not None:
        budget.llm_calls += 1
        budget.augment_attempts += 1
    try:
        gen = textio.parse_generated_trajectory(response.content, task, preferred.H, preferred.states[0])
    except TrajectoryError as exc:
        log.debug("augmentation discarded: %s", exc)
        return None, exc.code
    generated = textio.generated_to_segment(gen, preferred, task)
    if budget is not None:
        budget.augment_accepted += 1
    return PreferenceTriple(generated, preferred, 0.0, Source.AUGMENTED), "accepted"


# ---------------------------------------------------------------------------
# sessions


def sample_pair(buffer, H: int, rng: np.random.Generator, recent: int = RECENT_EPISODES, layout=None):
    """Two segments with uniform random starts from distinct recent episodes."""
    episodes = buffer.recent_episodes(recent, H)
    if len(episodes) < 2:
        raise ValueError("need at least two episodes of length >= H to sample a pair")
    ea = episodes[int(rng.integers(len(episodes)))]
    eb = ea
    while eb == ea:
        eb = episodes[int(rng.integers(len(episodes)))]
    segs = []
    for e in (ea, eb):
        length = buffer.episodes[e][1]
        start = int(rng.integers(0, length - H + 1))
        segs.append(buffer.segment(e, start, H, layout))
    return segs[0], segs[1]


@dataclass
class SessionReport:
    session_index: int
    queries: int = 0
    valid: int = 0
    discarded: int = 0
    parse_failures: int = 0
    equal: int = 0
    augment_attempts: int = 0
    augment_accepted: int = 0
    llm_calls: int = 0
    tokens: int = 0
    records: list = field(default_factory=list)
    stopped_early: bool = False

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("records")
        return d


def _verdict_code(v: Verdict | None):
    return None if v is None else v.value


def run_feedback_session(
    mode: FeedbackMode,
    buffer,
    dataset,
    budget: FeedbackBudget,
    task: TaskSpec,
    H: int,
    rng: np.random.Generator,
    provider=None,
    settings: LlmSettings | None = None,
    ledger: CostLedger | None = None,
    session_index: int = 0,
    recent: int = RECENT_EPISODES,
) -> SessionReport:
    """Up to ``queries_per_session`` queries; stops early when the budget runs out.

    Each entry of ``report.records`` describes one query: issued verdicts,
    decision, label, the scripted teacher's label on the same pair (metrics
    only) and augmentation outcome.
    """
    settings = settings or LlmSettings()
    if mode.uses_llm and provider is None:
        raise ValueError(f"mode {mode.value} needs an LLM provider")
    report = SessionReport(session_index)
    start_calls = budget.llm_calls
    start_tokens = (ledger.prompt_tokens + ledger.completion_tokens) if ledger else 0
    for _ in range(budget.queries_per_session):
        if budget.exhausted:
            report.stopped_early = True
            break
        seg_a, seg_b = sample_pair(buffer, H, rng, recent, task.layout)
        record = {"episodes": [seg_a.episode_id, seg_b.episode_id], "starts": [seg_a.start_step, seg_b.start_step]}
        label, winner, context = None, None, ()
        if mode is FeedbackMode.SCRIPTED:
            budget.used_queries += 1
            label = scripted_label(seg_a, seg_b)
            record.update(verdicts=[], decision=Decision.VALID.value, parse_failure=False)
            dataset.append(PreferenceTriple(seg_a, seg_b, label))
        elif mode in (FeedbackMode.LLM_ONLY, FeedbackMode.SALLM_FULL):
            res = double_checked_judge(provider, seg_a, seg_b, task, budget, settings, ledger)
            label, context = res.label, res.context
            record.update(
                verdicts=[_verdict_code(res.first_verdict), _verdict_code(res.swapped_verdict)],
                decision=res.decision.value,
                parse_failure=res.parse_failure,
            )
            if label is not None:
                dataset.append(PreferenceTriple(seg_a, seg_b, label))
        else:
            verdict, context = single_judge(provider, seg_a, seg_b, task, budget, settings, ledger)
            if verdict is Verdict.FIRST:
                label = 0.0
            elif verdict is Verdict.SECOND:
                label = 1.0
            elif verdict is Verdict.UNSURE and settings.retain_equal:
                label = 0.5
            decision = Decision.VALID if label in (0.0, 1.0) else (Decision.EQUAL if label == 0.5 else Decision.DISCARD)
            if verdict is not None and decision is Decision.DISCARD:
                budget.discarded += 1
            record.update(verdicts=[_verdict_code(verdict)], decision=decision.value, parse_failure=verdict is None)
            if label is not None and mode is FeedbackMode.NO_DOUBLE_CHECK:
                dataset.append(PreferenceTriple(seg_a, seg_b, label))
        record["label"] = label
        record["oracle_label"] = scripted_label(seg_a, seg_b, purpose="metric")
        if label == 0.0:
            winner = seg_a
        elif label == 1.0:
            winner = seg_b
        report.queries += 1
        report.valid += label in (0.0, 1.0)
        report.equal += all(v == Verdict.UNSURE.value for v in record["verdicts"]) and bool(record["verdicts"])
        report.parse_failures += record["parse_failure"]
        report.discarded += record["decision"] == Decision.DISCARD.value and not record["parse_failure"]
        if mode.augments and winner is not None:
            triple, reason = self_augment(provider, winner, task, budget, settings, ledger, context)
            report.augment_attempts += 1
            record["augment"] = reason
            if triple is not None:
                dataset.append(triple)
                report.augment_accepted += 1
        report.records.append(record)
    report.llm_calls = budget.llm_calls - start_calls
    if ledger is not None:
        report.tokens = ledger.prompt_tokens + ledger.completion_tokens - start_tokens
    return report


def session_stats(records) -> dict:
    """Label accuracy, discard / parse-failure / equal rates from per-query records."""
    records = list(records)
    if not records:
        raise UndefinedMetricError("no queries recorded")
    n = len(records)
    labelled = [r for r in records if r.get("label") in (0.0, 1.0)]
    stats = {
        "queries": n,
        "discard_rate": sum(r["decision"] == "discard" and not r["parse_failure"] for r in records) / n,
        "parse_failure_rate": sum(bool(r["parse_failure"]) for r in records) / n,
        "equal_rate": sum(bool(r["verdicts"]) and all(v == 0 for v in r["verdicts"]) for r in records) / n,
        "label_accuracy": (sum(r["label"] == r["oracle_label"] for r in labelled) / len(labelled)) if labelled else None,
    }
    attempts = [r for r in records if "augment" in r]
    stats["augment_acceptance_rate"] = (
        sum(r["augment"] == "accepted" for r in attempts) / len(attempts) if attempts else None
    )
    return stats
