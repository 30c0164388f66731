"""Chat-completions transport, offline providers, transcripts and cost accounting.

Every provider exposes ``complete(request) -> ChatResponse``:

* :class:`HttpProvider` talks to ``POST {base_url}/v1/chat/completions``.
* :class:`EchoProvider` returns the last user message.
* :class:`OracleMockProvider` answers judge prompts from trajectory geometry
  and generation prompts with a straight line to the target.
* :class:`RandomJudgeProvider` answers judge prompts with a fair coin.
* :class:`RecordingProvider` / :class:`ReplayProvider` write and serve
  JSONL transcripts keyed by a digest of the canonical request.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path

import httpx
import numpy as np

from . import textio
from .envs import TaskSpec

log = logging.getLogger(__name__)

JUDGE_MARKER = "Suppose you are a good robot trajectory evaluator"
GENERATE_MARKER = "Can you generate a new trajectory"

# USD per 1M tokens; back-solved from the reported GPT-4o-mini run cost
DEFAULT_PRICE_IN = 0.15
DEFAULT_PRICE_OUT = 0.60


class ProviderError(Exception):
    pass


class ProviderStartupError(ProviderError):
    pass


class ProviderConfigError(ProviderError):
    pass


class ProviderTransportError(ProviderError):
    pass


class ReplayMissError(ProviderError):
    pass


class UnrecognizedPromptError(ProviderError):
    pass


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0

    @classmethod
    def user(cls, content: str, model: str = "mock", temperature: float = 0.0) -> "ChatRequest":
        return cls(model, (("user", content),), temperature)

    def payload(self) -> dict:
        return {
            "model": self.model,
            "messages": [{"role": r, "content": c} for r, c in self.messages],
            "temperature": self.temperature,
        }

    def digest(self) -> str:
        canon = json.dumps(self.payload(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    @property
    def last_user(self) -> str:
        for role, content in reversed(self.messages):
            if role == "user":
                return content
        return ""


@dataclass(frozen=True)
class ChatResponse:
    content: str
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self):
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be non-negative")


def estimate_tokens(text: str) -> int:
    """Rough count (4 characters per token) used by offline providers."""
    return math.ceil(len(text) / 4)


def _mock_response(request: ChatRequest, content: str) -> ChatResponse:
    prompt = sum(estimate_tokens(c) for _, c in request.messages)
    return ChatResponse(content, prompt, estimate_tokens(content))


# ---------------------------------------------------------------------------
# cost


@dataclass
class CostLedger:
    price_in: float = DEFAULT_PRICE_IN
    price_out: float = DEFAULT_PRICE_OUT
    prompt_tokens: int = 0
    completion_tokens: int = 0
    calls: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @property
    def cost(self) -> float:
        return self.prompt_tokens * self.price_in / 1e6 + self.completion_tokens * self.price_out / 1e6

    def add(self, response: ChatResponse) -> "CostLedger":
        with self._lock:
            self.prompt_tokens += response.prompt_tokens
            self.completion_tokens += response.completion_tokens
            self.calls += 1
        return self

    def snapshot(self) -> dict:
        return {
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "llm_calls": self.calls,
            "cost_usd": round(self.cost, 6),
        }


def accumulate_cost(ledger: CostLedger, response: ChatResponse) -> CostLedger:
    return ledger.add(response)


# ---------------------------------------------------------------------------
# HTTP


class HttpProvider:
    """OpenAI-compatible chat-completions client with exponential-backoff retries."""

    RETRY_STATUS = {429, 500, 502, 503, 504}

    def __init__(
        self,
        base_url: str,
        api_key_env: str = "SALLM_API_KEY",
        timeout: float = 60.0,
        max_attempts: int = 5,
        backoff_base: float = 1.0,
        backoff_factor: float = 2.0,
        transport: httpx.BaseTransport | None = None,
        sleep=time.sleep,
    ):
        key = os.environ.get(api_key_env)
        if not key:
            raise ProviderStartupError(f"environment variable {api_key_env} is not set")
        self.url = base_url.rstrip("/") + "/v1/chat/completions"
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.backoff_factor = backoff_factor
        self.sleep = sleep
        self.client = httpx.Client(
            timeout=timeout,
            transport=transport,
            headers={"Authorization": f"Bearer {key}"},
        )

    def complete(self, request: ChatRequest) -> ChatResponse:
        last_error = None
        for attempt in range(self.max_attempts):
            if attempt:
                self.sleep(self.backoff_base * self.backoff_factor ** (attempt - 1))
            try:
                resp = self.client.post(self.url, json=request.payload())
            except httpx.TransportError as exc:
                last_error = f"transport error: {exc}"
                log.warning("attempt %d/%d failed: %s", attempt + 1, self.max_attempts, last_error)
                continue
            if resp.status_code in self.RETRY_STATUS:
                last_error = f"HTTP {resp.status_code}"
                log.warning("attempt %d/%d failed: %s", attempt + 1, self.max_attempts, last_error)
                continue
            if resp.status_code >= 400:
                raise ProviderConfigError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                body = resp.json()
                content = body["choices"][0]["message"]["content"] or ""
                usage = body.get("usage") or {}
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise ProviderTransportError(f"malformed completion body: {exc}") from exc
            return ChatResponse(content, int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0)))
        raise ProviderTransportError(f"giving up after {self.max_attempts} attempts ({last_error})")


# ---------------------------------------------------------------------------
# offline providers


class EchoProvider:
    def complete(self, request: ChatRequest) -> ChatResponse:
        return _mock_response(request, request.last_user)


class _Seeded:
    """Per-request RNG that does not depend on call interleaving."""

    def __init__(self, seed: int):
        self.seed = seed
        self._seen = defaultdict(int)
        self._lock = threading.Lock()

    def rng_for(self, request: ChatRequest) -> np.random.Generator:
        digest = request.digest()
        with self._lock:
            n = self._seen[digest]
            self._seen[digest] += 1
        return np.random.default_rng([self.seed, int(digest[:12], 16), n])


def _judge_reply(verdict: int) -> str:
    return f"Compared the final positions of both trajectories.\n2. Which Trajectory is Better?\n    {verdict}"


def judge_blocks(prompt: str, task: TaskSpec):
    """The two trajectory blocks of a judge prompt, as (channels, target) pairs."""
    i1, i2 = prompt.find("Trajectory 1:\n"), prompt.find("Trajectory 2:\n")
    if i1 < 0 or i2 < 0:
        raise UnrecognizedPromptError("judge prompt without two trajectory blocks")
    return textio.parse_trajectory_block(prompt, task, i1), textio.parse_trajectory_block(prompt, task, i2)


def progress_distance(channels: dict, target: np.ndarray, task: TaskSpec, last_k: int = 3) -> float:
    """Mean over the final ``last_k`` steps of the task's distance-to-goal."""
    pos = channels[task.position_key][-last_k:]
    if "obj" in channels:
        obj = channels["obj"][-last_k:]
        d = np.linalg.norm(pos - obj, axis=1) + 2.0 * np.linalg.norm(obj - target, axis=1)
    else:
        d = np.linalg.norm(pos - target, axis=1)
    return float(np.mean(d))


def straight_line(first: dict, target: np.ndarray, H: int, task: TaskSpec) -> dict:
    """Linear path from the first state to the goal; manipulation tasks go via the object."""
    if H == 1:
        return {k: v[:1].copy() for k, v in first.items()}
    frac = np.linspace(0.0, 1.0, H)[:, None]
    start = first[task.position_key][0]
    if "obj" not in first:
        return {task.position_key: start + (target - start) * frac}
    obj0 = first["obj"][0]
    n_approach = max(H // 2, 1)
    approach = start + (obj0 - start) * np.linspace(0.0, 1.0, n_approach)[:, None]
    push = obj0 + (target - obj0) * np.linspace(0.0, 1.0, H - n_approach + 1)[1:, None]
    tcp = np.vstack([approach, push])
    obj = np.vstack([np.repeat(obj0[None, :], n_approach, axis=0), push])
    return {task.position_key: tcp, "obj": obj}


class OracleMockProvider:
    """Deterministic stand-in for the LLM.

    Judge prompts: the trajectory whose last three steps are nearer the goal
    wins; each verdict is flipped with probability ``epsilon``. Generation
    prompts: a straight-line trajectory from the requested first state.
    """

    def __init__(self, task: TaskSpec, epsilon: float = 0.0, seed: int = 0, last_k: int = 3):
        self.task = task
        self.epsilon = epsilon
        self.last_k = last_k
        self._rng = _Seeded(seed)

    def judge(self, prompt: str, rng: np.random.Generator | None = None) -> int:
        (ca, ta), (cb, tb) = judge_blocks(prompt, self.task)
        da = progress_distance(ca, ta, self.task, self.last_k)
        db = progress_distance(cb, tb, self.task, self.last_k)
        if da == db:
            return 0
        verdict = 1 if da < db else 2
        if self.epsilon > 0 and rng is not None and rng.random() < self.epsilon:
            verdict = 3 - verdict
        return verdict

    def generate(self, prompt: str) -> str:
        m = re.search(r"the step size should be (\d+)", prompt)
        if not m:
            raise UnrecognizedPromptError("generation prompt without a step count")
        H = int(m.group(1))
        start = prompt.find("{", m.end())
        channels, target = textio.parse_trajectory_block(prompt, self.task, start)
        path = straight_line(channels, target, H, self.task)
        return textio.format_block(path, target)

    def complete(self, request: ChatRequest) -> ChatResponse:
        prompt = request.last_user
        if prompt.startswith(JUDGE_MARKER):
            return _mock_response(request, _judge_reply(self.judge(prompt, self._rng.rng_for(request))))
        if GENERATE_MARKER in prompt:
            return _mock_response(request, self.generate(prompt))
        raise UnrecognizedPromptError(prompt[:80])


class RandomJudgeProvider:
    """Answers every judge prompt with 1 or 2 uniformly at random."""

    def __init__(self, seed: int = 0):
        self._rng = _Seeded(seed)

    def complete(self, request: ChatRequest) -> ChatResponse:
        if not request.last_user.startswith(JUDGE_MARKER):
            raise UnrecognizedPromptError(request.last_user[:80])
        verdict = int(self._rng.rng_for(request).integers(1, 3))
        return _mock_response(request, _judge_reply(verdict))


# ---------------------------------------------------------------------------
# transcripts


@dataclass(frozen=True)
class TranscriptRecord:
    request_digest: str
    messages: list
    response: str
    prompt_tokens: int
    completion_tokens: int
    timestamp: float

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, ensure_ascii=False)


def read_transcript(path) -> list[TranscriptRecord]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            records.append(TranscriptRecord(**json.loads(line)))
    return records


class RecordingProvider:
    """Wraps a provider and appends one transcript line per completed call."""

    def __init__(self, inner, path):
        self.inner = inner
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> ChatResponse:
        response = self.inner.complete(request)
        record = TranscriptRecord(
            request_digest=request.digest(),
            messages=[list(m) for m in request.messages],
            response=response.content,
            prompt_tokens=response.prompt_tokens,
            completion_tokens=response.completion_tokens,
            timestamp=time.time(),
        )
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(record.to_json() + "\n")
        return response


class ReplayProvider:
    """Serves recorded responses by request digest, in recorded order.

    Once a digest's queue is drained, its last response keeps being served.
    """

    def __init__(self, records):
        if isinstance(records, (str, Path)):
            records = read_transcript(records)
        self._queues: dict[str, deque] = defaultdict(deque)
        self._last: dict[str, TranscriptRecord] = {}
        for r in records:
            self._queues[r.request_digest].append(r)
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> ChatResponse:
        digest = request.digest()
        with self._lock:
            queue = self._queues.get(digest)
            if queue:
                rec = queue.popleft()
                self._last[digest] = rec
            elif digest in self._last:
                rec = self._last[digest]
            else:
                raise ReplayMissError(f"no recorded response for request {digest[:12]}")
        return ChatResponse(rec.response, rec.prompt_tokens, rec.completion_tokens)


def complete(provider, request: ChatRequest, ledger: CostLedger | None = None) -> ChatResponse:
    response = provider.complete(request)
    if ledger is not None:
        ledger.add(response)
    return response
