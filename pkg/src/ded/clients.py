"""Teacher-sampler and judge clients.

Two implementations share one contract: an HTTP chat-completion client for
real runs, and a deterministic mock for offline runs and tests. A caching
wrapper keyed on request content makes re-runs free, and a fault injector
lets tests script transport failures.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence, TypeVar

from .filtering import normalize_answer
from .records import VerificationVerdict

T = TypeVar("T")
R = TypeVar("R")


class ClientError(Exception):
    retryable = False


class AuthenticationError(ClientError):
    retryable = False


class TransportError(ClientError):
    retryable = True


class SchemaError(ClientError):
    """Response shape violation, including partial batches. Not retryable."""
    retryable = False


class RetryBudgetExceededError(ClientError):
    retryable = False


@dataclass
class SamplingRequest:
    prompt: str
    teacher_id: str
    samples: int = 1
    temperature: float = 0.7
    max_tokens: int = 32768
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    def cache_key(self) -> str:
        return _digest({"kind": "sample", "prompt": self.prompt, "teacher_id": self.teacher_id,
                        "samples": self.samples, "temperature": self.temperature,
                        "max_tokens": self.max_tokens, "seed": self.seed})


@dataclass
class JudgeRequest:
    question: str
    candidate_answer: str
    ground_truth: str
    rubric: str = "default"

    def __post_init__(self) -> None:
        for name in ("question", "candidate_answer", "ground_truth", "rubric"):
            if not getattr(self, name):
                raise ValueError(f"judge request field {name} must be non-empty")

    def cache_key(self) -> str:
        return _digest({"kind": "judge", "question": self.question,
                        "candidate_answer": self.candidate_answer,
                        "ground_truth": self.ground_truth, "rubric": self.rubric})


def _digest(payload: dict[str, Any]) -> str:
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


JUDGE_RUBRICS = {
    "default": (
        "Grade the candidate answer against the reference.\n"
        "Question:\n{question}\n\nCandidate answer:\n{candidate_answer}\n\n"
        "Reference answer:\n{ground_truth}\n\n"
        "Reply with exactly one line: VERDICT: correct or VERDICT: incorrect."
    ),
}


def parse_judge_reply(reply: str) -> str:
    """Strict marker convention: a VERDICT line decides, anything else is unverifiable."""
    for line in reply.splitlines():
        stripped = line.strip()
        if stripped.startswith("VERDICT:"):
            value = stripped[len("VERDICT:"):].strip().lower()
            if value in ("correct", "incorrect"):
                return value
    return "unverifiable"


@dataclass
class RetryPolicy:
    """Exponential backoff over a fixed attempt budget."""

    budget: int = 3
    base_delay: float = 0.5
    max_delay: float = 30.0
    sleep: Callable[[float], None] = time.sleep

    def run(self, fn: Callable[[], T], on_retry: Callable[[], None] | None = None) -> T:
        last: ClientError | None = None
        for attempt in range(self.budget):
            try:
                return fn()
            except ClientError as exc:
                if not exc.retryable:
                    raise
                last = exc
                if attempt + 1 < self.budget:
                    if on_retry:
                        on_retry()
                    self.sleep(min(self.base_delay * (2 ** attempt), self.max_delay))
        raise RetryBudgetExceededError(
            f"retry budget of {self.budget} attempts exhausted: {last}") from last


class Client:
    """Contract shared by all sampler/judge backends."""

    def sample_trajectories(self, request: SamplingRequest) -> list[str]:
        """Exactly request.samples response texts, indexed 0..samples-1."""
        raise NotImplementedError

    def judge(self, request: JudgeRequest) -> VerificationVerdict:
        raise NotImplementedError


class HttpClient(Client):
    """Chat-completion style JSON endpoint, configured via environment.

    Transport failures are retried with exponential backoff up to the
    policy budget; partial batches are an error, never silently truncated.
    """

    def __init__(self,
                 base_url: str | None = None,
                 api_key: str | None = None,
                 retry: RetryPolicy | None = None,
                 timeout: float = 120.0,
                 transport: Callable[[str, dict, dict], tuple[int, bytes]] | None = None):
        self.base_url = (base_url or os.environ.get("DED_API_BASE", "")).rstrip("/")
        self.api_key = api_key or os.environ.get("DED_API_KEY", "")
        self.retry = retry or RetryPolicy()
        self.timeout = timeout
        self.transport = transport or self._urllib_transport
        self.retries_total = 0
        self.requests_total = 0

    def _urllib_transport(self, url: str, payload: dict, headers: dict) -> tuple[int, bytes]:
        req = urllib.request.Request(
            url, data=json.dumps(payload).encode("utf-8"),
            headers={"Content-Type": "application/json", **headers}, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return resp.status, resp.read()
        except urllib.error.HTTPError as exc:
            return exc.code, exc.read()
        except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
            raise TransportError(f"transport failure: {exc}") from exc

    def _post(self, payload: dict) -> dict:
        if not self.base_url:
            raise AuthenticationError("no endpoint configured (set DED_API_BASE)")
        url = f"{self.base_url}/chat/completions"
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}

        def attempt() -> dict:
            self.requests_total += 1
            status, body = self.transport(url, payload, headers)
            if status in (401, 403):
                raise AuthenticationError(f"authentication failed (HTTP {status})")
            if status == 429 or status >= 500:
                raise TransportError(f"transient HTTP {status}")
            if status != 200:
                raise SchemaError(f"unexpected HTTP {status}: {body[:200]!r}")
            try:
                return json.loads(body.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise SchemaError(f"response is not JSON: {exc}") from exc

        def count_retry() -> None:
            self.retries_total += 1

        return self.retry.run(attempt, on_retry=count_retry)

    def sample_trajectories(self, request: SamplingRequest) -> list[str]:
        payload = {
            "model": request.teacher_id,
            "messages": [{"role": "user", "content": request.prompt}],
            "n": request.samples,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.seed is not None:
            payload["seed"] = request.seed
        data = self._post(payload)
        try:
            texts = [c["message"]["content"] for c in data["choices"]]
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed completion response: {exc}") from exc
        if len(texts) != request.samples:
            raise SchemaError(
                f"partial batch: got {len(texts)} of {request.samples} samples")
        return texts

    def judge(self, request: JudgeRequest) -> VerificationVerdict:
        template = JUDGE_RUBRICS.get(request.rubric)
        if template is None:
            raise SchemaError(f"unknown judge rubric {request.rubric!r}")
        prompt = template.format(question=request.question,
                                 candidate_answer=request.candidate_answer,
                                 ground_truth=request.ground_truth)
        data = self._post({
            "model": "judge",
            "messages": [{"role": "user", "content": prompt}],
            "n": 1,
            "temperature": 0.0,
            "max_tokens": 64,
        })
        try:
            reply = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise SchemaError(f"malformed judge response: {exc}") from exc
        return VerificationVerdict(status=parse_judge_reply(reply), checker="judge", detail=reply)


class FaultInjector:
    """Scripted failures for tests: a queue of exceptions per request kind."""

    def __init__(self, plan: dict[str, list[ClientError | None]] | None = None):
        self.plan = {k: list(v) for k, v in (plan or {}).items()}
        self.fired: dict[str, int] = {}

    def check(self, kind: str) -> None:
        queue = self.plan.get(kind)
        if queue:
            nxt = queue.pop(0)
            if nxt is not None:
                self.fired[kind] = self.fired.get(kind, 0) + 1
                raise nxt


def load_mock_fixtures(path: str | Path) -> dict[str, Any]:
    """Fixture JSONL: sample lines carry (teacher_id, prompt, responses),
    judge lines carry (question, candidate_answer, status and/or reply)."""
    samples: dict[tuple[str, str], list[str]] = {}
    judges: dict[tuple[str, str], dict[str, Any]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            if row.get("kind") == "sample":
                samples[(row["teacher_id"], row["prompt"])] = list(row["responses"])
            elif row.get("kind") == "judge":
                judges[(row["question"], row["candidate_answer"])] = row
    return {"samples": samples, "judges": judges}


def _stable_int(*parts: Any) -> int:
    blob = "|".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big")


class MockClient(Client):
    """Deterministic offline stand-in for both teacher and judge roles.

    Responses come from a fixture table when one matches; otherwise a
    well-formed trajectory is synthesized from a seeded hash, so two runs
    with the same seed are byte-identical. The fallback judge compares the
    candidate against the reference with the rule normalizer.
    """

    def __init__(self,
                 fixtures: str | Path | dict[str, Any] | None = None,
                 seed: int = 0,
                 faults: FaultInjector | None = None,
                 retry: RetryPolicy | None = None,
                 allow_synthesis: bool = True):
        if isinstance(fixtures, (str, Path)):
            fixtures = load_mock_fixtures(fixtures)
        fixtures = fixtures or {}
        self.samples = dict(fixtures.get("samples", {}))
        self.judges = dict(fixtures.get("judges", {}))
        self.seed = seed
        self.faults = faults or FaultInjector()
        self.retry = retry or RetryPolicy(sleep=lambda _: None)
        self.allow_synthesis = allow_synthesis
        self.retries_total = 0
        self.requests_total = 0

    def _synthesize(self, request: SamplingRequest, index: int) -> str:
        h = _stable_int(self.seed, request.teacher_id, request.prompt,
                        request.temperature, index)
        steps = 3 + h % 4
        filler = " ".join(
            f"Step {i + 1}: consider case {(h >> (4 * i)) % 97}." for i in range(steps))
        answer = h % 1000
        return f"<think>{filler}</think>The answer is \\boxed{{{answer}}}."

    def sample_trajectories(self, request: SamplingRequest) -> list[str]:
        def attempt() -> list[str]:
            self.requests_total += 1
            self.faults.check("sample")
            canned = self.samples.get((request.teacher_id, request.prompt), [])
            texts = list(canned[:request.samples])
            if len(texts) < request.samples:
                if not self.allow_synthesis and not canned:
                    raise SchemaError(
                        f"no fixture for teacher {request.teacher_id!r} and synthesis disabled")
                texts += [self._synthesize(request, i)
                          for i in range(len(texts), request.samples)]
            return texts

        def count_retry() -> None:
            self.retries_total += 1

        return self.retry.run(attempt, on_retry=count_retry)

    def judge(self, request: JudgeRequest) -> VerificationVerdict:
        def attempt() -> VerificationVerdict:
            self.requests_total += 1
            self.faults.check("judge")
            row = self.judges.get((request.question, request.candidate_answer))
            if row is not None:
                reply = row.get("reply", f"VERDICT: {row.get('status', '')}")
                return VerificationVerdict(status=parse_judge_reply(reply),
                                           checker="judge", detail=reply)
            correct = normalize_answer(request.candidate_answer) == normalize_answer(
                request.ground_truth)
            status = "correct" if correct else "incorrect"
            return VerificationVerdict(status=status, checker="judge",
                                       detail=f"VERDICT: {status}")

        def count_retry() -> None:
            self.retries_total += 1

        return self.retry.run(attempt, on_retry=count_retry)


class CachingClient(Client):
    """On-disk request cache so pipeline re-runs never re-bill sampling.

    Keys cover prompt, model, seed, temperature, and batch shape; values
    are JSON files under the cache directory.
    """

    def __init__(self, inner: Client, cache_dir: str | Path):
        self.inner = inner
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    def _path(self, key: str) -> Path:
        return self.cache_dir / f"{key}.json"

    def _read(self, key: str) -> dict | None:
        path = self._path(key)
        if not path.exists():
            return None
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)

    def _write(self, key: str, value: dict) -> None:
        path = self._path(key)
        tmp = path.with_suffix(".tmp")
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(value, fh, sort_keys=True, ensure_ascii=False)
        tmp.replace(path)

    def sample_trajectories(self, request: SamplingRequest) -> list[str]:
        key = request.cache_key()
        with self._lock:
            cached = self._read(key)
        if cached is not None:
            with self._lock:
                self.hits += 1
            return list(cached["responses"])
        responses = self.inner.sample_trajectories(request)
        with self._lock:
            self.misses += 1
            self._write(key, {"responses": responses})
        return responses

    def judge(self, request: JudgeRequest) -> VerificationVerdict:
        key = request.cache_key()
        with self._lock:
            cached = self._read(key)
        if cached is not None:
            with self._lock:
                self.hits += 1
            return VerificationVerdict(status=cached["status"], checker="judge",
                                       detail=cached["detail"])
        verdict = self.inner.judge(request)
        with self._lock:
            self.misses += 1
            self._write(key, {"status": verdict.status, "detail": verdict.detail})
        return verdict


def map_concurrent(fn: Callable[[T], R], items: Sequence[T], max_in_flight: int = 1) -> list[R]:
    """Apply fn to every item with bounded concurrency, preserving input order."""
    if max_in_flight <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(fn, items))
