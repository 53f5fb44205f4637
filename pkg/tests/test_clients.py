from __future__ import annotations

import json

import pytest

from ded.clients import (AuthenticationError, CachingClient, FaultInjector, HttpClient,
                         JudgeRequest, MockClient, RetryBudgetExceededError, RetryPolicy,
                         SamplingRequest, SchemaError, TransportError, load_mock_fixtures,
                         map_concurrent, parse_judge_reply)


def _request(m=1, prompt="p", teacher="t"):
    return SamplingRequest(prompt=prompt, teacher_id=teacher, samples=m, seed=3)


class TestRequests:
    def test_sampling_request_validates(self):
        with pytest.raises(ValueError):
            SamplingRequest(prompt="p", teacher_id="t", samples=0)
        with pytest.raises(ValueError):
            SamplingRequest(prompt="p", teacher_id="t", temperature=-1)

    def test_judge_request_requires_non_empty(self):
        with pytest.raises(ValueError):
            JudgeRequest(question="q", candidate_answer="", ground_truth="g")

    def test_cache_key_covers_seed_and_temperature(self):
        a = SamplingRequest(prompt="p", teacher_id="t", seed=1).cache_key()
        b = SamplingRequest(prompt="p", teacher_id="t", seed=2).cache_key()
        c = SamplingRequest(prompt="p", teacher_id="t", seed=1, temperature=0.1).cache_key()
        assert len({a, b, c}) == 3


class TestMockClient:
    def test_fixture_identity(self):
        client = MockClient(fixtures={"samples": {("t", "p"): ["canned reply"]}})
        assert client.sample_trajectories(_request()) == ["canned reply"]

    def test_cardinality_contract(self):
        client = MockClient(seed=5)
        texts = client.sample_trajectories(_request(m=4))
        assert len(texts) == 4
        assert len(set(texts)) == 4  # indices 0..3 give distinct texts

    def test_deterministic_under_seed(self):
        a = MockClient(seed=11).sample_trajectories(_request(m=3))
        b = MockClient(seed=11).sample_trajectories(_request(m=3))
        c = MockClient(seed=12).sample_trajectories(_request(m=3))
        assert a == b
        assert a != c

    def test_synthesized_text_is_well_formed(self):
        from ded.filtering import check_format, extract_final_answer
        from conftest import make_question, make_trajectory
        text = MockClient(seed=1).sample_trajectories(_request())[0]
        t = make_trajectory(make_question(0), 0, text)
        assert check_format(t) is None
        assert extract_final_answer(text) is not None

    def test_retry_then_success(self):
        faults = FaultInjector({"sample": [TransportError("drop"), TransportError("drop")]})
        client = MockClient(faults=faults, retry=RetryPolicy(budget=3, sleep=lambda _: None))
        texts = client.sample_trajectories(_request())
        assert len(texts) == 1
        assert client.retries_total == 2

    def test_budget_exhausted(self):
        faults = FaultInjector({"sample": [TransportError("drop")] * 5})
        client = MockClient(faults=faults, retry=RetryPolicy(budget=3, sleep=lambda _: None))
        with pytest.raises(RetryBudgetExceededError):
            client.sample_trajectories(_request())

    def test_non_retryable_fault_raises_immediately(self):
        faults = FaultInjector({"sample": [AuthenticationError("denied")]})
        client = MockClient(faults=faults, retry=RetryPolicy(budget=5, sleep=lambda _: None))
        with pytest.raises(AuthenticationError):
            client.sample_trajectories(_request())
        assert client.retries_total == 0

    def test_judge_fixture_and_fallback(self):
        client = MockClient(fixtures={"judges": {("q1", "42"): {"status": "correct"}}})
        verdict = client.judge(JudgeRequest(question="q1", candidate_answer="42",
                                            ground_truth="41"))
        assert verdict.status == "correct"
        # fallback compares with the rule normalizer
        verdict = client.judge(JudgeRequest(question="q2", candidate_answer="0.5",
                                            ground_truth="1/2"))
        assert verdict.status == "correct"
        verdict = client.judge(JudgeRequest(question="q2", candidate_answer="3",
                                            ground_truth="1/2"))
        assert verdict.status == "incorrect"

    def test_unparsable_judge_reply_is_unverifiable(self):
        fixtures = {"judges": {("q", "a"): {"reply": "the model rambled"}}}
        verdict = MockClient(fixtures=fixtures).judge(
            JudgeRequest(question="q", candidate_answer="a", ground_truth="g"))
        assert verdict.status == "unverifiable"
        assert verdict.detail == "the model rambled"

    def test_fixture_file_loading(self, tmp_path):
        path = tmp_path / "fx.jsonl"
        rows = [
            {"kind": "sample", "teacher_id": "t", "prompt": "p", "responses": ["r1", "r2"]},
            {"kind": "judge", "question": "q", "candidate_answer": "c", "status": "incorrect"},
        ]
        path.write_text("\n".join(json.dumps(r) for r in rows), encoding="utf-8")
        fixtures = load_mock_fixtures(path)
        client = MockClient(fixtures=fixtures)
        assert client.sample_trajectories(_request(m=2)) == ["r1", "r2"]
        assert client.judge(JudgeRequest(question="q", candidate_answer="c",
                                         ground_truth="x")).status == "incorrect"


class TestJudgeReplyParsing:
    def test_marker_line(self):
        assert parse_judge_reply("VERDICT: correct") == "correct"
        assert parse_judge_reply("preface\nVERDICT: incorrect\n") == "incorrect"

    def test_strictness(self):
        assert parse_judge_reply("verdict correct") == "unverifiable"
        assert parse_judge_reply("VERDICT: maybe") == "unverifiable"
        assert parse_judge_reply("") == "unverifiable"


class TestHttpClient:
    def _client(self, responses, budget=3):
        calls = []

        def transport(url, payload, headers):
            calls.append(payload)
            status, body = responses.pop(0)
            return status, body

        client = HttpClient(base_url="http://api.test", api_key="k",
                            retry=RetryPolicy(budget=budget, sleep=lambda _: None),
                            transport=transport)
        return client, calls

    @staticmethod
    def _ok_body(texts):
        return 200, json.dumps(
            {"choices": [{"message": {"content": t}} for t in texts]}).encode()

    def test_sampling_happy_path(self):
        client, calls = self._client([self._ok_body(["a", "b"])])
        texts = client.sample_trajectories(_request(m=2))
        assert texts == ["a", "b"]
        assert calls[0]["n"] == 2

    def test_partial_batch_is_schema_error(self):
        client, _ = self._client([self._ok_body(["only one"])])
        with pytest.raises(SchemaError) as err:
            client.sample_trajectories(_request(m=3))
        assert "partial batch" in str(err.value)

    def test_auth_failure_not_retried(self):
        client, calls = self._client([(401, b"denied"), self._ok_body(["x"])])
        with pytest.raises(AuthenticationError):
            client.sample_trajectories(_request())
        assert len(calls) == 1

    def test_transient_retried_then_succeeds(self):
        client, calls = self._client([(503, b""), (429, b""), self._ok_body(["x"])])
        assert client.sample_trajectories(_request()) == ["x"]
        assert client.retries_total == 2
        assert len(calls) == 3

    def test_judge_round_trip(self):
        client, calls = self._client([self._ok_body(["VERDICT: correct"])])
        verdict = client.judge(JudgeRequest(question="q", candidate_answer="a",
                                            ground_truth="a"))
        assert verdict.status == "correct"
        assert "VERDICT" in calls[0]["messages"][0]["content"]


class TestCachingClient:
    def test_cache_hits_skip_inner(self, tmp_path):
        inner = MockClient(seed=2)
        client = CachingClient(inner, tmp_path / "cache")
        first = client.sample_trajectories(_request(m=2))
        second = client.sample_trajectories(_request(m=2))
        assert first == second
        assert client.hits == 1 and client.misses == 1
        assert inner.requests_total == 1

    def test_judge_cached(self, tmp_path):
        inner = MockClient()
        client = CachingClient(inner, tmp_path / "cache")
        req = JudgeRequest(question="q", candidate_answer="1", ground_truth="1")
        assert client.judge(req).status == "correct"
        assert client.judge(req).status == "correct"
        assert client.hits == 1

    def test_cache_survives_client_restart(self, tmp_path):
        cache = tmp_path / "cache"
        first = CachingClient(MockClient(seed=9), cache).sample_trajectories(_request())
        fresh = CachingClient(MockClient(seed=9), cache)
        assert fresh.sample_trajectories(_request()) == first
        assert fresh.hits == 1


def test_map_concurrent_preserves_order():
    items = list(range(40))
    assert map_concurrent(lambda x: x * x, items, max_in_flight=8) == [x * x for x in items]
    assert map_concurrent(lambda x: x * x, items, max_in_flight=1) == [x * x for x in items]
