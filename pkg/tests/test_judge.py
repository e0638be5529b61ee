"""Prompt rendering, the deterministic mock judge, and the HTTP backend."""

import http.server
import json
import threading

import pytest

from rulers.errors import (
    AuthError,
    BudgetExhausted,
    ConfigError,
    TemplateError,
    TransportError,
)
from rulers.bundle import CompileParams, RawRubric
from rulers.executor import execute, make_bank, validate_output
from rulers.judge import (
    API_KEY_VAR,
    HttpJudge,
    MockJudge,
    MockJudgePolicy,
    PhraseRule,
    PromptRequest,
    RetryBudget,
    RetryableTransportError,
    build_compile_prompt,
    build_holistic_prompt,
    build_scoring_prompt,
    invoke,
    load_policy,
    policy_from_json,
    policy_to_json,
    score_with_repair,
    with_feedback,
)


def small_policy() -> MockJudgePolicy:
    return MockJudgePolicy(
        keyword_rules={
            "C01": PhraseRule("sky is blue"),
            "C02": PhraseRule("purple rain", partial="boils"),
            "C03": PhraseRule("green grass"),
            "C04": PhraseRule("Snow falls"),
        }
    )


class TestScoringPrompt:
    def test_contains_all_moving_parts(self, small_bundle, bank):
        request = build_scoring_prompt(small_bundle, bank)
        text = request.user_text
        assert small_bundle.digest in text
        assert "Rate ALL 4 checklist items" in text
        assert "EXACTLY 2 quotes" in text
        for item_id in ("C01", "C02", "C03", "C04"):
            assert text.count(item_id) == 1
        for unit in bank.units:
            assert unit.unit_id in text
            assert unit.text in text
        assert request.response_must_be_json

    def test_empty_bank_rejected(self, small_bundle):
        empty = make_bank("empty", [])
        with pytest.raises(TemplateError):
            build_scoring_prompt(small_bundle, empty)

    def test_reversed_variant_changes_prompt_only(self, small_bundle, bank):
        standard = build_scoring_prompt(small_bundle, bank, "standard")
        reversed_ = build_scoring_prompt(small_bundle, bank, "reversed")
        assert standard.user_text != reversed_.user_text
        assert standard.system_text == reversed_.system_text

    def test_deterministic(self, small_bundle, bank):
        first = build_scoring_prompt(small_bundle, bank)
        second = build_scoring_prompt(small_bundle, bank)
        assert first == second


class TestOtherPrompts:
    def test_compile_prompt_carries_rubric_and_constraints(self):
        raw = RawRubric("Reward clarity and evidence use.", 1, 6)
        params = CompileParams(traits=2, items=4, min_evidence=2)
        request = build_compile_prompt(raw, params)
        assert "Reward clarity and evidence use." in request.user_text
        assert '"traits":2' in request.user_text
        assert '"items":4' in request.user_text
        assert "RAW RUBRIC:" in request.user_text

    def test_holistic_prompt(self, bank):
        request = build_holistic_prompt("Grade overall quality.", bank, 1, 6)
        assert "HOLISTIC SCORING MODE" in request.user_text
        assert '"scale_max":6' in request.user_text
        assert "Grade overall quality." in request.user_text
        assert "s0004" in request.user_text

    def test_holistic_empty_bank_rejected(self):
        with pytest.raises(TemplateError):
            build_holistic_prompt("rubric", make_bank("x", []), 1, 6)

    def test_feedback_wraps_previous_exchange(self):
        request = PromptRequest(system_text="sys", user_text="original ask")
        repaired = with_feedback(request, '{"bad": true}', "decisions missing")
        assert "original ask" in repaired.user_text
        assert '{"bad": true}' in repaired.user_text
        assert "decisions missing" in repaired.user_text
        assert repaired.system_text == "sys"


class TestPolicy:
    def test_strategy_validated(self):
        with pytest.raises(ConfigError):
            MockJudgePolicy(keyword_rules={}, evidence_strategy="telepathy")

    def test_empty_full_phrase_rejected(self):
        with pytest.raises(ConfigError):
            MockJudgePolicy(keyword_rules={"C01": PhraseRule("")})

    def test_missing_rule_is_config_error(self):
        policy = small_policy()
        with pytest.raises(ConfigError):
            policy.rule_for("C99")

    def test_json_roundtrip(self):
        policy = MockJudgePolicy(
            keyword_rules={
                "C01": PhraseRule("plain"),
                "C02": PhraseRule("full phrase", partial="hint"),
                "C03": PhraseRule("anchor", cite="canned words."),
            },
            evidence_strategy="first_m_units",
        )
        doc = policy_to_json(policy)
        assert doc["keyword_rules"]["C01"] == "plain"
        assert doc["keyword_rules"]["C02"] == {"full": "full phrase", "partial": "hint"}
        assert doc["keyword_rules"]["C03"] == {"full": "anchor", "cite": "canned words."}
        assert policy_from_json(doc) == policy

    def test_malformed_json_rejected(self):
        with pytest.raises(ConfigError):
            policy_from_json({"keyword_rules": {"C01": {"partial": "no full"}}})

    def test_load_policy_file(self, tmp_path):
        path = tmp_path / "policy.json"
        path.write_text(json.dumps(policy_to_json(small_policy())))
        assert load_policy(path) == small_policy()
        with pytest.raises(ConfigError):
            load_policy(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigError):
            load_policy(bad)


class TestMockScoring:
    def test_decisions_follow_the_policy(self, small_bundle, bank):
        judge = MockJudge(policy=small_policy())
        reply = judge.complete(build_scoring_prompt(small_bundle, bank))
        output = validate_output(reply, small_bundle)
        assert output.decisions == {"C01": 2, "C02": 1, "C03": 0, "C04": 2}
        assert output.bundle_digest == small_bundle.digest

    def test_matched_phrases_become_verbatim_quotes(self, small_bundle, bank):
        judge = MockJudge(policy=small_policy())
        reply = judge.complete(build_scoring_prompt(small_bundle, bank))
        output = validate_output(reply, small_bundle)
        t01 = [(q.unit_id, q.quote) for q in output.evidence["t01"]]
        assert t01 == [("s0001", "sky is blue"), ("s0002", "boils")]
        reports = {r.trait_id: r for r in execute(output, small_bundle, bank)}
        assert reports["t01"].valid_evidence_count == 2

    def test_planted_padding_cycles_matches(self, small_bundle, bank):
        judge = MockJudge(policy=small_policy())
        output = validate_output(
            judge.complete(build_scoring_prompt(small_bundle, bank)), small_bundle
        )
        t02 = [(q.unit_id, q.quote) for q in output.evidence["t02"]]
        assert t02 == [("s0004", "Snow falls"), ("s0004", "Snow falls")]

    def test_first_m_units_padding_uses_distinct_units(self, small_bundle, bank):
        policy = MockJudgePolicy(
            keyword_rules=small_policy().keyword_rules,
            evidence_strategy="first_m_units",
        )
        judge = MockJudge(policy=policy)
        output = validate_output(
            judge.complete(build_scoring_prompt(small_bundle, bank)), small_bundle
        )
        t02 = [(q.unit_id, q.quote) for q in output.evidence["t02"]]
        assert t02 == [("s0004", "Snow falls"), ("s0001", "The sky is blue.")]

    def test_no_matches_falls_back_to_first_unit(self, small_bundle, bank):
        rules = dict(small_policy().keyword_rules)
        rules["C03"] = PhraseRule("never present")
        rules["C04"] = PhraseRule("also absent")
        judge = MockJudge(policy=MockJudgePolicy(keyword_rules=rules))
        output = validate_output(
            judge.complete(build_scoring_prompt(small_bundle, bank)), small_bundle
        )
        t02 = [(q.unit_id, q.quote) for q in output.evidence["t02"]]
        assert t02 == [("s0001", "The sky is blue."), ("s0001", "The sky is blue.")]
        assert output.decisions["C03"] == 0
        assert output.decisions["C04"] == 0

    def test_cite_override_replaces_quote(self, small_bundle, bank):
        rules = dict(small_policy().keyword_rules)
        rules["C01"] = PhraseRule("sky is blue", cite="canned rubric words")
        judge = MockJudge(policy=MockJudgePolicy(keyword_rules=rules))
        output = validate_output(
            judge.complete(build_scoring_prompt(small_bundle, bank)), small_bundle
        )
        quotes = [(q.unit_id, q.quote) for q in output.evidence["t01"]]
        assert ("s0001", "canned rubric words") in quotes
        assert output.decisions["C01"] == 2
        t01 = {r.trait_id: r for r in execute(output, small_bundle, bank)}["t01"]
        assert ("s0001", "canned rubric words", "mismatch") in t01.invalid_citations

    def test_boundary_notes_count_matches(self, small_bundle, bank):
        judge = MockJudge(policy=small_policy())
        output = validate_output(
            judge.complete(build_scoring_prompt(small_bundle, bank)), small_bundle
        )
        assert output.boundary_notes["t01"] == (
            "2 of the trait's trigger phrases were found"
        )
        assert output.boundary_notes["t02"] == (
            "1 of the trait's trigger phrases were found"
        )

    def test_byte_deterministic(self, small_bundle, bank):
        request = build_scoring_prompt(small_bundle, bank)
        replies = {MockJudge(policy=small_policy()).complete(request) for _ in range(100)}
        assert len(replies) == 1

    def test_reply_invariant_across_render_variants(self, small_bundle, bank):
        judge = MockJudge(policy=small_policy())
        standard = judge.complete(build_scoring_prompt(small_bundle, bank, "standard"))
        reversed_ = judge.complete(build_scoring_prompt(small_bundle, bank, "reversed"))
        assert standard == reversed_

    def test_policy_required_for_scoring(self, small_bundle, bank):
        with pytest.raises(ConfigError):
            MockJudge().complete(build_scoring_prompt(small_bundle, bank))

    def test_unknown_prompt_rejected(self):
        with pytest.raises(ConfigError):
            MockJudge().complete(PromptRequest(system_text="s", user_text="hi"))


class TestMockHolistic:
    def scored(self, texts):
        bank = make_bank("x", texts)
        request = build_holistic_prompt("ignored", bank, 1, 6)
        reply = MockJudge(policy=small_policy()).complete(request)
        return json.loads(reply)["score"]

    def test_fraction_of_phrases_sets_score(self):
        assert self.scored(["nothing matches here"]) == 1
        assert self.scored(["sky is blue once"]) == 2  # 1 + round(5/4)
        assert self.scored(["sky is blue", "it boils", "green grass"]) == 4
        assert (
            self.scored(["sky is blue", "purple rain", "green grass", "Snow falls"])
            == 6
        )


class TestMockCompile:
    def test_reply_honors_shape_constraints(self):
        raw = RawRubric("Value clarity, rigor, evidence, and style.", 1, 6)
        params = CompileParams(traits=2, items=5, min_evidence=2)
        reply = MockJudge().complete(build_compile_prompt(raw, params))
        doc = json.loads(reply)
        assert len(doc["taxonomy"]) == 2
        assert len(doc["checklist"]) == 5
        assert doc["evidence_rules"] == {"min_evidence": 2}
        trait_ids = {t["id"] for t in doc["taxonomy"]}
        assert {i["trait_id"] for i in doc["checklist"]} == trait_ids


class TestRetryBudget:
    def test_counts_down(self):
        budget = RetryBudget(2)
        assert budget.remaining == 2
        assert budget.try_spend()
        assert budget.try_spend()
        assert not budget.try_spend()
        assert budget.remaining == 0

    def test_negative_rejected(self):
        with pytest.raises(ConfigError):
            RetryBudget(-1)


class ScriptedBackend:
    """Backend stub that replays a list of replies or exceptions."""

    def __init__(self, script, retry_budget=3):
        self.script = list(script)
        self.retry_budget = retry_budget
        self.backoff_base = 0.0
        self.calls = 0

    def complete(self, request):
        self.calls += 1
        action = self.script.pop(0)
        if isinstance(action, Exception):
            raise action
        return action


REQUEST = PromptRequest(system_text="s", user_text="u")


class TestInvoke:
    def test_transient_failure_then_success(self):
        backend = ScriptedBackend([RetryableTransportError("blip"), "fine"])
        assert invoke(backend, REQUEST) == "fine"
        assert backend.calls == 2

    def test_budget_exhaustion(self):
        backend = ScriptedBackend(
            [RetryableTransportError("a"), RetryableTransportError("b")],
            retry_budget=1,
        )
        with pytest.raises(BudgetExhausted):
            invoke(backend, REQUEST)
        assert backend.calls == 2

    def test_non_retryable_propagates_immediately(self):
        backend = ScriptedBackend([TransportError("permanent")])
        with pytest.raises(TransportError):
            invoke(backend, REQUEST)
        assert backend.calls == 1

    def test_auth_error_propagates_immediately(self):
        backend = ScriptedBackend([AuthError("bad key")])
        with pytest.raises(AuthError):
            invoke(backend, REQUEST)
        assert backend.calls == 1

    def test_explicit_budget_is_shared_state(self):
        budget = RetryBudget(1)
        backend = ScriptedBackend([RetryableTransportError("x"), "ok"])
        assert invoke(backend, REQUEST, budget) == "ok"
        assert budget.remaining == 0


class RepairableBackend:
    """Returns scripted bad replies first, then behaves like the mock judge."""

    def __init__(self, bad_replies, retry_budget=3):
        self.mock = MockJudge(policy=small_policy())
        self.bad = list(bad_replies)
        self.retry_budget = retry_budget
        self.backoff_base = 0.0
        self.requests = []

    def complete(self, request):
        self.requests.append(request)
        if self.bad:
            return self.bad.pop(0)
        return self.mock.complete(request)


class TestScoreWithRepair:
    def test_bad_reply_gets_feedback_then_succeeds(self, small_bundle, bank):
        backend = RepairableBackend(['{"oops": true}'])
        budget = RetryBudget(3)
        output = score_with_repair(backend, small_bundle, bank, budget=budget)
        assert output.decisions["C01"] == 2
        assert len(backend.requests) == 2
        assert budget.remaining == 2
        repair = backend.requests[1].user_text
        assert "VALIDATOR COMPLAINT:" in repair
        assert '{"oops": true}' in repair

    def test_persistent_bad_reply_exhausts_budget(self, small_bundle, bank):
        backend = RepairableBackend(["{} ", "{} ", "{} "], retry_budget=1)
        with pytest.raises(BudgetExhausted):
            score_with_repair(backend, small_bundle, bank)
        assert len(backend.requests) == 2

    def test_valid_first_reply_spends_nothing(self, small_bundle, bank):
        backend = RepairableBackend([])
        budget = RetryBudget(2)
        score_with_repair(backend, small_bundle, bank, budget=budget)
        assert budget.remaining == 2


# ---------------------------------------------------------------------------
# HTTP backend against a local stub server
# ---------------------------------------------------------------------------

KEY = "sekret-key-123"


def chat_ok(content: str) -> dict:
    return {"choices": [{"message": {"content": content}}]}


class StubHandler(http.server.BaseHTTPRequestHandler):
    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length)
        self.server.seen.append(
            {
                "path": self.path,
                "auth": self.headers.get("Authorization"),
                "body": json.loads(raw),
            }
        )
        status, payload = (
            self.server.script.pop(0) if self.server.script else (200, chat_ok("{}"))
        )
        data = payload if isinstance(payload, str) else json.dumps(payload)
        encoded = data.encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(encoded)))
        self.end_headers()
        self.wfile.write(encoded)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), StubHandler)
    server.script = []
    server.seen = []
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield server
    server.shutdown()
    server.server_close()


def stub_judge(server, **kwargs) -> HttpJudge:
    port = server.server_address[1]
    defaults = dict(
        endpoint=f"http://127.0.0.1:{port}/v1/chat",
        model_name="stub-model",
        retry_budget=3,
        backoff_base=0.0,
    )
    defaults.update(kwargs)
    return HttpJudge(**defaults)


class TestHttpJudge:
    def test_missing_key_fails_before_any_request(self, stub_server, monkeypatch):
        monkeypatch.delenv(API_KEY_VAR, raising=False)
        judge = stub_judge(stub_server)
        with pytest.raises(AuthError):
            judge.complete(REQUEST)
        assert stub_server.seen == []

    def test_happy_path_posts_chat_shape(self, stub_server, monkeypatch):
        monkeypatch.setenv(API_KEY_VAR, KEY)
        stub_server.script.append((200, chat_ok("the reply")))
        judge = stub_judge(stub_server)
        assert judge.complete(REQUEST) == "the reply"
        sent = stub_server.seen[0]
        assert sent["auth"] == f"Bearer {KEY}"
        assert sent["body"]["model"] == "stub-model"
        assert sent["body"]["temperature"] == 0.0
        assert sent["body"]["messages"][0] == {"role": "system", "content": "s"}
        assert sent["body"]["messages"][1] == {"role": "user", "content": "u"}
        assert sent["body"]["response_format"] == {"type": "json_object"}

    def test_free_text_request_omits_response_format(self, stub_server, monkeypatch):
        monkeypatch.setenv(API_KEY_VAR, KEY)
        stub_server.script.append((200, chat_ok("ok")))
        judge = stub_judge(stub_server)
        judge.complete(
            PromptRequest(system_text="s", user_text="u", response_must_be_json=False)
        )
        assert "response_format" not in stub_server.seen[0]["body"]

    def test_key_never_stored_on_the_client(self, stub_server, monkeypatch):
        monkeypatch.setenv(API_KEY_VAR, KEY)
        judge = stub_judge(stub_server)
        assert KEY not in repr(judge)

    def test_auth_rejection(self, stub_server, monkeypatch):
        monkeypatch.setenv(API_KEY_VAR, KEY)
        stub_server.script.append((401, {"error": "bad key"}))
        with pytest.raises(AuthError):
            stub_judge(stub_server).complete(REQUEST)

    def test_server_error_retried_by_invoke(self, stub_server, monkeypatch):
        monkeypatch.setenv(API_KEY_VAR, KEY)
        stub_server.script.extend([(500, {"error": "oops"}), (200, chat_ok("ok"))])
        judge = stub_judge(stub_server)
        assert invoke(judge, REQUEST) == "ok"
        assert len(stub_server.seen) == 2

    def test_rate_limit_is_retryable(self, stub_server, monkeypatch):
        monkeypatch.setenv(API_KEY_VAR, KEY)
        stub_server.script.append((429, {"error": "slow down"}))
        with pytest.raises(RetryableTransportError):
            stub_judge(stub_server).complete(REQUEST)

    def test_client_error_is_permanent(self, stub_server, monkeypatch):
        monkeypatch.setenv(API_KEY_VAR, KEY)
        stub_server.script.append((400, {"error": "bad request"}))
        with pytest.raises(TransportError) as err:
            stub_judge(stub_server).complete(REQUEST)
        assert not isinstance(err.value, RetryableTransportError)

    def test_malformed_completion_rejected(self, stub_server, monkeypatch):
        monkeypatch.setenv(API_KEY_VAR, KEY)
        stub_server.script.append((200, {"unexpected": "shape"}))
        with pytest.raises(TransportError):
            stub_judge(stub_server).complete(REQUEST)

    def test_non_json_body_rejected(self, stub_server, monkeypatch):
        monkeypatch.setenv(API_KEY_VAR, KEY)
        stub_server.script.append((200, "plain text, not json"))
        with pytest.raises(TransportError):
            stub_judge(stub_server).complete(REQUEST)

    def test_connection_refused_is_retryable(self, monkeypatch):
        monkeypatch.setenv(API_KEY_VAR, KEY)
        judge = HttpJudge(
            endpoint="http://127.0.0.1:1/nope",
            model_name="stub-model",
            retry_budget=0,
            backoff_base=0.0,
        )
        with pytest.raises(RetryableTransportError):
            judge.complete(REQUEST)
        with pytest.raises(BudgetExhausted):
            invoke(judge, REQUEST)

    def test_audit_log_redacts_the_key(self, stub_server, monkeypatch, tmp_path):
        monkeypatch.setenv(API_KEY_VAR, KEY)
        # the stub reply echoes the key so redaction must scrub the response too
        stub_server.script.append((200, chat_ok(f"leaked: {KEY}")))
        judge = stub_judge(stub_server, audit_dir=str(tmp_path))
        judge.complete(REQUEST)
        audit_text = (tmp_path / "http_audit.jsonl").read_text()
        assert KEY not in audit_text
        assert "[REDACTED]" in audit_text
        record = json.loads(audit_text.splitlines()[0])
        assert record["status"] == 200
        assert record["model"] == "stub-model"
        assert record["seq"] == 1
