"""Tests for HTTP execution: wire conversion, dependency resolution,
transcripts, and replay against the live reference service."""

import socket

import pytest

from restfuzz import execution as ex
from restfuzz.parsing import marker_text
from restfuzz.seedgen import build_case

from .conftest import chain_by_names


def _mkcase(g, names, values):
    return build_case(g, chain_by_names(g, len(names), tuple(names)), values)


# ----------------------------------------------------------------- wire


def test_request_wire_with_body():
    text = 'POST /x HTTP/1.1\nPRIVATE-TOKEN: tok\n{"a":"b"}'
    wire = ex.request_wire(text, "h")
    assert wire == (
        b"POST /x HTTP/1.1\r\n"
        b"Host: h\r\n"
        b"PRIVATE-TOKEN: tok\r\n"
        b"Content-Length: 9\r\n"
        b"\r\n"
        b'{"a":"b"}'
    )


def test_request_wire_without_body():
    wire = ex.request_wire("GET /y HTTP/1.1\nX: 1", "srv")
    assert wire.endswith(b"Content-Length: 0\r\n\r\n")
    assert b"X: 1\r\n" in wire


def test_request_wire_counts_body_bytes_not_chars():
    text = "POST /x HTTP/1.1\n{\"a\":\"\xff\xfe\"}"
    wire = ex.request_wire(text, "h")
    body = wire.split(b"\r\n\r\n", 1)[1]
    assert b"Content-Length: %d" % len(body) in wire
    assert body == b'{"a":"\xff\xfe"}'


def test_request_wire_multi_line_body_sticks_together():
    text = 'PUT /z HTTP/1.1\nH: v\n{"a":\n [1, 2]}'
    wire = ex.request_wire(text, "h")
    assert wire.split(b"\r\n\r\n", 1)[1] == b'{"a":\n [1, 2]}'


# ----------------------------------------------------- resource extraction


def test_extract_resource_id_paths():
    assert ex.extract_resource_id('{"id": 42}', "id") == "42"
    assert ex.extract_resource_id('{"a": {"b": "x"}}', "a.b") == "x"
    assert ex.extract_resource_id('{"items": [{"id": 5}]}', "items.0.id") == "5"
    assert ex.extract_resource_id('{"on": true}', "on") == "true"
    assert ex.extract_resource_id('{"on": false}', "on") == "false"


def test_extract_resource_id_misses():
    assert ex.extract_resource_id('{"id": null}', "id") is None
    assert ex.extract_resource_id('{"id": 1}', "nope") is None
    assert ex.extract_resource_id("not json", "id") is None
    assert ex.extract_resource_id('{"id": 1}', "id.deeper") is None
    assert ex.extract_resource_id('{"items": [1]}', "items.5") is None
    assert ex.extract_resource_id('{"items": [1]}', "items.x") is None


# ----------------------------------------------------------- target config


def test_target_config_validation():
    with pytest.raises(ValueError, match="base_url"):
        ex.TargetConfig(base_url="ftp://x")
    with pytest.raises(ValueError, match="base_url"):
        ex.TargetConfig(base_url="localhost:80")
    with pytest.raises(ValueError, match="timeout"):
        ex.TargetConfig(base_url="http://h:1", timeout_ms=0)
    cfg = ex.TargetConfig(base_url="http://example.test:8123")
    assert (cfg.host, cfg.port) == ("example.test", 8123)


# ------------------------------------------------------- live execution


def test_two_request_chain_resolves_dependency(ref_grammar, target_cfg):
    ex.reset_target_state(target_cfg)
    tc = _mkcase(
        ref_grammar,
        ("create-project", "create-branch"),
        [["testString"], ["master"]],
    )
    result = ex.execute_test_case(tc, ref_grammar, target_cfg, case_id="dep")
    assert result.verdict == "pass"
    assert result.statuses == [201, 201]
    project_id = ex.extract_resource_id(result.records[0].response_body, "id")
    assert project_id is not None
    assert "/api/projects/%s/" % project_id in result.records[1].request_text
    assert marker_text("project-id") not in result.records[1].request_text
    assert result.resolved_bindings["project-id"] == project_id
    assert "branch-name" in result.resolved_bindings


def test_per_request_coverage_windows(ref_grammar, target_cfg):
    from restfuzz.coverage import fetch_and_reset_coverage, fetch_manifest

    ex.reset_target_state(target_cfg)
    manifest = fetch_manifest(target_cfg)
    idx = {name: i for i, name in enumerate(manifest)}
    tc = _mkcase(
        ref_grammar,
        ("create-project", "create-branch"),
        [["testString"], ["master"]],
    )
    fetch_and_reset_coverage(target_cfg)  # clear the window
    result = ex.execute_test_case(
        tc,
        ref_grammar,
        target_cfg,
        per_request_bitmaps=lambda: fetch_and_reset_coverage(target_cfg),
    )
    assert result.statuses == [201, 201]
    first, second = (r.bitmap for r in result.records)
    assert idx["projects.created"] in first.indices()
    assert idx["branches.created"] not in first.indices()
    assert idx["branches.created"] in second.indices()
    assert idx["projects.created"] not in second.indices()
    # the per-request fetches drained the side channel completely
    assert fetch_and_reset_coverage(target_cfg).is_empty()
    # without the hook no bitmaps are attached
    plain = ex.execute_test_case(tc, ref_grammar, target_cfg)
    assert all(r.bitmap is None for r in plain.records)


def test_unresolved_consumer_renders_marker(ref_grammar, target_cfg):
    ex.reset_target_state(target_cfg)
    tc = build_case(ref_grammar, ("create-branch",), [["master"]])
    result = ex.execute_test_case(tc, ref_grammar, target_cfg)
    assert marker_text("project-id") in result.records[0].request_text
    assert result.statuses[0] == 404  # no such project; never a crash
    assert result.verdict == "pass"


def test_pinned_payload_beats_live_binding(ref_grammar, target_cfg):
    ex.reset_target_state(target_cfg)
    tc = _mkcase(
        ref_grammar,
        ("create-project", "create-branch"),
        [["testString"], ["master"]],
    )
    seq = tc.seq
    dep_ord = next(
        o
        for o in range(seq.n_leaves())
        if seq.leaf_rule(o, ref_grammar).lhs == "consumer"
    )
    pos = seq.leaf_index[dep_ord]
    seq.payloads[pos] = "no-such-project"
    seq.pinned.add(pos)
    result = ex.execute_test_case(seq, ref_grammar, target_cfg)
    assert "/api/projects/no-such-project/" in result.records[1].request_text
    assert result.statuses == [201, 404]


def test_latest_extraction_wins(ref_grammar, target_cfg):
    ex.reset_target_state(target_cfg)
    tc = build_case(
        ref_grammar,
        ("create-project", "create-project", "create-branch"),
        [["testString"], ["testString"], ["master"]],
    )
    result = ex.execute_test_case(tc, ref_grammar, target_cfg)
    assert result.statuses == [201, 201, 201]
    first = ex.extract_resource_id(result.records[0].response_body, "id")
    second = ex.extract_resource_id(result.records[1].response_body, "id")
    assert first != second
    assert "/api/projects/%s/" % second in result.records[2].request_text
    assert "/api/projects/%s/" % first not in result.records[2].request_text


def test_request_text_transform_hook(ref_grammar, target_cfg):
    ex.reset_target_state(target_cfg)
    tc = _mkcase(
        ref_grammar,
        ("create-project", "create-branch"),
        [["testString"], ["master"]],
    )
    seen = []

    def transform(text, idx):
        seen.append(idx)
        if idx == 0:
            return text.replace("POST", "TRACE", 1)
        return text

    result = ex.execute_test_case(
        tc, ref_grammar, target_cfg, request_text_transform=transform
    )
    assert seen == [0, 1]
    assert result.records[0].request_text.startswith("TRACE ")
    assert result.statuses[0] in (404, 405)


def test_execution_result_statuses_and_latency(ref_grammar, target_cfg):
    ex.reset_target_state(target_cfg)
    tc = _mkcase(ref_grammar, ("create-project",), [["testString"]])
    result = ex.execute_test_case(tc, ref_grammar, target_cfg, case_id="one")
    assert result.case_id == "one"
    assert result.statuses == [201]
    assert result.records[0].latency_s >= 0
    assert result.records[0].reason


# ---------------------------------------------------- transport failures


def _dead_port() -> int:
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


def test_transport_error_verdict(ref_grammar):
    cfg = ex.TargetConfig(base_url="http://127.0.0.1:%d" % _dead_port(), timeout_ms=500)
    tc = _mkcase(ref_grammar, ("create-project",), [["testString"]])
    result = ex.execute_test_case(tc, ref_grammar, cfg)
    assert result.verdict == "transport_error"
    assert result.statuses == [ex.NO_RESPONSE_STATUS]
    assert result.records[0].reason  # carries the failure message


def test_reset_raises_on_dead_target():
    cfg = ex.TargetConfig(base_url="http://127.0.0.1:%d" % _dead_port(), timeout_ms=500)
    with pytest.raises(ex.TransportError):
        ex.reset_target_state(cfg)


# ------------------------------------------------------------ transcripts


def test_transcript_round_trip_with_raw_payload_bytes(ref_grammar, target_cfg):
    ex.reset_target_state(target_cfg)
    tc = _mkcase(ref_grammar, ("create-project",), [["testString"]])
    seq = tc.seq
    str_ord = next(
        o
        for o in range(seq.n_leaves())
        if seq.leaf_rule(o, ref_grammar).lhs == "string"
    )
    pos = seq.leaf_index[str_ord]
    seq.payloads[pos] = "A\xffB\x01"
    seq.pinned.add(pos)
    result = ex.execute_test_case(seq, ref_grammar, target_cfg)
    text = ex.write_transcript(result)
    entries = ex.load_transcript(text)
    assert len(entries) == 1
    assert entries[0].request_text == result.records[0].request_text
    assert entries[0].status == result.statuses[0]
    assert "A\xffB\x01" in entries[0].request_text


def test_transcript_records_transport_failures(ref_grammar):
    cfg = ex.TargetConfig(base_url="http://127.0.0.1:%d" % _dead_port(), timeout_ms=500)
    tc = _mkcase(ref_grammar, ("create-project",), [["testString"]])
    result = ex.execute_test_case(tc, ref_grammar, cfg)
    entries = ex.load_transcript(ex.write_transcript(result))
    assert entries[0].status == ex.NO_RESPONSE_STATUS


def test_replay_reproduces_after_reset(ref_grammar, target_cfg):
    ex.reset_target_state(target_cfg)
    tc = _mkcase(
        ref_grammar,
        ("create-project", "create-branch"),
        [["testString"], ["master"]],
    )
    result = ex.execute_test_case(tc, ref_grammar, target_cfg)
    transcript = ex.write_transcript(result)
    ex.reset_target_state(target_cfg)
    outcome = ex.replay_transcript(transcript, target_cfg)
    assert outcome.reproduced
    assert outcome.expected == outcome.actual == [201, 201]


def test_replay_flags_status_drift(ref_grammar, target_cfg):
    ex.reset_target_state(target_cfg)
    tc = _mkcase(ref_grammar, ("create-project",), [["testString"]])
    result = ex.execute_test_case(tc, ref_grammar, target_cfg)
    transcript = ex.write_transcript(result).replace("HTTP/1.1 201", "HTTP/1.1 500")
    ex.reset_target_state(target_cfg)
    outcome = ex.replay_transcript(transcript, target_cfg)
    assert not outcome.reproduced
    assert outcome.expected == [500] and outcome.actual == [201]


def test_replay_pads_missing_responses_on_dead_target(ref_grammar, target_cfg):
    ex.reset_target_state(target_cfg)
    tc = _mkcase(
        ref_grammar,
        ("create-project", "create-branch"),
        [["testString"], ["master"]],
    )
    transcript = ex.write_transcript(
        ex.execute_test_case(tc, ref_grammar, target_cfg)
    )
    dead = ex.TargetConfig(
        base_url="http://127.0.0.1:%d" % _dead_port(), timeout_ms=500
    )
    outcome = ex.replay_transcript(transcript, dead)
    assert not outcome.reproduced
    assert outcome.actual == [ex.NO_RESPONSE_STATUS, ex.NO_RESPONSE_STATUS]
