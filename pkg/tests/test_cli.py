"""End-to-end tests for the command-line front end, driven in-process
through ``main(argv)`` against the live reference service."""

import json
import os

import pytest

from restfuzz import cli
from restfuzz.execution import execute_test_case, write_transcript
from restfuzz.seedgen import build_case

from .conftest import chain_by_names

DEAD_URL = "http://127.0.0.1:9"  # discard port; nothing listens there


# ----------------------------------------------------------- config file


def test_load_config_parses_and_validates(tmp_path):
    path = tmp_path / "fuzz.cfg"
    path.write_text(
        "# comment\n"
        "\n"
        "target.base_url = http://127.0.0.1:1234\n"
        "fuzz.strategy=tree\n"
        "seeds.max_len = 3\n"
    )
    cfg = cli.load_config(str(path))
    assert cfg == {
        "target.base_url": "http://127.0.0.1:1234",
        "fuzz.strategy": "tree",
        "seeds.max_len": "3",
    }
    assert cli.load_config(None) == {}


def test_load_config_rejects_bad_input(tmp_path):
    missing = tmp_path / "nope.cfg"
    with pytest.raises(cli.CliError, match="not found"):
        cli.load_config(str(missing))
    bad_key = tmp_path / "bad_key.cfg"
    bad_key.write_text("fuzz.warp_factor=9\n")
    with pytest.raises(cli.CliError, match="unknown config key"):
        cli.load_config(str(bad_key))
    bad_line = tmp_path / "bad_line.cfg"
    bad_line.write_text("just words\n")
    with pytest.raises(cli.CliError, match="key=value"):
        cli.load_config(str(bad_line))


def test_get_precedence_and_casts():
    cfg = {"fuzz.n_scales": "6", "seeds.validate": "off", "fuzz.budget_s": "oops"}
    assert cli._get(cfg, 9, "fuzz.n_scales", 8, int) == 9  # flag wins
    assert cli._get(cfg, None, "fuzz.n_scales", 8, int) == 6  # then config
    assert cli._get(cfg, None, "fuzz.rng_seed", 8, int) == 8  # then default
    assert cli._get(cfg, None, "seeds.validate", True, bool) is False
    assert cli._get({"seeds.validate": "Yes"}, None, "seeds.validate", False, bool)
    with pytest.raises(cli.CliError, match="not a boolean"):
        cli._get({"seeds.validate": "maybe"}, None, "seeds.validate", True, bool)
    with pytest.raises(cli.CliError, match="fuzz.budget_s"):
        cli._get(cfg, None, "fuzz.budget_s", 1.0, float)


# ------------------------------------------------------ pipeline fixture


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, live_target):
    """Seed corpus + trained checkpoint shared by the command tests."""
    base = tmp_path_factory.mktemp("cli")
    seeds_dir = str(base / "seeds")
    checkpoint = str(base / "model.npz")
    assert (
        cli.main(
            [
                "seeds",
                "--target",
                live_target.base_url,
                "--seeds-dir",
                seeds_dir,
                "--max-len",
                "3",
                "--dict-values",
                "2",
            ]
        )
        == 0
    )
    assert (
        cli.main(
            [
                "train",
                "--seeds-dir",
                seeds_dir,
                "--checkpoint",
                checkpoint,
                "--steps",
                "300",
                "--batch-size",
                "4",
                "--hidden-dim",
                "48",
                "--embedding-dim",
                "24",
                "--max-seq-len",
                "96",
                "--seed",
                "3",
            ]
        )
        == 0
    )
    return {"base": base, "seeds_dir": seeds_dir, "checkpoint": checkpoint}


def _fuzz(pipeline, live_target, strategy, out, extra=()):
    return cli.main(
        [
            "fuzz",
            "--target",
            live_target.base_url,
            "--seeds-dir",
            pipeline["seeds_dir"],
            "--strategy",
            strategy,
            "--budget",
            "60",
            "--max-cases",
            "60",
            "--seed",
            "1",
            "--checkpoint",
            pipeline["checkpoint"],
            "--out",
            out,
            *extra,
        ]
    )


# ------------------------------------------------------------- commands


def test_seeds_command_writes_validated_corpus(pipeline):
    names = sorted(os.listdir(pipeline["seeds_dir"]))
    assert "index.txt" in names
    assert len([n for n in names if n.endswith(".txt") and n != "index.txt"]) == 14


def test_seeds_no_validate_skips_target(tmp_path):
    out = str(tmp_path / "raw")
    rc = cli.main(
        [
            "seeds",
            "--target",
            DEAD_URL,
            "--no-validate",
            "--seeds-dir",
            out,
            "--max-len",
            "1",
            "--dict-values",
            "2",
        ]
    )
    assert rc == 0
    assert len(os.listdir(out)) == 3  # two seeds + index


def test_seeds_validation_needs_target(tmp_path, capsys):
    rc = cli.main(
        [
            "seeds",
            "--target",
            DEAD_URL,
            "--seeds-dir",
            str(tmp_path / "x"),
            "--max-len",
            "1",
        ]
    )
    assert rc == 1
    assert "--no-validate" in capsys.readouterr().err


def test_train_rejects_tight_max_seq_len(pipeline, capsys):
    rc = cli.main(
        [
            "train",
            "--seeds-dir",
            pipeline["seeds_dir"],
            "--checkpoint",
            str(pipeline["base"] / "ignored.npz"),
            "--steps",
            "1",
            "--max-seq-len",
            "4",
        ]
    )
    assert rc == 1
    assert "max_seq_len" in capsys.readouterr().err


def test_train_needs_seeds(tmp_path, capsys):
    os.makedirs(tmp_path / "empty", exist_ok=True)
    rc = cli.main(
        ["train", "--seeds-dir", str(tmp_path / "empty"), "--steps", "1"]
    )
    assert rc == 1
    assert "no seeds" in capsys.readouterr().err


@pytest.mark.parametrize("strategy", cli.STRATEGIES)
def test_fuzz_session_artifacts(pipeline, live_target, strategy, tmp_path):
    out = str(tmp_path / ("session-" + strategy))
    assert _fuzz(pipeline, live_target, strategy, out) == 0

    with open(os.path.join(out, cli.EVENTS_CSV)) as fh:
        lines = fh.read().splitlines()
    assert lines[0] == cli.CSV_HEADER
    assert len(lines) == 61  # one row per executed case
    blocks = [int(row.split(",")[1]) for row in lines[1:]]
    assert blocks == sorted(blocks) and blocks[-1] > 0
    tests = [int(row.split(",")[2]) for row in lines[1:]]
    assert tests == list(range(1, 61))

    with open(os.path.join(out, cli.MUTATION_LOG), encoding="latin-1") as fh:
        log_lines = fh.read().splitlines()
    assert log_lines[0].startswith("#")
    assert len(log_lines) == 61
    assert all(len(ln.split("\t")) == 6 for ln in log_lines[1:])

    with open(os.path.join(out, cli.SESSION_JSON)) as fh:
        meta = json.load(fh)
    assert meta["strategy"] == strategy
    assert meta["tests_executed"] == 60
    assert meta["blocks_covered"] == blocks[-1]
    assert meta["bugs_found"] == int(lines[-1].split(",")[3])
    with open(os.path.join(out, cli.BUGS_JSON)) as fh:
        bugs = json.load(fh)
    assert len(bugs) == meta["bugs_found"]
    for bug in bugs:
        assert os.path.exists(bug["transcript"])


def test_fuzz_repeat_runs_agree_modulo_time(pipeline, live_target, tmp_path):
    out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
    assert _fuzz(pipeline, live_target, "byte", out1) == 0
    assert _fuzz(pipeline, live_target, "byte", out2) == 0

    def stripped_events(d):
        with open(os.path.join(d, cli.EVENTS_CSV)) as fh:
            return [ln.split(",")[1:] for ln in fh.read().splitlines()[1:]]

    assert stripped_events(out1) == stripped_events(out2)
    for name in (cli.MUTATION_LOG,):
        with open(os.path.join(out1, name), encoding="latin-1") as fh:
            first = fh.read()
        with open(os.path.join(out2, name), encoding="latin-1") as fh:
            second = fh.read()
        assert first == second
    with open(os.path.join(out1, cli.BUGS_JSON)) as fh:
        bugs1 = [(b["bitmap"], b["statuses"]) for b in json.load(fh)]
    with open(os.path.join(out2, cli.BUGS_JSON)) as fh:
        bugs2 = [(b["bitmap"], b["statuses"]) for b in json.load(fh)]
    assert bugs1 == bugs2


def test_fuzz_rejects_unknown_strategy_flag(pipeline, live_target):
    with pytest.raises(SystemExit) as exc:
        cli.main(["fuzz", "--strategy", "quantum"])
    assert exc.value.code == 2


def test_fuzz_rejects_unknown_strategy_from_config(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("fuzz.strategy=quantum\n")
    rc = cli.main(["fuzz", "--config", str(cfg)])
    assert rc == 1
    assert "strategy" in capsys.readouterr().err


def test_fuzz_learned_needs_checkpoint(pipeline, live_target, tmp_path, capsys):
    rc = cli.main(
        [
            "fuzz",
            "--target",
            live_target.base_url,
            "--seeds-dir",
            pipeline["seeds_dir"],
            "--strategy",
            "learned",
            "--checkpoint",
            str(tmp_path / "missing.npz"),
        ]
    )
    assert rc == 1
    assert "train" in capsys.readouterr().err


def test_fuzz_unreachable_target(pipeline, tmp_path, capsys):
    rc = cli.main(
        [
            "fuzz",
            "--target",
            DEAD_URL,
            "--seeds-dir",
            pipeline["seeds_dir"],
            "--strategy",
            "tree",
            "--out",
            str(tmp_path / "s"),
        ]
    )
    assert rc == 1
    assert "unreachable" in capsys.readouterr().err


def test_fuzz_config_controls_dependencies_toggle(
    pipeline, live_target, tmp_path
):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("fuzz.mutate_dependencies=true\n")
    out = str(tmp_path / "dep")
    rc = _fuzz(
        pipeline,
        live_target,
        "tree",
        out,
        extra=["--config", str(cfg), "--max-cases", "5", "--budget", "30"],
    )
    assert rc == 0
    with open(os.path.join(out, cli.SESSION_JSON)) as fh:
        assert json.load(fh)["mutate_dependencies"] is True


def test_distill_command(pipeline, live_target, tmp_path, capsys):
    out = str(tmp_path / "kept.txt")
    rc = cli.main(
        [
            "distill",
            "--target",
            live_target.base_url,
            "--seeds-dir",
            pipeline["seeds_dir"],
            "--out",
            out,
        ]
    )
    assert rc == 0
    kept = open(out).read().split()
    assert 0 < len(kept) <= 14
    assert all(k.startswith("seed-") for k in kept)
    assert "distilled 14 seeds" in capsys.readouterr().out


def test_replay_command_round_trip(
    ref_grammar, live_target, target_cfg, tmp_path, capsys
):
    from restfuzz.execution import reset_target_state

    reset_target_state(target_cfg)
    tc = build_case(
        ref_grammar,
        chain_by_names(ref_grammar, 2, ("create-project",)),
        [["testString"]],
    )
    result = execute_test_case(tc, ref_grammar, target_cfg)
    path = tmp_path / "t.txt"
    path.write_text(write_transcript(result), encoding="latin-1")
    rc = cli.main(["replay", "--target", live_target.base_url, str(path)])
    out = capsys.readouterr().out
    assert rc == 0 and "reproduced" in out

    tampered = tmp_path / "bad.txt"
    tampered.write_text(
        write_transcript(result).replace("HTTP/1.1 201", "HTTP/1.1 500"),
        encoding="latin-1",
    )
    rc = cli.main(["replay", "--target", live_target.base_url, str(tampered)])
    out = capsys.readouterr().out
    assert rc == 1 and "MISMATCH" in out


def test_replay_missing_transcript(tmp_path, capsys):
    rc = cli.main(["replay", str(tmp_path / "none.txt")])
    assert rc == 1
    assert "transcript not found" in capsys.readouterr().err


def test_report_command(pipeline, live_target, tmp_path, capsys):
    sessions = []
    for strategy in ("byte", "tree"):
        out = str(tmp_path / strategy)
        assert _fuzz(
            pipeline,
            live_target,
            strategy,
            out,
            extra=["--max-cases", "20", "--budget", "30"],
        ) == 0
        sessions.append(out)
    report_dir = str(tmp_path / "report")
    rc = cli.main(["report", "--session", *sessions, "--out", report_dir])
    assert rc == 0
    with open(os.path.join(report_dir, "report_coverage.csv")) as fh:
        lines = fh.read().splitlines()
    assert lines[0] == "strategy," + cli.CSV_HEADER
    assert len(lines) == 1 + 20 + 20
    assert {ln.split(",")[0] for ln in lines[1:]} == {"byte", "tree"}
    assert os.path.exists(os.path.join(report_dir, "report_bugs.csv"))
    out_text = capsys.readouterr().out
    assert "coverage series" in out_text and "bug table" in out_text


def test_report_rejects_non_session_dir(tmp_path, capsys):
    rc = cli.main(["report", "--session", str(tmp_path)])
    assert rc == 1
    assert "session" in capsys.readouterr().err
