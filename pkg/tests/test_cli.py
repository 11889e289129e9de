import json

import pytest

from trafficft.cli import build_parser, main
from trafficft.config import RunConfig

TINY = {"bc": {"steps": 30},
        "trainer": {"total_steps": 3, "batch_size": 2, "warmup_steps": 1, "checkpoint_every": 2},
        "evaluation": {"goal_rollouts": 2},
        "variance": {"reps": 30, "scenarios": 2, "batches": 200, "group_size": 3}}


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return str(p)


@pytest.fixture(scope="module")
def small_suite(tmp_path_factory):
    out = tmp_path_factory.mktemp("suite")
    assert main(["gen-scenarios", "--smoke", "--out", str(out)]) == 0
    lines = (out / "scenarios.jsonl").read_text().splitlines()
    path = out / "small.jsonl"
    path.write_text("\n".join(lines[:3]) + "\n")
    return str(path)


def test_usage_errors_exit_one(capsys, tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["train", "--out", str(tmp_path), "--no-such-flag"])
    assert e.value.code == 1
    assert "usage:" in capsys.readouterr().err
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 1
    assert main(["eval-rmm", "--out", str(tmp_path), "--rollouts", "0"]) == 1
    assert main(["bench-variance", "--out", str(tmp_path), "--reps", "10"]) == 1
    assert main(["eval-goals", "--out", str(tmp_path), "--mode", "sideways"]) == 1


def test_bad_config_exits_one(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"trainer": {"learning_rat": 1.0}}))
    assert main(["config", "--config", str(bad)]) == 1
    bad.write_text("{not json")
    assert main(["config", "--config", str(bad)]) == 1


def test_runtime_failure_exits_two(tmp_path, capsys):
    missing = tmp_path / "missing.jsonl"
    assert main(["eval-rmm", "--out", str(tmp_path / "o"), "--scenarios", str(missing)]) == 2
    assert "eval-rmm" in capsys.readouterr().err


def test_dump_defaults_round_trips(capsys):
    assert main(["config", "--dump-defaults"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert RunConfig.from_dict(d).to_dict() == RunConfig().to_dict()
    assert d["trainer"]["kl_target"] == 0.01 and d["evaluation"]["rollouts"] == 32


def test_eval_rmm_defaults_to_32_rollouts():
    args = build_parser().parse_args(["eval-rmm", "--out", "x"])
    assert args.rollouts == 32


def test_help_documents_every_flag(capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--help"])
    assert e.value.code == 0
    text = capsys.readouterr().out
    for flag in ("--reward", "--seed", "--config", "--threads", "--out", "--init", "--steps"):
        assert flag in text


def test_train_twice_gives_identical_metrics(tmp_path, tiny_config, small_suite):
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main(["train", "--reward", "mloo", "--seed", "7", "--config", tiny_config,
                     "--scenarios", small_suite, "--out", str(out)]) == 0
        outs.append(out)
    assert (outs[0] / "metrics.csv").read_bytes() == (outs[1] / "metrics.csv").read_bytes()
    assert (outs[0] / "policy.json").read_bytes() == (outs[1] / "policy.json").read_bytes()
    assert (outs[0] / "checkpoints" / "step_000002.json").exists()


def test_manifest_describes_run(tmp_path, tiny_config, small_suite):
    out = tmp_path / "m"
    assert main(["eval-rmm", "--seed", "3", "--rollouts", "4", "--config", tiny_config,
                 "--scenarios", small_suite, "--out", str(out)]) == 0
    m = json.loads((out / "manifest.json").read_text())
    assert m["seed"] == 3 and m["command"] == "eval-rmm"
    assert m["config_hash"] == RunConfig.from_dict(m["config"]).config_hash()
    assert set(m["outputs"]) == {"bc_policy.json", "rmm.csv", "summary.json"}
    assert {"trafficft", "python", "numpy"} <= set(m["versions"])
    assert json.loads((out / "summary.json").read_text())["rollouts"] == 4


def test_goal_mode_shorthand(tmp_path, tiny_config, small_suite):
    a, b = tmp_path / "a", tmp_path / "b"
    common = ["--config", tiny_config, "--scenarios", small_suite]
    assert main(["eval-goals", "--mode", "perturb:-1", "--out", str(a)] + common) == 0
    assert main(["eval-goals", "--source", "perturbed", "--horizon", "-1", "--out", str(b)] + common) == 0
    assert (a / "goals.json").read_bytes() == (b / "goals.json").read_bytes()
    assert main(["train-gcft", "--rep", "ind", "--lambda", "0.1", "--criterion", "hard", "--out",
                 str(tmp_path / "g")] + common) == 0
    m = json.loads((tmp_path / "g" / "manifest.json").read_text())
    assert m["arguments"]["lam"] == 0.1
