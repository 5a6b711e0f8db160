import json
import subprocess
import sys

import pytest

from conftest import FIXTURES
from threadbench.cli import main
from threadbench.synthetic import marker_world, separable_letters

MBOX = str(FIXTURES / "forum.mbox")


def run(*argv):
    return main([str(a) for a in argv])


def pipeline(d, seed=5):
    assert run("ingest", "--in", MBOX, "--out", d / "threads.jsonl", "--anonymize") == 0
    assert run("extract", "--threads", d / "threads.jsonl", "--out", d / "triples.jsonl") == 0
    assert run("build-mcq", "--triples", d / "triples.jsonl", "--out", d / "mcq.jsonl", "--seed", seed) == 0
    assert run("curate", "--in", d / "mcq.jsonl", "--out", d / "curated.jsonl", "--seed", seed) == 0
    return d


def test_ingest_writes_threads_and_manifest(tmp_path):
    out = tmp_path / "threads.jsonl"
    assert run("ingest", "--in", MBOX, "--out", out) == 0
    assert len(out.read_text().splitlines()) == 8
    manifest = json.loads((tmp_path / "threads.jsonl.manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["command"] == "ingest"
    assert list(manifest["inputs"].values())[0] and manifest["version"]


def test_unknown_subcommand_is_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        run("frobnicate")
    assert info.value.code == 2


def test_bad_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        run("curate", "--in", "x", "--out", "y", "--dedup-threshold", "lots")
    assert info.value.code == 2
    assert "--dedup-threshold" in capsys.readouterr().err


def test_missing_items_file_is_domain_error(tmp_path, capsys):
    missing = tmp_path / "nope.jsonl"
    assert run("evaluate", "--items", missing, "--out", tmp_path / "ev") == 1
    assert str(missing) in capsys.readouterr().err


def test_global_flags_before_or_after_subcommand(tmp_path):
    assert main(["--seed", "4", "ingest", "--in", MBOX, "--out", str(tmp_path / "a.jsonl")]) == 0
    assert main(["ingest", "--seed", "4", "--in", MBOX, "--out", str(tmp_path / "b.jsonl")]) == 0
    for name in ("a", "b"):
        assert json.loads((tmp_path / f"{name}.jsonl.manifest.json").read_text())["seed"] == 4


def test_pipeline_reruns_byte_identical(tmp_path):
    a, b = pipeline(tmp_path / "a"), pipeline(tmp_path / "b")
    for name in ("threads.jsonl", "triples.jsonl", "mcq.jsonl", "curated.jsonl"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    stats = json.loads((a / "curated.jsonl.manifest.json").read_text())["stats"]
    assert stats["train"] + stats["test"] == len((a / "curated.jsonl").read_text().splitlines())


def test_evaluate_and_report(tmp_path):
    d = pipeline(tmp_path)
    ev = d / "ev"
    assert run("evaluate", "--items", d / "curated.jsonl", "--mock-mode", "gold", "--runs", 2, "--ks", "1,2", "--out", ev) == 0
    data = json.loads((ev / "report.json").read_text())
    assert data["accuracy"] == 1.0 and data["pass_at_k"] == {"1": 1.0, "2": 1.0}
    assert run("report", "--records", ev / "records.jsonl", "--items", d / "curated.jsonl", "--ks", "1,2", "--out", d / "rep") == 0
    assert json.loads((d / "rep" / "report.json").read_text()) == data


def test_evaluate_rejects_ks_beyond_runs(tmp_path):
    d = pipeline(tmp_path)
    assert run("evaluate", "--items", d / "curated.jsonl", "--runs", 2, "--ks", "4", "--out", d / "ev") == 2


def test_reward_command(tmp_path):
    d = pipeline(tmp_path)
    items = [json.loads(line) for line in (d / "curated.jsonl").read_text().splitlines()]
    responses = d / "responses.jsonl"
    responses.write_text("".join(
        json.dumps({"question_id": it["id"], "response": f"<explanation>x</explanation> <answer>{it['correct_label']}</answer>"}) + "\n"
        for it in items
    ))
    assert run("reward", "--responses", responses, "--gold", d / "curated.jsonl", "--out", d / "scores.jsonl") == 0
    scores = [json.loads(line) for line in (d / "scores.jsonl").read_text().splitlines()]
    assert [s["total"] for s in scores] == [3] * len(items)


def test_train_grpo_command(tmp_path):
    data = tmp_path / "toy.jsonl"
    data.write_text("".join(json.dumps({"features": x.tolist(), "gold": g}) + "\n" for x, g in separable_letters(300)))
    cfg = tmp_path / "cfg.toml"
    cfg.write_text("[grpo]\nlearning_rate = 0.05\nepochs = 2\n")
    out = tmp_path / "run"
    assert run("train-grpo", "--data", data, "--config", cfg, "--out", out) == 0
    lines = (out / "training_log.csv").read_text().splitlines()
    assert lines[0] == "step,mean_reward,objective,kl,accuracy" and len(lines) == 3
    assert float(lines[-1].split(",")[-1]) >= 0.95
    assert (out / "policy.npz").exists() and (out / "manifest.json").exists()


def test_train_grpo_bad_config_is_domain_error(tmp_path):
    data = tmp_path / "toy.jsonl"
    data.write_text(json.dumps({"features": [1.0], "gold": 0}) + "\n")
    cfg = tmp_path / "cfg.toml"
    cfg.write_text("[grpo]\nmomentum = 3\n")
    assert run("train-grpo", "--data", data, "--config", cfg, "--out", tmp_path / "o") == 1


def test_train_router_and_route(tmp_path):
    responses, questions = marker_world(200, seed=1)
    resp = tmp_path / "responses.jsonl"
    with open(resp, "w") as fh:
        for qi, q in enumerate(responses.question_ids):
            for e, name in enumerate(responses.experts):
                for run_i, r in enumerate(responses.cells[qi][e]):
                    fh.write(json.dumps({"question_id": q, "expert": name, "run": run_i,
                                         "response": r.response_text, "is_correct": r.is_correct}) + "\n")
    qs = tmp_path / "questions.jsonl"
    qs.write_text("".join(json.dumps({"id": k, "question": v}) + "\n" for k, v in questions.items()))
    cfg = tmp_path / "router.toml"
    cfg.write_text("[grpo]\nlearning_rate = 0.05\n")
    out = tmp_path / "router"
    assert run("train-router", "--responses", resp, "--questions", qs, "--config", cfg, "--out", out) == 0
    assert json.loads((out / "routing_report.json").read_text())["accuracy"] >= 0.95
    assert run("route", "--policy", out / "router.npz", "--questions", qs, "--responses", resp, "--out", tmp_path / "routes") == 0
    routes = [json.loads(line) for line in (tmp_path / "routes" / "routes.jsonl").read_text().splitlines()]
    assert len(routes) == 200 and {r["expert"] for r in routes} <= set(responses.experts)


def test_console_script_runs():
    proc = subprocess.run([sys.executable, "-m", "threadbench.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "threadbench" in proc.stdout
