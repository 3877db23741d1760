import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from causalpose.cli import main
from causalpose.trainer import load_checkpoint, load_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SMOKE = str(CONFIGS / "smoke.cfg")


def records(out):
    return [json.loads(line) for line in out.splitlines() if line.startswith("{")]


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    assert main(["train", "--config", SMOKE, "--out", str(root / "run")]) == 0
    assert main(["gen", "--config", SMOKE, "--out", str(root / "test.bin"),
                 "--override", "mode=decorrelated", "--override", "seed=5"]) == 0
    return root


def test_train_writes_outputs(smoke_run):
    run = smoke_run / "run"
    assert {p.name for p in run.iterdir()} >= {"checkpoint.bin", "train_log.jsonl", "resolved_config.cfg"}
    cfg, bench = load_config(run / "resolved_config.cfg")
    assert cfg.seed == 0 and cfg.epochs == 2 and bench["seed"] == "1000"
    lines = (run / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 2 * 4  # 64 samples, batch 16


def test_train_is_deterministic(smoke_run, tmp_path):
    assert main(["train", "--config", SMOKE, "--out", str(tmp_path)]) == 0
    assert (tmp_path / "checkpoint.bin").read_bytes() == (smoke_run / "run" / "checkpoint.bin").read_bytes()


def test_lambda_zero_override(tmp_path):
    assert main(["train", "--config", SMOKE, "--out", str(tmp_path), "--override", "lambda=0"]) == 0
    logs = [json.loads(line) for line in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert any(r["cf"] > 0 for r in logs)
    assert all(r["total"] == r["kpt"] for r in logs)
    assert load_checkpoint(tmp_path / "checkpoint.bin")[2].lam == 0.0


def test_bad_config_exits_two(tmp_path, capsys):
    assert main(["train", "--config", SMOKE, "--out", str(tmp_path), "--override", "nope=1"]) == 2
    assert "nope" in capsys.readouterr().err
    bad = tmp_path / "bad.cfg"
    bad.write_text("[train]\nlam = -1\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path)]) == 2


def test_unknown_flag_rejected():
    with pytest.raises(SystemExit) as info:
        main(["train", "--config", SMOKE, "--out", "x", "--bogus"])
    assert info.value.code == 2


def test_eval_reports(smoke_run, capsys):
    run = smoke_run / "run"
    out = smoke_run / "metrics.jsonl"
    assert main(["eval", "--checkpoint", str(run / "checkpoint.bin"), "--data", str(smoke_run / "test.bin"),
                 "--enrich", "2", "0.0", "--freq", "--scores", "--out", str(out)]) == 0
    recs = {r["metric"]: r for r in records(capsys.readouterr().out)}
    assert set(recs) == {"pck", "enrichment", "intervention_frequency", "confounder_scores"}
    assert 0 <= recs["pck"]["overall"] <= 1 and "legs" in recs["pck"]
    e = recs["enrichment"]
    assert e["ci_low"] <= e["mean_delta"] <= e["ci_high"]
    assert recs["intervention_frequency"]["overall"] == pytest.approx(0.25)
    assert len(out.read_text().splitlines()) == 4


def test_eval_frequency_zero_for_null_strategy(smoke_run, tmp_path, capsys):
    assert main(["train", "--config", SMOKE, "--out", str(tmp_path), "--override", "n=0"]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(tmp_path / "checkpoint.bin"), "--data", str(smoke_run / "test.bin"),
                 "--freq"]) == 0
    freq = [r for r in records(capsys.readouterr().out) if r["metric"] == "intervention_frequency"][0]
    assert all(v == 0.0 for k, v in freq.items() if k != "metric")


def test_eval_skeleton_mismatch_exits_three(smoke_run, tmp_path):
    data = tmp_path / "renamed.bin"
    data.write_bytes((smoke_run / "test.bin").read_bytes())
    manifest = json.loads((smoke_run / "test.bin.manifest.json").read_text())
    manifest["keypoints"][0] = "nose"
    (tmp_path / "renamed.bin.manifest.json").write_text(json.dumps(manifest))
    ckpt = str(smoke_run / "run" / "checkpoint.bin")
    assert main(["eval", "--checkpoint", ckpt, "--data", str(data)]) == 3
    assert main(["gen", "--out", str(tmp_path / "narrow.bin"), "--override", "n_samples=4",
                 "--override", "rbf_centres=4"]) == 0
    assert main(["eval", "--checkpoint", ckpt, "--data", str(tmp_path / "narrow.bin")]) == 3


def test_eval_missing_checkpoint_exits_two(smoke_run, tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.bin"), "--data", str(smoke_run / "test.bin")]) == 2


def test_gen_hash_stable(tmp_path, capsys):
    for name in ("a.bin", "b.bin"):
        assert main(["gen", "--out", str(tmp_path / name), "--override", "n_samples=20", "--override", "seed=9"]) == 0
    hashes = [r["sha256"] for r in records(capsys.readouterr().out)]
    assert hashes[0] == hashes[1]
    ma = json.loads((tmp_path / "a.bin.manifest.json").read_text())
    assert ma["sha256"] == hashes[0] and ma["config"]["seed"] == 9


def test_scm_verify_bundled(capsys):
    assert main(["scm-verify", str(CONFIGS / "example_scm.cfg")]) == 0
    out = capsys.readouterr().out
    rec = records(out)[0]
    assert max(rec["context_max"], rec["exchange_max"], rec["adjust_max"]) < 1e-12
    assert "1/1 PASS" in out


def test_scm_verify_random(capsys):
    assert main(["scm-verify", "--random", "1000", "--seed", "7"]) == 0
    assert "1000/1000 PASS" in capsys.readouterr().out


def test_scm_verify_unnormalised_row(tmp_path, capsys):
    text = (CONFIGS / "example_scm.cfg").read_text().splitlines()
    i = next(j for j, line in enumerate(text) if line.strip() == "[cpt_x]")
    key = text[i + 1].split("=")[0].strip()
    text[i + 1] = f"{key} = 0.9 0.9 0.9"
    (tmp_path / "bad.cfg").write_text("\n".join(text) + "\n")
    assert main(["scm-verify", str(tmp_path / "bad.cfg")]) == 2
    assert f"row {key}" in capsys.readouterr().err


def test_gradcheck_single_op_and_seed(capsys):
    assert main(["gradcheck", "--op", "softmax", "--seed", "3"]) == 0
    first = records(capsys.readouterr().out)
    assert [r["op"] for r in first] == ["softmax"]
    main(["gradcheck", "--op", "softmax", "--seed", "3"])
    assert records(capsys.readouterr().out) == first
    assert main(["gradcheck", "--op", "fft"]) == 2


def test_dump_embeddings(smoke_run, tmp_path):
    out = tmp_path / "emb.jsonl"
    assert main(["dump-embeddings", "--checkpoint", str(smoke_run / "run" / "checkpoint.bin"),
                 "--data", str(smoke_run / "test.bin"), "--out", str(out), "--samples", "10"]) == 0
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    z = [r for r in rows if r["kind"] == "Z"]
    f = [r for r in rows if r["kind"] == "F"]
    assert [r["keypoint"] for r in z] == list(range(8))
    assert len(f) == 80 and {"context", "occluded", "name"} <= set(f[0])
    # one keypoint type: many F points with nonzero spread, a single Z point
    head = np.array([r["values"] for r in f if r["keypoint"] == 0])
    assert head.std(axis=0).sum() > 0


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "causalpose", "gradcheck", "--op", "relu"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip().endswith("PASS")
