import io
import json
import subprocess
import sys

import pytest

from groupvox.cli import main
from groupvox.decoding import read_waveform
from groupvox.vocab import JointVocabulary, ToyCodec

SMALL = ["--text-size", "32", "--audio-size", "48"]


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data then a very short train run, shared by the downstream commands."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--records", "60", "--max-len", "2", "--seed", "1", "--out", str(root / "data"),
                 *SMALL]) == 0
    assert main(["train", "--corpus", str(root / "data" / "corpus.jsonl"), "--steps", "20", "--warmup", "4",
                 "--validate-every", "10", "--batch-size", "4", "--model-dim", "16", "--heads", "2",
                 "--val-fraction", "0.1", "--out", str(root / "train"), *SMALL]) == 0
    return root


def test_latency_table(capsys):
    code, out, err = run(["latency"], capsys)
    assert code == 0 and err == ""
    lines = out.strip().splitlines()
    assert lines[0] == "chunk,group_size,steps"
    assert [int(ln.split(",")[2]) for ln in lines[1:]] == [30, 15, 10, 8, 6]


def test_latency_writes_figure(tmp_path, capsys):
    code, out, _ = run(["latency", "--chunk", "12,30", "--groups", "1,3", "--out", tmp_path], capsys)
    assert code == 0
    assert (tmp_path / "latency.png").stat().st_size > 0
    assert (tmp_path / "latency.csv").read_text().splitlines()[1:] == ["12,1,12", "12,3,4", "30,1,30", "30,3,10"]
    assert json.loads((tmp_path / "config.json").read_text())["groups"] == "1,3"


def test_exit_codes(tmp_path, capsys):
    assert run(["nonsense"], capsys)[0] == 1
    assert run(["train", "--steps", "x"], capsys)[0] == 1
    code, _, err = run(["train"], capsys)
    assert code == 1 and "--corpus" in err
    code, _, err = run(["train", "--corpus", tmp_path / "missing.jsonl"], capsys)
    assert code == 2 and "not found" in err
    assert run(["latency", "--groups", "0"], capsys)[0] == 2
    assert run(["latency", "--groups", "a,b"], capsys)[0] == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"no_such_key": 1}))
    code, _, err = run(["latency", "--config", bad], capsys)
    assert code == 2 and "unknown keys" in err
    bad.write_text("{not json")
    assert run(["latency", "--config", bad], capsys)[0] == 2


def test_runtime_error_exit_3(tmp_path, capsys):
    broken = tmp_path / "broken.ckpt"
    broken.write_bytes(b"not a checkpoint")
    code, out, err = run(["infer", "--checkpoint", broken, "--user", "6 7", "--out", tmp_path / "o"], capsys)
    assert code == 3 and out == "" and err


def test_config_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"chunk": "12", "groups": "2,4"}))
    code, out, _ = run(["latency", "--config", cfg, "--groups", "3", "--out", tmp_path / "o"], capsys)
    assert code == 0
    assert out.strip().splitlines()[1:] == ["12,3,4"]
    written = json.loads((tmp_path / "o" / "config.json").read_text())
    assert written["chunk"] == "12" and written["groups"] == "3" and written["command"] == "latency"


def test_gen_data_outputs(pipeline):
    lines = (pipeline / "data" / "corpus.jsonl").read_text().splitlines()
    assert len(lines) == 60
    cfg = json.loads((pipeline / "data" / "config.json").read_text())
    assert cfg["records"] == 60 and cfg["text_size"] == 32


def test_gen_data_deterministic(tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        code, out, _ = run(["gen-data", "--records", "30", "--seed", "5", "--out", tmp_path / name, *SMALL], capsys)
        assert code == 0
        outs.append(((tmp_path / name / "corpus.jsonl").read_bytes(), out))
    assert outs[0] == outs[1]


def test_train_outputs(pipeline):
    d = pipeline / "train"
    metrics = [json.loads(ln) for ln in (d / "metrics.jsonl").read_text().splitlines()]
    assert [m["step"] for m in metrics] == list(range(1, 21))
    assert (d / "ckpt" / "best.ckpt").is_file()
    assert (d / "loss.png").stat().st_size > 0


def test_infer(pipeline, tmp_path, capsys):
    ckpt = pipeline / "train" / "ckpt" / "best.ckpt"
    code, out, err = run(["infer", "--checkpoint", ckpt, "--user", "6 7", "--speaker", "2", "--max-steps", "8",
                          "--chunk", "5", "--out", tmp_path], capsys)
    assert code == 0, err
    resp = json.loads((tmp_path / "response.json").read_text())
    packets = [json.loads(ln) for ln in (tmp_path / "packets.jsonl").read_text().splitlines()]
    assert sum(p["n_tokens"] for p in packets) == len(resp["audio"])
    assert all(p["n_tokens"] == 5 for p in packets[:-1])
    header, row = out.strip().splitlines()
    assert header == "text,audio_tokens,steps,packets,truncated"
    if resp["audio"]:
        wave, rate = read_waveform(tmp_path / "response.wav.bin")
        assert wave.size == len(resp["audio"]) * (2 * 48 + 2)
    # out-of-range user tokens are a config problem, not a crash
    assert run(["infer", "--checkpoint", ckpt, "--user", "1 2", "--out", tmp_path], capsys)[0] == 2


def test_chat_rounds_reuse_grows(pipeline, tmp_path, capsys):
    ckpt = pipeline / "train" / "ckpt" / "best.ckpt"
    script = tmp_path / "turns.txt"
    script.write_text("6 7\n8\n9 10\n11\n")
    code, out, err = run(["chat", "--checkpoint", ckpt, "--script", script, "--rounds", "3", "--max-steps", "6",
                          "--out", tmp_path / "c"], capsys)
    assert code == 0, err
    rows = out.strip().splitlines()[1:]
    assert len(rows) == 3
    reuse = [int(r.split(",")[3]) for r in rows]
    assert reuse[0] == 0 and reuse[0] < reuse[1] < reuse[2]
    transcript = (tmp_path / "c" / "transcript.jsonl").read_text().splitlines()
    assert len(transcript) == 3
    assert run(["chat", "--checkpoint", ckpt, "--script", script, "--rounds", "9", "--out", tmp_path], capsys)[0] == 2


def test_chat_cache_matches_no_cache(pipeline, tmp_path, capsys, monkeypatch):
    ckpt = pipeline / "train" / "ckpt" / "best.ckpt"
    outs = {}
    for flag in ([], ["--no-cache"]):
        monkeypatch.setattr(sys, "stdin", io.StringIO("6 7\n8\n9 10\n"))
        code, out, _ = run(["chat", "--checkpoint", ckpt, "--script", "-", "--max-steps", "6",
                            "--out", tmp_path / str(len(flag)), *flag], capsys)
        assert code == 0
        outs[bool(flag)] = [r.split(",")[2] for r in out.strip().splitlines()[1:]]
    assert outs[True] == outs[False]


def test_eval_perfect_repeat(tmp_path, capsys):
    codec = ToyCodec(JointVocabulary())
    rows = [{"id": str(i), "dataset": "echo", "mode": "repeat", "reference": f"w{i} x y",
             "hypothesis": f"w{i} x y", "text_tokens": [6 + i], "audio_tokens": codec.encode([6 + i])}
            for i in range(5)]
    man = tmp_path / "m.jsonl"
    man.write_text("".join(json.dumps(r) + "\n" for r in rows))
    code, out, err = run(["eval", "--manifest", man, "--out", tmp_path / "e"], capsys)
    assert code == 0, err
    report = json.loads((tmp_path / "e" / "report.json").read_text())
    assert report["overall"] == 100.0 and report["overall_asr_wer"] == 0.0
    assert out.strip().splitlines()[-1] == "overall,5,100.00,0.0000"
    assert (tmp_path / "e" / "scores.png").stat().st_size > 0


def test_rerun_byte_identical(pipeline, tmp_path, capsys):
    data = pipeline / "data" / "corpus.jsonl"
    blobs = []
    for name in ("r1", "r2"):
        code, _, _ = run(["train", "--corpus", data, "--steps", "6", "--warmup", "2", "--validate-every", "3",
                          "--batch-size", "4", "--model-dim", "16", "--heads", "2", "--out", tmp_path / name,
                          *SMALL], capsys)
        assert code == 0
        d = tmp_path / name
        blobs.append([(d / f).read_bytes() for f in ("metrics.jsonl", "ckpt/best.ckpt", "loss.png")])
    assert blobs[0] == blobs[1]


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "groupvox.cli", "latency", "--groups", "2"],
                          capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 0
    assert proc.stdout.splitlines() == ["chunk,group_size,steps", "30,2,15"]
