"""Config parsing, command wiring, exit codes, and the determinism and
no-input-mutation guarantees of the command-line surface."""

import hashlib
import os

import numpy as np
import pytest

from samplernn import checkpoint as ckpt
from samplernn.audio import read_wav
from samplernn.cli import build_run_config, load_config, main, parse_config_text
from samplernn.errors import ConfigError
from samplernn.model import SampleRnn, TierConfig


# ---- config text parsing ----


def test_parse_config_text_basics():
    kv = parse_config_text(
        "# a comment\n"
        "\n"
        "model.tiers = 3\n"
        "  model.hidden =64\n"
        "data.manifest = path with spaces/manifest.txt\n"
    )
    assert kv == {
        "model.tiers": "3",
        "model.hidden": "64",
        "data.manifest": "path with spaces/manifest.txt",
    }


def test_parse_config_rejects_garbage():
    with pytest.raises(ConfigError, match="key = value"):
        parse_config_text("just words\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_text("seed = 1\nseed = 2\n")
    with pytest.raises(ConfigError, match="empty key"):
        parse_config_text("= 3\n")


def test_build_run_config_routes_fields():
    cfg = build_run_config({
        "model.tiers": "3",
        "model.frame_sizes": "2,2,8",
        "model.hidden": "24",
        "model.use_embedding": "false",
        "model.head": "gmm",
        "train.max_steps": "10",
        "train.lr": "0.002",
        "data.manifest": "m.txt",
        "out": "rundir",
        "seed": "9",
    })
    assert cfg.model.frame_sizes == (2, 2, 8)
    assert cfg.model.hidden == 24
    assert cfg.model.use_embedding is False
    assert cfg.train.max_steps == 10
    assert cfg.train.lr == pytest.approx(0.002)
    assert cfg.train.seed == 9 and cfg.seed == 9
    assert cfg.data_manifest == "m.txt" and cfg.out_dir == "rundir"


def test_build_run_config_rejects_unknown_and_bad_values():
    with pytest.raises(ConfigError, match="unknown model field"):
        build_run_config({"model.nope": "1"})
    with pytest.raises(ConfigError, match="unknown config key"):
        build_run_config({"mystery": "1"})
    with pytest.raises(ConfigError, match="top-level 'seed'"):
        build_run_config({"train.seed": "4"})
    with pytest.raises(ConfigError, match="boolean"):
        build_run_config({"model.use_embedding": "maybe"})
    with pytest.raises(ConfigError):
        build_run_config({"model.hidden": "lots"})
    with pytest.raises(ConfigError):  # TierConfig invariant: FS chain must divide
        build_run_config({"model.tiers": "3", "model.frame_sizes": "2,2,7"})


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "nope.cfg"))


# ---- end-to-end command flows ----


def _make_corpus(tmp_path, seed=1):
    out = str(tmp_path / "corpus")
    rc = main(["make-synth", "--kind", "markov", "--out", out, "--seed", str(seed),
               "--clips", "4", "--clip-seconds", "0.3"])
    assert rc == 0
    return os.path.join(out, "manifest.txt")


def _write_config(tmp_path, manifest, out_dir, extra=""):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "model.tiers = 2\n"
        "model.frame_sizes = 2,2\n"
        "model.hidden = 16\n"
        "model.embed_dim = 8\n"
        "model.q = 64\n"
        "train.subseq_len = 64\n"
        "train.batch_size = 2\n"
        "train.max_steps = 40\n"
        "train.eval_every = 20\n"
        f"data.manifest = {manifest}\n"
        f"out = {out_dir}\n"
        "seed = 3\n" + extra,
        encoding="utf-8",
    )
    return str(cfg)


def _sha(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def test_make_synth_markov_manifest_metadata(tmp_path):
    manifest = _make_corpus(tmp_path)
    text = open(manifest, encoding="utf-8").read()
    assert "# entropy_bits: 2.000000" in text
    assert text.count("\ttrain\t") == 0  # split is the first field
    lines = [l for l in text.splitlines() if not l.startswith("#")]
    assert sum(1 for l in lines if l.startswith("train\t")) == 2
    assert sum(1 for l in lines if l.startswith("valid\t")) == 1
    assert sum(1 for l in lines if l.startswith("test\t")) == 1


def test_make_synth_two_speaker_balanced(tmp_path):
    out = str(tmp_path / "ts")
    assert main(["make-synth", "--kind", "two-speaker", "--out", out, "--seed", "2",
                 "--clips", "3", "--utterances", "2", "--utter-seconds", "0.2"]) == 0
    lines = [l for l in open(os.path.join(out, "manifest.txt")).read().splitlines()
             if not l.startswith("#")]
    a = [l for l in lines if "\tspka_" in l]
    b = [l for l in lines if "\tspkb_" in l]
    assert len(a) == len(b) == 3
    for group in (a, b):
        splits = sorted(l.split("\t")[0] for l in group)
        assert splits == ["test", "train", "valid"]


def test_make_synth_deterministic(tmp_path):
    m1 = _make_corpus(tmp_path / "a", seed=7)
    m2 = _make_corpus(tmp_path / "b", seed=7)
    d1, d2 = os.path.dirname(m1), os.path.dirname(m2)
    for name in sorted(os.listdir(d1)):
        assert _sha(os.path.join(d1, name)) == _sha(os.path.join(d2, name))


def test_train_eval_generate_cycle(tmp_path, capsys):
    manifest = _make_corpus(tmp_path)
    out_dir = str(tmp_path / "run")
    cfg = _write_config(tmp_path, manifest, out_dir)

    inputs = {p: _sha(p) for p in [manifest, cfg]}
    assert main(["train", "--config", cfg]) == 0
    captured = capsys.readouterr().out
    assert "best_valid_bits\t" in captured
    log = open(os.path.join(out_dir, "metrics.log")).read()
    lines = log.strip().splitlines()
    assert len(lines) == 2
    step, train_nll, valid_nll = lines[-1].split("\t")
    assert step == "40"
    assert {p: _sha(p) for p in inputs} == inputs, "inputs were mutated"

    best = os.path.join(out_dir, "best.ckpt")
    assert main(["eval", "--ckpt", best, "--data", manifest, "--split", "valid"]) == 0
    eval_out = capsys.readouterr().out
    total = [l for l in eval_out.splitlines() if l.startswith("nll_bits\t")]
    assert len(total) == 1
    best_logged = min(float(l.split("\t")[2]) for l in lines)
    assert abs(float(total[0].split("\t")[1]) - best_logged) < 2e-6
    assert eval_out.count("seq\t") == 1  # one valid chunk in this corpus

    wav = str(tmp_path / "g.wav")
    assert main(["generate", "--ckpt", best, "--out", wav, "--seconds", "0.25",
                 "--seed", "11"]) == 0
    x, rate = read_wav(wav)
    assert rate == 16000 and len(x) == 4000


def test_train_rerun_is_byte_identical(tmp_path):
    manifest = _make_corpus(tmp_path)
    cfg1 = _write_config(tmp_path, manifest, str(tmp_path / "r1"))
    assert main(["train", "--config", cfg1]) == 0
    assert main(["train", "--config", cfg1, "--out", str(tmp_path / "r2")]) == 0
    assert _sha(str(tmp_path / "r1" / "metrics.log")) == _sha(str(tmp_path / "r2" / "metrics.log"))
    assert _sha(str(tmp_path / "r1" / "best.ckpt")) == _sha(str(tmp_path / "r2" / "best.ckpt"))


def test_generate_silence_span_is_zero(tmp_path):
    manifest = _make_corpus(tmp_path)
    out_dir = str(tmp_path / "run")
    assert main(["train", "--config", _write_config(tmp_path, manifest, out_dir)]) == 0
    wav = str(tmp_path / "s.wav")
    assert main(["generate", "--ckpt", os.path.join(out_dir, "best.ckpt"),
                 "--out", wav, "--seconds", "0.5", "--seed", "3",
                 "--silence-at", "0.125", "--silence-len", "0.125"]) == 0
    x, _ = read_wav(wav)
    assert (x[2000:4000] == 0.0).all()
    assert (x[:2000] != 0.0).any()


def test_generate_flag_validation(tmp_path):
    manifest = _make_corpus(tmp_path)
    out_dir = str(tmp_path / "run")
    assert main(["train", "--config", _write_config(tmp_path, manifest, out_dir)]) == 0
    best = os.path.join(out_dir, "best.ckpt")
    wav = str(tmp_path / "x.wav")
    assert main(["generate", "--ckpt", best, "--out", wav, "--seconds", "0.1",
                 "--silence-at", "0.02"]) == 2
    assert main(["generate", "--ckpt", best, "--out", wav, "--seconds", "0.1",
                 "--temperature", "0"]) == 2
    assert main(["generate", "--ckpt", best, "--out", wav, "--seconds", "0.1",
                 "--silence-at", "0.05", "--silence-len", "1.0"]) == 2


def test_eval_untrained_uniform_head_is_eight_bits(tmp_path):
    manifest = _make_corpus(tmp_path)
    model = SampleRnn(TierConfig(tiers=2, frame_sizes=(2, 2), hidden=16,
                                 embed_dim=8, q=256), seed=0)
    model.mlp.l3.g.data[...] = 0.0
    model.mlp.l3.b.data[...] = 0.0
    path = str(tmp_path / "uniform.ckpt")
    ckpt.save_model(path, model)
    assert main(["eval", "--ckpt", path, "--data", manifest, "--split", "valid"]) == 0


def test_eval_untrained_output_value(tmp_path, capsys):
    manifest = _make_corpus(tmp_path)
    model = SampleRnn(TierConfig(tiers=2, frame_sizes=(2, 2), hidden=16,
                                 embed_dim=8, q=256), seed=0)
    model.mlp.l3.g.data[...] = 0.0
    model.mlp.l3.b.data[...] = 0.0
    path = str(tmp_path / "uniform.ckpt")
    ckpt.save_model(path, model)
    main(["eval", "--ckpt", path, "--data", manifest, "--split", "valid"])
    out = capsys.readouterr().out
    assert "nll_bits\t8.000000" in out


def test_probe_constant_output_is_inconclusive(tmp_path, capsys):
    model = SampleRnn(TierConfig(tiers=2, frame_sizes=(2, 2), hidden=8,
                                 embed_dim=4, q=16), seed=0)
    model.mlp.l3.g.data[...] = 0.0
    model.mlp.l3.b.data[...] = 0.0
    model.mlp.l3.b.data[12] = 1000.0  # always emit bin 12: a DC signal
    path = str(tmp_path / "const.ckpt")
    ckpt.save_model(path, model)
    assert main(["probe", "--ckpt", path, "--runs", "2", "--seed", "1"]) == 4
    out = capsys.readouterr().out
    assert "inconclusive" in out


def test_exit_codes_for_bad_inputs(tmp_path):
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("model.tiers = soup\n")
    assert main(["train", "--config", str(bad_cfg)]) == 2
    missing_data = tmp_path / "md.cfg"
    missing_data.write_text("data.manifest = nope.txt\nout = o\n")
    assert main(["train", "--config", str(missing_data)]) == 3
    assert main(["eval", "--ckpt", str(tmp_path / "none.ckpt"),
                 "--data", str(tmp_path / "none.txt")]) == 3


def test_thread_env_validation(tmp_path, monkeypatch):
    monkeypatch.setenv("SAMPLERNN_THREADS", "banana")
    assert main(["gradcheck", "--instances", "1"]) == 2
    monkeypatch.setenv("SAMPLERNN_THREADS", "0")
    assert main(["gradcheck", "--instances", "1"]) == 2


def test_gradcheck_command_reports(capsys):
    assert main(["gradcheck", "--instances", "1"]) == 0
    out = capsys.readouterr().out
    assert "matmul\t" in out and "gru_step\t" in out
    assert "worst\t" in out
    for line in out.splitlines():
        if line.startswith(("matmul", "gru_step", "mlp")):
            assert line.endswith("pass")
