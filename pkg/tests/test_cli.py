"""CLI behavior: exit-code taxonomy, output rendering, and read-only
treatment of the bundled data files."""

import hashlib
from pathlib import Path

import pytest

from uarchfuzz.analytics import EpisodeRecord, EpisodeWriter
from uarchfuzz.cli import EXIT_CAPABILITY, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from uarchfuzz.fixtures import CORPUS_DIR, DATA_DIR

DEMO_TOML = '[run]\ncatalog = "corpus"\nscenario = "demo"\n'


@pytest.fixture
def demo_config(tmp_path):
    path = tmp_path / "demo.toml"
    path.write_text(DEMO_TOML)
    return str(path)


def data_digest():
    h = hashlib.sha256()
    for p in sorted(DATA_DIR.rglob("*")):
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# --- catalog ---------------------------------------------------------------------


def test_catalog_lists_sets_and_shape(capsys):
    assert main(["catalog", "--catalog", "skylake"]) == EXIT_OK
    out = capsys.readouterr().out
    rows = {
        line.split()[0]: line.split()[1]
        for line in out.splitlines()
        if len(line.split()) == 2
    }
    assert rows["AVX512F_512"] == "2192"
    assert rows["TOTAL"] == "12598"
    assert "action space:" in out


def test_catalog_unknown_source_is_a_config_error(capsys):
    assert main(["catalog", "--catalog", "/nonexistent/catalog.json"]) == EXIT_CONFIG
    assert "error" in capsys.readouterr().err


# --- config plumbing ----------------------------------------------------------------


def test_print_config_renders_effective_toml(capsys):
    assert main(["train", "--print-config"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.startswith("[run]")
    assert 'backend = "sim"' in out
    assert "[train]" in out

    assert main(["train", "--backend", "hw", "--print-config"]) == EXIT_OK
    assert 'backend = "hw"' in capsys.readouterr().out


def test_master_seed_spreads_into_sections(capsys):
    assert main(["train", "--seed", "99", "--print-config"]) == EXIT_OK
    seeded = capsys.readouterr().out
    assert main(["train", "--seed", "99", "--print-config"]) == EXIT_OK
    again = capsys.readouterr().out
    assert main(["train", "--print-config"]) == EXIT_OK
    default = capsys.readouterr().out
    assert seeded == again
    assert seeded != default
    changed = {
        line.split("=")[0].strip()
        for line, dline in zip(seeded.splitlines(), default.splitlines())
        if line != dline
    }
    assert len(changed) >= 2  # multiple sections reseeded, not just one


def test_bad_cores_flag_is_a_config_error(capsys):
    assert main(["train", "--cores", "0,x", "--print-config"]) == EXIT_CONFIG
    assert "--cores" in capsys.readouterr().err


def test_missing_config_file_is_a_config_error(capsys):
    rc = main(["train", "--config", "/nonexistent/run.toml", "--print-config"])
    assert rc == EXIT_CONFIG


# --- replay ------------------------------------------------------------------------


def test_replay_bundled_kernel_classifies_a_leak(demo_config, capsys):
    kernel = str(CORPUS_DIR / "mmx_x87.asm")
    assert main(["replay", "--config", demo_config, kernel]) == EXIT_OK
    out = capsys.readouterr().out
    assert "PSUBQ MM2, [R15]" in out
    assert "classified_leak: True" in out
    assert "leak: 4 bytes decoded" in out
    assert "granularity 4-bit" in out


def test_replay_benign_sequence_reports_near_zero_bad_speculation(
    demo_config, tmp_path, capsys
):
    seq = tmp_path / "benign.asm"
    seq.write_text("LZCNT EDX, dword [R15]\n")
    assert main(["replay", "--config", demo_config, str(seq)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "classified_leak: False" in out
    bad = next(
        float(line.split(":")[1])
        for line in out.splitlines()
        if "bad_speculation:" in line
    )
    # One benign instruction: only the issue/retire gap, no recovery.
    assert 0.0 <= bad <= 20.0


def test_replay_missing_sequence_file(demo_config, capsys):
    assert main(["replay", "--config", demo_config, "/nonexistent.asm"]) == EXIT_CONFIG
    assert "cannot read sequence file" in capsys.readouterr().err


def test_replay_unknown_mnemonic(demo_config, tmp_path, capsys):
    seq = tmp_path / "bad.asm"
    seq.write_text("FROBNICATE RAX\n")
    assert main(["replay", "--config", demo_config, str(seq)]) == EXIT_CONFIG
    assert "FROBNICATE" in capsys.readouterr().err


def test_hw_backend_without_tooling_exits_capability(demo_config, tmp_path, capsys):
    kernel = str(CORPUS_DIR / "mmx_x87.asm")
    rc = main(["replay", "--config", demo_config, "--backend", "hw", kernel])
    assert rc == EXIT_CAPABILITY
    assert "error" in capsys.readouterr().err


# --- train -----------------------------------------------------------------------------


def test_train_small_run_end_to_end(tmp_path, capsys):
    cfg = tmp_path / "train.toml"
    cfg.write_text(
        "[run]\n"
        'scenario = "easy"\n'
        "scenario_seed = 4\n"
        "[env]\n"
        "max_len = 2\n"
        "[observer]\n"
        "dim = 16\n"
        "[train]\n"
        "seed = 4\n"
        "rollout_len = 128\n"
        "minibatch_size = 32\n"
        "epochs = 2\n"
        "hidden = 32\n"
    )
    out_dir = tmp_path / "run"
    rc = main(
        ["train", "--config", str(cfg), "--steps", "256", "--out", str(out_dir)]
    )
    assert rc == EXIT_OK
    out = capsys.readouterr().out
    assert "trained" in out
    assert "mean reward (last 100 episodes):" in out
    assert "checkpoint path:" in out
    assert (out_dir / "reward.svg").exists()


def test_train_bad_steps(capsys):
    assert main(["train", "--steps", "0"]) == EXIT_CONFIG


# --- leakrate and analyze -----------------------------------------------------------------


def test_leakrate_sweep_cli(demo_config, tmp_path, capsys):
    kernel = str(CORPUS_DIR / "serialize.asm")
    out_dir = tmp_path / "sweep"
    rc = main(
        [
            "leakrate", "--config", demo_config, kernel,
            "--iterations", "50,100", "--granularities", "4,8",
            "--out", str(out_dir),
        ]
    )
    assert rc == EXIT_OK
    out = capsys.readouterr().out
    assert "serialize g=4" in out
    assert "peak" in out
    assert (out_dir / "leakrate.svg").exists()
    assert (out_dir / "leakrate-g4.json").exists()


def test_leakrate_range_syntax(demo_config, tmp_path, capsys):
    kernel = str(CORPUS_DIR / "verw.asm")
    rc = main(
        [
            "leakrate", "--config", demo_config, kernel,
            "--iterations", "10:30:10", "--granularities", "4",
        ]
    )
    assert rc == EXIT_OK
    assert "N 10..30" in capsys.readouterr().out


def test_leakrate_bad_iteration_spec(demo_config, capsys):
    kernel = str(CORPUS_DIR / "verw.asm")
    rc = main(
        ["leakrate", "--config", demo_config, kernel, "--iterations", "ten"]
    )
    assert rc == EXIT_CONFIG
    assert "--iterations" in capsys.readouterr().err


def test_analyze_renders_plots(tmp_path, capsys):
    log = tmp_path / "episodes.jsonl"
    with EpisodeWriter(log) as w:
        for i in range(25):
            w.write(
                EpisodeRecord(
                    timestamp=float(i),
                    index=i,
                    sequence=("VERW word [R15]",),
                    step_rewards=(float(i % 9),),
                    breakdowns=({"byte_leakage": i % 3},),
                )
            )
    out_dir = tmp_path / "plots"
    assert main(["analyze", str(log), "--out", str(out_dir)]) == EXIT_OK
    assert "analyzed 25 episodes" in capsys.readouterr().out
    for name in ("reward.svg", "length.svg", "scatter.svg"):
        assert (out_dir / name).exists()


def test_analyze_damaged_log_is_a_runtime_error(tmp_path, capsys):
    log = tmp_path / "episodes.jsonl"
    with EpisodeWriter(log) as w:
        for i in range(3):
            w.write(
                EpisodeRecord(
                    timestamp=float(i),
                    index=i,
                    sequence=("VERW word [R15]",),
                    step_rewards=(1.0,),
                    breakdowns=({},),
                )
            )
    lines = log.read_text().splitlines()
    lines[1] = '{"oops":'  # damage a middle record, not the tolerated tail
    log.write_text("\n".join(lines) + "\n")
    rc = main(["analyze", str(log), "--out", str(tmp_path / "out")])
    assert rc == EXIT_RUNTIME


# --- data integrity --------------------------------------------------------------------------


def test_commands_never_mutate_bundled_data(demo_config, tmp_path):
    before = data_digest()
    main(["catalog", "--catalog", "corpus"])
    main(["replay", "--config", demo_config, str(CORPUS_DIR / "verw.asm")])
    main(
        [
            "leakrate", "--config", demo_config, str(CORPUS_DIR / "verw.asm"),
            "--iterations", "10,20", "--granularities", "4",
            "--out", str(tmp_path / "out"),
        ]
    )
    assert data_digest() == before
