import json
import subprocess
import sys

import pytest

from lipunit.cli import run
from lipunit.config import ConfigError, apply_overrides, build_config, load_config
from lipunit.formats import read_wav
from lipunit.pipeline import ABLATION_ROWS, sha256_file

from conftest import ROOT

SMOKE = str(ROOT / "configs" / "smoke.yaml")


def write(tmp_path, text):
    p = tmp_path / "cfg.yaml"
    p.write_text(text)
    return str(p)


def test_defaults_are_filled(tmp_path):
    cfg = load_config(write(tmp_path, "seed: 3\n"))
    assert cfg.audio.n_mels == 80 and cfg.audio.win_ms == 40.0 and cfg.audio.hop_ms == 10.0
    assert cfg.audio.frame_rate_hz / cfg.units.stack_factor == 50.0
    assert cfg.l2s.unit_vocab == cfg.vocoder.unit_vocab == 64
    assert cfg.l2s.seed == cfg.vocoder.seed == cfg.units.seed == 3


def test_shipped_configs_validate():
    for name in ("default", "smoke", "ablation"):
        load_config(ROOT / "configs" / f"{name}.yaml")


def test_product_law_violation():
    with pytest.raises(ConfigError, match="upsample"):
        build_config({"vocoder": {"upsample_factors": [4, 4, 4]}})


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="melz"):
        build_config({"audio": {"melz": 80}})


def test_all_violations_reported():
    with pytest.raises(ConfigError) as err:
        build_config({"melz": 1, "vocoder": {"upsample_factors": [4, 4, 4]}, "units": {"k": "many"}})
    assert len(err.value.problems) >= 3


def test_derived_field_conflict():
    with pytest.raises(ConfigError, match="unit_vocab"):
        build_config({"units": {"k": 32}, "l2s": {"unit_vocab": 64}})
    assert build_config({"units": {"k": 32}}).l2s.unit_vocab == 32


def test_codebook_k_mismatch(tmp_path):
    import numpy as np
    from lipunit.units import Codebook, codebook_save
    codebook_save(Codebook(np.zeros((8, 54)) + np.arange(8)[:, None]), tmp_path / "c.uncb")
    with pytest.raises(ConfigError, match="K=8"):
        build_config({"units": {"k": 64, "codebook": str(tmp_path / "c.uncb")}})


def test_overrides():
    raw = apply_overrides({"l2s": {"steps": 5}}, ["l2s.steps=7", "vocoder.upsample_factors=[8, 4, 5]", "seed=2"])
    assert raw == {"l2s": {"steps": 7}, "vocoder": {"upsample_factors": [8, 4, 5]}, "seed": 2}
    with pytest.raises(ConfigError):
        apply_overrides({}, ["nonsense"])


def test_cli_validate_prints_config(capsys):
    assert run(["validate", "--config", SMOKE, "--set", "l2s.steps=9"]) == 0
    out = capsys.readouterr().out
    assert "steps: 9" in out and "n_mels: 80" in out


def test_cli_config_error_exit_2(tmp_path, capsys):
    assert run(["validate", "--config", write(tmp_path, "vocoder:\n  upsample_factors: [4, 4, 4]\n")]) == 2
    assert run(["make-data", "--config", write(tmp_path, "melz: 1\n")]) == 2
    assert "melz" in capsys.readouterr().err


def test_cli_missing_artifact_exit_3(tmp_path, capsys):
    assert run(["evaluate", "--config", SMOKE, "--output-dir", str(tmp_path / "run")]) == 3
    assert "l2s.pt" in capsys.readouterr().err


def test_cli_runtime_failure_exit_1(tmp_path):
    out = tmp_path / "run"
    assert run(["make-data", "--config", SMOKE, "--output-dir", str(out)]) == 0
    (out / "corpus" / "manifest.jsonl").write_text("{not json\n")
    assert run(["fit-units", "--config", SMOKE, "--output-dir", str(out)]) == 1


def test_make_data_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run(["make-data", "--config", SMOKE, "--seed", "7", "--output-dir", str(tmp_path / name)]) == 0
    a = json.loads((tmp_path / "a" / "run_manifest.json").read_text())
    b = json.loads((tmp_path / "b" / "run_manifest.json").read_text())
    assert a == b and "corpus/manifest.jsonl" in a


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    assert run(["ablate", "--config", SMOKE, "--output-dir", str(out)]) == 0
    return out


def test_ablate_table_rows(smoke_run):
    result = json.loads((smoke_run / "reports" / "ablation.json").read_text())
    assert list(result["rows"]) == list(ABLATION_ROWS)
    table = (smoke_run / "reports" / "ablation.txt").read_text()
    for name in ("Baseline", "+ Speech units", "+ Multi-input vocoder", "+ Augmented mel"):
        assert name in table
    assert set(result["checks"]) == {"units_lower_uer", "multi_input_higher_corrupted_stoi",
                                     "augmentation_degrades_less"}
    assert result["passthrough"]["mean"]["uer"] is not None


def test_run_manifest_hashes(smoke_run):
    entries = json.loads((smoke_run / "run_manifest.json").read_text())
    for rel, digest in entries.items():
        assert sha256_file(smoke_run / rel) == digest


def test_resume_is_a_noop(smoke_run):
    before = {p: p.stat().st_mtime_ns for p in smoke_run.rglob("*") if p.is_file()}
    assert run(["ablate", "--config", SMOKE, "--output-dir", str(smoke_run), "--resume"]) == 0
    after = {p: p.stat().st_mtime_ns for p in smoke_run.rglob("*") if p.is_file()}
    assert before == after


def test_full_command_chain(tmp_path):
    out = str(tmp_path / "run")
    for cmd in ("make-data", "fit-units", "train-l2s", "train-vocoder", "evaluate"):
        assert run([cmd, "--config", SMOKE, "--output-dir", out]) == 0, cmd
    report = json.loads((tmp_path / "run" / "reports" / "metrics.json").read_text())
    assert report["counts"]["utterances"] > 0
    passthrough = json.loads((tmp_path / "run" / "reports" / "metrics_passthrough.json").read_text())
    assert passthrough["label"] == "ground-truth features"
    before = {p: p.stat().st_mtime_ns for p in (tmp_path / "run").rglob("*") if p.is_file()}
    for cmd in ("make-data", "fit-units", "train-l2s", "train-vocoder", "evaluate"):
        assert run([cmd, "--config", SMOKE, "--output-dir", out, "--resume"]) == 0, cmd
    after = {p: p.stat().st_mtime_ns for p in (tmp_path / "run").rglob("*") if p.is_file()}
    assert before == after

    frames = next((tmp_path / "run" / "corpus" / "frames").glob("*.vidf"))
    wav = tmp_path / "out.wav"
    assert run(["synthesize", "--config", SMOKE, "--output-dir", out, "--frames", str(frames),
                "--speaker", "1", "--out", str(wav)]) == 0
    from lipunit.formats import load_frames
    assert len(read_wav(wav).samples) == load_frames(frames).shape[0] * 640


def test_synthesize_needs_arguments(tmp_path):
    assert run(["synthesize", "--config", SMOKE, "--output-dir", str(tmp_path)]) == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "lipunit.cli", "validate", "--config", SMOKE],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "upsample_factors" in proc.stdout
