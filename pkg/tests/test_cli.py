"""Command-line behavior: outputs, determinism, exit codes."""

import json
import subprocess
import sys

from stripseg.cli import main
from stripseg.scat import load_scat

TINY_GRADCHECK = {
    "pyramid": {"height": 32, "width": 32, "channels": [4, 4, 4, 4]},
    "decoder": {"heads": [1, 1, 1, 1], "dim_head": 2, "num_classes": 2, "mlp_expansion": 1},
}


def write_config(tmp_path, doc, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


class TestForward:
    def test_default_mask_shape_and_echo(self, tmp_path):
        out = tmp_path / "run"
        assert main(["forward", "--out", str(out)]) == 0
        mask = load_scat(out / "mask.scat")
        assert mask.shape == (1, 19, 16, 16)
        echo = json.loads((out / "run.json").read_text())
        assert echo["decoder"]["layernorm_eps"] == 1e-6
        assert echo["decoder"]["lpm_reduction"] == 4
        assert echo["decoder"]["init_std"] == 0.02

    def test_repeat_runs_are_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["forward", "--out", str(a)]) == 0
        assert main(["forward", "--out", str(b)]) == 0
        assert (a / "mask.scat").read_bytes() == (b / "mask.scat").read_bytes()

    def test_dump_trace_writes_all_tensors(self, tmp_path):
        out = tmp_path / "run"
        cfg = write_config(tmp_path, {"pyramid": {"channels": [4, 4, 8, 8]}})
        assert main(["forward", "--config", cfg, "--out", str(out), "--dump-trace"]) == 0
        names = sorted(p.name for p in out.iterdir())
        expect = sorted(
            ["mask.scat", "run.json"]
            + [f"M{i}.scat" for i in range(1, 5)]
            + [f"D{i}.scat" for i in range(1, 5)]
            + [f"attn{i}.scat" for i in range(1, 5)]
        )
        assert names == expect
        for stage in range(1, 5):
            assert load_scat(out / f"M{stage}.scat").shape[2] == 24

    def test_run_json_round_trip_reproduces_bytes(self, tmp_path):
        first = tmp_path / "first"
        assert main(["forward", "--out", str(first)]) == 0
        second = tmp_path / "second"
        assert main(["forward", "--config", str(first / "run.json"), "--out", str(second)]) == 0
        assert (first / "mask.scat").read_bytes() == (second / "mask.scat").read_bytes()

    def test_indivisible_height_is_config_error(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"pyramid": {"height": 60}})
        assert main(["forward", "--config", cfg]) == 2
        assert "divisible by 32" in capsys.readouterr().err

    def test_unknown_key_is_config_error(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"decoder": {"mixerr": "sca"}})
        assert main(["forward", "--config", cfg]) == 2
        assert "decoder.mixerr" in capsys.readouterr().err

    def test_malformed_json_is_config_error(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        assert main(["forward", "--config", str(path)]) == 2


class TestGradcheck:
    def test_tiny_config_passes(self, tmp_path, capsys):
        cfg = write_config(tmp_path, TINY_GRADCHECK)
        assert main(["gradcheck", "--config", cfg]) == 0
        out = capsys.readouterr().out
        assert "worst relative error" in out
        assert "FAIL" not in out

    def test_tampered_backward_is_detected(self, tmp_path):
        doc = json.loads(json.dumps(TINY_GRADCHECK))
        doc["decoder"]["init_std"] = 0.5
        cfg = write_config(tmp_path, doc)
        assert main(["gradcheck", "--config", cfg, "--tamper"]) == 1

    def test_oversize_config_rejected(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"pyramid": {"height": 64, "width": 64}})
        assert main(["gradcheck", "--config", cfg]) == 2
        assert "32x32" in capsys.readouterr().err


class TestFlops:
    def test_check_passes_on_default_grid(self, tmp_path):
        out = tmp_path / "csv"
        assert main(["flops", "--check", "--out", str(out)]) == 0
        text = (out / "flops.csv").read_text()
        lines = text.strip().split("\n")
        assert lines[0].startswith("mixer,N_q,N_kv")
        assert len(lines) == 1 + 20 * 3

    def test_known_cost_row_values(self, tmp_path, capsys):
        assert main(["flops"]) == 0
        rows = capsys.readouterr().out.strip().split("\n")[1:]
        sa_row = next(r for r in rows if r.startswith("sa,64,64,32"))
        sca_row = next(r for r in rows if r.startswith("sca,64,64,32"))
        assert sa_row.split(",")[7] == "262144"
        assert sca_row.split(",")[7] == "135168"

    def test_custom_sweep_list(self, tmp_path, capsys):
        cfg = write_config(
            tmp_path,
            {"sweep": [{"n_q": 4, "n_kv": 6, "c_q": 8, "c_kv": 10, "heads": 1, "dim_head": 8}]},
        )
        assert main(["flops", "--config", cfg]) == 0
        rows = capsys.readouterr().out.strip().split("\n")[1:]
        assert len(rows) == 3

    def test_malformed_sweep_is_config_error(self, tmp_path):
        cfg = write_config(tmp_path, {"sweep": [{"n_q": 4, "bogus": 1}]})
        assert main(["flops", "--config", cfg]) == 2
        cfg2 = write_config(tmp_path, {"sweep": []}, name="empty.json")
        assert main(["flops", "--config", cfg2]) == 2


class TestBench:
    def test_emits_one_row_per_mixer(self, tmp_path, capsys):
        cfg = write_config(
            tmp_path, {"bench": {"n_tokens": 16, "channels": 8, "heads": 2}}
        )
        assert main(["bench", "--config", cfg]) == 0
        lines = capsys.readouterr().out.strip().split("\n")
        assert len(lines) == 4
        assert [line.split(",")[0] for line in lines[1:]] == ["sa", "ca", "sca"]
        assert all(int(line.split(",")[-1]) > 0 for line in lines[1:])


class TestSelftest:
    def test_fresh_run_passes(self, capsys):
        import time

        start = time.perf_counter()
        assert main(["selftest"]) == 0
        assert time.perf_counter() - start < 120.0
        out = capsys.readouterr().out
        for suite in ("oracle-equivalence", "invariants", "identities"):
            assert f"{suite}: PASS" in out

    def test_tamper_flips_exit_code(self, capsys):
        assert main(["selftest", "--tamper"]) == 1
        assert "FAIL" in capsys.readouterr().out


class TestModuleEntry:
    def test_python_dash_m_invocation(self, tmp_path):
        result = subprocess.run(
            [sys.executable, "-m", "stripseg", "forward", "--out", str(tmp_path / "o")],
            capture_output=True,
            text=True,
        )
        assert result.returncode == 0
        assert (tmp_path / "o" / "mask.scat").exists()
