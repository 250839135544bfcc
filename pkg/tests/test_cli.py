import json

import numpy as np
import pytest

from pipecnn import netio
from pipecnn.cli import main

SMALL_NET = {
    "name": "tinynet",
    "config": {"vec_size": 4, "cu_num": 2},
    "layers": [
        {"name": "c1", "layer_type": "conv", "k": 3, "s": 1, "p": 1,
         "input_shape": {"w": 12, "h": 12, "c": 6}, "output_maps": 8,
         "relu": True, "pool": {"mode": "max", "window": 2, "stride": 2},
         "lrn": {"local_size": 5, "k": 2.0, "alpha": 0.0001, "beta": 0.75}},
        {"name": "f1", "layer_type": "fc",
         "input_shape": {"w": 1, "h": 1, "c": 288}, "output_maps": 10},
    ],
}


@pytest.fixture
def net_path(tmp_path):
    path = tmp_path / "tinynet.json"
    path.write_text(json.dumps(SMALL_NET))
    return str(path)


class TestRun:
    def test_run_writes_output_and_summary(self, net_path, tmp_path, capsys):
        out = tmp_path / "logits.tensor"
        rc = main(["run", "--net", net_path, "--batch", "2", "--seed", "3",
                   "--out", str(out)])
        assert rc == 0
        logits = netio.load_tensor(out)
        assert logits.shape == (2, 10)
        summary = json.loads(capsys.readouterr().out)
        assert summary["total_ops"] > 0 and summary["modeled_gops"] > 0

    def test_seeded_runs_byte_identical(self, net_path, tmp_path):
        argv = ["run", "--net", net_path, "--batch", "2", "--seed", "9"]
        a, b = tmp_path / "a.tensor", tmp_path / "b.tensor"
        assert main(argv + ["--out", str(a)]) == 0
        assert main(argv + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_zero_input_zero_bias_zero_logits(self, net_path, tmp_path):
        zin = tmp_path / "zero.tensor"
        netio.save_tensor(zin, np.zeros((12, 12, 6), np.float32))
        out = tmp_path / "logits.tensor"
        rc = main(["run", "--net", net_path, "--batch", "1", "--input", str(zin),
                   "--out", str(out)])
        assert rc == 0
        assert not netio.load_tensor(out).any()

    def test_input_tensor_used(self, net_path, tmp_path, rng):
        xin = tmp_path / "x.tensor"
        netio.save_tensor(xin, rng.random((12, 12, 6), dtype=np.float32))
        a = tmp_path / "a.tensor"
        b = tmp_path / "b.tensor"
        assert main(["run", "--net", net_path, "--batch", "1", "--input",
                     str(xin), "--out", str(a), "--seed", "1"]) == 0
        assert main(["run", "--net", net_path, "--batch", "1",
                     "--out", str(b), "--seed", "1"]) == 0
        assert a.read_bytes() != b.read_bytes()


class TestValidate:
    def test_validate_passes(self, net_path, capsys):
        rc = main(["validate", "--net", net_path, "--seed", "7", "--batch", "1"])
        out = capsys.readouterr().out
        assert rc == 0, out
        assert "all layers within tolerance" in out
        assert "conv" in out and "fc" in out and "lrn" in out and "pool" in out


class TestProfile:
    def test_profile_emits_timeline(self, net_path, tmp_path):
        out = tmp_path / "timeline.jsonl"
        rc = main(["profile", "--net", net_path, "--batch", "1",
                   "--out", str(out)])
        assert rc == 0
        records = [json.loads(l) for l in out.read_text().splitlines()]
        assert len(records) >= 4
        kernels = {r["kernel"] for r in records}
        assert {"memrd", "conv", "pool", "memwr", "lrn"} <= kernels
        for r in records:
            assert r["end"] >= r["start"] and r["bytes"] >= 0


class TestSweep:
    def test_sweep_csv(self, net_path, tmp_path):
        out = tmp_path / "sweep.csv"
        rc = main(["sweep", "--net", net_path, "--device", "stratixv_a7",
                   "--vec-set", "4,8", "--cu-set", "2,4", "--batch", "1",
                   "--format", "csv", "--out", str(out)])
        assert rc == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0].split(",") == ["vec", "cu", "dsp", "logic", "ram",
                                       "time_ms", "gops", "density", "feasible"]
        assert len(lines) == 5

    def test_sweep_alexnet_winner_row(self, tmp_path):
        out = tmp_path / "sweep.json"
        rc = main(["sweep", "--net", "alexnet", "--device", "stratixv_a7",
                   "--batch", "1", "--format", "json", "--out", str(out)])
        assert rc == 0
        rows = json.loads(out.read_text())
        winner = rows[0]
        assert (winner["vec"], winner["cu"], winner["dsp"]) == (8, 16, 162)
        assert any(not r["feasible"] and (r["vec"], r["cu"]) == (16, 16)
                   for r in rows)


class TestLrnTable:
    def test_lrn_table_dump(self, tmp_path, capsys):
        out = tmp_path / "table.txt"
        rc = main(["lrn-table", "--lrn-n", "2", "--out", str(out)])
        assert rc == 0
        text = capsys.readouterr().out
        assert "max_rel_error" in text
        from pipecnn.lrn import PwlTable
        table = PwlTable.from_text(out.read_text())
        assert table.n == 2 and table.segments == 128


class TestExitCodes:
    def test_usage_error(self):
        assert main(["frobnicate"]) == 2
        assert main(["run"]) == 2  # missing --net

    def test_io_error_missing_network(self):
        assert main(["run", "--net", "/nonexistent/net.json"]) == 3

    def test_io_error_bad_tensor(self, net_path, tmp_path):
        bad = tmp_path / "bad.tensor"
        bad.write_bytes(b"garbage!" + b"\x00" * 32)
        assert main(["run", "--net", net_path, "--batch", "1",
                     "--input", str(bad)]) == 3

    def test_io_error_truncated_network(self, tmp_path):
        path = tmp_path / "trunc.json"
        path.write_text('{"layers": [')
        assert main(["run", "--net", str(path)]) == 3
