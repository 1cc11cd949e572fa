import json

import pytest

from ccnp_lab.cli import build_parser, main
from ccnp_lab.datastore import load_dataset

TINY = """experiment = "tiny"
count = 22
n_points = 40
variants = ["CNP", "AttnCNP", "CCNP"]
seeds = [0]
epochs = 1
batch_size = 4
width = 8
heads = 2
z_dim = 4
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY)
    return path


class TestCLI:
    def test_run_then_eval_and_probe(self, tiny, tmp_path, capsys):
        assert main(["run", str(tiny), "--out", str(tmp_path / "res"), "--data", str(tmp_path / "data")]) == 0
        header = (tmp_path / "res/tiny/table.csv").read_text().splitlines()[0].split(",")
        assert {"variant", "ll_mean", "ll_std", "mse_mean", "mse_std"} <= set(header)
        ckpt = tmp_path / "res/tiny/run/CCNP-seed0/ckpt_best.bin"
        capsys.readouterr()
        assert main(["eval", str(ckpt), str(tiny), "--data", str(tmp_path / "data"),
                     "--out", str(tmp_path / "ev")]) == 0
        out = json.loads((tmp_path / "ev/eval.json").read_text())
        assert out["shots"] == 5 and out["mse_scale"] == 100.0
        assert main(["probe", str(ckpt), "--config", str(tiny), "--data", str(tmp_path / "data")]) == 0
        assert "mse_alpha" in capsys.readouterr().out

    def test_run_is_bitwise_reproducible(self, tiny, tmp_path):
        for d in ("a", "b"):
            assert main(["run", str(tiny), "--out", str(tmp_path / d), "--data", str(tmp_path / "data")]) == 0
        for v in ("CNP", "CCNP"):
            rel = f"tiny/run/{v}-seed0/curves.csv"
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_datagen(self, tmp_path):
        rc = main(["datagen", "--family", "sinusoid", "--count", "500", "--seed", "7", "--out", str(tmp_path)])
        assert rc == 0
        ds = load_dataset(tmp_path, "sinusoid-500-s7")
        assert (len(ds.train), len(ds.val), len(ds.test)) == (410, 45, 45)

    def test_gradcheck(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "matmul" in out and "max_rel" in out and "FAIL" not in out

    def test_config_error_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.toml"
        bad.write_text("epochz = 3\n")
        assert main(["run", str(bad), "--out", str(tmp_path)]) == 2
        assert "epochz" in capsys.readouterr().err

    def test_missing_checkpoint(self, tiny, tmp_path):
        assert main(["eval", str(tmp_path / "nope.bin"), str(tiny), "--data", str(tmp_path)]) == 1

    def test_missing_config_file(self, tmp_path):
        assert main(["run", str(tmp_path / "absent.toml")]) == 2

    def test_out_defaults_are_per_command(self):
        p = build_parser()
        assert p.parse_args(["eval", "x.bin"]).out is None
        assert p.parse_args(["datagen"]).out is None
