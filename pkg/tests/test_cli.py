import numpy as np
import pytest

from fvelayer.cli import main
from fvelayer.fileio import read_feature_file, read_gmm_file, write_feature_file, write_gmm_file
from fvelayer.gmm import DiagGmm


def run(*argv):
    return main([str(a) for a in argv])


class TestSynthCommand:
    def test_circle_writes_features_and_labels(self, tmp_path, capsys):
        out = tmp_path / "circle.fvef"
        assert run("synth", "circle", "--seed", 1, "--out", out) == 0
        batch = read_feature_file(out)
        assert batch.data.shape == (4000, 2)
        labels = out.with_suffix(".labels.csv").read_text().splitlines()
        assert labels[0] == "group,label" and len(labels) == 11

    def test_identical_invocations_identical_bytes(self, tmp_path):
        a, b = tmp_path / "a.fvef", tmp_path / "b.fvef"
        run("synth", "circle", "--seed", 3, "--out", a)
        run("synth", "circle", "--seed", 3, "--out", b)
        assert a.read_bytes() == b.read_bytes()

    def test_parts(self, tmp_path):
        out = tmp_path / "parts.fvef"
        assert run("synth", "parts", "--seed", 2, "--out", out) == 0
        batch = read_feature_file(out)
        assert batch.dim == 6 and batch.part_ids is not None


class TestGmmCommands:
    @pytest.fixture
    def circle_file(self, tmp_path):
        out = tmp_path / "circle.fvef"
        run("synth", "circle", "--components", 4, "--samples", 100, "--seed", 5, "--out", out)
        return out

    def test_train_gmm_outputs(self, tmp_path, circle_file):
        out = tmp_path / "model.fveg"
        assert run("train-gmm", "--input", circle_file, "--k", 4, "--steps", 20,
                   "--batch-size", 64, "--seed", 5, "--out", out) == 0
        gmm, meta = read_gmm_file(out)
        assert gmm.k == 4 and meta["t"] == 20
        csv = out.with_suffix(".loglik.csv").read_text().splitlines()
        assert csv[0] == "step,mean_loglik" and len(csv) == 21
        assert out.with_suffix(".loglik.png").exists()
        assert out.with_suffix(".fit.png").exists()

    def test_em_full_outputs(self, tmp_path, circle_file):
        out = tmp_path / "ref.fveg"
        assert run("em-full", "--input", circle_file, "--k", 4, "--seed", 5, "--out", out) == 0
        gmm, meta = read_gmm_file(out)
        assert gmm.k == 4 and meta["t"] == 0
        assert out.with_suffix(".loglik.png").exists()

    def test_encode_csv_shape(self, tmp_path, circle_file):
        gmm_path = tmp_path / "m.fveg"
        run("em-full", "--input", circle_file, "--k", 3, "--seed", 1, "--out", gmm_path)
        out = tmp_path / "fv.csv"
        assert run("encode", "--gmm", gmm_path, "--input", circle_file, "--out", out) == 0
        lines = out.read_text().splitlines()
        header = lines[0].split(",")
        assert header[0] == "group" and len(header) == 1 + 2 * 3 * 2
        assert header[1] == "mu_k0_d0" and header[-1] == "sigma_k2_d1"
        assert len(lines) == 5  # 4 groups + header
        assert all(len(line.split(",")) == 13 for line in lines[1:])

    def test_encode_24_columns_for_k3_d4(self, tmp_path):
        rng = np.random.default_rng(0)
        from fvelayer import FeatureBatch
        feat = tmp_path / "f.fvef"
        write_feature_file(feat, FeatureBatch.single_group(rng.standard_normal((10, 4))))
        gmm = DiagGmm(np.full(3, 1 / 3), rng.standard_normal((3, 4)), np.ones((3, 4)))
        gp = tmp_path / "g.fveg"
        write_gmm_file(gp, gmm)
        out = tmp_path / "fv.csv"
        assert run("encode", "--gmm", gp, "--input", feat, "--out", out) == 0
        row = out.read_text().splitlines()[1].split(",")
        assert len(row) - 1 == 24

    def test_bench_reports_ratio(self, tmp_path, circle_file, capsys):
        gmm_path = tmp_path / "m.fveg"
        run("em-full", "--input", circle_file, "--k", 2, "--seed", 1, "--out", gmm_path)
        capsys.readouterr()
        assert run("bench", "--gmm", gmm_path, "--input", circle_file) == 0
        out = capsys.readouterr().out
        assert "encode/total ratio" in out and "em update" in out

    def test_error_exits_nonzero_single_line(self, tmp_path, capsys):
        missing = tmp_path / "nope.fvef"
        assert run("em-full", "--input", missing, "--k", 2, "--out", tmp_path / "x") == 2
        err = capsys.readouterr().err.strip()
        assert err.startswith("error: ") and "\n" not in err


class TestGradcheckCommand:
    def test_default_passes(self, capsys):
        assert run("gradcheck", "--k", 2, "--d", 3, "--n", 4, "--trials", 10, "--seed", 0) == 0
        assert "max relative error" in capsys.readouterr().out

    def test_loose_eps_fails(self):
        # eps far outside the stable range makes the FD oracle inaccurate
        assert run("gradcheck", "--trials", 5, "--eps", 1.0, "--tol", 1e-12, "--seed", 0) == 1


class TestDemoJoint:
    def test_runs_with_config_file(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text(
            "classes = 4\nimages_per_class = 10\nepochs = 5\nbatch_size = 8\n"
            "lr = 0.5\nk = 2\nfeature_dim = 2\nseed = 0\n"
        )
        outdir = tmp_path / "out"
        assert run("demo-joint", "--config", cfg, "--out", outdir) == 0
        lines = (outdir / "metrics.jsonl").read_text().splitlines()
        import json
        rec = json.loads(lines[0])
        assert set(rec) == {"step", "loss", "accuracy", "gmm_loglik"}
        acc_lines = (outdir / "accuracies.csv").read_text().splitlines()
        arms = {line.split(",")[0] for line in acc_lines[1:]}
        assert arms == {"fve_visible", "fve_ordered", "fve_shuffled", "gap_ordered", "gap_shuffled"}
        assert (outdir / "training.png").exists()
        assert (outdir / "accuracies.png").exists()
