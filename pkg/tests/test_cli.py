import json

import numpy as np
import pytest

from stableflow.cli import main
from stableflow.core import DemonstrationSet, Trajectory, load_dataset, save_dataset
from stableflow.flow import DiffeoModel
from stableflow.synth import SHAPES, constant_speed_curve, synthesize
from stableflow.train import load_checkpoint

SMALL = ["--K", "4", "--m", "40", "--lr", "1e-2", "--seed", "3"]


@pytest.fixture
def synth_file(tmp_path):
    path = tmp_path / "demos.json"
    assert main(["synth", "--count", "3", "--points", "120", "--noise", "0.005", "-o", str(path)]) == 0
    return path


@pytest.fixture
def trained(tmp_path, synth_file):
    model = tmp_path / "model.json"
    assert main(["train", str(synth_file), "-o", str(model), "--epochs", "30", *SMALL]) == 0
    return model


def straight_line_file(path):
    # two unit-speed segments into the origin; their box is [0, 1]^2 so normalization
    # leaves speeds unchanged and the identity model reproduces them
    t = np.linspace(0.0, 1.0, 51)
    trs = (Trajectory(t, np.column_stack([1 - t, 0 * t])), Trajectory(t, np.column_stack([0 * t, 1 - t])))
    save_dataset(DemonstrationSet(trs), path)


class TestSynth:
    def test_noise_free_copies_identical(self, tmp_path):
        path = tmp_path / "d.json"
        assert main(["synth", "--count", "2", "--noise", "0", "-o", str(path)]) == 0
        data = load_dataset(path)
        np.testing.assert_array_equal(data[0].x, data[1].x)

    @pytest.mark.parametrize("shape", sorted(SHAPES))
    def test_endpoints_near_common_goal(self, shape):
        noise = 0.02
        data = synthesize(shape, count=20, points=50, noise=noise, seed=1)
        goal = constant_speed_curve(shape, 50)[1][-1]
        for tr in data:
            assert np.linalg.norm(tr.x[-1] - goal) <= 3 * noise

    def test_scurve_500_valid(self):
        (tr,) = synthesize("scurve", count=1, points=500)
        assert np.all(np.diff(tr.t) > 0) and np.all(np.isfinite(tr.xdot))
        np.testing.assert_allclose(np.linalg.norm(tr.xdot, axis=1), 1.0)

    def test_constant_speed_matches_spacing(self):
        t, x, _ = constant_speed_curve("sine", 2000, speed=2.0)
        step = np.linalg.norm(np.diff(x, axis=0), axis=1)
        np.testing.assert_allclose(step, 2.0 * np.diff(t), rtol=1e-3)

    def test_rejects_bad_arguments(self, tmp_path):
        assert main(["synth", "--points", "5", "-o", str(tmp_path / "d.json")]) == 1
        assert main(["synth", "--shape", "zigzag", "-o", str(tmp_path / "d.json")]) == 1


class TestTrain:
    def test_zero_epochs_is_identity(self, tmp_path, synth_file):
        out = tmp_path / "m.json"
        assert main(["train", str(synth_file), "-o", str(out), "--epochs", "0", *SMALL]) == 0
        model = load_checkpoint(out)
        assert np.all(model.params() == 0)

    def test_writes_log_and_report(self, tmp_path, synth_file):
        out = tmp_path / "m.json"
        log = tmp_path / "log.csv"
        assert main(["train", str(synth_file), "-o", str(out), "--epochs", "5", "--log", str(log), *SMALL]) == 0
        assert len(log.read_text().splitlines()) == 6
        report = json.loads(out.with_suffix(".report.json").read_text())
        assert report["config"]["K"] == 4 and len(report["losses"]) == 5

    def test_config_file_with_override(self, tmp_path, synth_file, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"K": 2, "m": 10, "epochs": 3, "seed": 9}))
        out = tmp_path / "m.json"
        assert main(["train", str(synth_file), "-o", str(out), "--config", str(cfg), "--epochs", "1"]) == 0
        assert '"epochs": 1' in capsys.readouterr().out
        assert load_checkpoint(out).K == 2

    def test_bitwise_repeatable(self, tmp_path, synth_file):
        outs = [tmp_path / "a.json", tmp_path / "b.json"]
        for out in outs:
            assert main(["train", str(synth_file), "-o", str(out), "--epochs", "10", *SMALL]) == 0
        assert outs[0].read_bytes() == outs[1].read_bytes()

    def test_resume(self, tmp_path, synth_file):
        straight = tmp_path / "s.json"
        assert main(["train", str(synth_file), "-o", str(straight), "--epochs", "10", *SMALL]) == 0
        half = tmp_path / "h.json"
        assert main(["train", str(synth_file), "-o", str(half), "--epochs", "5", *SMALL]) == 0
        done = tmp_path / "d.json"
        assert main(["train", str(synth_file), "-o", str(done), "--epochs", "10", "--resume", str(half),
                     *SMALL]) == 0
        assert done.read_bytes() == straight.read_bytes()

    def test_exit_codes(self, tmp_path, synth_file):
        assert main(["train", str(tmp_path / "missing.json"), "-o", str(tmp_path / "m.json")]) == 3
        bad = tmp_path / "bad.json"
        bad.write_text("{oops")
        assert main(["train", str(bad), "-o", str(tmp_path / "m.json")]) == 3
        flat = tmp_path / "flat.json"
        save_dataset(DemonstrationSet((Trajectory([0, 1, 2], [[0, 0], [1, 0], [2, 0]]),)), flat)
        assert main(["train", str(flat), "-o", str(tmp_path / "m.json")]) == 1
        assert main(["train", str(synth_file), "-o", str(tmp_path / "m.json"), "--K", "0"]) == 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_failure_exit_code(self, tmp_path, synth_file):
        out = tmp_path / "m.json"
        assert main(["train", str(synth_file), "-o", str(out), "--epochs", "50", "--lr", "1e300",
                     "--K", "2", "--m", "10"]) == 2


class TestEval:
    def test_identity_on_straight_lines(self, tmp_path, capsys):
        data = tmp_path / "lines.json"
        straight_line_file(data)
        model = tmp_path / "m.json"
        assert main(["train", str(data), "-o", str(model), "--epochs", "0", "--K", "2", "--m", "5"]) == 0
        csv = tmp_path / "r.csv"
        assert main(["eval", str(model), str(data), "--dt", "0.01", "-o", str(csv)]) == 0
        table = np.loadtxt(csv, delimiter=",", skiprows=1)
        assert table.shape == (2, 6)
        assert np.all(table[:, 1:5] < 2 * 0.01)
        assert "converged=2/2" in capsys.readouterr().out

    def test_summary_means_match_csv(self, tmp_path, synth_file, trained, capsys):
        csv = tmp_path / "r.csv"
        assert main(["eval", str(trained), str(synth_file), "-o", str(csv)]) == 0
        out = capsys.readouterr().out
        table = np.loadtxt(csv, delimiter=",", skiprows=1)
        assert len(table) == 3
        for col, key in ((1, "rmse"), (2, "dtwd"), (3, "avg_dtwd"), (4, "frechet")):
            line = next(ln for ln in out.splitlines() if ln.startswith(key + ":"))
            mean = float(line.split("mean=")[1].split()[0])
            assert mean == pytest.approx(table[:, col].mean(), rel=1e-12)

    def test_dimension_mismatch(self, tmp_path, trained):
        other = tmp_path / "three.json"
        t = np.linspace(0, 1, 10)
        save_dataset(DemonstrationSet((Trajectory(t, np.column_stack([t, t * t, 1 - t])),)), other)
        assert main(["eval", str(trained), str(other), "-o", str(tmp_path / "r.csv")]) == 1


class TestRollout:
    def test_identity_straight_line(self, tmp_path, capsys):
        data = tmp_path / "lines.json"
        straight_line_file(data)
        model = tmp_path / "m.json"
        assert main(["train", str(data), "-o", str(model), "--epochs", "0", "--K", "2", "--m", "5"]) == 0
        out = tmp_path / "r.csv"
        assert main(["rollout", str(model), "--x0", "1", "0", "-o", str(out)]) == 0
        assert "converged=true steps=100" in capsys.readouterr().out
        path = np.loadtxt(out, delimiter=",", skiprows=1)
        assert np.max(np.abs(path[:, 2])) < 1e-12
        assert np.linalg.norm(path[-1, 1:]) < 1e-3

    def test_far_start_converges(self, tmp_path, synth_file, trained, capsys):
        data = load_dataset(synth_file)
        pts = data.all_positions()
        lo, hi = pts.min(0), pts.max(0)
        center = (lo + hi) / 2
        far = center + 3 * (hi - center)
        out = tmp_path / "r.csv"
        assert main(["rollout", str(trained), "--x0", *map(str, far), "--max-steps", "20000",
                     "-o", str(out)]) == 0
        assert "converged=true" in capsys.readouterr().out

    def test_repeatable(self, tmp_path, trained):
        outs = [tmp_path / "a.csv", tmp_path / "b.csv"]
        for out in outs:
            assert main(["rollout", str(trained), "--x0", "0.3", "0.4", "-o", str(out)]) == 0
        assert outs[0].read_bytes() == outs[1].read_bytes()

    def test_not_converged_is_success(self, tmp_path, trained, capsys):
        assert main(["rollout", str(trained), "--x0", "5", "5", "--max-steps", "3",
                     "-o", str(tmp_path / "r.csv")]) == 0
        assert "converged=false steps=3" in capsys.readouterr().out

    def test_wrong_x0_length(self, tmp_path, trained):
        assert main(["rollout", str(trained), "--x0", "1", "2", "3", "-o", str(tmp_path / "r.csv")]) == 1


class TestField:
    def test_resolution_rows(self, tmp_path, trained):
        out = tmp_path / "g.csv"
        assert main(["field", str(trained), "--resolution", "7", "-o", str(out)]) == 0
        grid = np.loadtxt(out, delimiter=",", skiprows=1)
        assert grid.shape == (49, 4) and np.all(np.isfinite(grid))

    def test_identity_grid(self, tmp_path):
        data = tmp_path / "lines.json"
        straight_line_file(data)
        model = tmp_path / "m.json"
        assert main(["train", str(data), "-o", str(model), "--epochs", "0", "--K", "2", "--m", "5"]) == 0
        out = tmp_path / "g.csv"
        assert main(["field", str(model), "--bounds", "0.5", "1.5", "-1", "1", "--resolution", "5",
                     "-o", str(out)]) == 0
        grid = np.loadtxt(out, delimiter=",", skiprows=1)
        np.testing.assert_allclose(grid[:, 2:], -grid[:, :2] / np.linalg.norm(grid[:, :2], axis=1)[:, None])

    def test_three_dimensional_needs_slice(self, tmp_path):
        model = DiffeoModel.create(3, K=2, m=5)
        path = tmp_path / "m.json"
        path.write_text(json.dumps(model.to_dict()))
        out = tmp_path / "g.csv"
        assert main(["field", str(path), "--resolution", "3", "-o", str(out)]) == 1
        assert main(["field", str(path), "--resolution", "3", "--slice", "0", "0", "0.2",
                     "-o", str(out)]) == 0
        assert len(out.read_text().splitlines()) == 10


def test_usage_error_exit_code():
    assert main(["train"]) == 1
    assert main(["nonsense"]) == 1
    assert main(["--help"]) == 0
