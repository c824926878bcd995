import csv
import json
import xml.etree.ElementTree as ET

import pytest

from crowdmap.cli import main
from crowdmap.pipeline import ConfigError, RunConfig, parse_key_values

SMALL = 'kind = "straight"\nlength = 60\nframe_spacing = 4\ntraversals_per_cycle = 1\ncycles = 2\n'


@pytest.fixture(scope="module")
def small_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.cfg"
    path.write_text(SMALL)
    return path


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, small_cfg):
    out = tmp_path_factory.mktemp("run")
    assert main(["run-cycles", "--config", str(small_cfg), "--seed", "1", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory, small_cfg):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--config", str(small_cfg), "--seed", "2", "--out", str(out)]) == 0
    return out


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestConfigFiles:
    def test_key_values(self):
        d = parse_key_values("seed = 3\nkind = turning\nsigma_lat = 0.5\nnoise.vertex_scale_range = 0.1, 0.4\n# c\n")
        assert d == {"seed": 3, "kind": "turning", "noise": {"sigma_lat": 0.5, "vertex_scale_range": [0.1, 0.4]}}
        cfg = RunConfig.from_dict(d)
        assert cfg.noise.vertex_scale_range == (0.1, 0.4)

    def test_json_and_unknown_keys(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"seed": 4, "noise": {"echo_prob": 0.0}}))
        assert RunConfig.load(p).noise.echo_prob == 0.0
        p.write_text(json.dumps({"bogus": 1}))
        with pytest.raises(ConfigError):
            RunConfig.load(p)

    def test_bad_line(self):
        with pytest.raises(ConfigError):
            parse_key_values("just words\n")


class TestExitCodes:
    def test_zero_cycles_is_config_error(self, tmp_path):
        assert main(["run-cycles", "--cycles", "0", "--out", str(tmp_path)]) == 1

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("wheels = 4\n")
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == 1

    def test_bad_arguments(self):
        assert main(["nonsense"]) == 1
        assert main(["localize", "--frame", "x"]) == 1

    def test_missing_input_is_runtime_failure(self, tmp_path):
        assert main(["evaluate", "--pred", str(tmp_path / "a.json"), "--gt", str(tmp_path / "b.json"), "--out", str(tmp_path)]) == 2
        assert main(["plot", "--run", str(tmp_path)]) == 2

    def test_reused_store_is_rejected(self, run_dir, small_cfg):
        assert main(["run-cycles", "--config", str(small_cfg), "--seed", "1", "--out", str(run_dir)]) == 1


class TestRunCycles:
    def test_outputs(self, run_dir):
        rows = read_csv(run_dir / "metrics.csv")
        assert [r["cycle"] for r in rows] == ["1", "2"]
        assert list(rows[0]) == "scenario,cycle,ap_ped,ap_div,ap_bou,map,acc_c,acc_r,macc,lat_mean,lat_p90,lon_mean,lon_p90,yaw_mean,yaw_p90".split(",")
        summary = json.loads((run_dir / "metrics.json").read_text())
        assert len(summary["rows"]) == 2
        assert sorted(p.name for p in (run_dir / "store" / "straight-s1").glob("v*.json")) == ["v1.json", "v2.json"]

    def test_same_seed_same_bytes(self, run_dir, small_cfg, tmp_path):
        assert main(["run-cycles", "--config", str(small_cfg), "--seed", "1", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "metrics.csv").read_bytes() == (run_dir / "metrics.csv").read_bytes()
        assert (tmp_path / "final_map.json").read_bytes() == (run_dir / "final_map.json").read_bytes()

    def test_plot(self, run_dir, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["plot", "--run", str(run_dir), "--out", str(a)]) == 0
        assert main(["plot", "--run", str(run_dir), "--out", str(b)]) == 0
        names = sorted(p.name for p in a.glob("*.svg"))
        assert names == ["map_curve.svg", "map_overlay.svg", "trajectory_error.svg"]
        for n in names:
            root = ET.parse(a / n).getroot()
            assert root.tag.endswith("svg")
            assert (a / n).read_bytes() == (b / n).read_bytes()

    def test_evaluate_identity(self, run_dir, tmp_path):
        final = run_dir / "final_map.json"
        assert main(["evaluate", "--pred", str(final), "--gt", str(final), "--scenario", "self", "--out", str(tmp_path)]) == 0
        (row,) = read_csv(tmp_path / "metrics.csv")
        assert row["scenario"] == "self" and row["map"] == "1.000000"


class TestSimulate:
    def test_same_seed_identical_files(self, sim_dir, small_cfg, tmp_path):
        assert main(["simulate", "--config", str(small_cfg), "--seed", "2", "--out", str(tmp_path)]) == 0
        files = sorted(p.relative_to(sim_dir) for p in sim_dir.rglob("*") if p.is_file())
        assert files
        for rel in files:
            assert (tmp_path / rel).read_bytes() == (sim_dir / rel).read_bytes()

    def test_trajectory_csv(self, sim_dir):
        rows = read_csv(sim_dir / "trajectory.csv")
        assert list(rows[0]) == ["t", "x", "y", "yaw"]
        assert len(rows) == len(list((sim_dir / "frames").glob("*.json"))) == 16

    def test_evaluate_trajectory(self, sim_dir, tmp_path):
        world = sim_dir / "world.json"
        traj = sim_dir / "trajectory.json"
        args = ["evaluate", "--pred", str(world), "--gt", str(world), "--traj-est", str(traj), "--traj-gt", str(traj), "--out", str(tmp_path)]
        assert main(args) == 0
        (row,) = read_csv(tmp_path / "metrics.csv")
        assert float(row["lat_mean"]) == 0.0 and float(row["yaw_p90"]) == 0.0

    def test_trajectory_length_mismatch(self, sim_dir, tmp_path):
        short = tmp_path / "short.json"
        short.write_text(json.dumps({"poses": [[0, 0, 0]]}))
        world = sim_dir / "world.json"
        args = ["evaluate", "--pred", str(world), "--gt", str(world), "--traj-est", str(short), "--traj-gt", str(sim_dir / "trajectory.json"), "--out", str(tmp_path)]
        assert main(args) == 2


class TestFrameCommands:
    def test_localize(self, sim_dir, tmp_path):
        frame = sim_dir / "frames" / "f0007.json"
        assert main(["localize", "--prior", str(sim_dir / "world.json"), "--frame", str(frame), "--out", str(tmp_path)]) == 0
        pose = json.loads((tmp_path / "pose.json").read_text())
        gt = json.loads(frame.read_text())["gt_pose"]
        assert abs(pose["pose"][1] - gt[1]) < 0.3

    def test_assoc_dump(self, sim_dir, tmp_path):
        frame = sim_dir / "frames" / "f0005.json"
        assert main(["assoc", "dump", "--prior", str(sim_dir / "world.json"), "--frame", str(frame), "--out", str(tmp_path)]) == 0
        data = json.loads((tmp_path / "association.json").read_text())
        assert {"matched", "outdated", "new", "correspondences"} <= set(data)
        assert data["matched"]

    def test_fuse(self, sim_dir, tmp_path):
        args = ["fuse", "--prior", str(sim_dir / "world.json"), "--frames", str(sim_dir / "frames"), "--localize", "--out", str(tmp_path)]
        assert main(args) == 0
        assert (tmp_path / "map_v2.json").exists()

    def test_fuse_from_scratch(self, sim_dir, tmp_path):
        assert main(["fuse", "--frames", str(sim_dir / "frames"), "--out", str(tmp_path)]) == 0
        assert (tmp_path / "map_v1.json").exists()
