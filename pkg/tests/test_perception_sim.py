import math

import numpy as np
import pytest

from crowdmap.map_model import ElementClass, Pose2, crop_map
from crowdmap.perception_sim import (
    ChangeSpec,
    DeleteElement,
    InsertElement,
    NoiseConfig,
    RoadLayout,
    apply_changes,
    generate_scenario,
    sample_init_pose,
    stale_elements,
    synthesize_frame,
)


def heading_offsets(gt, poses):
    out = []
    for p in poses:
        d = gt.rotation.T @ (p.translation - gt.translation)
        out.append((d[0], d[1], math.degrees(p.yaw - gt.yaw)))
    return np.array(out)


class TestInitPose:
    def test_sigmas_in_heading_frame(self):
        rng = np.random.default_rng(0)
        gt = Pose2(10.0, -4.0, 0.7)
        cfg = NoiseConfig()
        off = heading_offsets(gt, [sample_init_pose(gt, cfg, rng) for _ in range(10_000)])
        sd = off.std(axis=0, ddof=1)
        assert sd == pytest.approx((1.5, 0.75, 0.85), rel=0.05)
        assert np.abs(off.mean(axis=0)).max() < 0.05

    def test_zero_sigma_is_identity(self):
        gt = Pose2(1, 2, 0.3)
        p = sample_init_pose(gt, NoiseConfig.noiseless(), np.random.default_rng(0))
        assert p.as_array() == pytest.approx(gt.as_array())


class TestFrames:
    def setup_method(self):
        self.world, self.traj = generate_scenario("straight", 100.0, np.random.default_rng(1))

    def test_noiseless_frame_equals_crop(self):
        gt = self.traj[20]
        fr = synthesize_frame(self.world, gt, NoiseConfig.noiseless(), np.random.default_rng(0))
        crop = crop_map(self.world, gt, min_length=2.0)
        assert len(fr.obs) == len(crop)
        for e in fr.obs:
            np.testing.assert_allclose(e.points, crop[fr.sources[e.id]].points, atol=1e-12)
            assert e.confidence == pytest.approx(0.85)

    def test_laplace_mad_matches_scale(self):
        cfg = NoiseConfig.noiseless(vertex_noise=True, vertex_scale_range=(0.2, 0.2))
        rng = np.random.default_rng(4)
        dev = []
        for gt in self.traj[5:45]:
            fr = synthesize_frame(self.world, gt, cfg, rng)
            crop = crop_map(self.world, gt, min_length=2.0)
            for e in fr.obs:
                d = e.xy[1:-1] - crop[fr.sources[e.id]].xy[1:-1]
                dev.append(d.ravel())
        dev = np.concatenate(dev)
        assert np.mean(np.abs(dev)) == pytest.approx(0.2, rel=0.05)
        assert np.var(dev) == pytest.approx(2 * 0.2**2, rel=0.1)

    def test_full_dropout_gives_empty_frame(self):
        fr = synthesize_frame(self.world, self.traj[10], NoiseConfig(dropout_prob=1.0, fake_prob=0.0), np.random.default_rng(0))
        assert len(fr.obs) == 0

    def test_determinism(self):
        a = synthesize_frame(self.world, self.traj[10], NoiseConfig(), np.random.default_rng(42))
        b = synthesize_frame(self.world, self.traj[10], NoiseConfig(), np.random.default_rng(42))
        assert a.obs.same_as(b.obs)
        assert a.init_pose == b.init_pose

    def test_fakes_have_low_confidence_and_no_source(self):
        rng = np.random.default_rng(2)
        seen = 0
        for gt in self.traj[5:30]:
            fr = synthesize_frame(self.world, gt, NoiseConfig(fake_prob=0.5, confidence_sd=0.0), rng)
            for e in fr.obs:
                if fr.sources[e.id] is None:
                    seen += 1
                    assert e.confidence == pytest.approx(0.2)
        assert seen > 0

    def test_echo_of_deleted_element(self):
        victim = self.world.of_class(ElementClass.DIV)[3]
        changed = apply_changes(self.world, ChangeSpec((DeleteElement(victim.id),)))
        gt = Pose2(*victim.xy.mean(axis=0), 0.0)
        cfg = NoiseConfig.noiseless(echo_prob=1.0, echo_offset=(0.0, 1.0))
        fr = synthesize_frame(changed, gt, cfg, np.random.default_rng(0), prior=self.world)
        echoes = [e for e in fr.obs if fr.sources[e.id] is None]
        assert len(echoes) == 1
        expected = crop_map(self.world, gt, min_length=2.0)[victim.id].xy + [0.0, 1.0]
        np.testing.assert_allclose(echoes[0].xy, expected, atol=1e-9)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            NoiseConfig(vertex_scale_range=(0.3, 0.1))
        with pytest.raises(ValueError):
            NoiseConfig(dropout_prob=1.5)
        with pytest.raises(ValueError):
            NoiseConfig.from_mapping({"sigma_x": 1})


class TestScenario:
    def test_straight_lines_are_collinear(self):
        world, traj = generate_scenario("straight", 120.0, np.random.default_rng(3))
        for e in world:
            if e.cls != ElementClass.PED:
                assert np.ptp(e.xy[:, 1]) < 1e-12
        assert all(p.yaw == 0 for p in traj)

    def test_turning_geometry(self):
        layout = RoadLayout(radius=60.0)
        world, traj = generate_scenario("turning", 90.0, np.random.default_rng(3), layout)
        centre = np.array([0.0, 60.0])
        for p in traj:
            assert np.linalg.norm(p.translation - centre) == pytest.approx(60.0)
        for e in world:
            if e.cls == ElementClass.PED:
                continue
            r = np.linalg.norm(e.xy - centre, axis=1)
            assert np.ptp(r) < 1e-9
        # heading follows the tangent of the arc
        for a, b in zip(traj, traj[1:]):
            d = b.translation - a.translation
            assert math.atan2(d[1], d[0]) == pytest.approx(0.5 * (a.yaw + b.yaw), abs=1e-9)

    def test_frame_spacing(self):
        _, traj = generate_scenario("straight", 40.0, np.random.default_rng(0), spacing=4.0)
        assert len(traj) == 11
        assert traj[-1].x == pytest.approx(40.0)

    def test_same_seed_same_world(self):
        a, _ = generate_scenario("turning", 80.0, np.random.default_rng(9))
        b, _ = generate_scenario("turning", 80.0, np.random.default_rng(9))
        assert a.same_as(b)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            generate_scenario("spiral", 10.0, np.random.default_rng(0))
        with pytest.raises(ValueError):
            generate_scenario("straight", 0.0, np.random.default_rng(0))


class TestChanges:
    def test_insert_and_delete(self):
        world, _ = generate_scenario("straight", 60.0, np.random.default_rng(0))
        gone = world.elements[0].id
        spec = ChangeSpec((DeleteElement(gone), InsertElement("div", [[0, 1], [10, 1]])))
        out = apply_changes(world, spec)
        assert gone not in out
        assert out.version == world.version + 1
        new = [e for e in out if e.id not in world]
        assert len(new) == 1 and new[0].cls == ElementClass.DIV

    def test_unknown_delete(self):
        world, _ = generate_scenario("straight", 60.0, np.random.default_rng(0))
        with pytest.raises(KeyError):
            apply_changes(world, ChangeSpec((DeleteElement("nope"),)))

    def test_from_dict(self):
        spec = ChangeSpec.from_dict({"effective_from": 2, "ops": [{"op": "delete", "id": "a"}, {"op": "insert", "class": "ped", "geometry": [[0, 0], [0, 5]]}]})
        assert spec.effective_from == 2 and isinstance(spec.ops[1], InsertElement)

    def test_stale_elements(self, small_world):
        less = small_world.with_elements(small_world.elements[1:])
        stale = stale_elements(small_world, less, tol=1.0)
        assert [e.id for e in stale] == [small_world.elements[0].id]
