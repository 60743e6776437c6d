"""Tests for the surrogate IDM + MOBIL driver and scene construction."""

import numpy as np
import pytest

from advscenario.driver_models import IdmParameters, free_road_acceleration
from advscenario.errors import ConfigError
from advscenario.kernel import SimConfig, WorldState, step_world
from advscenario.traffic import SceneConfig, SurrogateDriver, build_scene, scene_road
from conftest import lane_center_y, straight_world, vehicle


class TestScenes:
    """Test seeded platoon scenes."""

    def test_layout(self):
        """Test ids, lanes and front-first ordering of each platoon."""
        world = build_scene(SceneConfig(n_lanes=2, vehicles_per_lane=3), np.random.default_rng(0))
        assert world.ids == (1, 2, 3, 4, 5, 6)
        assert [v.lane for v in world.vehicles] == [1, 1, 1, 2, 2, 2]
        xs = [v.x for v in world.vehicles[:3]]
        assert xs == sorted(xs, reverse=True)
        assert all(v.heading == 0.0 for v in world.vehicles)

    def test_seeded(self):
        """Test that one seed gives one scene."""
        cfg = SceneConfig()
        a = build_scene(cfg, np.random.default_rng(9))
        b = build_scene(cfg, np.random.default_rng(9))
        assert a.vehicles == b.vehicles
        assert a.rng_seed == b.rng_seed

    def test_presets(self):
        """Test named road presets and unknown names."""
        assert scene_road(SceneConfig(road="us101")).lane_ids == (1, 2, 3, 4, 5, 6)
        with pytest.raises(ConfigError, match="scene.road"):
            SceneConfig(road="autobahn")
        with pytest.raises(ConfigError):
            SceneConfig(vehicles_per_lane=0)


class TestSurrogateDriver:
    """Test longitudinal, lateral and lane-change control."""

    def test_cruise_at_desired_speed(self):
        """Test that a centred vehicle at v0 on a free lane holds speed and heading."""
        idm = IdmParameters()
        world = straight_world([vehicle(1, 100.0, lane_center_y(1), speed=idm.v_desired)])
        action = SurrogateDriver(idm=idm).control(world, 1)
        assert action.acceleration == pytest.approx(0.0, abs=1e-12)
        assert action.steering == pytest.approx(0.0, abs=1e-12)

    def test_brakes_behind_slow_leader(self):
        """Test that a close slow leader produces braking."""
        world = straight_world([vehicle(1, 100.0, 0.0, speed=10.0), vehicle(2, 108.0, 0.0, speed=2.0)])
        assert SurrogateDriver().control(world, 1).acceleration < 0.0

    def test_steers_back_to_centre(self):
        """Test that a vehicle left of its centreline steers right."""
        world = straight_world([vehicle(1, 100.0, 0.5, speed=10.0)])
        assert SurrogateDriver().control(world, 1).steering < 0.0

    def test_no_road(self):
        """Test that without a road the driver only follows the free-road law."""
        world = WorldState.initial([vehicle(1, 0.0, 0.0, speed=3.0)])
        driver = SurrogateDriver()
        action = driver.control(world, 1)
        assert action.acceleration == pytest.approx(free_road_acceleration(driver.idm, 3.0))
        assert action.steering == 0.0

    def test_lane_change_target(self):
        """Test that a blocked vehicle targets the free left lane and steers toward it."""
        world = straight_world([
            vehicle(1, 100.0, lane_center_y(2), speed=8.0),
            vehicle(2, 110.0, lane_center_y(2), speed=2.0),
            vehicle(3, 112.0, lane_center_y(3), speed=2.0),
        ])
        driver = SurrogateDriver()
        action = driver.control(world, 1)
        assert driver.targets[1] == 1
        assert action.steering > 0.0
        driver.reset()
        assert driver.targets == {}

    def test_platoon_stays_collision_free(self):
        """Test that a surrogate-driven scene runs 100 steps without collisions."""
        world = build_scene(SceneConfig(vehicles_per_lane=3), np.random.default_rng(4))
        driver = SurrogateDriver()
        for _ in range(100):
            world, events = step_world(world, driver.controls(world, world.ids), SimConfig())
            assert events == []
