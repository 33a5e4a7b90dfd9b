"""Point-to-plane ICP against a sampled room model.

    python3 demos/icp_registration.py
"""
import numpy as np

from sitebot.geometry import Pose, quat_angle, sample_surface
from sitebot.localization import IcpConfig, icp_point_to_plane
from sitebot.sim import BeamPattern, planned_room_mesh, simulate_lidar


def main():
    corners = [[0, 0], [8, 0], [8, 6], [0, 6]]
    model = planned_room_mesh(corners, 3.0)
    map_cloud = sample_surface(model, 400, seed=0)
    sensor = Pose.from_planar(3.0, 2.5, 0.4) @ Pose.translation(0, 0, 0.9)
    scan = simulate_lidar(model, sensor, BeamPattern(), sigma=0.01, seed=1)
    print(f"scan: {len(scan)} points, map: {len(map_cloud)} points")
    rng = np.random.default_rng(2)
    for k in range(5):
        d = Pose.from_rotvec(rng.uniform(-0.15, 0.15, 3) * [1, 1, 0.2],
                             [0, 0, rng.uniform(-0.1, 0.1)])
        init = sensor @ d
        res = icp_point_to_plane(scan, map_cloud, init, IcpConfig(robust_scale=0.02))
        dp = 1e3 * np.linalg.norm(res.pose.position - sensor.position)
        dr = np.degrees(quat_angle(res.pose.orientation, sensor.orientation))
        print(f"start off by {1e3 * np.linalg.norm(d.position):5.1f} mm -> {dp:6.2f} mm, "
              f"{dr:.3f} deg after {res.iterations_used} iterations")


if __name__ == "__main__":
    main()
