"""RRT* across a room with a box in the way, before and after the LiDAR sees it.

    python3 demos/plan_around_obstacle.py [out.csv]
"""
import sys

import numpy as np

from sitebot.geometry import Pose, box_mesh, merge_meshes
from sitebot.planning import (
    RobotFootprint, RrtConfig, check_trajectory, grid_from_mesh, grid_update, rrt_star_plan,
    write_trajectory_csv,
)
from sitebot.sim import BeamPattern, planned_room_mesh, simulate_lidar


def main():
    corners = [[0, 0], [8, 0], [8, 6], [0, 6]]
    model = planned_room_mesh(corners, 3.0)
    world = merge_meshes([model, box_mesh([3.6, 1.4, 0.0], [4.4, 3.4, 1.5])])
    grid = grid_from_mesh(model)
    fp = RobotFootprint()
    start, goal = [1.5, 2.0, 0.0], [6.5, 2.5, 0.0]

    first = rrt_star_plan(grid, fp, start, goal, RrtConfig(iterations=800), seed=0)
    print(f"model-only plan: length {first.trajectory.cost:.2f} m")

    robot = Pose.from_planar(*start)
    sensor = robot @ Pose.translation(-0.1, 0.0, 0.9)
    for k in range(3):
        scan = simulate_lidar(world, sensor, BeamPattern(), sigma=0.01, seed=k)
        grid_update(grid, scan, sensor)
    hit = check_trajectory(grid, fp, first.trajectory)
    print(f"after 3 scans the old plan collides at waypoint {hit}")

    second = rrt_star_plan(grid, fp, start, goal, RrtConfig(iterations=800), seed=0)
    wp = second.trajectory.waypoints
    print(f"replanned: length {second.trajectory.cost:.2f} m, {len(wp)} waypoints, "
          f"passes the box at y = {wp[np.argmin(np.abs(wp[:, 0] - 4.0)), 1]:.2f} m")
    if len(sys.argv) > 1:
        write_trajectory_csv(sys.argv[1], second.trajectory)
        print(f"wrote {sys.argv[1]}")


if __name__ == "__main__":
    main()
