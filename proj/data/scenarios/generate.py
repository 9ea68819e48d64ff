#!/usr/bin/env python3
"""Regenerates the bundled scenario fixtures. Geometry is authored by hand."""
import json
import math
import os

HERE = os.path.dirname(os.path.abspath(__file__))


def rect(x0, y0, x1, y1):
    return {"vertices": [[x0, y0], [x1, y0], [x1, y1], [x0, y1]]}


def disc(cx, cy, r, n=16):
    return {"vertices": [[round(cx + r * math.cos(2 * math.pi * k / n), 6),
                          round(cy + r * math.sin(2 * math.pi * k / n), 6)] for k in range(n)]}


class Mesh:
    def __init__(self):
        self.vertices = []
        self.triangles = []

    def box(self, lo, hi):
        base = len(self.vertices)
        for k in range(8):
            self.vertices.append([hi[0] if k & 1 else lo[0], hi[1] if k & 2 else lo[1], hi[2] if k & 4 else lo[2]])
        faces = [(0, 2, 3, 1), (4, 5, 7, 6), (0, 1, 5, 4), (2, 6, 7, 3), (0, 4, 6, 2), (1, 3, 7, 5)]
        for a, b, c, d in faces:
            self.triangles.append([base + a, base + b, base + c])
            self.triangles.append([base + a, base + c, base + d])

    def json(self):
        return {"vertices": self.vertices, "triangles": self.triangles}


def write(name, doc):
    with open(os.path.join(HERE, name + ".json"), "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def printer_cell():
    # Open-top, open-front printer: bed block, two side walls, back wall.
    m = Mesh()
    m.box([2.85, -0.40, 0.0], [3.30, 0.40, 0.40])
    m.box([2.85, 0.40, 0.0], [3.30, 0.42, 0.75])
    m.box([2.85, -0.42, 0.0], [3.30, -0.40, 0.75])
    m.box([3.30, -0.42, 0.0], [3.32, 0.42, 0.75])
    write("printer_cell", {
        "floor": {"min": [0.0, -3.0], "max": [7.0, 3.0]},
        "obstacles": [rect(0.5, 1.6, 1.4, 2.3), rect(4.6, -2.4, 5.6, -1.7)],
        "machine_mesh": m.json(),
        "part": {"pose": {"translation": [2.95, 0.0, 0.44], "rpy": [0, 0, 0]}, "radius": 0.04},
        "dynamic_obstacles": [],
        "start_pose": {"x": 1.0, "y": 0.0, "theta": 0.0},
    })


def corridor():
    write("corridor", {
        "floor": {"min": [0.0, -2.0], "max": [8.0, 2.0]},
        "obstacles": [rect(0.5, 0.6, 7.5, 1.2), rect(0.5, -1.2, 7.5, -0.6)],
        "start_pose": {"x": 1.0, "y": 0.0, "theta": 0.0},
    })


def dead_end():
    # 0.9 m wide dead end, closed at x = 3.
    write("dead_end", {
        "floor": {"min": [0.0, -2.0], "max": [5.0, 2.0]},
        "obstacles": [rect(0.5, 0.45, 3.4, 1.0), rect(0.5, -1.0, 3.4, -0.45), rect(3.0, -0.45, 3.4, 0.45)],
        "start_pose": {"x": 2.3, "y": 0.0, "theta": 0.0},
    })


def two_obstacles():
    write("two_obstacles", {
        "floor": {"min": [0.0, -3.0], "max": [10.0, 3.0]},
        "obstacles": [disc(3.5, 0.3, 0.5), disc(6.5, -0.3, 0.5)],
        "start_pose": {"x": 1.0, "y": 0.0, "theta": 0.0},
    })


def blocked_corridor():
    # 0.6 m corridor; a disc parks in its middle from t = 0.
    write("blocked_corridor", {
        "floor": {"min": [0.0, -2.0], "max": [8.0, 2.0]},
        "obstacles": [rect(0.5, 0.3, 7.5, 1.0), rect(0.5, -1.0, 7.5, -0.3)],
        "dynamic_obstacles": [{"radius": 0.2, "waypoints": [[0.0, 4.0, 0.0], [100.0, 4.0, 0.0]]}],
        "start_pose": {"x": 1.0, "y": 0.0, "theta": 0.0},
    })


def dynamic_room():
    # Open room; a disc walks onto the straight route after the robot starts.
    write("dynamic_room", {
        "floor": {"min": [0.0, -3.0], "max": [9.0, 3.0]},
        "obstacles": [rect(0.0, 2.6, 9.0, 3.0), rect(0.0, -3.0, 9.0, -2.6)],
        "dynamic_obstacles": [{"radius": 0.25, "waypoints": [[0.0, 4.5, -2.2], [4.0, 4.5, 0.0], [100.0, 4.5, 0.0]]}],
        "start_pose": {"x": 1.0, "y": 0.0, "theta": 0.0},
    })


def loop():
    write("loop", {
        "floor": {"min": [-1.0, -1.0], "max": [9.0, 9.0]},
        "obstacles": [rect(2.5, 2.5, 5.5, 5.5)],
        "start_pose": {"x": 1.0, "y": 1.0, "theta": 0.0},
        "noise": {"odom_distance_fraction": 0.01, "odom_dtheta_std": 0.00872664626, "imu_rate_std": 0.005,
                  "imu_bias": 0.001, "ekf_yaw_variance": 1e-4},
    })


def plate():
    # 30 x 30 cm plate, 1 cm thick, 0.5 m in front of the arm base at table height.
    m = Mesh()
    m.box([0.35, -0.15, -0.01], [0.65, 0.15, 0.0])
    write("plate", {
        "floor": {"min": [-2.0, -2.0], "max": [2.0, 2.0]},
        "machine_mesh": m.json(),
        "start_pose": {"x": 0.0, "y": 0.0, "theta": 0.0},
    })


if __name__ == "__main__":
    printer_cell()
    corridor()
    dead_end()
    two_obstacles()
    blocked_corridor()
    dynamic_room()
    loop()
    plate()
