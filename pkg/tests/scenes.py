"""Random scene generators shared by several test modules."""
import math

import numpy as np

from valvebot.scansim import Box, PanelGeometry, Scene

SENSOR_HEIGHT = 0.9


def panel_scene(seed, d_range=(5.0, 40.0), clutter=True, geometry=PanelGeometry()):
    """Panel in the sensor's forward half-plane, facing it (front or back) within 10 deg.

    Clutter is a pole (0.25x panel width) and a wall (4x), each placed at least 30 deg
    of bearing away from the panel so it cannot hide it.

    :return: (scene, (px, py, yaw))
    """
    rng = np.random.default_rng(seed)
    d = rng.uniform(*d_range)
    b = rng.uniform(-math.pi / 2, math.pi / 2)
    px, py = d * math.cos(b), d * math.sin(b)
    yaw = b + rng.choice([0.0, math.pi]) + rng.uniform(-math.radians(10), math.radians(10))
    boxes = geometry.boxes_at(px, py, yaw)
    if clutter:
        for scale in (0.25, 4.0):
            w = scale * geometry.width
            dc = rng.uniform(*d_range)
            bc = b + rng.choice([-1.0, 1.0]) * rng.uniform(math.radians(30), math.pi)
            boxes.append(Box((dc * math.cos(bc), dc * math.sin(bc), 0.5), (min(w, 0.5), w, 1.0), bc,
                             f"clutter_{scale}"))
    return Scene(tuple(boxes)), (px, py, math.atan2(math.sin(yaw), math.cos(yaw)))


def wide_object_scene(seed, scale=4.0, d_range=(5.0, 40.0), geometry=PanelGeometry()):
    """A single panel-shaped box ``scale`` times wider than the panel, facing the sensor."""
    rng = np.random.default_rng(seed)
    d = rng.uniform(*d_range)
    b = rng.uniform(-math.pi, math.pi)
    yaw = b + rng.uniform(-math.radians(30), math.radians(30))
    box = Box((d * math.cos(b), d * math.sin(b), geometry.height / 2),
              (geometry.depth, scale * geometry.width, geometry.height), yaw, "wide")
    return Scene((box,)), (d * math.cos(b), d * math.sin(b))
