"""Independent reference computations shared by the module and acceptance tests."""

import math

import numpy as np

from v2icoop.geometry import OrientedBox, PinholeCamera, PointCorrespondence
from v2icoop.tracking import path_cost


def synthetic_camera(heading=0.0, focal=1000.0, height=6.0, pitch_deg=15.0, position=(0.0, 0.0)):
    return PinholeCamera(focal, (448.0, 252.0), (position[0], position[1], height), heading, math.radians(pitch_deg))


def ground_grid(cam, forward=(10.0, 20.0, 35.0, 50.0), lateral=(-8.0, 0.0, 8.0)):
    f = np.array([math.cos(cam.heading), math.sin(cam.heading)])
    left = np.array([-f[1], f[0]])
    return np.array([np.asarray(cam.position[:2]) + a * f + b * left for a in forward for b in lateral])


def correspondences_for(cam, ground, noise=None):
    px = cam.project(np.column_stack([ground, np.zeros(len(ground))]))
    if noise is not None:
        px = px + noise
    return [PointCorrespondence(tuple(p), tuple(g)) for p, g in zip(px, ground)]


def mc_iou(a: OrientedBox, b: OrientedBox, n: int, rng) -> float:
    """Monte-Carlo IoU from uniform samples over the joint bounding rectangle."""
    corners = np.vstack([a.corners(), b.corners()])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    pts = rng.uniform(lo, hi, size=(n, 2))

    def inside(box):
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        d = pts - np.asarray(box.center)
        lx = c * d[:, 0] + s * d[:, 1]
        ly = -s * d[:, 0] + c * d[:, 1]
        return (np.abs(lx) <= box.length / 2) & (np.abs(ly) <= box.width / 2)

    ia, ib = inside(a), inside(b)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def random_box(rng, spread=3.0):
    return OrientedBox(tuple(rng.uniform(-spread, spread, 2)), rng.uniform(0.5, 5.0), rng.uniform(0.5, 3.0),
                       rng.uniform(-math.pi, math.pi))


def brute_force_cost(net, params):
    """Minimum total cost over every set of disjoint trajectories (empty set included).

    Detections are visited in frame order; each one is skipped, starts a new
    chain, or extends any chain whose tail links to it.
    """
    order = sorted(range(len(net.detections)), key=lambda k: (net.detections[k][0], k))
    best = [0.0]

    def rec(i, chains):
        if i == len(order):
            best[0] = min(best[0], sum(path_cost(net, c, params) for c in chains))
            return
        k = order[i]
        rec(i + 1, chains)
        rec(i + 1, chains + [[k]])
        for ci, c in enumerate(chains):
            if net.transition_cost(c[-1], k) is not None:
                rec(i + 1, chains[:ci] + [c + [k]] + chains[ci + 1:])

    rec(0, [])
    return best[0]
