"""Finite-difference self-check of the model Jacobian ``L``.

Every column of ``L`` is compared against a central difference of the
world position ``x = c + R(theta) (s(uv, q_s) + d)`` at random poses,
shapes and angles.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kinematics
from .geometry import PARAM_NAMES, GlobalParams, global_surface

FD_STEP = 1e-5
TOLERANCE = 1e-4


def column_names() -> list:
    names = [f"translation:{a}" for a in "xyz"]
    names += [f"rotation:{a}" for a in "wxyz"]
    names += [f"global:{p}" for p in PARAM_NAMES]
    names += [f"local:{a}" for a in "xyz"]
    return names


def block_of(column: str) -> str:
    """Report key of a column: global columns are named per parameter."""
    block, _, _ = column.partition(":")
    return column if block == "global" else block


def random_configuration(rng: np.random.Generator):
    """A pose, global shape, angle pair and local offset away from singular spots.

    Angles avoid the coordinate axes, where ``|w|**eps`` has an unbounded
    derivative for ``eps < 1`` and central differences lose accuracy.
    """
    theta = rng.normal(size=4)
    theta /= np.linalg.norm(theta)
    pose = kinematics.Pose(rng.uniform(-1, 1, 3), theta)
    g = GlobalParams(
        a0=rng.uniform(0.5, 2.0),
        a1=rng.uniform(0.5, 2.0),
        a2=rng.uniform(0.5, 2.0),
        a3=rng.uniform(0.5, 2.0),
        eps1=rng.uniform(0.3, 1.8),
        eps2=rng.uniform(0.3, 1.8),
        t1=rng.uniform(-0.5, 0.5),
        t2=rng.uniform(-0.5, 0.5),
        b1=rng.uniform(-0.3, 0.3),
        b2=rng.uniform(-0.5, 0.5),
        b3=rng.uniform(0.0, 1.0),
    )
    margin = 0.15
    u = rng.choice([-1, 1]) * rng.uniform(margin, np.pi / 2 - margin)
    v = rng.integers(4) * np.pi / 2 + rng.uniform(margin, np.pi / 2 - margin) - np.pi
    d = rng.normal(scale=0.05, size=3)
    return pose, g, np.array([u, v]), d


def world_position(q: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """``x`` as a function of the flat 21-vector ``q = (c, theta, q_s, d)``."""
    sl = kinematics.BLOCK_SLICES
    c, theta, qs, d = q[sl["translation"]], q[sl["rotation"]], q[sl["global"]], q[sl["local"]]
    g = GlobalParams.from_array(qs)
    return c + kinematics.rotation_matrix(theta) @ (global_surface(uv, g) + d)


def finite_difference_L(q: np.ndarray, uv: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    cols = []
    for i in range(q.size):
        dq = np.zeros_like(q)
        dq[i] = h
        cols.append((world_position(q + dq, uv) - world_position(q - dq, uv)) / (2 * h))
    return np.stack(cols, axis=-1)


@dataclass
class CheckReport:
    trials: int
    worst: dict = field(default_factory=dict)  # block -> worst relative error
    failures: list = field(default_factory=list)  # (block, trial, error, configuration)

    @property
    def ok(self) -> bool:
        return not self.failures

    def lines(self) -> list:
        out = [f"{block:<16s} worst relative error {err:.3e}" for block, err in self.worst.items()]
        for block, trial, err, config in self.failures[:10]:
            out.append(f"FAIL {block} trial {trial}: relative error {err:.3e} at {config}")
        if len(self.failures) > 10:
            out.append(f"... {len(self.failures) - 10} more failures")
        out.append("OK" if self.ok else f"FAILED ({len(self.failures)} column checks)")
        return out


def check_jacobians(seed: int = 0, trials: int = 1000, tol: float = TOLERANCE) -> CheckReport:
    """Compare analytic ``L`` with central differences over random configurations.

    The error of column ``i`` is ``|FD_i - L_i| / (1 + |L_i|)``.
    """
    rng = np.random.default_rng(seed)
    names = column_names()
    report = CheckReport(trials)
    for trial in range(trials):
        pose, g, uv, d = random_configuration(rng)
        p = global_surface(uv, g) + d
        L = kinematics.assemble_L(pose, uv, g, p).L
        q = np.concatenate([pose.c, pose.theta, g.to_array(), d])
        fd = finite_difference_L(q, uv)
        err = np.linalg.norm(fd - L, axis=0) / (1.0 + np.linalg.norm(L, axis=0))
        for i, name in enumerate(names):
            block = block_of(name)
            report.worst[block] = max(report.worst.get(block, 0.0), float(err[i]))
            if not err[i] < tol:
                config = {
                    "c": np.round(pose.c, 6).tolist(),
                    "theta": np.round(pose.theta, 6).tolist(),
                    "globals": {k: round(v, 6) for k, v in g.to_dict().items()},
                    "uv": np.round(uv, 6).tolist(),
                }
                report.failures.append((name, trial, float(err[i]), config))
    return report
