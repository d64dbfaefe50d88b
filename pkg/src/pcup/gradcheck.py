"""Finite-difference verification suite for every loss and the network.

Each check compares reverse-mode gradients against central differences on
random instances of 8 to 32 points. Instances are drawn from a seeded
generator, so a given seed is reproducible; positions are spread in the
unit box, which keeps nearest-neighbor margins comfortably wider than the
difference step (no argmin/relu kinks in the probe set).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import finite_difference_check
from .cloud import PointCloud
from .network import NetConfig, bind_params, forward, init_params, layer_plan

FD_STEP = 1e-4
FD_TOL = 1e-4
FD_K = 3  # neighbor count for knn-style losses at 8-32 point scale

# small but full-width network used for parameter gradient checks
GRADCHECK_NET = NetConfig(up_ratio=4, scales=((0.3, 4), (0.5, 4)), k=FD_K, patch_size=8)


@dataclass
class CheckResult:
    name: str
    max_deviation: float
    tolerance: float = FD_TOL

    @property
    def ok(self) -> bool:
        return self.max_deviation < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        return f"{status} {self.name}: max relative deviation {self.max_deviation:.3g} (tol {self.tolerance:g})"


def _random_cloud(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    pos = rng.uniform(0.0, 1.0, (n, 3))
    nrm = rng.standard_normal((n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return pos, nrm


def check_chamfer(rng: np.random.Generator, instances: int) -> CheckResult:
    worst = 0.0
    for _ in range(instances):
        n, m = rng.integers(8, 33, 2)
        pred, _ = _random_cloud(rng, int(n))
        gt, _ = _random_cloud(rng, int(m))
        worst = max(worst, finite_difference_check(
            lambda p: losses.chamfer_t(p, gt), pred, step=FD_STEP))
    return CheckResult("chamfer", worst)


def check_point_knn(rng: np.random.Generator, instances: int) -> CheckResult:
    worst = 0.0
    for _ in range(instances):
        pred, _ = _random_cloud(rng, int(rng.integers(8, 33)))
        worst = max(worst, finite_difference_check(
            lambda p: losses.point_knn_loss_t(p, FD_K), pred, step=FD_STEP))
    return CheckResult("point_knn", worst)


def check_normal_l2(rng: np.random.Generator, instances: int) -> CheckResult:
    worst = 0.0
    for _ in range(instances):
        n, m = rng.integers(8, 33, 2)
        pos, nrm = _random_cloud(rng, int(n))
        gt = PointCloud(*_random_cloud(rng, int(m)))
        worst = max(worst, finite_difference_check(
            lambda q: losses.normal_l2_loss_t(pos, q, gt), nrm, step=FD_STEP))
    return CheckResult("normal_l2", worst)


def check_normal_orth(rng: np.random.Generator, instances: int) -> CheckResult:
    worst = 0.0
    for _ in range(instances):
        pos, nrm = _random_cloud(rng, int(rng.integers(8, 33)))
        worst = max(worst, finite_difference_check(
            lambda p, q: losses.normal_orth_loss_t(p, q, FD_K), [pos, nrm], step=FD_STEP))
    return CheckResult("normal_orth", worst)


def check_normal_knn(rng: np.random.Generator, instances: int) -> CheckResult:
    worst = 0.0
    for _ in range(instances):
        pos, nrm = _random_cloud(rng, int(rng.integers(8, 33)))
        worst = max(worst, finite_difference_check(
            lambda q: losses.normal_knn_loss_t(pos, q, FD_K), nrm, step=FD_STEP))
    return CheckResult("normal_knn", worst)


def check_total(rng: np.random.Generator, instances: int) -> CheckResult:
    worst = 0.0
    for _ in range(instances):
        n, m = rng.integers(8, 33, 2)
        pos, nrm = _random_cloud(rng, int(n))
        gt = PointCloud(*_random_cloud(rng, int(m)))

        def f(p, q):
            total, _ = losses.total_loss_t(p, q, gt, k=FD_K)
            return total

        worst = max(worst, finite_difference_check(f, [pos, nrm], step=FD_STEP))
    return CheckResult("total", worst)


def check_network(rng: np.random.Generator, instances: int, coords_per_tensor: int = 4) -> CheckResult:
    """Gradient of the full training objective w.r.t. every parameter tensor.

    Parameter tensors are wide, so a random subset of coordinates per
    tensor is probed; every tensor is covered in every instance.
    """
    plan = layer_plan(GRADCHECK_NET)
    paths = [spec[0] for chain in plan.values() for spec in chain]
    worst = 0.0
    for i in range(instances):
        params = init_params(GRADCHECK_NET, rng_seed=int(rng.integers(2**31)))
        n = 8
        x = np.hstack(_random_cloud(rng, n))
        gt = PointCloud(*_random_cloud(rng, GRADCHECK_NET.up_ratio * n))
        flat: list[np.ndarray] = []
        for path in paths:
            w, b = params.layers[path]
            flat.extend([w, b.reshape(1, -1)])

        def f(*tensors):
            pt = {path: (tensors[2 * j], tensors[2 * j + 1]) for j, path in enumerate(paths)}
            out = forward(x, pt, GRADCHECK_NET)
            total, _ = losses.total_loss_t(
                ad.slice_cols(out, 0, 3), ad.slice_cols(out, 3, 6), gt, k=FD_K
            )
            return total

        worst = max(worst, finite_difference_check(
            f, flat, step=FD_STEP, coords_per_tensor=coords_per_tensor, rng=rng))
    return CheckResult("network", worst)


def run_gradcheck(seed: int = 0, instances: int = 20, net_instances: int = 20) -> list[CheckResult]:
    """Run every check; a fresh sub-generator per check keeps them independent."""
    results = []
    checks = [
        (check_chamfer, instances),
        (check_point_knn, instances),
        (check_normal_l2, instances),
        (check_normal_orth, instances),
        (check_normal_knn, instances),
        (check_total, instances),
        (check_network, net_instances),
    ]
    for ci, (fn, count) in enumerate(checks):
        rng = np.random.default_rng([seed, ci])
        results.append(fn(rng, count))
    return results
