"""Fast internal consistency checks, run by ``mtlkit selftest``."""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from . import container
from . import gradcore as gc
from . import losses as L
from .model import NetworkConfig, TaskTargets, TinySegNet, compute_losses
from .scenes import SceneConfig, generate_sample
from .weighting import nash_solve


def _net_gradient():
    model = TinySegNet(NetworkConfig(base_width=4, num_classes=3, num_codes=6, d_max=4.0, seed=3))
    rng = np.random.default_rng(0)
    images = rng.uniform(0, 1, (2, 3, 16, 16))
    labels = rng.integers(0, 3, (2, 16, 16))
    codes = rng.integers(0, 6, (2, 16, 16))
    depth = rng.uniform(1, 3, (2, 1, 16, 16))
    targets = TaskTargets(labels, codes, depth=depth, depth_mask=np.ones((2, 16, 16), bool), focal=8, baseline=1)
    tape = gc.Tape(model.params)
    losses = compute_losses(model.forward(tape, images), targets)
    root = losses["seg"] + losses["depth"] + losses["surface"]
    report = gc.finite_diff_check(tape, root, max_entries=8)
    return report.passed, f"max rel error {report.max_error:.2e}"


def _nash():
    sol = nash_solve(np.eye(3))
    ok = np.allclose(sol.alpha, 1.0, atol=1e-10)
    sol1 = nash_solve(np.array([[4.0]]))
    ok &= abs(sol1.alpha[0] - 0.5) < 1e-10
    return bool(ok), f"identity alpha {sol.alpha.round(12).tolist()}"


def _warp():
    smp = generate_sample(SceneConfig(), 7)
    pair = L.StereoPair(smp.left, smp.right, smp.valid)
    tape = gc.Tape()
    loss = L.depth_recon_loss(pair, tape.constant(smp.disparity)).item()
    return loss < 1e-6, f"reconstruction loss {loss:.2e}"


def _codec():
    rng = np.random.default_rng(1)
    tensors = {"a": rng.normal(size=(2, 3)), "b": np.array(3.5)}
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "t.gbgn"
        container.save(path, tensors)
        back = container.load(path)
    ok = all(np.array_equal(tensors[k], back[k]) for k in tensors)
    return ok, "round trip"


CHECKS = {"gradients": _net_gradient, "nash": _nash, "warp": _warp, "container": _codec}


def run(echo=print) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        passed, detail = fn()
        echo(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
        ok &= passed
    return ok
