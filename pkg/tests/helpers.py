"""Shared test oracles: finite differences, random graphs, reference math."""

import numpy as np

from morphogen import numcore as nc
from morphogen.config import MorphConfig
from morphogen.morphology import MorphologyGraph, TopoAction, apply_topo_actions


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f w.r.t. array x, elementwise."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def assert_grad_close(analytic, fd, rel=1e-6, abs_floor=1e-9):
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    assert analytic.shape == fd.shape
    err = np.abs(analytic - fd)
    tol = rel * np.maximum(np.abs(fd), np.abs(analytic)) + abs_floor
    worst = np.argmax(err - tol)
    assert np.all(err <= tol), (
        f"gradient mismatch at flat index {worst}: "
        f"analytic={analytic.reshape(-1)[worst]} fd={fd.reshape(-1)[worst]}")


def tape_grad(build_loss, params):
    """Run build_loss() under a fresh tape, backward, return grads per param."""
    nc.zero_grads(params)
    with nc.record() as tape:
        loss = build_loss()
    nc.backward(loss, tape)
    return [None if p.grad is None else p.grad.copy() for p in params]


def check_op_gradients(build_loss, params, rel=1e-6, abs_floor=1e-9, h=1e-5):
    """Compare tape gradients of every param against central differences."""
    grads = tape_grad(build_loss, params)
    for p, g in zip(params, grads):
        def value():
            with nc.no_grad():
                return float(build_loss().data)
        fd = finite_diff_grad(value, p.data, h=h)
        got = np.zeros_like(p.data) if g is None else g
        assert_grad_close(got, fd, rel=rel, abs_floor=abs_floor)


def random_graph(rng: np.random.Generator, cfg: MorphConfig | None = None,
                 n_steps: int = 6) -> MorphologyGraph:
    """Grow a random legal morphology by applying random topology batches."""
    cfg = cfg or MorphConfig()
    g = MorphologyGraph(cfg.ranges)
    for _ in range(n_steps):
        acts = rng.integers(0, 3, size=g.n_limbs())
        g, _ = apply_topo_actions(g, acts, cfg)
    return g


def random_actions(rng: np.random.Generator, n: int):
    return rng.integers(0, 3, size=n)


ALL_ACTIONS = [TopoAction.ADD, TopoAction.DELETE, TopoAction.NO_CHANGE]
