"""Finite-difference gradient suite over every differentiable op and the full SDNN loss."""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional

import numpy as np

from . import tensor as T
from .model import SdnnModel, default_blocks, forward_train, train_loss
from .noise import NoiseSpec, Rng, apply_noise

OP_TOL = 1e-3
OP_STEP = 1e-3
E2E_TOL = 1e-2
E2E_STEP = 1e-3
KINK_MARGIN = 1e-2


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_err: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _window_gap_mask(x: np.ndarray, target) -> np.ndarray:
    """False for every entry of a pooling window whose top two values are within KINK_MARGIN."""
    n, h, w, c = x.shape
    th, tw = target
    kh, kw = h // th, w // tw
    win = x.reshape(n, th, kh, tw, kw, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, th, tw, kh * kw, c)
    top = np.sort(win, axis=3)
    ok = (top[:, :, :, -1] - top[:, :, :, -2]) > KINK_MARGIN if kh * kw > 1 else np.ones(top.shape[:3] + (c,), bool)
    okwin = np.broadcast_to(ok[:, :, :, None, :], win.shape)
    return okwin.reshape(n, th, tw, kh, kw, c).transpose(0, 1, 3, 2, 4, 5).reshape(x.shape)


def _probe(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(shape).astype(np.float32)


def _cases(rng: np.random.Generator) -> Iterator[tuple]:
    """(name, f, x, mask) for one random instance of each op check."""
    a = _probe(rng, (3, 4))
    r = _probe(rng, (3, 4))
    yield "add", (lambda x: T.weighted_sum(T.add(x, T.Tensor(a)), r)), T.Tensor(_probe(rng, (3, 4))), None
    yield "mul", (lambda x: T.weighted_sum(T.mul(x, T.Tensor(a)), r)), T.Tensor(_probe(rng, (3, 4))), None

    base = _probe(rng, (2, 3, 3, 4))
    rb = _probe(rng, (2, 3, 3, 4))
    yield ("broadcast_add_channel", (lambda v: T.weighted_sum(T.broadcast_add_channel(T.Tensor(base), v), rb)),
           T.Tensor(_probe(rng, (4,))), None)

    w = _probe(rng, (4, 2))
    b = _probe(rng, (2,))
    xd = _probe(rng, (3, 4))
    rd = _probe(rng, (3, 2))
    yield "dense.x", (lambda x: T.weighted_sum(T.dense(x, T.Tensor(w), T.Tensor(b)), rd)), T.Tensor(xd), None
    yield "dense.weight", (lambda k: T.weighted_sum(T.dense(T.Tensor(xd), k, T.Tensor(b)), rd)), T.Tensor(w.copy()), None
    yield "dense.bias", (lambda c: T.weighted_sum(T.dense(T.Tensor(xd), T.Tensor(w), c), rd)), T.Tensor(b.copy()), None

    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    kc = (0.3 * _probe(rng, (3, 3, 2, 3))).astype(np.float32)
    xc = _probe(rng, (2, 5, 5, 2))
    ho = T.conv_output_size(5, 3, stride, pad)
    rc = _probe(rng, (2, ho, ho, 3))
    yield "conv2d.x", (lambda x: T.weighted_sum(T.conv2d(x, T.Tensor(kc), stride, pad), rc)), T.Tensor(xc), None
    yield "conv2d.kernel", (lambda k: T.weighted_sum(T.conv2d(T.Tensor(xc), k, stride, pad), rc)), T.Tensor(kc.copy()), None

    xp = _probe(rng, (2, 4, 4, 3))
    rp = _probe(rng, (2, 2, 2, 3))
    yield "pool2d.max", (lambda x: T.weighted_sum(T.pool2d(x, "max", (2, 2)), rp)), T.Tensor(xp), _window_gap_mask(xp, (2, 2))
    yield "pool2d.avg", (lambda x: T.weighted_sum(T.pool2d(x, "avg", (2, 2)), rp)), T.Tensor(xp.copy()), None

    xr = _probe(rng, (3, 5))
    rr = _probe(rng, (3, 5))
    yield "relu", (lambda x: T.weighted_sum(T.relu(x), rr)), T.Tensor(xr), np.abs(xr) > KINK_MARGIN

    rn = _probe(rng, (2, 5))
    yield "l2_normalize", (lambda x: T.weighted_sum(T.l2_normalize(x), rn)), T.Tensor(_probe(rng, (2, 5))), None
    rs = _probe(rng, (2, 3, 3, 2))
    yield "rms_normalize", (lambda x: T.weighted_sum(T.rms_normalize(x), rs)), T.Tensor(_probe(rng, (2, 3, 3, 2))), None

    labels = rng.integers(0, 5, size=2)
    yield "softmax_cross_entropy", (lambda x: T.softmax_cross_entropy(x, labels)), T.Tensor(_probe(rng, (2, 5))), None

    m1 = _probe(rng, (3, 4))
    rm = _probe(rng, (2, 4))
    yield "matmul", (lambda x: T.weighted_sum(T.matmul(x, T.Tensor(m1)), rm)), T.Tensor(_probe(rng, (2, 3))), None
    rt = _probe(rng, (4, 2))
    yield "transpose", (lambda x: T.weighted_sum(T.transpose(x), rt)), T.Tensor(_probe(rng, (2, 4))), None
    xs = _probe(rng, (2, 3))
    rsc = _probe(rng, (2, 3))
    yield "scale.factor", (lambda s: T.weighted_sum(T.scale(T.Tensor(xs), s), rsc)), T.Tensor([float(rng.uniform(1, 10))]), None
    yield "reshape", (lambda x: T.weighted_sum(T.reshape(x, (3, 2)), rt[:3])), T.Tensor(_probe(rng, (2, 3))), None
    yield "sum", (lambda x: T.sum(x)), T.Tensor(_probe(rng, (2, 3))), None


@contextlib.contextmanager
def corrupted(op_name: str, factor: float = 1.1):
    """Temporarily scale the gradients produced by one tensor op (a negative control)."""
    original = getattr(T, op_name, None)
    if not callable(original):
        raise ValueError(f"no tensor op named {op_name!r}")

    def wrapped(*args, **kwargs):
        out = original(*args, **kwargs)
        if out._backward is not None:
            inner = out._backward
            out._backward = lambda g: [None if v is None else v * factor for v in inner(g)]
        return out

    setattr(T, op_name, wrapped)
    try:
        yield
    finally:
        setattr(T, op_name, original)


def op_suite(instances: int = 20, seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    worst: dict = {}
    times: dict = {}
    for _ in range(instances):
        for name, f, x, mask in _cases(rng):
            t0 = time.perf_counter()
            err = T.grad_check(f, x, OP_STEP, mask)
            times[name] = times.get(name, 0.0) + time.perf_counter() - t0
            worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(n, instances, worst[n], OP_TOL, times[n]) for n in worst]


def tiny_model(seed: int, noise: Optional[NoiseSpec] = None) -> SdnnModel:
    noise = noise or NoiseSpec("gaussian", False, 0.06)
    blocks = default_blocks((4, 4, 6, 8), 2, [noise] * 3, [True] * 3)
    return SdnnModel(3, 3, blocks, stem_channels=4, embed_dim=6, seed=seed)


def end_to_end(instances: int = 20, seed: int = 0, coords_per_param: int = 3,
               oracle_dtype=np.float64, h: float = E2E_STEP) -> CheckResult:
    """Gradient of the full SDNN training loss (all heads, noise on) on a 4-image batch.

    Every parameter tensor gets ``coords_per_param`` random coordinates
    checked per instance. Coordinates whose +-h evaluations change a ReLU or
    max-pool pattern are skipped.
    """
    rng = np.random.default_rng(seed + 1000)
    t0 = time.perf_counter()
    worst = 0.0
    for inst in range(instances):
        model = tiny_model(seed + inst)
        x = rng.standard_normal((4, 16, 16, 3)).astype(np.float32)
        y = rng.integers(0, 3, size=4)
        noise_rng = Rng(seed, (9, inst))

        def loss_fn(_p):
            return train_loss(forward_train(model, T.Tensor(x), noise_rng), y)

        for name, p in model.parameters().items():
            pick = rng.choice(p.size, size=min(coords_per_param, p.size), replace=False)
            err = T.grad_check(loss_fn, p, h, oracle_dtype=oracle_dtype, indices=pick,
                               exclude_kinks=True)
            worst = max(worst, err)
    return CheckResult("sdnn_loss", instances, worst, E2E_TOL, time.perf_counter() - t0)


@dataclass
class CancellationResult:
    spatial_dev: float
    nonspatial_dev: float
    bound: float
    trials: int

    @property
    def ratio(self) -> float:
        return self.nonspatial_dev / self.spatial_dev

    @property
    def passed(self) -> bool:
        return self.spatial_dev <= self.bound and self.ratio >= 5.0


def cancellation(trials: int = 1000, size: int = 16, channels: int = 8, out_dim: int = 4,
                 sigma: float = 0.06, seed: int = 0) -> CancellationResult:
    """Pooled deviation of a linear block (1x1 conv) under spatial vs non-spatial Gaussian noise.

    Full average pooling shrinks zero-mean spatial noise by sqrt(H W);
    a per-channel offset passes straight through.
    """
    rng = np.random.default_rng(seed)
    f = T.Tensor(rng.standard_normal((1, size, size, channels)))
    phi = T.Tensor(rng.standard_normal((1, 1, channels, out_dim)))
    clean = T.pool2d(T.conv2d(f, phi, 1, 0), "avg", (1, 1)).data
    devs = {}
    for spatial in (True, False):
        spec = NoiseSpec("gaussian", spatial, sigma)
        total = 0.0
        for i in range(trials):
            g = apply_noise(f, spec, Rng(seed, (11, int(spatial), i)), training=True)
            pooled = T.pool2d(T.conv2d(g, phi, 1, 0), "avg", (1, 1)).data
            total += float(np.mean(np.abs(pooled - clean)))
        devs[spatial] = total / trials
    row_norm = float(np.max(np.linalg.norm(phi.data.reshape(channels, out_dim), axis=0)))
    bound = float(3.0 * sigma * row_norm / np.sqrt(size * size))
    return CancellationResult(devs[True], devs[False], bound, trials)


def run_all(instances: int = 20, seed: int = 0) -> List[CheckResult]:
    return op_suite(instances, seed) + [end_to_end(instances, seed)]


def format_report(results: List[CheckResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status} {r.name:<24} n={r.instances:<3} max_rel_err={r.max_rel_err:.3e} "
                     f"tol={r.tol:.0e} ({r.seconds:.2f}s)")
    return "\n".join(lines)
