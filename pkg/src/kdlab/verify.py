"""Self-checks run by ``kdlab verify``: gradient checks, loss identities, metric oracles.

Each check reports the measured quantity next to the tolerance it is held to.
Loss functions are injectable so tests can confirm that a deliberately broken
implementation is caught.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_diff_check
from .data import gen_gaussian_mixture
from .losses import DistillConfig, composite_loss, entropy, kd_loss, soften
from .models import ModelSpec, build, forward
from .orchestrator import ensemble_predict, kd_error
from .train import predict_logits, topk_correct

FD_H = 1e-3
FD_TOL = 1e-4
FD_SEEDS = 20
TEMPERATURES = (0.5, 1.0, 4.0, 20.0)


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<36} measured={self.measured:.3g}  tol={self.tolerance:g}  {self.detail}".rstrip()


# gradient checks -----------------------------------------------------------

def _weights(rng, shape) -> np.ndarray:
    return rng.standard_normal(shape)


def _weighted_sum(y: Tensor, w: np.ndarray) -> Tensor:
    return ad.sum(ad.mul(y, Tensor(w)))


def _case(op: str, rng: np.random.Generator) -> tuple[Callable[[Tensor], Tensor], np.ndarray]:
    """A scalar function of one tensor exercising ``op``, and the point to check it at."""
    if op in ("add", "sub", "mul"):
        other = rng.standard_normal((3, 4))
        w = _weights(rng, (3, 4))
        fn = getattr(ad, op)
        return (lambda x: _weighted_sum(fn(x, Tensor(other)), w)), rng.standard_normal((3, 4))
    if op == "scale":
        w = _weights(rng, (3, 4))
        return (lambda x: _weighted_sum(ad.scale(x, -1.7), w)), rng.standard_normal((3, 4))
    if op == "exp":
        w = _weights(rng, (3, 4))
        return (lambda x: _weighted_sum(ad.exp(x), w)), rng.standard_normal((3, 4))
    if op == "relu":
        w = _weights(rng, (4, 5))
        return (lambda x: _weighted_sum(ad.relu(x), w)), rng.standard_normal((4, 5))
    if op == "add_bias":
        x0 = rng.standard_normal((2, 3, 4, 4))
        w = _weights(rng, x0.shape)
        return (lambda b: _weighted_sum(ad.add_bias(Tensor(x0), b), w)), rng.standard_normal(3)
    if op == "sum":
        w = _weights(rng, (4,))
        return (lambda x: _weighted_sum(ad.sum(x, axis=0), w)), rng.standard_normal((3, 4))
    if op == "mean":
        w = _weights(rng, (3,))
        return (lambda x: _weighted_sum(ad.mean(x, axis=1), w)), rng.standard_normal((3, 4))
    if op == "reshape":
        w = _weights(rng, (2, 6))
        return (lambda x: _weighted_sum(ad.reshape(x, (2, 6)), w)), rng.standard_normal((3, 4))
    if op == "pick":
        idx = rng.integers(0, 5, size=4)
        w = _weights(rng, (4,))
        return (lambda x: _weighted_sum(ad.pick(x, idx), w)), rng.standard_normal((4, 5))
    if op == "matmul":
        b = rng.standard_normal((4, 3))
        w = _weights(rng, (5, 3))
        return (lambda x: _weighted_sum(ad.matmul(x, Tensor(b)), w)), rng.standard_normal((5, 4))
    if op == "matmul_rhs":
        a = rng.standard_normal((5, 4))
        w = _weights(rng, (5, 3))
        return (lambda x: _weighted_sum(ad.matmul(Tensor(a), x), w)), rng.standard_normal((4, 3))
    if op == "conv2d":
        k = rng.standard_normal((3, 2, 3, 3))
        w = _weights(rng, (2, 3, 4, 4))
        return (lambda x: _weighted_sum(ad.conv2d(x, Tensor(k), 2, 1), w)), rng.standard_normal((2, 2, 7, 7))
    if op == "conv2d_kernel":
        x0 = rng.standard_normal((2, 2, 5, 5))
        w = _weights(rng, (2, 3, 5, 5))
        return (lambda k: _weighted_sum(ad.conv2d(Tensor(x0), k, 1, 1), w)), rng.standard_normal((3, 2, 3, 3))
    if op == "avgpool2d":
        w = _weights(rng, (2, 2, 2, 2))
        return (lambda x: _weighted_sum(ad.avgpool2d(x, 2), w)), rng.standard_normal((2, 2, 5, 5))
    if op == "log_softmax":
        tau = float(rng.choice(TEMPERATURES))
        w = _weights(rng, (3, 5))
        return (lambda x: _weighted_sum(ad.log_softmax(x, tau), w)), 3 * rng.standard_normal((3, 5))
    if op == "normalize_rows":
        w = _weights(rng, (3, 6))
        return (lambda x: _weighted_sum(ad.normalize_rows(x), w)), rng.standard_normal((3, 6))
    if op == "composite_loss":
        return _composite_case(rng)
    if op == "composite_loss_at":
        return _composite_at_case(rng)
    raise KeyError(op)


def _frozen_but(model, name: str):
    """``f(param) -> model`` where only ``name`` varies; the rest is held constant."""
    others = {k: v.data for k, v in model.params.items() if k != name}

    def with_param(p: Tensor):
        m = build(model.spec)
        for k, v in others.items():
            m.params[k] = Tensor(v)
        m.params[name] = p
        return m

    return with_param


def _composite_case(rng: np.random.Generator):
    """CE + KD for a two-layer dense student, as a function of its first weight matrix."""
    spec = ModelSpec("mlp", 2, 1, (6,), 4, init_seed=int(rng.integers(1 << 16)))
    teacher = build(ModelSpec("mlp", 1, 2, (6,), 4, init_seed=int(rng.integers(1 << 16))))
    x = rng.standard_normal((8, 6))
    labels = rng.integers(0, 4, size=8)
    cfg = DistillConfig(alpha=0.9, temperature=float(rng.choice(TEMPERATURES)))
    t_out = (forward(teacher, x)[0].data, [])
    student = build(spec)
    with_param = _frozen_but(student, "block0.weight")
    f = lambda w: composite_loss(forward(with_param(w), x), t_out, labels, cfg, epoch=0)  # noqa: E731
    return f, student.params["block0.weight"].data.astype(np.float64)


def _composite_at_case(rng: np.random.Generator):
    """CE + KD + attention transfer for a convnet student, as a function of its conv kernel."""
    spec = ModelSpec("convnet", 1, 1, (1, 6, 6), 3, init_seed=int(rng.integers(1 << 16)))
    teacher = build(ModelSpec("convnet", 1, 2, (1, 6, 6), 3, init_seed=int(rng.integers(1 << 16))))
    x = rng.standard_normal((4, 1, 6, 6))
    labels = rng.integers(0, 3, size=4)
    cfg = DistillConfig(alpha=0.9, temperature=float(rng.choice(TEMPERATURES)), at_beta=1000.0)
    t_logits, t_maps = forward(teacher, x)
    t_out = (t_logits.data, [m.data for m in t_maps])
    student = build(spec)
    with_param = _frozen_but(student, "block0.weight")
    f = lambda k: composite_loss(forward(with_param(k), x), t_out, labels, cfg, epoch=0)  # noqa: E731
    return f, student.params["block0.weight"].data.astype(np.float64)


GRAD_OPS = (
    "add", "sub", "mul", "scale", "exp", "relu", "add_bias", "sum", "mean", "reshape", "pick",
    "matmul", "matmul_rhs", "conv2d", "conv2d_kernel", "avgpool2d", "log_softmax", "normalize_rows",
    "composite_loss",
)
# The attention term's L2 normalisation has enough curvature that central
# differences at h=1e-3 carry ~1e-4 truncation error on small gradient
# components; the check is run with a finer step.
AT_CHECK_H = 1e-4


def grad_check(op: str, seeds: int = FD_SEEDS, h: float = FD_H, tol: float = FD_TOL) -> CheckResult:
    worst, skipped = 0.0, 0
    for seed in range(seeds):
        rng = np.random.default_rng([seed, len(op)])
        with ad.default_dtype(np.float64):
            f, point = _case(op, rng)
        rep = finite_diff_check(f, point, h=h, tol=tol)
        worst = max(worst, rep.max_rel_error)
        skipped += len(rep.flagged)
    return CheckResult(f"grad/{op}", worst <= tol, worst, tol,
                       f"{seeds} instances, h={h:g}, {skipped} kink coords skipped")


# loss identities -----------------------------------------------------------

KdFn = Callable[[Tensor, object, float], Tensor]


def kd_self_identity(kd_fn: KdFn = kd_loss, rows: int = 64, classes: int = 10, tol: float = 1e-6) -> CheckResult:
    """KD against itself equals τ² times the entropy of the softened targets."""
    rng = np.random.default_rng(7)
    worst = 0.0
    for tau in TEMPERATURES:
        z = 3 * rng.standard_normal((rows, classes))
        with ad.default_dtype(np.float64):
            got = kd_fn(Tensor(z), z, tau).data.item()
            want = tau**2 * float(entropy(soften(Tensor(z), tau).data).mean())
        worst = max(worst, abs(got - want) / max(abs(want), 1e-12))
    return CheckResult("loss/kd_self_entropy", worst <= tol, worst, tol, f"tau in {TEMPERATURES}")


def argmax_invariance(rows: int = 1000, classes: int = 10) -> CheckResult:
    rng = np.random.default_rng(11)
    z = 4 * rng.standard_normal((rows, classes))
    base = z.argmax(axis=1)
    mismatches = sum(int((soften(Tensor(z), t).data.argmax(axis=1) != base).sum()) for t in TEMPERATURES)
    return CheckResult("loss/soften_argmax", mismatches == 0, float(mismatches), 0, f"{rows} rows x {len(TEMPERATURES)} tau")


def ce_only_identity() -> CheckResult:
    """With alpha=1 the composite objective is bitwise the cross-entropy."""
    from .losses import ce_loss

    rng = np.random.default_rng(3)
    z = Tensor(rng.standard_normal((16, 5)))
    y = rng.integers(0, 5, size=16)
    a = composite_loss((z, []), None, y, DistillConfig(alpha=1.0), epoch=0).data
    b = ce_loss(z, y).data
    same = a.tobytes() == b.tobytes()
    return CheckResult("loss/alpha1_is_ce", same, abs(a.item() - b.item()), 0, "bitwise")


def kd_lower_bound(kd_fn: KdFn = kd_loss) -> CheckResult:
    """KD never falls below its value at a perfect match (Gibbs' inequality)."""
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(50):
        t = 3 * rng.standard_normal((8, 6))
        s = 3 * rng.standard_normal((8, 6))
        with ad.default_dtype(np.float64):
            floor = kd_fn(Tensor(t), t, 4.0).data.item()
            val = kd_fn(Tensor(s), t, 4.0).data.item()
        worst = max(worst, floor - val)
    return CheckResult("loss/kd_lower_bound", worst <= 1e-9, worst, 1e-9, "50 random pairs")


# metric oracles ------------------------------------------------------------

def _oracle_models():
    data = gen_gaussian_mixture(K=10, dims=8, per_class=100, spread=1.0, seed=4)
    a = build(ModelSpec("mlp", 1, 1, (8,), 10, init_seed=1))
    b = build(ModelSpec("mlp", 2, 2, (8,), 10, init_seed=2))
    return data, a, b


def kd_error_oracle() -> CheckResult:
    data, a, b = _oracle_models()
    streamed = kd_error(a, b, data, batch_size=37)
    brute = float((predict_logits(a, data.inputs, len(data)).argmax(1) != predict_logits(b, data.inputs, len(data)).argmax(1)).mean())
    self_err = kd_error(a, a, data)
    ok = streamed == brute and self_err == 0.0
    return CheckResult("metric/kd_error", ok, abs(streamed - brute) + self_err, 0, f"{len(data)} samples, exact")


def topk_oracle() -> CheckResult:
    rng = np.random.default_rng(9)
    z = rng.integers(0, 4, size=(500, 10)).astype(np.float64)  # many ties
    y = rng.integers(0, 10, size=500)
    bad = 0
    for k in (1, 5):
        brute = np.array([y[i] in sorted(range(10), key=lambda c: (-z[i, c], c))[:k] for i in range(len(y))])
        bad += int((topk_correct(z, y, k) != brute).sum())
    return CheckResult("metric/topk", bad == 0, float(bad), 0, "ties broken by lowest index")


def ensemble_singleton() -> CheckResult:
    data, a, _ = _oracle_models()
    same = np.array_equal(ensemble_predict([a], data.inputs).argmax(1), predict_logits(a, data.inputs).argmax(1))
    return CheckResult("metric/ensemble_singleton", same, 0.0 if same else 1.0, 0, "argmax of one-member ensemble")


def run_checks(kd_fn: KdFn = kd_loss, grad_seeds: int = FD_SEEDS) -> list[CheckResult]:
    out = [grad_check(op, seeds=grad_seeds) for op in GRAD_OPS]
    out.append(grad_check("composite_loss_at", seeds=grad_seeds, h=AT_CHECK_H))
    out += [kd_self_identity(kd_fn), kd_lower_bound(kd_fn), argmax_invariance(), ce_only_identity()]
    out += [kd_error_oracle(), topk_oracle(), ensemble_singleton()]
    return out


def report(results: list[CheckResult], elapsed: float | None = None) -> str:
    lines = [r.line() for r in results]
    passed = sum(r.passed for r in results)
    tail = f"{passed}/{len(results)} checks passed"
    if elapsed is not None:
        tail += f" in {elapsed:.1f}s"
    return "\n".join(lines + [tail]) + "\n"


def main_verify() -> tuple[bool, str]:
    t0 = time.perf_counter()
    results = run_checks()
    return all(r.passed for r in results), report(results, time.perf_counter() - t0)
