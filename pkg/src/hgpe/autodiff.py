"""Reverse-mode gradients over a ParamStore and central finite-difference checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ops
from .nn import ParamStore
from .tensor import GradTape, Tensor


def backward(tape: GradTape, loss: Tensor, params: ParamStore) -> dict[str, Tensor]:
    """Gradient of a scalar ``loss`` for every trainable entry of ``params``.

    Parameters the loss does not reach get zero gradients.
    """
    named = params.trainable()
    grads = tape.gradient(loss, [t for _, t in named])
    return {name: Tensor(g) for (name, _), g in zip(named, grads)}


@dataclass
class GradCheckReport:
    name: str
    errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-5
    rejected: int = 0

    @property
    def max_error(self) -> float:
        vals = list(self.errors.values())
        if any(np.isnan(v) for v in vals):
            return float("nan")
        return max(vals, default=0.0)

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error)) and self.max_error < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<28} max rel err {self.max_error:.3e} (tol {self.tol:g})"


GRAD_FLOOR = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    """max |a - n| over the larger of the two gradients' max magnitudes.

    The denominator never drops below ``floor``, so structurally zero
    gradients (e.g. a bias feeding a normalization) are judged against
    finite-difference round-off rather than divided by it.
    """
    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)),
                floor)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def _probe_indices(size: int, max_entries: int | None, rng: np.random.Generator) -> np.ndarray:
    if max_entries is None or size <= max_entries:
        return np.arange(size)
    return np.sort(rng.choice(size, max_entries, replace=False))


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[tuple[str, Tensor]],
                    eps: float = 1e-4, tol: float = 1e-5, name: str = "op",
                    max_entries: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare tape gradients with central differences of ``fn``.

    ``fn`` is re-evaluated with perturbed tensor data; non-scalar outputs are
    reduced with a fixed random projection. ``max_entries`` caps the number of
    probed entries per tensor (drawn at random). A probe whose +eps and -eps
    evaluations put some relu6/h_swish input on a different linear piece than
    the unperturbed point straddles a kink; it is rejected and, when sampling,
    replaced by another entry.
    """
    rng = np.random.default_rng(seed)
    probe: np.ndarray | None = None

    def scalar(out: Tensor) -> Tensor:
        nonlocal probe
        if out.size == 1:
            return out.reshape(())
        if probe is None:
            probe = np.random.default_rng(seed + 7919).standard_normal(out.shape)
        return (out * probe).sum()

    for _, t in tensors:
        t.requires_grad = True
        t.data = np.ascontiguousarray(t.data)
    with ops.kink_monitor() as base:
        with GradTape() as tape:
            loss = scalar(fn())
    analytic = tape.gradient(loss, [t for _, t in tensors])

    def f() -> tuple[float, str]:
        with ops.kink_monitor() as mon:
            value = float(scalar(fn()).data)
        return value, mon["signature"]

    report = GradCheckReport(name, tol=tol)
    for (tname, t), a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        order = np.arange(t.size) if max_entries is None else rng.permutation(t.size)
        want = t.size if max_entries is None else min(max_entries, t.size)
        idx, num = [], []
        for i in order:
            if len(idx) == want:
                break
            orig = flat[i]
            flat[i] = orig + eps
            fp, sp = f()
            flat[i] = orig - eps
            fm, sm = f()
            flat[i] = orig
            if sp != base["signature"] or sm != base["signature"]:
                report.rejected += 1
                continue
            idx.append(i)
            num.append((fp - fm) / (2 * eps))
        # nan marks a tensor with no usable probe, which fails the report
        report.errors[tname] = (relative_error(a.reshape(-1)[idx], np.array(num)) if idx
                                else float("nan"))
    return report


def sample_away_from_kinks(shape, rng: np.random.Generator, eps: float, scale: float = 2.0,
                           kinks: Sequence[float] = (-3.0, 0.0, 3.0, 6.0)) -> np.ndarray:
    """Uniform samples in [-scale*2, scale*2], redrawn within 10*eps of a kink."""
    x = rng.uniform(-2 * scale, 2 * scale, size=shape)
    for _ in range(100):
        bad = np.zeros(x.shape, bool)
        for k in kinks:
            bad |= np.abs(x - k) < 10 * eps
        if not bad.any():
            break
        x[bad] = rng.uniform(-2 * scale, 2 * scale, size=int(bad.sum()))
    return x


def grad_check(fn: Callable[..., Tensor], shapes: Sequence[tuple[int, ...]], seed: int = 0,
               eps: float = 1e-4, tol: float = 1e-5, name: str = "op",
               max_entries: int | None = None, retries: int = 20) -> GradCheckReport:
    """Finite-difference check of ``fn(*inputs)`` on random float64 inputs.

    Inputs are redrawn until every piecewise-linear activation evaluated by
    ``fn`` sits at least 10*eps away from its kinks.
    """
    rng = np.random.default_rng(seed)
    for _ in range(retries):
        inputs = [Tensor(sample_away_from_kinks(s, rng, eps)) for s in shapes]
        with ops.kink_monitor() as mon:
            fn(*inputs)
        if mon["min_distance"] > 10 * eps:
            break
    else:
        raise RuntimeError(f"{name}: could not sample inputs away from activation kinks")
    named = [(f"input{i}", t) for i, t in enumerate(inputs)]
    return check_gradients(lambda: fn(*inputs), named, eps, tol, name, max_entries, seed)


# ---------------------------------------------------------------------------
# loss and optimizers
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels, label_smoothing: float = 0.0) -> Tensor:
    """Mean smoothed negative log-likelihood over the batch.

    The target puts ``1 - s`` on the label and ``s / K`` on every class.
    """
    if logits.ndim != 2:
        raise ValueError(f"logits must be N x K, got shape {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ValueError(f"{labels.shape[0]} labels for a batch of {n}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    target = np.full((n, k), label_smoothing / k)
    target[np.arange(n), labels] += 1.0 - label_smoothing
    logp = ops.log_softmax_lastdim(logits)
    return -(logp * target.astype(logits.dtype)).sum() * (1.0 / n)


@dataclass
class OptimState:
    kind: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    momentum: float = 0.0
    step: int = 0
    slots: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)


def optimizer_step(params: ParamStore, grads: dict[str, Tensor], state: OptimState) -> None:
    """Apply one SGD or AdamW update to every trainable entry, in place.

    AdamW decay is decoupled: ``p -= lr * wd * p`` before the Adam step.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.betas
    for name, p in params.trainable():
        g = grads[name].data
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        slot = state.slots.setdefault(name, {})
        if state.kind == "sgd":
            if state.weight_decay:
                g = g + state.weight_decay * p.data
            if state.momentum:
                buf = slot.get("momentum")
                buf = g.copy() if buf is None else state.momentum * buf + g
                slot["momentum"] = buf
                g = buf
            p.data = p.data - state.lr * g
        elif state.kind == "adamw":
            m = slot.get("m", np.zeros_like(p.data))
            v = slot.get("v", np.zeros_like(p.data))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            slot["m"], slot["v"] = m, v
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            new = p.data * (1 - state.lr * state.weight_decay)
            p.data = new - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        else:
            raise ValueError(f"unknown optimizer {state.kind!r}")
