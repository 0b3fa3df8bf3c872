"""Central finite-difference check of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .layers import Dropout, Layer, ReLU, Sequential, make_rng
from .losses import cross_entropy_loss, mse_loss

# Entries whose analytic and numeric gradients are both below this are compared
# absolutely (tolerance * floor = 1e-10 at the default tolerance), which sits
# above the ~1e-11 round-off of a float64 central difference at eps=1e-5 on an
# O(1) loss. Exactly-zero gradients (a conv bias feeding batchnorm) need it.
DENOMINATOR_FLOOR = 1e-6


class GradCheckError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    name: str
    tolerance: float
    epsilon: float
    errors: dict[str, float] = field(default_factory=dict)
    n_checked: dict[str, int] = field(default_factory=dict)
    n_skipped: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def lines(self) -> list[str]:
        out = []
        for key, err in self.errors.items():
            flag = "ok" if err <= self.tolerance else "FAIL"
            skipped = self.n_skipped.get(key, 0)
            note = f" skipped_at_kinks={skipped}" if skipped else ""
            out.append(f"{self.name}:{key} n={self.n_checked[key]}{note} max_rel_err={err:.3e} {flag}")
        return out

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name} max_rel_err={self.max_error:.3e} (tol {self.tolerance:g})"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), DENOMINATOR_FLOOR)
    return np.abs(analytic - numeric) / denom


def check_gradients(
    loss_fn: Callable[[], float],
    tensors: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
    name: str = "check",
    signature: Callable[[], bytes] | None = None,
) -> GradCheckReport:
    """Compare ``analytic[k]`` with central differences of ``loss_fn`` in ``tensors[k]``.

    ``tensors`` are perturbed in place and restored. ``max_entries`` caps how
    many coordinates per tensor are probed (sampled without replacement).

    ``signature`` returns the activation pattern of the piecewise-linear units
    after the latest ``loss_fn`` call. A coordinate whose +/-eps probes change
    the pattern straddles a kink, where the function has no derivative; it is
    skipped, counted in ``n_skipped`` and replaced by another coordinate.
    """
    rng = make_rng(seed)
    report = GradCheckReport(name, tolerance, epsilon)
    base_loss = loss_fn()
    if not np.isfinite(base_loss):
        raise GradCheckError("non-finite loss at the unperturbed point")
    base_sig = signature() if signature else None
    for key, arr in tensors.items():
        a = analytic[key]
        if a.shape != arr.shape:
            raise GradCheckError(f"{key}: gradient shape {a.shape} != tensor shape {arr.shape}")
        if not np.all(np.isfinite(a)):
            raise GradCheckError(f"non-finite analytic gradient in {key}")
        if not np.all(np.isfinite(arr)):
            raise GradCheckError(f"non-finite values in {key}")
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise GradCheckError(f"{key} is not contiguous")
        n = flat.size
        want = n if max_entries is None else min(n, max_entries)
        order = np.arange(n) if want == n else rng.permutation(n)
        used, numeric, skipped = [], [], 0
        for i in order:
            if len(used) == want:
                break
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = loss_fn()
            kink = base_sig is not None and signature() != base_sig
            flat[i] = orig - epsilon
            fm = loss_fn()
            kink = kink or (base_sig is not None and signature() != base_sig)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradCheckError(f"non-finite loss while perturbing {key}")
            if kink:
                skipped += 1
                continue
            used.append(i)
            numeric.append((fp - fm) / (2 * epsilon))
        errs = relative_error(a.reshape(-1)[used], np.array(numeric))
        report.errors[key] = float(errs.max()) if errs.size else 0.0
        report.n_checked[key] = len(used)
        report.n_skipped[key] = skipped
    return report


def _dropout_rngs(target) -> list[np.random.Generator]:
    layers = [layer for _, layer in target] if isinstance(target, Sequential) else [target]
    rngs = []
    for layer in layers:
        if isinstance(layer, Dropout) and all(layer.rng is not r for r in rngs):
            rngs.append(layer.rng)
    return rngs


def _relu_layers(target) -> list[ReLU]:
    layers = [layer for _, layer in target] if isinstance(target, Sequential) else [target]
    return [layer for layer in layers if isinstance(layer, ReLU)]


def _buffers(target) -> list[dict]:
    layers = [layer for _, layer in target] if isinstance(target, Sequential) else [target]
    return [layer.buffers for layer in layers]


def grad_check(
    target: Layer | Sequential,
    x: np.ndarray,
    targets=None,
    loss: str = "mse",
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
    name: str | None = None,
) -> GradCheckReport:
    """Check every parameter of ``target`` and the input ``x``.

    ``loss="mse"`` compares the whole output with ``targets`` (random if None);
    ``loss="ce"`` treats the output as logits and ``targets`` as class indices.
    Dropout masks are frozen by replaying the generator state before every
    forward, and batchnorm running statistics are restored afterwards.
    Coordinates whose probes cross a ReLU kink are skipped (see
    :func:`check_gradients`).
    """
    x = np.array(x, dtype=np.float64)
    params = target.parameters() if isinstance(target, Sequential) else dict(target.params)
    rngs = _dropout_rngs(target)
    rng_states = [r.bit_generator.state for r in rngs]
    saved_buffers = [{k: v.copy() for k, v in b.items()} for b in _buffers(target)]

    def run():
        for r, s in zip(rngs, rng_states):
            r.bit_generator.state = s
        return target.forward(x)

    out = run()
    if loss == "mse":
        if targets is None:
            targets = make_rng(seed + 1).standard_normal(out.shape)
        t = np.asarray(targets, dtype=np.float64).reshape(-1)

        def loss_of(o):
            return mse_loss(o.reshape(-1), t)
    elif loss == "ce":
        if targets is None:
            targets = make_rng(seed + 1).integers(0, out.shape[1], out.shape[0])

        def loss_of(o):
            return cross_entropy_loss(o, targets)
    else:
        raise ValueError(f"unknown loss {loss!r}")

    _, dout = loss_of(out)
    dx = target.backward(dout.reshape(out.shape))
    grads = target.gradients() if isinstance(target, Sequential) else dict(target.grads)
    analytic = {k: np.array(grads[k]) for k in params}
    analytic["input"] = dx

    tensors = dict(params)
    tensors["input"] = x
    relus = _relu_layers(target)

    def signature():
        return b"".join(np.packbits(r._mask).tobytes() for r in relus)

    try:
        return check_gradients(
            lambda: loss_of(run())[0],
            tensors,
            analytic,
            epsilon=epsilon,
            tolerance=tolerance,
            max_entries=max_entries,
            seed=seed,
            name=name or type(target).__name__,
            signature=signature if relus else None,
        )
    finally:
        for store, saved in zip(_buffers(target), saved_buffers):
            store.update(saved)
