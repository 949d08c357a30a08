"""Central finite-difference checks for autodiff gradients."""

from __future__ import annotations

import numpy as np

from .tensor import FrozenTape, Tensor, frozen_tape, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true gradient is ~0 from dividing
    round-off noise by round-off noise.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _select(size: int, limit: int | None, seed: int) -> np.ndarray:
    if limit is None or size <= limit:
        return np.arange(size)
    return np.sort(np.random.default_rng(seed).choice(size, size=limit, replace=False))


def finite_diff_gradcheck(f, inputs, step: float = 1e-5, max_elems: int | None = None,
                          floor: float = 1e-6, return_details: bool = False):
    """Compare autodiff gradients of scalar ``f()`` against central differences.

    ``inputs`` is a Tensor or a list of Tensors that ``f`` reads; they are
    perturbed in place and restored.  Stop-gradient values and discrete
    choices (code indices, straight-through offsets) are recorded on the base
    pass and replayed for every perturbed evaluation, so the numeric
    derivative is taken of the same surrogate autodiff differentiates.

    ``max_elems`` caps the number of probed elements per input tensor.
    Returns the maximum relative error, or ``(max_err, per_input_errors)``.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for x in inputs:
        x.requires_grad = True
        x.grad = None

    tape = FrozenTape()
    with frozen_tape(tape):
        loss = f()
    loss.backward()
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]
    tape.rewind()

    def value():
        with frozen_tape(tape), no_grad():
            return float(f().data)

    per_input = []
    for k, x in enumerate(inputs):
        flat = x.data.reshape(-1)
        errs = []
        for i in _select(flat.size, max_elems, k):
            orig = flat[i]
            flat[i] = orig + step
            fp = value()
            flat[i] = orig - step
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            errs.append(relative_error(analytic[k].reshape(-1)[i], num, floor))
        per_input.append(float(np.max(errs)) if errs else 0.0)
    worst = max(per_input) if per_input else 0.0
    return (worst, per_input) if return_details else worst
