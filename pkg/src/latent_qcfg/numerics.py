"""Log-space reductions and the gradient contract.

Dense tensors and reverse-mode differentiation are provided by torch;
this module pins down the conventions the rest of the package relies on
and supplies the verification oracle for the gradient contract:

* all chart arithmetic runs in float64 (``DTYPE``); -inf is the
  canonical mask value and NaN never appears in a valid chart;
* ``Parameter`` is ``torch.nn.Parameter``; gradients accumulate
  additively into ``.grad`` until explicitly zeroed, and accumulation
  into shared parameters is serialized by the caller (the training loop
  runs accumulation single-threaded);
* ``finite_diff_check`` is the acceptance oracle for every analytic
  gradient in the package.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import torch

DTYPE = torch.float64
NEG_INF = float("-inf")

# Internal stand-in for -inf inside differentiable log-space reductions:
# a true -inf entering a logsumexp whose whole group is impossible yields
# NaN gradients, while -1e30 underflows to an exact zero weight.  Values
# at or below NEG_THRESHOLD are reported as -inf at module boundaries.
NEG_BIG = -1e30
NEG_THRESHOLD = -1e25


def is_log_zero(value: float) -> bool:
    """True if a log-space value means probability zero."""
    return value <= NEG_THRESHOLD

Parameter = torch.nn.Parameter


class NumericsError(ValueError):
    pass


def as_tensor(values) -> torch.Tensor:
    return torch.as_tensor(values, dtype=DTYPE)


def log_sum_exp(values, dim: int | None = None) -> torch.Tensor:
    """log sum exp with max-shift; -inf is the identity element.

    With ``dim`` None the input is treated as one flat group and must be
    non-empty.
    """
    t = torch.as_tensor(values, dtype=DTYPE) if not torch.is_tensor(values) else values
    if dim is None:
        if t.numel() == 0:
            raise NumericsError("log_sum_exp of empty input")
        return torch.logsumexp(t.reshape(-1), dim=0)
    if t.shape[dim] == 0:
        raise NumericsError("log_sum_exp over empty dimension")
    return torch.logsumexp(t, dim=dim)


def masked_log_softmax(logits: torch.Tensor, mask: torch.Tensor, dims: Sequence[int]) -> torch.Tensor:
    """Log-softmax over the unmasked entries of each normalization group.

    ``dims`` are the axes that jointly form a normalization group; the
    remaining axes index the groups.  Masked entries come out as -inf and
    receive exactly zero gradient.  A fully masked group raises, since it
    signals an over-constrained rule set.
    """
    if logits.shape != mask.shape:
        raise NumericsError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(mask.shape)}")
    dims = tuple(d % logits.dim() for d in dims)
    filled = logits.masked_fill(~mask, NEG_INF)
    log_z = torch.logsumexp(filled, dim=dims, keepdim=True)
    if torch.isneginf(log_z).any():
        raise NumericsError("fully masked normalization group")
    out = filled - log_z
    return out.masked_fill(~mask, NEG_INF)


def gradients(scalar: torch.Tensor, params: Iterable[Parameter]) -> None:
    """Accumulate d(scalar)/d(param) into each parameter's .grad slot."""
    if scalar.numel() != 1:
        raise NumericsError("backward requires a scalar")
    if not scalar.requires_grad:
        return  # constant w.r.t. every parameter; gradients are zero
    scalar.backward(inputs=list(params))


def zero_gradients(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None


def finite_diff_check(
    fn: Callable[[], torch.Tensor],
    params: Sequence[Parameter],
    epsilon: float = 1e-4,
    max_coords_per_param: int | None = None,
) -> float:
    """Max relative error of analytic gradients vs central differences.

    ``fn`` must be deterministic in the parameters.  The relative error
    for a coordinate is |analytic - central| / max(1, |central|).  Set
    ``max_coords_per_param`` to subsample coordinates (evenly strided)
    when a parameter is large.
    """
    if epsilon <= 0:
        raise NumericsError("epsilon must be positive")
    zero_gradients(params)
    value = fn()
    if not torch.isfinite(value):
        raise NumericsError(f"non-finite function value {value.item()}")
    gradients(value, params)
    analytic = [
        (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for p in params
    ]
    max_err = 0.0
    with torch.no_grad():
        for p, grad in zip(params, analytic):
            flat = p.reshape(-1)
            n = flat.numel()
            if max_coords_per_param is not None and n > max_coords_per_param:
                stride = max(1, n // max_coords_per_param)
                coords = range(0, n, stride)
            else:
                coords = range(n)
            gflat = grad.reshape(-1)
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + epsilon
                up = fn().item()
                flat[i] = orig - epsilon
                down = fn().item()
                flat[i] = orig
                central = (up - down) / (2 * epsilon)
                err = abs(gflat[i].item() - central) / max(1.0, abs(central))
                max_err = max(max_err, err)
    zero_gradients(params)
    return max_err
