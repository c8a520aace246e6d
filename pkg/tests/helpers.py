"""Shared test utilities."""

from __future__ import annotations

import numpy as np
import torch


def fd_check(loss_fn, params, n_samples: int = 60, eps: float = 1e-5, seed: int = 0, floor: float = 1e-5) -> float:
    """Worst relative error between autograd and central finite differences.

    Samples parameter elements uniformly across the given tensors, perturbs
    each by +/- eps, and compares the resulting difference quotient with the
    autograd gradient. Returns the largest relative error observed. Meant for
    float64 models, where eps=1e-5 keeps truncation and roundoff both around
    1e-11 absolute. ``floor`` keeps elements whose gradient sits below it
    from turning that roundoff noise into a huge relative number — they are
    effectively checked at an absolute tolerance of floor * rtol instead.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    flat = [(p, p.grad.detach().reshape(-1)) for p in params if p.grad is not None]
    sizes = np.array([p.numel() for p, _ in flat])
    cum = np.cumsum(sizes)
    rng = np.random.default_rng(seed)
    picks = rng.choice(int(cum[-1]), size=min(n_samples, int(cum[-1])), replace=False)
    worst = 0.0
    for pick in picks:
        ti = int(np.searchsorted(cum, pick, side="right"))
        ei = int(pick - (cum[ti - 1] if ti else 0))
        p, grad = flat[ti]
        view = p.detach().reshape(-1)
        orig = view[ei].item()
        with torch.no_grad():
            view[ei] = orig + eps
            lp = float(loss_fn())
            view[ei] = orig - eps
            lm = float(loss_fn())
            view[ei] = orig
        fd = (lp - lm) / (2.0 * eps)
        ag = float(grad[ei])
        rel = abs(fd - ag) / max(abs(fd), abs(ag), floor)
        worst = max(worst, rel)
    return worst


def fd_grad_wrt_input(loss_fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Dense central-difference gradient of loss_fn() with respect to x."""
    g = torch.zeros_like(x)
    view = x.detach().reshape(-1)
    gview = g.reshape(-1)
    for i in range(view.numel()):
        orig = view[i].item()
        with torch.no_grad():
            view[i] = orig + eps
            lp = float(loss_fn())
            view[i] = orig - eps
            lm = float(loss_fn())
            view[i] = orig
        gview[i] = (lp - lm) / (2.0 * eps)
    return g
