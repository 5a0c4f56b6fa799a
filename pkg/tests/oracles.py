"""Independent numerical oracles: central differences and dense Jacobians."""

from __future__ import annotations

import numpy as np
import torch

from referee.t2s import cln


def central_difference(f, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Gradient of scalar ``f`` at ``x`` by central differences, entry by entry."""
    g = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        g.view(-1)[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


def cln_gradient_errors(seed: int, n: int = 5, hidden: int = 8, style_dim: int = 4) -> tuple[float, float]:
    """Relative errors of autograd vs finite differences for d(w . cln)/dx and d/dstyle."""
    g = torch.Generator().manual_seed(seed)
    kw = dict(dtype=torch.float64, generator=g)
    x = torch.randn(n, hidden, **kw) * 2 + 0.5
    s = torch.randn(style_dim, **kw)
    ws, bs = torch.randn(hidden, style_dim, **kw), torch.randn(hidden, **kw)
    wt, bt = torch.randn(hidden, style_dim, **kw), torch.randn(hidden, **kw)
    w = torch.randn(n, hidden, **kw)

    def loss(xx, ss):
        return (w * cln(xx, ss, ws, bs, wt, bt)).sum()

    xa, sa = x.clone().requires_grad_(True), s.clone().requires_grad_(True)
    loss(xa, sa).backward()
    with torch.no_grad():
        gx = central_difference(lambda: loss(x, s), x)
        gs = central_difference(lambda: loss(x, s), s)
    return rel_error(xa.grad, gx), rel_error(sa.grad, gs)


def numeric_jacobian(f, x: torch.Tensor, h: float = 1e-6) -> np.ndarray:
    """Dense Jacobian of vector ``f`` (flattened) at ``x`` by central differences."""
    x = x.detach().clone()
    flat = x.view(-1)
    cols = []
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        fp = f(x).reshape(-1).detach().clone()
        flat[i] = orig - h
        fm = f(x).reshape(-1).detach().clone()
        flat[i] = orig
        cols.append(((fp - fm) / (2 * h)).numpy())
    return np.stack(cols, axis=1)


def randomize_couplings(model, std: float, seed: int) -> None:
    """Give every coupling a non-identity output layer."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for layer in model.flow.layers:
            layer.post.weight.copy_(torch.randn(layer.post.weight.shape, generator=g) * std)
            layer.post.bias.copy_(torch.randn(layer.post.bias.shape, generator=g) * std)
