"""Independent reference implementations used by the tests."""

import itertools

import numpy as np
import torch
from torch.func import functional_call, vmap


def central_difference_grads(module, loss_fn, h=1e-6, chunk=512, names=None):
    """Central finite-difference gradient of ``loss_fn(params)`` for every element
    of the selected parameters of ``module``.

    ``loss_fn`` receives a name -> tensor dict (all parameters and buffers) and
    must be a pure function of it. Perturbed copies are evaluated in batches
    with ``vmap``. Returns name -> gradient tensor.
    """
    state = {k: v.detach() for k, v in itertools.chain(module.named_parameters(), module.named_buffers())}
    names = names or [k for k, p in module.named_parameters() if p.requires_grad]
    shapes = [state[k].shape for k in names]
    sizes = [state[k].numel() for k in names]
    flat = torch.cat([state[k].reshape(-1) for k in names])

    def f(vec):
        params = dict(state)
        for k, piece, shape in zip(names, torch.split(vec, sizes), shapes):
            params[k] = piece.reshape(shape)
        return loss_fn(params)

    fb = vmap(f)
    out = torch.empty_like(flat)
    eye_rows = torch.arange(flat.numel())
    for start in range(0, flat.numel(), chunk):
        idx = eye_rows[start : start + chunk]
        delta = torch.zeros(idx.numel(), flat.numel(), dtype=flat.dtype)
        delta[torch.arange(idx.numel()), idx] = h
        base = flat[None].expand_as(delta)
        out[idx] = (fb(base + delta) - fb(base - delta)) / (2 * h)
    return {k: g.reshape(s) for k, g, s in zip(names, torch.split(out, sizes), shapes)}


def analytic_grads(module, loss_fn, names=None):
    state = dict(itertools.chain(module.named_parameters(), module.named_buffers()))
    names = names or [k for k, p in module.named_parameters() if p.requires_grad]
    params = {k: (v.detach().requires_grad_(k in names)) for k, v in state.items()}
    loss = loss_fn(params)
    grads = torch.autograd.grad(loss, [params[k] for k in names], allow_unused=True)
    return {k: (torch.zeros_like(params[k]) if g is None else g) for k, g in zip(names, grads)}


def relative_errors(a, b, floor=1e-8):
    """Elementwise |a - b| / max(|a|, |b|, floor) over matching dicts, flattened."""
    errs = []
    for k in a:
        x, y = a[k].reshape(-1), b[k].reshape(-1)
        errs.append((x - y).abs() / torch.clamp(torch.maximum(x.abs(), y.abs()), min=floor))
    return torch.cat(errs)


def call(module, params, *args, **kwargs):
    return functional_call(module, params, args, kwargs)


def all_alignments(L, N):
    """Every monotone surjective frame -> token map with unit steps."""
    for cuts in itertools.combinations(range(1, N), L - 1):
        bounds = (0, *cuts, N)
        yield np.repeat(np.arange(L), np.diff(bounds))


def random_alignment(L, N, rng):
    cuts = np.sort(rng.choice(np.arange(1, N), size=L - 1, replace=False))
    return np.repeat(np.arange(L), np.diff((0, *cuts, N)))


def frechet_gaussian(mu_a, cov_a, mu_b, cov_b):
    """Closed form via eigen-decomposition of sqrt(A) B sqrt(A)."""
    w, v = np.linalg.eigh(cov_a)
    sa = (v * np.sqrt(np.clip(w, 0, None))) @ v.T
    m = sa @ cov_b @ sa
    tr_sqrt = np.sqrt(np.clip(np.linalg.eigvalsh((m + m.T) / 2), 0, None)).sum()
    return float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_sqrt)
