"""Independent reference computations shared by the test modules."""
from __future__ import annotations

import numpy as np
import torch


def cylinder_elements(radius: float, length: float, n_r: int = 40, n_theta: int = 64, n_z: int = 40) -> np.ndarray:
    """Centres of equal-volume cells filling a cylinder along +z, centred on the origin."""
    r = radius * np.sqrt((np.arange(n_r) + 0.5) / n_r)
    theta = (np.arange(n_theta) + 0.5) * 2 * np.pi / n_theta
    z = (np.arange(n_z) + 0.5) / n_z * length - length / 2
    rr, tt, zz = np.meshgrid(r, theta, z, indexing="ij")
    return np.stack([rr * np.cos(tt), rr * np.sin(tt), zz], axis=-1).reshape(-1, 3)


def _frame(heading):
    """Rotation taking e_z to ``heading``."""
    h = np.asarray(heading, dtype=np.float64)
    h = h / np.linalg.norm(h)
    a = np.array([1.0, 0.0, 0.0]) if abs(h[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(a, h)
    u /= np.linalg.norm(u)
    v = np.cross(h, u)
    return np.stack([u, v, h], axis=1)


def discretized_cylinder_field(position, heading, bt, radius, length, point, elements=None) -> np.ndarray:
    """Superpose one small dipole per volume cell; total strength ``bt`` shared equally.

    Each cell uses the textbook point-dipole expression written out from
    mu0/(4 pi) (3 (m.r) r / r^5 - m / r^3); nothing from the package is used.
    """
    if elements is None:
        elements = cylinder_elements(radius, length)
    rot = _frame(heading)
    h = rot[:, 2]
    centres = np.asarray(position, dtype=np.float64) + elements @ rot.T
    d = np.asarray(point, dtype=np.float64)[None, :] - centres
    r2 = np.einsum("ij,ij->i", d, d)
    r = np.sqrt(r2)
    dot = d @ h
    per = (3.0 * dot / (r2 * r2 * r))[:, None] * d - (h[None, :] / (r2 * r)[:, None])
    return bt / len(elements) * per.sum(axis=0)


def central_difference(fn, x, eps):
    """d fn / dx by central differences; fn returns an array, result has shape fn(x).shape + x.shape."""
    x = np.asarray(x, dtype=np.float64)
    f0 = np.asarray(fn(x))
    out = np.zeros(f0.shape + x.shape)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        out[(Ellipsis,) + idx] = (np.asarray(fn(xp)) - np.asarray(fn(xm))) / (2 * eps)
    return out


def random_unit(rng, n=None):
    v = rng.normal(size=(3,) if n is None else (n, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def fd_check(fn, inputs, eps=1e-6, seed=0):
    """Relative error between autograd and central differences of a random projection of ``fn``."""
    inputs = [t.detach().clone().double().requires_grad_(True) for t in inputs]
    out = fn(*inputs)
    w = torch.randn(out.shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    grads = torch.autograd.grad((out * w).sum(), inputs)
    worst = 0.0
    for k, x in enumerate(inputs):
        fd = torch.zeros_like(x)
        flat = x.detach().view(-1)
        for i in range(flat.numel()):
            args_p = [t.detach().clone() for t in inputs]
            args_m = [t.detach().clone() for t in inputs]
            args_p[k].view(-1)[i] += eps
            args_m[k].view(-1)[i] -= eps
            with torch.no_grad():
                fd.view(-1)[i] = ((fn(*args_p) * w).sum() - (fn(*args_m) * w).sum()) / (2 * eps)
        denom = max(fd.norm().item(), grads[k].norm().item(), 1e-12)
        worst = max(worst, (grads[k] - fd).norm().item() / denom)
    return worst


def posenet_loss_gradient_error(n_params: int = 50, eps: float = 1e-6) -> float:
    """Relative error of f32 autograd loss gradients against f64 central differences on sampled parameters."""
    from magpose.posenet import build_model, pose_loss

    torch.manual_seed(0)
    model32 = build_model(seed=5)
    model32.train()
    model64 = build_model(seed=5).double()
    model64.train()
    x = torch.randn(8, 6, 4, 4, generator=torch.Generator().manual_seed(1))
    tp = torch.rand(8, 3, generator=torch.Generator().manual_seed(2)) * 2 - 1
    th = torch.nn.functional.normalize(torch.randn(8, 3, generator=torch.Generator().manual_seed(3)), dim=1)

    loss = pose_loss(*model32(x), tp, th)
    params32 = dict(model32.named_parameters())
    grads = dict(zip(params32, torch.autograd.grad(loss, list(params32.values()))))

    params64 = dict(model64.named_parameters())
    names = list(params64)
    rng = np.random.default_rng(4)
    picks = []
    for _ in range(n_params):
        name = names[rng.integers(len(names))]
        picks.append((name, int(rng.integers(params64[name].numel()))))

    def loss64():
        with torch.no_grad():
            return pose_loss(*model64(x.double()), tp.double(), th.double()).item()

    analytic, numeric = [], []
    for name, i in picks:
        flat = params64[name].data.view(-1)
        orig = flat[i].item()
        flat[i] = orig + eps
        lp = loss64()
        flat[i] = orig - eps
        lm = loss64()
        flat[i] = orig
        numeric.append((lp - lm) / (2 * eps))
        analytic.append(grads[name].view(-1)[i].item())
    analytic, numeric = np.array(analytic), np.array(numeric)
    rel = np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)
    return float(rel)
