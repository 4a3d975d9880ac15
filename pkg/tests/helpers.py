import numpy as np

from stephys import autograd as ag


# scalar-valued builds exercising each differentiable op; c is a float64 constant
GRADIENT_CASES = {
    "add": (lambda t, c: ag.tsum(ag.mul(ag.add(t, c), ag.add(t, c))), (3, 4)),
    "add_bias": (lambda t, c: ag.tsum(ag.mul(ag.add(c, ag.tsum(t, axis=0)), c)), (3, 4)),
    "sub": (lambda t, c: ag.tsum(ag.mul(ag.sub(c, t), ag.sub(t, 0.3))), (3, 4)),
    "mul": (lambda t, c: ag.tsum(ag.mul(ag.mul(t, c), t)), (3, 4)),
    "matmul": (lambda t, c: ag.tsum(ag.mul(ag.matmul(t, ag.transpose(c, (1, 0))), 1.5)), (3, 4)),
    "relu": (lambda t, c: ag.tsum(ag.mul(ag.relu(t), c)), (3, 4)),
    "clamp": (lambda t, c: ag.tsum(ag.mul(ag.clamp(t, -0.5, 0.5), c)), (3, 4)),
    "mean": (lambda t, c: ag.mean(ag.mul(t, c)), (3, 4)),
    "mean_axis": (lambda t, c: ag.tsum(ag.mul(ag.mean(ag.mul(t, c), axis=0), ag.mean(t, axis=0))), (3, 4)),
    "sum_axis": (lambda t, c: ag.tsum(ag.mul(ag.tsum(t, axis=1), ag.tsum(c, axis=1))), (3, 4)),
    "reshape": (lambda t, c: ag.tsum(ag.mul(ag.reshape(t, (4, 3)), ag.reshape(c, (4, 3)))), (3, 4)),
    "softmax_ce": (lambda t, c: ag.softmax_cross_entropy(ag.mul(t, c), [0, 3, 1]), (3, 4)),
    "softmax_ce_sum": (lambda t, c: ag.softmax_cross_entropy(t, [2, 2, 1], reduction="sum"), (3, 4)),
    "softmax_ce_none": (
        lambda t, c: ag.tsum(ag.mul(ag.softmax_cross_entropy(t, [2, 0, 1], reduction="none"), ag.Tensor([1.0, -2.0, 0.5], dtype=np.float64))),
        (3, 4),
    ),
}



def numeric_grad(fn, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar ``fn`` at ``x`` (float64)."""
    x = x.astype(np.float64).copy()
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn(x)
        flat[i] = old - h
        down = fn(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.abs(a) + np.abs(n)
    keep = denom >= floor
    if not keep.any():
        return 0.0
    return float(np.max(np.abs(a - n)[keep] / denom[keep]))


def analytic_grad(build, x: np.ndarray) -> np.ndarray:
    t = ag.Tensor(x.astype(np.float64), requires_grad=True, dtype=np.float64)
    ag.backward(build(t))
    return t.grad


def check_gradient(build, x: np.ndarray, h: float = 1e-4) -> float:
    """Max relative error between autograd and finite differences of ``build``."""
    analytic = analytic_grad(build, x)

    def scalar(v):
        with ag.no_grad():
            return float(build(ag.Tensor(v, dtype=np.float64)).data)

    return max_rel_error(analytic, numeric_grad(scalar, x, h))


def naive_conv2d(x, w, b=None, stride=1, padding=0):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += xp[ni, ci, i * stride + di, j * stride + dj] * w[oi, ci, di, dj]
                    out[ni, oi, i, j] = acc + (b[oi] if b is not None else 0.0)
    return out


# ------------------------------------------------ straight-through oracles
def substitution_grad_global(pipeline, x, delta, labels, indices):
    """Model input-gradient at the distorted image, masked by the validity clamp."""
    z = x + delta
    distorted = pipeline.distort(np.clip(z, 0.0, 1.0), indices)
    t = ag.Tensor(distorted, requires_grad=True)
    ce = ag.softmax_cross_entropy(pipeline.model.forward(t), labels, reduction="none")
    ag.backward(ag.tsum(ce))
    return t.grad * ((z >= 0.0) & (z <= 1.0))


def substitution_grad_patch(pipeline, x, delta, labels, indices):
    """The same, pulled back through the bilinear warp of the patch."""
    from stephys.render import warp_into

    z = x + delta
    composite = pipeline.composite(np.clip(z, 0.0, 1.0), indices)
    t = ag.Tensor(composite, requires_grad=True)
    ce = ag.softmax_cross_entropy(pipeline.model.forward(t), labels, reduction="none")
    ag.backward(ag.tsum(ce))
    p = ag.Tensor(np.clip(z, 0.0, 1.0), requires_grad=True)
    ag.backward(ag.tsum(ag.mul(warp_into(p, pipeline.backgrounds, pipeline.plans), ag.Tensor(t.grad))))
    return p.grad * ((z >= 0.0) & (z <= 1.0))


def sign_agreement(pipeline, x, label, index, h=1 / 255, chunk=512):
    """Fraction of non-plateau pixels whose STE gradient sign matches central differences.

    Returns ``(agreement, non_plateau_count)`` for one image.
    """
    x = x.astype(np.float64)
    d = ag.Tensor(np.zeros((1, *x.shape)), requires_grad=True, dtype=np.float64)
    ce = ag.softmax_cross_entropy(pipeline.logits(x[None], d, [index]), [label], reduction="sum")
    ag.backward(ce)
    g = d.grad.reshape(-1)

    def losses(imgs):
        with ag.no_grad():
            out = pipeline.model.forward(pipeline.distort(imgs, [index] * len(imgs)))
            return ag.softmax_cross_entropy(out, np.full(len(imgs), label), reduction="none").data

    n = x.size
    fd = np.empty(n)
    for start in range(0, n, chunk):
        ids = np.arange(start, min(n, start + chunk))
        up = np.repeat(x[None], len(ids), axis=0).reshape(len(ids), -1)
        down = up.copy()
        up[np.arange(len(ids)), ids] += h
        down[np.arange(len(ids)), ids] -= h
        shape = (len(ids), *x.shape)
        fd[ids] = losses(np.clip(up, 0, 1).reshape(shape)) - losses(np.clip(down, 0, 1).reshape(shape))
    live = fd != 0
    return float(np.mean(np.sign(fd[live]) == np.sign(g[live]))), int(live.sum())


# ------------------------------------------------------ acceptance verdicts
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def verdict(number: int, ok: bool, detail: str) -> None:
    """Record one acceptance line for the terminal summary, then assert it."""
    ACCEPTANCE[number] = (bool(ok), detail)
    assert ok, f"criterion {number}: {detail}"
