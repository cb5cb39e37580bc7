import numpy as np

from efc import losses
from efc.backbone import backward, forward_features, init_backbone
from efc.numerics import SeededRng, log_softmax, softmax


def numeric_grad(fn, x, h=1e-5):
    """Central differences of scalar fn with respect to array x (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        up = fn()
        x[i] = orig - h
        down = fn()
        x[i] = orig
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / scale


def fd_local_matrix(f, w, h=1e-6):
    """Outer-product expectation built from finite-difference gradients of log p."""
    n, m = w.shape
    grads = np.zeros((m, n))
    for i in range(n):
        step = np.zeros(n)
        step[i] = h
        grads[:, i] = (log_softmax((f + step) @ w) - log_softmax((f - step) @ w)) / (2 * h)
    p = softmax(f @ w)
    return sum(p[y] * np.outer(grads[y], grads[y]) for y in range(m))


def composed_gradient_error(loss_kind, seed=0):
    """Gradient of a loss composed with an 8-dim backbone against central differences."""
    rng = np.random.default_rng(seed)
    params = init_backbone([8, 8, 8], SeededRng(seed, "init"))
    w = rng.standard_normal((8, 5)) * 0.5
    x, x_hat = rng.standard_normal((6, 8)), rng.standard_normal((3, 8))
    y, y_hat = rng.integers(3, 5, 6), rng.integers(3, 5, 3)
    protos, y_p = rng.standard_normal((4, 8)), rng.integers(0, 3, 4)
    old_f = forward_features(x, params) + 0.1 * rng.standard_normal((6, 8))
    a = rng.standard_normal((8, 8))
    e = a @ a.T / 8
    all_cols, cur_cols = np.arange(5), np.array([3, 4])

    def evaluate(f_x, f_hat):
        if loss_kind == "ce":
            l, d = losses.ce_restricted(f_x @ w, y, cur_cols)
            return losses.LossBreakdown(l, 0, 0, l, d @ w.T, None, f_x.T @ d)
        if loss_kind == "efm":
            l, g = losses.efm_loss(f_x, old_f, e, 10.0, 0.1)
            return losses.LossBreakdown(0, 0, l, l, g, None, np.zeros_like(w))
        if loss_kind == "sym":
            return losses.sym_loss(f_x, y, protos, y_p, w, all_cols, 10.0)
        cls = losses.pr_ace_loss(f_x, y, f_hat, y_hat, protos, y_p, w, cur_cols, all_cols)
        if loss_kind == "pr-ace":
            return cls
        return losses.efc_total(cls, losses.efm_loss(f_x, old_f, e, 10.0, 0.1))

    def total():
        f = forward_features(np.concatenate([x, x_hat]), params)
        return evaluate(f[:6], f[6:]).total

    f, cache = forward_features(np.concatenate([x, x_hat]), params, cache=True)
    out = evaluate(f[:6], f[6:])
    g_hat = out.grad_replay if out.grad_replay is not None else np.zeros((3, 8))
    grads = backward(params, cache, np.concatenate([out.grad_current, g_hat]))
    errors = [rel_error(g, numeric_grad(total, p)) for p, g in zip(params.arrays(), grads.arrays())]
    errors.append(rel_error(out.grad_head, numeric_grad(total, w)))
    return max(errors)
