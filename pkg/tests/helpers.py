"""Shared oracles: central finite differences and an independent dense reference net."""
import numpy as np

FD_EPS = 1e-5
REL_TOL = 1e-4
ABS_FLOOR = 1e-7


def rel_error(a, n):
    a, n = np.asarray(a, float), np.asarray(n, float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), ABS_FLOOR)


def fd_grad(f, arr, positions, eps=FD_EPS):
    """Central differences of scalar ``f()`` w.r.t. ``arr`` entries, perturbed in place."""
    out = []
    for pos in positions:
        old = arr[pos]
        arr[pos] = old + eps
        fp = f()
        arr[pos] = old - eps
        fm = f()
        arr[pos] = old
        out.append((fp - fm) / (2 * eps))
    return np.array(out)


def all_positions(arr, mask=None):
    idx = np.argwhere(np.ones(arr.shape, bool) if mask is None else mask.astype(bool))
    return [tuple(i) for i in idx]


# Dense reference network --------------------------------------------------
# Written against loops over kernel taps and explicit window comparisons,
# sharing nothing with the package's im2col / reshape-argmax code paths.

def ref_conv(x, w, b, pad):
    n, ic, h, wd = x.shape
    oc, _, k, _ = w.shape
    xp = np.zeros((n, ic, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    oh, ow = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    y = np.zeros((n, oc, oh, ow)) + b[None, :, None, None]
    for i in range(k):
        for j in range(k):
            y += np.einsum("nchw,oc->nohw", xp[:, :, i:i + oh, j:j + ow], w[:, :, i, j])
    return y, xp


def ref_conv_back(xp, w, g, pad, x_shape):
    n, ic, h, wd = x_shape
    oc, _, k, _ = w.shape
    oh, ow = g.shape[2:]
    gw = np.zeros_like(w)
    gxp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            gw[:, :, i, j] = np.einsum("nohw,nchw->oc", g, xp[:, :, i:i + oh, j:j + ow])
            gxp[:, :, i:i + oh, j:j + ow] += np.einsum("nohw,oc->nchw", g, w[:, :, i, j])
    return gxp[:, :, pad:pad + h, pad:pad + wd], gw, g.sum(axis=(0, 2, 3))


def ref_pool(x):
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)  # first maximum in row-major window order
    return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0], arg


def ref_pool_back(arg, y, g):
    n, c, hh, ww = y.shape
    onehot = (arg[..., None] == np.arange(4)) * g[..., None]
    return onehot.reshape(n, c, hh, ww, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * hh, 2 * ww)


def ref_forward_backward(params, x, labels, num_classes):
    """params: list of (kind, W, b) in stack order: 3 conv, 2 dense."""
    acts = []
    h = x
    for kind, w, b in params[:3]:
        y, xp = ref_conv(h, w, b, w.shape[2] // 2)
        r = np.maximum(y, 0.0)
        p, arg = ref_pool(r)
        acts.append((h.shape, xp, w, y, r, p, arg))
        h = p
    flat_shape = h.shape
    f = h.reshape(h.shape[0], -1)
    (_, w1, b1), (_, w2, b2) = params[3], params[4]
    z1 = f @ w1.T + b1
    a1 = np.maximum(z1, 0.0)
    logits = a1 @ w2.T + b2

    n = x.shape[0]
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    sm = e / e.sum(axis=1, keepdims=True)
    loss = -np.mean(np.log(sm[np.arange(n), labels]))
    g = sm.copy()
    g[np.arange(n), labels] -= 1
    g /= n

    grads = [None] * 5
    grads[4] = (g.T @ a1, g.sum(0))
    ga = g @ w2
    gz = ga * (z1 > 0)
    grads[3] = (gz.T @ f, gz.sum(0))
    gh = (gz @ w1).reshape(flat_shape)
    for li in (2, 1, 0):
        x_shape, xp, w, y, r, p, arg = acts[li]
        gr = ref_pool_back(arg, p, gh)
        gy = gr * (y > 0)
        gx, gw, gb = ref_conv_back(xp, w, gy, w.shape[2] // 2, x_shape)
        grads[li] = (gw, gb)
        gh = gx
    return logits, loss, grads


def jitter_biases(net, gen, scale=0.1):
    """Move every bias off zero.

    A unit whose surviving inputs are all masked has pre-activation equal to
    its bias; at the zero init that sits exactly on the ReLU kink, where
    central differences are meaningless.
    """
    for layer in net.masked_layers:
        layer.bias = gen.normal(scale=scale, size=layer.bias.shape)
