"""Naive loop references and finite-difference helpers shared by the tests."""

import numpy as np


def conv1d_naive(x, w, b, stride, padding, groups):
    n, c, width = x.shape
    o, cg, k = w.shape
    xp = np.zeros((n, c, width + 2 * padding))
    xp[:, :, padding : padding + width] = x
    wo = (width + 2 * padding - k) // stride + 1
    og = o // groups
    out = np.zeros((n, o, wo))
    for s in range(n):
        for oc in range(o):
            g = oc // og
            for t in range(wo):
                acc = 0.0 if b is None else b[oc]
                for ic in range(cg):
                    for j in range(k):
                        acc += w[oc, ic, j] * xp[s, g * cg + ic, t * stride + j]
                out[s, oc, t] = acc
    return out


def batchnorm_naive(x, gamma, beta, mean, var, eps):
    out = np.empty_like(x, dtype=np.float64)
    for s in range(x.shape[0]):
        for c in range(x.shape[1]):
            for t in range(x.shape[2]):
                out[s, c, t] = gamma[c] * (x[s, c, t] - mean[c]) / np.sqrt(var[c] + eps) + beta[c]
    return out


def pool_naive(x):
    out = np.zeros(x.shape[:2])
    for s in range(x.shape[0]):
        for c in range(x.shape[1]):
            total = 0.0
            for t in range(x.shape[2]):
                total += x[s, c, t]
            out[s, c] = total / x.shape[2]
    return out


def linear_naive(x, w, b):
    out = np.zeros((x.shape[0], w.shape[0]))
    for s in range(x.shape[0]):
        for o in range(w.shape[0]):
            acc = b[o]
            for i in range(w.shape[1]):
                acc += w[o, i] * x[s, i]
            out[s, o] = acc
    return out


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)))


def numeric_grad(f, arr, h=1e-6, indices=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (modified in place)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    g = np.zeros(flat.size)
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g.reshape(arr.shape)


def grad_rel_err(num, ana, floor=1e-6):
    """Worst relative error, with a floor so near-zero gradients compare absolutely."""
    num, ana = np.ravel(num), np.ravel(ana)
    return float(np.max(np.abs(num - ana) / np.maximum(np.maximum(np.abs(num), np.abs(ana)), floor)))


def per_sample_ce(logits, y):
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return -np.take_along_axis(logp, y[..., None], axis=-1)[..., 0]


def _child(layer, step):
    return layer.body if step == "body" else layer.layers[step][1]


def _leaves(layer, path=()):
    """(path, layer) for every parameter-holding leaf of nested Sequential/Residual containers."""
    from cardiofuse import nn

    if isinstance(layer, nn.Sequential):
        for i, (_, c) in enumerate(layer.layers):
            yield from _leaves(c, path + (i,))
    elif isinstance(layer, nn.Residual):
        yield from _leaves(layer.body, path + ("body",))
    elif layer.params:
        yield path, layer


def _record(layer, x, path, inputs):
    """Inference forward that remembers every layer's input by path."""
    from cardiofuse import nn

    inputs[path] = x
    if isinstance(layer, nn.Sequential):
        for i, (_, c) in enumerate(layer.layers):
            x = _record(c, x, path + (i,), inputs)
        return x
    if isinstance(layer, nn.Residual):
        return x + _record(layer.body, x, path + ("body",), inputs)
    return layer.forward(x, False)


def _resume(net, path, out, inputs, reps):
    """Finish the forward pass from the output of the leaf at ``path``."""
    from cardiofuse import nn

    while path:
        parent_path, step = path[:-1], path[-1]
        parent = net
        for s in parent_path:
            parent = _child(parent, s)
        if isinstance(parent, nn.Sequential):
            for _, c in parent.layers[step + 1 :]:
                out = c.forward(out, False)
        else:
            res = inputs[parent_path]
            out = out + np.tile(res, (reps,) + (1,) * (res.ndim - 1))
        path = parent_path
    return out


def network_fd_check(net, x, y, h=1e-6, floor=1e-6, chunk=256):
    """Central differences for every parameter of a nested net in inference mode.

    Each perturbation re-runs only the perturbed layer; the perturbed outputs
    are stacked into one batch that finishes the forward pass in a single call.
    Returns {leaf path: worst relative error}.
    """
    from cardiofuse import nn

    inputs = {}
    logits = _record(net, x, (), inputs)
    _, dlogits = nn.cross_entropy(logits, y)
    for _, layer in nn.named_layers(net):
        layer.zero_grad()
    net.forward(x, False)
    net.backward(dlogits)

    errors = {}
    b = len(x)
    for path, layer in list(_leaves(net)):
        x_in = inputs[path]
        for key, arr in layer.params.items():
            flat = arr.reshape(-1)
            num = np.zeros(flat.size)
            for start in range(0, flat.size, chunk):
                idx = range(start, min(start + chunk, flat.size))
                outs = []
                for i in idx:
                    old = flat[i]
                    flat[i] = old + h
                    outs.append(layer.forward(x_in, False))
                    flat[i] = old - h
                    outs.append(layer.forward(x_in, False))
                    flat[i] = old
                reps = 2 * len(idx)
                lg = _resume(net, path, np.concatenate(outs), inputs, reps).reshape(len(idx), 2, b, -1)
                losses = per_sample_ce(lg, np.broadcast_to(y, (len(idx), 2, b))).mean(axis=2)
                num[start : start + len(idx)] = (losses[:, 0] - losses[:, 1]) / (2 * h)
            errors[f"{'.'.join(map(str, path))}.{key}"] = grad_rel_err(num, layer.grads[key], floor)
    return errors
