"""Shared test oracles: finite differences, dense 3D convolution, Monte-Carlo IoU."""

import numpy as np

from voxeldet import nn_core


def finite_diff_error(make_loss, params, h=1e-5, max_entries=None, seed=0):
    """Max relative error between backprop and central finite differences.

    ``make_loss()`` must rebuild the scalar loss Tensor from the current
    contents of ``params`` (a list of leaf Tensors with requires_grad).
    Error is normalized by max(1, |grad|_inf) per parameter.
    """
    for p in params:
        p.zero_grad()
    loss = make_loss()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        gf = np.zeros(flat.size)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = make_loss().item()
            flat[i] = orig - h
            fm = make_loss().item()
            flat[i] = orig
            gf[i] = (fp - fm) / (2 * h)
        ga_flat = ga.reshape(-1)
        scale = max(1.0, np.abs(ga_flat[idx]).max(initial=0.0), np.abs(gf[idx]).max(initial=0.0))
        worst = max(worst, np.abs(ga_flat[idx] - gf[idx]).max(initial=0.0) / scale)
    return worst


def random_cotangent(shape, seed):
    rng = np.random.default_rng(seed)
    return nn_core.Tensor(rng.normal(size=shape))


def projected_loss(out, cotangent):
    """Scalar projection so vector-valued ops can be gradient-checked."""
    return (out * cotangent).sum()


def conv2d_naive(x, w, b, stride, padding, dilation):
    """Direct-loop 2D cross-correlation oracle."""
    n, c, h, wd = x.shape
    oc, _, kh, kw = w.shape
    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    out = np.zeros((n, oc, oh, ow))
    for ni in range(n):
        for oi in range(oc):
            for yi in range(oh):
                for xi in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += (
                                    w[oi, ci, ky, kx]
                                    * xp[ni, ci, yi * stride + ky * dilation, xi * stride + kx * dilation]
                                )
                    out[ni, oi, yi, xi] = acc + (b[oi] if b is not None else 0.0)
    return out


def dense_conv3d_oracle(dense, weights, bias, offsets, out_shape, stride=(1, 1, 1),
                        origin=(0, 0, 0)):
    """Dense 3D convolution by explicit shifting, independent of any rulebook.

    ``dense`` is (nx, ny, nz, c_in); ``weights`` maps offset -> (c_in, c_out).
    Output voxel o takes input at o*stride + offset + origin.
    """
    nx, ny, nz, _ = dense.shape
    c_out = next(iter(weights.values())).shape[1]
    out = np.zeros(tuple(out_shape) + (c_out,))
    for ox in range(out_shape[0]):
        for oy in range(out_shape[1]):
            for oz in range(out_shape[2]):
                acc = np.zeros(c_out)
                for off, w in weights.items():
                    ix = ox * stride[0] + off[0] + origin[0]
                    iy = oy * stride[1] + off[1] + origin[1]
                    iz = oz * stride[2] + off[2] + origin[2]
                    if 0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz:
                        acc += dense[ix, iy, iz] @ w
                out[ox, oy, oz] = acc + (bias if bias is not None else 0.0)
    return out


def dense_conv3d_shift_oracle(dense, weights, bias, offsets, out_shape, stride=(1, 1, 1)):
    """Vectorized dense 3D convolution by array shifting (rulebook-independent).

    Same contract as :func:`dense_conv3d_oracle` with origin 0: output voxel o
    reads input at o * stride + offset.
    """
    in_shape = dense.shape[:3]
    c_out = next(iter(weights.values())).shape[1]
    out = np.zeros(tuple(out_shape) + (c_out,))
    for off, w in weights.items():
        # valid output range per axis: 0 <= o*s + off < n
        lo = [max(0, (-d + s - 1) // s) if d < 0 else 0
              for s, d in zip(stride, off)]
        hi = [min(o, (n - d + s - 1) // s)
              for o, n, s, d in zip(out_shape, in_shape, stride, off)]
        if any(l >= h for l, h in zip(lo, hi)):
            continue
        src = dense[
            lo[0] * stride[0] + off[0] : (hi[0] - 1) * stride[0] + off[0] + 1 : stride[0],
            lo[1] * stride[1] + off[1] : (hi[1] - 1) * stride[1] + off[1] + 1 : stride[1],
            lo[2] * stride[2] + off[2] : (hi[2] - 1) * stride[2] + off[2] + 1 : stride[2],
        ]
        out[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] += src @ w
    if bias is not None:
        out += bias
    return out


def monte_carlo_bev_iou(box_a, box_b, n_samples=1_000_000, seed=0):
    """Area-sampling IoU oracle for two rotated BEV rectangles."""

    def corners(b):
        x, y, _, w, l, _, th = b
        dx = np.array([l, l, -l, -l]) / 2.0
        dy = np.array([w, -w, -w, w]) / 2.0
        c, s = np.cos(th), np.sin(th)
        return np.stack([x + c * dx - s * dy, y + s * dx + c * dy], axis=1)

    def inside(pts, b):
        x, y, _, w, l, _, th = b
        c, s = np.cos(th), np.sin(th)
        rx = (pts[:, 0] - x) * c + (pts[:, 1] - y) * s
        ry = -(pts[:, 0] - x) * s + (pts[:, 1] - y) * c
        return (np.abs(rx) <= l / 2.0) & (np.abs(ry) <= w / 2.0)

    all_corners = np.vstack([corners(box_a), corners(box_b)])
    lo = all_corners.min(axis=0)
    hi = all_corners.max(axis=0)
    rng = np.random.Generator(np.random.Philox(seed))
    pts = lo + rng.random((n_samples, 2)) * (hi - lo)
    in_a = inside(pts, box_a)
    in_b = inside(pts, box_b)
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 0.0
    return np.count_nonzero(in_a & in_b) / union
