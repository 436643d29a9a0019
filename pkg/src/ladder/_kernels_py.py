"""Pure numpy versions of the hot kernels.

Every function here has a twin with the same signature in the compiled
``_ckernels`` extension; ``ladder.kernels`` picks one at import time.
"""
import numpy as np

BACKEND = "python"


def im2col3x3(x):
    """(N, C, H, W) -> (N*H*W, C*9) patches of a zero-padded 3x3, stride 1 conv."""
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((n, h, w, c, 3, 3), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            cols[:, :, :, :, di, dj] = xp[:, :, di : di + h, dj : dj + w].transpose(0, 2, 3, 1)
    return cols.reshape(n * h * w, c * 9)


def col2im3x3(cols, n, c, h, w):
    """Adjoint of :func:`im2col3x3`: scatter-add columns back to an image."""
    cols = cols.reshape(n, h, w, c, 3, 3)
    xp = np.zeros((n, c, h + 2, w + 2), dtype=cols.dtype)
    for di in range(3):
        for dj in range(3):
            xp[:, :, di : di + h, dj : dj + w] += cols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(xp[:, :, 1:-1, 1:-1])


def maxpool2x2_forward(x):
    """2x2/stride-2 max pool. Returns (out, argmax) with argmax in 0..3 (row-major, first max wins)."""
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    win = (
        x[:, :, : 2 * ho, : 2 * wo]
        .reshape(n, c, ho, 2, wo, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, 4)
    )
    arg = np.argmax(win, axis=-1).astype(np.int8)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2x2_backward(dout, arg, h, w):
    n, c, ho, wo = dout.shape
    win = np.zeros((n, c, ho, wo, 4), dtype=dout.dtype)
    np.put_along_axis(win, arg[..., None].astype(np.intp), dout[..., None], axis=-1)
    dx = np.zeros((n, c, h, w), dtype=dout.dtype)
    dx[:, :, : 2 * ho, : 2 * wo] = (
        win.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    )
    return dx


def _cubic(t, a=-0.5):
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    return np.where(
        t <= 1.0,
        (a + 2.0) * t3 - (a + 3.0) * t2 + 1.0,
        np.where(t < 2.0, a * t3 - 5.0 * a * t2 + 8.0 * a * t - 4.0 * a, 0.0),
    )


def _weight_matrix(n_out, n_in, start, step, clamp):
    u = start + step * np.arange(n_out, dtype=np.float64)
    base = np.floor(u).astype(np.int64)
    frac = u - base
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    for k in (-1, 0, 1, 2):
        idx = base + k
        wk = _cubic(frac - k)
        if clamp:
            np.add.at(mat, (rows, np.clip(idx, 0, n_in - 1)), wk)
        else:
            ok = (idx >= 0) & (idx < n_in)
            np.add.at(mat, (rows[ok], idx[ok]), wk[ok])
    return mat


def resample_bicubic(img, out_h, out_w, y_start, y_step, x_start, x_step, clamp):
    """Separable Catmull-Rom resampling of a 2-D float64 image.

    Output pixel ``(j, i)`` samples the source at fractional pixel index
    ``(y_start + j*y_step, x_start + i*x_step)``. Out-of-range taps are
    clamped to the border when ``clamp`` is true, treated as zero otherwise.
    """
    img = np.asarray(img, dtype=np.float64)
    wy = _weight_matrix(out_h, img.shape[0], y_start, y_step, clamp)
    wx = _weight_matrix(out_w, img.shape[1], x_start, x_step, clamp)
    return wy @ img @ wx.T


def convolve1d_reflect(img, kernel, axis):
    """Correlate a 2-D float64 image with an odd 1-D kernel along ``axis``, half-sample reflection at borders."""
    img = np.asarray(img, dtype=np.float64)
    r = len(kernel) // 2
    n = img.shape[axis]
    # explicit reflected index map handles radii larger than the image
    idx = np.arange(-r, n + r)
    m = np.mod(idx, 2 * n)
    m = np.where(m >= n, 2 * n - 1 - m, m)
    padded = np.take(img, m, axis=axis)
    out = np.zeros_like(img)
    for k, wk in enumerate(kernel):
        if axis == 0:
            out += wk * padded[k : k + n, :]
        else:
            out += wk * padded[:, k : k + n]
    return out
