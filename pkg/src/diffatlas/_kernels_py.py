"""Pure numpy versions of the hot kernels.

These are the reference path; ``_kernels`` (Cython) must agree with them
bit-for-bit. Texture layout is ``tex[row, col, channel]`` with rows along v
and columns along u; ``rect`` is ``(u0, u1, v0, v1)``.
"""
import numpy as np


def _cell_coords(uv, GY, GX, rect):
    u0, u1, v0, v1 = rect
    fx = (uv[:, 0] - u0) / (u1 - u0) * GX - 0.5
    fy = (uv[:, 1] - v0) / (v1 - v0) * GY - 0.5
    inside_x = (fx > 0.0) & (fx < GX - 1.0)
    inside_y = (fy > 0.0) & (fy < GY - 1.0)
    fx = np.clip(fx, 0.0, GX - 1.0)
    fy = np.clip(fy, 0.0, GY - 1.0)
    ix = np.minimum(np.floor(fx).astype(np.int64), GX - 2)
    iy = np.minimum(np.floor(fy).astype(np.int64), GY - 2)
    tx = fx - ix
    ty = fy - iy
    return ix, iy, tx, ty, inside_x, inside_y


def bilinear_sample(tex, uv, rect):
    ix, iy, tx, ty, _, _ = _cell_coords(uv, tex.shape[0], tex.shape[1], rect)
    w00 = (1.0 - tx) * (1.0 - ty)
    w01 = tx * (1.0 - ty)
    w10 = (1.0 - tx) * ty
    w11 = tx * ty
    t00 = tex[iy, ix]
    t01 = tex[iy, ix + 1]
    t10 = tex[iy + 1, ix]
    t11 = tex[iy + 1, ix + 1]
    out = t00 * w00[:, None] + t01 * w01[:, None]
    out = out + t10 * w10[:, None]
    out = out + t11 * w11[:, None]
    return out


def bilinear_grad_uv(tex, uv, rect, grad_out):
    """Vector-Jacobian product of ``bilinear_sample`` with respect to ``uv``."""
    GY, GX = tex.shape[:2]
    u0, u1, v0, v1 = rect
    ix, iy, tx, ty, inside_x, inside_y = _cell_coords(uv, GY, GX, rect)
    t00 = tex[iy, ix]
    t01 = tex[iy, ix + 1]
    t10 = tex[iy + 1, ix]
    t11 = tex[iy + 1, ix + 1]
    dfdx = (t01 - t00) * (1.0 - ty)[:, None] + (t11 - t10) * ty[:, None]
    dfdy = (t10 - t00) * (1.0 - tx)[:, None] + (t11 - t01) * tx[:, None]
    gx = (dfdx * grad_out).sum(axis=1) * (GX / (u1 - u0))
    gy = (dfdy * grad_out).sum(axis=1) * (GY / (v1 - v0))
    gx = np.where(inside_x, gx, 0.0)
    gy = np.where(inside_y, gy, 0.0)
    return np.stack([gx, gy], axis=1)


def splat_max(values, uv, G, rect):
    """Max of ``values`` over points whose uv falls in each texel (0 if none)."""
    u0, u1, v0, v1 = rect
    ix = np.floor((uv[:, 0] - u0) / (u1 - u0) * G).astype(np.int64)
    iy = np.floor((uv[:, 1] - v0) / (v1 - v0) * G).astype(np.int64)
    ok = (ix >= 0) & (ix < G) & (iy >= 0) & (iy < G)
    out = np.zeros((G, G))
    np.maximum.at(out, (iy[ok], ix[ok]), values[ok])
    return out


def pull_push_pass(img, known):
    """One Jacobi sweep: unknown texels take the mean of their 4-neighbours.

    ``known`` texels are held fixed. Border texels use the neighbours that
    exist.
    """
    H, W = known.shape
    acc = np.zeros_like(img)
    cnt = np.zeros((H, W))
    acc[1:] += img[:-1]
    cnt[1:] += 1
    acc[:-1] += img[1:]
    cnt[:-1] += 1
    acc[:, 1:] += img[:, :-1]
    cnt[:, 1:] += 1
    acc[:, :-1] += img[:, 1:]
    cnt[:, :-1] += 1
    avg = acc / cnt[..., None]
    return np.where(known[..., None], img, avg)
