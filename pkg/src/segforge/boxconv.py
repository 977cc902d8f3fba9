"""Box convolution: averaging over a learnable axis-aligned box, evaluated
in O(1) per position through integral images.

A box is four continuous edge offsets (x_min, x_max, y_min, y_max)
relative to the output pixel's center. Treating the image as piecewise
constant over unit pixel cells, the bilinear interpolation of the
integral table at the four (clipped) rectangle corners yields the exact
continuous integral over the rectangle; dividing by the full
(unclipped) box area gives the output. Runtime does not depend on the
box size.

Gradients: the input gradient is the same rectangle sum applied to the
incoming gradient with the box reflected through the origin; each edge
gradient is the line integral along the moving edge minus the area
normalization term. Integral tables are accumulated in float64
regardless of the working dtype to keep the 4-tap cancellation benign.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from segforge.tensor import ContractError, ShapeError, Tensor, _accum, make_rng

__all__ = [
    "BoxParams",
    "integral_image",
    "box_sum",
    "boxconv_forward",
    "boxconv_backward",
    "box_convolution",
    "clamp_box_coords",
    "init_boxes",
]

_EDGE_TOL = 1e-6


@dataclass
class BoxParams:
    """Learnable box edges per (plane, box): columns x_min, x_max, y_min, y_max."""

    coords: Tensor  # (C, B, 4)
    delta_min: float = 1.0
    radius: float = 32.0

    @property
    def planes(self):
        return self.coords.shape[0]

    @property
    def boxes_per_plane(self):
        return self.coords.shape[1]

    def validate(self):
        c = self.coords.data
        if c.ndim != 3 or c.shape[2] != 4:
            raise ShapeError(f"box coords must be (C, B, 4), got {c.shape}")
        widths = c[:, :, 1] - c[:, :, 0]
        heights = c[:, :, 3] - c[:, :, 2]
        if (widths < self.delta_min - _EDGE_TOL).any() or (heights < self.delta_min - _EDGE_TOL).any():
            raise ContractError("box thinner than delta_min; run clamp after every optimizer step")
        if (np.abs(c) > self.radius + _EDGE_TOL).any():
            raise ContractError(f"box edge beyond clamp radius {self.radius}")

    def clamp_(self):
        """In-place projection back onto the valid set (for post-step hooks)."""
        self.coords.data[:] = clamp_box_coords(self.coords.data, self.delta_min, self.radius)


def integral_image(plane):
    """(H, W) plane -> (H+1, W+1) table of exclusive prefix sums."""
    plane = np.asarray(plane)
    if plane.ndim != 2:
        raise ShapeError(f"integral_image expects a 2-d plane, got shape {plane.shape}")
    h, w = plane.shape
    table = np.zeros((h + 1, w + 1), dtype=np.float64)
    np.cumsum(plane, axis=0, dtype=np.float64, out=table[1:, 1:])
    np.cumsum(table[1:, 1:], axis=1, out=table[1:, 1:])
    return table


def _row_interp(table, ys):
    """Linear interpolation of table rows at continuous y in [0, H] -> (len(ys), W+1)."""
    h = table.shape[0] - 1
    iy = np.minimum(np.floor(ys).astype(np.int64), h - 1)
    fy = (ys - iy)[:, None]
    return table[iy] * (1.0 - fy) + table[iy + 1] * fy


def _col_interp(rows, xs):
    """Linear interpolation of row values at continuous x in [0, W] -> (K, len(xs))."""
    w = rows.shape[1] - 1
    ix = np.minimum(np.floor(xs).astype(np.int64), w - 1)
    fx = (xs - ix)[None, :]
    return rows[:, ix] * (1.0 - fx) + rows[:, ix + 1] * fx


def box_sum(table, rect):
    """Continuous-rectangle sum from an integral table.

    ``rect`` is (x0, x1, y0, y1); it is clipped to the image bounds, and
    a fully clipped rectangle sums to zero.
    """
    h, w = table.shape[0] - 1, table.shape[1] - 1
    x0, x1, y0, y1 = rect
    x0, x1 = np.clip(x0, 0.0, w), np.clip(x1, 0.0, w)
    y0, y1 = np.clip(y0, 0.0, h), np.clip(y1, 0.0, h)
    if x1 <= x0 or y1 <= y0:
        return 0.0
    ys = np.array([y0, y1])
    rows = _row_interp(table, ys)
    vals = _col_interp(rows, np.array([x0, x1]))
    return float(vals[1, 1] - vals[1, 0] - vals[0, 1] + vals[0, 0])


def _plane_rect_sums(table, box, h, w):
    """Rectangle sums of one box centered on every pixel of an (h, w) grid."""
    x_min, x_max, y_min, y_max = box
    ys0 = np.clip(np.arange(h) + 0.5 + y_min, 0.0, h)
    ys1 = np.clip(np.arange(h) + 0.5 + y_max, 0.0, h)
    xs0 = np.clip(np.arange(w) + 0.5 + x_min, 0.0, w)
    xs1 = np.clip(np.arange(w) + 0.5 + x_max, 0.0, w)
    r0 = _row_interp(table, ys0)
    r1 = _row_interp(table, ys1)
    return (
        _col_interp(r1, xs1) - _col_interp(r1, xs0) - _col_interp(r0, xs1) + _col_interp(r0, xs0)
    )


def boxconv_forward(x, coords, delta_min=1.0, radius=None, _validate=True):
    """(N, C, H, W) with (C, B, 4) edges -> (N, C*B, H, W) of clipped box averages."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError("boxconv expects (N, C, H, W) input")
    coords = np.asarray(coords, dtype=np.float64)
    n, c, h, w = x.shape
    if coords.ndim != 3 or coords.shape[0] != c or coords.shape[2] != 4:
        raise ShapeError(f"coords shape {coords.shape} incompatible with {c} input planes")
    b = coords.shape[1]
    if _validate:
        sizes_x = coords[:, :, 1] - coords[:, :, 0]
        sizes_y = coords[:, :, 3] - coords[:, :, 2]
        floor = (delta_min - _EDGE_TOL) if delta_min else _EDGE_TOL
        if (sizes_x < floor).any() or (sizes_y < floor).any():
            raise ContractError("degenerate box; clamp the parameters after each optimizer step")
    areas = (coords[:, :, 1] - coords[:, :, 0]) * (coords[:, :, 3] - coords[:, :, 2])
    out = np.empty((n, c * b, h, w), dtype=x.dtype)
    for s in range(n):
        for ci in range(c):
            table = integral_image(x[s, ci])
            for bi in range(b):
                rect = _plane_rect_sums(table, coords[ci, bi], h, w)
                out[s, ci * b + bi] = rect / areas[ci, bi]
    return out


def _edge_terms(table, box, h, w):
    """Rectangle sums plus the four edge derivatives of the clipped sum."""
    x_min, x_max, y_min, y_max = box
    y_raw0 = np.arange(h) + 0.5 + y_min
    y_raw1 = np.arange(h) + 0.5 + y_max
    x_raw0 = np.arange(w) + 0.5 + x_min
    x_raw1 = np.arange(w) + 0.5 + x_max
    ys0, ys1 = np.clip(y_raw0, 0.0, h), np.clip(y_raw1, 0.0, h)
    xs0, xs1 = np.clip(x_raw0, 0.0, w), np.clip(x_raw1, 0.0, w)
    gate_y0 = ((y_raw0 > 0) & (y_raw0 < h)).astype(np.float64)
    gate_y1 = ((y_raw1 > 0) & (y_raw1 < h)).astype(np.float64)
    gate_x0 = ((x_raw0 > 0) & (x_raw0 < w)).astype(np.float64)
    gate_x1 = ((x_raw1 > 0) & (x_raw1 < w)).astype(np.float64)

    r0 = _row_interp(table, ys0)
    r1 = _row_interp(table, ys1)
    rect = _col_interp(r1, xs1) - _col_interp(r1, xs0) - _col_interp(r0, xs1) + _col_interp(r0, xs0)

    # d/dy of the interpolated table: the difference of adjacent rows.
    dtab = table[1:] - table[:-1]
    iy0 = np.minimum(np.floor(ys0).astype(np.int64), h - 1)
    iy1 = np.minimum(np.floor(ys1).astype(np.int64), h - 1)
    dy_at_y0 = dtab[iy0]
    dy_at_y1 = dtab[iy1]
    d_ymin = -gate_y0[:, None] * (_col_interp(dy_at_y0, xs1) - _col_interp(dy_at_y0, xs0))
    d_ymax = gate_y1[:, None] * (_col_interp(dy_at_y1, xs1) - _col_interp(dy_at_y1, xs0))

    # d/dx of the interpolated table: adjacent-column differences of the
    # row-interpolated values.
    ix0 = np.minimum(np.floor(xs0).astype(np.int64), w - 1)
    ix1 = np.minimum(np.floor(xs1).astype(np.int64), w - 1)
    dx_r0 = r0[:, 1:] - r0[:, :-1]
    dx_r1 = r1[:, 1:] - r1[:, :-1]
    d_xmin = -gate_x0[None, :] * (dx_r1[:, ix0] - dx_r0[:, ix0])
    d_xmax = gate_x1[None, :] * (dx_r1[:, ix1] - dx_r0[:, ix1])
    return rect, d_xmin, d_xmax, d_ymin, d_ymax


def boxconv_backward(grad_out, x, coords):
    """Gradients of the box average w.r.t. the input planes and the box edges."""
    x = np.asarray(x)
    grad_out = np.asarray(grad_out)
    coords = np.asarray(coords, dtype=np.float64)
    n, c, h, w = x.shape
    b = coords.shape[1]
    if grad_out.shape != (n, c * b, h, w):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(n, c * b, h, w)}")
    wx = coords[:, :, 1] - coords[:, :, 0]
    wy = coords[:, :, 3] - coords[:, :, 2]
    areas = wx * wy
    grad_x = np.zeros_like(x)
    grad_coords = np.zeros_like(coords)
    for s in range(n):
        for ci in range(c):
            table_x = None
            for bi in range(b):
                g = grad_out[s, ci * b + bi]
                area = areas[ci, bi]
                box = coords[ci, bi]
                # Input gradient: distribute each output's average back
                # over its source rectangle == box-sum of the gradient
                # with the reflected box.
                table_g = integral_image(g)
                reflected = (-box[1], -box[0], -box[3], -box[2])
                grad_x[s, ci] += (_plane_rect_sums(table_g, reflected, h, w) / area).astype(x.dtype)
                if table_x is None:
                    table_x = integral_image(x[s, ci])
                rect, d_xmin, d_xmax, d_ymin, d_ymax = _edge_terms(table_x, box, h, w)
                g64 = g.astype(np.float64, copy=False)
                rect_dot = float((g64 * rect).sum())
                grad_coords[ci, bi, 0] += float((g64 * d_xmin).sum()) / area + rect_dot / (area * wx[ci, bi])
                grad_coords[ci, bi, 1] += float((g64 * d_xmax).sum()) / area - rect_dot / (area * wx[ci, bi])
                grad_coords[ci, bi, 2] += float((g64 * d_ymin).sum()) / area + rect_dot / (area * wy[ci, bi])
                grad_coords[ci, bi, 3] += float((g64 * d_ymax).sum()) / area - rect_dot / (area * wy[ci, bi])
    return grad_x, grad_coords


def box_convolution(x, params):
    """Differentiable box convolution of a Tensor against BoxParams."""
    params.validate()
    coords = params.coords
    out_data = boxconv_forward(x.data, coords.data, params.delta_min, params.radius)

    def rule(g):
        gx, gc = boxconv_backward(g, x.data, coords.data)
        if x.requires_grad:
            _accum(x, gx, fresh=True)
        if coords.requires_grad:
            _accum(coords, gc.astype(coords.dtype), fresh=True)

    return Tensor._from_op(out_data, (x, coords), rule)


def clamp_box_coords(coords, delta_min, radius):
    """Project each quadruple so sizes stay >= delta_min and |edges| <= radius.

    Offending edges move symmetrically about the box center; centers
    shift only as far as needed to fit inside the radius.
    """
    if delta_min > 2.0 * radius:
        raise ContractError(f"delta_min {delta_min} cannot fit inside radius {radius}")
    coords = np.asarray(coords, dtype=np.float64)
    out = coords.copy()
    for lo_i, hi_i in ((0, 1), (2, 3)):
        lo, hi = coords[..., lo_i], coords[..., hi_i]
        size = np.clip(hi - lo, delta_min, 2.0 * radius)
        center = np.clip((lo + hi) / 2.0, -radius + size / 2.0, radius - size / 2.0)
        out[..., lo_i] = center - size / 2.0
        out[..., hi_i] = center + size / 2.0
    return out


def init_boxes(seed, channels, boxes_per_plane, r0, delta_min=1.0, radius=None):
    """Seeded box initialization: centers in [-r0/2, r0/2], sizes in [4*delta_min, r0]."""
    if radius is None:
        radius = 2.0 * r0
    if r0 > radius:
        raise ContractError(f"r0 {r0} exceeds clamp radius {radius}")
    rng = make_rng(seed)
    size_hi = max(float(r0), 4.0 * delta_min)
    centers = rng.uniform(-r0 / 2.0, r0 / 2.0, size=(channels, boxes_per_plane, 2))
    sizes = rng.uniform(4.0 * delta_min, size_hi, size=(channels, boxes_per_plane, 2)) if size_hi > 4.0 * delta_min else np.full((channels, boxes_per_plane, 2), 4.0 * delta_min)
    coords = np.empty((channels, boxes_per_plane, 4))
    coords[:, :, 0] = centers[:, :, 0] - sizes[:, :, 0] / 2.0
    coords[:, :, 1] = centers[:, :, 0] + sizes[:, :, 0] / 2.0
    coords[:, :, 2] = centers[:, :, 1] - sizes[:, :, 1] / 2.0
    coords[:, :, 3] = centers[:, :, 1] + sizes[:, :, 1] / 2.0
    coords = clamp_box_coords(coords, delta_min, radius)
    tensor = Tensor(coords, requires_grad=True)
    return BoxParams(coords=tensor, delta_min=delta_min, radius=radius)
