"""Rotated box geometry on the BEV plane and in 3D.

Boxes are parameterised as ``(cx, cy, l, w, theta)`` in BEV and
``(cx, cy, cz, l, w, h, theta)`` in 3D, where ``l`` is the extent along the
heading and ``theta`` is measured counter-clockwise from +x.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

DEDUP_TOL = 1e-9
AREA_EPS = 1e-12

IOU_KINDS = ("IoU", "GIoU", "DIoU")


@dataclass(frozen=True)
class BoxBEV:
    cx: float
    cy: float
    l: float
    w: float
    theta: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.l, self.w, self.theta)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box parameters: {vals}")
        if self.l <= 0 or self.w <= 0:
            raise ValueError(f"box extents must be positive, got l={self.l}, w={self.w}")

    @classmethod
    def from_array(cls, a) -> "BoxBEV":
        return cls(*(float(v) for v in a))

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.l, self.w, self.theta])

    @property
    def area(self) -> float:
        return self.l * self.w


@dataclass(frozen=True)
class Box3D:
    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    theta: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.cz, self.l, self.w, self.h, self.theta)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box parameters: {vals}")
        if self.l <= 0 or self.w <= 0 or self.h <= 0:
            raise ValueError(
                f"box extents must be positive, got l={self.l}, w={self.w}, h={self.h}")

    @classmethod
    def from_array(cls, a) -> "Box3D":
        return cls(*(float(v) for v in a))

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.l, self.w, self.h, self.theta])

    @property
    def bev(self) -> BoxBEV:
        return BoxBEV(self.cx, self.cy, self.l, self.w, self.theta)

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    def replace(self, **kw) -> "Box3D":
        d = dict(cx=self.cx, cy=self.cy, cz=self.cz, l=self.l, w=self.w, h=self.h,
                 theta=self.theta)
        d.update(kw)
        return Box3D(**d)


@dataclass(frozen=True)
class ConvexPolygon:
    """Counter-clockwise vertex list, shape (n, 2)."""

    vertices: np.ndarray

    @property
    def area(self) -> float:
        return polygon_area(self.vertices)

    def __len__(self):
        return len(self.vertices)


def polygon_area(v: np.ndarray) -> float:
    """Signed shoelace area; positive for CCW order."""
    if len(v) < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def corners(box: BoxBEV) -> ConvexPolygon:
    c, s = math.cos(box.theta), math.sin(box.theta)
    hl, hw = 0.5 * box.l, 0.5 * box.w
    local = np.array([[hl, -hw], [hl, hw], [-hl, hw], [-hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return ConvexPolygon(local @ rot.T + np.array([box.cx, box.cy]))


def _dedup(pts: list) -> list:
    out = []
    for p in pts:
        if not out or abs(p[0] - out[-1][0]) > DEDUP_TOL or abs(p[1] - out[-1][1]) > DEDUP_TOL:
            out.append(p)
    while len(out) > 1 and abs(out[0][0] - out[-1][0]) <= DEDUP_TOL \
            and abs(out[0][1] - out[-1][1]) <= DEDUP_TOL:
        out.pop()
    # drop vertices collinear with their neighbours
    changed = True
    while changed and len(out) >= 3:
        changed = False
        for i in range(len(out)):
            a, b, c = out[i - 1], out[i], out[(i + 1) % len(out)]
            cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
            if abs(cross) <= DEDUP_TOL * DEDUP_TOL:
                del out[i]
                changed = True
                break
    return out


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` against convex CCW ``clip``."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp = output
        output = []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    t = s_prev / (s_prev - s_cur)
                    output.append((prev[0] + t * (cur[0] - prev[0]),
                                   prev[1] + t * (cur[1] - prev[1])))
                output.append(cur)
            elif s_prev >= 0:
                t = s_prev / (s_prev - s_cur)
                output.append((prev[0] + t * (cur[0] - prev[0]),
                               prev[1] + t * (cur[1] - prev[1])))
            prev, s_prev = cur, s_cur
        output = _dedup(output)
    if len(output) < 3:
        return np.zeros((0, 2))
    return np.array(output)


def intersection_polygon(a: BoxBEV, b: BoxBEV) -> ConvexPolygon:
    return ConvexPolygon(clip_polygon(corners(a).vertices, corners(b).vertices))


def intersect_area(a: BoxBEV, b: BoxBEV) -> float:
    # cheap rejection on circumscribed circles
    ra = 0.5 * math.hypot(a.l, a.w)
    rb = 0.5 * math.hypot(b.l, b.w)
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > ra + rb:
        return 0.0
    # canonical argument order makes the result exactly symmetric
    if tuple(a.as_array()) > tuple(b.as_array()):
        a, b = b, a
    area = intersection_polygon(a, b).area
    return area if area >= AREA_EPS else 0.0


def iou_bev(a: BoxBEV, b: BoxBEV) -> float:
    inter = intersect_area(a, b)
    if inter == 0.0:
        return 0.0
    union = a.area + b.area - inter
    return min(1.0, max(0.0, inter / union))


def _z_overlap(a: Box3D, b: Box3D) -> float:
    lo = max(a.cz - 0.5 * a.h, b.cz - 0.5 * b.h)
    hi = min(a.cz + 0.5 * a.h, b.cz + 0.5 * b.h)
    return max(0.0, hi - lo)


def iou_3d(a: Box3D, b: Box3D) -> float:
    dz = _z_overlap(a, b)
    if dz == 0.0:
        return 0.0
    inter = intersect_area(a.bev, b.bev) * dz
    if inter == 0.0:
        return 0.0
    union = a.volume + b.volume - inter
    return min(1.0, max(0.0, inter / union))


# ---------------------------------------------------------------------------
# orientation-decoupled IoU family


def _to_gt_frame(pred: Box3D, gt: Box3D):
    """Pred centre expressed in gt's heading frame, plus the rotation used."""
    c, s = math.cos(gt.theta), math.sin(gt.theta)
    dx, dy = pred.cx - gt.cx, pred.cy - gt.cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u, v, pred.cz - gt.cz), (c, s)


def _tie_min(p: float, g: float) -> float:
    """d min(p, g) / dp, averaging the one-sided branches at a tie."""
    if p < g:
        return 1.0
    if p > g:
        return 0.0
    return 0.5


def _tie_max(p: float, g: float) -> float:
    if p > g:
        return 1.0
    if p < g:
        return 0.0
    return 0.5


def od_iou_family(pred: Box3D, gt: Box3D, kind: str = "IoU") -> Tuple[float, np.ndarray]:
    """Orientation-decoupled IoU / GIoU / DIoU of ``pred`` against ``gt``.

    ``pred.theta`` is replaced by ``gt.theta`` so both boxes are axis aligned
    in the gt heading frame. Returns the value and its gradient with respect
    to pred's ``(cx, cy, cz, l, w, h, theta)``; the theta entry is always 0.
    At exact interval-endpoint ties the derivative is the average of the two
    one-sided branches, which makes the gradient vanish at ``pred == gt``.
    """
    if kind not in IOU_KINDS:
        raise ValueError(f"unknown kind {kind!r}, expected one of {IOU_KINDS}")
    centre, (c, s) = _to_gt_frame(pred, gt)
    ps = (pred.l, pred.w, pred.h)
    gs = (gt.l, gt.w, gt.h)

    o = [0.0] * 3      # overlap per axis
    do_da = [0.0] * 3  # d overlap / d pred centre
    do_ds = [0.0] * 3  # d overlap / d pred extent
    e = [0.0] * 3      # enclosing extent per axis
    de_da = [0.0] * 3
    de_ds = [0.0] * 3
    for i in range(3):
        a, sz, t = centre[i], ps[i], gs[i]
        p_hi, p_lo = a + 0.5 * sz, a - 0.5 * sz
        g_hi, g_lo = 0.5 * t, -0.5 * t
        ov = min(p_hi, g_hi) - max(p_lo, g_lo)
        k_hi = _tie_min(p_hi, g_hi)
        k_lo = _tie_max(p_lo, g_lo)
        if ov > 0:
            o[i] = ov
            do_da[i] = k_hi - k_lo
            do_ds[i] = 0.5 * (k_hi + k_lo)
        e[i] = max(p_hi, g_hi) - min(p_lo, g_lo)
        m_hi = _tie_max(p_hi, g_hi)
        m_lo = _tie_min(p_lo, g_lo)
        de_da[i] = m_hi - m_lo
        de_ds[i] = 0.5 * (m_hi + m_lo)

    inter = o[0] * o[1] * o[2]
    vp = ps[0] * ps[1] * ps[2]
    vg = gs[0] * gs[1] * gs[2]
    union = vp + vg - inter
    iou = inter / union

    def prod_except(vals, i):
        return vals[(i + 1) % 3] * vals[(i + 2) % 3]

    # gradients w.r.t. frame-local centre (a) and extents (s)
    g_a = [0.0] * 3
    g_s = [0.0] * 3
    for i in range(3):
        dI_da = do_da[i] * prod_except(o, i)
        dI_ds = do_ds[i] * prod_except(o, i)
        dVp_ds = prod_except(ps, i)
        # d(I/U) = (dI * U - I * dU) / U^2,  dU = dVp - dI
        g_a[i] = (dI_da * union + inter * dI_da) / union ** 2
        g_s[i] = (dI_ds * union - inter * (dVp_ds - dI_ds)) / union ** 2

    value = iou
    if kind == "GIoU":
        enc = e[0] * e[1] * e[2]
        value = iou - (enc - union) / enc
        # value = iou - 1 + union / enc
        for i in range(3):
            dI_da = do_da[i] * prod_except(o, i)
            dI_ds = do_ds[i] * prod_except(o, i)
            dU_da = -dI_da
            dU_ds = prod_except(ps, i) - dI_ds
            dC_da = de_da[i] * prod_except(e, i)
            dC_ds = de_ds[i] * prod_except(e, i)
            g_a[i] += (dU_da * enc - union * dC_da) / enc ** 2
            g_s[i] += (dU_ds * enc - union * dC_ds) / enc ** 2
    elif kind == "DIoU":
        rho2 = centre[0] ** 2 + centre[1] ** 2 + centre[2] ** 2
        diag2 = e[0] ** 2 + e[1] ** 2 + e[2] ** 2
        value = iou - rho2 / diag2
        for i in range(3):
            dd_da = 2.0 * e[i] * de_da[i]
            dd_ds = 2.0 * e[i] * de_ds[i]
            g_a[i] -= (2.0 * centre[i] * diag2 - rho2 * dd_da) / diag2 ** 2
            g_s[i] -= (-rho2 * dd_ds) / diag2 ** 2

    grad = np.zeros(7)
    # u = c*dx + s*dy, v = -s*dx + c*dy
    grad[0] = c * g_a[0] - s * g_a[1]
    grad[1] = s * g_a[0] + c * g_a[1]
    grad[2] = g_a[2]
    grad[3], grad[4], grad[5] = g_s
    return float(value), grad


def near_kink(pred: Box3D, gt: Box3D, margin: float = 1e-3) -> bool:
    """True if a gt-frame interval endpoint of pred lies within ``margin`` of
    one of gt's, i.e. close to a point where the OD-IoU family is not smooth."""
    centre, _ = _to_gt_frame(pred, gt)
    for a, s, t in zip(centre, (pred.l, pred.w, pred.h), (gt.l, gt.w, gt.h)):
        p_lo, p_hi, g_lo, g_hi = a - s / 2, a + s / 2, -t / 2, t / 2
        for u, v in ((p_hi, g_hi), (p_lo, g_lo), (p_hi, g_lo), (p_lo, g_hi)):
            if abs(u - v) < margin:
                return True
    return False


def od_iou_value(pred: Box3D, gt: Box3D, kind: str = "IoU") -> float:
    return od_iou_family(pred, gt, kind)[0]


# ---------------------------------------------------------------------------
# grid-count oracle


def _column_spans(poly: np.ndarray, xs: np.ndarray):
    """For each vertical line x in ``xs``, the (ymin, ymax) of a convex polygon.

    Lines missing the polygon get ymin = +inf, ymax = -inf.
    """
    p = poly
    q = np.roll(poly, -1, axis=0)
    ymin = np.full(xs.shape, np.inf)
    ymax = np.full(xs.shape, -np.inf)
    for (px, py), (qx, qy) in zip(p, q):
        lo, hi = min(px, qx), max(px, qx)
        hit = (xs >= lo) & (xs <= hi)
        if not hit.any():
            continue
        if qx == px:
            y0, y1 = min(py, qy), max(py, qy)
            ymin = np.where(hit, np.minimum(ymin, y0), ymin)
            ymax = np.where(hit, np.maximum(ymax, y1), ymax)
        else:
            y = py + (xs - px) * (qy - py) / (qx - px)
            ymin = np.where(hit, np.minimum(ymin, y), ymin)
            ymax = np.where(hit, np.maximum(ymax, y), ymax)
    return ymin, ymax


def _count_centres(lo: np.ndarray, hi: np.ndarray, cell: float) -> np.ndarray:
    """Number of lattice centres (j + 0.5) * cell inside [lo, hi]."""
    first = np.ceil(lo / cell - 0.5)
    last = np.floor(hi / cell - 0.5)
    n = last - first + 1
    n = np.where(np.isfinite(n), n, 0)
    return np.maximum(n, 0).astype(np.int64)


def _bev_counts(a: BoxBEV, b: BoxBEV, cell: float):
    """Cell-centre counts of a, b and a∩b on a global lattice of pitch ``cell``."""
    pa, pb = corners(a).vertices, corners(b).vertices
    x_lo = min(pa[:, 0].min(), pb[:, 0].min())
    x_hi = max(pa[:, 0].max(), pb[:, 0].max())
    i0 = math.ceil(x_lo / cell - 0.5)
    i1 = math.floor(x_hi / cell - 0.5)
    xs = (np.arange(i0, i1 + 1) + 0.5) * cell
    a_lo, a_hi = _column_spans(pa, xs)
    b_lo, b_hi = _column_spans(pb, xs)
    na = _count_centres(a_lo, a_hi, cell)
    nb = _count_centres(b_lo, b_hi, cell)
    ni = _count_centres(np.maximum(a_lo, b_lo), np.minimum(a_hi, b_hi), cell)
    return int(na.sum()), int(nb.sum()), int(ni.sum())


def rasterize_iou_oracle(a: BoxBEV, b: BoxBEV, cell: float) -> float:
    """BEV IoU by counting lattice cell centres covered by each box.

    Each lattice column is scanned analytically, so the cost is linear in the
    number of columns rather than cells.
    """
    if cell <= 0:
        raise ValueError("cell must be positive")
    na, nb, ni = _bev_counts(a, b, cell)
    union = na + nb - ni
    return ni / union if union > 0 else 0.0


def rasterize_iou3d_oracle(a: Box3D, b: Box3D, cell: float) -> float:
    """3D IoU by voxel-centre counting (BEV columns times vertical cells)."""
    if cell <= 0:
        raise ValueError("cell must be positive")
    na, nb, ni = _bev_counts(a.bev, b.bev, cell)

    def zc(lo, hi):
        return int(_count_centres(np.array([lo]), np.array([hi]), cell)[0])

    za = zc(a.cz - 0.5 * a.h, a.cz + 0.5 * a.h)
    zb = zc(b.cz - 0.5 * b.h, b.cz + 0.5 * b.h)
    zi = zc(max(a.cz - 0.5 * a.h, b.cz - 0.5 * b.h), min(a.cz + 0.5 * a.h, b.cz + 0.5 * b.h))
    inter = ni * zi
    union = na * za + nb * zb - inter
    return inter / union if union > 0 else 0.0
