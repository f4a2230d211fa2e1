"""CPU forward splatting renderer.

Splats are projected with the first-order perspective Jacobian, sorted
front to back, and alpha-composited per pixel. Work is split into row bands
and, within a band, into rank-ordered splat chunks; the per-pixel
transmittance state carries across chunks, so every pixel sees the exact
same sequence of floating-point operations whatever the band/chunk layout.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .gaussians import SceneGaussians
from .geometry import Camera, Z_NEAR

COV_FLOOR = 0.3  # isotropic low-pass added to the 2D covariance, px^2
SIGMA_CUTOFF = 3.0
T_MIN = 1e-4
PAIR_BUDGET = 1_500_000
GUARD_BAND = 1.3  # splat centres beyond this multiple of the half-extent are culled


@dataclass
class Splat2D:
    xy: np.ndarray  # (K, 2) continuous pixel position
    cov: np.ndarray  # (K, 2, 2)
    conic: np.ndarray  # (K, 3): inverse covariance (a, b, c)
    depth: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    bbox: np.ndarray  # (K, 4): u0, u1, v0, v1 inclusive


@dataclass
class RenderStats:
    splats: int = 0
    culled: int = 0
    skipped_non_psd: int = 0
    pairs: int = 0


def project_splats(scene: SceneGaussians, cam: Camera, stats: RenderStats) -> tuple:
    """Project to 2D splats; returns (Splat2D, original indices), depth sorted."""
    k = len(scene)
    stats.splats = k
    if k == 0:
        empty = np.zeros((0,))
        return Splat2D(np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros((0, 3)), empty, empty,
                       np.zeros((0, 3)), np.zeros((0, 4), dtype=np.int64)), np.zeros(0, dtype=np.int64)
    rot = cam.rotation
    pc = scene.means @ rot.T + cam.translation
    z = pc[:, 2]
    front = np.flatnonzero(z > Z_NEAR)
    pc, z = pc[front], z[front]
    sigma = scene.take(front).covariances()
    sigma_c = rot @ sigma @ rot.T
    # the affine approximation blows up far off-axis, so the Jacobian is
    # evaluated with the tangents clamped to the guard band
    lim_x = GUARD_BAND * 0.5 * cam.width / cam.fx
    lim_y = GUARD_BAND * 0.5 * cam.height / cam.fy
    tx = (pc[:, 0] / z - (cam.cx - 0.5 * cam.width) / cam.fx).clip(-lim_x, lim_x)
    ty = (pc[:, 1] / z - (cam.cy - 0.5 * cam.height) / cam.fy).clip(-lim_y, lim_y)
    jac = np.zeros((len(front), 2, 3))
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * (tx + (cam.cx - 0.5 * cam.width) / cam.fx) / z
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * (ty + (cam.cy - 0.5 * cam.height) / cam.fy) / z
    cov = jac @ sigma_c @ np.swapaxes(jac, 1, 2)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    cov[:, 0, 0] += COV_FLOOR
    cov[:, 1, 1] += COV_FLOOR
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    psd = (det > 0) & (a > 0) & np.isfinite(det)
    stats.skipped_non_psd = int((~psd).sum())

    x = cam.fx * pc[:, 0] / z + cam.cx
    y = cam.fy * pc[:, 1] / z + cam.cy
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    r = SIGMA_CUTOFF * np.sqrt(np.maximum(lam_max, 0.0))
    with np.errstate(invalid="ignore"):
        u0 = np.ceil(x - r - 0.5)
        u1 = np.floor(x + r - 0.5)
        v0 = np.ceil(y - r - 0.5)
        v1 = np.floor(y + r - 0.5)
    u0 = np.maximum(u0, 0)
    v0 = np.maximum(v0, 0)
    u1 = np.minimum(u1, cam.width - 1)
    v1 = np.minimum(v1, cam.height - 1)
    half_w, half_h = 0.5 * cam.width, 0.5 * cam.height
    in_band = (np.abs(x - half_w) <= GUARD_BAND * half_w) & (np.abs(y - half_h) <= GUARD_BAND * half_h)
    on_screen = psd & in_band & (u0 <= u1) & (v0 <= v1)
    stats.culled = k - int(on_screen.sum()) - stats.skipped_non_psd
    sel = np.flatnonzero(on_screen)
    orig = front[sel]

    det_s = det[sel]
    conic = np.stack([c[sel] / det_s, -b[sel] / det_s, a[sel] / det_s], axis=1)
    col = scene.colors[orig]
    op = scene.opacities[orig]
    depth = z[sel]
    # sort front to back; ties resolved by splat content, then input position
    order = np.lexsort((orig, col[:, 2], col[:, 1], col[:, 0], op, y[sel], x[sel], depth))
    bbox = np.stack([u0, u1, v0, v1], axis=1)[sel].astype(np.int64)
    s2d = Splat2D(
        xy=np.stack([x[sel], y[sel]], axis=1)[order],
        cov=cov[sel][order],
        conic=conic[order],
        depth=depth[order],
        opacity=op[order],
        color=col[order],
        bbox=bbox[order],
    )
    return s2d, orig[order]


def _composite_chunk(s: Splat2D, idx, row0, row1, width, color_acc, trans, stats):
    """Fold splats `idx` (already in front-to-back order) into a band's state."""
    bb = s.bbox[idx]
    v0 = np.maximum(bb[:, 2], row0)
    v1 = np.minimum(bb[:, 3], row1 - 1)
    bw = bb[:, 1] - bb[:, 0] + 1
    bh = v1 - v0 + 1
    sizes = bw * bh
    total = int(sizes.sum())
    if total == 0:
        return
    rep = np.repeat(np.arange(len(idx)), sizes)
    start = np.cumsum(sizes) - sizes
    k = np.arange(total) - np.repeat(start, sizes)
    bw_r = bw[rep]
    u = bb[rep, 0] + k % bw_r
    v = v0[rep] + k // bw_r
    g = idx[rep]
    dx = u + 0.5 - s.xy[g, 0]
    dy = v + 0.5 - s.xy[g, 1]
    con = s.conic[g]
    q = con[:, 0] * dx * dx + 2.0 * con[:, 1] * dx * dy + con[:, 2] * dy * dy
    inside = q <= SIGMA_CUTOFF ** 2
    g, q = g[inside], q[inside]
    pix = (v[inside] - row0) * width + u[inside]
    stats.pairs += len(g)
    if len(g) == 0:
        return
    w = s.opacity[g] * np.exp(-0.5 * q)
    # pairs arrive in splat-rank order; a stable sort by pixel keeps that order per pixel
    by_pix = np.argsort(pix, kind="stable")
    pix, g, w = pix[by_pix], g[by_pix], w[by_pix]
    first = np.flatnonzero(np.r_[True, pix[1:] != pix[:-1]])
    lengths = np.diff(np.r_[first, len(pix)])
    layer = np.arange(len(pix)) - np.repeat(first, lengths)
    by_layer = np.argsort(layer, kind="stable")
    pix, g, w = pix[by_layer], g[by_layer], w[by_layer]
    bounds = np.r_[0, np.cumsum(np.bincount(layer))]
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        p = pix[lo:hi]
        t = trans[p]
        live = t >= T_MIN
        if not live.any():
            continue
        p, t, wl, gl = p[live], t[live], w[lo:hi][live], g[lo:hi][live]
        color_acc[p] += (t * wl)[:, None] * s.color[gl]
        trans[p] = t * (1.0 - wl)


def _render_band(s: Splat2D, row0, row1, width, stats):
    n = (row1 - row0) * width
    color_acc = np.zeros((n, 3))
    trans = np.ones(n)
    hit = np.flatnonzero((s.bbox[:, 2] < row1) & (s.bbox[:, 3] >= row0))
    if len(hit):
        bb = s.bbox[hit]
        sizes = (bb[:, 1] - bb[:, 0] + 1) * (np.minimum(bb[:, 3], row1 - 1) - np.maximum(bb[:, 2], row0) + 1)
        csum = np.cumsum(sizes)
        start = 0
        while start < len(hit):
            base = csum[start - 1] if start else 0
            stop = int(np.searchsorted(csum, base + PAIR_BUDGET, side="right"))
            stop = max(stop, start + 1)
            _composite_chunk(s, hit[start:stop], row0, row1, width, color_acc, trans, stats)
            start = stop
    return color_acc, trans


def render(scene: SceneGaussians, cam: Camera, background=(0.0, 0.0, 0.0), band_rows: int = 16,
           jobs: int = 1, return_stats: bool = False):
    """H x W x 3 image in [0, 1]."""
    stats = RenderStats()
    s, _ = project_splats(scene, cam, stats)
    bg = np.asarray(background, dtype=np.float64)
    bands = [(r, min(r + band_rows, cam.height)) for r in range(0, cam.height, band_rows)]
    band_stats = [RenderStats() for _ in bands]

    def work(k):
        r0, r1 = bands[k]
        return _render_band(s, r0, r1, cam.width, band_stats[k])

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(work, range(len(bands))))
    else:
        results = [work(k) for k in range(len(bands))]
    color = np.concatenate([c for c, _ in results])
    trans = np.concatenate([t for _, t in results])
    color = color + trans[:, None] * bg
    stats.pairs = sum(b.pairs for b in band_stats)
    image = np.clip(color, 0.0, 1.0).reshape(cam.height, cam.width, 3)
    if return_stats:
        return image, stats
    return image
