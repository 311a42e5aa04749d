"""Grid-topology meshes, vertex deformation, differentiable rasterization and shape regularizers.

Visibility is a hard z-buffer evaluated in numpy; the winning triangle's
perspective-correct barycentrics, depth and texture lookup are then recomputed
with tensor ops so gradients reach vertices and textures. Pixels just outside
a silhouette receive a soft coverage ``2*sigmoid(-4*d/band)`` from their
distance ``d`` to the nearest triangle, which carries boundary gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import NEAR_EPS, CameraTrack

EDGE_BAND = 1.5


@dataclass
class GridMesh:
    """Rectangular vertex grid (rows x cols), optionally wrapped along columns."""

    rows: int
    cols: int
    vertices: np.ndarray
    faces: np.ndarray
    uv: np.ndarray
    face_uv: np.ndarray
    wrap: bool = True
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_vertices(self) -> int:
        return self.rows * self.cols

    def index(self, r, c):
        return r * self.cols + c

    # topology tables used by the regularizers, built lazily
    def laplacian_neighbours(self) -> tuple[np.ndarray, np.ndarray]:
        if "lap" not in self._cache:
            centres, neigh = [], []
            for r in range(1, self.rows - 1):
                cols = range(self.cols) if self.wrap else range(1, self.cols - 1)
                for c in cols:
                    centres.append(self.index(r, c))
                    neigh.append(
                        [
                            self.index(r - 1, c),
                            self.index(r + 1, c),
                            self.index(r, (c - 1) % self.cols),
                            self.index(r, (c + 1) % self.cols),
                        ]
                    )
            self._cache["lap"] = (np.array(centres, dtype=np.intp), np.array(neigh, dtype=np.intp).reshape(-1, 4))
        return self._cache["lap"]

    def edges(self) -> np.ndarray:
        if "edges" not in self._cache:
            e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
            self._cache["edges"] = np.unique(np.sort(e, axis=1), axis=0)
        return self._cache["edges"]

    def interior_edge_faces(self) -> np.ndarray:
        """Pairs of face indices sharing an edge."""
        if "adj" not in self._cache:
            owner: dict[tuple[int, int], int] = {}
            pairs = []
            for f, tri in enumerate(self.faces):
                for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                    key = (min(a, b), max(a, b))
                    if key in owner:
                        pairs.append((owner.pop(key), f))
                    else:
                        owner[key] = f
            self._cache["adj"] = np.array(pairs, dtype=np.intp).reshape(-1, 2)
        return self._cache["adj"]


def _grid_faces(rows: int, cols: int, wrap: bool) -> np.ndarray:
    faces = []
    last = cols if wrap else cols - 1
    for r in range(rows - 1):
        for c in range(last):
            a = r * cols + c
            b = r * cols + (c + 1) % cols
            d = (r + 1) * cols + c
            e = (r + 1) * cols + (c + 1) % cols
            faces.append((a, d, b))
            faces.append((b, d, e))
    return np.array(faces, dtype=np.intp)


def _face_uv(faces: np.ndarray, uv: np.ndarray, wrap: bool) -> np.ndarray:
    fuv = uv[faces].copy()
    if wrap:
        # corners sitting on the seam take u=1 when the face spans it
        span = fuv[..., 0].max(axis=1) - fuv[..., 0].min(axis=1)
        seam = span > 0.5
        fuv[seam, :, 0] = np.where(fuv[seam, :, 0] < 0.25, fuv[seam, :, 0] + 1.0, fuv[seam, :, 0])
    return fuv


def make_uv_sphere(rows: int, cols: int) -> GridMesh:
    """Unit UV-sphere with ``rows`` latitude rings and ``cols`` azimuthal sectors.

    Rings sit at polar angles ``pi*(r + 0.5)/rows`` so every triangle has
    non-zero area; the two polar caps stay open.
    """
    if rows < 2 or cols < 3:
        raise ValueError(f"UV-sphere needs rows >= 2 and cols >= 3, got {rows}x{cols}")
    theta = np.pi * (np.arange(rows) + 0.5) / rows
    phi = 2 * np.pi * np.arange(cols) / cols
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    verts = np.stack([np.sin(th) * np.cos(ph), np.cos(th), np.sin(th) * np.sin(ph)], axis=-1).reshape(-1, 3)
    uv = np.stack(
        np.meshgrid(np.arange(cols) / cols, (np.arange(rows) + 0.5) / rows, indexing="xy"), axis=-1
    ).reshape(-1, 2)
    faces = _grid_faces(rows, cols, wrap=True)
    return GridMesh(rows, cols, verts, faces, uv, _face_uv(faces, uv, True), wrap=True)


def make_plane_grid(rows: int, cols: int, spacing: float = 1.0, z: float = 0.0) -> GridMesh:
    """Flat, non-wrapping grid in the plane ``z = const`` (x to the right, y down)."""
    ys, xs = np.meshgrid(np.arange(rows) * spacing, np.arange(cols) * spacing, indexing="ij")
    verts = np.stack([xs, ys, np.full_like(xs, z)], axis=-1).reshape(-1, 3).astype(np.float64)
    uv = np.stack(
        np.meshgrid(np.linspace(0, 1, cols), np.linspace(0, 1, rows), indexing="xy"), axis=-1
    ).reshape(-1, 2)
    faces = _grid_faces(rows, cols, wrap=False)
    return GridMesh(rows, cols, verts, faces, uv, _face_uv(faces, uv, False), wrap=False)


def apply_vertex_transforms(template: np.ndarray, transforms: Tensor, gamma: float) -> Tensor:
    """``v * exp(t0) + gamma * tanh(t1..3)`` for every vertex.

    ``transforms`` has shape (..., rows, cols, 4) matching the template grid;
    the result has shape (..., rows*cols, 3).
    """
    lead = transforms.shape[:-3]
    t = transforms.reshape(*lead, -1, 4)
    if t.shape[-2] != len(template):
        raise ad.ShapeError(f"transform grid {transforms.shape[-3:-1]} does not match {len(template)} vertices")
    scale = ad.exp(t[..., 0:1])
    offset = ad.tanh(t[..., 1:4]) * gamma
    return ad.tensor(template) * scale + offset


# ---------------------------------------------------------------------------
# rasterization


@dataclass
class Raster:
    rgb: Tensor  # (n, H, W, 3), zero where uncovered
    depth: Tensor  # (n, H, W), zero where uncovered
    coverage: Tensor  # (n, H, W) in [0, 1]
    face_id: np.ndarray  # (n, H, W) winning face, -1 where uncovered


def _pairs_from_bboxes(x0, x1, y0, y1):
    w = np.maximum(x1 - x0 + 1, 0)
    h = np.maximum(y1 - y0 + 1, 0)
    cnt = w * h
    owner = np.repeat(np.arange(len(cnt)), cnt)
    start = np.repeat(np.cumsum(cnt) - cnt, cnt)
    offs = np.arange(cnt.sum()) - start
    px = x0[owner] + offs % w[owner]
    py = y0[owner] + offs // w[owner]
    return owner, px, py


def _cross(ax, ay, bx, by):
    return ax * by - ay * bx


def _bilinear_texture(texture_flat: Tensor, view: np.ndarray, uv, th: int, tw: int):
    """Sample (wrap u, clamp v) from a flattened (n*th*tw, 3) texture at per-pixel ``uv``."""
    u, v = uv
    udata = u.data if isinstance(u, Tensor) else u
    vdata = v.data if isinstance(v, Tensor) else v
    xs = udata * tw - 0.5
    ys = vdata * th - 0.5
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = (u * tw - 0.5) - x0 if isinstance(u, Tensor) else xs - x0
    fy = (v * th - 0.5) - y0 if isinstance(v, Tensor) else ys - y0
    xi0 = np.mod(x0.astype(np.intp), tw)
    xi1 = np.mod(x0.astype(np.intp) + 1, tw)
    yi0 = np.clip(y0.astype(np.intp), 0, th - 1)
    yi1 = np.clip(y0.astype(np.intp) + 1, 0, th - 1)
    base = view * th * tw
    out = None
    for yi, wy in ((yi0, 1 - fy), (yi1, fy)):
        for xi, wx in ((xi0, 1 - fx), (xi1, fx)):
            w = wx * wy
            if not isinstance(w, Tensor):
                w = ad.tensor(np.asarray(w, dtype=texture_flat.dtype))
            term = ad.take(texture_flat, base + yi * tw + xi) * w.reshape(-1, 1)
            out = term if out is None else out + term
    return out


def rasterize_views(
    verts_cam: Tensor,
    mesh: GridMesh,
    textures: Tensor,
    intrinsics,
    height: int,
    width: int,
    edge_band: float = EDGE_BAND,
) -> Raster:
    """Rasterize ``n`` posed copies of a mesh.

    ``verts_cam`` is (n, V, 3) in camera space; ``textures`` is (n, th, tw, 3)
    or (1, th, tw, 3) shared across views.
    """
    fx, fy, cx, cy = intrinsics
    n, nv, _ = verts_cam.shape
    faces = mesh.faces
    nf = len(faces)
    th, tw = textures.shape[1:3]
    tex_views = textures.shape[0]
    dtype = verts_cam.dtype

    vc = verts_cam.data.astype(np.float64)
    z = vc[..., 2]
    zs = np.where(z > NEAR_EPS, z, 1.0)
    su = fx * vc[..., 0] / zs + cx
    sv = fy * vc[..., 1] / zs + cy

    fu = su[:, faces]  # (n, F, 3)
    fv = sv[:, faces]
    fz = z[:, faces]
    valid = np.all(fz > NEAR_EPS, axis=-1)
    area = _cross(fu[..., 1] - fu[..., 0], fv[..., 1] - fv[..., 0], fu[..., 2] - fu[..., 0], fv[..., 2] - fv[..., 0])
    valid &= np.abs(area) > 1e-12

    pad = edge_band if edge_band > 0 else 0.0
    x0 = np.ceil(fu.min(-1) - pad - 0.5).astype(np.intp).clip(0, width)
    x1 = np.floor(fu.max(-1) + pad - 0.5).astype(np.intp).clip(-1, width - 1)
    y0 = np.ceil(fv.min(-1) - pad - 0.5).astype(np.intp).clip(0, height)
    y1 = np.floor(fv.max(-1) + pad - 0.5).astype(np.intp).clip(-1, height - 1)
    vi, fi = np.nonzero(valid)
    owner, px, py = _pairs_from_bboxes(x0[vi, fi], x1[vi, fi], y0[vi, fi], y1[vi, fi])
    pv, pf = vi[owner], fi[owner]
    pu_, pv_ = px + 0.5, py + 0.5

    au, bu, cu = fu[pv, pf, 0], fu[pv, pf, 1], fu[pv, pf, 2]
    av, bv, cv = fv[pv, pf, 0], fv[pv, pf, 1], fv[pv, pf, 2]
    ar = area[pv, pf]
    w0 = _cross(bu - pu_, bv - pv_, cu - pu_, cv - pv_) / ar
    w1 = _cross(cu - pu_, cv - pv_, au - pu_, av - pv_) / ar
    w2 = 1.0 - w0 - w1
    inside = (w0 >= -1e-9) & (w1 >= -1e-9) & (w2 >= -1e-9)
    zz = fz[pv, pf]
    inv_depth = w0 / zz[:, 0] + w1 / zz[:, 1] + w2 / zz[:, 2]
    pix = (pv * height + py) * width + px

    # z-buffer: nearest inside pair per pixel
    ins = np.nonzero(inside)[0]
    order = ins[np.lexsort((-inv_depth[ins], pix[ins]))]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix[order][1:] != pix[order][:-1]
    win = order[first]

    face_id = np.full(n * height * width, -1, dtype=np.intp)
    face_id[pix[win]] = pf[win]
    covered = face_id >= 0
    total = n * height * width

    # differentiable attributes for the winning pairs
    wv, wf = pv[win], pf[win]
    flat_verts = verts_cam.reshape(n * nv, 3)
    corner = [ad.take(flat_verts, wv * nv + faces[wf, k]) for k in range(3)]
    cu_t = [c[:, 0] * fx / c[:, 2] + cx for c in corner]
    cv_t = [c[:, 1] * fy / c[:, 2] + cy for c in corner]
    ppu = ad.tensor(pu_[win].astype(dtype))
    ppv = ad.tensor(pv_[win].astype(dtype))
    area_t = (cu_t[1] - cu_t[0]) * (cv_t[2] - cv_t[0]) - (cv_t[1] - cv_t[0]) * (cu_t[2] - cu_t[0])
    b0 = ((cu_t[1] - ppu) * (cv_t[2] - ppv) - (cv_t[1] - ppv) * (cu_t[2] - ppu)) / area_t
    b1 = ((cu_t[2] - ppu) * (cv_t[0] - ppv) - (cv_t[2] - ppv) * (cu_t[0] - ppu)) / area_t
    b2 = 1.0 - b0 - b1
    q = [b0 / corner[0][:, 2], b1 / corner[1][:, 2], b2 / corner[2][:, 2]]
    s = q[0] + q[1] + q[2]
    depth_vals = 1.0 / s
    fuv = mesh.face_uv[wf].astype(dtype)  # (k, 3, 2)
    tex_u = (q[0] * fuv[:, 0, 0] + q[1] * fuv[:, 1, 0] + q[2] * fuv[:, 2, 0]) * depth_vals
    tex_v = (q[0] * fuv[:, 0, 1] + q[1] * fuv[:, 1, 1] + q[2] * fuv[:, 2, 1]) * depth_vals
    tex_flat = textures.reshape(tex_views * th * tw, 3)
    tview = wv if tex_views == n else np.zeros_like(wv)
    colour = _bilinear_texture(tex_flat, tview, (tex_u, tex_v), th, tw)

    rgb_parts, rgb_idx = [colour], [pix[win]]
    depth_parts, depth_idx = [depth_vals], [pix[win]]
    cov_parts = [ad.tensor(np.ones(len(win), dtype=dtype))]
    cov_idx = [pix[win]]

    if edge_band > 0:
        band = _edge_band(
            pix, pv, pf, inside, covered, au, bu, cu, av, bv, cv, w0, w1, w2, zz, pu_, pv_,
            mesh, flat_verts, nv, intrinsics, edge_band, dtype,
        )
        if band is not None:
            bpix, bcov, buv, bdepth, bview = band
            tview_b = bview if tex_views == n else np.zeros_like(bview)
            bcol = _bilinear_texture(tex_flat, tview_b, buv, th, tw)
            rgb_parts.append(bcol * bcov.reshape(-1, 1))
            rgb_idx.append(bpix)
            depth_parts.append(ad.tensor(bdepth.astype(dtype)))
            depth_idx.append(bpix)
            cov_parts.append(bcov)
            cov_idx.append(bpix)

    def assemble(parts, idx, trailing):
        vals = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
        return ad.scatter_add(vals, np.concatenate(idx), total).reshape(n, height, width, *trailing)

    rgb = assemble(rgb_parts, rgb_idx, (3,))
    depth = assemble(depth_parts, depth_idx, ())
    coverage = assemble(cov_parts, cov_idx, ())
    return Raster(rgb, depth, coverage, face_id.reshape(n, height, width))


def _edge_band(pix, pv, pf, inside, covered, au, bu, cu, av, bv, cv, w0, w1, w2, zz, pu_, pv_,
               mesh, flat_verts, nv, intrinsics, band, dtype):
    fx, fy, cx, cy = intrinsics
    faces = mesh.faces
    out = ~inside & ~covered[pix]
    if not out.any():
        return None
    idx = np.nonzero(out)[0]
    px_, py_ = pu_[idx], pv_[idx]
    tri = [(au[idx], av[idx]), (bu[idx], bv[idx]), (cu[idx], cv[idx])]
    dists = []
    for k in range(3):
        (ax_, ay_), (bx_, by_) = tri[k], tri[(k + 1) % 3]
        ex, ey = bx_ - ax_, by_ - ay_
        t = np.clip(((px_ - ax_) * ex + (py_ - ay_) * ey) / np.maximum(ex * ex + ey * ey, 1e-18), 0, 1)
        dists.append(np.hypot(px_ - ax_ - t * ex, py_ - ay_ - t * ey))
    dists = np.stack(dists, axis=1)
    best_edge = dists.argmin(axis=1)
    dmin = dists[np.arange(len(idx)), best_edge]
    near = dmin < band
    idx, best_edge, dmin = idx[near], best_edge[near], dmin[near]
    if len(idx) == 0:
        return None
    # keep the closest face per pixel
    order = np.lexsort((dmin, pix[idx]))
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix[idx][order][1:] != pix[idx][order][:-1]
    sel = order[first]
    idx, best_edge = idx[sel], best_edge[sel]

    view, face = pv[idx], pf[idx]
    ka = faces[face, best_edge]
    kb = faces[face, (best_edge + 1) % 3]
    va = ad.take(flat_verts, view * nv + ka)
    vb = ad.take(flat_verts, view * nv + kb)
    ua = va[:, 0] * fx / va[:, 2] + cx
    la = va[:, 1] * fy / va[:, 2] + cy
    ub = vb[:, 0] * fx / vb[:, 2] + cx
    lb = vb[:, 1] * fy / vb[:, 2] + cy
    qx = ad.tensor(pu_[idx].astype(dtype))
    qy = ad.tensor(pv_[idx].astype(dtype))
    ex, ey = ub - ua, lb - la
    tnum = ((qx - ua) * ex + (qy - la) * ey) / (ex * ex + ey * ey)
    t = ad.clip(tnum, 0.0, 1.0)
    dx = qx - ua - t * ex
    dy = qy - la - t * ey
    dist = ad.sqrt(dx * dx + dy * dy + 1e-12)
    cov = ad.sigmoid(dist * (-4.0 / band)) * 2.0

    # colour/depth from barycentrics clamped onto the triangle
    bw = np.stack([w0[idx], w1[idx], w2[idx]], axis=1).clip(0, None)
    bw /= np.maximum(bw.sum(axis=1, keepdims=True), 1e-12)
    q = bw / zz[idx]
    depth = 1.0 / q.sum(axis=1)
    persp = q * depth[:, None]
    fuv = mesh.face_uv[face]
    uv = (persp * fuv[..., 0]).sum(axis=1), (persp * fuv[..., 1]).sum(axis=1)
    return pix[idx], cov, uv, depth, view


def rasterize(vertices: Tensor, mesh: GridMesh, texture: Tensor, camera: CameraTrack, t: int,
              edge_band: float = EDGE_BAND) -> Raster:
    """Render one mesh (world-space ``vertices``, (V, 3)) into frame ``t`` of ``camera``."""
    vertices = ad.as_tensor(vertices)
    if vertices.shape[0] == 0:
        empty = ad.tensor(np.zeros((1, camera.height, camera.width)))
        return Raster(ad.tensor(np.zeros((1, camera.height, camera.width, 3))), empty, empty,
                      np.full((1, camera.height, camera.width), -1))
    E = camera.extrinsics[t].astype(vertices.dtype)
    cam = vertices @ ad.tensor(E[:3, :3].T.copy()) + ad.tensor(E[:3, 3].copy())
    texture = ad.as_tensor(texture)
    if texture.ndim == 3:
        texture = texture.reshape(1, *texture.shape)
    return rasterize_views(cam.reshape(1, *cam.shape), mesh, texture, camera.intrinsics,
                           camera.height, camera.width, edge_band)


# ---------------------------------------------------------------------------
# regularizers


def mesh_regularizers(vertices: Tensor, mesh: GridMesh) -> tuple[Tensor, Tensor, Tensor]:
    """Laplacian L2, crease (dihedral angle) L1 and edge-length-deviation L1.

    ``vertices`` is (..., V, 3); batch axes are averaged together with the mesh elements.
    """
    vertices = ad.as_tensor(vertices)
    ax = vertices.ndim - 2
    centres, neigh = mesh.laplacian_neighbours()
    if len(centres):
        avg = ad.take(vertices, neigh, axis=ax).mean(axis=-2)
        diff = ad.take(vertices, centres, axis=ax) - avg
        lap = (diff * diff).sum(axis=-1).mean()
    else:
        lap = ad.tensor(np.zeros((), dtype=vertices.dtype))

    fa = [ad.take(vertices, mesh.faces[:, k], axis=ax) for k in range(3)]
    normals = _cross3(fa[1] - fa[0], fa[2] - fa[0])
    adj = mesh.interior_edge_faces()
    if len(adj):
        n1 = ad.take(normals, adj[:, 0], axis=ax)
        n2 = ad.take(normals, adj[:, 1], axis=ax)
        c = _cross3(n1, n2)
        sin_part = ad.sqrt((c * c).sum(axis=-1) + 1e-20)
        cos_part = (n1 * n2).sum(axis=-1)
        crease = ad.abs(ad.atan2(sin_part, cos_part)).mean()
    else:
        crease = ad.tensor(np.zeros((), dtype=vertices.dtype))

    edges = mesh.edges()
    ev = ad.take(vertices, edges[:, 0], axis=ax) - ad.take(vertices, edges[:, 1], axis=ax)
    lengths = ad.sqrt((ev * ev).sum(axis=-1) + 1e-20)
    edge_var = ad.abs(lengths - lengths.mean(axis=-1, keepdims=True)).mean()
    return lap, crease, edge_var


def _cross3(a: Tensor, b: Tensor) -> Tensor:
    ax_, ay_, az_ = a[..., 0], a[..., 1], a[..., 2]
    bx_, by_, bz_ = b[..., 0], b[..., 1], b[..., 2]
    return ad.stack([ay_ * bz_ - az_ * by_, az_ * bx_ - ax_ * bz_, ax_ * by_ - ay_ * bx_], axis=-1)


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 dump of an (H, W, 3) float image in [0, 1] (or (H, W) greyscale)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    data = (np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
