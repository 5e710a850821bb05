"""Image I/O, superpixel decomposition, and per-superpixel features.

Everything downstream runs on the graph produced here: nodes are
superpixels carrying L1-normalized intensity histograms, edges connect
superpixels that share a pixel boundary and carry a boundary strength
in [0, 1] derived from the Sobel gradient along that boundary.
"""

from __future__ import annotations

import math
from collections import Counter, deque
from dataclasses import dataclass

import numpy as np

from .errors import DataError


class UnsupportedMagicError(DataError):
    """File is not a binary PGM (P5) or PPM (P6)."""


class MalformedHeaderError(DataError):
    """Header fields missing, non-numeric, or out of range."""


class TruncatedDataError(DataError):
    """Pixel payload shorter than the header promises."""


HIST_BINS = 8
FEATURE_DIM = 3 * HIST_BINS

# Intensity scale of the SLIC-style distance; spatial distances are
# normalized by the grid interval, intensities (range [0,1]) by this.
_INTENSITY_SCALE = 0.2
_KMEANS_ITERS = 10


@dataclass
class Image:
    """Decoded raster, row-major float64 values in [0, 1]."""

    width: int
    height: int
    channels: int
    data: np.ndarray  # shape (height, width, channels)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if self.data.shape != (self.height, self.width, self.channels):
            raise ValueError("image data shape does not match dimensions")
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise ValueError("image values must lie in [0, 1]")

    def intensity(self) -> np.ndarray:
        """Per-pixel mean over channels, shape (height, width)."""
        return self.data.mean(axis=2)


@dataclass
class SuperpixelMap:
    """Partition of the pixel grid into n 4-connected superpixels."""

    width: int
    height: int
    labels: np.ndarray  # shape (height, width), int32 ids in 0..n-1
    n: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int32)
        if self.labels.shape != (self.height, self.width):
            raise ValueError("label map shape does not match dimensions")


@dataclass
class SuperpixelGraph:
    """Adjacency structure over superpixels with per-node descriptors.

    edges hold unordered pairs (i, j) with i < j, one row per pair of
    adjacent superpixels; boundary_prob is parallel to edges.
    """

    smap: SuperpixelMap
    features: np.ndarray       # (n, FEATURE_DIM)
    edges: np.ndarray          # (E, 2) int32, canonical i < j
    boundary_prob: np.ndarray  # (E,) in [0, 1]
    areas: np.ndarray          # (n,) pixel counts
    centroids: np.ndarray      # (n, 2) pixel-center coordinates (x, y)

    @property
    def n(self) -> int:
        return self.smap.n


# ---------------------------------------------------------------------------
# PGM / PPM I/O
# ---------------------------------------------------------------------------

def _parse_netpbm_header(buf: bytes):
    """Return (magic, width, height, maxval, payload_offset)."""
    if len(buf) < 2:
        raise MalformedHeaderError("file too short for a magic number")
    magic = buf[:2].decode("ascii", errors="replace")
    pos = 2
    fields = []
    while len(fields) < 3:
        # skip whitespace and '#' comments between header tokens
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        token = buf[start:pos]
        if not token:
            raise MalformedHeaderError("incomplete header: missing size/maxval fields")
        if not token.isdigit():
            raise MalformedHeaderError(f"non-numeric header token {token!r}")
        fields.append(int(token))
    if pos >= len(buf):
        raise MalformedHeaderError("missing whitespace after maxval")
    pos += 1  # single whitespace byte separates header from payload
    return magic, fields[0], fields[1], fields[2], pos


def load_image(path) -> Image:
    """Decode a binary PGM (P5) or PPM (P6) file, scaling values to [0, 1]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) >= 2 and buf[:1] == b"P" and buf[:2] not in (b"P5", b"P6"):
        raise UnsupportedMagicError(f"unsupported magic number {buf[:2]!r}")
    magic, width, height, maxval, offset = _parse_netpbm_header(buf)
    if magic not in ("P5", "P6"):
        raise UnsupportedMagicError(f"unsupported magic number {magic!r}")
    if width <= 0 or height <= 0:
        raise MalformedHeaderError("non-positive image dimensions")
    if not 0 < maxval <= 255:
        raise MalformedHeaderError(f"maxval {maxval} outside (0, 255]")
    channels = 1 if magic == "P5" else 3
    need = width * height * channels
    payload = buf[offset : offset + need]
    if len(payload) < need:
        raise TruncatedDataError(
            f"expected {need} pixel bytes, found {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / maxval
    return Image(width, height, channels, arr.reshape(height, width, channels))


def save_image(img: Image, path) -> None:
    """Write img as binary PGM (1 channel) or PPM (3 channels), maxval 255."""
    magic = b"P5" if img.channels == 1 else b"P6"
    payload = np.rint(img.data * 255.0).clip(0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (img.width, img.height))
        fh.write(payload.tobytes())


def save_mask_pgm(mask: np.ndarray, path) -> None:
    """Write a binary pixel mask as a 0/255 PGM."""
    mask = np.asarray(mask)
    h, w = mask.shape
    img = Image(w, h, 1, (mask > 0).astype(np.float64).reshape(h, w, 1))
    save_image(img, path)


def save_superpixel_map(smap: SuperpixelMap, path) -> None:
    """Debug export: labels-mod-256 PGM plus an exact-label text sidecar."""
    img = Image(
        smap.width,
        smap.height,
        1,
        ((smap.labels % 256) / 255.0).reshape(smap.height, smap.width, 1),
    )
    save_image(img, path)
    with open(str(path) + ".labels.txt", "w") as fh:
        fh.write(f"{smap.width} {smap.height} {smap.n}\n")
        for row in smap.labels:
            fh.write(" ".join(str(v) for v in row) + "\n")


def load_superpixel_map(sidecar_path) -> SuperpixelMap:
    """Read the exact-label sidecar written by save_superpixel_map."""
    with open(sidecar_path) as fh:
        header = fh.readline().split()
        if len(header) != 3:
            raise DataError("superpixel sidecar header must be 'width height n'")
        width, height, n = (int(v) for v in header)
        labels = np.loadtxt(fh, dtype=np.int32, ndmin=2)
    if labels.shape != (height, width):
        raise DataError("superpixel sidecar body does not match header dimensions")
    return SuperpixelMap(width, height, labels, n)


# ---------------------------------------------------------------------------
# Superpixel decomposition
# ---------------------------------------------------------------------------

def compute_superpixels(img: Image, target_count: int) -> SuperpixelMap:
    """Grid-seeded SLIC-style clustering in (x, y, intensity) space.

    Runs a fixed number of k-means iterations from a regular seed grid,
    then enforces 4-connectivity by merging stray components into their
    best neighbor. Deterministic for fixed inputs; the final count n lies
    in [1, 4 * target_count]. With zero image gradient the result reduces
    to nearest-seed (Voronoi) blocks.
    """
    w, h = img.width, img.height
    if not 1 <= target_count <= w * h:
        raise ValueError(f"target_count must be in [1, {w * h}]")

    intensity = img.intensity()
    interval = math.sqrt(w * h / target_count)
    rows = max(1, round(h / interval))
    cols = max(1, round(w / interval))

    cy = (np.arange(rows) + 0.5) * h / rows - 0.5
    cx = (np.arange(cols) + 0.5) * w / cols - 0.5
    centers_y, centers_x = [a.ravel() for a in np.meshgrid(cy, cx, indexing="ij")]
    iy = np.clip(np.rint(centers_y).astype(int), 0, h - 1)
    ix = np.clip(np.rint(centers_x).astype(int), 0, w - 1)
    centers_i = intensity[iy, ix]

    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    reach = max(1, int(math.ceil(2 * interval)))
    assign = np.zeros((h, w), dtype=np.int32)

    for _ in range(_KMEANS_ITERS):
        dist = np.full((h, w), np.inf)
        assign.fill(-1)
        for k in range(len(centers_x)):
            x0 = max(0, int(centers_x[k]) - reach)
            x1 = min(w, int(centers_x[k]) + reach + 1)
            y0 = max(0, int(centers_y[k]) - reach)
            y1 = min(h, int(centers_y[k]) + reach + 1)
            if x0 >= x1 or y0 >= y1:
                continue
            dx = xs[y0:y1, x0:x1] - centers_x[k]
            dy = ys[y0:y1, x0:x1] - centers_y[k]
            di = (intensity[y0:y1, x0:x1] - centers_i[k]) / _INTENSITY_SCALE
            d2 = (dx * dx + dy * dy) / (interval * interval) + di * di
            closer = d2 < dist[y0:y1, x0:x1]
            dist[y0:y1, x0:x1][closer] = d2[closer]
            assign[y0:y1, x0:x1][closer] = k
        # pixels outside every search window: assign to globally nearest seed
        missing = assign < 0
        if missing.any():
            mx, my, mi = xs[missing], ys[missing], intensity[missing]
            d2 = (
                (mx[:, None] - centers_x) ** 2 + (my[:, None] - centers_y) ** 2
            ) / (interval * interval) + (
                (mi[:, None] - centers_i) / _INTENSITY_SCALE
            ) ** 2
            assign[missing] = np.argmin(d2, axis=1)
        for k in range(len(centers_x)):
            sel = assign == k
            if sel.any():
                centers_x[k] = xs[sel].mean()
                centers_y[k] = ys[sel].mean()
                centers_i[k] = intensity[sel].mean()

    min_size = max(1, (w * h) // (4 * target_count))
    labels, n = _enforce_connectivity(assign, min_size, 4 * target_count)
    return SuperpixelMap(w, h, labels, n)


def _enforce_connectivity(assign: np.ndarray, min_size: int, max_count: int):
    """Split the assignment into 4-connected components, then merge
    undersized components (and any surplus beyond max_count) into the
    adjacent component sharing the longest boundary."""
    h, w = assign.shape
    comp = np.full((h, w), -1, dtype=np.int32)
    sizes = []
    ncomp = 0
    for sy in range(h):
        for sx in range(w):
            if comp[sy, sx] >= 0:
                continue
            val = assign[sy, sx]
            queue = deque([(sy, sx)])
            comp[sy, sx] = ncomp
            count = 0
            while queue:
                y, x = queue.popleft()
                count += 1
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w and comp[ny, nx] < 0 and assign[ny, nx] == val:
                        comp[ny, nx] = ncomp
                        queue.append((ny, nx))
            sizes.append(count)
            ncomp += 1

    # boundary lengths between components
    contact: dict[int, Counter] = {c: Counter() for c in range(ncomp)}
    a, b = comp[:, :-1].ravel(), comp[:, 1:].ravel()
    for pa, pb in zip(a[a != b], b[a != b]):
        contact[pa][pb] += 1
        contact[pb][pa] += 1
    a, b = comp[:-1, :].ravel(), comp[1:, :].ravel()
    for pa, pb in zip(a[a != b], b[a != b]):
        contact[pa][pb] += 1
        contact[pb][pa] += 1

    parent = list(range(ncomp))

    def find(c):
        while parent[c] != c:
            parent[c] = parent[parent[c]]
            c = parent[c]
        return c

    size_of = dict(enumerate(sizes))

    def merge(src, dst):
        parent[src] = dst
        size_of[dst] += size_of.pop(src)
        for nbr, length in contact.pop(src).items():
            nbr = find(nbr)
            if nbr == dst:
                continue
            contact[dst][nbr] += length
            contact[nbr][dst] += length
            contact[nbr].pop(src, None)
        contact[dst].pop(src, None)

    def merge_one(candidates) -> bool:
        """Merge the smallest candidate into its longest-boundary neighbor."""
        mergeable = [c for c in candidates if contact[c]]
        if not mergeable:
            return False
        src = min(mergeable, key=lambda c: (size_of[c], c))
        neighbors = {find(n): l for n, l in contact[src].items() if find(n) != src}
        if not neighbors:
            return False
        dst = max(neighbors, key=lambda n: (neighbors[n], -n))
        merge(src, dst)
        return True

    while True:
        small = [c for c, s in size_of.items() if s < min_size]
        if not small or not merge_one(small):
            break
    while len(size_of) > max_count:
        if not merge_one(list(size_of)):
            break

    roots = np.array([find(c) for c in range(ncomp)], dtype=np.int32)
    comp = roots[comp]
    # contiguous ids in raster order of first appearance
    order = {}
    flat = comp.ravel()
    for v in flat:
        if v not in order:
            order[v] = len(order)
    remap = np.zeros(ncomp, dtype=np.int32)
    for old, new in order.items():
        remap[old] = new
    return remap[comp], len(order)


# ---------------------------------------------------------------------------
# Features and boundary strengths
# ---------------------------------------------------------------------------

def _sobel_magnitude(intensity: np.ndarray) -> np.ndarray:
    """Gradient magnitude with the 3x3 Sobel kernel, replicate borders."""
    p = np.pad(intensity, 1, mode="edge")
    gx = (
        (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:])
        - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    )
    gy = (
        (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:])
        - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    )
    return np.hypot(gx, gy)


def extract_features(img: Image, smap: SuperpixelMap, bins: int = HIST_BINS) -> SuperpixelGraph:
    """Per-superpixel histograms plus the boundary-weighted adjacency.

    Descriptors are `bins`-bin intensity histograms per channel (grayscale
    is expanded to three identical channels, so D = 3 * bins, 24 by
    default), each block L1-normalized. boundary_prob of an edge is the
    mean Sobel gradient magnitude over the pixels incident to the shared
    boundary, clamped to [0, 1].
    """
    if (img.height, img.width) != (smap.height, smap.width):
        raise ValueError("superpixel map does not match image dimensions")
    if bins < 1:
        raise ValueError("bins must be positive")
    h, w, n = img.height, img.width, smap.n
    dim = 3 * bins
    data = img.data if img.channels == 3 else np.repeat(img.data, 3, axis=2)
    labels = smap.labels

    binned = np.minimum((data * bins).astype(np.int64), bins - 1)
    features = np.zeros((n, dim))
    for ch in range(3):
        idx = labels.ravel() * dim + ch * bins + binned[:, :, ch].ravel()
        counts = np.bincount(idx, minlength=n * dim)
        features += counts.reshape(n, dim)
    features = features.reshape(n, 3, bins)
    block_sums = features.sum(axis=2, keepdims=True)
    np.divide(features, block_sums, out=features, where=block_sums > 0)
    features = features.reshape(n, dim)

    areas = np.bincount(labels.ravel(), minlength=n).astype(np.int64)
    xs, ys = np.meshgrid(np.arange(w), np.arange(h))
    cx = np.bincount(labels.ravel(), weights=(xs + 0.5).ravel(), minlength=n) / areas
    cy = np.bincount(labels.ravel(), weights=(ys + 0.5).ravel(), minlength=n) / areas
    centroids = np.column_stack([cx, cy])

    grad = _sobel_magnitude(img.intensity())
    pair_lo, pair_hi, pair_val = [], [], []
    for la, lb, ga, gb in (
        (labels[:, :-1], labels[:, 1:], grad[:, :-1], grad[:, 1:]),
        (labels[:-1, :], labels[1:, :], grad[:-1, :], grad[1:, :]),
    ):
        diff = la != lb
        lo = np.minimum(la[diff], lb[diff])
        hi = np.maximum(la[diff], lb[diff])
        pair_lo.append(lo)
        pair_hi.append(hi)
        pair_val.append(0.5 * (ga[diff] + gb[diff]))
    lo = np.concatenate(pair_lo) if pair_lo else np.empty(0, dtype=np.int64)
    hi = np.concatenate(pair_hi) if pair_hi else np.empty(0, dtype=np.int64)
    val = np.concatenate(pair_val) if pair_val else np.empty(0)

    if lo.size:
        key = lo.astype(np.int64) * n + hi
        uniq, inverse = np.unique(key, return_inverse=True)
        sums = np.bincount(inverse, weights=val, minlength=len(uniq))
        counts = np.bincount(inverse, minlength=len(uniq))
        edges = np.column_stack([uniq // n, uniq % n]).astype(np.int32)
        boundary = np.clip(sums / counts, 0.0, 1.0)
    else:
        edges = np.empty((0, 2), dtype=np.int32)
        boundary = np.empty(0)

    return SuperpixelGraph(smap, features, edges, boundary, areas, centroids)


def labels_to_mask(labeling: np.ndarray, smap: SuperpixelMap) -> np.ndarray:
    """Lift a per-superpixel binary labeling to the pixel grid."""
    labeling = np.asarray(labeling).astype(np.uint8)
    if labeling.shape != (smap.n,):
        raise ValueError("labeling length does not match superpixel count")
    return labeling[smap.labels]
