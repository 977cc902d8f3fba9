"""Synthetic mast-cell scene generation, tiling, dataset splitting, and
image/mask file I/O.

Scenes imitate toluidine-blue histology: purple cells on a pale textured
background. Each cell is one of three border regimes — intact (crisp
anti-aliased ellipse), degranulating (ragged Fourier-modulated border
ringed by granule dots), dissolved (a dot cloud with no solid core) —
so segmentation quality can be compared across border types. Roughly
40% of cells are placed touching a neighbor, via chains whose expected
involved-cell fraction is exact under randomized rounding.

Everything is a pure function of (seed, config): identical seeds
reproduce every byte of image, mask, and metadata.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from segforge.tensor import ContractError, derive_seed, make_rng

__all__ = [
    "SceneConfig",
    "ImageSample",
    "PlacementError",
    "ImageFileError",
    "generate_scene",
    "tile",
    "split_scenes",
    "write_ppm",
    "read_ppm",
    "write_mask_pgm",
    "read_mask_pgm",
    "normalize",
    "generate_dataset",
    "load_manifest",
    "load_split",
]

STAGES = ("intact", "degranulating", "dissolved")


class PlacementError(RuntimeError):
    """Cell placement exceeded the retry budget."""


class ImageFileError(ValueError):
    """Malformed or truncated image file; message carries the byte offset."""


@dataclass(frozen=True)
class SceneConfig:
    height: int = 1024
    width: int = 1280
    cells_min: int = 5
    cells_max: int = 7
    stage_probs: tuple = (0.34, 0.33, 0.33)
    adjacency_fraction: float = 0.4
    radius_frac: tuple = (0.04, 0.065)  # of min(height, width)
    noise_sigma: float = 2.5
    background_rgb: tuple = (233, 229, 237)
    cell_rgb: tuple = (118, 62, 150)
    max_place_tries: int = 200

    def validate(self):
        if abs(sum(self.stage_probs) - 1.0) > 1e-9:
            raise ContractError("stage probabilities must sum to 1")
        if not 0.0 <= self.adjacency_fraction <= 1.0:
            raise ContractError("adjacency fraction must lie in [0, 1]")
        if self.cells_min < 1 or self.cells_max < self.cells_min:
            raise ContractError("invalid cell count range")


@dataclass
class ImageSample:
    rgb: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    meta: dict = field(default_factory=dict)
    supports: list = None  # per-cell boolean masks, kept on request


def _smooth_field(rng, h, w, cell=48, amp=1.0):
    """Low-frequency noise: a coarse Gaussian grid, bilinearly upsampled."""
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.normal(0.0, amp, (gh, gw))
    ys = np.linspace(0.0, gh - 1.0, h, endpoint=False)
    xs = np.linspace(0.0, gw - 1.0, w, endpoint=False)
    iy = ys.astype(int)
    ix = xs.astype(int)
    fy = (ys - iy)[:, None]
    fx = (xs - ix)[None, :]
    top = grid[iy][:, ix] * (1 - fx) + grid[iy][:, ix + 1] * fx
    bot = grid[iy + 1][:, ix] * (1 - fx) + grid[iy + 1][:, ix + 1] * fx
    return top * (1 - fy) + bot * fy


def _window(center, extent, h, w):
    cy, cx = center
    y0 = max(int(math.floor(cy - extent)), 0)
    y1 = min(int(math.ceil(cy + extent)) + 1, h)
    x0 = max(int(math.floor(cx - extent)), 0)
    x1 = min(int(math.ceil(cx + extent)) + 1, w)
    return y0, y1, x0, x1


def _add_dots(cov, rng, center, offsets, dot_radii, y0, x0):
    """Paint anti-aliased discs into a coverage window, in place."""
    h, w = cov.shape
    for (dy, dx), dr in zip(offsets, dot_radii):
        cy, cx = center[0] + dy - y0, center[1] + dx - x0
        ry0 = max(int(cy - dr - 2), 0)
        ry1 = min(int(cy + dr + 3), h)
        rx0 = max(int(cx - dr - 2), 0)
        rx1 = min(int(cx + dr + 3), w)
        if ry0 >= ry1 or rx0 >= rx1:
            continue
        yy, xx = np.mgrid[ry0:ry1, rx0:rx1]
        dist = np.sqrt((yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2)
        dot = np.clip(dr - dist + 0.5, 0.0, 1.0)
        np.maximum(cov[ry0:ry1, rx0:rx1], dot, out=cov[ry0:ry1, rx0:rx1])


def _cell_coverage(rng, stage, center, radius, h, w):
    """Continuous coverage in [0, 1] for one cell, over a local window."""
    extent = radius * 2.4
    y0, y1, x0, x1 = _window(center, extent, h, w)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dy = yy + 0.5 - center[0]
    dx = xx + 0.5 - center[1]
    cov = np.zeros((y1 - y0, x1 - x0))

    if stage in ("intact", "degranulating"):
        a = radius * rng.uniform(0.85, 1.2)
        b = radius * rng.uniform(0.85, 1.2)
        theta = rng.uniform(0.0, math.pi)
        u = (dx * math.cos(theta) + dy * math.sin(theta)) / a
        v = (-dx * math.sin(theta) + dy * math.cos(theta)) / b
        rho = np.sqrt(u * u + v * v)
        if stage == "degranulating":
            phi = np.arctan2(v, u)
            mod = np.ones_like(phi)
            for k in range(2, 8):
                amp = rng.uniform(0.02, 0.07)
                phase = rng.uniform(0.0, 2 * math.pi)
                mod += amp * np.cos(k * phi + phase)
            rho = rho / np.maximum(mod, 0.5)
        signed = (rho - 1.0) * (a + b) / 2.0
        cov = np.clip(0.5 - signed, 0.0, 1.0)

    if stage == "degranulating":
        n_dots = int(rng.integers(14, 30))
        angles = rng.uniform(0.0, 2 * math.pi, n_dots)
        dist = rng.uniform(1.05, 1.7, n_dots) * radius
        offsets = np.stack([dist * np.sin(angles), dist * np.cos(angles)], axis=1)
        dot_radii = np.maximum(rng.uniform(0.05, 0.12, n_dots) * radius, 0.9)
        _add_dots(cov, rng, center, offsets, dot_radii, y0, x0)
    elif stage == "dissolved":
        n_dots = int(rng.integers(35, 70))
        offsets = rng.normal(0.0, 0.5 * radius, (n_dots, 2))
        dot_radii = np.maximum(rng.uniform(0.06, 0.15, n_dots) * radius, 0.9)
        _add_dots(cov, rng, center, offsets, dot_radii, y0, x0)
        while (cov >= 0.5).sum() < 20:
            extra = rng.normal(0.0, 0.4 * radius, (5, 2))
            extra_r = np.maximum(rng.uniform(0.08, 0.15, 5) * radius, 1.0)
            _add_dots(cov, rng, center, extra, extra_r, y0, x0)

    return cov, (y0, y1, x0, x1)


def _chain_size(rng, fraction, n):
    """Randomized rounding keeps the expected involved fraction exact."""
    target = fraction * n
    m = int(math.floor(target))
    if rng.random() < target - m:
        m += 1
    if m == 1:
        # A chain of one touches nobody; round to the nearer honest size.
        m = 2 if rng.random() < 0.5 else 0
    return min(m, n)


def _place_cells(rng, cfg, n, radii):
    h, w = cfg.height, cfg.width
    m = _chain_size(rng, cfg.adjacency_fraction, n)
    centers = []
    pairs = []

    def in_bounds(c, r):
        margin = r * 1.2
        return margin <= c[0] <= h - margin and margin <= c[1] <= w - margin

    def well_separated(c, r, factor, skip=()):
        for j, (cj, rj) in enumerate(zip(centers, radii)):
            if j in skip:
                continue
            if math.hypot(c[0] - cj[0], c[1] - cj[1]) < factor * (r + rj):
                return False
        return True

    for i in range(n):
        placed = False
        # Crowded draws get a second round with a slightly smaller gap;
        # 1.12 still keeps non-chain borders apart.
        for factor in (1.25, 1.12):
            for _ in range(cfg.max_place_tries):
                if 0 < i < m:
                    # Touch any earlier chain member, not only the previous
                    # one; crowded anchors would otherwise strand the chain.
                    j = int(rng.integers(0, i))
                    anchor = centers[j]
                    ang = rng.uniform(0.0, 2 * math.pi)
                    dist = (radii[i] + radii[j]) * rng.uniform(0.75, 0.95)
                    cand = (anchor[0] + dist * math.sin(ang), anchor[1] + dist * math.cos(ang))
                    ok = in_bounds(cand, radii[i]) and well_separated(cand, radii[i], factor, skip=(j,))
                else:
                    cand = (rng.uniform(0, h), rng.uniform(0, w))
                    ok = in_bounds(cand, radii[i]) and well_separated(cand, radii[i], factor)
                if ok:
                    centers.append(cand)
                    if 0 < i < m:
                        pairs.append((j, i))
                    placed = True
                    break
            if placed:
                break
        if not placed:
            raise PlacementError(f"could not place cell {i} after {2 * cfg.max_place_tries} tries")
    return centers, pairs


def generate_scene(seed, cfg=None, keep_supports=False):
    """Render one scene deterministically from (seed, cfg)."""
    cfg = cfg or SceneConfig()
    cfg.validate()
    rng = make_rng(seed)
    h, w = cfg.height, cfg.width

    n = int(rng.integers(cfg.cells_min, cfg.cells_max + 1))
    stages = [STAGES[i] for i in rng.choice(len(STAGES), size=n, p=cfg.stage_probs)]
    rmin, rmax = cfg.radius_frac
    radii = rng.uniform(rmin, rmax, n) * min(h, w)
    centers, pairs = _place_cells(rng, cfg, n, radii)

    canvas = np.empty((h, w, 3))
    blotch = _smooth_field(rng, h, w, cell=max(min(h, w) // 12, 8), amp=4.0)
    for c in range(3):
        canvas[:, :, c] = cfg.background_rgb[c] + blotch * rng.uniform(0.7, 1.1)

    mask = np.zeros((h, w), dtype=bool)
    supports = []
    base = np.array(cfg.cell_rgb, dtype=np.float64)
    for i in range(n):
        cov, (y0, y1, x0, x1) = _cell_coverage(rng, stages[i], centers[i], radii[i], h, w)
        color = np.clip(base + rng.normal(0.0, 8.0, 3), 0, 255)
        speckle = rng.normal(0.0, 5.0, cov.shape)
        region = canvas[y0:y1, x0:x1]
        tint = color[None, None, :] + speckle[:, :, None]
        canvas[y0:y1, x0:x1] = region * (1 - cov[:, :, None]) + tint * cov[:, :, None]
        support = np.zeros((h, w), dtype=bool)
        support[y0:y1, x0:x1] = cov >= 0.5
        mask |= support
        if keep_supports:
            supports.append(support)

    canvas += rng.normal(0.0, cfg.noise_sigma, canvas.shape)
    rgb = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    meta = {
        "seed": int(seed),
        "stages": stages,
        "adjacency_pairs": [list(p) for p in pairs],
        "centers": [[round(c[0], 4), round(c[1], 4)] for c in centers],
        "radii": [round(float(r), 4) for r in radii],
    }
    return ImageSample(rgb=rgb, mask=mask.astype(np.uint8), meta=meta, supports=supports if keep_supports else None)


def tile(sample, tile_size=256):
    """Cut a scene into the non-overlapping grid of tile_size squares."""
    h, w = sample.mask.shape
    if h % tile_size or w % tile_size:
        raise ContractError(f"{h}x{w} scene not divisible into {tile_size} tiles")
    tiles = []
    for r in range(h // tile_size):
        for c in range(w // tile_size):
            ys = slice(r * tile_size, (r + 1) * tile_size)
            xs = slice(c * tile_size, (c + 1) * tile_size)
            tiles.append(
                ImageSample(
                    rgb=sample.rgb[ys, xs].copy(),
                    mask=sample.mask[ys, xs].copy(),
                    meta={"scene_seed": sample.meta.get("seed"), "row": r, "col": c},
                )
            )
    return tiles


def split_scenes(n_scenes, ratio=(74, 51), seed=0):
    """Scene-level split tags; first ceil(n*a/(a+b)) shuffled scenes train."""
    if n_scenes < 1:
        raise ContractError("need at least one scene")
    a, b = ratio
    if a < 0 or b < 0 or a + b == 0:
        raise ContractError(f"invalid split ratio {ratio}")
    order = make_rng(seed).permutation(n_scenes)
    n_train = math.ceil(n_scenes * a / (a + b))
    tags = ["val"] * n_scenes
    for idx in order[:n_train]:
        tags[idx] = "train"
    return tags


# -- file formats ---------------------------------------------------------


def _read_header_tokens(raw, path, n_tokens):
    """Parse whitespace/comment-separated header tokens, tracking offsets."""
    tokens = []
    pos = 0
    while len(tokens) < n_tokens:
        if pos >= len(raw):
            raise ImageFileError(f"{path}: header ended early at byte {pos}")
        ch = raw[pos : pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
        else:
            start = pos
            while pos < len(raw) and not raw[pos : pos + 1].isspace():
                pos += 1
            tokens.append((raw[start:pos], start))
    return tokens, pos + 1  # payload starts after one whitespace byte


def _read_netpbm(path, magic, channels):
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, payload_at = _read_header_tokens(raw, path, 4)
    if tokens[0][0] != magic:
        raise ImageFileError(f"{path}: expected {magic.decode()} magic at byte {tokens[0][1]}")
    dims = []
    for text, offset in tokens[1:]:
        if not text.isdigit():
            raise ImageFileError(f"{path}: non-numeric header token at byte {offset}")
        dims.append(int(text))
    width, height, maxval = dims
    if maxval != 255:
        raise ImageFileError(f"{path}: unsupported max value {maxval} at byte {tokens[3][1]}")
    expected = width * height * channels
    payload = raw[payload_at : payload_at + expected]
    if len(payload) != expected:
        raise ImageFileError(
            f"{path}: payload truncated at byte {payload_at + len(payload)} "
            f"(expected {expected} bytes)"
        )
    arr = np.frombuffer(payload, dtype=np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return arr.reshape(shape).copy()


def write_ppm(path, rgb):
    """Binary P6, max value 255."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ContractError(f"expected (H, W, 3) rgb, got {rgb.shape}")
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(rgb).tobytes())


def read_ppm(path):
    return _read_netpbm(path, b"P6", 3)


def write_mask_pgm(path, mask):
    """Binary P5; {0,1} masks are stored as 0/255."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ContractError(f"expected (H, W) mask, got {mask.shape}")
    data = (mask.astype(bool).astype(np.uint8)) * 255
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_mask_pgm(path):
    return (_read_netpbm(path, b"P5", 1) >= 128).astype(np.uint8)


def normalize(rgb, dtype=np.float32):
    """uint8 (H, W, 3) -> (3, H, W) in [0, 1]; plain /255, no mean shift."""
    rgb = np.asarray(rgb, dtype=np.float64) / 255.0
    return rgb.transpose(2, 0, 1).astype(dtype)


# -- dataset assembly ------------------------------------------------------


def generate_dataset(out_dir, n_scenes, seed, cfg=None, tile_size=256, ratio=(74, 51)):
    """Generate, tile, split, and write a dataset plus its manifest.

    Re-running with the same arguments rewrites identical bytes.
    """
    cfg = cfg or SceneConfig()
    if n_scenes < 1:
        raise ContractError("need at least one scene")
    os.makedirs(out_dir, exist_ok=True)
    tags = split_scenes(n_scenes, ratio=ratio, seed=derive_seed(seed, "split"))
    scenes = []
    for i in range(n_scenes):
        sample = generate_scene(derive_seed(seed, "scene", i), cfg)
        scene_dir = os.path.join(out_dir, f"scene_{i:04d}")
        os.makedirs(scene_dir, exist_ok=True)
        tiles = []
        for t in tile(sample, tile_size):
            stem = f"tile_{t.meta['row']:02d}_{t.meta['col']:02d}"
            rgb_rel = os.path.join(f"scene_{i:04d}", stem + ".ppm")
            mask_rel = os.path.join(f"scene_{i:04d}", stem + "_mask.pgm")
            write_ppm(os.path.join(out_dir, rgb_rel), t.rgb)
            write_mask_pgm(os.path.join(out_dir, mask_rel), t.mask)
            tiles.append({"rgb_path": rgb_rel, "mask_path": mask_rel, "split": tags[i]})
        scenes.append({"id": i, "tiles": tiles})
    manifest = {"seed": int(seed), "ratio": list(ratio), "scenes": scenes}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return manifest


def load_manifest(path):
    with open(path) as fh:
        return json.load(fh)


def load_split(manifest, split, base_dir, dtype=np.float32):
    """Read one split's tiles into memory as (image, mask) pairs."""
    tiles = []
    for scene in manifest["scenes"]:
        for rec in scene["tiles"]:
            if rec["split"] != split:
                continue
            rgb = read_ppm(os.path.join(base_dir, rec["rgb_path"]))
            mask = read_mask_pgm(os.path.join(base_dir, rec["mask_path"]))
            tiles.append((normalize(rgb, dtype=dtype), mask))
    return tiles
