"""Image and text tokenization into the shared embedding space.

Images are tiled by a dynamic aspect-preserving grid (plus a whole-image
thumbnail), patchified at a fixed pixel stride, combined with a learnable
2-D positional grid, and projected by a small MLP. Text is byte-level
with a handful of special ids. Both streams concatenate into one
multimodal sequence with per-position modality and loss masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add, concat_rows, gather_rows, matmul, silu

# byte vocabulary plus specials
BOS = 256
EOS = 257
PAD = 258
IMG = 259
VOCAB_SIZE = 260

THUMBNAIL = -1  # tile provenance marker for the whole-image tile


class ConfigError(ValueError):
    """Raised for invalid tiling or stage configuration."""


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def validate_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {img.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    return img


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 PPM (8-bit) into a float HxWx3 array in [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P6":
        raise ValueError(f"not a binary PPM file: magic {fields[0]!r}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError("only 8-bit PPM supported")
    pos += 1  # single whitespace after maxval
    pix = np.frombuffer(raw, dtype=np.uint8, count=h * w * 3, offset=pos)
    return (pix.reshape(h, w, 3).astype(np.float32)) / 255.0


def write_ppm(path, img: np.ndarray) -> None:
    img = validate_image(img)
    h, w = img.shape[:2]
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def _axis_weights(n_out: int, n_in: int):
    # half-pixel centers, clamped at the borders
    centers = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    lo = np.floor(centers).astype(np.intp)
    t = centers - lo
    return np.clip(lo, 0, n_in - 1), np.clip(lo + 1, 0, n_in - 1), t


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of an HxWxC array (half-pixel alignment)."""
    r0, r1, tr = _axis_weights(out_h, img.shape[0])
    c0, c1, tc = _axis_weights(out_w, img.shape[1])
    rows = img[r0] * (1.0 - tr)[:, None, None] + img[r1] * tr[:, None, None]
    out = rows[:, c0] * (1.0 - tc)[None, :, None] + rows[:, c1] * tc[None, :, None]
    return out.astype(img.dtype)


# ---------------------------------------------------------------------------
# dynamic tiling
# ---------------------------------------------------------------------------

@dataclass
class TileSet:
    """Row-major tiles plus the whole-image thumbnail, all tile_px square."""

    tiles: list
    thumbnail: np.ndarray
    grid_rows: int
    grid_cols: int
    tile_px: int
    patch_stride: int

    @property
    def patches_per_tile(self) -> int:
        g = self.tile_px // self.patch_stride
        return g * g

    @property
    def total_patches(self) -> int:
        return (len(self.tiles) + 1) * self.patches_per_tile


def choose_tile_grid(height: int, width: int, max_tiles: int) -> tuple[int, int]:
    """Pick the (rows, cols) grid closest to the image aspect ratio,
    preferring more tiles within the budget; ties break toward wide grids."""
    target = math.log(width / height)
    best = None
    best_key = None
    for rows in range(1, max_tiles + 1):
        for cols in range(1, max_tiles // rows + 1):
            key = (abs(math.log(cols / rows) - target), -(rows * cols), rows)
            if best_key is None or key < best_key:
                best_key = key
                best = (rows, cols)
    return best


def dynamic_tile(img: np.ndarray, max_patches: int, stride: int, tile_px: int) -> TileSet:
    """Resize the image onto an aspect-preserving tile grid whose patch
    count (tiles + thumbnail) is maximal without exceeding `max_patches`."""
    img = validate_image(img)
    if tile_px % stride != 0:
        raise ConfigError(f"tile size {tile_px} not divisible by stride {stride}")
    g = tile_px // stride
    per_tile = g * g
    max_tiles = (max_patches - per_tile) // per_tile
    if max_tiles < 1:
        raise ConfigError(
            f"max_patches={max_patches} cannot fit one tile plus the "
            f"thumbnail ({2 * per_tile} patches)")

    rows, cols = choose_tile_grid(img.shape[0], img.shape[1], max_tiles)
    canvas = resize_bilinear(img, rows * tile_px, cols * tile_px)
    tiles = [canvas[r * tile_px:(r + 1) * tile_px, c * tile_px:(c + 1) * tile_px]
             for r in range(rows) for c in range(cols)]
    thumb = resize_bilinear(img, tile_px, tile_px)
    return TileSet(tiles=tiles, thumbnail=thumb, grid_rows=rows, grid_cols=cols,
                   tile_px=tile_px, patch_stride=stride)


# ---------------------------------------------------------------------------
# patch embedding and position grid
# ---------------------------------------------------------------------------

def extract_patches(tile: np.ndarray, stride: int) -> np.ndarray:
    """Flatten a tile into (h*w, stride*stride*3) rows, row-major patches."""
    H, W = tile.shape[:2]
    if H % stride or W % stride:
        raise ValueError(f"tile dims {H}x{W} not divisible by stride {stride}")
    h, w = H // stride, W // stride
    p = tile.reshape(h, stride, w, stride, 3).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(p.reshape(h * w, stride * stride * 3))


def patch_embed(tile: np.ndarray, stride: int, weight: Tensor, bias: Tensor) -> Tensor:
    """Linear map of each stride x stride x 3 patch to a feature row.

    Row-stable kernel: each patch row is computed independently of how
    many patches are in the batch.
    """
    patches = Tensor(extract_patches(tile, stride))
    return add(matmul(patches, weight, row_stable=True), bias)


def pe_interp_matrix(base_h: int, base_w: int, h: int, w: int) -> np.ndarray:
    """Dense (h*w, base_h*base_w) bilinear sampling matrix for the
    positional grid, treating entries as values at cell centers."""
    m = np.zeros((h * w, base_h * base_w), dtype=np.float32)
    r0, r1, tr = _axis_weights(h, base_h)
    c0, c1, tc = _axis_weights(w, base_w)
    for i in range(h):
        for j in range(w):
            q = i * w + j
            m[q, r0[i] * base_w + c0[j]] += (1 - tr[i]) * (1 - tc[j])
            m[q, r0[i] * base_w + c1[j]] += (1 - tr[i]) * tc[j]
            m[q, r1[i] * base_w + c0[j]] += tr[i] * (1 - tc[j])
            m[q, r1[i] * base_w + c1[j]] += tr[i] * tc[j]
    return m


def interpolate_pe(pe: Tensor, base_grid: int, h: int, w: int) -> Tensor:
    """Resample the learnable (base_grid^2, e) positional grid to h x w.

    The matching grid is returned untouched so the common path is exact;
    other grids go through a constant bilinear matrix, which keeps the
    op linear in the learnable entries.
    """
    if (h, w) == (base_grid, base_grid):
        return pe
    return matmul(Tensor(pe_interp_matrix(base_grid, base_grid, h, w)), pe)


@dataclass
class VisualTokenBatch:
    """Visual tokens for one image: embeddings plus provenance and grid."""

    embeddings: Tensor          # (n_vis, d)
    grid_hw: tuple              # per-tile patch grid (h, w)
    provenance: np.ndarray      # tile index per token, THUMBNAIL for the global tile
    positions: np.ndarray       # (n_vis, 2) row/col of each token within its tile

    def __len__(self):
        return self.embeddings.shape[0]


def add_position_and_project(tile_features: list, grid_hw: tuple, pe: Tensor,
                             pe_grid: int, proj_w1: Tensor, proj_b1: Tensor,
                             proj_w2: Tensor, proj_b2: Tensor) -> VisualTokenBatch:
    """x_v = MLP(features + PE), tiles row-major with the thumbnail last."""
    h, w = grid_hw
    pe_tile = interpolate_pe(pe, pe_grid, h, w)
    feats = concat_rows([add(f, pe_tile) for f in tile_features])
    hidden = silu(add(matmul(feats, proj_w1), proj_b1))
    emb = add(matmul(hidden, proj_w2), proj_b2)

    n_tiles = len(tile_features) - 1  # last entry is the thumbnail
    prov = np.concatenate([np.full(h * w, t, dtype=np.int64) for t in range(n_tiles)]
                          + [np.full(h * w, THUMBNAIL, dtype=np.int64)])
    pos = np.stack(np.divmod(np.arange(h * w), w), axis=1)
    return VisualTokenBatch(embeddings=emb, grid_hw=(h, w), provenance=prov,
                            positions=np.tile(pos, (n_tiles + 1, 1)))


def visual_tokenize(img: np.ndarray, max_patches: int, stride: int, tile_px: int,
                    patch_w: Tensor, patch_b: Tensor, pe: Tensor, pe_grid: int,
                    proj_w1: Tensor, proj_b1: Tensor, proj_w2: Tensor,
                    proj_b2: Tensor) -> VisualTokenBatch:
    """Full image path: dynamic tiling, patch embedding, PE, projection."""
    ts = dynamic_tile(img, max_patches, stride, tile_px)
    g = tile_px // stride
    feats = [patch_embed(t, stride, patch_w, patch_b) for t in ts.tiles]
    feats.append(patch_embed(ts.thumbnail, stride, patch_w, patch_b))
    batch = add_position_and_project(feats, (g, g), pe, pe_grid,
                                     proj_w1, proj_b1, proj_w2, proj_b2)
    assert len(batch) == ts.total_patches <= max_patches
    return batch


# ---------------------------------------------------------------------------
# text
# ---------------------------------------------------------------------------

def tokenize_text(text) -> np.ndarray:
    """Byte-level ids; specials are added by the sequence builder."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)


def detokenize(ids) -> bytes:
    """Inverse of tokenize_text; special ids are skipped."""
    ids = np.asarray(ids, dtype=np.int64)
    return bytes(int(i) for i in ids if 0 <= i < 256)


@dataclass
class TextTokenBatch:
    ids: np.ndarray        # (n,)
    embeddings: Tensor     # (n, d)

    def __len__(self):
        return self.ids.shape[0]


def make_text_batch(ids: np.ndarray, embed_table: Tensor) -> TextTokenBatch:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= embed_table.shape[0]):
        raise IndexError(f"token id outside vocabulary of size {embed_table.shape[0]}")
    return TextTokenBatch(ids=ids, embeddings=gather_rows(embed_table, ids))


# ---------------------------------------------------------------------------
# multimodal concatenation
# ---------------------------------------------------------------------------

@dataclass
class MultimodalSequence:
    """Concatenated visual + text tokens with modality and loss masks."""

    embeddings: Tensor       # (n', d)
    modality: np.ndarray     # (n',) bool, True where visual
    loss_mask: np.ndarray    # (n',) bool, True on response text positions
    token_ids: np.ndarray    # (n',), IMG placeholder at visual positions

    def __len__(self):
        return self.embeddings.shape[0]


def concat_multimodal(visual: VisualTokenBatch | None, text: TextTokenBatch,
                      loss_start: int | None = None) -> MultimodalSequence:
    """Visual tokens first (thumbnail last among them), then text.

    `loss_start` is the text offset where the response begins; positions
    from there on carry the loss. Text-only input passes the text
    embeddings through untouched.
    """
    n_text = len(text)
    text_loss = np.zeros(n_text, dtype=bool)
    if loss_start is not None:
        text_loss[loss_start:] = True

    if visual is None:
        return MultimodalSequence(embeddings=text.embeddings,
                                  modality=np.zeros(n_text, dtype=bool),
                                  loss_mask=text_loss, token_ids=text.ids.copy())

    if visual.embeddings.shape[1] != text.embeddings.shape[1]:
        raise ValueError(
            f"embedding width mismatch: visual {visual.embeddings.shape[1]} "
            f"vs text {text.embeddings.shape[1]}")
    n_vis = len(visual)
    emb = concat_rows([visual.embeddings, text.embeddings])
    modality = np.concatenate([np.ones(n_vis, dtype=bool), np.zeros(n_text, dtype=bool)])
    loss = np.concatenate([np.zeros(n_vis, dtype=bool), text_loss])
    ids = np.concatenate([np.full(n_vis, IMG, dtype=np.int64), text.ids])
    return MultimodalSequence(embeddings=emb, modality=modality, loss_mask=loss,
                              token_ids=ids)
