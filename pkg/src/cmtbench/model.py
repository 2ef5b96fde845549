"""Correspondence Matching Transformer.

A query image and N posed reference renders are encoded by one shared
convolutional encoder into d-dimensional patch features on a grid
downscaled x8.  View patches carry a 3D positional encoding of their
unprojected world points.  A view-agnostic projector (beta) maps patch
features to unit vectors whose dot products form the similarity matrix M;
M picks, per query patch, the k most related view patches, and the
transformer blocks cross-attend only inside that span (TKCA).  A learnable
classification token aggregates the result for the anomaly logit and the
bounding-box head.

Feature layout: tensors are row-major (n, d) internally; the public
`similarity_matrix` / `tkca` operations follow the column-major (d, n)
convention of their contracts.  Patch index = pr * grid_w + pc; a patch's
world point is unprojected at its central pixel (offset 4 inside the 8x8
block), background central pixels get the sentinel point (0,0,0) and are
flagged invalid.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

from . import autodiff as ad
from .cameras import CameraPose, unproject

PATCH = 8  # fixed encoder downscale factor
FOURIER_BANDS = 10
FOURIER_DIM = 6 * FOURIER_BANDS + 3
SENTINEL_POINT = (0.0, 0.0, 0.0)
CA_OUT_INIT_SCALE = 0.05  # cross-attention output projection starts small


@dataclasses.dataclass
class ModelConfig:
    resolution: int = 64
    d: int = 64
    heads: int = 8
    blocks: int = 3
    top_k: int = 16
    enc_channels: tuple = (16, 32)
    ffn_mult: int = 2

    def __post_init__(self):
        if self.resolution % PATCH != 0:
            raise ad.ShapeError(f"resolution {self.resolution} not divisible by {PATCH}")
        if self.d % self.heads != 0:
            raise ad.ShapeError(f"feature dim {self.d} not divisible by heads {self.heads}")
        if self.blocks < 1:
            raise ValueError("blocks must be >= 1")

    @property
    def grid(self) -> int:
        return self.resolution // PATCH

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["enc_channels"] = list(self.enc_channels)
        return d

    @classmethod
    def from_json(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        data["enc_channels"] = tuple(data.get("enc_channels", (16, 32)))
        return cls(**data)


# ---------------------------------------------------------------------------
# public operations (column-major contracts)


def fourier_encode(points) -> np.ndarray:
    """Map 3D points to 63 values: [x, y, z] then, per coordinate,
    [sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^9 pi x), cos(2^9 pi x)]."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    freqs = (2.0 ** np.arange(FOURIER_BANDS)) * np.pi
    blocks = [pts]
    for c in range(3):
        phase = pts[:, c : c + 1] * freqs  # (n, bands)
        inter = np.empty((pts.shape[0], 2 * FOURIER_BANDS))
        inter[:, 0::2] = np.sin(phase)
        inter[:, 1::2] = np.cos(phase)
        blocks.append(inter)
    out = np.concatenate(blocks, axis=1)
    return out[0] if single else out


def similarity_matrix(zq: ad.Tensor, zv: ad.Tensor) -> ad.Tensor:
    """M[i][j] = column i of zq . column j of zv; inputs are d x n matrices."""
    if zq.shape[0] != zv.shape[0]:
        raise ad.ShapeError(f"similarity_matrix: feature dims differ: {zq.shape} vs {zv.shape}")
    return ad.matmul(ad.swap_last(zq), zv)


def topk_keep_mask(m: np.ndarray, k: int, valid: np.ndarray | None = None) -> np.ndarray:
    """Boolean mask of the k largest entries per row of M (ties toward the
    lowest column index). Invalid columns are never selected."""
    scores = np.array(m, dtype=np.float64, copy=True)
    if valid is not None:
        scores[..., ~np.asarray(valid, dtype=bool)] = -np.inf
    idx = ad.topk_indices(scores, min(k, m.shape[-1]), axis=-1)
    keep = np.zeros(m.shape, dtype=bool)
    np.put_along_axis(keep, idx, True, axis=-1)
    if valid is not None:
        keep &= np.asarray(valid, dtype=bool)
    return keep


def tkca(q: ad.Tensor, k_mat: ad.Tensor, v: ad.Tensor, m, k: int) -> ad.Tensor:
    """Top-k sparse cross-attention, single head, column-major (d x n).

    Row i of the logits (QtK / sqrt(d)) keeps only the positions holding the
    k largest entries of M row i; the rest are masked out before softmax, so
    their attention weights are exactly zero.
    """
    d = q.shape[0]
    if k_mat.shape[0] != d or v.shape[0] != d:
        raise ad.ShapeError(f"tkca: feature dims differ: {q.shape}, {k_mat.shape}, {v.shape}")
    n_v = k_mat.shape[1]
    if not 1 <= k <= n_v:
        raise ValueError(f"tkca: k={k} outside [1, {n_v}]")
    m_data = m.data if isinstance(m, ad.Tensor) else np.asarray(m)
    keep = topk_keep_mask(m_data, k)
    logits = ad.mul(ad.matmul(ad.swap_last(q), k_mat), 1.0 / np.sqrt(d))
    weights = ad.softmax(ad.masked_fill(logits, ~keep, ad.NEG_LARGE), axis=-1)
    return ad.matmul(v, ad.swap_last(weights))


# ---------------------------------------------------------------------------
# parameter initialization helpers


def _xavier(rng, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def _conv_init(rng, c_out, c_in, kh, kw):
    std = np.sqrt(2.0 / (c_in * kh * kw))
    return rng.normal(0.0, std, size=(c_out, c_in, kh, kw))


def _linear(x: ad.Tensor, w: ad.Tensor, b: ad.Tensor | None) -> ad.Tensor:
    out = ad.matmul(x, w)
    return out if b is None else ad.add(out, b)


class _ParamStore:
    """Shared parameter bookkeeping for both model variants."""

    def __init__(self):
        self.params: dict[str, ad.Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> ad.Tensor:
        t = ad.Tensor(value, requires_grad=True)
        self.params[name] = t
        return t

    def parameters(self) -> dict[str, ad.Tensor]:
        return self.params

    def p(self, name: str) -> ad.Tensor:
        return self.params[name]

    def load_state(self, named: dict[str, np.ndarray]):
        for name, tns in self.params.items():
            if name not in named:
                raise KeyError(f"checkpoint missing parameter {name}")
            if tuple(named[name].shape) != tns.shape:
                raise ad.ShapeError(f"parameter {name}: checkpoint shape {named[name].shape} != {tns.shape}")
            tns.data = np.asarray(named[name], dtype=tns.data.dtype).copy()

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def _add_linear(self, rng, name, fi, fo):
        self.add(f"{name}.w", _xavier(rng, fi, fo))
        self.add(f"{name}.b", np.zeros(fo))

    def _add_norm(self, rng, name, d):
        self.add(f"{name}.g", np.ones(d))
        self.add(f"{name}.b", np.zeros(d))

    def _add_encoder(self, rng, cfg: ModelConfig):
        c1, c2 = cfg.enc_channels
        self.add("enc.conv1.w", _conv_init(rng, c1, 3, 3, 3))
        self.add("enc.conv1.b", np.zeros(c1))
        self.add("enc.conv2.w", _conv_init(rng, c2, c1, 3, 3))
        self.add("enc.conv2.b", np.zeros(c2))
        self.add("enc.conv3.w", _conv_init(rng, cfg.d, c2, 3, 3))
        self.add("enc.conv3.b", np.zeros(cfg.d))
        self.add("enc.conv4.w", _conv_init(rng, cfg.d, cfg.d, 3, 3))
        self.add("enc.conv4.b", np.zeros(cfg.d))

    def _add_attention(self, rng, name, d):
        for proj in ("wq", "wk", "wv", "wo"):
            self._add_linear(rng, f"{name}.{proj}", d, d)

    def _add_ffn(self, rng, name, d, mult):
        self._add_linear(rng, f"{name}.fc1", d, mult * d)
        self._add_linear(rng, f"{name}.fc2", mult * d, d)

    # ---- shared forward pieces

    def encode(self, images: ad.Tensor, cfg: ModelConfig) -> ad.Tensor:
        """(B, 3, H, W) -> (B, n_patches, d) patch features, downscale x8."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise ad.ShapeError(f"encode expects (B, 3, H, W), got {images.shape}")
        h, w = images.shape[2], images.shape[3]
        if h % PATCH or w % PATCH:
            raise ad.ShapeError(f"encode: {h}x{w} not divisible by {PATCH}")
        x = ad.relu(ad.conv2d(images, self.p("enc.conv1.w"), self.p("enc.conv1.b"), stride=2, padding=1))
        x = ad.relu(ad.conv2d(x, self.p("enc.conv2.w"), self.p("enc.conv2.b"), stride=2, padding=1))
        x = ad.relu(ad.conv2d(x, self.p("enc.conv3.w"), self.p("enc.conv3.b"), stride=2, padding=1))
        x = ad.conv2d(x, self.p("enc.conv4.w"), self.p("enc.conv4.b"), stride=1, padding=1)
        b, d = x.shape[0], x.shape[1]
        return ad.transpose(ad.reshape(x, (b, d, (h // PATCH) * (w // PATCH))), (0, 2, 1))

    def _mhsa(self, x: ad.Tensor, name: str, heads: int) -> ad.Tensor:
        """Multi-head self-attention block with post-norm residual."""
        b, n, d = x.shape
        dh = d // heads

        def split(t):
            return ad.transpose(ad.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

        q = split(_linear(x, self.p(f"{name}.wq.w"), self.p(f"{name}.wq.b")))
        k = split(_linear(x, self.p(f"{name}.wk.w"), self.p(f"{name}.wk.b")))
        v = split(_linear(x, self.p(f"{name}.wv.w"), self.p(f"{name}.wv.b")))
        att = ad.softmax(ad.mul(ad.matmul(q, ad.swap_last(k)), 1.0 / np.sqrt(dh)), axis=-1)
        out = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (b, n, d))
        out = _linear(out, self.p(f"{name}.wo.w"), self.p(f"{name}.wo.b"))
        return ad.layer_norm(ad.add(out, x), self.p(f"{name}.norm.g"), self.p(f"{name}.norm.b"))

    def _ffn(self, x: ad.Tensor, name: str) -> ad.Tensor:
        h = ad.relu(_linear(x, self.p(f"{name}.fc1.w"), self.p(f"{name}.fc1.b")))
        return _linear(h, self.p(f"{name}.fc2.w"), self.p(f"{name}.fc2.b"))


# ---------------------------------------------------------------------------
# the CMT model


class ViewPack:
    """Encoded reference views, reusable across the queries of one shape."""

    def __init__(self, fv: ad.Tensor, pe: ad.Tensor, zv: ad.Tensor, valid: np.ndarray, n_views: int):
        self.fv = fv  # (n_v, d) view patch features
        self.pe = pe  # (n_v, d) positional encodings
        self.zv = zv  # (n_v, d) view-agnostic unit features
        self.valid = valid  # (n_v,) bool, False for background patches
        self.n_views = n_views


class ForwardResult:
    def __init__(self, logit, bbox, zq, keep):
        self.logit = logit  # (Bq,) anomaly logits
        self.bbox = bbox  # (Bq, 4) normalized (cx, cy, w, h)
        self.zq = zq  # (Bq, n_q, d) view-agnostic query features
        self.keep = keep  # (Bq, n_q, n_v) bool attention span


class CMT(_ParamStore):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.d
        self._add_encoder(rng, cfg)
        self._add_linear(rng, "pe.fc1", FOURIER_DIM, d)
        self._add_linear(rng, "pe.fc2", d, d)
        for i in range(1, 5):
            self._add_linear(rng, f"beta.fc{i}", d, d)
        for b in range(cfg.blocks):
            self._add_linear(rng, f"blk{b}.alpha", 2 * d, d)
            self._add_attention(rng, f"blk{b}.sa", d)
            self._add_norm(rng, f"blk{b}.sa.norm", d)
            self._add_attention(rng, f"blk{b}.ca", d)
            # Damp the cross-attention residual at init: before beta has
            # learned view-agnostic features, attended view patches are
            # noise that drowns the query-only signal.
            self.params[f"blk{b}.ca.wo.w"].data *= CA_OUT_INIT_SCALE
            self._add_norm(rng, f"blk{b}.norm1", d)
            self._add_ffn(rng, f"blk{b}.ffn", d, cfg.ffn_mult)
            self._add_norm(rng, f"blk{b}.norm2", d)
        self.add("tok", rng.normal(0.0, 0.02, size=(1, d)))
        self._add_linear(rng, "cls", d, 1)
        for i in range(1, 4):
            self._add_linear(rng, f"bbox.fc{i}", d, d)
        self._add_linear(rng, "bbox.fc4", d, 4)

    def beta_parameter_names(self) -> set:
        return {n for n in self.params if n.startswith("beta.")}

    def encode(self, images: ad.Tensor) -> ad.Tensor:
        return super().encode(images, self.cfg)

    def pe3d(self, points) -> ad.Tensor:
        """(n, 3) world points -> (n, d) encodings (Fourier features + 2-layer MLP)."""
        enc = ad.Tensor(fourier_encode(points))
        h = ad.relu(_linear(enc, self.p("pe.fc1.w"), self.p("pe.fc1.b")))
        return _linear(h, self.p("pe.fc2.w"), self.p("pe.fc2.b"))

    def project_beta(self, feats: ad.Tensor) -> ad.Tensor:
        """4-layer MLP then per-column L2 normalization (unit feature vectors)."""
        h = feats
        for i in range(1, 4):
            h = ad.relu(_linear(h, self.p(f"beta.fc{i}.w"), self.p(f"beta.fc{i}.b")))
        h = _linear(h, self.p("beta.fc4.w"), self.p("beta.fc4.b"))
        return ad.l2_normalize(h, axis=-1)

    def encode_views(self, views: ad.Tensor, points: np.ndarray, valid: np.ndarray) -> ViewPack:
        """views (N, 3, H, W); points (N*n_q, 3) patch world points; valid (N*n_q,)."""
        n = views.shape[0]
        fv = self.encode(views)  # (N, n_q, d)
        fv = ad.reshape(fv, (n * self.cfg.n_patches, self.cfg.d))
        pe = self.pe3d(points)
        zv = self.project_beta(fv)
        return ViewPack(fv, pe, zv, np.asarray(valid, dtype=bool), n)

    def forward_queries(self, queries: ad.Tensor, pack: ViewPack) -> ForwardResult:
        cfg = self.cfg
        bq = queries.shape[0]
        fq = self.encode(queries)  # (Bq, n_q, d)
        zq = self.project_beta(fq)
        # M fixed across all blocks; the selection is a hard constant to the tape
        m = ad.matmul(zq, ad.swap_last(ad.reshape(pack.zv, (1, *pack.zv.shape))))
        keep = topk_keep_mask(m.data, cfg.top_k, pack.valid)  # (Bq, n_q, n_v)
        # the classification token row attends over every valid view patch
        tok_row = np.broadcast_to(pack.valid, (bq, 1, keep.shape[-1]))
        keep_full = np.concatenate([keep, tok_row], axis=1)

        tok = ad.reshape(self.p("tok"), (1, 1, cfg.d))
        x = ad.concat([fq, ad.mul(tok, np.ones((bq, 1, 1), dtype=ad.default_dtype()))], axis=1)
        fv_pe = ad.concat([pack.fv, pack.pe], axis=-1)  # (n_v, 2d)
        for b in range(cfg.blocks):
            fbar = _linear(fv_pe, self.p(f"blk{b}.alpha.w"), self.p(f"blk{b}.alpha.b"))
            xb = self._mhsa(x, f"blk{b}.sa", cfg.heads)
            qfull = _linear(xb, self.p(f"blk{b}.ca.wq.w"), self.p(f"blk{b}.ca.wq.b"))
            kfull = _linear(fbar, self.p(f"blk{b}.ca.wk.w"), self.p(f"blk{b}.ca.wk.b"))
            vfull = _linear(fbar, self.p(f"blk{b}.ca.wv.w"), self.p(f"blk{b}.ca.wv.b"))
            out = self._tkca_heads(qfull, kfull, vfull, keep_full)
            out = _linear(out, self.p(f"blk{b}.ca.wo.w"), self.p(f"blk{b}.ca.wo.b"))
            o1 = ad.layer_norm(ad.add(out, qfull), self.p(f"blk{b}.norm1.g"), self.p(f"blk{b}.norm1.b"))
            x = ad.layer_norm(
                ad.add(self._ffn(o1, f"blk{b}.ffn"), o1),
                self.p(f"blk{b}.norm2.g"),
                self.p(f"blk{b}.norm2.b"),
            )

        tok_out = x[:, -1, :]  # (Bq, d)
        logit = ad.reshape(_linear(tok_out, self.p("cls.w"), self.p("cls.b")), (bq,))
        h = tok_out
        for i in range(1, 4):
            h = ad.relu(_linear(h, self.p(f"bbox.fc{i}.w"), self.p(f"bbox.fc{i}.b")))
        bbox = ad.sigmoid(_linear(h, self.p("bbox.fc4.w"), self.p("bbox.fc4.b")))
        return ForwardResult(logit, bbox, zq, keep)

    def _tkca_heads(self, q: ad.Tensor, k: ad.Tensor, v: ad.Tensor, keep: np.ndarray) -> ad.Tensor:
        """Multi-head top-k cross-attention.  q (B, n, d); k, v (n_v, d);
        keep (B, n, n_v) selects the attendable view patches per query row."""
        heads = self.cfg.heads
        b, n, d = q.shape
        nv = k.shape[0]
        dh = d // heads
        qh = ad.transpose(ad.reshape(q, (b, n, heads, dh)), (0, 2, 1, 3))
        kh = ad.transpose(ad.reshape(k, (nv, heads, dh)), (1, 0, 2))
        vh = ad.transpose(ad.reshape(v, (nv, heads, dh)), (1, 0, 2))
        logits = ad.mul(ad.matmul(qh, ad.swap_last(kh)), 1.0 / np.sqrt(dh))  # (B, h, n, n_v)
        logits = ad.masked_fill(logits, ~keep[:, None, :, :], ad.NEG_LARGE)
        att = ad.softmax(logits, axis=-1)
        out = ad.matmul(att, vh)  # (B, h, n, dh)
        return ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, n, d))


# ---------------------------------------------------------------------------
# query-only baseline


class QueryOnlyModel(_ParamStore):
    """Encoder + self-attention blocks + classification token; no reference input."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.d
        self._add_encoder(rng, cfg)
        for b in range(cfg.blocks):
            self._add_attention(rng, f"blk{b}.sa", d)
            self._add_norm(rng, f"blk{b}.sa.norm", d)
            self._add_ffn(rng, f"blk{b}.ffn", d, cfg.ffn_mult)
            self._add_norm(rng, f"blk{b}.norm2", d)
        self.add("tok", rng.normal(0.0, 0.02, size=(1, d)))
        self._add_linear(rng, "cls", d, 1)

    def encode(self, images: ad.Tensor) -> ad.Tensor:
        return super().encode(images, self.cfg)

    def forward_queries(self, queries: ad.Tensor) -> ad.Tensor:
        cfg = self.cfg
        bq = queries.shape[0]
        fq = self.encode(queries)
        tok = ad.reshape(self.p("tok"), (1, 1, cfg.d))
        x = ad.concat([fq, ad.mul(tok, np.ones((bq, 1, 1), dtype=ad.default_dtype()))], axis=1)
        for b in range(cfg.blocks):
            x = self._mhsa(x, f"blk{b}.sa", cfg.heads)
            x = ad.layer_norm(
                ad.add(self._ffn(x, f"blk{b}.ffn"), x),
                self.p(f"blk{b}.norm2.g"),
                self.p(f"blk{b}.norm2.b"),
            )
        return ad.reshape(_linear(x[:, -1, :], self.p("cls.w"), self.p("cls.b")), (bq,))


# ---------------------------------------------------------------------------
# geometry plumbing


def patch_world_points(depth: np.ndarray, pose: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    """World point of each patch, unprojected at the patch's central pixel
    (offset PATCH//2 in each axis). Background pixels (depth 0) yield the
    sentinel (0,0,0) and valid=False."""
    h, w = depth.shape
    gh, gw = h // PATCH, w // PATCH
    off = PATCH // 2
    rows = (np.arange(gh) * PATCH + off).repeat(gw)
    cols = np.tile(np.arange(gw) * PATCH + off, gh)
    z = depth[rows, cols].astype(np.float64)
    valid = z > 0
    points = np.zeros((gh * gw, 3), dtype=np.float64)
    points[:] = SENTINEL_POINT
    if valid.any():
        points[valid] = unproject(rows[valid].astype(np.float64), cols[valid].astype(np.float64), z[valid], pose)
    return points, valid


def patch_center_pixels(resolution: int) -> np.ndarray:
    """(n_q, 2) array of (row, col) central pixels of each patch, index-aligned
    with encoder output columns."""
    g = resolution // PATCH
    off = PATCH // 2
    rows = (np.arange(g) * PATCH + off).repeat(g)
    cols = np.tile(np.arange(g) * PATCH + off, g)
    return np.stack([rows, cols], axis=1)


def patch_foreground(image: np.ndarray) -> np.ndarray:
    """(n_q,) bool: patch counts as foreground iff its central pixel is lit.
    `image` is (H, W) or (3, H, W) with background exactly 0."""
    img = image[0] if image.ndim == 3 else image
    h = img.shape[0]
    centers = patch_center_pixels(h)
    return img[centers[:, 0], centers[:, 1]] > 0


# ---------------------------------------------------------------------------
# checkpoint plumbing


def save_model(model, path) -> None:
    """Parameters in the CMT1 tensor container, config echoed as JSON alongside."""
    ad.save_tensors(path, model.state())
    cfg_path = str(path) + ".json"
    with open(cfg_path, "w") as fh:
        json.dump({"kind": type(model).__name__, "config": model.cfg.to_json()}, fh, sort_keys=True)
        fh.write("\n")


def load_model(path):
    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    cfg = ModelConfig.from_json(meta["config"])
    model = CMT(cfg) if meta["kind"] == "CMT" else QueryOnlyModel(cfg)
    model.load_state(ad.load_tensors(path))
    return model
