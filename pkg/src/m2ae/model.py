"""Dual-stream masked autoencoder: patch embedding, transformer encoders/decoders,
complementary bottleneck merge, single-modal MAE path and fingerprint pooling.

Forward passes are expressed as :mod:`m2ae.autodiff` graphs whose parameter
leaves are named exactly like the keys of the parameter dict, so a graph can be
evaluated or differentiated directly against ``params``.
"""
from __future__ import annotations

import itertools
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import FormatError, MaskError, ShapeError

MODALITIES = ("ecg", "ppg")


@dataclass(frozen=True)
class ModelConfig:
    segment_len: int = 2048
    patch_size: int = 64
    d_enc: int = 64
    enc_depth: int = 2
    dec_width: int = 32
    dec_depth: int = 1
    heads: int = 4
    dropout: float = 0.1
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.segment_len % self.patch_size:
            raise ShapeError(f"segment length {self.segment_len} not divisible by patch size {self.patch_size}")
        if self.d_enc % self.heads or self.dec_width % self.heads:
            raise ShapeError("d_enc and dec_width must be divisible by heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def n_patches(self):
        return self.segment_len // self.patch_size

    @classmethod
    def full_scale(cls, **kw):
        return cls(**{**dict(d_enc=768, enc_depth=6, dec_width=256, dec_depth=3, heads=8), **kw})


@dataclass(frozen=True)
class MaskPlan:
    """Complementary split of patch rows: ``U`` rows come from ECG, ``M`` rows from PPG."""

    k: int
    U: tuple
    M: tuple

    def __post_init__(self):
        u, m = set(self.U), set(self.M)
        if u & m or u | m != set(range(self.k)) or len(u) != len(self.U) or len(m) != len(self.M):
            raise MaskError(f"U and M must partition range({self.k})")
        object.__setattr__(self, "U", tuple(sorted(self.U)))
        object.__setattr__(self, "M", tuple(sorted(self.M)))

    @property
    def visible_mask(self):
        """Length-k 0/1 vector, 1 on ``U``."""
        out = np.zeros(self.k)
        out[list(self.U)] = 1.0
        return out


def round_half_away(x):
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def sample_mask_plan(k, r_ecg, seed, lo=0.1, hi=0.9):
    """``round(r_ecg * k)`` rows drawn uniformly into ``M``; the rest form ``U``."""
    if not lo <= r_ecg <= hi:
        raise MaskError(f"masking ratio {r_ecg} outside [{lo}, {hi}]")
    n_masked = round_half_away(r_ecg * k)
    rng = np.random.default_rng(seed)
    masked = rng.choice(k, size=n_masked, replace=False)
    return MaskPlan(k, tuple(sorted(set(range(k)) - set(masked.tolist()))), tuple(masked.tolist()))


# -- patches ----------------------------------------------------------------

def patchify(samples, s):
    x = np.asarray(samples)
    if x.shape[-1] % s:
        raise ShapeError(f"length {x.shape[-1]} not divisible by patch size {s}")
    return x.reshape(*x.shape[:-1], x.shape[-1] // s, s)


def unpatchify(patches):
    p = np.asarray(patches)
    return p.reshape(*p.shape[:-2], p.shape[-2] * p.shape[-1])


# -- parameters -------------------------------------------------------------

def sincos_table(n, d):
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / (10000.0 ** (2 * i / d))
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


def _block_shapes(prefix, d, hidden):
    return {
        f"{prefix}.ln1.g": ("ones", (d,)), f"{prefix}.ln1.b": ("zeros", (d,)),
        f"{prefix}.attn.wq": ("xavier", (d, d)), f"{prefix}.attn.bq": ("zeros", (d,)),
        f"{prefix}.attn.wk": ("xavier", (d, d)), f"{prefix}.attn.bk": ("zeros", (d,)),
        f"{prefix}.attn.wv": ("xavier", (d, d)), f"{prefix}.attn.bv": ("zeros", (d,)),
        f"{prefix}.attn.wo": ("xavier", (d, d)), f"{prefix}.attn.bo": ("zeros", (d,)),
        f"{prefix}.ln2.g": ("ones", (d,)), f"{prefix}.ln2.b": ("zeros", (d,)),
        f"{prefix}.ffn.w1": ("xavier", (d, hidden)), f"{prefix}.ffn.b1": ("zeros", (hidden,)),
        f"{prefix}.ffn.w2": ("xavier", (hidden, d)), f"{prefix}.ffn.b2": ("zeros", (d,)),
    }


def param_shapes(cfg: ModelConfig, modalities=MODALITIES, mask_tokens=False):
    """Ordered ``name -> (init kind, shape)`` for every learnable array."""
    k, s, d, w = cfg.n_patches, cfg.patch_size, cfg.d_enc, cfg.dec_width
    shapes = {}
    for m in modalities:
        shapes[f"{m}.embed.ln.g"] = ("ones", (s,))
        shapes[f"{m}.embed.ln.b"] = ("zeros", (s,))
        shapes[f"{m}.embed.w"] = ("xavier", (s, d))
        shapes[f"{m}.embed.b"] = ("zeros", (d,))
        shapes[f"{m}.embed.pos"] = ("sincos", (k, d))
        for i in range(cfg.enc_depth):
            shapes.update(_block_shapes(f"{m}.enc.{i}", d, cfg.mlp_ratio * d))
        shapes[f"{m}.enc.ln.g"] = ("ones", (d,))
        shapes[f"{m}.enc.ln.b"] = ("zeros", (d,))
        shapes[f"{m}.enc.head.w"] = ("xavier", (d, d))
        shapes[f"{m}.enc.head.b"] = ("zeros", (d,))
        shapes[f"{m}.dec.proj.w"] = ("xavier", (d, w))
        shapes[f"{m}.dec.proj.b"] = ("zeros", (w,))
        shapes[f"{m}.dec.pos"] = ("sincos", (k, w))
        if mask_tokens:
            shapes[f"{m}.dec.mask_token"] = ("token", (w,))
        for i in range(cfg.dec_depth):
            shapes.update(_block_shapes(f"{m}.dec.{i}", w, cfg.mlp_ratio * w))
        shapes[f"{m}.dec.ln.g"] = ("ones", (w,))
        shapes[f"{m}.dec.ln.b"] = ("zeros", (w,))
        shapes[f"{m}.dec.out.w"] = ("xavier", (w, s))
        shapes[f"{m}.dec.out.b"] = ("zeros", (s,))
    return shapes


def init_params(cfg: ModelConfig, seed=0, modalities=MODALITIES, mask_tokens=False):
    """Fresh parameters. Cross-modal models carry no mask tokens (every bottleneck row is filled)."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, (kind, shape) in param_shapes(cfg, modalities, mask_tokens).items():
        if kind == "ones":
            params[name] = np.ones(shape)
        elif kind == "zeros":
            params[name] = np.zeros(shape)
        elif kind == "xavier":
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-bound, bound, shape)
        elif kind == "sincos":
            params[name] = sincos_table(*shape)
        elif kind == "token":
            params[name] = rng.normal(0.0, 0.02, shape)
    return params


# -- graph builders ---------------------------------------------------------

class Builder:
    """Hands out named parameter leaves and deterministic dropout seeds for one graph."""

    def __init__(self, cfg: ModelConfig, train=False, seed=0):
        self.cfg = cfg
        self.train = train
        self.seed = int(seed)
        self.leaves = {}
        self._drops = itertools.count()

    def p(self, name):
        if name not in self.leaves:
            self.leaves[name] = ad.leaf(name)
        return self.leaves[name]

    def dropout(self, x):
        n = next(self._drops)
        return ad.dropout(x, self.cfg.dropout, (self.seed * 1_000_003 + n) % (2 ** 63), self.train)

    def linear(self, x, prefix, w="w", b="b"):
        return x @ self.p(f"{prefix}.{w}") + self.p(f"{prefix}.{b}")

    def layernorm(self, x, prefix):
        return ad.layernorm(x, self.p(f"{prefix}.g"), self.p(f"{prefix}.b"))

    def attention(self, x, prefix, width, rows):
        h = self.cfg.heads
        dh = width // h

        def heads(t):  # (B, rows, width) -> (B, h, rows, dh)
            return ad.transpose(ad.reshape(t, (-1, rows, h, dh)), (0, 2, 1, 3))

        q = heads(self.linear(x, prefix, "wq", "bq"))
        k = heads(self.linear(x, prefix, "wk", "bk"))
        v = heads(self.linear(x, prefix, "wv", "bv"))
        att = self.dropout(ad.softmax((q @ ad.transpose(k)) * (1.0 / math.sqrt(dh))))
        out = ad.reshape(ad.transpose(att @ v, (0, 2, 1, 3)), (-1, rows, width))
        return self.linear(out, prefix, "wo", "bo")

    def block(self, x, prefix, width, rows):
        """Pre-norm transformer block over ``rows`` tokens of size ``width``."""
        x = x + self.dropout(self.attention(self.layernorm(x, f"{prefix}.ln1"), f"{prefix}.attn", width, rows))
        hid = ad.gelu(self.linear(self.layernorm(x, f"{prefix}.ln2"), f"{prefix}.ffn", "w1", "b1"))
        return x + self.dropout(self.linear(hid, f"{prefix}.ffn", "w2", "b2"))


def embed_patches(bld: Builder, patches, modality):
    """E_I = Linear(LayerNorm(patch)) + positional row, shape (B, k, d_enc)."""
    e = bld.layernorm(patches, f"{modality}.embed.ln")
    return bld.linear(e, f"{modality}.embed") + bld.p(f"{modality}.embed.pos")


def encode_rows(bld: Builder, e_rows, modality, rows):
    h = e_rows
    for i in range(bld.cfg.enc_depth):
        h = bld.block(h, f"{modality}.enc.{i}", bld.cfg.d_enc, rows)
    return bld.linear(bld.layernorm(h, f"{modality}.enc.ln"), f"{modality}.enc.head")


def encode_modality(bld: Builder, patches, modality):
    """Full-sequence encoder output Z, shape (B, k, d_enc)."""
    return encode_rows(bld, embed_patches(bld, patches, modality), modality, bld.cfg.n_patches)


def merge_bottleneck(z_ecg, z_ppg, plan: MaskPlan):
    """Rows in ``U`` from the ECG stream, rows in ``M`` from the PPG stream."""
    parts = []
    if plan.U:
        parts.append(ad.scatter(ad.gather(z_ecg, plan.U), plan.U, plan.k))
    if plan.M:
        parts.append(ad.scatter(ad.gather(z_ppg, plan.M), plan.M, plan.k))
    return parts[0] if len(parts) == 1 else parts[0] + parts[1]


def merge_bottleneck_masked(z_ecg, z_ppg, visible):
    """Per-sample merge; ``visible`` is (B, k) with 1 where the ECG row is used."""
    vis = np.asarray(visible, dtype=np.float64)[..., None]
    return z_ecg * ad.const(vis) + z_ppg * ad.const(1.0 - vis)


def merge_bottleneck_array(z_ecg, z_ppg, plan: MaskPlan):
    z_ecg, z_ppg = np.asarray(z_ecg, dtype=np.float64), np.asarray(z_ppg, dtype=np.float64)
    if z_ecg.shape != z_ppg.shape or z_ecg.shape[-2] != plan.k:
        raise MaskError(f"plan over {plan.k} rows vs inputs {z_ecg.shape} / {z_ppg.shape}")
    return ad.evaluate(merge_bottleneck(ad.const(z_ecg), ad.const(z_ppg), plan), {})


def decode_modality(bld: Builder, z, modality, plan: MaskPlan | None = None):
    """Reconstruct (B, k, patch_size) raw patches.

    With ``plan`` given, ``z`` holds only the ``U`` rows and masked rows are filled
    with the modality's mask token before the positional table is added.
    """
    cfg = bld.cfg
    h = bld.linear(z, f"{modality}.dec.proj")
    if plan is not None:
        fill = np.zeros((cfg.n_patches, 1))
        fill[list(plan.M)] = 1.0
        h = ad.scatter(h, plan.U, cfg.n_patches) + ad.const(fill) * bld.p(f"{modality}.dec.mask_token")
    h = h + bld.p(f"{modality}.dec.pos")
    for i in range(cfg.dec_depth):
        h = bld.block(h, f"{modality}.dec.{i}", cfg.dec_width, cfg.n_patches)
    return bld.linear(bld.layernorm(h, f"{modality}.dec.ln"), f"{modality}.dec.out")


def single_modal_graph(bld: Builder, patches, modality, plan: MaskPlan):
    """Encode only the visible rows; returns (Z over U rows, reconstruction of all k rows)."""
    if not plan.M:
        raise MaskError("single-modal masking needs at least one masked patch")
    e = ad.gather(embed_patches(bld, patches, modality), plan.U)
    z = encode_rows(bld, e, modality, len(plan.U))
    return z, decode_modality(bld, z, modality, plan)


def pool(z):
    """Mean over the patch axis: (..., k, d) -> (..., d)."""
    return ad.mean(z, axis=-2)


def fingerprint(z):
    """Column-wise mean of a (k, d) or (B, k, d) bottleneck array."""
    return np.asarray(z, dtype=np.float64).mean(axis=-2)


# -- convenience forward passes on arrays -----------------------------------

def run(graph_fn, params, cfg, *arrays, train=False, seed=0):
    """Build ``graph_fn(builder, *const_inputs)`` and evaluate it against ``params``."""
    bld = Builder(cfg, train=train, seed=seed)
    out = graph_fn(bld, *[ad.const(a) for a in arrays])
    if isinstance(out, tuple):
        tape = ad.Tape(_pack(out), params)
        return tuple(tape.value(o) for o in out)
    return ad.evaluate(out, params)


def _pack(nodes):
    # a scalar-free root that keeps every output reachable
    return ad.concat([ad.reshape(n, (-1,)) for n in nodes], axis=0)


def encode(params, cfg, samples, modality):
    """Eval-mode Z for a (B, L) or (L,) signal array."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    return run(lambda b, p: encode_modality(b, p, modality), params, cfg, patchify(x, cfg.patch_size))


def single_modal_forward(params, cfg, samples, modality, r_m=0.5, seed=0):
    """Returns (Z of visible rows, reconstruction (B, k, s), plan)."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    k = cfg.n_patches
    n_masked = round_half_away(r_m * k)
    if n_masked <= 0:
        raise MaskError("masking ratio leaves no masked patch; the masked loss is undefined")
    masked = np.random.default_rng(seed).choice(k, size=n_masked, replace=False)
    plan = MaskPlan(k, tuple(sorted(set(range(k)) - set(masked.tolist()))), tuple(masked.tolist()))
    z, recon = run(lambda b, p: single_modal_graph(b, p, modality, plan), params, cfg,
                   patchify(x, cfg.patch_size))
    return z, recon, plan


# -- checkpoint format ------------------------------------------------------

CKPT_MAGIC = b"M2CK"
CKPT_VERSION = 1


def save_checkpoint(path, cfg: ModelConfig, blocks: dict):
    """Write ``blocks`` (name -> float64 array) after the config header."""
    cfg_bytes = json.dumps(asdict(cfg), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(cfg_bytes)) + cfg_bytes)
        for name, arr in blocks.items():
            arr = np.asarray(arr, dtype="<f8")
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Returns (ModelConfig, name -> array) with arrays in file order."""
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    try:
        version, clen = struct.unpack_from("<HI", raw, 4)
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        pos = 10
        cfg = ModelConfig(**json.loads(raw[pos:pos + clen].decode()))
        pos += clen
        blocks = {}
        while pos < len(raw):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2:pos + 2 + nlen].decode()
            pos += 2 + nlen
            (rank,) = struct.unpack_from("<B", raw, pos)
            shape = struct.unpack_from(f"<{rank}I", raw, pos + 1)
            pos += 1 + 4 * rank
            size = int(np.prod(shape)) * 8
            if pos + size > len(raw):
                raise FormatError(f"{path}: truncated block {name!r}")
            blocks[name] = np.frombuffer(raw, dtype="<f8", count=size // 8, offset=pos).reshape(shape).copy()
            pos += size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    return cfg, blocks
