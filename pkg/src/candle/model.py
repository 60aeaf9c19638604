"""The differentiable head over frozen embeddings.

Three logit paths share two bias-free square projections (one per modality)
and a single multi-head self-attention layer applied to the concatenated
token sequence [projected images | projected visual prototypes | projected
virtual prototypes | projected textual prototypes]:

* projection logits: cosine of projected image vs projected text, / tau_t,
  computed before attention;
* visual logits: cosine of post-attention image tokens vs post-attention
  visual (base) and virtual (new) prototype tokens, / tau_v;
* textual logits: cosine of post-attention image tokens vs post-attention
  textual prototypes, / tau_t.

The attention layer is deliberately minimal: scaled dot-product, H heads,
residual connection from the projected input, no feed-forward block, no
layer norm, no positional encoding — so the operation is permutation
equivariant and the output can be sliced back into its parts.  With the
output mix W_O at zero the layer is the identity, which makes the freshly
initialized model exactly the projected-prototype matcher.

Cosines renormalize both operands after projection/attention, so every
logit is scale-free in its inputs.  Internal math is float64; checkpoints
serialize float32.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import FormatError, ParameterError, ValidationError
from .prototypes import PrototypeSet
from .rng import Rng

MASK_MODES = ("none", "mask_within_visual", "mask_within_text", "mask_cross")

CKPT_MAGIC = b"CNDM"
CKPT_VERSION = 1
_BLOB_ORDER = ("w_pi", "w_pt", "w_q", "w_k", "w_v", "w_o", "visual", "textual", "virtual")


@dataclass
class ModelParams:
    """All trainable head weights plus the (untrained) temperatures."""

    w_pi: np.ndarray  # (D, D) visual-modality projection, row convention y = x @ W
    w_pt: np.ndarray  # (D, D) textual-modality projection
    w_q: np.ndarray  # (D, D), columns partitioned into H heads of width D/H
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    tau_t: float
    tau_v: float
    heads: int

    @property
    def dim(self) -> int:
        return int(self.w_pi.shape[0])

    def validate(self) -> None:
        d = self.dim
        for name in ("w_pi", "w_pt", "w_q", "w_k", "w_v", "w_o"):
            m = getattr(self, name)
            if m.shape != (d, d):
                raise ValidationError(f"{name}: expected shape ({d}, {d}), got {m.shape}")
        if self.heads < 1 or d % self.heads != 0:
            raise ValidationError(f"heads: {d} dims not divisible into {self.heads} heads")
        if self.tau_t <= 0 or self.tau_v <= 0:
            raise ValidationError("tau_t/tau_v: temperatures must be positive")


# Diagonal gain of the similarity-routed attention heads at initialization.
ROUTED_HEAD_GAIN = 8.0


def init_params(dim: int, heads: int, tau_t: float, tau_v: float, rng: Rng) -> ModelParams:
    """Training initialization: identity projections, mixed attention heads.

    The first half of the heads starts near-uniform (N(0, 0.02^2) queries and
    keys), giving cheap mean-mixing; the second half starts similarity-routed
    (a ROUTED_HEAD_GAIN diagonal added to their query/key column blocks), so
    scores follow token cosines and prototypes attend to their own class's
    tokens from the start.  Values and output mix are N(0, 1/D): small next
    to the residual but alive — with a zero output mix the value and output
    matrices gate each other's gradients and the attention layer never trains
    at this scale.  Draw order is fixed (Q, K, V, O) for reproducibility.
    """
    if dim % heads != 0:
        raise ParameterError(f"dim {dim} must be divisible by heads {heads}")
    draw = lambda scale: scale * rng.gaussians(dim * dim).reshape(dim, dim)
    vo_scale = 1.0 / math.sqrt(dim)
    w_q = draw(0.02)
    w_k = draw(0.02)
    dh = dim // heads
    eye = np.eye(dim)
    for head in range(heads // 2, heads):
        block = slice(head * dh, (head + 1) * dh)
        w_q[:, block] += ROUTED_HEAD_GAIN * eye[:, block]
        w_k[:, block] += ROUTED_HEAD_GAIN * eye[:, block]
    params = ModelParams(
        w_pi=np.eye(dim),
        w_pt=np.eye(dim),
        w_q=w_q,
        w_k=w_k,
        w_v=draw(vo_scale),
        w_o=draw(vo_scale),
        tau_t=tau_t,
        tau_v=tau_v,
        heads=heads,
    )
    params.validate()
    return params


def init_identity_params(dim: int, heads: int, tau_t: float, tau_v: float,
                         rng: Rng) -> ModelParams:
    """Identity variant: zero output mix, so attention is exactly the identity
    and the model reduces to the projected-prototype matcher."""
    params = init_params(dim, heads, tau_t, tau_v, rng)
    params.w_o = np.zeros((dim, dim))
    return params


def attention_allow_mask(mode: str, num_visual: int, num_text: int) -> np.ndarray | None:
    """Boolean allow[i, j] (query i may attend to key j) for one mask mode.

    The visual part is the first ``num_visual`` tokens (image features plus
    visual and virtual prototypes); the textual part is the remaining
    ``num_text`` textual prototypes.  Within-part masks target interaction
    between distinct tokens of the part; a token's attention to itself is
    never masked.
    """
    if mode == "none":
        return None
    if mode not in MASK_MODES:
        raise ParameterError(f"unknown mask mode {mode!r}")
    n = num_visual + num_text
    allow = np.ones((n, n), dtype=bool)
    if mode == "mask_within_visual":
        allow[:num_visual, :num_visual] = False
        np.fill_diagonal(allow, True)
    elif mode == "mask_within_text":
        allow[num_visual:, num_visual:] = False
        np.fill_diagonal(allow, True)
    else:  # mask_cross
        allow[:num_visual, num_visual:] = False
        allow[num_visual:, :num_visual] = False
    return allow


# -- tensor-level forward (shared by training and inference) --------------


def cosine_t(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine matrix between rows of a and rows of b."""
    return ad.matmul(ad.l2norm_rows(a), ad.transpose(ad.l2norm_rows(b)))


def project_logits_t(x: Tensor, text: Tensor, params: ModelParams) -> Tensor:
    w_pi, w_pt = _as_tensors(params, "w_pi", "w_pt")
    return (1.0 / params.tau_t) * cosine_t(ad.matmul(x, w_pi), ad.matmul(text, w_pt))


def attention_forward(tokens: Tensor, params: ModelParams, allow: np.ndarray | None,
                      weights: dict[str, Tensor] | None = None) -> Tensor:
    """One residual multi-head self-attention layer over a token matrix."""
    d = params.dim
    h = params.heads
    dh = d // h
    w = weights or {}
    w_q = w.get("w_q") or Tensor(params.w_q)
    w_k = w.get("w_k") or Tensor(params.w_k)
    w_v = w.get("w_v") or Tensor(params.w_v)
    w_o = w.get("w_o") or Tensor(params.w_o)
    q = ad.matmul(tokens, w_q)
    k = ad.matmul(tokens, w_k)
    v = ad.matmul(tokens, w_v)
    scale = 1.0 / math.sqrt(dh)
    head_outs = []
    for i in range(h):
        qh = ad.narrow(q, 1, i * dh, dh)
        kh = ad.narrow(k, 1, i * dh, dh)
        vh = ad.narrow(v, 1, i * dh, dh)
        scores = scale * ad.matmul(qh, ad.transpose(kh))
        attn = ad.masked_softmax_rows(scores, allow)
        head_outs.append(ad.matmul(attn, vh))
    mixed = ad.matmul(ad.concat(head_outs, axis=1), w_o)
    return ad.add(tokens, mixed)


def cross_modal_attention_t(
    x: Tensor,
    visual: Tensor,
    virtual: Tensor | None,
    text: Tensor,
    params: ModelParams,
    mask: str = "none",
    weights: dict[str, Tensor] | None = None,
) -> tuple[Tensor, Tensor, Tensor | None, Tensor]:
    """Project all inputs, attend jointly, slice the output back into parts."""
    w = weights or {}
    w_pi = w.get("w_pi") or Tensor(params.w_pi)
    w_pt = w.get("w_pt") or Tensor(params.w_pt)
    xp = ad.matmul(x, w_pi)
    vp = ad.matmul(visual, w_pi)
    vhp = ad.matmul(virtual, w_pi) if virtual is not None else None
    tp = ad.matmul(text, w_pt)
    parts = [xp, vp] + ([vhp] if vhp is not None else []) + [tp]
    sizes = [p.shape[0] for p in parts]
    num_text = tp.shape[0]
    allow = attention_allow_mask(mask, sum(sizes) - num_text, num_text)
    out = attention_forward(ad.concat(parts, axis=0), params, allow, weights)
    offs = np.cumsum([0] + sizes)
    sliced = [ad.narrow(out, 0, int(lo), int(hi - lo)) for lo, hi in zip(offs[:-1], offs[1:])]
    if vhp is not None:
        return sliced[0], sliced[1], sliced[2], sliced[3]
    return sliced[0], sliced[1], None, sliced[2]


def visual_logits_t(
    xp: Tensor,
    vp: Tensor,
    vhp: Tensor | None,
    params: ModelParams,
    base_ids,
    new_ids,
) -> Tensor:
    """Cosine-vs-prototype logits / tau_v, columns scattered into class order.

    Without a virtual block the columns cover only base_ids (in that order);
    with one, all K classes are covered and the joint softmax over the result
    spans base and virtual prototypes together.
    """
    cos_base = cosine_t(xp, vp)
    if vhp is None:
        return (1.0 / params.tau_v) * cos_base
    cos_all = ad.concat([cos_base, cosine_t(xp, vhp)], axis=1)
    order = list(base_ids) + list(new_ids)
    k = len(order)
    perm = np.zeros((k, k))
    for col, class_id in enumerate(order):
        perm[col, class_id] = 1.0
    return (1.0 / params.tau_v) * ad.matmul(cos_all, Tensor(perm))


def textual_logits_t(xp: Tensor, tp: Tensor, params: ModelParams) -> Tensor:
    return (1.0 / params.tau_t) * cosine_t(xp, tp)


def _as_tensors(params: ModelParams, *names: str) -> list[Tensor]:
    return [Tensor(getattr(params, n)) for n in names]


# -- ndarray-facing API ----------------------------------------------------


def project_logits(x: np.ndarray, text: np.ndarray, params: ModelParams) -> np.ndarray:
    """Pre-attention image-text logits: cos(x W_PI, T W_PT) / tau_t."""
    return project_logits_t(Tensor(x), Tensor(text), params).data


def cross_modal_attention(
    x: np.ndarray,
    visual: np.ndarray,
    virtual: np.ndarray | None,
    text: np.ndarray,
    params: ModelParams,
    mask: str = "none",
):
    """ndarray wrapper over the attention pass; returns (x', V', V_hat', T')."""
    xp, vp, vhp, tp = cross_modal_attention_t(
        Tensor(x),
        Tensor(visual),
        Tensor(virtual) if virtual is not None else None,
        Tensor(text),
        params,
        mask,
    )
    return xp.data, vp.data, (vhp.data if vhp is not None else None), tp.data


def visual_logits(xp, vp, vhp, params: ModelParams, base_ids, new_ids) -> np.ndarray:
    return visual_logits_t(
        Tensor(xp), Tensor(vp), Tensor(vhp) if vhp is not None else None,
        params, base_ids, new_ids,
    ).data


def textual_logits(xp, tp, params: ModelParams) -> np.ndarray:
    return textual_logits_t(Tensor(xp), Tensor(tp), params).data


def aggregate_logits(
    x: np.ndarray,
    prototypes: PrototypeSet,
    params: ModelParams,
    mask: str = "none",
    use_attention: bool = True,
    use_virtual: bool = True,
    eval_batch: int | None = 1,
) -> np.ndarray:
    """Inference logits z_V + z_T over all K classes.

    Without virtual prototypes the new-class columns carry only the textual
    term (there is nothing to match against in the visual modality).

    ``eval_batch`` controls how many test rows enter the attention window
    together.  The default of 1 scores every sample independently; larger
    windows let test samples interact through attention (transductive
    inference), and None admits the whole batch at once.
    """
    x = np.asarray(x, dtype=np.float64)
    if use_attention and eval_batch is not None and x.shape[0] > eval_batch:
        chunks = [
            aggregate_logits(x[i : i + eval_batch], prototypes, params, mask,
                             use_attention, use_virtual, eval_batch=None)
            for i in range(0, x.shape[0], eval_batch)
        ]
        return np.concatenate(chunks, axis=0)
    virtual = prototypes.virtual if (use_virtual and len(prototypes.new_ids)) else None
    if use_attention:
        xp, vp, vhp, tp = cross_modal_attention_t(
            Tensor(x), Tensor(prototypes.visual),
            Tensor(virtual) if virtual is not None else None,
            Tensor(prototypes.textual), params, mask,
        )
    else:
        w_pi, w_pt = _as_tensors(params, "w_pi", "w_pt")
        xp = ad.matmul(Tensor(x), w_pi)
        vp = ad.matmul(Tensor(prototypes.visual), w_pi)
        vhp = ad.matmul(Tensor(virtual), w_pi) if virtual is not None else None
        tp = ad.matmul(Tensor(prototypes.textual), w_pt)
    z_t = textual_logits_t(xp, tp, params).data
    if virtual is not None:
        z_v = visual_logits_t(xp, vp, vhp, params, prototypes.base_ids, prototypes.new_ids).data
        return z_v + z_t
    z = z_t.copy()
    z_v_base = visual_logits_t(xp, vp, None, params, prototypes.base_ids, ()).data
    z[:, list(prototypes.base_ids)] += z_v_base
    return z


def argmax_labels(logits: np.ndarray, label_space=None) -> np.ndarray:
    """Argmax restricted to label_space; ties go to the lowest class index."""
    k = logits.shape[1]
    ids = np.arange(k) if label_space is None else np.asarray(sorted(label_space), dtype=np.int64)
    if ids.size == 0:
        raise ParameterError("label space is empty")
    sub = logits[:, ids]
    return ids[np.argmax(sub, axis=1)]


def predict(
    x: np.ndarray,
    prototypes: PrototypeSet,
    params: ModelParams,
    label_space=None,
    mask: str = "none",
    use_attention: bool = True,
    use_virtual: bool = True,
    eval_batch: int | None = 1,
) -> np.ndarray:
    """Aggregated-logit prediction over an explicit evaluation label space."""
    z = aggregate_logits(x, prototypes, params, mask, use_attention, use_virtual,
                         eval_batch=eval_batch)
    return argmax_labels(z, label_space)


def _cosine_np(x: np.ndarray, protos: np.ndarray) -> np.ndarray:
    xn = x / np.linalg.norm(x, axis=1, keepdims=True)
    pn = protos / np.linalg.norm(protos, axis=1, keepdims=True)
    return xn @ pn.T


def zero_shot_predict(x: np.ndarray, text: np.ndarray) -> np.ndarray:
    """Raw cosine matching against textual prototypes (row index = class)."""
    return np.argmax(_cosine_np(np.asarray(x, dtype=np.float64), np.asarray(text, dtype=np.float64)), axis=1)


def visual_proto_predict(x: np.ndarray, visual: np.ndarray) -> np.ndarray:
    """Raw cosine matching against visual prototypes; returns row indices."""
    return np.argmax(_cosine_np(np.asarray(x, dtype=np.float64), np.asarray(visual, dtype=np.float64)), axis=1)


# -- checkpoint serialization ----------------------------------------------


def save_checkpoint(destination, params: ModelParams, prototypes: PrototypeSet,
                    class_names) -> None:
    """Layout: "CNDM", u32 version, u32 header length, JSON header, f32 blobs.

    Blob order is fixed: W_PI, W_PT, W_Q, W_K, W_V, W_O, visual, textual,
    virtual prototypes.
    """
    params.validate()
    header = {
        "dim": params.dim,
        "heads": params.heads,
        "tau_t": params.tau_t,
        "tau_v": params.tau_v,
        "base_ids": list(prototypes.base_ids),
        "new_ids": list(prototypes.new_ids),
        "class_names": list(class_names),
    }
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    blobs = {
        "w_pi": params.w_pi, "w_pt": params.w_pt, "w_q": params.w_q,
        "w_k": params.w_k, "w_v": params.w_v, "w_o": params.w_o,
        "visual": prototypes.visual, "textual": prototypes.textual,
        "virtual": prototypes.virtual,
    }
    sink = open(destination, "wb") if isinstance(destination, (str, Path)) else destination
    owned = isinstance(destination, (str, Path))
    try:
        sink.write(CKPT_MAGIC)
        sink.write(struct.pack("<I", CKPT_VERSION))
        sink.write(struct.pack("<I", len(header_bytes)))
        sink.write(header_bytes)
        for name in _BLOB_ORDER:
            sink.write(np.ascontiguousarray(blobs[name], dtype="<f4").tobytes())
    finally:
        if owned:
            sink.close()


def load_checkpoint(source) -> tuple[ModelParams, PrototypeSet, tuple[str, ...]]:
    if isinstance(source, (str, Path)):
        src = open(source, "rb")
        owned = True
    elif isinstance(source, (bytes, bytearray)):
        src = io.BytesIO(source)
        owned = True
    else:
        src, owned = source, False
    try:
        magic = src.read(4)
        if magic != CKPT_MAGIC:
            raise FormatError(f"bad magic {magic!r} at offset 0, expected {CKPT_MAGIC!r}")
        (version,) = struct.unpack("<I", src.read(4))
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported version {version} at offset 4")
        (header_len,) = struct.unpack("<I", src.read(4))
        header_bytes = src.read(header_len)
        if len(header_bytes) != header_len:
            raise FormatError("truncated checkpoint header at offset 12")
        header = json.loads(header_bytes.decode("utf-8"))
        d = int(header["dim"])
        base_ids = tuple(int(i) for i in header["base_ids"])
        new_ids = tuple(int(i) for i in header["new_ids"])
        k = len(header["class_names"])
        shapes = {
            "w_pi": (d, d), "w_pt": (d, d), "w_q": (d, d), "w_k": (d, d),
            "w_v": (d, d), "w_o": (d, d),
            "visual": (len(base_ids), d), "textual": (k, d),
            "virtual": (len(new_ids), d),
        }
        payload = src.read()
        expected = sum(int(np.prod(s)) * 4 for s in shapes.values())
        if len(payload) != expected:
            raise FormatError(
                f"blob length mismatch: expected {expected} bytes, got {len(payload)}"
            )
        blobs = {}
        offset = 0
        for name in _BLOB_ORDER:
            n = int(np.prod(shapes[name]))
            blobs[name] = (
                np.frombuffer(payload, dtype="<f4", count=n, offset=offset)
                .astype(np.float64)
                .reshape(shapes[name])
            )
            offset += n * 4
        params = ModelParams(
            w_pi=blobs["w_pi"], w_pt=blobs["w_pt"], w_q=blobs["w_q"],
            w_k=blobs["w_k"], w_v=blobs["w_v"], w_o=blobs["w_o"],
            tau_t=float(header["tau_t"]), tau_v=float(header["tau_v"]),
            heads=int(header["heads"]),
        )
        params.validate()
        prototypes = PrototypeSet(
            visual=blobs["visual"], textual=blobs["textual"], virtual=blobs["virtual"],
            base_ids=base_ids, new_ids=new_ids,
        )
        return params, prototypes, tuple(header["class_names"])
    finally:
        if owned:
            src.close()
