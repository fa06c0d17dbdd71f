"""The trainable network: feature projection, span masking with a learned
mask embedding, a pre-norm transformer stack with sinusoidal positions, an
intermediate tap feeding the contrastive objective, and a linear
content-prediction head over pseudo-label classes.

Forward and backward passes are written out by hand in float64; backward is
verified against central finite differences in the test suite. Utterances
never interact, so everything here is per-utterance.
"""

from dataclasses import dataclass, field

import numpy as np

from .dsp import FeatureSequence
from .numerics import (
    gelu_backward,
    gelu_forward,
    layer_norm_backward,
    layer_norm_forward,
    linear_backward,
    softmax,
    softmax_backward,
)

# (kernel, stride) per conv layer; overall stride 5*4*8 = 160 samples, the
# default MFCC hop, so conv-mode frame rates line up with precomputed mode.
CONV_SHAPE = ((10, 5), (8, 4), (8, 8))


@dataclass
class EncoderConfig:
    input_dim: int = 39
    model_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    ffn_dim: int = 128
    num_classes: int = 16
    tap_layer: int = 2
    mask_span: int = 10
    mask_start_prob: float = 0.08
    front_end: str = "precomputed"
    conv_channels: int = 16

    def __post_init__(self):
        if not 0 <= self.tap_layer <= self.num_layers:
            raise ValueError("tap_layer must lie in [0, num_layers]")
        if self.model_dim % self.num_heads != 0:
            raise ValueError("num_heads must divide model_dim")
        if self.mask_span < 1:
            raise ValueError("mask_span must be >= 1")
        if not 0.0 <= self.mask_start_prob <= 1.0:
            raise ValueError("mask_start_prob must lie in [0, 1]")
        if self.front_end not in ("precomputed", "conv"):
            raise ValueError("front_end must be 'precomputed' or 'conv'")
        if self.front_end == "conv" and self.input_dim != self.conv_channels:
            raise ValueError("conv mode requires input_dim == conv_channels")


@dataclass
class MaskSet:
    """Masked frame indices (0-based) and their merged spans."""

    indices: np.ndarray
    spans: list
    num_frames: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.size:
            if self.indices.min() < 0 or self.indices.max() >= self.num_frames:
                raise ValueError("mask indices out of range")
            if np.any(np.diff(self.indices) <= 0):
                raise ValueError("mask indices must be strictly increasing")
        covered = np.concatenate(
            [np.arange(s, s + l) for s, l in self.spans]
        ) if self.spans else np.array([], dtype=np.int64)
        if not np.array_equal(np.sort(covered), self.indices):
            raise ValueError("spans must cover exactly the masked indices")

    def __len__(self) -> int:
        return self.indices.size

    @classmethod
    def empty(cls, num_frames: int) -> "MaskSet":
        return cls(np.array([], dtype=np.int64), [], num_frames)

    @classmethod
    def from_indices(cls, indices, num_frames: int) -> "MaskSet":
        indices = np.unique(np.asarray(indices, dtype=np.int64))
        spans = []
        for idx in indices:
            if spans and idx == spans[-1][0] + spans[-1][1]:
                spans[-1][1] += 1
            else:
                spans.append([int(idx), 1])
        return cls(indices, [tuple(s) for s in spans], num_frames)


def sample_mask(num_frames: int, cfg: EncoderConfig, seed: int,
                min_spans: int = 0) -> MaskSet:
    """Each frame starts a span of `mask_span` frames (clipped at the end)
    with probability `mask_start_prob`; overlapping spans merge. With
    min_spans >= 1 a fallback span is placed when nothing was sampled."""
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    rng = np.random.default_rng(seed)
    starts = np.nonzero(rng.random(num_frames) < cfg.mask_start_prob)[0]
    if starts.size == 0 and min_spans >= 1:
        starts = np.array([rng.integers(num_frames)])
    if starts.size == 0:
        return MaskSet.empty(num_frames)
    covered = np.concatenate(
        [np.arange(s, min(s + cfg.mask_span, num_frames)) for s in starts]
    )
    return MaskSet.from_indices(covered, num_frames)


def corrupt(frames: np.ndarray, mask: MaskSet, mask_embedding: np.ndarray) -> np.ndarray:
    """Replace masked frames with the learned mask embedding."""
    frames = np.asarray(frames, dtype=np.float64)
    if mask.indices.size and mask.indices.max() >= frames.shape[0]:
        raise ValueError("mask index out of range for this sequence")
    if mask_embedding.shape != (frames.shape[1],):
        raise ValueError("mask embedding dim does not match frames")
    out = frames.copy()
    out[mask.indices] = mask_embedding
    return out


def sinusoidal_positions(num_frames: int, dim: int) -> np.ndarray:
    pos = np.arange(num_frames)[:, None].astype(np.float64)
    i = np.arange(0, dim, 2).astype(np.float64)
    angles = pos / (10000.0 ** (i / dim))[None, :]
    enc = np.zeros((num_frames, dim))
    enc[:, 0::2] = np.sin(angles)
    enc[:, 1::2] = np.cos(angles[:, : dim // 2])
    return enc


@dataclass
class EncoderOutput:
    tap: np.ndarray
    final: np.ndarray
    content_logits: np.ndarray
    mask: MaskSet
    layer_outputs: list = field(repr=False, default_factory=list)
    cache: dict = field(repr=False, compare=False, default_factory=dict)

    @property
    def num_frames(self) -> int:
        return self.final.shape[0]


# ---------------------------------------------------------------------------
# Parameters


def init_encoder_params(cfg: EncoderConfig, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    d = cfg.model_dim

    def xavier(n_in, n_out):
        limit = np.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-limit, limit, (n_in, n_out))

    params = {}
    if cfg.front_end == "conv":
        c_in = 1
        for i, (kernel, _) in enumerate(CONV_SHAPE):
            params[f"conv{i}/W"] = xavier(kernel * c_in, cfg.conv_channels)
            params[f"conv{i}/b"] = np.zeros(cfg.conv_channels)
            c_in = cfg.conv_channels
    params["proj/W"] = xavier(cfg.input_dim, d)
    params["proj/b"] = np.zeros(d)
    params["mask_emb"] = rng.normal(0.0, 0.1, d)
    for i in range(cfg.num_layers):
        params[f"block{i}/ln1/g"] = np.ones(d)
        params[f"block{i}/ln1/b"] = np.zeros(d)
        # attention projections carry no biases: a key bias is provably inert
        # under softmax and would defeat finite-difference verification
        for name in ("Wq", "Wk", "Wv", "Wo"):
            params[f"block{i}/attn/{name}"] = xavier(d, d)
        params[f"block{i}/ln2/g"] = np.ones(d)
        params[f"block{i}/ln2/b"] = np.zeros(d)
        params[f"block{i}/ffn/W1"] = xavier(d, cfg.ffn_dim)
        params[f"block{i}/ffn/b1"] = np.zeros(cfg.ffn_dim)
        params[f"block{i}/ffn/W2"] = xavier(cfg.ffn_dim, d)
        params[f"block{i}/ffn/b2"] = np.zeros(d)
    params["final_ln/g"] = np.ones(d)
    params["final_ln/b"] = np.zeros(d)
    params["head/W"] = xavier(d, cfg.num_classes)
    params["head/b"] = np.zeros(cfg.num_classes)
    return params


def zero_grads(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# Conv front end (waveform mode): valid strided conv + GELU per layer


def _conv_forward(samples: np.ndarray, params: dict, cfg: EncoderConfig):
    h = samples[:, None]
    caches = []
    for i, (kernel, stride) in enumerate(CONV_SHAPE):
        t_out = 1 + (h.shape[0] - kernel) // stride
        if t_out < 1:
            raise ValueError("waveform too short for the conv front end")
        idx = stride * np.arange(t_out)[:, None] + np.arange(kernel)[None, :]
        windows = h[idx].reshape(t_out, kernel * h.shape[1])
        pre = windows @ params[f"conv{i}/W"] + params[f"conv{i}/b"]
        caches.append((windows, pre, idx, h.shape))
        h = gelu_forward(pre)
    return h, caches


def _conv_backward(caches, dh, params: dict, grads: dict):
    for i in reversed(range(len(CONV_SHAPE))):
        windows, pre, idx, h_shape = caches[i]
        dpre = gelu_backward(pre, dh)
        dwin, dw, db = linear_backward(windows, params[f"conv{i}/W"], dpre)
        grads[f"conv{i}/W"] += dw
        grads[f"conv{i}/b"] += db
        kernel = CONV_SHAPE[i][0]
        dprev = np.zeros(h_shape)
        np.add.at(dprev, idx, dwin.reshape(dwin.shape[0], kernel, h_shape[1]))
        dh = dprev
    return dh


# ---------------------------------------------------------------------------
# Transformer


def _attention_forward(x, params, prefix, num_heads):
    t, d = x.shape
    dh = d // num_heads
    q = x @ params[f"{prefix}/Wq"]
    k = x @ params[f"{prefix}/Wk"]
    v = x @ params[f"{prefix}/Wv"]
    qh = q.reshape(t, num_heads, dh).transpose(1, 0, 2)
    kh = k.reshape(t, num_heads, dh).transpose(1, 0, 2)
    vh = v.reshape(t, num_heads, dh).transpose(1, 0, 2)
    scores = qh @ kh.transpose(0, 2, 1) / np.sqrt(dh)
    attn = softmax(scores, axis=-1)
    ctx = (attn @ vh).transpose(1, 0, 2).reshape(t, d)
    out = ctx @ params[f"{prefix}/Wo"]
    return out, (x, qh, kh, vh, attn, ctx)


def _attention_backward(cache, dout, params, prefix, num_heads, grads):
    x, qh, kh, vh, attn, ctx = cache
    t, d = x.shape
    dh = d // num_heads
    grads[f"{prefix}/Wo"] += ctx.T @ dout
    dctx = dout @ params[f"{prefix}/Wo"].T
    dctx_h = dctx.reshape(t, num_heads, dh).transpose(1, 0, 2)
    dattn = dctx_h @ vh.transpose(0, 2, 1)
    dvh = attn.transpose(0, 2, 1) @ dctx_h
    dscores = softmax_backward(attn, dattn) / np.sqrt(dh)
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 2, 1) @ qh
    dx = np.zeros_like(x)
    for name, dhead in (("Wq", dqh), ("Wk", dkh), ("Wv", dvh)):
        dflat = dhead.transpose(1, 0, 2).reshape(t, d)
        grads[f"{prefix}/{name}"] += x.T @ dflat
        dx += dflat @ params[f"{prefix}/{name}"].T
    return dx


def _block_forward(x, params, i, cfg):
    n1, c_ln1 = layer_norm_forward(x, params[f"block{i}/ln1/g"], params[f"block{i}/ln1/b"])
    attn_out, c_attn = _attention_forward(n1, params, f"block{i}/attn", cfg.num_heads)
    a = x + attn_out
    n2, c_ln2 = layer_norm_forward(a, params[f"block{i}/ln2/g"], params[f"block{i}/ln2/b"])
    pre = n2 @ params[f"block{i}/ffn/W1"] + params[f"block{i}/ffn/b1"]
    act = gelu_forward(pre)
    out = act @ params[f"block{i}/ffn/W2"] + params[f"block{i}/ffn/b2"]
    y = a + out
    return y, (c_ln1, c_attn, c_ln2, n2, pre, act)


def _block_backward(cache, dy, params, i, cfg, grads):
    c_ln1, c_attn, c_ln2, n2, pre, act = cache
    dact, dw2, db2 = linear_backward(act, params[f"block{i}/ffn/W2"], dy)
    grads[f"block{i}/ffn/W2"] += dw2
    grads[f"block{i}/ffn/b2"] += db2
    dpre = gelu_backward(pre, dact)
    dn2, dw1, db1 = linear_backward(n2, params[f"block{i}/ffn/W1"], dpre)
    grads[f"block{i}/ffn/W1"] += dw1
    grads[f"block{i}/ffn/b1"] += db1
    da, dg2, dbias2 = layer_norm_backward(c_ln2, dn2)
    grads[f"block{i}/ln2/g"] += dg2
    grads[f"block{i}/ln2/b"] += dbias2
    da = da + dy
    dn1 = _attention_backward(c_attn, da, params, f"block{i}/attn", cfg.num_heads, grads)
    dx, dg1, dbias1 = layer_norm_backward(c_ln1, dn1)
    grads[f"block{i}/ln1/g"] += dg1
    grads[f"block{i}/ln1/b"] += dbias1
    return dx + da


def forward(features: FeatureSequence, mask: MaskSet, params: dict,
            cfg: EncoderConfig) -> EncoderOutput:
    """Project, corrupt masked frames, run the transformer stack, and emit
    per-layer outputs plus content logits. layer_outputs[0] is the projected
    corrupted input; layer_outputs[j] is the output of block j."""
    feats = features.frames
    conv_caches = None
    if cfg.front_end == "conv":
        if feats.shape[1] != 1:
            raise ValueError("conv front end expects a T x 1 sample matrix")
        feats, conv_caches = _conv_forward(feats[:, 0], params, cfg)
    if feats.shape[1] != cfg.input_dim:
        raise ValueError(f"feature dim {feats.shape[1]} != configured input_dim {cfg.input_dim}")
    t = feats.shape[0]
    if mask.num_frames != t:
        raise ValueError(f"mask covers {mask.num_frames} frames but encoder sees {t}")

    projected = feats @ params["proj/W"] + params["proj/b"]
    h0 = corrupt(projected, mask, params["mask_emb"])
    layer_outputs = [h0]
    block_caches = []
    h = h0
    if cfg.num_layers >= 1:
        h = h0 + sinusoidal_positions(t, cfg.model_dim)
        for i in range(cfg.num_layers):
            h, cache = _block_forward(h, params, i, cfg)
            if not np.all(np.isfinite(h)):
                raise FloatingPointError(f"non-finite activations after layer {i + 1}")
            block_caches.append(cache)
            layer_outputs.append(h)
    final, c_final = layer_norm_forward(h, params["final_ln/g"], params["final_ln/b"])
    logits = final @ params["head/W"] + params["head/b"]
    cache = {
        "features": feats,
        "conv": conv_caches,
        "blocks": block_caches,
        "final_ln": c_final,
        "final": final,
        "mask": mask,
    }
    return EncoderOutput(layer_outputs[cfg.tap_layer], final, logits, mask,
                         layer_outputs, cache)


def backward(output: EncoderOutput, params: dict, cfg: EncoderConfig,
             dlogits: np.ndarray | None = None,
             dtap: np.ndarray | None = None,
             grads: dict | None = None) -> dict:
    """Accumulate parameter gradients for upstream gradients arriving at the
    content logits and/or at the tap layer. Returns the grads dict."""
    cache = output.cache
    if grads is None:
        grads = zero_grads(params)
    t = output.num_frames
    d = cfg.model_dim

    if dlogits is not None:
        final = cache["final"]
        dfinal, dwh, dbh = linear_backward(final, params["head/W"], dlogits)
        grads["head/W"] += dwh
        grads["head/b"] += dbh
    else:
        dfinal = np.zeros((t, d))
    dh, dg, db = layer_norm_backward(cache["final_ln"], dfinal)
    grads["final_ln/g"] += dg
    grads["final_ln/b"] += db

    for i in reversed(range(cfg.num_layers)):
        if dtap is not None and cfg.tap_layer == i + 1:
            dh = dh + dtap
        dh = _block_backward(cache["blocks"][i], dh, params, i, cfg, grads)
    if dtap is not None and cfg.tap_layer == 0:
        dh = dh + dtap

    mask = cache["mask"]
    grads["mask_emb"] += dh[mask.indices].sum(axis=0)
    dproj = dh.copy()
    dproj[mask.indices] = 0.0
    dfeats, dwp, dbp = linear_backward(cache["features"], params["proj/W"], dproj)
    grads["proj/W"] += dwp
    grads["proj/b"] += dbp
    if cfg.front_end == "conv":
        _conv_backward(cache["conv"], dfeats, params, grads)
    return grads
