"""Compact semantic-communication autoencoder with hand-written backprop.

The pipeline is ``image -> semantic encoder -> channel encoder -> channel ->
channel decoder -> semantic decoder -> image``.  Both codecs work on
non-overlapping image patches with weights shared across patches.  The
semantic codec is a wide two-layer MLP; the channel codec is a narrow stack of
seven dense layers with one skip connection and an SNR side branch
concatenated halfway through, applied to each patch's feature token as in
WITT-style channel codecs.  The default widths keep the semantic groups about
twice the size of the channel groups.

All parameters live in one :class:`~fedsemcom.params.ParamVector`; each codec
reads its own group slice through a fixed layer table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import channel as ch
from .errors import ChannelInputError, LayoutError, UsageError
from .params import (
    CHANNEL_DEC,
    CHANNEL_ENC,
    GROUPS,
    SEMANTIC_DEC,
    SEMANTIC_ENC,
    DEFAULT_BYTES_PER_ELEMENT,
    GroupLayout,
    ParamVector,
)

DEFAULT_LR = 1e-4
CHANNEL_DEPTH = 7
# SNR enters the side branch as snr_db * SNR_SCALE so typical values sit near 1.
SNR_SCALE = 0.1
# Decoder output is clamp(z + OUTPUT_OFFSET, 0, 1); zero pre-activation maps to mid-gray.
OUTPUT_OFFSET = 0.5


@dataclass(frozen=True)
class ModelSpec:
    image_shape: tuple[int, int, int] = (3, 32, 32)
    patch_size: int = 8
    semantic_hidden: int = 64
    patch_features: int = 16
    channel_width: int = 32
    snr_width: int = 8
    symbol_dim: int | None = None
    bias: bool = True
    bytes_per_element: int = DEFAULT_BYTES_PER_ELEMENT

    def __post_init__(self) -> None:
        c, h, w = self.image_shape
        if min(c, h, w, self.patch_size) < 1:
            raise LayoutError(f"bad image/patch shape {self.image_shape}/{self.patch_size}")
        if h % self.patch_size or w % self.patch_size:
            raise LayoutError(f"image {h}x{w} not divisible into {self.patch_size}px patches")
        patches = (h // self.patch_size) * (w // self.patch_size)
        if self.symbol_dim is None:
            # 1/16 of each patch's real elements, bumped up if the total is odd.
            per_patch = max(1, c * self.patch_size**2 // 16)
            if per_patch * patches % 2:
                per_patch += 1
            object.__setattr__(self, "symbol_dim", per_patch * patches)
        if self.symbol_dim % 2:
            raise LayoutError(f"symbol_dim must be even, got {self.symbol_dim}")
        if self.symbol_dim % patches:
            raise LayoutError(f"symbol_dim {self.symbol_dim} does not split over {patches} patches")
        for name in ("semantic_hidden", "patch_features", "channel_width", "snr_width"):
            if getattr(self, name) < 1:
                raise LayoutError(f"{name} must be positive")

    @property
    def image_size(self) -> int:
        c, h, w = self.image_shape
        return c * h * w

    @property
    def num_patches(self) -> int:
        _, h, w = self.image_shape
        return (h // self.patch_size) * (w // self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.image_shape[0] * self.patch_size**2

    @property
    def feature_dim(self) -> int:
        return self.num_patches * self.patch_features

    @property
    def symbols_per_patch(self) -> int:
        return self.symbol_dim // self.num_patches

    @property
    def compression_ratio(self) -> float:
        return self.symbol_dim / self.image_size


MICRO_SPEC = ModelSpec(
    image_shape=(1, 4, 4),
    patch_size=2,
    semantic_hidden=2,
    patch_features=2,
    channel_width=2,
    snr_width=1,
    symbol_dim=8,
)


# --------------------------------------------------------------------------
# layer tables


@dataclass(frozen=True)
class _Entry:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return math.prod(self.shape)


def _dense_entries(prefix: str, n_in: int, n_out: int, bias: bool) -> list[tuple[str, tuple[int, ...]]]:
    out = [(f"{prefix}.w", (n_in, n_out))]
    if bias:
        out.append((f"{prefix}.b", (n_out,)))
    return out


def _semantic_table(spec: ModelSpec, encoder: bool) -> list[tuple[str, tuple[int, ...]]]:
    if encoder:
        dims = [spec.patch_dim, spec.semantic_hidden, spec.patch_features]
    else:
        dims = [spec.patch_features, spec.semantic_hidden, spec.patch_dim]
    return _dense_entries("fc1", dims[0], dims[1], spec.bias) + _dense_entries(
        "fc2", dims[1], dims[2], spec.bias
    )


def _channel_table(spec: ModelSpec, n_in: int, n_out: int) -> list[tuple[str, tuple[int, ...]]]:
    w = spec.channel_width
    rows = _dense_entries("fc1", n_in, w, spec.bias)
    rows += _dense_entries("fc2", w, w, spec.bias)
    rows += _dense_entries("fc3", w, w, spec.bias)
    rows += _dense_entries("snr", 1, spec.snr_width, spec.bias)
    rows += _dense_entries("fc4", w + spec.snr_width, w, spec.bias)
    rows += _dense_entries("fc5", w, w, spec.bias)
    rows += _dense_entries("fc6", w, w, spec.bias)
    rows += _dense_entries("fc7", w, n_out, spec.bias)
    return rows


def _index(rows: list[tuple[str, tuple[int, ...]]]) -> dict[str, _Entry]:
    table = {}
    offset = 0
    for name, shape in rows:
        e = _Entry(name, shape, offset)
        table[name] = e
        offset += e.size
    return table


def _unpack(flat: np.ndarray, table: dict[str, _Entry]) -> dict[str, np.ndarray]:
    return {k: flat[e.offset : e.offset + e.size].reshape(e.shape) for k, e in table.items()}


# --------------------------------------------------------------------------
# primitives


def _dense(p: dict[str, np.ndarray], name: str, x: np.ndarray) -> np.ndarray:
    y = x @ p[f"{name}.w"]
    b = p.get(f"{name}.b")
    return y if b is None else y + b


def _dense_back(
    p: dict[str, np.ndarray],
    g: dict[str, np.ndarray],
    name: str,
    x: np.ndarray,
    gy: np.ndarray,
) -> np.ndarray:
    w = p[f"{name}.w"]
    g[f"{name}.w"] += x.reshape(-1, x.shape[-1]).T @ gy.reshape(-1, gy.shape[-1])
    if f"{name}.b" in g:
        g[f"{name}.b"] += gy.reshape(-1, gy.shape[-1]).sum(axis=0)
    return gy @ w.T


def _patchify(images: np.ndarray, p: int) -> np.ndarray:
    b, c, h, w = images.shape
    x = images.reshape(b, c, h // p, p, w // p, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, (h // p) * (w // p), c * p * p)


def _unpatchify(patches: np.ndarray, shape: tuple[int, int, int], p: int) -> np.ndarray:
    c, h, w = shape
    b = patches.shape[0]
    x = patches.reshape(b, h // p, w // p, c, p, p).transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(b, c, h, w)


def power_normalize(z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Scale each row to mean-square 1; all-zero rows stay zero and are flagged."""
    with np.errstate(over="ignore"):
        energy = np.mean(z * z, axis=-1, keepdims=True)
    if not np.all(np.isfinite(energy)):
        # overflow upstream; dividing by inf would silently zero the symbols
        raise LayoutError("channel encoder output is not finite")
    zero = energy[..., 0] == 0.0
    inv = np.where(energy > 0, 1.0 / np.sqrt(np.where(energy > 0, energy, 1.0)), 0.0)
    return z * inv, inv, zero


def _power_normalize_back(x: np.ndarray, inv: np.ndarray, gx: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    proj = np.sum(x * gx, axis=-1, keepdims=True) / n
    return (gx - x * proj) * inv


# --------------------------------------------------------------------------
# traces


@dataclass
class StageTrace:
    group_id: str
    params: ParamVector
    cache: dict = field(default_factory=dict)


@dataclass
class PipelineTrace:
    """Everything needed to backpropagate one full forward pass."""

    semantic_enc: StageTrace | None = None
    channel_enc: StageTrace | None = None
    channel_gain: np.ndarray | None = None
    channel_dec: StageTrace | None = None
    semantic_dec: StageTrace | None = None
    deep_fades: int = 0
    zero_energy: int = 0


ChannelFn = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray, int]]


def _check_snr(snr_db: float) -> float:
    snr = float(snr_db)
    if not math.isfinite(snr):
        raise ChannelInputError(f"snr_db must be finite, got {snr_db}")
    return snr


class SemComModel:
    """Forward/backward passes for a given :class:`ModelSpec`.

    The model object is stateless apart from its layer tables; parameters are
    always passed in explicitly.
    """

    def __init__(self, spec: ModelSpec = ModelSpec()):
        self.spec = spec
        self.tables = {
            SEMANTIC_ENC: _index(_semantic_table(spec, encoder=True)),
            CHANNEL_ENC: _index(_channel_table(spec, spec.patch_features, spec.symbols_per_patch)),
            CHANNEL_DEC: _index(_channel_table(spec, spec.symbols_per_patch, spec.patch_features)),
            SEMANTIC_DEC: _index(_semantic_table(spec, encoder=False)),
        }
        lengths = {gid: sum(e.size for e in t.values()) for gid, t in self.tables.items()}
        self.layout = GroupLayout.from_lengths(lengths, spec.bytes_per_element)

    # -- parameters ---------------------------------------------------------

    def init_params(self, seed: int) -> ParamVector:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
        rng = np.random.default_rng(seed)
        out = np.empty(self.layout.total_length)
        for gid in GROUPS:
            base = self.layout.span(gid).offset
            for name, e in self.tables[gid].items():
                layer = name.rsplit(".", 1)[0]
                fan_in = self.tables[gid][f"{layer}.w"].shape[0]
                s = 1.0 / math.sqrt(fan_in)
                out[base + e.offset : base + e.offset + e.size] = rng.uniform(-s, s, e.size)
        return ParamVector(out, self.layout)

    def _group(self, params: ParamVector, gid: str) -> dict[str, np.ndarray]:
        if params.layout != self.layout:
            raise LayoutError("parameter vector does not match this model's layout")
        return _unpack(params.group(gid), self.tables[gid])

    # -- forward stages -------------------------------------------------------

    def _batch(self, x: np.ndarray, tail: tuple[int, ...], what: str) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        if x.shape == tail:
            return x[None], True
        if x.ndim == len(tail) + 1 and x.shape[1:] == tail:
            return x, False
        raise LayoutError(f"{what} has shape {x.shape}, expected {tail} or (batch, *{tail})")

    def semantic_encode(self, params: ParamVector, image: np.ndarray) -> tuple[np.ndarray, StageTrace]:
        x, single = self._batch(image, tuple(self.spec.image_shape), "image")
        p = self._group(params, SEMANTIC_ENC)
        patches = _patchify(x, self.spec.patch_size)
        a1 = np.tanh(_dense(p, "fc1", patches))
        feats = _dense(p, "fc2", a1).reshape(x.shape[0], -1)
        trace = StageTrace(SEMANTIC_ENC, params, {"patches": patches, "a1": a1})
        return (feats[0] if single else feats), trace

    def _channel_stack(
        self, p: dict[str, np.ndarray], x: np.ndarray, snr_db: float
    ) -> tuple[np.ndarray, dict]:
        # x is (batch, patches, width); every patch token goes through the same stack
        snr_in = np.full(x.shape[:-1] + (1,), snr_db * SNR_SCALE)
        h1 = np.tanh(_dense(p, "fc1", x))
        h2 = np.tanh(_dense(p, "fc2", h1))
        h3 = np.tanh(_dense(p, "fc3", h2))
        s = np.tanh(_dense(p, "snr", snr_in))
        cat = np.concatenate([h3, s], axis=-1)
        h4 = np.tanh(_dense(p, "fc4", cat))
        h5 = np.tanh(_dense(p, "fc5", h4))
        h6 = np.tanh(_dense(p, "fc6", h5))
        skip = h6 + h1
        z = _dense(p, "fc7", skip)
        cache = dict(x=x, snr_in=snr_in, h1=h1, h2=h2, h3=h3, s=s, cat=cat, h4=h4, h5=h5, h6=h6, skip=skip)
        return z, cache

    def _channel_stack_back(
        self, p: dict[str, np.ndarray], c: dict, gz: np.ndarray
    ) -> tuple[dict[str, np.ndarray], np.ndarray]:
        g = {k: np.zeros_like(v) for k, v in p.items()}
        g_skip = _dense_back(p, g, "fc7", c["skip"], gz)
        g_h6 = g_skip
        g_h5 = _dense_back(p, g, "fc6", c["h5"], g_h6 * (1 - c["h6"] ** 2))
        g_h4 = _dense_back(p, g, "fc5", c["h4"], g_h5 * (1 - c["h5"] ** 2))
        g_cat = _dense_back(p, g, "fc4", c["cat"], g_h4 * (1 - c["h4"] ** 2))
        w = self.spec.channel_width
        g_h3, g_s = g_cat[..., :w], g_cat[..., w:]
        _dense_back(p, g, "snr", c["snr_in"], g_s * (1 - c["s"] ** 2))
        g_h2 = _dense_back(p, g, "fc3", c["h2"], g_h3 * (1 - c["h3"] ** 2))
        g_h1 = _dense_back(p, g, "fc2", c["h1"], g_h2 * (1 - c["h2"] ** 2)) + g_skip
        g_x = _dense_back(p, g, "fc1", c["x"], g_h1 * (1 - c["h1"] ** 2))
        return g, g_x

    def channel_encode(
        self, params: ParamVector, features: np.ndarray, snr_db: float
    ) -> tuple[np.ndarray, StageTrace]:
        """Map features to power-normalized channel symbols.

        The trace's ``zero_energy`` entry flags rows whose pre-normalization
        output was identically zero; those rows are emitted as zeros.
        """
        snr = _check_snr(snr_db)
        x, single = self._batch(features, (self.spec.feature_dim,), "features")
        p = self._group(params, CHANNEL_ENC)
        tokens = x.reshape(x.shape[0], self.spec.num_patches, self.spec.patch_features)
        z, cache = self._channel_stack(p, tokens, snr)
        sym, inv, zero = power_normalize(z.reshape(x.shape[0], -1))
        cache.update(sym=sym, inv=inv, zero_energy=zero)
        trace = StageTrace(CHANNEL_ENC, params, cache)
        return (sym[0] if single else sym), trace

    def channel_decode(
        self, params: ParamVector, symbols_hat: np.ndarray, snr_db: float
    ) -> tuple[np.ndarray, StageTrace]:
        snr = _check_snr(snr_db)
        x, single = self._batch(symbols_hat, (self.spec.symbol_dim,), "symbols")
        p = self._group(params, CHANNEL_DEC)
        tokens = x.reshape(x.shape[0], self.spec.num_patches, self.spec.symbols_per_patch)
        out, cache = self._channel_stack(p, tokens, snr)
        out = out.reshape(x.shape[0], -1)
        return (out[0] if single else out), StageTrace(CHANNEL_DEC, params, cache)

    def semantic_decode(
        self, params: ParamVector, features_hat: np.ndarray
    ) -> tuple[np.ndarray, StageTrace]:
        x, single = self._batch(features_hat, (self.spec.feature_dim,), "features")
        p = self._group(params, SEMANTIC_DEC)
        f = x.reshape(x.shape[0], self.spec.num_patches, self.spec.patch_features)
        a1 = np.tanh(_dense(p, "fc1", f))
        z = _dense(p, "fc2", a1) + OUTPUT_OFFSET
        out = np.clip(z, 0.0, 1.0)
        img = _unpatchify(out, tuple(self.spec.image_shape), self.spec.patch_size)
        trace = StageTrace(SEMANTIC_DEC, params, {"f": f, "a1": a1, "z": z})
        return (img[0] if single else img), trace

    # -- full pipeline --------------------------------------------------------

    def forward(
        self,
        params: ParamVector,
        images: np.ndarray,
        snr_db: float,
        channel_fn: ChannelFn | None = None,
    ) -> tuple[np.ndarray, PipelineTrace]:
        """Run the whole pipeline on a batch.

        ``channel_fn`` maps complex symbols to ``(x_hat, gain, deep_fades)``
        where ``gain`` is the complex factor relating ``x_hat`` to the
        transmitted symbols (1 unless a deep fade was clamped).  ``None`` means
        a noiseless identity channel.
        """
        images, single = self._batch(images, tuple(self.spec.image_shape), "image")
        trace = PipelineTrace()
        feats, trace.semantic_enc = self.semantic_encode(params, images)
        sym, trace.channel_enc = self.channel_encode(params, feats, snr_db)
        trace.zero_energy = int(np.count_nonzero(trace.channel_enc.cache["zero_energy"]))
        if channel_fn is None:
            sym_hat = sym
            trace.channel_gain = np.ones(sym.shape[:-1] + (sym.shape[-1] // 2,), dtype=np.complex128)
        else:
            x_hat, gain, trace.deep_fades = channel_fn(ch.to_complex(sym))
            sym_hat = ch.from_complex(x_hat)
            trace.channel_gain = gain
        feats_hat, trace.channel_dec = self.channel_decode(params, sym_hat, snr_db)
        img_hat, trace.semantic_dec = self.semantic_decode(params, feats_hat)
        return (img_hat[0] if single else img_hat), trace

    def backward(self, trace: PipelineTrace, image: np.ndarray, image_hat: np.ndarray) -> ParamVector:
        """Gradient of ``mse_loss(image, image_hat)`` w.r.t. every parameter."""
        stages = [trace.semantic_enc, trace.channel_enc, trace.channel_dec, trace.semantic_dec]
        if any(s is None for s in stages) or trace.channel_gain is None:
            raise UsageError("backward needs the trace of one complete forward pass")
        params = stages[0].params
        if any(s.params is not params for s in stages):
            raise UsageError("trace stages come from different parameter vectors")
        image = np.asarray(image, dtype=np.float64)
        image_hat = np.asarray(image_hat, dtype=np.float64)
        if image.shape != image_hat.shape:
            raise LayoutError(f"image shapes differ: {image.shape} vs {image_hat.shape}")
        spec = self.spec
        images = image.reshape((-1,) + tuple(spec.image_shape))
        recon = image_hat.reshape(images.shape)
        if trace.semantic_dec.cache["z"].shape[0] != images.shape[0]:
            raise UsageError("trace batch size does not match the images")
        grads: dict[str, np.ndarray] = {}

        # semantic decoder
        g_img = 2.0 * (recon - images) / images.size
        g_out = _patchify(g_img, spec.patch_size)
        c = trace.semantic_dec.cache
        g_out = g_out * ((c["z"] > 0.0) & (c["z"] < 1.0))
        p = self._group(params, SEMANTIC_DEC)
        g = {k: np.zeros_like(v) for k, v in p.items()}
        g_a1 = _dense_back(p, g, "fc2", c["a1"], g_out)
        g_f = _dense_back(p, g, "fc1", c["f"], g_a1 * (1 - c["a1"] ** 2))
        grads[SEMANTIC_DEC] = self._flatten(SEMANTIC_DEC, g)
        g_feat_hat = g_f.reshape(images.shape[0], -1)

        # channel decoder
        p = self._group(params, CHANNEL_DEC)
        g_tokens = g_feat_hat.reshape(images.shape[0], spec.num_patches, spec.patch_features)
        g, g_sym_hat = self._channel_stack_back(p, trace.channel_dec.cache, g_tokens)
        g_sym_hat = g_sym_hat.reshape(images.shape[0], -1)
        grads[CHANNEL_DEC] = self._flatten(CHANNEL_DEC, g)

        # channel: x_hat = gain * x + noise, so dL/dx = conj(gain) * dL/dx_hat
        g_sym = ch.from_complex(np.conj(trace.channel_gain) * ch.to_complex(g_sym_hat))

        # channel encoder
        c = trace.channel_enc.cache
        g_z = _power_normalize_back(c["sym"], c["inv"], g_sym)
        p = self._group(params, CHANNEL_ENC)
        g, g_feat = self._channel_stack_back(p, c, g_z.reshape(images.shape[0], spec.num_patches, -1))
        grads[CHANNEL_ENC] = self._flatten(CHANNEL_ENC, g)

        # semantic encoder
        c = trace.semantic_enc.cache
        p = self._group(params, SEMANTIC_ENC)
        g = {k: np.zeros_like(v) for k, v in p.items()}
        g_a1 = _dense_back(p, g, "fc2", c["a1"], g_feat.reshape(c["a1"].shape[:-1] + (-1,)))
        _dense_back(p, g, "fc1", c["patches"], g_a1 * (1 - c["a1"] ** 2))
        grads[SEMANTIC_ENC] = self._flatten(SEMANTIC_ENC, g)

        return ParamVector(np.concatenate([grads[gid] for gid in GROUPS]), self.layout)

    def _flatten(self, gid: str, g: dict[str, np.ndarray]) -> np.ndarray:
        table = self.tables[gid]
        return np.concatenate([g[name].reshape(-1) for name in table])

    def loss_and_grad(
        self,
        params: ParamVector,
        images: np.ndarray,
        snr_db: float,
        channel_fn: ChannelFn | None = None,
    ) -> tuple[float, ParamVector]:
        img_hat, trace = self.forward(params, images, snr_db, channel_fn)
        loss = mse_loss(images, img_hat)
        return loss, self.backward(trace, images, img_hat)


def make_channel_fn(
    cfg: ch.ChannelConfig, rng: np.random.Generator, h_min: float = ch.DEEP_FADE_FLOOR
) -> ChannelFn:
    """Channel callback that draws a fresh fading/noise realization per call."""

    def run(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
        real = ch.draw(x.shape, cfg, rng)
        return fixed_channel_fn(real, h_min)(x)

    return run


def fixed_channel_fn(real: ch.Realization, h_min: float = ch.DEEP_FADE_FLOOR) -> ChannelFn:
    """Channel callback replaying one stored realization (for gradient checks)."""

    def run(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
        y = ch.apply(x, real)
        x_hat, fades = ch.zf_equalize(y, real.h, h_min)
        h_eff, _ = ch.effective_gain(real.h, h_min)
        return x_hat, real.h / h_eff, fades

    return run


def mse_loss(image: np.ndarray, image_hat: np.ndarray) -> float:
    a = np.asarray(image, dtype=np.float64)
    b = np.asarray(image_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise LayoutError(f"image shapes differ: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean(d * d))


def sgd_step(params: ParamVector, gradient: ParamVector, lr: float) -> ParamVector:
    if params.layout != gradient.layout:
        raise LayoutError("gradient layout does not match parameters")
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    return ParamVector(params.values - lr * gradient.values, params.layout)
