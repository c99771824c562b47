"""Anatomy-conditioned HDR autoencoder for intensity volumes.

The codec works in normalized units (a fixed linear map takes the declared
HU range onto [-1, 1]); semantic masks are resampled to every level's
resolution and concatenated channel-wise on both the encoder and decoder
paths. Reconstruction is penalized under randomly sampled intensity
windows so every HU sub-range stays represented, with a frame (2D slice)
and a volume (3D) discriminator plus a frozen random-feature perceptual
surrogate completing the composite loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from guidegen import autodiff as ad
from guidegen import layers as nn
from guidegen.validation import check_same_shape

__all__ = [
    "WindowParams",
    "AutoencoderConfig",
    "HdrCodec",
    "window_transform",
    "sample_window",
    "loss_rec",
    "loss_disc",
    "loss_perc",
    "normalize_hu",
    "denormalize_hu",
    "mask_pyramid",
    "DISC_PROB_FLOOR",
]

DISC_PROB_FLOOR = 1e-7


@dataclass(frozen=True)
class WindowParams:
    """Clinical intensity window: values get truncated to
    [center - radius, center + radius]."""

    center: float
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError(f"window radius must be positive, got {self.radius}")


def window_transform(x, w: WindowParams, k, b):
    """h(x) = k * clamp((x - w_c + w_r) / (2 w_r), 0, 1) + b.

    Differentiable in x, k and b; the clamp zeroes gradients outside the
    window. k and b may be Tensors (the codec's learnable rescale) or
    plain floats.
    """
    if w.radius <= 0:
        raise ValueError("window radius must be positive")
    x = ad.as_tensor(x)
    core = ad.clamp(ad.affine(x, 1.0 / (2.0 * w.radius), (w.radius - w.center) / (2.0 * w.radius)),
                    lo=0.0, hi=1.0)
    if isinstance(k, ad.Tensor) or isinstance(b, ad.Tensor):
        scaled = ad.mul(core, k if isinstance(k, ad.Tensor) else ad.Tensor(float(k)))
        return ad.add(scaled, b if isinstance(b, ad.Tensor) else ad.Tensor(float(b)))
    return ad.affine(core, float(k), float(b))


def sample_window(volume: np.ndarray, rng: np.random.Generator,
                  min_radius_frac: float = 0.05) -> WindowParams:
    """Uniform window over the volume's own intensity range; the radius is
    floored at a fraction of the dynamic range to keep 1/(2 w_r) bounded."""
    lo, hi = float(np.min(volume)), float(np.max(volume))
    if hi <= lo:
        raise ValueError("degenerate volume: constant intensity")
    half = (hi - lo) / 2.0
    center = rng.uniform(lo, hi)
    radius = rng.uniform(min_radius_frac * half, half)
    return WindowParams(center=center, radius=radius)


def normalize_hu(v, lo=-1500.0, hi=1500.0):
    """Linear map taking [lo, hi] onto [-1, 1]."""
    v = np.asarray(v, dtype=np.float64)
    return (v - lo) / (hi - lo) * 2.0 - 1.0


def denormalize_hu(v, lo=-1500.0, hi=1500.0):
    v = np.asarray(v, dtype=np.float64)
    return (v + 1.0) / 2.0 * (hi - lo) + lo


def loss_rec(v_hat, v, w: WindowParams, k, b):
    """Mean absolute difference of the windowed volumes (shared window)."""
    v_hat = ad.as_tensor(v_hat)
    v = ad.as_tensor(v)
    check_same_shape(v_hat.data, v.data)
    return ad.mean_(ad.abs_(ad.sub(window_transform(v_hat, w, k, b),
                                   window_transform(v, w, k, b))))


def loss_disc(d_fake, d_real):
    """log D(real) + log(1 - D(fake)) with a probability floor; the
    discriminator ascends this value, the generator descends its fake term."""
    d_fake = ad.as_tensor(d_fake)
    d_real = ad.as_tensor(d_real)
    real_term = ad.mean_(ad.log(ad.clamp(d_real, lo=DISC_PROB_FLOOR, hi=1.0)))
    fake_term = ad.mean_(ad.log(ad.clamp(ad.affine(d_fake, -1.0, 1.0),
                                         lo=DISC_PROB_FLOOR, hi=1.0)))
    return ad.add(real_term, fake_term)


@dataclass(frozen=True)
class AutoencoderConfig:
    levels: int = 2
    channels: tuple = (16, 24)
    latent_channels: int = 4
    mask_channels: int = 6  # organ∪background one-hot + tumor channel
    slice_count: int = 4
    min_radius_frac: float = 0.05
    loss_weights: dict = field(default_factory=lambda: {
        "rec": 1.0, "perc": 1.0, "disc_frame": 1.0, "disc_vol": 1.0})
    hu_lo: float = -1500.0
    hu_hi: float = 1500.0
    perc_seed: int = 1234
    non_saturating: bool = False
    identity: bool = False  # 1x1x1 self-test codec, no masks, no compression

    def __post_init__(self):
        if not self.identity and len(self.channels) != self.levels:
            raise ValueError("channels must list one width per level")

    def to_config(self) -> dict:
        return {
            "levels": self.levels,
            "channels": list(self.channels),
            "latent_channels": self.latent_channels,
            "mask_channels": self.mask_channels,
            "slice_count": self.slice_count,
            "min_radius_frac": self.min_radius_frac,
            "loss_weights": dict(self.loss_weights),
            "normalization": {"lo": self.hu_lo, "hi": self.hu_hi},
            "perc_seed": self.perc_seed,
            "non_saturating": self.non_saturating,
            "identity": self.identity,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "AutoencoderConfig":
        norm = cfg.get("normalization", {})
        return cls(
            levels=int(cfg.get("levels", 2)),
            channels=tuple(cfg.get("channels", (16, 24))),
            latent_channels=int(cfg.get("latent_channels", 4)),
            mask_channels=int(cfg.get("mask_channels", 6)),
            slice_count=int(cfg.get("slice_count", 4)),
            min_radius_frac=float(cfg.get("min_radius_frac", 0.05)),
            loss_weights=dict(cfg.get("loss_weights", {"rec": 1.0, "perc": 1.0,
                                                       "disc_frame": 1.0, "disc_vol": 1.0})),
            hu_lo=float(norm.get("lo", -1500.0)),
            hu_hi=float(norm.get("hi", 1500.0)),
            perc_seed=int(cfg.get("perc_seed", 1234)),
            non_saturating=bool(cfg.get("non_saturating", False)),
            identity=bool(cfg.get("identity", False)),
        )


def mask_pyramid(mask_channels: np.ndarray, resolutions) -> list:
    """Nearest-resample the condition channels to each requested resolution."""
    out = []
    for res in resolutions:
        if tuple(mask_channels.shape[1:]) == tuple(res):
            out.append(mask_channels.copy())
        else:
            t = ad.resample3d(ad.Tensor(mask_channels), tuple(res), mode="nearest")
            out.append(t.data)
    return out


class HdrCodec:
    """Encoder/decoder pair with discriminators and the frozen perceptual
    feature stack. The autoencoding parameters live in ``params``; the two
    discriminators have their own dicts so adversarial updates alternate."""

    def __init__(self, config: AutoencoderConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, ad.Parameter] = {}
        self.disc_params: dict[str, ad.Parameter] = {}
        rng = np.random.default_rng(seed)
        p = self.params
        if config.identity:
            nn.add_conv(p, "enc0", 1, 1, 1, rng)
            nn.add_conv(p, "dec0", 1, 1, 1, rng)
            p["enc0.w"].assign(np.ones((1, 1, 1, 1, 1)))
            p["dec0.w"].assign(np.ones((1, 1, 1, 1, 1)))
        else:
            ch = config.channels
            m = config.mask_channels
            c_prev = 1
            for i, c in enumerate(ch):
                nn.add_conv(p, f"enc{i}.mix", c_prev + m, c, 3, rng)
                nn.add_conv(p, f"enc{i}.down", c, c, 3, rng)
                c_prev = c
            nn.add_conv(p, "enc.out", ch[-1], config.latent_channels, 3, rng)
            c_prev = config.latent_channels
            for i in reversed(range(len(ch))):
                nn.add_conv(p, f"dec{i}.mix", c_prev + m, ch[i], 3, rng)
                nn.add_conv(p, f"dec{i}.up", ch[i], ch[i], 3, rng)
                c_prev = ch[i]
            nn.add_conv(p, "dec.out", ch[0], 1, 3, rng)
        nn.add_param(p, "rescale.k", np.ones(()))
        nn.add_param(p, "rescale.b", np.zeros(()))
        d = self.disc_params
        for i, (c_in, c_out) in enumerate(((1, 8), (8, 16), (16, 32))):
            nn.add_conv(d, f"frame.c{i}", c_in, c_out, 3, rng, nd=2)
            nn.add_conv(d, f"vol.c{i}", c_in, c_out, 3, rng, nd=3)
        nn.add_linear(d, "frame.head", 32, 1, rng)
        nn.add_linear(d, "vol.head", 32, 1, rng)
        # frozen perceptual stack: constants, never Parameters
        prng = np.random.default_rng(config.perc_seed)
        self.perc_weights = []
        for c_in, c_out in ((1, 8), (8, 16), (16, 32)):
            w = math.sqrt(2.0 / (c_in * 9)) * prng.standard_normal((c_out, c_in, 3, 3))
            self.perc_weights.append((ad.Tensor(w), ad.Tensor(np.zeros(c_out))))

    @property
    def k(self) -> ad.Tensor:
        return self.params["rescale.k"].value

    @property
    def b(self) -> ad.Tensor:
        return self.params["rescale.b"].value

    # --- codec ---------------------------------------------------------------

    def encoder_resolutions(self, shape) -> list:
        if self.config.identity:
            return []
        return [tuple(s // 2**i for s in shape) for i in range(self.config.levels)]

    def decoder_resolutions(self, shape) -> list:
        if self.config.identity:
            return []
        lv = self.config.levels
        return [tuple(s // 2**i for s in shape) for i in range(lv, 0, -1)]

    def encode(self, v_norm, pyramid) -> ad.Tensor:
        """Normalized volume [-1, 1] -> latent at 2^levels x compression."""
        x = ad.as_tensor(v_norm)
        if x.data.ndim == 3:
            x = ad.reshape(x, (1,) + tuple(x.shape))
        p, cfg = self.params, self.config
        if cfg.identity:
            return nn.conv(p, "enc0", x)
        if len(pyramid) != cfg.levels:
            raise ValueError(f"mask pyramid has {len(pyramid)} entries, need {cfg.levels}")
        for i in range(cfg.levels):
            x = ad.concat([x, ad.as_tensor(pyramid[i])], axis=0)
            x = ad.silu(nn.conv(p, f"enc{i}.mix", x))
            x = ad.silu(nn.conv(p, f"enc{i}.down", x, stride=2))
        return nn.conv(p, "enc.out", x)

    def decode(self, z, pyramid) -> ad.Tensor:
        """Latent -> normalized volume [1, H, W, D]."""
        x = ad.as_tensor(z)
        p, cfg = self.params, self.config
        if cfg.identity:
            return nn.conv(p, "dec0", x)
        if len(pyramid) != cfg.levels:
            raise ValueError(f"mask pyramid has {len(pyramid)} entries, need {cfg.levels}")
        for j, i in enumerate(reversed(range(cfg.levels))):
            x = ad.concat([x, ad.as_tensor(pyramid[j])], axis=0)
            x = ad.silu(nn.conv(p, f"dec{i}.mix", x))
            x = ad.resample3d(x, tuple(2 * s for s in x.shape[1:]), mode="trilinear")
            x = ad.silu(nn.conv(p, f"dec{i}.up", x))
        return nn.conv(p, "dec.out", x)

    # --- discriminators --------------------------------------------------------

    def _disc_stack(self, prefix, x, nd) -> ad.Tensor:
        d = self.disc_params
        h = x
        for i in range(3):
            h = ad.silu(nn.conv(d, f"{prefix}.c{i}", h, stride=2, nd=nd))
        pooled = ad.mean_(ad.reshape(h, (h.shape[0], int(np.prod(h.shape[1:])))), axis=1)
        logit = nn.linear(d, f"{prefix}.head", ad.reshape(pooled, (1, h.shape[0])))
        return ad.sigmoid(ad.reshape(logit, ()))

    def discriminate_frame(self, axial_slice) -> ad.Tensor:
        """2D discriminator on one axial slice [1, H, W] -> probability."""
        x = ad.as_tensor(axial_slice)
        if x.data.ndim == 2:
            x = ad.reshape(x, (1,) + tuple(x.shape))
        return self._disc_stack("frame", x, nd=2)

    def discriminate_volume(self, volume) -> ad.Tensor:
        """3D discriminator on the whole volume [1, H, W, D] -> probability."""
        x = ad.as_tensor(volume)
        if x.data.ndim == 3:
            x = ad.reshape(x, (1,) + tuple(x.shape))
        return self._disc_stack("vol", x, nd=3)

    # --- perceptual surrogate ---------------------------------------------------

    def perceptual_features(self, windowed_slice) -> list:
        """Frozen 3-stage random conv features of one windowed slice."""
        x = ad.as_tensor(windowed_slice)
        if x.data.ndim == 2:
            x = ad.reshape(x, (1,) + tuple(x.shape))
        feats = []
        for w, bias in self.perc_weights:
            x = ad.silu(ad.conv2d(x, w, bias, stride=2))
            feats.append(x)
        return feats

    def all_params(self) -> dict:
        merged = dict(self.params)
        merged.update(self.disc_params)
        return merged


def _mean_terms(terms):
    total = terms[0]
    for extra in terms[1:]:
        total = ad.add(total, extra)
    return ad.affine(total, 1.0 / len(terms), 0.0)


def loss_total(codec: HdrCodec, v_norm: np.ndarray, mask_channels, rng: np.random.Generator,
               weights: dict | None = None, non_saturating: bool = False):
    """Composite reconstruction objective: windowed L1 + perceptual surrogate
    + frame discriminator on randomly drawn axial slices + volume
    discriminator, each with a configurable weight. Discriminator terms see
    raw (unwindowed) volumes.

    Returns (total, parts, v_hat). ``parts`` reports the literal term
    values; with ``non_saturating`` the adversarial share of ``total``
    swaps log(1-D(fake)) for -log D(fake).
    """
    cfg = codec.config
    weights = dict(weights or cfg.loss_weights)
    w = sample_window(v_norm, rng, cfg.min_radius_frac)
    if cfg.identity:
        enc_pyr = dec_pyr = []
    else:
        enc_pyr = mask_pyramid(mask_channels, codec.encoder_resolutions(v_norm.shape))
        dec_pyr = mask_pyramid(mask_channels, codec.decoder_resolutions(v_norm.shape))
    v_ref = ad.Tensor(np.asarray(v_norm, dtype=np.float64).reshape((1,) + np.shape(v_norm)))
    v_hat = codec.decode(codec.encode(v_norm, enc_pyr), dec_pyr)
    rec = loss_rec(v_hat, v_ref, w, codec.k, codec.b)
    perc = loss_perc(codec, v_hat, v_ref, w, codec.k, codec.b)

    def fake_term(d_fake):
        if non_saturating:
            return ad.affine(ad.log(ad.clamp(d_fake, lo=DISC_PROB_FLOOR, hi=1.0)), -1.0, 0.0)
        return ad.log(ad.clamp(ad.affine(d_fake, -1.0, 1.0), lo=DISC_PROB_FLOOR, hi=1.0))

    n_axial = v_ref.shape[1]
    frame_lit, frame_gen = [], []
    for idx in rng.integers(0, n_axial, size=cfg.slice_count):
        d_fake = codec.discriminate_frame(ad.select(v_hat, axis=1, index=int(idx)))
        d_real = codec.discriminate_frame(ad.select(v_ref, axis=1, index=int(idx)))
        frame_lit.append(loss_disc(d_fake, d_real))
        frame_gen.append(fake_term(d_fake))
    disc_frame = _mean_terms(frame_lit)
    d_fake_vol = codec.discriminate_volume(v_hat)
    d_real_vol = codec.discriminate_volume(v_ref)
    disc_vol = loss_disc(d_fake_vol, d_real_vol)
    adv_frame = _mean_terms(frame_gen) if non_saturating else disc_frame
    adv_vol = fake_term(d_fake_vol) if non_saturating else disc_vol
    total = ad.affine(rec, weights.get("rec", 1.0), 0.0)
    total = ad.add(total, ad.affine(perc, weights.get("perc", 1.0), 0.0))
    total = ad.add(total, ad.affine(adv_frame, weights.get("disc_frame", 1.0), 0.0))
    total = ad.add(total, ad.affine(adv_vol, weights.get("disc_vol", 1.0), 0.0))
    parts = {
        "rec": float(rec.data),
        "perc": float(perc.data),
        "disc_frame": float(disc_frame.data),
        "disc_vol": float(disc_vol.data),
        "window_center": w.center,
        "window_radius": w.radius,
    }
    return total, parts, v_hat


def loss_perc(codec: HdrCodec, v_hat, v, w: WindowParams, k, b) -> ad.Tensor:
    """Mean squared feature distance, averaged over stages and axial slices."""
    v_hat = ad.as_tensor(v_hat)
    v = ad.as_tensor(v)
    check_same_shape(v_hat.data, v.data)
    h_hat = window_transform(v_hat, w, k, b)
    h_ref = window_transform(v, w, k, b)
    axis = 1 if v.data.ndim == 4 else 0
    n_slices = v.shape[axis]
    terms = []
    for idx in range(n_slices):
        sl_hat = ad.select(h_hat, axis=axis, index=idx)
        sl_ref = ad.select(h_ref, axis=axis, index=idx)
        fa = codec.perceptual_features(sl_hat)
        fb = codec.perceptual_features(sl_ref)
        for a_feat, b_feat in zip(fa, fb):
            diff = ad.sub(a_feat, b_feat)
            terms.append(ad.mean_(ad.mul(diff, diff)))
    total = terms[0]
    for extra in terms[1:]:
        total = ad.add(total, extra)
    return ad.affine(total, 1.0 / len(terms), 0.0)
