"""Scikit-learn style estimators for the three trainable pipeline stages.

Constructors only store hyperparameters (so ``get_params``/``set_params``
and cloning behave); ``fit`` builds the networks and runs the training
loop. Fitted state lives in trailing-underscore attributes. The stages
compose through :class:`PipelineSampler`, which turns prompts into paired
label and intensity volumes.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from guidegen import autodiff as ad
from guidegen import autoencoder as ae
from guidegen import categorical as cat
from guidegen import gaussian
from guidegen.backbone import UNetConfig, build_unet
from guidegen.conditioning import DEFAULT_PROMPT_CONFIG, PromptConditioner, PromptRecord
from guidegen.config import substream
from guidegen.denoisers import (
    CategoricalUNetDenoiser,
    EpsilonUNetDenoiser,
    semantic_channels,
    split_label_volume,
)
from guidegen.optim import AdamW
from guidegen.phantoms import PhantomCase
from guidegen.schedules import cosine_schedule

__all__ = [
    "SemanticSynthesizer",
    "HdrAutoencoder",
    "LatentGenerator",
    "PipelineSampler",
]

DEFAULT_ORGANS = ("lung", "bone", "liver", "spleen")


def _require_fitted(est, attr):
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")


def _as_cases(data) -> list:
    """Accept PhantomCase lists or tuples shaped like their fields."""
    out = []
    for item in data:
        if isinstance(item, PhantomCase):
            out.append(item)
        else:
            raise TypeError(f"expected PhantomCase entries, got {type(item).__name__}")
    return out


class SemanticSynthesizer(BaseEstimator):
    """Categorical diffusion over label volumes, conditioned on prompts.

    ``fit`` trains the clean-class predictor on (label, prompt) pairs;
    ``sample`` draws label volumes for new prompts.
    """

    def __init__(self, organs=DEFAULT_ORGANS, grid=24, schedule_steps=64,
                 schedule_offset=0.008, channels=(8, 16), blocks_per_level=1,
                 attention_levels=(1, 2), context_dim=16, time_dim=32,
                 n_queries=8, query_dim=16, text_dim=16, n_blocks=2,
                 prompt_config=None, literal_eq4=False,
                 steps=3000, lr=2e-3, beta1=0.9, beta2=0.999,
                 weight_decay=1e-5, batch_size=2, seed=0):
        self.organs = organs
        self.grid = grid
        self.schedule_steps = schedule_steps
        self.schedule_offset = schedule_offset
        self.channels = channels
        self.blocks_per_level = blocks_per_level
        self.attention_levels = attention_levels
        self.context_dim = context_dim
        self.time_dim = time_dim
        self.n_queries = n_queries
        self.query_dim = query_dim
        self.text_dim = text_dim
        self.n_blocks = n_blocks
        self.prompt_config = prompt_config
        self.literal_eq4 = literal_eq4
        self.steps = steps
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.seed = seed

    # -- construction ---------------------------------------------------------

    def build(self) -> "SemanticSynthesizer":
        """Create layout, schedule and an untrained denoiser."""
        self.layout_ = cat.ClassLayout(list(self.organs))
        self.schedule_ = cosine_schedule(int(self.schedule_steps), self.schedule_offset)
        init = substream(self.seed, "tcss-init")
        conditioner = PromptConditioner(
            prompt_config=self.prompt_config or DEFAULT_PROMPT_CONFIG,
            n_queries=self.n_queries, query_dim=self.query_dim,
            text_dim=self.text_dim, n_blocks=self.n_blocks,
            n_layers=len(self.channels), seed=int(init.integers(2**31)), name="cond")
        ucfg = UNetConfig(
            in_channels=self.layout_.n_classes, out_channels=self.layout_.n_classes,
            channels=tuple(self.channels), blocks_per_level=self.blocks_per_level,
            attention_levels=tuple(self.attention_levels), context_dim=self.context_dim,
            response_dim=self.query_dim, time_dim=self.time_dim,
            attn_residual=not self.literal_eq4)
        unet = build_unet(ucfg, seed=int(init.integers(2**31)))
        self.denoiser_ = CategoricalUNetDenoiser(unet, conditioner, self.layout_.n_classes)
        self.loss_history_ = []
        return self

    # -- training ---------------------------------------------------------------

    def fit(self, cases, y=None, on_step=None):
        """Train on PhantomCase data; ``on_step(step, loss)`` fires per step."""
        cases = _as_cases(cases)
        if not cases:
            raise ValueError("need at least one training case")
        self.build()
        opt = AdamW(self.denoiser_.params(), lr=self.lr, beta1=self.beta1,
                    beta2=self.beta2, weight_decay=self.weight_decay)
        rng = substream(self.seed, "tcss")
        pairs = [(c.label.astype(np.int64), c.prompt) for c in cases]
        for step in range(1, int(self.steps) + 1):
            idx = rng.integers(0, len(pairs), size=int(self.batch_size))
            batch = [pairs[i] for i in idx]
            opt.zero_grad()
            with ad.Tape() as tape:
                loss = cat.loss_tcss(batch, self.denoiser_, self.schedule_, rng,
                                     n_classes=self.layout_.n_classes)
            tape.backward(loss)
            opt.step()
            value = float(loss.data)
            self.loss_history_.append(value)
            if on_step is not None:
                on_step(step, value)
        self.denoiser_.invalidate_cache()
        return self

    # -- inference ----------------------------------------------------------------

    def sample(self, prompts, seed=0):
        """Draw one label volume per prompt; returns a list of dicts with
        the organ map, tumor mask, combined label volume, and the raw
        clean-class field."""
        _require_fitted(self, "denoiser_")
        self.denoiser_.invalidate_cache()
        single = isinstance(prompts, PromptRecord)
        records = [prompts] if single else list(prompts)
        out = []
        dims = (int(self.grid),) * 3
        for i, rec in enumerate(records):
            rng = substream(seed, f"tcss-sample-{i}")
            field = cat.sample_tcss(self.denoiser_, rec, self.schedule_, rng,
                                    dims, self.layout_.n_classes)
            m_a, m_t = cat.retrieve_masks(field, self.layout_)
            label = m_a.copy()
            label[m_t > 0] = self.layout_.tumor_id
            out.append({"organ_map": m_a, "tumor_mask": m_t, "label": label,
                        "field": field, "prompt": rec})
        return out[0] if single else out

    # -- persistence ---------------------------------------------------------------

    def save_checkpoint(self, path, meta=None):
        _require_fitted(self, "denoiser_")
        ad.save_checkpoint(path, self.denoiser_.params(),
                           meta={"stage": "tcss", **(meta or {})})

    def load_checkpoint(self, path, expected_hash=None, force=False):
        arrays, meta = ad.load_checkpoint(path)
        if expected_hash and not force and meta.get("config_hash") not in (None, expected_hash):
            raise ValueError(
                f"checkpoint config hash {meta.get('config_hash')} != {expected_hash}")
        if not hasattr(self, "denoiser_"):
            self.build()
        self.denoiser_.load_arrays(arrays)
        return meta


class HdrAutoencoder(BaseEstimator, TransformerMixin):
    """Window-randomized, anatomy-conditioned intensity autoencoder.

    ``transform`` encodes intensity volumes to latents, ``inverse_transform``
    decodes latents back to HU volumes; both take the paired label volumes
    for the mask pyramid.
    """

    def __init__(self, organs=DEFAULT_ORGANS, channels=(12, 16), latent_channels=4,
                 slice_count=4, min_radius_frac=0.05, loss_weights=None,
                 hu_lo=-1500.0, hu_hi=1500.0, perc_seed=1234,
                 non_saturating=False, identity=False,
                 steps=1200, lr=2e-3, disc_lr=1e-3, beta1=0.9, beta2=0.999,
                 weight_decay=1e-5, seed=0):
        self.organs = organs
        self.channels = channels
        self.latent_channels = latent_channels
        self.slice_count = slice_count
        self.min_radius_frac = min_radius_frac
        self.loss_weights = loss_weights
        self.hu_lo = hu_lo
        self.hu_hi = hu_hi
        self.perc_seed = perc_seed
        self.non_saturating = non_saturating
        self.identity = identity
        self.steps = steps
        self.lr = lr
        self.disc_lr = disc_lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.seed = seed

    def build(self) -> "HdrAutoencoder":
        self.layout_ = cat.ClassLayout(list(self.organs))
        weights = self.loss_weights or {"rec": 1.0, "perc": 1.0,
                                        "disc_frame": 1.0, "disc_vol": 1.0}
        cfg = ae.AutoencoderConfig(
            levels=len(self.channels), channels=tuple(self.channels),
            latent_channels=int(self.latent_channels),
            mask_channels=self.layout_.n_classes,
            slice_count=int(self.slice_count),
            min_radius_frac=float(self.min_radius_frac),
            loss_weights=dict(weights), hu_lo=float(self.hu_lo), hu_hi=float(self.hu_hi),
            perc_seed=int(self.perc_seed), non_saturating=bool(self.non_saturating),
            identity=bool(self.identity))
        init = substream(self.seed, "ae-init")
        self.codec_ = ae.HdrCodec(cfg, seed=int(init.integers(2**31)))
        self.loss_history_ = []
        return self

    def _channels_for(self, label) -> np.ndarray:
        m_a, m_t = split_label_volume(label, self.layout_)
        return semantic_channels(m_a, m_t, self.layout_)

    def _normalize(self, intensity) -> np.ndarray:
        return ae.normalize_hu(intensity, self.hu_lo, self.hu_hi)

    def fit(self, cases, y=None, on_step=None):
        cases = _as_cases(cases)
        if not cases:
            raise ValueError("need at least one training case")
        self.build()
        codec = self.codec_
        opt_g = AdamW(codec.params, lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                      weight_decay=self.weight_decay)
        opt_d = AdamW(codec.disc_params, lr=self.disc_lr, beta1=self.beta1,
                      beta2=self.beta2, weight_decay=self.weight_decay)
        rng = substream(self.seed, "ae")
        prepared = [(self._normalize(c.intensity), self._channels_for(c.label))
                    for c in cases]
        weights = codec.config.loss_weights
        for step in range(1, int(self.steps) + 1):
            v_norm, mask_ch = prepared[int(rng.integers(len(prepared)))]
            opt_g.zero_grad()
            with ad.Tape() as tape:
                total, parts, v_hat = ae.loss_total(
                    codec, v_norm, mask_ch, rng, weights=weights,
                    non_saturating=codec.config.non_saturating)
            tape.backward(total)
            opt_g.step()
            # adversary sees the reconstruction as a constant
            fake = v_hat.data
            real = v_norm.reshape((1,) + v_norm.shape)
            opt_d.zero_grad()
            with ad.Tape() as tape_d:
                axials = rng.integers(0, real.shape[1], size=codec.config.slice_count)
                terms = []
                for idx in axials:
                    terms.append(ae.loss_disc(
                        codec.discriminate_frame(fake[:, int(idx)]),
                        codec.discriminate_frame(real[:, int(idx)])))
                frame = terms[0]
                for extra in terms[1:]:
                    frame = ad.add(frame, extra)
                frame = ad.affine(frame, 1.0 / len(terms), 0.0)
                vol = ae.loss_disc(codec.discriminate_volume(fake),
                                   codec.discriminate_volume(real))
                disc_objective = ad.affine(ad.add(frame, vol), -1.0, 0.0)
            tape_d.backward(disc_objective)
            opt_d.step()
            self.loss_history_.append(parts | {"total": float(total.data)})
            if on_step is not None:
                on_step(step, parts)
        return self

    # -- codec access ---------------------------------------------------------------

    def encode_volume(self, intensity, label) -> np.ndarray:
        _require_fitted(self, "codec_")
        v = self._normalize(intensity)
        pyr = ae.mask_pyramid(self._channels_for(label),
                              self.codec_.encoder_resolutions(v.shape))
        return self.codec_.encode(v, pyr).data

    def decode_volume(self, latent, label) -> np.ndarray:
        """Latent + label volume -> intensity volume in HU."""
        _require_fitted(self, "codec_")
        shape = np.asarray(label).shape
        pyr = ae.mask_pyramid(self._channels_for(label),
                              self.codec_.decoder_resolutions(shape))
        v_norm = self.codec_.decode(latent, pyr).data[0]
        return ae.denormalize_hu(v_norm, self.hu_lo, self.hu_hi)

    def transform(self, cases) -> list:
        return [self.encode_volume(c.intensity, c.label) for c in _as_cases(cases)]

    def inverse_transform(self, latents, labels) -> list:
        return [self.decode_volume(z, m) for z, m in zip(latents, labels)]

    def reconstruct(self, case: PhantomCase) -> np.ndarray:
        return self.decode_volume(self.encode_volume(case.intensity, case.label),
                                  case.label)

    def reconstruction_l1(self, cases) -> float:
        """Full-range mean absolute error in normalized units."""
        cases = _as_cases(cases)
        errs = []
        for c in cases:
            recon = self._normalize(self.reconstruct(c))
            errs.append(float(np.mean(np.abs(recon - self._normalize(c.intensity)))))
        return float(np.mean(errs))

    def save_checkpoint(self, path, meta=None):
        _require_fitted(self, "codec_")
        ad.save_checkpoint(path, self.codec_.all_params(),
                           meta={"stage": "ae", **(meta or {})})

    def load_checkpoint(self, path, expected_hash=None, force=False):
        arrays, meta = ad.load_checkpoint(path)
        if expected_hash and not force and meta.get("config_hash") not in (None, expected_hash):
            raise ValueError(
                f"checkpoint config hash {meta.get('config_hash')} != {expected_hash}")
        if not hasattr(self, "codec_"):
            self.build()
        params = self.codec_.all_params()
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        if missing or extra:
            raise ValueError(f"checkpoint mismatch; missing={missing[:3]} extra={extra[:3]}")
        for name, arr in arrays.items():
            params[name].assign(arr)
        return meta


class LatentGenerator(BaseEstimator):
    """Gaussian latent diffusion guided by semantics and prompts.

    Needs a fitted :class:`HdrAutoencoder` to define the latent space; at
    sampling time it turns (organ map, tumor mask, prompt) into a latent
    which the autoencoder decodes.
    """

    def __init__(self, autoencoder=None, schedule_steps=64, schedule_offset=0.008,
                 channels=(16, 32), blocks_per_level=1, attention_levels=(2,),
                 context_dim=16, time_dim=32, n_queries=8, query_dim=16,
                 text_dim=16, n_blocks=2, prompt_config=None, literal_eq4=False,
                 fixed_beta_variance=False, steps=1500, lr=2e-3, beta1=0.9,
                 beta2=0.999, weight_decay=1e-5, batch_size=2, seed=0):
        self.autoencoder = autoencoder
        self.schedule_steps = schedule_steps
        self.schedule_offset = schedule_offset
        self.channels = channels
        self.blocks_per_level = blocks_per_level
        self.attention_levels = attention_levels
        self.context_dim = context_dim
        self.time_dim = time_dim
        self.n_queries = n_queries
        self.query_dim = query_dim
        self.text_dim = text_dim
        self.n_blocks = n_blocks
        self.prompt_config = prompt_config
        self.literal_eq4 = literal_eq4
        self.fixed_beta_variance = fixed_beta_variance
        self.steps = steps
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.seed = seed

    def build(self) -> "LatentGenerator":
        if self.autoencoder is None:
            raise ValueError("LatentGenerator needs a fitted HdrAutoencoder")
        _require_fitted(self.autoencoder, "codec_")
        self.layout_ = self.autoencoder.layout_
        self.schedule_ = cosine_schedule(int(self.schedule_steps), self.schedule_offset)
        self.latent_channels_ = int(self.autoencoder.codec_.config.latent_channels)
        mask_ch = self.layout_.n_classes
        init = substream(self.seed, "lfg-init")
        conditioner = PromptConditioner(
            prompt_config=self.prompt_config or DEFAULT_PROMPT_CONFIG,
            n_queries=self.n_queries, query_dim=self.query_dim,
            text_dim=self.text_dim, n_blocks=self.n_blocks,
            n_layers=len(self.channels), seed=int(init.integers(2**31)), name="cond")
        ucfg = UNetConfig(
            in_channels=self.latent_channels_ + mask_ch,
            out_channels=self.latent_channels_,
            channels=tuple(self.channels), blocks_per_level=self.blocks_per_level,
            attention_levels=tuple(self.attention_levels), context_dim=self.context_dim,
            response_dim=self.query_dim, time_dim=self.time_dim,
            attn_residual=not self.literal_eq4)
        unet = build_unet(ucfg, seed=int(init.integers(2**31)))
        self.denoiser_ = EpsilonUNetDenoiser(unet, conditioner)
        self.loss_history_ = []
        return self

    def _latent_semantics(self, m_a, m_t, latent_shape) -> np.ndarray:
        channels = semantic_channels(m_a, m_t, self.layout_)
        t = ad.resample3d(ad.Tensor(channels), tuple(latent_shape), mode="nearest")
        return t.data

    def fit(self, cases, y=None, on_step=None):
        cases = _as_cases(cases)
        if not cases:
            raise ValueError("need at least one training case")
        self.build()
        opt = AdamW(self.denoiser_.params(), lr=self.lr, beta1=self.beta1,
                    beta2=self.beta2, weight_decay=self.weight_decay)
        rng = substream(self.seed, "lfg")
        prepared = []
        for c in cases:
            z0 = self.autoencoder.encode_volume(c.intensity, c.label)
            m_a, m_t = split_label_volume(c.label, self.layout_)
            sem = self._latent_semantics(m_a, m_t, z0.shape[1:])
            prepared.append((z0, sem, c.prompt))
        for step in range(1, int(self.steps) + 1):
            idx = rng.integers(0, len(prepared), size=int(self.batch_size))
            batch = [prepared[i] for i in idx]
            opt.zero_grad()
            with ad.Tape() as tape:
                loss = gaussian.loss_lfg(batch, self.denoiser_, self.schedule_, rng)
            tape.backward(loss)
            opt.step()
            value = float(loss.data)
            self.loss_history_.append(value)
            if on_step is not None:
                on_step(step, value)
        self.denoiser_.invalidate_cache()
        return self

    def sample_latent(self, m_a, m_t, prompt, seed=0, trace_hook=None) -> np.ndarray:
        _require_fitted(self, "denoiser_")
        self.denoiser_.invalidate_cache()
        grid = np.asarray(m_a).shape
        factor = 2 ** len(self.autoencoder.codec_.config.channels)
        latent_spatial = tuple(s // factor for s in grid)
        sem = self._latent_semantics(m_a, m_t, latent_spatial)
        rng = substream(seed, "lfg-sample")
        dims = (self.latent_channels_,) + latent_spatial
        return gaussian.sample_lfg(self.denoiser_, sem, prompt, self.schedule_, rng,
                                   dims, fixed_beta_variance=self.fixed_beta_variance,
                                   trace_hook=trace_hook)

    def save_checkpoint(self, path, meta=None):
        _require_fitted(self, "denoiser_")
        ad.save_checkpoint(path, self.denoiser_.params(),
                           meta={"stage": "lfg", **(meta or {})})

    def load_checkpoint(self, path, expected_hash=None, force=False):
        arrays, meta = ad.load_checkpoint(path)
        if expected_hash and not force and meta.get("config_hash") not in (None, expected_hash):
            raise ValueError(
                f"checkpoint config hash {meta.get('config_hash')} != {expected_hash}")
        if not hasattr(self, "denoiser_"):
            self.build()
        self.denoiser_.load_arrays(arrays)
        return meta


def synthesizer_from_config(cfg: dict) -> SemanticSynthesizer:
    cond, tr = cfg["conditioning"], cfg["training"]
    unet = cfg["tcss_unet"]
    return SemanticSynthesizer(
        organs=tuple(cfg["classes"]["organs"]),
        grid=int(cfg["phantom"]["grid"]),
        schedule_steps=int(cfg["schedule_tcss"]["T"]),
        schedule_offset=float(cfg["schedule_tcss"].get("offset", 0.008)),
        channels=tuple(unet["channels"]),
        blocks_per_level=int(unet.get("blocks_per_level", 2)),
        attention_levels=tuple(unet.get("attention_levels", ())),
        context_dim=int(unet.get("context_dim", 16)),
        time_dim=int(unet.get("time_dim", 32)),
        n_queries=int(cond["n_queries"]), query_dim=int(cond["query_dim"]),
        text_dim=int(cond["text_dim"]), n_blocks=int(cond.get("n_blocks", 2)),
        prompt_config=cfg["prompt"], literal_eq4=bool(cond.get("literal_eq4", False)),
        steps=int(tr.get("tcss_steps", 1000)), lr=float(tr["lr"]),
        beta1=float(tr.get("beta1", 0.99)), beta2=float(tr.get("beta2", 0.999)),
        weight_decay=float(tr.get("weight_decay", 1e-5)),
        batch_size=int(tr.get("batch_size", 1)), seed=int(cfg.get("seed", 0)))


def autoencoder_from_config(cfg: dict) -> HdrAutoencoder:
    a, tr = cfg["autoencoder"], cfg["training"]
    norm = a.get("normalization", {})
    return HdrAutoencoder(
        organs=tuple(cfg["classes"]["organs"]),
        channels=tuple(a["channels"]), latent_channels=int(a["latent_channels"]),
        slice_count=int(a.get("slice_count", 4)),
        min_radius_frac=float(a.get("min_radius_frac", 0.05)),
        loss_weights=dict(a.get("loss_weights", {})) or None,
        hu_lo=float(norm.get("lo", -1500.0)), hu_hi=float(norm.get("hi", 1500.0)),
        perc_seed=int(a.get("perc_seed", 1234)),
        non_saturating=bool(a.get("non_saturating", False)),
        identity=bool(a.get("identity", False)),
        steps=int(tr.get("ae_steps", 1000)), lr=float(tr["lr"]),
        disc_lr=float(tr.get("disc_lr", tr["lr"])),
        beta1=float(tr.get("beta1", 0.99)), beta2=float(tr.get("beta2", 0.999)),
        weight_decay=float(tr.get("weight_decay", 1e-5)), seed=int(cfg.get("seed", 0)))


def generator_from_config(cfg: dict, autoencoder: HdrAutoencoder) -> LatentGenerator:
    cond, tr = cfg["conditioning"], cfg["training"]
    unet = cfg["lfg_unet"]
    return LatentGenerator(
        autoencoder=autoencoder,
        schedule_steps=int(cfg["schedule_lfg"]["T"]),
        schedule_offset=float(cfg["schedule_lfg"].get("offset", 0.008)),
        channels=tuple(unet["channels"]),
        blocks_per_level=int(unet.get("blocks_per_level", 2)),
        attention_levels=tuple(unet.get("attention_levels", ())),
        context_dim=int(unet.get("context_dim", 16)),
        time_dim=int(unet.get("time_dim", 32)),
        n_queries=int(cond["n_queries"]), query_dim=int(cond["query_dim"]),
        text_dim=int(cond["text_dim"]), n_blocks=int(cond.get("n_blocks", 2)),
        prompt_config=cfg["prompt"], literal_eq4=bool(cond.get("literal_eq4", False)),
        fixed_beta_variance=bool(cfg["schedule_lfg"].get("fixed_beta_variance", False)),
        steps=int(tr.get("lfg_steps", 1000)), lr=float(tr["lr"]),
        beta1=float(tr.get("beta1", 0.99)), beta2=float(tr.get("beta2", 0.999)),
        weight_decay=float(tr.get("weight_decay", 1e-5)),
        batch_size=int(tr.get("batch_size", 1)), seed=int(cfg.get("seed", 0)))


class PipelineSampler:
    """Compose the three fitted stages: prompt -> (label volume, HU volume)."""

    def __init__(self, synthesizer: SemanticSynthesizer, autoencoder: HdrAutoencoder,
                 generator: LatentGenerator):
        _require_fitted(synthesizer, "denoiser_")
        _require_fitted(autoencoder, "codec_")
        _require_fitted(generator, "denoiser_")
        self.synthesizer = synthesizer
        self.autoencoder = autoencoder
        self.generator = generator

    def sample(self, prompt: PromptRecord, seed=0, trace_hook=None) -> dict:
        masks = self.synthesizer.sample(prompt, seed=seed)
        z0_hat = self.generator.sample_latent(masks["organ_map"], masks["tumor_mask"],
                                              prompt, seed=seed, trace_hook=trace_hook)
        label_for_decode = masks["label"]
        hu = self.autoencoder.decode_volume(z0_hat, label_for_decode)
        return {
            "label": masks["label"],
            "organ_map": masks["organ_map"],
            "tumor_mask": masks["tumor_mask"],
            "intensity": hu.astype(np.float32),
            "latent": z0_hat,
            "prompt": prompt,
            "seed": seed,
        }
