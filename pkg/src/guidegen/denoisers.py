"""Denoiser realizations: U-Net backbone plus a prompt conditioner.

Both stages share the mechanics; the mask denoiser softmaxes its logits
into a clean-class probability field while the latent denoiser predicts
noise with the semantic channels concatenated onto its input. Outside a
tape the layer responses are cached per prompt, which keeps ancestral
sampling (many steps, frozen weights) cheap.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from guidegen import autodiff as ad
from guidegen.backbone import UNet3D
from guidegen.conditioning import PromptConditioner, PromptRecord
from guidegen.phantoms import _CONNECTIVITY_6, tumor_components

__all__ = [
    "CategoricalUNetDenoiser",
    "EpsilonUNetDenoiser",
    "semantic_channels",
    "split_label_volume",
]


def split_label_volume(label: np.ndarray, layout):
    """Full label volume -> (organ∪background map, tumor mask).

    Tumor voxels take the majority organ on their component's 1-voxel rim,
    mirroring what mask retrieval produces at sampling time.
    """
    label = np.asarray(label).astype(np.int64)
    m_t = (label == layout.tumor_id).astype(np.uint8)
    m_a = label.copy()
    comps, count = tumor_components(m_t)
    for comp in range(1, count + 1):
        mask = comps == comp
        rim = ndimage.binary_dilation(mask, structure=_CONNECTIVITY_6) & ~mask
        vals = label[rim]
        vals = vals[(vals >= 1) & (vals <= len(layout.organs))]
        fill = int(np.argmax(np.bincount(vals))) if vals.size else layout.background_id
        m_a[mask] = fill
    return m_a, m_t


def semantic_channels(m_a: np.ndarray, m_t: np.ndarray, layout) -> np.ndarray:
    """Condition channels from retrieved masks: one-hot organ∪background
    map plus a single tumor channel."""
    ids = layout.organ_ids + [layout.background_id]
    out = np.zeros((len(ids) + 1,) + m_a.shape)
    for ch, cid in enumerate(ids):
        out[ch] = m_a == cid
    out[-1] = m_t > 0
    return out


class _ConditionedUNet:
    def __init__(self, unet: UNet3D, conditioner: PromptConditioner):
        self.unet = unet
        self.conditioner = conditioner
        self._cache_key = None
        self._cache_responses = None

    def responses(self, prompt: PromptRecord):
        if ad._active_tape() is not None:
            return self.conditioner.responses_for(prompt)
        if self._cache_key != prompt:
            self._cache_responses = self.conditioner.responses_for(prompt)
            self._cache_key = prompt
        return self._cache_responses

    def invalidate_cache(self):
        """Call after any parameter update before frozen-weight sampling."""
        self._cache_key = None
        self._cache_responses = None

    def params(self) -> dict:
        merged = dict(self.unet.params)
        merged.update(self.conditioner.params)
        return merged

    def load_arrays(self, arrays: dict):
        params = self.params()
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        if missing or extra:
            raise ValueError(f"checkpoint mismatch; missing={missing[:3]} extra={extra[:3]}")
        for name, arr in arrays.items():
            params[name].assign(arr)
        self._cache_key = None


class CategoricalUNetDenoiser(_ConditionedUNet):
    """Clean-class predictor: probability field in, probability field out."""

    def __init__(self, unet: UNet3D, conditioner: PromptConditioner, n_classes: int):
        super().__init__(unet, conditioner)
        self.n_classes = int(n_classes)

    def __call__(self, x_t_field, t: int, prompt: PromptRecord) -> ad.Tensor:
        logits = self.unet.forward(x_t_field, t, self.responses(prompt))
        return ad.softmax(logits, axis=0)


class EpsilonUNetDenoiser(_ConditionedUNet):
    """Noise predictor on latents with semantic channels concatenated."""

    def __call__(self, z_t, t: int, semantics, prompt: PromptRecord) -> ad.Tensor:
        return self.unet.forward(z_t, t, self.responses(prompt),
                                 extra_channels=semantics)
