"""Categorical diffusion over discrete semantic volumes.

The diffusion state is a per-voxel distribution over N classes. Forward
corruption blends toward the uniform distribution; the reverse model
predicts the clean-label distribution and is mapped back to a one-step
posterior through the per-voxel mixing matrix A whose columns are the
Bayes posteriors for each clean-class hypothesis.

Label volumes use 1-based class values {1..N}; channel c of a probability
field corresponds to class c+1.
"""

from __future__ import annotations

import numpy as np

from guidegen import autodiff as ad
from guidegen.schedules import NoiseSchedule, alpha_bar_of
from guidegen.validation import check_label_volume, check_probability_field

__all__ = [
    "ClassLayout",
    "one_hot",
    "forward_step",
    "forward_marginal",
    "posterior",
    "posterior_stack",
    "mixture",
    "loss_tcss",
    "sample_tcss",
    "retrieve_masks",
    "sample_categorical",
]

PROB_FLOOR = 1e-12  # log floor; documented in the run config


class ClassLayout:
    """Fixed class-index layout: organs first, then tumor, background last."""

    def __init__(self, organs, tumor="tumor", background="background"):
        self.organs = list(organs)
        self.tumor_name = tumor
        self.background_name = background
        self.organ_ids = list(range(1, len(self.organs) + 1))
        self.tumor_id = len(self.organs) + 1
        self.background_id = len(self.organs) + 2

    @property
    def n_classes(self) -> int:
        return len(self.organs) + 2

    def organ_id(self, name: str) -> int:
        return self.organs.index(name) + 1

    def organ_name(self, class_id: int) -> str:
        return self.organs[class_id - 1]

    def to_config(self) -> dict:
        return {
            "organs": list(self.organs),
            "tumor": self.tumor_name,
            "background": self.background_name,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "ClassLayout":
        return cls(cfg["organs"], cfg.get("tumor", "tumor"), cfg.get("background", "background"))


def one_hot(m: np.ndarray, n_classes: int) -> np.ndarray:
    """Labels {1..N} -> probability field with a single 1 per voxel."""
    check_label_volume(m, n_classes)
    out = np.zeros((n_classes,) + m.shape)
    idx = (m - 1).astype(np.int64)
    grid = np.ogrid[tuple(slice(0, s) for s in m.shape)]
    out[(idx,) + tuple(grid)] = 1.0
    return out


def forward_step(x_prev: np.ndarray, beta_t: float) -> np.ndarray:
    """One corruption step: blend the current distribution toward uniform.

    beta may reach 1 exactly (full corruption in one step)."""
    if not 0.0 < beta_t <= 1.0:
        raise ValueError(f"beta must lie in (0, 1], got {beta_t}")
    n = x_prev.shape[0]
    return (1.0 - beta_t) * x_prev + beta_t / n


def forward_marginal(x0: np.ndarray, t: int, schedule: NoiseSchedule, n_classes: int) -> np.ndarray:
    """Closed-form t-step corruption of clean labels."""
    bar = alpha_bar_of(schedule, t)
    return bar * one_hot(x0, n_classes) + (1.0 - bar) / n_classes


def posterior_stack(t: int, schedule: NoiseSchedule, n_classes: int) -> np.ndarray:
    """Mixing matrices for every observed class at step t.

    Returns A_all[k, j, c]: given the observed corrupted class k+1, entry
    [j, c] is the probability that the previous step's class is j+1 under
    the clean-class hypothesis c+1. Each column sums to 1. The t=1 case
    degenerates to delta columns since nothing is corrupted yet.
    """
    n = n_classes
    beta = schedule.beta(t)
    bar_prev = alpha_bar_of(schedule, t - 1)
    eye = np.eye(n)
    # likelihood[k, j] = q(x_t = k | x_{t-1} = j), prior[j, c] = q(x_{t-1} = j | x_0 = c)
    likelihood = (1.0 - beta) * eye + beta / n
    prior = bar_prev * eye + (1.0 - bar_prev) / n
    unnorm = likelihood[:, :, None] * prior[None, :, :]  # [k, j, c]
    return unnorm / unnorm.sum(axis=1, keepdims=True)


def posterior(x_t: np.ndarray, x0_class: int, t: int, schedule: NoiseSchedule,
              n_classes: int) -> np.ndarray:
    """Per-voxel previous-step distribution for one clean-class hypothesis."""
    check_label_volume(x_t, n_classes)
    if not 1 <= x0_class <= n_classes:
        raise ValueError(f"hypothesis class {x0_class} outside 1..{n_classes}")
    stack = posterior_stack(t, schedule, n_classes)  # [k, j, c]
    cols = stack[:, :, x0_class - 1]  # [k, j]
    out = cols[(x_t - 1).astype(np.int64)]  # [*dims, j]
    return np.moveaxis(out, -1, 0)


def _posterior_target(x_t: np.ndarray, x0: np.ndarray, t: int, schedule: NoiseSchedule,
                      n_classes: int) -> np.ndarray:
    """pi_t(x0) per voxel with both the observation and hypothesis varying."""
    stack = posterior_stack(t, schedule, n_classes)
    picked = stack[(x_t - 1).astype(np.int64), :, (x0 - 1).astype(np.int64)]  # [*dims, j]
    return np.moveaxis(picked, -1, 0)


def mixture(f_out: np.ndarray, x_t: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Apply the per-voxel mixing matrix A to a clean-class prediction."""
    check_probability_field(f_out)
    n = f_out.shape[0]
    if f_out.shape[1:] != x_t.shape:
        raise ValueError(f"field spatial dims {f_out.shape[1:]} != labels {x_t.shape}")
    stack = posterior_stack(t, schedule, n)
    mats = stack[(x_t.reshape(-1) - 1).astype(np.int64)]  # [V, j, c]
    flat = f_out.reshape(n, -1)
    out = np.einsum("vjc,cv->jv", mats, flat)
    return out.reshape(f_out.shape)


def sample_categorical(field: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one class label per voxel from a probability field."""
    n = field.shape[0]
    flat = field.reshape(n, -1)
    cdf = np.cumsum(flat, axis=0)
    u = rng.random(flat.shape[1]) * cdf[-1]
    idx = (u[None, :] >= cdf).sum(axis=0)
    return (idx + 1).reshape(field.shape[1:]).astype(np.int64)


def _kl_to_tensor(target: np.ndarray, predicted: "ad.Tensor") -> "ad.Tensor":
    """Mean over voxels of KL(target || predicted); target is constant."""
    n = target.shape[0]
    tgt = target.reshape(n, -1)
    # Entropy side is constant; zero target entries contribute exactly zero.
    ent = np.sum(tgt * np.log(np.maximum(tgt, PROB_FLOOR)), axis=0)  # [V]
    logp = ad.log(ad.clamp(predicted, lo=PROB_FLOOR, hi=None))
    cross = ad.sum_(ad.mul(ad.Tensor(tgt), logp), axis=0)  # [V]
    per_voxel = ad.sub(ad.Tensor(ent), cross)
    return ad.mean_(per_voxel)


def loss_tcss(batch, denoiser, schedule: NoiseSchedule, rng: np.random.Generator,
              n_classes: int | None = None) -> "ad.Tensor":
    """Reparameterized KL training loss, averaged over voxels then batch.

    Each case draws one uniform timestep, corrupts the labels with the
    closed-form marginal, and penalizes KL between the Bayes posterior and
    the mixed model prediction A*f. At t=1 the posterior is a delta at the
    clean label and the term reduces to cross-entropy on f itself.
    """
    if n_classes is None:
        n_classes = getattr(denoiser, "n_classes", None)
    terms = []
    for m, prompt in batch:
        n = int(n_classes) if n_classes else int(m.max())
        t = int(rng.integers(1, schedule.T + 1))
        marg = forward_marginal(m, t, schedule, n)
        x_t = sample_categorical(marg, rng)
        target = _posterior_target(x_t, m, t, schedule, n)
        f = denoiser(one_hot(x_t, n), t, prompt)
        if not isinstance(f, ad.Tensor):
            f = ad.Tensor(f)
        check_probability_field(f.data)
        stack = posterior_stack(t, schedule, n)
        mats = stack[(x_t.reshape(-1) - 1).astype(np.int64)]  # [V, j, c]
        a_full = np.ascontiguousarray(mats.transpose(2, 1, 0))  # [c, j, V]
        f_flat = ad.reshape(f, (n, x_t.size))
        mixed = ad.class_mix(f_flat, a_full)  # [j, V]
        terms.append(_kl_to_tensor(target.reshape(n, -1), mixed))
    total = terms[0]
    for extra in terms[1:]:
        total = ad.add(total, extra)
    return ad.affine(total, 1.0 / len(terms), 0.0)


def sample_tcss(denoiser, prompt, schedule: NoiseSchedule, rng: np.random.Generator,
                dims, n_classes: int) -> np.ndarray:
    """Ancestral sampling: by-probability draws down to t=2, then the raw
    clean-class prediction at t=1 (argmax retrieval happens downstream)."""
    dims = tuple(dims)
    x = rng.integers(1, n_classes + 1, size=dims)
    for t in range(schedule.T, 1, -1):
        f = denoiser(one_hot(x, n_classes), t, prompt)
        f = f.data if isinstance(f, ad.Tensor) else np.asarray(f)
        if not np.all(np.isfinite(f)):
            raise FloatingPointError(f"denoiser output non-finite at t={t}")
        p = mixture(f, x, t, schedule)
        x = sample_categorical(p, rng)
    f = denoiser(one_hot(x, n_classes), 1, prompt)
    f = f.data if isinstance(f, ad.Tensor) else np.asarray(f)
    if not np.all(np.isfinite(f)):
        raise FloatingPointError("denoiser output non-finite at t=1")
    check_probability_field(f)
    return f


def retrieve_masks(x0_field: np.ndarray, layout: ClassLayout):
    """Split a clean-class field into an organ map and a tumor mask.

    The organ map is the argmax over organ and background channels only
    (tumor probabilities discarded); the tumor mask marks voxels whose
    overall argmax is the tumor class. Ties break toward the lowest
    class index.
    """
    check_probability_field(x0_field, normalized=False)
    if x0_field.shape[0] != layout.n_classes:
        raise ValueError(
            f"field has {x0_field.shape[0]} channels, layout expects {layout.n_classes}"
        )
    keep = [cid - 1 for cid in layout.organ_ids] + [layout.background_id - 1]
    restricted = x0_field[keep]
    ids = np.array(keep, dtype=np.int64) + 1
    m_a = ids[np.argmax(restricted, axis=0)]
    m_t = (np.argmax(x0_field, axis=0) == layout.tumor_id - 1).astype(np.uint8)
    return m_a, m_t
