"""Desk-scale evaluation: Dice overlap, prompt alignment, histogram distance."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from guidegen.conditioning import PromptRecord
from guidegen.phantoms import tumor_components
from guidegen.validation import check_same_shape

__all__ = [
    "dice",
    "tumor_alignment",
    "histogram_distance",
    "segment_by_hu",
    "EvalReport",
]


def dice(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    """2|P∩G| / (|P|+|G|); 1.0 when both sets are empty, 0.0 when exactly
    one is."""
    check_same_shape(pred, gt)
    p = pred == class_id
    g = gt == class_id
    np_, ng = int(p.sum()), int(g.sum())
    if np_ == 0 and ng == 0:
        return 1.0
    if np_ == 0 or ng == 0:
        return 0.0
    return 2.0 * int((p & g).sum()) / (np_ + ng)


def tumor_alignment(pred_tumor: np.ndarray, organ_map: np.ndarray,
                    prompt: PromptRecord, layout) -> tuple:
    """(count_ok, location_ok) against the prompt.

    Components use 6-connectivity. Each component is assigned the organ it
    overlaps most in ``organ_map`` (ties toward the lowest class index);
    locations compare as multisets of organ names.
    """
    labeled, count = tumor_components(pred_tumor)
    count_ok = count == prompt.tumor_count
    hosts = []
    for comp in range(1, count + 1):
        vals = organ_map[labeled == comp]
        vals = vals[(vals >= 1) & (vals <= len(layout.organs))]
        if vals.size == 0:
            hosts.append(None)
            continue
        counts = np.bincount(vals.astype(np.int64))
        hosts.append(layout.organ_name(int(np.argmax(counts))))
    location_ok = Counter(hosts) == Counter(prompt.tumor_locations)
    return bool(count_ok), bool(location_ok)


def histogram_distance(a: np.ndarray, b: np.ndarray, bins: int = 64,
                       value_range: tuple = (-1500.0, 1500.0)) -> float:
    """L1 distance between normalized histograms; 0 iff identical, <= 2."""
    lo, hi = value_range
    if hi <= lo:
        raise ValueError("empty histogram range")
    ha, _ = np.histogram(np.asarray(a).ravel(), bins=bins, range=(lo, hi))
    hb, _ = np.histogram(np.asarray(b).ravel(), bins=bins, range=(lo, hi))
    ha = ha / max(1, ha.sum())
    hb = hb / max(1, hb.sum())
    return float(np.abs(ha - hb).sum())


def segment_by_hu(intensity: np.ndarray, hu_table) -> np.ndarray:
    """Nearest-class-HU surrogate segmenter.

    ``hu_table`` is a list of (hu, class_id) candidates; valid only for
    phantoms whose class HU bands are separated.
    """
    hus = np.array([h for h, _ in hu_table])
    ids = np.array([i for _, i in hu_table], dtype=np.int64)
    nearest = np.argmin(np.abs(np.asarray(intensity)[..., None] - hus), axis=-1)
    return ids[nearest]


@dataclass
class EvalReport:
    per_class_dice: dict = field(default_factory=dict)
    tumor_count_accuracy: float = 0.0
    tumor_location_accuracy: float = 0.0
    histogram_distance: float = 0.0
    case_count: int = 0
    config_hash: str = ""

    def __post_init__(self):
        for v in self.per_class_dice.values():
            if not 0.0 <= v <= 1.0:
                raise ValueError("DSC outside [0, 1]")
        for v in (self.tumor_count_accuracy, self.tumor_location_accuracy):
            if not 0.0 <= v <= 1.0:
                raise ValueError("accuracy outside [0, 1]")
        if self.histogram_distance < 0.0:
            raise ValueError("histogram distance must be non-negative")

    def to_json(self) -> dict:
        return {
            "per_class_dice": {str(k): v for k, v in self.per_class_dice.items()},
            "tumor_count_accuracy": self.tumor_count_accuracy,
            "tumor_location_accuracy": self.tumor_location_accuracy,
            "histogram_distance": self.histogram_distance,
            "case_count": self.case_count,
            "config_hash": self.config_hash,
        }
