"""Procedural torso phantoms: paired label/intensity volumes plus prompts.

Organs are ellipsoids painted in a fixed order (later organs win ties), with
tumor-host organs painted last so no later organ can overpaint a host.
Tumors are spheres placed fully inside a host's voxel set; intensities are
per-class base HU plus clipped Gaussian jitter plus a smooth low-frequency
bias field, so class HU bands never overlap and a nearest-HU segmenter can
recover the labels exactly.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from guidegen.conditioning import DEFAULT_PROMPT_CONFIG, PromptRecord, render_prompt

__all__ = [
    "OrganSpec",
    "PhantomSpec",
    "PhantomCase",
    "generate_case",
    "save_case",
    "load_case",
    "write_volume",
    "read_volume",
    "tumor_components",
    "VOLUME_MAGIC",
    "VolumeFormatError",
    "TumorPlacementError",
]

VOLUME_MAGIC = b"GGVOL1\0"
_DTYPE_CODES = {0: np.uint8, 1: np.float32}
_CONNECTIVITY_6 = ndimage.generate_binary_structure(3, 1)


class VolumeFormatError(Exception):
    """Raised on magic/dtype/truncation/checksum problems in volume files."""


class TumorPlacementError(Exception):
    """No admissible tumor position found; the spec is too tight."""


@dataclass(frozen=True)
class OrganSpec:
    name: str
    center: tuple  # fractions of the grid
    radii: tuple  # fractions of the grid
    base_hu: float
    center_jitter: float = 0.02  # fraction of the grid
    radii_jitter: float = 0.06  # relative


@dataclass(frozen=True)
class PhantomSpec:
    grid: int = 24
    organs: tuple = (
        OrganSpec("lung", (0.30, 0.50, 0.65), (0.18, 0.23, 0.19), -920.0),
        OrganSpec("bone", (0.50, 0.50, 0.26), (0.10, 0.10, 0.30), 800.0),
        OrganSpec("liver", (0.68, 0.36, 0.62), (0.22, 0.19, 0.19), -150.0),
        OrganSpec("spleen", (0.66, 0.72, 0.60), (0.18, 0.17, 0.17), 50.0),
    )
    tumor_hosts: tuple = ("liver", "spleen")
    tumor_radius: tuple = (2.0, 2.6)  # voxels
    tumor_hu_offset: float = 400.0
    tumor_count_probs: tuple = (0.25, 0.5, 0.25)  # P(0), P(1), P(2) tumors
    background_hu: float = -1100.0
    noise_std: float = 15.0
    noise_clip_sigmas: float = 3.0  # keeps class HU bands separated
    bias_amplitude: float = 25.0
    hu_range: tuple = (-1500.0, 1500.0)
    prompt_config: dict = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_PROMPT_CONFIG)))

    def __post_init__(self):
        names = [o.name for o in self.organs]
        if len(set(names)) != len(names):
            raise ValueError("duplicate organ names")
        hus = [o.base_hu for o in self.organs]
        if min(hus) > -900.0 or max(hus) < 400.0:
            raise ValueError("organ HU values must span at least [-900, 400]")
        for host in self.tumor_hosts:
            if host not in names:
                raise ValueError(f"tumor host {host!r} is not an organ")
            radii = min(self.organ(host).radii) * self.grid
            if self.tumor_radius[1] >= radii:
                raise ValueError(f"tumor radius {self.tumor_radius[1]} does not fit in {host}")
        if abs(sum(self.tumor_count_probs) - 1.0) > 1e-9:
            raise ValueError("tumor count probabilities must sum to 1")
        if sorted(self.prompt_config["sites"]) != sorted(self.tumor_hosts):
            raise ValueError("prompt sites must match tumor hosts")

    def organ(self, name: str) -> OrganSpec:
        for o in self.organs:
            if o.name == name:
                return o
        raise KeyError(name)

    @property
    def organ_names(self) -> list:
        return [o.name for o in self.organs]

    @property
    def n_classes(self) -> int:
        # organs, then tumor, then background
        return len(self.organs) + 2

    def class_id(self, name: str) -> int:
        if name == "tumor":
            return len(self.organs) + 1
        if name == "background":
            return len(self.organs) + 2
        return self.organ_names.index(name) + 1

    def class_hu_table(self) -> list:
        """(hu, class_id) candidates for the nearest-HU surrogate segmenter."""
        table = [(self.background_hu, self.class_id("background"))]
        for o in self.organs:
            table.append((o.base_hu, self.class_id(o.name)))
        for host in self.tumor_hosts:
            table.append((self.organ(host).base_hu + self.tumor_hu_offset, self.class_id("tumor")))
        return table

    def to_config(self) -> dict:
        out = dataclasses.asdict(self)
        out["organs"] = [dataclasses.asdict(o) for o in self.organs]
        return out

    @classmethod
    def from_config(cls, cfg: dict) -> "PhantomSpec":
        cfg = dict(cfg)
        organs = tuple(
            OrganSpec(
                name=o["name"],
                center=tuple(o["center"]),
                radii=tuple(o["radii"]),
                base_hu=float(o["base_hu"]),
                center_jitter=float(o.get("center_jitter", 0.02)),
                radii_jitter=float(o.get("radii_jitter", 0.06)),
            )
            for o in cfg.pop("organs")
        )
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs = {k: v for k, v in cfg.items() if k in known}
        for key in ("tumor_hosts", "tumor_radius", "tumor_count_probs", "hu_range"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(organs=organs, **kwargs)


@dataclass
class PhantomCase:
    label: np.ndarray  # uint8, values 1..n_classes
    intensity: np.ndarray  # float32 HU
    prompt: PromptRecord
    seed: int
    rendered: str = ""
    pre_tumor_label: np.ndarray | None = None  # organs-only map; not serialized


def _ellipsoid_mask(grid: int, center, radii) -> np.ndarray:
    ax = np.arange(grid) + 0.5
    dx = (ax[:, None, None] - center[0]) / radii[0]
    dy = (ax[None, :, None] - center[1]) / radii[1]
    dz = (ax[None, None, :] - center[2]) / radii[2]
    return dx * dx + dy * dy + dz * dz <= 1.0


def _sphere_offsets(radius: float) -> np.ndarray:
    r = int(np.ceil(radius))
    span = np.arange(-r, r + 1)
    gx, gy, gz = np.meshgrid(span, span, span, indexing="ij")
    inside = gx * gx + gy * gy + gz * gz <= radius * radius
    return np.stack([gx[inside], gy[inside], gz[inside]], axis=1)


def tumor_components(tumor_mask: np.ndarray):
    """Connected components under 6-connectivity; returns (labels, count)."""
    labeled, count = ndimage.label(tumor_mask > 0, structure=_CONNECTIVITY_6)
    return labeled, int(count)


def _draw_prompt(spec: PhantomSpec, rng: np.random.Generator) -> PromptRecord:
    pc = spec.prompt_config
    count = int(rng.choice(len(spec.tumor_count_probs), p=spec.tumor_count_probs))
    if count == 0:
        locations = ()
    elif count == 1:
        locations = (spec.tumor_hosts[int(rng.integers(len(spec.tumor_hosts)))],)
    else:
        order = rng.permutation(len(spec.tumor_hosts))[:count]
        locations = tuple(spec.tumor_hosts[i] for i in sorted(order))
    return PromptRecord(
        age_group=str(rng.choice(pc["age_groups"])),
        gender=str(rng.choice(pc["genders"])),
        race=str(rng.choice(pc["races"])),
        tumor_present=count > 0,
        tumor_count=count,
        tumor_locations=locations,
    )


def _place_tumor(label, host_id, tumor_id, radius, rng, max_tries=500):
    """Paint a tumor sphere fully inside the host's voxel set; returns the
    painted voxel indices."""
    offsets = _sphere_offsets(radius)
    host_voxels = np.argwhere(label == host_id)
    if host_voxels.size == 0:
        raise TumorPlacementError(f"host class {host_id} has no voxels")
    grid = label.shape[0]
    for _ in range(max_tries):
        center = host_voxels[int(rng.integers(len(host_voxels)))]
        pts = center + offsets
        if pts.min() < 0 or pts.max() >= grid:
            continue
        vals = label[pts[:, 0], pts[:, 1], pts[:, 2]]
        if np.all(vals == host_id):
            label[pts[:, 0], pts[:, 1], pts[:, 2]] = tumor_id
            return pts
    raise TumorPlacementError(
        f"no admissible position for radius {radius:.2f} in host {host_id} "
        f"after {max_tries} tries"
    )


def generate_case(spec: PhantomSpec, seed: int) -> PhantomCase:
    """Deterministic in (spec, seed): same inputs, bit-identical outputs."""
    rng = np.random.default_rng(seed)
    grid = spec.grid
    label = np.full((grid, grid, grid), spec.class_id("background"), dtype=np.uint8)

    # hosts painted last so no later organ overpaints a tumor host
    paint_order = [o for o in spec.organs if o.name not in spec.tumor_hosts]
    paint_order += [spec.organ(h) for h in spec.tumor_hosts]
    for organ in paint_order:
        center = [
            (c + rng.uniform(-organ.center_jitter, organ.center_jitter)) * grid
            for c in organ.center
        ]
        radii = [
            r * grid * (1.0 + rng.uniform(-organ.radii_jitter, organ.radii_jitter))
            for r in organ.radii
        ]
        label[_ellipsoid_mask(grid, center, radii)] = spec.class_id(organ.name)

    # per-class base HU; tumors take their host's base plus the offset
    hu = np.full(label.shape, spec.background_hu)
    for organ in spec.organs:
        hu[label == spec.class_id(organ.name)] = organ.base_hu

    prompt = _draw_prompt(spec, rng)
    tumor_id = spec.class_id("tumor")
    pre_tumor = label.copy()
    for host in prompt.tumor_locations:
        radius = rng.uniform(*spec.tumor_radius)
        pts = _place_tumor(label, spec.class_id(host), tumor_id, radius, rng)
        hu[pts[:, 0], pts[:, 1], pts[:, 2]] = spec.organ(host).base_hu + spec.tumor_hu_offset
    _, count = tumor_components(label == tumor_id)
    if count != prompt.tumor_count:
        raise TumorPlacementError("tumor components merged; spec too tight")

    clip = spec.noise_clip_sigmas * spec.noise_std
    jitter = np.clip(rng.standard_normal(label.shape) * spec.noise_std, -clip, clip)
    ax = np.arange(grid) / grid
    phases = rng.uniform(0, 2 * np.pi, size=3)
    freqs = rng.integers(1, 3, size=3)
    bias = spec.bias_amplitude * (
        np.cos(2 * np.pi * freqs[0] * ax + phases[0])[:, None, None]
        * np.cos(2 * np.pi * freqs[1] * ax + phases[1])[None, :, None]
        * np.cos(2 * np.pi * freqs[2] * ax + phases[2])[None, None, :]
    )
    intensity = (hu + jitter + bias).astype(np.float32)
    rendered = render_prompt(prompt, spec.prompt_config)
    return PhantomCase(label=label, intensity=intensity, prompt=prompt, seed=seed,
                       rendered=rendered, pre_tumor_label=pre_tumor)


# --- volume file format ------------------------------------------------------


def write_volume(path, arr: np.ndarray):
    """magic GGVOL1\\0, u32 dtype code (0=u8, 1=f32), u32 rank, u32 extents,
    row-major data, trailing u32 CRC32 of the data section."""
    arr = np.ascontiguousarray(arr)
    if arr.dtype == np.uint8:
        code = 0
    elif arr.dtype == np.float32:
        code = 1
    else:
        raise VolumeFormatError(f"unsupported dtype {arr.dtype}; use uint8 or float32")
    payload = arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<II", code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def read_volume(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(len(VOLUME_MAGIC))
        if magic != VOLUME_MAGIC:
            raise VolumeFormatError(f"bad magic {magic!r}, expected {VOLUME_MAGIC!r}")
        head = fh.read(8)
        if len(head) != 8:
            raise VolumeFormatError("truncated header")
        code, rank = struct.unpack("<II", head)
        if code not in _DTYPE_CODES:
            raise VolumeFormatError(f"unknown dtype code {code}")
        ext_raw = fh.read(4 * rank)
        if len(ext_raw) != 4 * rank:
            raise VolumeFormatError("truncated extents")
        extents = struct.unpack(f"<{rank}I", ext_raw)
        dtype = _DTYPE_CODES[code]
        n = int(np.prod(extents)) * np.dtype(dtype).itemsize
        payload = fh.read(n)
        if len(payload) != n:
            raise VolumeFormatError("truncated data section")
        crc_raw = fh.read(4)
        if len(crc_raw) != 4:
            raise VolumeFormatError("missing checksum")
        (crc,) = struct.unpack("<I", crc_raw)
        if crc != (zlib.crc32(payload) & 0xFFFFFFFF):
            raise VolumeFormatError("checksum mismatch")
    return np.frombuffer(payload, dtype=dtype).reshape(extents).copy()


def save_case(directory, stem: str, case: PhantomCase):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_volume(directory / f"{stem}.labels.ggvol", case.label.astype(np.uint8))
    write_volume(directory / f"{stem}.intensity.ggvol", case.intensity.astype(np.float32))
    doc = case.prompt.to_json()
    doc["seed"] = case.seed
    doc["template_rendered"] = case.rendered
    (directory / f"{stem}.prompt.json").write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_case(directory, stem: str) -> PhantomCase:
    directory = Path(directory)
    label = read_volume(directory / f"{stem}.labels.ggvol")
    intensity = read_volume(directory / f"{stem}.intensity.ggvol")
    doc = json.loads((directory / f"{stem}.prompt.json").read_text())
    prompt = PromptRecord.from_json(doc)
    return PhantomCase(label=label, intensity=intensity, prompt=prompt,
                       seed=int(doc.get("seed", -1)), rendered=doc.get("template_rendered", ""))
