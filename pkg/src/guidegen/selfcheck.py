"""Invariant suite behind the ``selfcheck`` subcommand.

Each check returns (name, ok, detail); the suite is built to finish in
well under five minutes on one core.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from guidegen import autodiff as ad
from guidegen import autoencoder as ae
from guidegen import categorical as cat
from guidegen import phantoms
from guidegen.schedules import NoiseSchedule, alpha_bar_of, cosine_schedule

__all__ = ["run_selfcheck", "check_schedule", "format_report"]

_GRAD_CASES = [
    ("add", [(3, 4), (3, 4)], 1e-6),
    ("sub", [(5,), (5,)], 1e-6),
    ("mul", [(4, 2), (4, 2)], 1e-6),
    ("div", [(6,), (6,)], 1e-6),
    ("affine", [(5,)], 1e-6),
    ("exp", [(4,)], 1e-6),
    ("log", [(4,)], 1e-6),
    ("sqrt", [(4,)], 1e-6),
    ("abs", [(5,)], 1e-5),
    ("silu", [(6,)], 1e-6),
    ("sigmoid", [(6,)], 1e-6),
    ("clamp", [(8,)], 1e-5),
    ("matmul", [(3, 5), (5, 2)], 1e-6),
    ("transpose", [(3, 4)], 1e-6),
    ("reshape", [(2, 6)], 1e-6),
    ("select", [(3, 4)], 1e-6),
    ("concat", [(2, 3), (2, 3)], 1e-6),
    ("sum", [(3, 4)], 1e-6),
    ("mean", [(3, 4)], 1e-6),
    ("softmax", [(4, 5)], 1e-5),
    ("layer_norm", [(4, 8)], 1e-4),
    ("group_norm", [(4, 3, 3, 3)], 1e-4),
    ("embed", [(6, 3)], 1e-6),
    ("add_bias", [(3, 4, 4)], 1e-6),
    ("class_mix", [(3, 9)], 1e-6),
    ("conv3d", [(2, 4, 4, 4)], 1e-4),
    ("conv2d", [(2, 5, 5)], 1e-4),
    ("resample3d", [(1, 4, 4, 4)], 1e-4),
]


def check_grad_kinds() -> list:
    out = []
    for kind, shapes, tol in _GRAD_CASES:
        worst = max(ad.grad_check(kind, shapes, seed=seed) for seed in (0, 1, 2))
        out.append((f"grad/{kind}", worst < tol, f"max rel err {worst:.2e} (tol {tol:g})"))
    return out


def check_schedule(schedule: NoiseSchedule | None = None):
    """Recompute alpha-bars from betas and compare; betas must stay in
    (0, 0.999]."""
    schedule = schedule or cosine_schedule(1000, 0.008)
    recomputed = np.cumprod(1.0 - schedule.betas)
    drift = float(np.max(np.abs(recomputed - schedule.alpha_bars)))
    in_range = bool(np.all(schedule.betas > 0) and np.all(schedule.betas <= 0.999))
    decreasing = bool(np.all(np.diff(schedule.alpha_bars) < 0))
    ok = drift <= 1e-12 and in_range and decreasing
    return ("schedule/alpha-bar", ok,
            f"drift {drift:.2e}, betas in range: {in_range}, decreasing: {decreasing}")


def check_bayes() -> tuple:
    worst = 0.0
    for n in (2, 3, 5):
        sch = cosine_schedule(6)
        for t in range(1, 7):
            stack = cat.posterior_stack(t, sch, n)
            beta = sch.beta(t)
            bar_prev = alpha_bar_of(sch, t - 1)
            bar_t = alpha_bar_of(sch, t)
            for k in range(n):
                for c in range(n):
                    brute = np.array([
                        ((1 - beta) * (j == k) + beta / n)
                        * (bar_prev * (j == c) + (1 - bar_prev) / n)
                        for j in range(n)
                    ]) / (bar_t * (k == c) + (1 - bar_t) / n)
                    worst = max(worst, float(np.max(np.abs(stack[k, :, c] - brute))))
    return ("categorical/bayes", worst < 1e-12, f"max abs err {worst:.2e}")


def check_composition() -> tuple:
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(10):
        n = int(rng.integers(2, 7))
        T = int(rng.integers(2, 17))
        sch = NoiseSchedule(betas=rng.uniform(0.02, 0.6, size=T))
        m = rng.integers(1, n + 1, size=(3, 3, 3))
        x = cat.one_hot(m, n)
        for t in range(1, T + 1):
            x = cat.forward_step(x, sch.beta(t))
            ref = cat.forward_marginal(m, t, sch, n)
            worst = max(worst, float(np.max(np.abs(x - ref))))
    return ("categorical/composition", worst < 1e-10, f"max abs err {worst:.2e}")


def check_codec_identity() -> tuple:
    cfg = ae.AutoencoderConfig(identity=True, levels=1, channels=(1,), latent_channels=1)
    codec = ae.HdrCodec(cfg, seed=0)
    v = np.random.default_rng(0).uniform(-1, 1, (6, 6, 6))
    out = codec.decode(codec.encode(v, []), []).data[0]
    err = float(np.max(np.abs(out - v)))
    return ("codec/identity", err < 1e-6, f"max abs err {err:.2e}")


def check_formats() -> list:
    out = []
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        rng = np.random.default_rng(3)
        vol = rng.random((5, 6, 7)).astype(np.float32)
        phantoms.write_volume(tmp / "v.ggvol", vol)
        back = phantoms.read_volume(tmp / "v.ggvol")
        out.append(("format/volume-roundtrip", bool(np.array_equal(vol, back)), "f32 bit-exact"))
        raw = bytearray((tmp / "v.ggvol").read_bytes())
        raw[0] ^= 0xFF
        (tmp / "bad.ggvol").write_bytes(bytes(raw))
        try:
            phantoms.read_volume(tmp / "bad.ggvol")
            out.append(("format/volume-magic", False, "corrupt magic accepted"))
        except phantoms.VolumeFormatError as exc:
            out.append(("format/volume-magic", True, str(exc)[:60]))
        params = {"a.w": ad.Parameter("a.w", rng.standard_normal((3, 4))),
                  "b": ad.Parameter("b", rng.standard_normal(7))}
        ad.save_checkpoint(tmp / "c.ggckpt", params, meta={"config_hash": "abc123"})
        arrays, meta = ad.load_checkpoint(tmp / "c.ggckpt")
        ok = (np.array_equal(arrays["a.w"], params["a.w"].value.data)
              and np.array_equal(arrays["b"], params["b"].value.data)
              and meta.get("config_hash") == "abc123")
        out.append(("format/checkpoint-roundtrip", ok, "f64 bit-exact with metadata"))
    return out


def check_field_invariants() -> list:
    rng = np.random.default_rng(5)
    x = rng.standard_normal((6, 50))
    s = ad.softmax(ad.Tensor(x), axis=0).data
    sums = float(np.max(np.abs(s.sum(axis=0) - 1.0)))
    out = [("softmax/normalized", s.min() >= 0 and sums < 1e-12, f"sum drift {sums:.2e}")]
    const = np.full((2, 4, 4, 4), 3.7)
    res = ad.resample3d(ad.Tensor(const), (7, 5, 9)).data
    drift = float(np.max(np.abs(res - 3.7)))
    out.append(("resample/constant", drift < 1e-12, f"drift {drift:.2e}"))
    return out


def run_selfcheck() -> list:
    checks = []
    checks.extend(check_grad_kinds())
    checks.append(check_schedule())
    checks.append(check_bayes())
    checks.append(check_composition())
    checks.append(check_codec_identity())
    checks.extend(check_formats())
    checks.extend(check_field_invariants())
    return checks


def format_report(checks) -> str:
    lines = []
    for name, ok, detail in checks:
        lines.append(f"{'PASS' if ok else 'FAIL'}  {name:28s} {detail}")
    n_bad = sum(1 for _, ok, _ in checks if not ok)
    lines.append(f"{len(checks) - n_bad}/{len(checks)} checks passed")
    return "\n".join(lines)
