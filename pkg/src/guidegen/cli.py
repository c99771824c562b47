"""Command-line entry point.

Subcommands: phantom-gen, train, sample, eval, selfcheck, describe.
Exit codes: 0 success, 1 usage, 2 invariant failure, 3 data error.
GUIDEGEN_THREADS caps worker fan-out for phantom generation and evaluation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from guidegen import autodiff as ad
from guidegen import config as cfgmod
from guidegen import estimators as est
from guidegen import metrics as met
from guidegen import phantoms
from guidegen.conditioning import PromptRecord, PromptVocabulary, render_prompt
from guidegen.denoisers import split_label_volume
from guidegen.selfcheck import format_report, run_selfcheck

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INVARIANT = 2
EXIT_DATA = 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class InvariantError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("GUIDEGEN_THREADS", "1")))
    except ValueError:
        return 1


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_config(path) -> dict:
    if path is None:
        return cfgmod.desk_config()
    try:
        return cfgmod.load_config(path)
    except FileNotFoundError as exc:
        raise UsageError(f"config not found: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"config is not valid JSON: {exc}") from exc


def _case_stems(data_dir: Path) -> list:
    stems = sorted(p.name[: -len(".labels.ggvol")]
                   for p in data_dir.glob("*.labels.ggvol"))
    if not stems:
        raise DataError(f"no cases found under {data_dir}")
    return stems


def _load_cases(data_dir: Path) -> list:
    try:
        return [phantoms.load_case(data_dir, stem) for stem in _case_stems(data_dir)]
    except (phantoms.VolumeFormatError, json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"corrupt case data: {exc}") from exc


# --- subcommands ---------------------------------------------------------------


def cmd_phantom_gen(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = int(args.seed)
    chash = cfgmod.config_hash(cfg)
    spec = cfgmod.phantom_spec_from_config(cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    base_seed = int(cfg["seed"])
    n = int(args.n)

    def build(i: int) -> str:
        case = phantoms.generate_case(spec, base_seed + i)
        stem = f"case_{i:05d}"
        phantoms.save_case(out_dir, stem, case)
        return stem

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        stems = list(pool.map(build, range(n)))
    files = []
    for stem in stems:
        entry = {"stem": stem}
        for suffix in (".labels.ggvol", ".intensity.ggvol", ".prompt.json"):
            entry[suffix.lstrip(".")] = _sha256(out_dir / f"{stem}{suffix}")
        files.append(entry)
    manifest = {"config_hash": chash, "seed": base_seed, "n": n, "files": files}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    print(f"wrote {n} cases to {out_dir} (config {chash})")
    return EXIT_OK


def _jsonl_logger(path: Path, stage: str):
    fh = open(path, "a")

    def log(step, value):
        record = {"step": step, "stage": stage}
        if isinstance(value, dict):
            record.update({k: v for k, v in value.items()})
        else:
            record["loss"] = value
        fh.write(json.dumps(record) + "\n")
        fh.flush()

    return log, fh


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = int(args.seed)
    if args.steps is not None:
        cfg["training"][f"{args.stage}_steps"] = int(args.steps)
    chash = cfgmod.config_hash(cfg)
    cases = _load_cases(Path(args.data))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = out.with_suffix(out.suffix + ".losses.jsonl")
    interval = int(cfg["training"].get("ckpt_interval", 0))
    meta = {"config_hash": chash}

    if args.stage == "tcss":
        model = est.synthesizer_from_config(cfg)
    elif args.stage == "ae":
        model = est.autoencoder_from_config(cfg)
    else:
        ae_model = est.autoencoder_from_config(cfg)
        if not args.ckpt_ae:
            raise UsageError("train --stage lfg requires --ckpt-ae")
        ae_model.build()
        _checked_load(ae_model, args.ckpt_ae, chash, args.force)
        model = est.generator_from_config(cfg, ae_model)

    log, fh = _jsonl_logger(log_path, args.stage)

    def on_step(step, value):
        log(step, value)
        if interval and step % interval == 0:
            model.save_checkpoint(out, meta=meta)

    try:
        if args.stage == "lfg" and args.ckpt_tcss:
            synth = est.synthesizer_from_config(cfg)
            _checked_load(synth, args.ckpt_tcss, chash, args.force)
            cases = _with_generated_masks(cases, synth)
        model.fit(cases, on_step=on_step)
    finally:
        fh.close()
    model.save_checkpoint(out, meta=meta)
    print(f"stage {args.stage}: {len(model.loss_history_)} steps, "
          f"checkpoint {out} (config {chash})")
    return EXIT_OK


def _with_generated_masks(cases, synth):
    """Swap each case's label volume for one synthesized from its prompt."""
    swapped = []
    for i, case in enumerate(cases):
        res = synth.sample(case.prompt, seed=case.seed)
        swapped.append(phantoms.PhantomCase(
            label=res["label"].astype(np.uint8), intensity=case.intensity,
            prompt=case.prompt, seed=case.seed, rendered=case.rendered))
    return swapped


def _checked_load(model, path, chash, force):
    try:
        return model.load_checkpoint(path, expected_hash=chash, force=force)
    except FileNotFoundError as exc:
        raise UsageError(f"checkpoint not found: {exc}") from exc
    except ValueError as exc:
        raise InvariantError(str(exc)) from exc


def _load_prompts(path, vocab: PromptVocabulary) -> list:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"prompt file not found: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"prompt file is not valid JSON: {exc}") from exc
    if isinstance(doc, dict):
        doc = [doc]
    try:
        records = [PromptRecord.from_json(d) for d in doc]
        for rec in records:  # vocabulary check up front
            vocab.tokenize(render_prompt(rec, vocab.config))
    except (KeyError, ValueError) as exc:
        raise DataError(f"bad prompt record: {exc}") from exc
    return records


def cmd_sample(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = int(args.seed)
    chash = cfgmod.config_hash(cfg)
    synth = est.synthesizer_from_config(cfg)
    _checked_load(synth, args.ckpt_tcss, chash, args.force)
    ae_model = est.autoencoder_from_config(cfg)
    _checked_load(ae_model, args.ckpt_ae, chash, args.force)
    gen = est.generator_from_config(cfg, ae_model)
    _checked_load(gen, args.ckpt_lfg, chash, args.force)
    pipe = est.PipelineSampler(synth, ae_model, gen)
    prompts = _load_prompts(args.prompts, synth.denoiser_.conditioner.vocab)
    n = int(args.n) if args.n is not None else len(prompts)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    base_seed = int(cfg["seed"])
    for i in range(n):
        rec = prompts[i % len(prompts)]
        trace_hook = None
        if args.dump_trajectory:
            traj_dir = out_dir / f"sample_{i:05d}_trajectory"
            traj_dir.mkdir(exist_ok=True)

            def trace_hook(t, z, _dir=traj_dir):
                phantoms.write_volume(_dir / f"z_t{t:04d}.ggvol",
                                      z.astype(np.float32))

        result = pipe.sample(rec, seed=base_seed + i, trace_hook=trace_hook)
        stem = f"sample_{i:05d}"
        phantoms.write_volume(out_dir / f"{stem}.mask.ggvol",
                              result["label"].astype(np.uint8))
        phantoms.write_volume(out_dir / f"{stem}.intensity.ggvol",
                              result["intensity"].astype(np.float32))
        provenance = {
            "prompt": rec.to_json(),
            "seed": base_seed + i,
            "config_hash": chash,
        }
        (out_dir / f"{stem}.json").write_text(json.dumps(provenance, indent=1,
                                                         sort_keys=True))
    print(f"wrote {n} samples to {out_dir} (config {chash})")
    return EXIT_OK


def _eval_entries(path: Path) -> list:
    """Yield (label, intensity, prompt, case_hash) from either a sample
    directory or a phantom dataset directory."""
    entries = []
    sample_stems = sorted(p.name[: -len(".mask.ggvol")]
                          for p in path.glob("*.mask.ggvol"))
    if sample_stems:
        for stem in sample_stems:
            label = phantoms.read_volume(path / f"{stem}.mask.ggvol")
            intensity = phantoms.read_volume(path / f"{stem}.intensity.ggvol")
            doc = json.loads((path / f"{stem}.json").read_text())
            prompt = PromptRecord.from_json(doc["prompt"])
            entries.append((label, intensity, prompt, doc.get("config_hash")))
        return entries
    for stem in _case_stems(path):
        case = phantoms.load_case(path, stem)
        entries.append((case.label, case.intensity, case.prompt, None))
    return entries


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    chash = cfgmod.config_hash(cfg)
    spec = cfgmod.phantom_spec_from_config(cfg)
    layout = cfgmod.layout_from_config(cfg)
    try:
        entries = _eval_entries(Path(args.samples))
    except (phantoms.VolumeFormatError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt sample data: {exc}") from exc
    if not entries:
        raise DataError("no cases to evaluate")
    for _, _, _, case_hash in entries:
        if case_hash is not None and case_hash != chash and not args.force:
            raise InvariantError(
                f"sample config hash {case_hash} != {chash}; rerun with --force to override")

    hu_table = spec.class_hu_table()
    dice_acc = {cid: [] for cid in range(1, layout.n_classes + 1)}
    count_ok = loc_ok = 0

    def evaluate(entry):
        label, intensity, prompt, _ = entry
        seg = met.segment_by_hu(intensity, hu_table)
        dices = {cid: met.dice(seg, label.astype(np.int64), cid)
                 for cid in dice_acc}
        m_a, m_t = split_label_volume(label.astype(np.int64), layout)
        return dices, met.tumor_alignment(m_t, m_a, prompt, layout)

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(evaluate, entries))
    for dices, (c_ok, l_ok) in results:
        for cid, val in dices.items():
            dice_acc[cid].append(val)
        count_ok += c_ok
        loc_ok += l_ok

    if args.reference:
        ref_entries = _eval_entries(Path(args.reference))
        pool_hist = np.concatenate([e[1].ravel() for e in entries])
        ref_hist = np.concatenate([e[1].ravel() for e in ref_entries])
    else:
        pool_hist = ref_hist = np.concatenate([e[1].ravel() for e in entries])
    hrange = tuple(spec.hu_range)
    hdist = met.histogram_distance(pool_hist, ref_hist, bins=64, value_range=hrange)

    n = len(entries)
    report = met.EvalReport(
        per_class_dice={cid: float(np.mean(vals)) for cid, vals in dice_acc.items()},
        tumor_count_accuracy=count_ok / n,
        tumor_location_accuracy=loc_ok / n,
        histogram_distance=hdist,
        case_count=n,
        config_hash=chash,
    )
    doc = report.to_json()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, indent=1, sort_keys=True))
    with open(out.parent / "metrics.jsonl", "a") as fh:
        fh.write(json.dumps(doc) + "\n")
    print(json.dumps(doc, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    checks = run_selfcheck()
    print(format_report(checks))
    return EXIT_OK if all(ok for _, ok, _ in checks) else EXIT_INVARIANT


def cmd_describe(args) -> int:
    cfg = _load_config(args.config)
    synth = est.synthesizer_from_config(cfg)
    synth.build()
    ae_model = est.autoencoder_from_config(cfg)
    ae_model.build()
    gen = est.generator_from_config(cfg, ae_model)
    gen.build()
    print(f"config hash: {cfgmod.config_hash(cfg)}")
    for title, net in (("mask-stage denoiser", synth.denoiser_),
                       ("latent-stage denoiser", gen.denoiser_)):
        print(f"\n== {title} (backbone) ==")
        print(net.unet.describe())
        cond_count = sum(p.value.size for p in net.conditioner.params.values())
        print(f"conditioning parameters: {cond_count}")
    codec_count = sum(p.value.size for p in ae_model.codec_.params.values())
    disc_count = sum(p.value.size for p in ae_model.codec_.disc_params.values())
    print(f"\n== autoencoder ==\ncodec parameters: {codec_count}")
    print(f"discriminator parameters: {disc_count}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="guidegen",
                     description="Text-conditional 3D phantom synthesis pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="generate a phantom dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_phantom_gen)

    p = sub.add_parser("train", help="train one stage")
    p.add_argument("--stage", choices=("tcss", "ae", "lfg"), required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--ckpt-ae", dest="ckpt_ae", default=None)
    p.add_argument("--ckpt-tcss", dest="ckpt_tcss", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="sample paired mask+CT volumes from prompts")
    p.add_argument("--config", default=None)
    p.add_argument("--ckpt-tcss", dest="ckpt_tcss", required=True)
    p.add_argument("--ckpt-ae", dest="ckpt_ae", required=True)
    p.add_argument("--ckpt-lfg", dest="ckpt_lfg", required=True)
    p.add_argument("--prompts", required=True)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dump-trajectory", dest="dump_trajectory", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="evaluate samples or a dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--samples", required=True)
    p.add_argument("--reference", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("selfcheck", help="run the invariant suite")
    p.set_defaults(fn=cmd_selfcheck)

    p = sub.add_parser("describe", help="print layer tables and parameter counts")
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_describe)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantError as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (DataError, phantoms.VolumeFormatError, phantoms.TumorPlacementError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
