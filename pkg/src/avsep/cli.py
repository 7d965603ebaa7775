"""Command-line interface: mix, train-coarse, train-fine, separate, evaluate,
occlude, params.

A JSON config file can pin any StftConfig / MstConfig / model / training
field; explicit command-line flags override file values.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .data import (
    DEFAULT_NOISE_SNR_RANGE,
    DEFAULT_SNR_RANGE,
    MixtureDataset,
    build_mix_dataset,
    read_manifest,
)
from .dsp import StftConfig, read_wav, write_wav
from .evaluate import (
    evaluate_dataset,
    evaluate_estimate_dir,
    occlusion_sweep,
    render_sweep,
    separate_utterance,
)
from .model import (
    ModelConfig,
    SeparationModel,
    load_checkpoint,
    save_checkpoint,
)
from .semantics import load_mouth_frames, occlude, save_mouth_frames
from .separator import MstConfig, count_parameters, parameter_report
from .training import TrainConfig, run_coarse_stage, run_fine_stage


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _build_model_config(file_cfg: dict, args: argparse.Namespace) -> ModelConfig:
    stft_kwargs = dict(file_cfg.get("stft", {}))
    mst_kwargs = dict(file_cfg.get("mst", {}))
    model_kwargs = dict(file_cfg.get("model", {}))
    if "branches" in mst_kwargs:
        mst_kwargs["branches"] = tuple(tuple(b) for b in mst_kwargs["branches"])
    for name in ("channels", "hidden", "num_blocks", "num_heads"):
        value = getattr(args, name, None)
        if value is not None:
            mst_kwargs[name] = value
    if getattr(args, "num_speakers", None) is not None:
        model_kwargs["num_speakers"] = args.num_speakers
    return ModelConfig(
        stft=StftConfig(**stft_kwargs), mst=MstConfig(**mst_kwargs), **model_kwargs
    )


def _build_train_config(file_cfg: dict, args: argparse.Namespace, stage: str) -> TrainConfig:
    kwargs = dict(file_cfg.get("train", {}))
    kwargs["stage"] = stage
    overrides = {
        "batch_size": getattr(args, "batch_size", None),
        "learning_rate": getattr(args, "learning_rate", None),
        "max_epochs": getattr(args, "epochs", None),
        "seed": getattr(args, "seed", None),
    }
    for key, value in overrides.items():
        if value is not None:
            kwargs[key] = value
    if getattr(args, "dynamic_mixing", False):
        kwargs["dynamic_mixing"] = True
    if getattr(args, "audio_only", False):
        kwargs["audio_only"] = True
    if getattr(args, "freeze_audio_encoder", False):
        kwargs["finetune_audio_encoder"] = False
    if "dm_snr_range" in kwargs:
        kwargs["dm_snr_range"] = tuple(kwargs["dm_snr_range"])
    return TrainConfig(**kwargs)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--channels", type=int, help="feature channels C")
    p.add_argument("--hidden", type=int, help="recurrent hidden size H")
    p.add_argument("--num-blocks", dest="num_blocks", type=int, help="separator depth B")
    p.add_argument("--num-heads", dest="num_heads", type=int, help="attention heads N")
    p.add_argument("--num-speakers", dest="num_speakers", type=int)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--dynamic-mixing", action="store_true")
    p.add_argument("--audio-only", action="store_true")


def _parse_occlusions(specs: list[str]) -> dict[int, int]:
    occ = {}
    for spec in specs:
        try:
            spk, n = spec.split(":")
            occ[int(spk.removeprefix("spk"))] = int(n)
        except ValueError:
            raise SystemExit(f"bad occlusion spec {spec!r}; expected spkI:N")
    return occ


def cmd_mix(args) -> int:
    manifest = read_manifest(args.manifest)
    out = build_mix_dataset(
        manifest,
        args.out,
        snr_range=tuple(args.snr_range),
        noise_snr_range=tuple(args.noise_snr_range),
        seed=args.seed,
    )
    print(f"materialized {len(manifest)} entries under {out}")
    errors = Path(out) / "errors.jsonl"
    if errors.exists():
        print(f"some entries failed; see {errors}", file=sys.stderr)
    return 0


def cmd_train_coarse(args) -> int:
    file_cfg = _load_config_file(args.config)
    model_cfg = _build_model_config(file_cfg, args)
    train_cfg = _build_train_config(file_cfg, args, stage="coarse")
    dataset = MixtureDataset(args.dataset)
    ckpt = run_coarse_stage(train_cfg, dataset, model_cfg)
    save_checkpoint(args.out, ckpt)
    print(f"coarse checkpoint: epoch {ckpt.epoch}, val loss {ckpt.best_val_loss:.4f} -> {args.out}")
    return 0


def cmd_train_fine(args) -> int:
    file_cfg = _load_config_file(args.config)
    train_cfg = _build_train_config(file_cfg, args, stage="fine")
    coarse = load_checkpoint(args.coarse_ckpt)
    model_cfg = _build_model_config(file_cfg, args) if args.config else None
    dataset = MixtureDataset(args.dataset)
    ckpt = run_fine_stage(train_cfg, coarse, dataset, model_config=model_cfg)
    save_checkpoint(args.out, ckpt)
    print(f"fine checkpoint: epoch {ckpt.epoch}, val loss {ckpt.best_val_loss:.4f} -> {args.out}")
    return 0


def cmd_separate(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    if not 2 <= len(args.mouths) <= 4:
        raise SystemExit(f"need 2..4 mouth streams, got {len(args.mouths)}")
    mixture = read_wav(args.mixture)
    mouths = [load_mouth_frames(p) for p in args.mouths]
    if args.occlude:
        for spk, n in _parse_occlusions(args.occlude).items():
            mouths[spk] = occlude(mouths[spk], n, args.seed + spk)
    waves = separate_utterance(ckpt, mixture, mouths, audio_only=args.audio_only)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, w in enumerate(waves):
        write_wav(out_dir / f"s{i}.wav", w)
    print(f"wrote {len(waves)} separated WAVs to {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    dataset = MixtureDataset(args.dataset)
    if args.estimates_dir:
        report = evaluate_estimate_dir(args.estimates_dir, dataset)
        print(report.render())
        return 0
    if not args.ckpt:
        raise SystemExit("either --ckpt or --estimates-dir is required")
    ckpt = load_checkpoint(args.ckpt)
    if args.occlusion_sweep != "none":
        rows = occlusion_sweep(
            ckpt, dataset, speakers=args.occlusion_sweep, seed=args.seed,
            audio_only=args.audio_only,
        )
        print(render_sweep(rows))
        print(json.dumps({"sweep": rows}, sort_keys=True))
        return 0
    report = evaluate_dataset(ckpt, dataset, audio_only=args.audio_only)
    print(report.render())
    return 0


def cmd_occlude(args) -> int:
    m = load_mouth_frames(args.input)
    save_mouth_frames(args.output, occlude(m, args.n_missing, args.seed))
    print(f"occluded {args.n_missing}/{m.num_frames} frames -> {args.output}")
    return 0


def cmd_params(args) -> int:
    file_cfg = _load_config_file(args.config)
    model_cfg = _build_model_config(file_cfg, args)
    model = SeparationModel(model_cfg)
    separation_path = {
        "encoder": model.encoder,
        "aligner": model.aligner,
        "fusion": model.fusion,
        "separator": model.separator,
        "decoder": model.decoder,
    }
    total = 0
    for name, module in separation_path.items():
        print(parameter_report(module, title=name))
        total += count_parameters(module)
        print()
    semantic = (
        count_parameters(model.visual_encoder)
        + count_parameters(model.audio_semantic_encoder)
        + count_parameters(model.semantic_fusion)
    )
    print(f"separation path total: {total}")
    print(f"semantic stand-in encoders (reported separately): {semantic}")
    print(f"grand total: {total + semantic}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="avsep", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mix", help="materialize a mixture dataset from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--snr-range", nargs=2, type=float, default=list(DEFAULT_SNR_RANGE))
    p.add_argument(
        "--noise-snr-range", nargs=2, type=float, default=list(DEFAULT_NOISE_SNR_RANGE)
    )
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("train-coarse", help="train the first-pass separator")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_coarse)

    p = sub.add_parser("train-fine", help="finetune with refinement semantics")
    p.add_argument("--dataset", required=True)
    p.add_argument("--coarse-ckpt", dest="coarse_ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--freeze-audio-encoder", action="store_true")
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_fine)

    p = sub.add_parser("separate", help="separate one mixture WAV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mixture", required=True)
    p.add_argument("--mouths", nargs="+", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--occlude", action="append", default=[], metavar="spkI:N")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--audio-only", action="store_true")
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("evaluate", help="score a model or an estimate directory")
    p.add_argument("--dataset", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--estimates-dir", dest="estimates_dir")
    p.add_argument(
        "--occlusion-sweep",
        dest="occlusion_sweep",
        choices=("none", "one", "both"),
        default="none",
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--audio-only", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("occlude", help="zero a consecutive block of mouth frames")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--n-missing", dest="n_missing", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_occlude)

    p = sub.add_parser("params", help="print the per-layer parameter report")
    _add_model_flags(p)
    p.set_defaults(func=cmd_params)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
