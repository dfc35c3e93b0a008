"""Command-line entry point: ``dualdit <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as dio
from .datagen import SynthesisSpec, filter_by_wer, read_manifest, resolve, synthesize_corpus, write_manifest
from .diffusion import GuidanceWeights
from .dsp import MelSpectrogram, griffin_lim
from .embed import load_translator, toy_audio_embed, toy_text_embed, translate_image
from .errors import DualDitError
from .metrics import clap_score, frechet_distance, wer_report

logger = logging.getLogger("dualdit")

METRICS = ("fad", "clap", "wer")


class UsageError(Exception):
    pass


def _metric_list(text):
    names = [m.strip() for m in text.split(",") if m.strip()]
    unknown = [m for m in names if m not in METRICS]
    if unknown or not names:
        raise argparse.ArgumentTypeError(f"unknown metric(s) {unknown}; choose from {','.join(METRICS)}")
    return names


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualdit", description="Environment-aware speech synthesis toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="mix clean speech with noise (and optional reverb)")
    s.add_argument("--clean-manifest", required=True)
    s.add_argument("--noise-manifest", required=True)
    s.add_argument("--rir-dir", help="directory of impulse-response WAV files")
    s.add_argument("--snr-min", type=float, default=2.0)
    s.add_argument("--snr-max", type=float, default=10.0)
    s.add_argument("--rir-prob", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out-dir", required=True)

    s = sub.add_parser("refine", help="drop entries whose ASR transcript disagrees too much")
    s.add_argument("--manifest", required=True)
    s.add_argument("--wer-threshold", type=float, default=0.2)
    s.add_argument("--out", required=True, help="filtered manifest; the discard report goes next to it")

    s = sub.add_parser("train", help="train the full generator")
    s.add_argument("--config", required=True)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--out-dir", default="checkpoints")
    s.add_argument("--steps", type=int, help="stop after this many more steps")

    s = sub.add_parser("sample", help="generate a WAV from content text and an environment condition")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--text", required=True)
    env = s.add_mutually_exclusive_group()
    env.add_argument("--env-text")
    env.add_argument("--env-audio")
    env.add_argument("--env-embedding-file")
    s.add_argument("--w-env", type=float, default=5.0)
    s.add_argument("--w-cont", type=float, default=5.0)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mode", choices=("deterministic", "ancestral"), default="deterministic")
    s.add_argument("--gl-iters", type=int, default=32)
    s.add_argument("--out", required=True)
    s.add_argument("--out-mel", help="also write the generated mel as a tensor file")

    s = sub.add_parser("translate", help="map image embeddings into the audio embedding space")
    s.add_argument("--i2a-checkpoint", required=True)
    s.add_argument("--image-embedding-file", required=True)
    s.add_argument("--out-embedding-file", required=True)
    s.add_argument("--steps", type=int, default=25)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("eval", help="objective metrics between generated and reference sets")
    s.add_argument("--gen-manifest", required=True)
    s.add_argument("--ref-manifest", required=True)
    s.add_argument("--metrics", type=_metric_list, default=list(METRICS))
    s.add_argument("--out", help="write the JSON report here instead of stdout")
    return p


# ---------------------------------------------------------------------------


def cmd_synth_data(args) -> int:
    clean_path, noise_path = Path(args.clean_manifest), Path(args.noise_manifest)
    clean, noise = read_manifest(clean_path), read_manifest(noise_path)
    rirs, rir_ids = [], []
    if args.rir_dir:
        for f in sorted(Path(args.rir_dir).glob("*.wav")):
            rirs.append(dio.read_wav(f))
            rir_ids.append(f.stem)
    spec = SynthesisSpec(args.snr_min, args.snr_max, args.rir_prob, args.seed)
    out = Path(args.out_dir)
    entries = synthesize_corpus(
        clean, noise, rirs, spec,
        clean_dir=clean_path.parent, noise_dir=noise_path.parent,
        rir_ids=rir_ids, out_dir=out, workers=args.workers,
    )
    write_manifest(out / "manifest.jsonl", entries)
    failed = len(clean) - len(entries)
    if failed:
        logger.error("%d of %d entries failed", failed, len(clean))
        return 1
    return 0


def cmd_refine(args) -> int:
    entries = read_manifest(args.manifest)
    kept, discarded = filter_by_wer(entries, args.wer_threshold)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(out, kept)
    report = {
        "threshold": args.wer_threshold,
        "input": len(entries),
        "kept": len(kept),
        "discarded": [{"id": e.id, "audio_path": e.audio_path, "reason": r} for e, r in discarded],
    }
    out.with_name(out.stem + ".discarded.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return 0


def cmd_train(args) -> int:
    from .pipeline import TrainConfig, Trainer, TrainingLock, load_training_examples

    config_path = Path(args.config)
    if not config_path.exists():
        raise UsageError(f"config file {config_path} not found")
    cfg = TrainConfig.from_file(config_path)
    examples = load_training_examples(cfg, base_dir=config_path.parent)
    out = Path(args.out_dir)
    with TrainingLock(out):
        trainer = Trainer(cfg, examples, checkpoint=args.resume)
        trainer.train(steps=args.steps, checkpoint_dir=out, log_path=out / "loss.jsonl")
        trainer.save(out / "final.ckpt")
    return 0


def _env_embedding(args, dim):
    if args.env_text is not None:
        return toy_text_embed(args.env_text, dim).vector
    if args.env_audio is not None:
        return toy_audio_embed(dio.read_wav(args.env_audio), dim).vector
    if args.env_embedding_file is not None:
        vectors, _ = dio.load_embeddings(args.env_embedding_file, mean_pool=True)
        return vectors
    return None


def cmd_sample(args) -> int:
    from .pipeline import load_voice_model

    model = load_voice_model(args.checkpoint)
    cfg = model.cfg
    env = _env_embedding(args, cfg.cond_dim)
    w = GuidanceWeights(args.w_env, args.w_cont)
    steps = cfg.sample_steps if args.steps is None else args.steps
    mel = model.generate(args.text, env, w, steps, seed=args.seed, mode=args.mode)
    if args.out_mel:
        dio.save_tensor(args.out_mel, mel)
    stft_cfg = cfg.stft_config()
    wav = griffin_lim(MelSpectrogram(mel, stft_cfg.log_floor), stft_cfg, iters=args.gl_iters, seed=args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    dio.write_wav(args.out, wav)
    return 0


def cmd_translate(args) -> int:
    import torch

    model = load_translator(args.i2a_checkpoint)
    y, index = dio.load_embeddings(args.image_embedding_file, mean_pool=True)
    g = torch.Generator().manual_seed(args.seed)
    z = translate_image(model, y, steps=args.steps, generator=g).double().numpy()
    ids = None
    if index is not None:
        ids = [k for k, _ in sorted(index.items(), key=lambda kv: kv[1])]
    dio.save_embeddings(args.out_embedding_file, z, ids)
    return 0


def _manifest_audio_embeddings(path):
    path = Path(path)
    entries = read_manifest(path)
    vecs = [toy_audio_embed(dio.read_wav(resolve(e, path.parent))).vector for e in entries]
    return entries, np.array(vecs)


def cmd_eval(args) -> int:
    gen, gen_vecs = _manifest_audio_embeddings(args.gen_manifest)
    report = {"n_gen": len(gen)}
    if "fad" in args.metrics:
        _, ref_vecs = _manifest_audio_embeddings(args.ref_manifest)
        report["fad"] = frechet_distance(gen_vecs, ref_vecs)
        report["n_ref"] = len(ref_vecs)
    if "clap" in args.metrics:
        pairs = [(v, toy_text_embed(e.env_caption).vector) for e, v in zip(gen, gen_vecs) if e.env_caption]
        report["clap"] = clap_score([a for a, _ in pairs], [t for _, t in pairs]) if pairs else None
        report["clap_pairs"] = len(pairs)
    if "wer" in args.metrics:
        rep = wer_report((e.id or e.audio_path, e.transcript, e.hypothesis_transcript) for e in gen)
        report["wer"] = rep.corpus_wer
        report["wer_per_entry"] = rep.per_entry
        report["wer_skipped"] = rep.skipped
    text = json.dumps(report, indent=1, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


COMMANDS = {
    "synth-data": cmd_synth_data,
    "refine": cmd_refine,
    "train": cmd_train,
    "sample": cmd_sample,
    "translate": cmd_translate,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.error(str(exc))
    except (DualDitError, OSError) as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
