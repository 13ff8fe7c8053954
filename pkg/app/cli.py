"""
Command-Line Interface Module
Corpus generation, staged training, sampling, evaluation and the conditioning-mode ablation
"""

import argparse
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

from app.config import ProjectConfig, describe_keys, load_config
from app.evaluation import (CONDITION_IMAGE, SAMPLE_MANIFEST, EvalReport, compare_modes,
                            evaluate_samples)
from app.logger import configure_logging
from data.clip_sampler import VideoCorpus, load_image, save_gif, save_video_frames, tensor_to_image
from data.data_generator import generate_corpus, verify_corpus
from models.checkpoint import load_checkpoint, save_checkpoint
from models.conditioning import ConditioningMode
from models.exceptions import AnimatorError
from models.latent_codec import train_codec
from models.model_state import ModelState, Stage, advance_stage, build_model, parse_stage
from models.sampler import SAMPLERS, ImageAnimator, generate
from models.train_model import plot_metrics, run_stage

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2

DENOISER_STAGES = (Stage.IMAGE_ADAPTER.value, Stage.VIDEO_FINETUNE.value)


class UsageError(Exception):
    """Missing input file or inconsistent flags; exit status 2"""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='animator',
        description='Image-conditioned latent video diffusion on synthetic shape videos',
    )
    parser.add_argument('--config', help='flat key = value config file')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('make-data', help='render the synthetic caption-video corpus')
    p.add_argument('--n-clips', type=int)
    p.add_argument('--seed', type=int)
    p.add_argument('--out', help='corpus directory (default: corpus_dir)')
    p.add_argument('--workers', type=int)
    p.add_argument('--verify', action='store_true', help='run the centroid motion oracle afterwards')

    p = sub.add_parser('train-codec', help='train the per-frame latent codec')
    p.add_argument('--corpus')
    p.add_argument('--out', help='checkpoint directory (default: <run_dir>/codec)')
    p.add_argument('--steps', type=int)

    p = sub.add_parser('train', help='train a denoiser stage')
    p.add_argument('--stage', required=True, choices=DENOISER_STAGES)
    p.add_argument('--corpus')
    p.add_argument('--init', help='checkpoint of the previous stage')
    p.add_argument('--resume', help='checkpoint of this stage to continue from')
    p.add_argument('--out', help='stage output directory (default: <run_dir>/<stage>)')
    p.add_argument('--steps', type=int)

    p = sub.add_parser('sample', help='animate one image')
    p.add_argument('--image', required=True)
    p.add_argument('--prompt', required=True)
    p.add_argument('--seed', type=int)
    p.add_argument('--steps', type=int)
    p.add_argument('--eta', type=float)
    p.add_argument('--guidance', type=float)
    p.add_argument('--frames', type=int)
    p.add_argument('--sampler', choices=SAMPLERS)
    p.add_argument('--checkpoint', help='default: <run_dir>/video_finetune/latest')
    p.add_argument('--drop-image', action='store_true', help='text-only baseline')
    p.add_argument('--gif', action='store_true', help='also write sample.gif')
    p.add_argument('--out', required=True)

    p = sub.add_parser('eval', help='fidelity metrics over sample directories')
    p.add_argument('--samples', required=True)
    p.add_argument('--report', required=True)
    p.add_argument('--checkpoint',
                   help='image encoder for the cosine metric (default: the checkpoint named in each sample manifest)')

    p = sub.add_parser('ablate', help='train and evaluate one conditioning mode')
    p.add_argument('--mode', required=True, choices=[m.value for m in ConditioningMode])
    p.add_argument('--corpus')
    p.add_argument('--codec', help='codec checkpoint (default: <run_dir>/codec)')
    p.add_argument('--out', help='default: <run_dir>/ablation')

    p = sub.add_parser('plot-metrics', help='plot a metrics.tsv loss curve')
    p.add_argument('--metrics', required=True)
    p.add_argument('--out', required=True)

    sub.add_parser('config', help='print every config key with its default')
    return parser


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _corpus(config: ProjectConfig, override: Optional[str]) -> VideoCorpus:
    return VideoCorpus(_require(override or config['corpus_dir'], 'corpus'))


def cmd_make_data(args, config: ProjectConfig) -> int:
    out = args.out or config['corpus_dir']
    records = generate_corpus(
        n_clips=args.n_clips if args.n_clips is not None else config['n_clips'],
        seed=args.seed if args.seed is not None else config['corpus_seed'],
        out_dir=out,
        image_size=config['image_size'],
        num_frames=config['native_frames'],
        fps_tag=config['fps_tag'],
        workers=args.workers if args.workers is not None else config['workers'],
    )
    print(f"Generated {len(records)} clips in {out}")
    if args.verify:
        failures = verify_corpus(out)
        if failures:
            print(f"Caption/motion mismatch in: {', '.join(failures)}")
            return EXIT_ERROR
        print("All drift captions agree with measured motion")
    return EXIT_OK


def cmd_train_codec(args, config: ProjectConfig) -> int:
    corpus = _corpus(config, args.corpus)
    state = ModelState(model=build_model(config.model_config(), config['model_seed']).to(config['device']))
    codec_cfg = config.codec_train_config()
    if args.steps is not None:
        codec_cfg = replace(codec_cfg, steps=args.steps)

    train_codec(corpus.frame_dataset(), codec_cfg, state.model.codec)
    state.step = codec_cfg.steps
    out = save_checkpoint(state, args.out or Path(config['run_dir']) / 'codec')
    print(f"Codec checkpoint: {out} (latent scale {state.normalization:.5f})")
    return EXIT_OK


def _default_init(config: ProjectConfig, stage: Stage) -> Path:
    run_dir = Path(config['run_dir'])
    if stage is Stage.IMAGE_ADAPTER:
        return run_dir / 'codec'
    return run_dir / Stage.IMAGE_ADAPTER.value / 'latest'


def cmd_train(args, config: ProjectConfig) -> int:
    stage = parse_stage(args.stage)
    if args.init and args.resume:
        raise UsageError('--init and --resume are mutually exclusive')
    corpus = _corpus(config, args.corpus)

    if args.resume:
        state = load_checkpoint(_require(args.resume, 'checkpoint'), device=config['device'])
        if state.stage is not stage:
            raise UsageError(f"--resume checkpoint is at stage {state.stage.value}, not {stage.value}")
    else:
        init = _require(args.init or _default_init(config, stage), 'initial checkpoint')
        state = advance_stage(load_checkpoint(init, device=config['device']), stage)

    train_cfg = config.train_config(stage)
    if args.steps is not None:
        train_cfg = replace(train_cfg, steps=args.steps)
    out = Path(args.out or Path(config['run_dir']) / stage.value)
    run_stage(state, corpus, train_cfg, config.schedule(), out)
    print(f"Stage {stage.value} finished at step {state.step}; checkpoint: {out / 'latest'}")
    return EXIT_OK


def write_sample(video, image_path: Path, out: Path, manifest: dict, gif_fps: Optional[int] = None) -> Path:
    """Frames, a copy of the conditioning image and sample_manifest.json"""
    out.mkdir(parents=True, exist_ok=True)
    save_video_frames(video, out)
    shutil.copyfile(image_path, out / CONDITION_IMAGE)
    (out / SAMPLE_MANIFEST).write_text(json.dumps(manifest, indent=2) + '\n', encoding='utf-8')
    if gif_fps:
        save_gif(video, out / 'sample.gif', gif_fps)
    return out


def cmd_sample(args, config: ProjectConfig) -> int:
    image_path = _require(args.image, 'image')
    checkpoint = _require(args.checkpoint or Path(config['run_dir']) / Stage.VIDEO_FINETUNE.value / 'latest',
                          'checkpoint')
    animator = ImageAnimator(checkpoint, device=config['device'])
    state = animator.state
    cfg = config.sampler_config(steps=args.steps, eta=args.eta, guidance_scale=args.guidance,
                                seed=args.seed, num_frames=args.frames, sampler=args.sampler)

    video = animator.animate(load_image(image_path), args.prompt, cfg, drop_image=args.drop_image, progress=True)
    manifest = {
        'image_path': str(image_path),
        'prompt': args.prompt,
        'seed': cfg.seed,
        'steps': cfg.steps,
        'eta': cfg.eta,
        'guidance': cfg.guidance_scale,
        'checkpoint': str(checkpoint),
        'mode': state.config.conditioning_mode,
        'config_hash': config.config_hash(),
        'sampler': cfg.sampler,
        'drop_image': bool(args.drop_image),
    }
    out = write_sample(video, image_path, Path(args.out), manifest,
                       config['gif_fps'] if args.gif else None)
    print(f"Wrote {video.shape[0]} frames to {out}")
    return EXIT_OK


def cmd_eval(args, config: ProjectConfig) -> int:
    samples = _require(args.samples, 'samples directory')
    if args.checkpoint:
        encoder = load_checkpoint(_require(args.checkpoint, 'checkpoint'), device=config['device']).model.image_encoder
        report = evaluate_samples(samples, encoder)
    else:
        # each sample is scored with the encoder of the checkpoint that produced it
        report = evaluate_samples(samples, encoder_loader=lambda path: load_checkpoint(
            path, device=config['device']).model.image_encoder)
    path = report.save(args.report)
    print(f"Report ({len(report.rows)} samples, stand-in metrics): {path}")
    return EXIT_OK


def run_ablation(config: ProjectConfig, mode: str, corpus: VideoCorpus, codec_state: ModelState,
                 out: Path) -> EvalReport:
    """
    Train both denoiser stages under one conditioning mode and evaluate on held-out clips

    Every mode gets the same initialization seed, codec, data split and budgets.
    """
    model_config = replace(config.model_config(), conditioning_mode=mode)
    state = ModelState(model=build_model(model_config, config['model_seed']).to(config['device']))
    state.model.codec.load_state_dict(codec_state.model.codec.state_dict())
    train_set, held_out = corpus.split(config['holdout_clips'])
    sched = config.schedule()

    run_dir = out / mode
    for stage in (Stage.IMAGE_ADAPTER, Stage.VIDEO_FINETUNE):
        advance_stage(state, stage)
        run_stage(state, train_set, config.train_config(stage), sched, run_dir / stage.value)

    cfg = config.sampler_config()
    samples = run_dir / 'samples'
    for record in held_out.records:
        first = held_out.frames(record, [0])[0]
        video = generate(first, record.caption, state, cfg, sched)
        sample_dir = samples / record.clip_id
        sample_dir.mkdir(parents=True, exist_ok=True)
        tensor_to_image(first).save(sample_dir / 'input.png')
        write_sample(video, sample_dir / 'input.png', sample_dir, {
            'clip_id': record.clip_id, 'image_path': str(sample_dir / 'input.png'),
            'prompt': record.caption, 'seed': cfg.seed, 'steps': cfg.steps, 'eta': cfg.eta,
            'guidance': cfg.guidance_scale, 'checkpoint': str(run_dir / Stage.VIDEO_FINETUNE.value / 'latest'),
            'mode': mode, 'config_hash': config.config_hash(),
        })
    report = evaluate_samples(samples, state.model.image_encoder)
    report.meta.update(mode=mode, held_out=[r.clip_id for r in held_out.records])
    return report


def cmd_ablate(args, config: ProjectConfig) -> int:
    corpus = _corpus(config, args.corpus)
    codec_path = _require(args.codec or Path(config['run_dir']) / 'codec', 'codec checkpoint')
    codec_state = load_checkpoint(codec_path, device=config['device'])
    out = Path(args.out or Path(config['run_dir']) / 'ablation')

    report = run_ablation(config, args.mode, corpus, codec_state, out)
    path = report.save(out / f"ablation_{args.mode}.json")
    print(f"Ablation report for {args.mode}: {path}")

    other = (ConditioningMode.CLS_ONLY if args.mode == ConditioningMode.FULL_TOKENS.value
             else ConditioningMode.FULL_TOKENS).value
    other_path = out / f"ablation_{other}.json"
    if other_path.exists():
        reports = {args.mode: report, other: EvalReport.load(other_path)}
        comparison = compare_modes(reports[ConditioningMode.FULL_TOKENS.value],
                                   reports[ConditioningMode.CLS_ONLY.value])
        (out / 'ablation_comparison.json').write_text(json.dumps(comparison, indent=2) + '\n',
                                                      encoding='utf-8')
        print(f"full_tokens {comparison['full_tokens_psnr']:.2f} dB vs "
              f"cls_only {comparison['cls_only_psnr']:.2f} dB "
              f"({'full_tokens higher' if comparison['full_tokens_higher'] else 'full_tokens NOT higher'})")
    return EXIT_OK


def cmd_plot_metrics(args, config: ProjectConfig) -> int:
    path = plot_metrics(_require(args.metrics, 'metrics file'), args.out)
    print(f"Loss curve: {path}")
    return EXIT_OK


def cmd_config(args, config: ProjectConfig) -> int:
    print(describe_keys())
    print(f"\nconfig hash: {config.config_hash()}")
    return EXIT_OK


COMMANDS = {
    'make-data': cmd_make_data,
    'train-codec': cmd_train_codec,
    'train': cmd_train,
    'sample': cmd_sample,
    'eval': cmd_eval,
    'ablate': cmd_ablate,
    'plot-metrics': cmd_plot_metrics,
    'config': cmd_config,
}


def cli(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one command

    Returns:
        int: 0 on success, 1 on a structured pipeline error, 2 on usage errors
    """
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    try:
        if args.config:
            _require(args.config, 'config file')
        config = load_config(args.config)
        configure_logging(config['log_level'], config['log_dir'])
        return COMMANDS[args.command](args, config)
    except UsageError as e:
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except AnimatorError as e:
        print(f"{parser.prog}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR


def main(argv: Optional[List[str]] = None) -> None:
    sys.exit(cli(argv))
