# ==================================================
# File: main.py
# Command-line entry point: synth, prepare, train, eval, encode, ablate, check, status
# ==================================================

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import ablation
import checkpoint
import trainer
import vlad
from artifact_store import ArtifactStore, atomic_write_text
from codebook import load as load_codebook
from codebook import save as save_codebook
from config_loader import ConfigLoader, coerce
from data_io import MANIFEST_NAME, Dataset, SyntheticSpec, generate, load_manifest, split, write_dataset
from debug_tools import DebugTools, summary_lines
from errors import ConfigError, DrslError, MissingArtifactError
from memory_bank import MemoryBank
from pipeline_config import Config, RunConfig
from report_writer import MetricsLogWriter, write_evaluation

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

_LEVELS = {'error': logging.ERROR, 'info': logging.INFO, 'debug': logging.DEBUG}
_HANDLER_NAME = "drsl-stderr"

# flag dest -> RunConfig key
_RUN_FLAGS = {
    'output_dir': 'output_dir',
    'manifest': 'manifest',
    'seed': 'seed',
    'dtype': 'dtype',
    'k': 'k',
    'epochs': 'epochs',
    'freeze_epochs': 'freeze_epochs',
    'batch_size': 'batch_size',
    'tiles_per_slide': 'tiles_per_slide',
    'lr': 'lr',
    'loss_weight': 'loss_weight',
    'train_fraction': 'train_fraction',
}

# flag dest -> SyntheticSpec field
_SYNTH_FLAGS = {
    'classes': 'num_classes',
    'slides_per_class': 'slides_per_class',
    'min_tiles': 'min_tiles',
    'max_tiles': 'max_tiles',
    'input_dim': 'input_dim',
    'signal_fraction': 'signal_fraction',
    'signal_scale': 'signal_scale',
    'noise_scale': 'noise_scale',
    'report_dim': 'report_dim',
    'report_noise': 'report_noise',
    'report_fraction': 'report_fraction',
}


@dataclass
class RunContext:
    """Everything resolved before a command touches data"""

    run: RunConfig
    store: ArtifactStore
    synthetic: Optional[SyntheticSpec] = None
    axes: Dict[str, List] = field(default_factory=dict)
    seeds: List[int] = field(default_factory=list)


def configure_logging(environ: Optional[Mapping[str, str]] = None) -> int:
    """One stderr handler at the DRSL_LOG level; stdout stays free for metrics"""
    environ = os.environ if environ is None else environ
    name = environ.get(Config.LOG_ENV_VAR, 'info').strip().lower()
    if name not in _LEVELS:
        raise ConfigError(f"{Config.LOG_ENV_VAR} must be one of {Config.LOG_LEVELS}, got {name!r}")

    root = logging.getLogger()
    for handler in list(root.handlers):
        if handler.get_name() == _HANDLER_NAME:
            root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.set_name(_HANDLER_NAME)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s %(message)s"))
    root.addHandler(handler)
    root.setLevel(_LEVELS[name])
    return _LEVELS[name]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drsl", description="Slide-level residual encoding pipeline")
    subparsers = parser.add_subparsers(dest='command', required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=Path, help='key=value configuration file')
    common.add_argument('--output-dir', dest='output_dir', help='directory every artifact is written to')
    common.add_argument('--seed', type=int)
    common.add_argument('--set', dest='settings', action='append', default=[], metavar='KEY=VALUE',
                        help='override any configuration key (repeatable)')

    pipeline = argparse.ArgumentParser(add_help=False, parents=[common])
    pipeline.add_argument('--manifest', help='dataset manifest written by synth')
    pipeline.add_argument('--dtype', choices=Config.DTYPES)
    pipeline.add_argument('--k', type=int, help='codebook size')
    pipeline.add_argument('--epochs', type=int)
    pipeline.add_argument('--freeze-epochs', dest='freeze_epochs', type=int)
    pipeline.add_argument('--batch-size', dest='batch_size', type=int)
    pipeline.add_argument('--tiles-per-slide', dest='tiles_per_slide', type=int)
    pipeline.add_argument('--lr', type=float)
    pipeline.add_argument('--loss-weight', dest='loss_weight', type=float)
    pipeline.add_argument('--train-fraction', dest='train_fraction', type=float)
    pipeline.add_argument('--log', nargs='?', const='', default=None, metavar='PATH',
                          help='JSON-lines metrics file (no value: metrics.jsonl in the output dir)')

    synth = subparsers.add_parser('synth', parents=[common], help='write a synthetic dataset')
    synth.add_argument('--classes', type=int)
    synth.add_argument('--slides-per-class', dest='slides_per_class', type=int)
    synth.add_argument('--min-tiles', dest='min_tiles', type=int)
    synth.add_argument('--max-tiles', dest='max_tiles', type=int)
    synth.add_argument('--input-dim', dest='input_dim', type=int)
    synth.add_argument('--signal-fraction', dest='signal_fraction', type=float)
    synth.add_argument('--signal-scale', dest='signal_scale', type=float)
    synth.add_argument('--noise-scale', dest='noise_scale', type=float)
    synth.add_argument('--report-dim', dest='report_dim', type=int)
    synth.add_argument('--report-noise', dest='report_noise', type=float)
    synth.add_argument('--report-fraction', dest='report_fraction', type=float)

    subparsers.add_parser('prepare', parents=[pipeline], help='fill the memory bank and build the codebook')

    train = subparsers.add_parser('train', parents=[pipeline], help='staged training on the train split')
    train.add_argument('--resume', action='store_true', help='continue from the last checkpoint')

    evaluate = subparsers.add_parser('eval', parents=[pipeline], help='score a checkpoint')
    evaluate.add_argument('--split', choices=('test', 'train', 'all'), default='test')

    encode = subparsers.add_parser('encode', parents=[pipeline], help='write VLAD descriptors of every slide')
    encode.add_argument('--split', choices=('test', 'train', 'all'), default='all')

    ablate = subparsers.add_parser('ablate', parents=[pipeline], help='sweep the ablation axes')
    ablate.add_argument('--axis', dest='axes', action='append', default=[], metavar='KEY=V1,V2',
                        help=f"one of {', '.join(ablation.AXES)} with its values (repeatable)")
    ablate.add_argument('--seeds', default='0', help='comma-separated seeds')

    subparsers.add_parser('check', parents=[common], help='run the built-in self-checks')
    subparsers.add_parser('status', parents=[common], help='list the artifacts of an output directory')
    return parser


# --------------------------------------------------
# Resolution
# --------------------------------------------------

def parse_settings(settings: Sequence[str]) -> Dict[str, str]:
    pairs = {}
    for item in settings:
        if '=' not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split('=', 1)
        pairs[key.strip()] = value.strip()
    return pairs


def resolve(args: argparse.Namespace, environ: Optional[Mapping[str, str]] = None) -> RunContext:
    """Config file, then environment, then flags; raises ConfigError on any bad value"""
    overrides: Dict[str, object] = parse_settings(args.settings)
    for dest, key in _RUN_FLAGS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = value

    run = ConfigLoader(args.config, environ).resolve(overrides)
    context = RunContext(run, ArtifactStore(run.output_dir))

    if args.command == 'synth':
        values = {name: getattr(args, dest) for dest, name in _SYNTH_FLAGS.items()
                  if getattr(args, dest) is not None}
        context.synthetic = SyntheticSpec(seed=run.seed, **values).validate()
    elif args.command == 'ablate':
        context.axes = parse_axes(args.axes)
        try:
            context.seeds = [int(s) for s in str(args.seeds).split(',') if s.strip()]
        except ValueError:
            raise ConfigError(f"--seeds expects comma-separated integers, got {args.seeds!r}") from None
    return context


def parse_axes(items: Sequence[str]) -> Dict[str, List]:
    if not items:
        return {'k': [32, 64, 128, 256], 'tiles_per_slide': [10, 20, 30]}
    index = RunConfig.key_index()
    axes = {}
    for item in items:
        if '=' not in item:
            raise ConfigError(f"--axis expects KEY=V1,V2, got {item!r}")
        key, raw = item.split('=', 1)
        key = key.strip()
        if key not in ablation.AXES:
            raise ConfigError(f"unknown ablation axis {key!r}; expected one of {ablation.AXES}")
        _, default = index[key]
        axes[key] = [coerce(key, v.strip(), default) for v in raw.split(',') if v.strip()]
    return axes


# --------------------------------------------------
# Commands
# --------------------------------------------------

def _dataset(run: RunConfig) -> Dataset:
    """--manifest if given, else the one synth wrote into the output directory"""
    if run.manifest:
        return load_manifest(run.manifest)
    local = run.output_path / MANIFEST_NAME
    if not local.exists():
        raise MissingArtifactError(local, Config.PRODUCERS['manifest'])
    return load_manifest(local)


def _select(dataset: Dataset, run: RunConfig, which: str) -> Dataset:
    if which == 'all':
        return dataset
    train_set, test_set = split(dataset, run.train.train_fraction, run.seed, run.train.reports_to_train)
    return train_set if which == 'train' else test_set


def _metrics_writer(args: argparse.Namespace, store: ArtifactStore) -> MetricsLogWriter:
    if args.log is None:
        return MetricsLogWriter(stream=sys.stdout)
    return MetricsLogWriter(path=args.log or store.path('metrics'))


def _trained_run(context: RunContext, args: argparse.Namespace) -> RunConfig:
    """The training run's echoed config, pointed at this invocation's directories"""
    payload = checkpoint.load(context.store.path('checkpoint'))
    run = ConfigLoader.from_text(payload.config_echo)
    run.output_dir = context.run.output_dir
    if args.manifest:
        run.manifest = args.manifest
    return run


def cmd_synth(context: RunContext, args: argparse.Namespace) -> int:
    dataset = generate(context.synthetic)
    manifest = write_dataset(dataset, context.store.output_dir)
    logger.info("synth_done manifest=%s slides=%d", manifest, len(dataset))
    return EXIT_OK


def cmd_prepare(context: RunContext, args: argparse.Namespace) -> int:
    run, store = context.run, context.store
    dataset = _dataset(run)
    bank, codebook = trainer.prepare(dataset, run)

    store.write_text('run_config', run.to_text())
    bank.save(store.path('bank'))
    save_codebook(codebook, store.path('codebook'))
    logger.info("prepare_done output_dir=%s kmeans_iters=%d inertia=%.6f",
                store.output_dir, codebook.kmeans_iters_run, codebook.final_inertia)
    return EXIT_OK


def cmd_train(context: RunContext, args: argparse.Namespace) -> int:
    run, store = context.run, context.store
    paths = store.require('bank', 'codebook')
    if args.resume:
        store.require('checkpoint', 'checkpoint_bank')

    dataset = _dataset(run)
    train_set = _select(dataset, run, 'train')
    codebook = load_codebook(paths['codebook'], expected_dim=run.encoder.feature_dim)

    state = None
    if args.resume:
        state = trainer.load_state(store.path('checkpoint'), run, trainer.model_dims(run, train_set))
        bank = MemoryBank.load(store.path('checkpoint_bank'))
    else:
        bank = MemoryBank.load(paths['bank'])

    store.write_text('run_config', run.to_text())
    writer = _metrics_writer(args, store)

    def on_epoch(report, state):
        writer.write(report.record())
        bank.save(store.path('checkpoint_bank'))
        trainer.save_state(state, run, store.path('checkpoint'))

    fit = trainer.Trainer(run, train_set, bank, codebook, state)
    reports = fit.fit(on_epoch)
    if not reports:
        logger.info("train_nothing_to_do epoch=%d epochs=%d", fit.state.epoch, run.train.epochs)
    return EXIT_OK


def cmd_eval(context: RunContext, args: argparse.Namespace) -> int:
    store = context.store
    store.require('checkpoint', 'codebook')
    if args.seed is not None:
        logger.warning("eval is deterministic; --seed %d ignored", args.seed)

    run = _trained_run(context, args)
    dataset = _select(_dataset(run), run, args.split)
    state = trainer.load_state(store.path('checkpoint'), run, trainer.model_dims(run, dataset))
    codebook = load_codebook(store.path('codebook'), expected_dim=run.encoder.feature_dim)

    result = trainer.evaluate(state, codebook, dataset, run)
    write_evaluation(store.path('evaluation'), result, run.to_text())
    logger.info("eval_done split=%s auc=%.4f weighted_f1=%.4f", args.split, result.auc, result.weighted_f1)
    return EXIT_OK


def cmd_encode(context: RunContext, args: argparse.Namespace) -> int:
    store = context.store
    store.require('checkpoint', 'codebook')

    run = _trained_run(context, args)
    dataset = _select(_dataset(run), run, args.split)
    state = trainer.load_state(store.path('checkpoint'), run, trainer.model_dims(run, dataset))
    codebook = load_codebook(store.path('codebook'), expected_dim=run.encoder.feature_dim)

    descriptors = trainer.slide_descriptors(state, codebook, dataset, run)
    vlad.save_descriptors(store.path('descriptors'), codebook.k, codebook.dim, descriptors)
    return EXIT_OK


def cmd_ablate(context: RunContext, args: argparse.Namespace) -> int:
    run, store = context.run, context.store
    dataset = _dataset(run)
    frame = ablation.sweep(run, dataset, context.axes, context.seeds)

    store.write_text('run_config', run.to_text())
    ablation.write_table(frame, store.path('ablation'))
    if args.log is not None:
        atomic_write_text(args.log or store.path('metrics'), frame.to_json(orient='records', lines=True))
    logger.info("ablate_done cells=%d path=%s", len(frame), store.path('ablation'))
    return EXIT_OK


def cmd_check(context: RunContext, args: argparse.Namespace) -> int:
    results = DebugTools.run_comprehensive_test(seed=context.run.seed)
    for line in summary_lines(results):
        print(line)
    summary = results['summary']
    logger.info("check_done passed=%d failed=%d", summary['passed'], summary['failed'])
    return EXIT_OK if summary['failed'] == 0 else EXIT_RUNTIME


def cmd_status(context: RunContext, args: argparse.Namespace) -> int:
    inventory = context.store.get_inventory()
    inventory['missing'] = context.store.missing()
    print(json.dumps(inventory, indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    'synth': cmd_synth,
    'prepare': cmd_prepare,
    'train': cmd_train,
    'eval': cmd_eval,
    'encode': cmd_encode,
    'ablate': cmd_ablate,
    'check': cmd_check,
    'status': cmd_status,
}


def main(argv: Optional[Sequence[str]] = None, environ: Optional[Mapping[str, str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        configure_logging(environ)
        context = resolve(args, environ)
    except ConfigError as e:
        print(f"drsl {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE

    try:
        return COMMANDS[args.command](context, args)
    except DrslError as e:
        logger.error("%s_failed error=%s", args.command, e)
        return EXIT_RUNTIME
    except OSError as e:
        logger.error("%s_failed io_error=%s", args.command, e)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
