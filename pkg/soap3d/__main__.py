# Copyright (c) 2024 The soap3d developers
# Released under the MIT license, see LICENSE.

import os
import sys
import json
import logging
import argparse

import numpy as np

from . import common
from .common import Soap3dException, ArgumentException, ensure_dir
from .config import RunConfig
from .dataset import open_dataset, write_dataset, write_submaps
from .geom import random_downsample, voxelize
from .localfeat import extract_local_features, save_features
from .head import StageFlags, save_checkpoint, load_checkpoint
from .synthgen import OrchardSpec, generate_orchard
from .trainer import (OptimizerState, train_sequences, write_training_log,
                      optimizer_path, save_optimizer_state,
                      load_optimizer_state)
from .retrieval import (build_db, compute_descriptors, cross_validate,
                        default_sweep_radii, evaluate_descriptors,
                        load_descriptors, protocol_queries, save_descriptors,
                        segment_sweep)

MINIMUM_PYTHON_VERSION = (3, 7)

log = logging.getLogger('soap3d.main')

CHECKPOINT_NAME = 'head.soapm'

# Head variants compared by `ablate`, in report order.
ABLATION_VARIANTS = (
    StageFlags(use_log=False, use_pn=False, use_fc=False),
    StageFlags(use_log=False, use_pn=False, use_fc=True),
    StageFlags(use_log=True, use_pn=False, use_fc=True),
    StageFlags(use_log=True, use_pn=True, use_fc=True),
    StageFlags(use_log=False, use_pn=True, use_fc=True, pooling='max'),
)


def commonArgs():
    LogLevelNames = [n.lower() for n in logging._nameToLevel]

    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("-c", "--config", default=None,
                        help="configuration file of [section] key = value "
                        "lines.")
    parser.add_argument("-o", "--option", default=[], action='append',
                        metavar="SECTION.KEY=VALUE",
                        help="overrides one configuration value, may be "
                        "repeated.")
    parser.add_argument("--seed", type=int, default=None,
                        help="root seed, overrides 'run.seed'.")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads, overrides 'run.threads'. "
                        "'--threads 1' is bit-reproducible.")
    parser.add_argument("--out", default=None,
                        help="output directory.")
    parser.add_argument("--no-log",
                        action="store_true", default=False,
                        help="if set, don't customize the 'soap3d' logger.")
    parser.add_argument("-f", "--logfile", action="store_true", default=False,
                        help="creates a log file for this run.")
    parser.add_argument("--logfilename",
                        help="file name of the log file, defaults to the "
                        "current date and time.")
    parser.add_argument("-L", "--logconsolelevel",
                        choices=LogLevelNames, default="info",
                        help="severity level of logging messages to print to "
                        "the console, defaults to 'info'.")
    parser.add_argument("-F", "--logfilelevel",
                        choices=LogLevelNames, default="debug",
                        help="severity level of logging messages to log to "
                        "the log file, defaults to 'debug'.")
    return parser

def parseArgs(argv=None):
    common_parser = commonArgs()
    parser = argparse.ArgumentParser(prog='soap3d', fromfile_prefix_chars='@')
    parser.add_argument("-v", "--version", action="version",
                        version=common.__version__)
    sub = parser.add_subparsers(dest='command', metavar='COMMAND')

    def command(name, func, helptext):
        p = sub.add_parser(name, parents=[common_parser], help=helptext,
                           description=helptext)
        p.set_defaults(func=func)
        return p

    p = command('gen-synth', cmd_gen_synth,
                "generate synthetic orchard sequences.")
    p.add_argument("--sequences", type=int, default=1,
                   help="number of sequences; more than one writes "
                   "OUT/seq_00, OUT/seq_01, ...")

    p = command('extract', cmd_extract,
                "downsample, voxelize and extract local features of every "
                "scan.")
    p.add_argument("datasets", nargs='+')

    p = command('submaps', cmd_submaps,
                "merge consecutive scans of a dataset into sub-maps.")
    p.add_argument("dataset")
    p.add_argument("--positions", default=None, metavar="POSES",
                   help="poses CSV of the positioning source; defaults to "
                   "the dataset's own poses.")

    p = command('train', cmd_train, "train the head on one or more datasets.")
    p.add_argument("datasets", nargs='+')
    p.add_argument("--resume", default=None, metavar="CHECKPOINT",
                   help="continue training from a checkpoint and its "
                   "optimizer state.")

    for name, func, helptext in (
            ('eval', cmd_eval, "fixed-radius recall of a trained head."),
            ('sweep', cmd_sweep, "recall over a range of acceptance radii.")):
        p = command(name, func, helptext)
        p.add_argument("dataset")
        group = p.add_mutually_exclusive_group()
        group.add_argument("--checkpoint", default=None,
                           help="head checkpoint; an untrained head is used "
                           "if neither this nor '--descriptors' is given.")
        group.add_argument("--descriptors", default=None,
                           help="score descriptors from a SOAPD file instead "
                           "of computing them.")
        if name == 'eval':
            p.add_argument("--save-descriptors", action='store_true',
                           default=False,
                           help="also write the computed descriptors.")

    p = command('ablate', cmd_ablate,
                "compare the pool, FC, FC+LOG and FC+LOG+PN heads against "
                "second-order max pooling (max+FC+PN).")
    p.add_argument("datasets", nargs='+')

    p = command('crossval', cmd_crossval, "leave-one-out cross-validation.")
    p.add_argument("datasets", nargs='+')

    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage()
        return 1
    return args

####################
# Helpers

def _resolve_config(args):
    return RunConfig.load(args.config, args.option, seed=args.seed,
                          threads=args.threads)

def _out_dir(args, default):
    return ensure_dir(args.out or default)

def _write_json(path, obj):
    with open(path, 'w') as fd:
        json.dump(obj, fd, indent=2, sort_keys=True)

def _echo(cfg, args, **extra):
    echo = {'command': args.command, 'version': common.__version__,
            'config': cfg.as_dict()}
    echo.update(extra)
    return echo

def _load_sequences(paths, cfg):
    sequences = []
    for path in paths:
        ds = open_dataset(path, cfg.pipeline.scan_format)
        features = ds.load_features(cfg.pipeline.standardize_imported)
        sequences.append((ds.name, ds.records, features))
    dims = {fs.c for _, _, features in sequences for fs in features.values()}
    if len(dims) != 1:
        raise ArgumentException(
            "feature dimensions differ across scans: {}".format(sorted(dims)))
    names = [name for name, _, _ in sequences]
    if len(set(names)) != len(names):
        raise ArgumentException("dataset directory names must be unique: "
                                "{}".format(names))
    return sequences, dims.pop()

def _train_variant(cfg, sequences, c, flags):
    params = cfg.head.initial_params(c, flags)
    params, _ = train_sequences([(r, f) for _, r, f in sequences], cfg.train,
                                params, eps=cfg.head.eps)
    return params

def _head_for_eval(args, cfg, c):
    if args.checkpoint is not None:
        params = load_checkpoint(args.checkpoint)
        if params.c != c:
            raise ArgumentException(
                "checkpoint expects c={} features, dataset has c={}".format(
                    params.c, c))
        return params
    log.warning("No checkpoint given: evaluating an untrained head.")
    return cfg.head.initial_params(c)

def _descriptors_for(args, cfg, sequence, c):
    if args.descriptors is not None:
        return load_descriptors(args.descriptors)
    _, _, features = sequence
    return compute_descriptors(features, _head_for_eval(args, cfg, c),
                               cfg.head.eps)

####################
# Commands

def cmd_gen_synth(args, cfg):
    if args.sequences < 1:
        raise ArgumentException("--sequences must be >= 1")
    out = _out_dir(args, 'synth')
    for i in range(args.sequences):
        spec = cfg.synth
        root = out
        if args.sequences > 1:
            spec = OrchardSpec(**dict(spec.as_dict(), seed=common.derive_seed(
                spec.seed, "sequence-{}".format(i))))
            root = os.path.join(out, "seq_{:02d}".format(i))
        scans, records = generate_orchard(spec)
        write_dataset(root, scans, records, cfg.pipeline.scan_format)
        _write_json(os.path.join(root, 'synth.json'),
                    _echo(cfg, args, synth=spec.as_dict()))
    return 0

def cmd_extract(args, cfg):
    pc = cfg.pipeline
    for path in args.datasets:
        ds = open_dataset(path, pc.scan_format)
        ensure_dir(ds.feature_dir())

        def extract(record):
            cloud = ds.load_scan(record.scan_id)
            cloud = random_downsample(cloud, pc.downsample_points,
                                      pc.scan_seed(record.scan_id))
            voxels = voxelize(cloud, pc.grid_size)
            fs = extract_local_features(voxels, pc.k_neighbors, pc.feature_dim,
                                        record.scan_id)
            save_features(fs, ds.feature_path(record.scan_id))
            return len(fs)

        counts = common.parallel_map(extract, ds.records)
        log.info("%s: extracted features of %d scans (%.1f voxels per scan).",
                 ds.name, len(counts), float(np.mean(counts)))
    return 0

def cmd_submaps(args, cfg):
    pc = cfg.pipeline
    ds = open_dataset(args.dataset, pc.scan_format)
    out = args.out or os.path.normpath(args.dataset) + '_submaps'
    write_submaps(ds, out, pc.submap_window, pc.submap_stride,
                  args.positions)
    return 0

def cmd_train(args, cfg):
    out = _out_dir(args, 'out')
    sequences, c = _load_sequences(args.datasets, cfg)
    checkpoint = os.path.join(out, CHECKPOINT_NAME)
    if args.resume is not None:
        params = load_checkpoint(args.resume)
        if params.c != c:
            raise ArgumentException(
                "{}: checkpoint expects c={} features, data has c={}".format(
                    args.resume, params.c, c))
        if os.path.exists(optimizer_path(args.resume)):
            state = load_optimizer_state(optimizer_path(args.resume), params)
        else:
            log.warning("%s has no optimizer state; moments start at zero.",
                        args.resume)
            state = OptimizerState.for_params(params)
        log.info("Resuming after epoch %d, step %d.", state.epoch, state.step)
    else:
        params = cfg.head.initial_params(c)
        state = OptimizerState.for_params(params)
    echo = _echo(cfg, args, datasets=list(args.datasets), resume=args.resume)

    def on_epoch_end(epoch, p, st):
        save_checkpoint(p, checkpoint, cfg.flat())
        save_optimizer_state(st, p, optimizer_path(checkpoint))

    params, training_log = train_sequences(
        [(r, f) for _, r, f in sequences], cfg.train, params, state,
        cfg.head.eps, on_epoch_end)
    save_checkpoint(params, checkpoint, cfg.flat())
    save_optimizer_state(training_log.optimizer, params,
                         optimizer_path(checkpoint))
    write_training_log(training_log.rows, os.path.join(out, 'train_log.csv'))
    _write_json(os.path.join(out, 'train.json'), echo)
    log.info("Wrote %s.", checkpoint)
    return 0

def cmd_eval(args, cfg):
    out = _out_dir(args, 'out')
    sequences, c = _load_sequences([args.dataset], cfg)
    name, records, _ = sequences[0]
    descriptors = _descriptors_for(args, cfg, sequences[0], c)
    if args.save_descriptors and args.descriptors is None:
        save_descriptors(os.path.join(out, name + '.soapd'), descriptors)
    echo = _echo(cfg, args, dataset=args.dataset, checkpoint=args.checkpoint,
                 descriptors=args.descriptors)
    report = evaluate_descriptors(records, descriptors, cfg.eval, echo)
    report.to_json(os.path.join(out, 'report.json'))
    report.to_csv(os.path.join(out, 'report.csv'))
    for metric, value in report.recalls.items():
        print("{}\t{}\t{:.6f}".format(name, metric, value))
    return 0

def cmd_sweep(args, cfg):
    out = _out_dir(args, 'out')
    sequences, c = _load_sequences([args.dataset], cfg)
    _, records, _ = sequences[0]
    db = build_db(_descriptors_for(args, cfg, sequences[0], c), records)
    radii = cfg.eval.sweep_radii or default_sweep_radii(records)
    points = segment_sweep(db, protocol_queries(db, cfg.eval),
                           cfg.eval.sweep_k, radii)
    overall = [p for p in points if p.segment_id is None]
    with open(os.path.join(out, 'sweep.csv'), 'w') as fd:
        fd.write("k,r_th,recall,eligible\n")
        for p in overall:
            fd.write("{},{!r},{},{}\n".format(
                p.k, p.r_th, '' if p.recall is None else repr(p.recall),
                p.eligible))
    _write_json(os.path.join(out, 'sweep.json'),
                {'config': _echo(cfg, args, dataset=args.dataset,
                                 checkpoint=args.checkpoint,
                                 descriptors=args.descriptors),
                 'points': [p._asdict() for p in points]})
    return 0

def cmd_ablate(args, cfg):
    out = _out_dir(args, 'out')
    sequences, c = _load_sequences(args.datasets, cfg)
    rows = []
    for flags in ABLATION_VARIANTS:
        log.info("Ablation variant %s.", flags.label)
        if len(sequences) >= 2:
            params = cfg.head.initial_params(c, flags)
            report = cross_validate(sequences, cfg.train, cfg.eval, params,
                                    cfg.head.eps)
            recalls = report.mean()
        else:
            name, records, features = sequences[0]
            params = _train_variant(cfg, sequences, c, flags)
            recalls = evaluate_descriptors(
                records, compute_descriptors(features, params, cfg.head.eps),
                cfg.eval).recalls
        rows.append((flags.label, recalls))
    metrics = list(rows[0][1])
    with open(os.path.join(out, 'ablation.csv'), 'w') as fd:
        fd.write(",".join(['variant'] + metrics) + "\n")
        for label, recalls in rows:
            fd.write(",".join([label] + [repr(recalls[m]) for m in metrics])
                     + "\n")
    _write_json(os.path.join(out, 'ablation.json'),
                {'config': _echo(cfg, args, datasets=list(args.datasets)),
                 'rows': [dict(variant=label, **recalls)
                          for label, recalls in rows]})
    return 0

def cmd_crossval(args, cfg):
    out = _out_dir(args, 'out')
    sequences, c = _load_sequences(args.datasets, cfg)
    echo = _echo(cfg, args, datasets=list(args.datasets))
    report = cross_validate(sequences, cfg.train, cfg.eval,
                            cfg.head.initial_params(c), cfg.head.eps, echo)
    report.to_json(os.path.join(out, 'crossval.json'))
    report.to_csv(os.path.join(out, 'crossval.csv'))
    for name, recalls in report.table():
        print("\t".join([name] + ["{}={:.6f}".format(m, v)
                                  for m, v in recalls.items()]))
    return 0

####################

def libmain(argv=None):
    """Main program entry point.

    Parses command line options, sets up logging and runtime options, and
    runs the selected command.

    """
    if sys.version_info < MINIMUM_PYTHON_VERSION:
        die("soap3d requires Python version {} or newer."
            .format(MINIMUM_PYTHON_VERSION))

    args = parseArgs(argv)
    if isinstance(args, int):
        return args
    try:
        cfg = _resolve_config(args)
        options = dict(args.__dict__)
        options['threads'] = cfg.run.threads
        common.global_init(options)
        return args.func(args, cfg)
    except (Soap3dException, OSError) as e:
        die("error: {}: {}".format(type(e).__name__, e))

def die(mesg=None):
    if mesg is not None:
        sys.stderr.write(mesg + "\n")
    sys.exit(10)

if __name__ == '__main__':
    sys.exit(libmain())
