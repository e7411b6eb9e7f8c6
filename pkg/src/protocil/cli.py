"""Single command-line entry point for the protocil toolchain.

Subcommands: gen-synth, split, train, baseline, diagnose, run, report.
A key=value config file (--config) supplies any flag of the active
subcommand; explicit flags win. Exit codes: 0 ok, 2 usage, 3 data,
4 numeric failure. PROTOCIL_THREADS caps numerical thread pools (0 = auto).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import __version__
from .errors import ConfigError, DataError, NumericError

log = logging.getLogger("protocil")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

# option names (underscore form) accepted per subcommand, used to validate
# config-file keys; filled while the parser is built
_KNOWN_KEYS = {}


def _apply_thread_cap():
    """Honor PROTOCIL_THREADS before numpy spins up its thread pools."""
    raw = os.environ.get("PROTOCIL_THREADS", "0")
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"PROTOCIL_THREADS must be an integer, got {raw!r}")
    if cap < 0:
        raise ConfigError(f"PROTOCIL_THREADS must be >= 0, got {cap}")
    if cap > 0:
        for var in (
            "OMP_NUM_THREADS",
            "OPENBLAS_NUM_THREADS",
            "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS",
        ):
            os.environ.setdefault(var, str(cap))


def _opt(sub, name, *args, **kwargs):
    _KNOWN_KEYS.setdefault(sub.prog.split()[-1], set()).add(
        name.lstrip("-").replace("-", "_")
    )
    sub.add_argument(name, *args, **kwargs)


def _common_train_opts(sub):
    _opt(sub, "--lr", type=float, default=0.1, help="initial learning rate")
    _opt(sub, "--momentum", type=float, default=0.9, help="SGD momentum")
    _opt(sub, "--epochs", type=int, default=160, help="epochs per phase")
    _opt(sub, "--batch", type=int, default=128, help="minibatch size")
    _opt(
        sub, "--lr-schedule", choices=("constant", "cosine"), default="cosine",
        help="learning-rate decay",
    )
    _opt(
        sub, "--eval-fraction", type=float, default=0.2,
        help="held-out fraction per class",
    )


def build_parser():
    parser = argparse.ArgumentParser(
        prog="protocil",
        description="Prototype-classifier toolkit for class-incremental "
        "learning over fixed embeddings.",
    )
    parser.add_argument("--version", action="version", version=f"protocil {__version__}")
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="log progress to stderr"
    )
    subs = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    gen = subs.add_parser(
        "gen-synth", formatter_class=fmt,
        help="generate a synthetic clustered FEATSET file",
    )
    _opt(gen, "--classes", type=int, required=True, help="number of classes")
    _opt(gen, "--dim", type=int, required=True, help="embedding dimension")
    _opt(gen, "--per-class", type=int, required=True, help="samples per class")
    _opt(gen, "--mean-scale", type=float, default=10.0, help="class-mean radius")
    _opt(gen, "--std", type=float, default=1.0, help="within-class std")
    _opt(gen, "--seed", type=int, default=0, help="generator seed")
    _opt(gen, "--out", required=True, help="output FEATSET path")
    gen.set_defaults(func=_cmd_gen_synth)

    spl = subs.add_parser(
        "split", formatter_class=fmt, help="split a feature set into CIL phases"
    )
    _opt(spl, "--input", required=True, help="FEATSET or CSV path")
    _opt(spl, "--phases", type=int, required=True, help="incremental phases T")
    _opt(
        spl, "--base-fraction", type=float, default=0.5,
        help="fraction of classes in the base phase",
    )
    _opt(spl, "--replay", type=int, default=0, help="exemplar budget R per class")
    _opt(
        spl, "--seed", type=int, default=None,
        help="permute class order (omit for ascending ids)",
    )
    _opt(spl, "--out", required=True, help="output stream JSON path")
    spl.set_defaults(func=_cmd_split)

    trn = subs.add_parser(
        "train", formatter_class=fmt,
        help="train the incremental prototype classifier over a stream",
    )
    _opt(trn, "--features", required=True, help="FEATSET or CSV path")
    _opt(trn, "--stream", required=True, help="stream JSON from `split`")
    _opt(trn, "--gamma", type=float, default=1.0, help="distance-softmax sharpness")
    _opt(trn, "--lambda", dest="pl_weight", type=float, default=0.3,
         help="prototype-pull weight")
    _opt(trn, "--seed", type=int, default=0, help="run seed")
    _common_train_opts(trn)
    _opt(trn, "--replay", type=int, default=None,
         help="override the stream's exemplar budget R")
    _opt(trn, "--checkpoint-out", required=True, help="classifier checkpoint path")
    _opt(trn, "--report-out", required=True, help="run report JSON path")
    trn.set_defaults(func=_cmd_train)

    base = subs.add_parser(
        "baseline", formatter_class=fmt, help="run a baseline classifier"
    )
    _opt(base, "--kind", choices=("linear", "cosine", "nme"), required=True,
         help="baseline head")
    _opt(base, "--features", required=True, help="FEATSET or CSV path")
    _opt(base, "--stream", required=True, help="stream JSON from `split`")
    _opt(base, "--replay", type=int, default=None,
         help="override the stream's exemplar budget R")
    _opt(base, "--seed", type=int, default=0, help="run seed")
    _common_train_opts(base)
    _opt(base, "--report-out", required=True, help="run report JSON path")
    base.set_defaults(func=_cmd_baseline)

    dia = subs.add_parser(
        "diagnose", formatter_class=fmt,
        help="emit spectrum, PC-ID and cosine-matrix reports",
    )
    _opt(dia, "--features", required=True, help="FEATSET or CSV path")
    _opt(dia, "--normalize", choices=("on", "off"), default="on",
         help="L2-normalize features before the covariance")
    _opt(dia, "--max-per-class", type=int, default=50,
         help="cosine-matrix subsample per class")
    _opt(dia, "--seed", type=int, default=0, help="subsample seed")
    _opt(dia, "--out-prefix", required=True, help="output file prefix")
    dia.set_defaults(func=_cmd_diagnose)

    run = subs.add_parser(
        "run", formatter_class=fmt, help="run one CIL experiment end to end"
    )
    _opt(run, "--features", required=True, help="FEATSET or CSV path")
    _opt(run, "--stream", required=True, help="stream JSON from `split`")
    _opt(run, "--method", choices=("ipc", "linear", "cosine", "nme"),
         required=True, help="classifier")
    _opt(run, "--replay", type=int, default=None,
         help="override the stream's exemplar budget R")
    _opt(run, "--gamma", type=float, default=1.0, help="distance-softmax sharpness")
    _opt(run, "--lambda", dest="pl_weight", type=float, default=0.3,
         help="prototype-pull weight")
    _opt(run, "--seed", type=int, default=0, help="run seed")
    _opt(run, "--normalize-features", choices=("on", "off"), default="off",
         help="L2-normalize features before classification")
    _common_train_opts(run)
    _opt(run, "--report", required=True, help="run report JSON path")
    run.set_defaults(func=_cmd_run)

    rep = subs.add_parser(
        "report", formatter_class=fmt,
        help="aggregate run reports into one CSV table",
    )
    _opt(rep, "--inputs", nargs="+", required=True, help="run report JSON files")
    _opt(rep, "--out", required=True, help="output CSV path")
    rep.set_defaults(func=_cmd_report)

    return parser


# ---------------------------------------------------------------------------
# config file: key=value lines, '#' comments; keys are flag names with
# underscores; explicit command-line flags override file values
# ---------------------------------------------------------------------------


def _load_config_entries(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}")
    entries = []
    for ln, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {ln} is not key=value: {line!r}")
        key, value = line.split("=", 1)
        entries.append((key.strip().replace("-", "_"), value.strip()))
    return entries


def _inject_config(argv):
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        raise ConfigError("--config requires a file path")
    path = argv[i + 1]
    argv = argv[:i] + argv[i + 2 :]
    command = next((a for a in argv if not a.startswith("-")), None)
    if command is None:
        raise ConfigError("--config given without a subcommand")
    known = _KNOWN_KEYS.get(command, set())
    injected = []
    for key, value in _load_config_entries(path):
        if key not in known:
            raise ConfigError(
                f"unknown config key {key!r} for subcommand {command!r}"
            )
        injected += ["--" + key.replace("_", "-"), value]
    pos = argv.index(command) + 1
    return argv[:pos] + injected + argv[pos:]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _load_features(path):
    from .featureset import load_featureset

    if not os.path.exists(path):
        raise DataError(f"feature file not found: {path}")
    return load_featureset(path)


def _load_stream(path):
    from .featureset import load_stream

    if not os.path.exists(path):
        raise DataError(f"stream file not found: {path}")
    return load_stream(path)


def _train_cfg(args):
    from .ipc import TrainConfig

    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        learning_rate=args.lr,
        momentum=args.momentum,
        lr_schedule=args.lr_schedule,
        seed=args.seed,
    )


def _cmd_gen_synth(args):
    from .featureset import SynthSpec, generate_synthetic, save_featureset

    spec = SynthSpec(
        class_count=args.classes,
        dim=args.dim,
        samples_per_class=args.per_class,
        mean_scale=args.mean_scale,
        within_std=args.std,
        seed=args.seed,
    )
    fs = generate_synthetic(spec)
    save_featureset(fs, args.out)
    log.info("wrote %s: %d samples, dim %d, %d classes",
             args.out, fs.n_samples, fs.dim, fs.class_count)
    return EXIT_OK


def _cmd_split(args):
    from .featureset import save_stream, split_tasks

    fs = _load_features(args.input)
    stream = split_tasks(
        fs, args.phases, args.base_fraction,
        memory_per_class=args.replay, seed=args.seed,
    )
    save_stream(stream, args.out)
    sizes = [len(p.classes) for p in stream.phases]
    log.info("wrote %s: phase class counts %s", args.out, sizes)
    return EXIT_OK


def _run_common(args, method, config_extra, fs=None):
    from .harness import run_cil

    gamma = getattr(args, "gamma", 1.0)
    pl_weight = getattr(args, "pl_weight", 0.3)
    if not gamma > 0:
        raise ConfigError(f"gamma must be > 0, got {gamma}")
    if pl_weight < 0:
        raise ConfigError(f"lambda must be >= 0, got {pl_weight}")
    if fs is None:
        fs = _load_features(args.features)
    stream = _load_stream(args.stream)
    report = run_cil(
        fs,
        stream,
        method,
        train_cfg=_train_cfg(args),
        gamma=gamma,
        pl_weight=pl_weight,
        eval_fraction=args.eval_fraction,
        seed=args.seed,
        memory_per_class=args.replay,
        normalize_features=getattr(args, "normalize_features", "off") == "on",
        config_extra=config_extra,
    )
    for p in report.phases:
        log.info("phase %d: classes %s, accuracy %.4f", p.t, list(p.classes), p.accuracy)
    log.info("average incremental accuracy: %.4f", report.average_accuracy)
    return report


def _cmd_train(args):
    from .harness import IpcAdapter
    from .ipc import save_classifier

    if not args.gamma > 0:
        raise ConfigError(f"gamma must be > 0, got {args.gamma}")
    if args.pl_weight < 0:
        raise ConfigError(f"lambda must be >= 0, got {args.pl_weight}")
    fs = _load_features(args.features)
    adapter = IpcAdapter(fs.dim, args.gamma, args.pl_weight)
    extra = {"features": args.features, "stream": args.stream}
    report = _run_common(args, adapter, extra, fs=fs)
    save_classifier(adapter.clf, args.checkpoint_out)
    report.save(args.report_out)
    log.info("wrote %s and %s", args.checkpoint_out, args.report_out)
    return EXIT_OK


def _cmd_baseline(args):
    extra = {"features": args.features, "stream": args.stream, "kind": args.kind}
    report = _run_common(args, args.kind, extra)
    report.save(args.report_out)
    return EXIT_OK


def _cmd_run(args):
    extra = {"features": args.features, "stream": args.stream}
    report = _run_common(args, args.method, extra)
    report.save(args.report)
    return EXIT_OK


def _cmd_diagnose(args):
    from .diagnostics import (
        cosine_matrix,
        covariance_spectrum,
        write_cosine_csv,
        write_pcid_json,
        write_spectrum_csv,
    )

    fs = _load_features(args.features)
    spectrum = covariance_spectrum(fs, normalize_features=args.normalize == "on")
    similarity = cosine_matrix(fs, args.max_per_class, seed=args.seed)
    write_spectrum_csv(spectrum, f"{args.out_prefix}.spectrum.csv")
    write_pcid_json(spectrum, f"{args.out_prefix}.pcid.json", __version__)
    write_cosine_csv(similarity, f"{args.out_prefix}.cosine.csv")
    log.info(
        "pc_id=%d (dim %d); cosine within=%.4f between=%.4f",
        spectrum.pc_id, spectrum.dim,
        similarity.within_mean, similarity.between_mean,
    )
    return EXIT_OK


def _cmd_report(args):
    from .harness import aggregate_reports

    for path in args.inputs:
        if not os.path.exists(path):
            raise DataError(f"report file not found: {path}")
    count = aggregate_reports(args.inputs, args.out)
    log.info("wrote %s with %d run(s)", args.out, count)
    return EXIT_OK


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_thread_cap()
        argv = _inject_config(argv)
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        return args.func(args)
    except ConfigError as exc:
        print(f"error[usage]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error[numeric]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
