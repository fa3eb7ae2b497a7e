"""Command-line entry point: ``clcap {gen-data,train,eval,nce-demo,compare}``.

Every command writes its artifacts under ``--out DIR`` together with
``manifest.json`` (resolved config, its SHA-256, seed, library versions
and output digests) and ``config.json``, which can be passed back through
``--config`` to rerun the command. Config files hold flag values keyed by
their long names (``lr``, ``distinct_rate`` ...), either as a JSON object
or as ``key=value`` lines; flags given on the command line win.

Exit codes: 0 success, 2 usage or config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .checkpoint import CheckpointError
from .corpus import DEFAULT_MAX_LEN, DEFAULT_MIN_COUNT, Vocabulary, generate_synthetic, load_dataset
from .evaluation import DEFAULT_KS, canonical_json, compare_reports, evaluate, write_score_csv
from .nce import NceProblem, nce_fit, total_variation
from .objectives import CONTRASTIVE, OBJECTIVES
from .scorer import ScorerParams, num_threads
from .train import (NumericalError, TrainConfig, load_checkpoint, load_params, read_header,
                    save_checkpoint, save_params, train)

logger = logging.getLogger("clcap")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
TRAIN_FILE, VAL_FILE, VOCAB_FILE = "train.jsonl", "val.jsonl", "vocab.json"
MODEL_FILE, STATE_FILE, HISTORY_FILE = "model.ckpt", "state.ckpt", "history.jsonl"
# keys that describe where to write, not what to compute
_NOT_CONFIG = {"command", "config", "out", "threads", "func"}


class UsageError(Exception):
    pass


# -- argument types ----------------------------------------------------------

def _bounded(kind, lo=None, hi=None, lo_open=False):
    def parse(text):
        try:
            value = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid {kind.__name__} value: {text!r}")
        if lo is not None and (value < lo or (lo_open and value == lo)):
            raise argparse.ArgumentTypeError(f"must be {'>' if lo_open else '>='} {lo}, got {value}")
        if hi is not None and value > hi:
            raise argparse.ArgumentTypeError(f"must be <= {hi}, got {value}")
        return value
    parse.__name__ = kind.__name__
    return parse


def _int_list(text):
    try:
        values = [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("ks must be positive integers")
    return values


def _prob_list(text):
    try:
        values = [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if len(values) < 2 or min(values) < 0 or sum(values) <= 0:
        raise argparse.ArgumentTypeError("need >= 2 non-negative weights with a positive sum")
    return values


positive_int = _bounded(int, 1)
nonneg_int = _bounded(int, 0)
positive_float = _bounded(float, 0.0, lo_open=True)
nonneg_float = _bounded(float, 0.0)
unit_float = _bounded(float, 0.0, 1.0)


# -- parser --------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--out", type=Path, required=out_required, default=None, help="output directory")
    p.add_argument("--config", type=Path, default=None, help="JSON or key=value file of flag values")
    p.add_argument("--threads", type=positive_int, default=1, help="worker threads for scoring")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="clcap", description=__doc__.split("\n")[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"clcap {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic captioned-image dataset", formatter_class=fmt)
    _common(p)
    p.add_argument("--images", type=positive_int, default=200, help="total number of images")
    p.add_argument("--attrs", type=positive_int, default=8, help="binary attributes per image")
    p.add_argument("--captions", type=positive_int, default=5, help="captions per image")
    p.add_argument("--distinct-rate", type=unit_float, default=0.8,
                   help="probability that a caption names the image's attributes")
    p.add_argument("--val-images", type=nonneg_int, default=50, help="images held out as the validation split")
    p.add_argument("--min-count", type=positive_int, default=1, help="vocabulary frequency threshold")
    p.add_argument("--max-len", type=positive_int, default=DEFAULT_MAX_LEN, help="caption truncation length")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a caption scorer", formatter_class=fmt)
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="directory written by gen-data")
    p.add_argument("--objective", choices=sorted(set(OBJECTIVES) | {o.replace("_", "-") for o in OBJECTIVES}),
                   default="mle", help="training objective")
    p.add_argument("--init", type=Path, default=None, help="starting checkpoint (required for CL objectives)")
    p.add_argument("--reference", type=Path, default=None, help="reference checkpoint; falls back to --init")
    p.add_argument("--resume", type=Path, default=None, help="training-state checkpoint to continue")
    p.add_argument("--hidden", type=positive_int, default=16, help="hidden width for a fresh model")
    p.add_argument("--init-scale", type=positive_float, default=0.1, help="uniform init half-width")
    p.add_argument("--lr", type=nonneg_float, default=1e-3, help="Adam learning rate")
    p.add_argument("--beta1", type=unit_float, default=0.9, help="Adam first-moment decay")
    p.add_argument("--beta2", type=unit_float, default=0.999, help="Adam second-moment decay")
    p.add_argument("--eps", type=positive_float, default=1e-8, help="Adam epsilon")
    p.add_argument("--batch-size", type=positive_int, default=64, help="positive pairs per minibatch")
    p.add_argument("--epochs", type=nonneg_int, default=50, help="maximum epochs")
    p.add_argument("--patience", type=positive_int, default=5, help="epochs without improvement before stopping")
    p.add_argument("--min-delta", type=nonneg_float, default=1e-4, help="smallest counted improvement")
    p.add_argument("--K", type=positive_int, default=5, help="negative replicas per positive")
    p.add_argument("--nu", type=positive_float, default=1.0, help="noise-to-data ratio in the saturation")
    p.add_argument("--reference-replacement", choices=["off", "every_saturation"], default="off",
                   help="replace the reference with the best target on saturation")
    p.add_argument("--max-runs", type=positive_int, default=2, help="runs when replacement is on")
    p.add_argument("--grad-clip", type=positive_float, default=None, help="clip gradient L2 norm")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--wall-time", action="store_true", help="record epoch wall time (breaks byte determinism)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="self-retrieval and caption metrics", formatter_class=fmt)
    _common(p, out_required=False)
    p.add_argument("--model", type=Path, default=None, help="checkpoint to evaluate")
    p.add_argument("--data", type=Path, default=None, help="directory written by gen-data")
    p.add_argument("--split", choices=["train", "val"], default="val", help="which split to evaluate")
    p.add_argument("--ks", type=_int_list, default=list(DEFAULT_KS), help="recall cutoffs, comma-separated")
    p.add_argument("--beam", type=positive_int, default=1, help="beam width (1 = greedy)")
    p.add_argument("--max-len", type=positive_int, default=DEFAULT_MAX_LEN, help="generation length limit")
    p.add_argument("--length-norm", action="store_true", help="rank by per-token log-probability")
    p.add_argument("--scores-csv", action="store_true", help="also write the score matrix as CSV")
    p.add_argument("--compare", type=Path, nargs=2, metavar=("A", "B"), default=None,
                   help="print per-metric deltas B - A of two reports instead of evaluating")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("nce-demo", help="fit a discrete density by noise-contrastive estimation",
                       formatter_class=fmt)
    _common(p, out_required=False)
    p.add_argument("--true-p", type=_prob_list, default=[0.7, 0.3], help="data distribution weights")
    p.add_argument("--noise-p", type=_prob_list, default=None, help="noise weights; uniform when unset")
    p.add_argument("--samples", type=positive_int, default=10000, help="observed samples")
    p.add_argument("--noise-samples", type=positive_int, default=None, help="noise samples; same as --samples when unset")
    p.add_argument("--steps", type=positive_int, default=500, help="gradient ascent steps")
    p.add_argument("--lr", type=positive_float, default=1.0, help="step size on the per-sample objective")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.set_defaults(func=cmd_nce_demo)

    p = sub.add_parser("compare", help="per-metric deltas between two eval reports", formatter_class=fmt)
    p.add_argument("a", type=Path, help="baseline report")
    p.add_argument("b", type=Path, help="report to compare against the baseline")
    p.add_argument("--out", type=Path, default=None, help="also write the deltas to DIR/compare.json")
    p.add_argument("--threads", type=positive_int, default=1, help="accepted for uniformity; compare is serial")
    p.set_defaults(func=cmd_compare)
    return parser


def _read_config(path: Path) -> dict:
    text = path.read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        obj = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key=value")
            key, value = line.split("=", 1)
            obj[key.strip()] = value.strip()
    if not isinstance(obj, dict):
        raise UsageError(f"{path}: config must be a JSON object or key=value lines")
    return {k.replace("-", "_"): v for k, v in obj.items()}


def parse_args(argv, parser: argparse.ArgumentParser | None = None) -> argparse.Namespace:
    """Parse ``argv``, applying ``--config`` values underneath explicit flags."""
    parser = parser or build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None) is None:
        return args
    try:
        values = _read_config(args.config)
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}")
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in subparser._actions}
    unknown = sorted(set(values) - (set(actions) - _NOT_CONFIG))
    if unknown:
        raise UsageError(f"{args.config}: unknown config keys {unknown}")
    for key, value in values.items():
        subparser.set_defaults(**{key: _convert(actions[key], value, f"{args.config}: {key}")})
    return parser.parse_args(argv)


def _convert(action: argparse.Action, value, where: str):
    """Validate a config value with the same parser its flag uses."""
    if value is None:
        return None
    if isinstance(action, argparse._StoreTrueAction):
        if isinstance(value, str):
            value = value.strip().lower()
            if value not in ("true", "false", "1", "0"):
                raise UsageError(f"{where}: expected true or false")
            return value in ("true", "1")
        return bool(value)
    if isinstance(value, list):
        value = ",".join(map(str, value))
    try:
        converted = action.type(str(value)) if action.type else str(value)
    except (argparse.ArgumentTypeError, TypeError, ValueError) as exc:
        raise UsageError(f"{where}: {exc}")
    if action.choices is not None and converted not in action.choices:
        raise UsageError(f"{where}: invalid choice {converted!r}")
    return converted


# -- manifest ----------------------------------------------------------------

def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def resolved_config(args: argparse.Namespace) -> dict:
    return {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in _NOT_CONFIG and k != "verbose"}


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, args: argparse.Namespace, outputs: list[str]) -> None:
    config = resolved_config(args)
    config_text = json.dumps(config, sort_keys=True)
    (out / "config.json").write_text(json.dumps(config, sort_keys=True, indent=2) + "\n")
    import scipy
    import sklearn

    manifest = {
        "command": args.command,
        "config": config,
        "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
        "seed": config.get("seed"),
        "versions": {"clcap": __version__, "numpy": np.__version__, "python": platform.python_version(),
                     "scipy": scipy.__version__, "scikit-learn": sklearn.__version__},
        "outputs": {name: _sha256_file(out / name) for name in sorted(outputs)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _out_dir(args) -> Path:
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    return out


def _vocab_digest(vocab: Vocabulary) -> str:
    return hashlib.sha256(vocab.to_json().encode()).hexdigest()


def _load_split(data: Path, name: str):
    vocab = Vocabulary.load(data / VOCAB_FILE)
    return load_dataset(data / name, vocab), vocab


# -- commands ------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.val_images >= args.images:
        raise UsageError(f"--val-images ({args.val_images}) must be smaller than --images ({args.images})")
    ds = generate_synthetic(args.images, args.attrs, args.captions, args.distinct_rate, seed=args.seed,
                            min_count=args.min_count, max_len=args.max_len)
    out = _out_dir(args)
    outputs = [VOCAB_FILE]
    ds.vocab.save(out / VOCAB_FILE)
    if args.val_images:
        tr, va = ds.split(args.val_images)
        tr.save(out / TRAIN_FILE)
        va.save(out / VAL_FILE)
        outputs += [TRAIN_FILE, VAL_FILE]
    else:
        ds.save(out / TRAIN_FILE)
        outputs.append(TRAIN_FILE)
    write_manifest(out, args, outputs)
    n_caps = sum(len(it.captions) for it in ds.items)
    print(f"wrote {len(ds)} images ({len(ds) - args.val_images} train / {args.val_images} val), "
          f"{n_caps} captions, vocabulary {len(ds.vocab)} tokens, feature dim {ds.feature_dim} -> {out}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    return TrainConfig(objective=args.objective, learning_rate=args.lr, adam_beta1=args.beta1,
                       adam_beta2=args.beta2, adam_eps=args.eps, batch_size=args.batch_size,
                       max_epochs=args.epochs, patience=args.patience, min_delta=args.min_delta, K=args.K,
                       nu=args.nu, seed=args.seed, reference_replacement=args.reference_replacement,
                       max_runs=args.max_runs, grad_clip=args.grad_clip)


def _check_model_vocab(path: Path, vocab: Vocabulary) -> None:
    header = read_header(path)
    digest = header.get("vocab_sha256")
    if header["dims"]["V"] != len(vocab) or (digest is not None and digest != _vocab_digest(vocab)):
        raise UsageError(f"{path}: checkpoint vocabulary does not match the dataset vocabulary")


def cmd_train(args) -> int:
    config = _train_config(args)
    if config.objective in CONTRASTIVE + ("il",) and args.init is None and args.resume is None:
        raise UsageError(f"objective {args.objective} fine-tunes an MLE-pretrained model: "
                         f"train with --objective mle first and pass that checkpoint via --init")
    if args.reference is not None and not config.uses_reference:
        raise UsageError(f"--reference has no effect for objective {args.objective}")
    train_ds, vocab = _load_split(args.data, TRAIN_FILE)
    val_ds, _ = _load_split(args.data, VAL_FILE)
    expected = {"d": train_ds.feature_dim, "V": len(vocab)}

    state = None
    reference = None
    if args.resume is not None:
        _check_model_vocab(args.resume, vocab)
        state = load_checkpoint(args.resume, expected)
        init = state.target
    elif args.init is not None:
        _check_model_vocab(args.init, vocab)
        init = load_params(args.init, expected)
    else:
        init = ScorerParams.random(train_ds.feature_dim, args.hidden, len(vocab), seed=args.seed,
                                   scale=args.init_scale)
    if args.reference is not None:
        _check_model_vocab(args.reference, vocab)
        reference = load_params(args.reference, init.dims)

    out = _out_dir(args)
    extra = {"vocab_sha256": _vocab_digest(vocab)}
    history_path = out / HISTORY_FILE
    try:
        result = train(train_ds, val_ds, config, init, reference, state=state, wall_time=args.wall_time)
    except NumericalError as exc:
        save_checkpoint(exc.state, out / "abort_state.ckpt", config, extra)
        print(f"error: {exc}; diagnostic state written to {out / 'abort_state.ckpt'}", file=sys.stderr)
        return EXIT_NUMERIC
    with open(history_path, "w") as fh:
        for rec in result.history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    save_params(result.params, out / MODEL_FILE, seed=config.seed, objective=config.objective,
                step=result.state.step, extra=extra)
    save_checkpoint(result.state, out / STATE_FILE, config, extra)
    write_manifest(out, args, [MODEL_FILE, STATE_FILE, HISTORY_FILE])
    last = result.history[-1] if result.history else None
    summary = "no epochs run" if last is None else (
        f"{len(result.history)} epochs, final val_obj {last['val_obj']:.6f}, "
        f"best val_obj {-result.state.best_validation:.6f}")
    print(f"trained {config.objective}: {summary} -> {out}")
    return EXIT_OK


def _print_deltas(a_path: Path, b_path: Path, out: Path | None) -> int:
    try:
        a = json.loads(a_path.read_text())
        b = json.loads(b_path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"cannot parse report: {exc}")
    text = canonical_json(compare_reports(a, b))
    print(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.json").write_text(text + "\n")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.compare is not None:
        return _print_deltas(args.compare[0], args.compare[1], args.out)
    if args.model is None or args.data is None:
        raise UsageError("eval needs --model and --data (or --compare A B)")
    ds, vocab = _load_split(args.data, TRAIN_FILE if args.split == "train" else VAL_FILE)
    _check_model_vocab(args.model, vocab)
    try:
        params = load_params(args.model, {"d": ds.feature_dim, "V": len(vocab)})
    except CheckpointError as exc:
        raise UsageError(str(exc))
    report, scores = evaluate(params, ds, ks=args.ks, beam_width=args.beam, max_len=args.max_len,
                              length_norm=args.length_norm)
    text = report.to_json()
    print(text)
    if args.out is not None:
        out = _out_dir(args)
        (out / "report.json").write_text(text + "\n")
        outputs = ["report.json"]
        if args.scores_csv:
            write_score_csv(scores, out / "scores.csv", [it.image_id for it in ds.items])
            outputs.append("scores.csv")
        write_manifest(out, args, outputs)
    return EXIT_OK


def cmd_nce_demo(args) -> int:
    true_p = np.asarray(args.true_p) / sum(args.true_p)
    noise_p = np.full(true_p.size, 1.0 / true_p.size) if args.noise_p is None else np.asarray(args.noise_p)
    if noise_p.size != true_p.size:
        raise UsageError("--true-p and --noise-p need the same number of entries")
    problem = NceProblem.sample(true_p, noise_p, args.samples, args.noise_samples, seed=args.seed)
    model = nce_fit(problem, steps=args.steps, lr=args.lr)
    fitted = model.normalized()
    report = {
        "fitted": fitted.tolist(),
        "log_weights": model.log_weights.tolist(),
        "n_noise": int(problem.noise.size),
        "n_observed": int(problem.observed.size),
        "seed": args.seed,
        "steps": args.steps,
        "true": true_p.tolist(),
        "tv": total_variation(fitted, true_p),
    }
    text = canonical_json(report)
    print(text)
    if args.out is not None:
        out = _out_dir(args)
        (out / "nce_report.json").write_text(text + "\n")
        write_manifest(out, args, ["nce_report.json"])
    return EXIT_OK


def cmd_compare(args) -> int:
    return _print_deltas(args.a, args.b, args.out)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv, parser)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        # BLAS stays single-threaded; --threads only fans out the chunked scorer
        with threadpool_limits(limits=1), num_threads(getattr(args, "threads", 1)):
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
