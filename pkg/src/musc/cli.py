"""Command-line surface.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure,
3 selfcheck failure. Machine-readable TSV goes to stdout; prose to stderr.

Heavy imports happen inside command handlers so ``--threads`` can cap the
BLAS pools before numpy loads (default 1, for bit-reproducible runs).
"""

from __future__ import annotations

import argparse
import os
import sys

_THREAD_VARS = (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


class UsageError(Exception):
    """Bad flags or config contents; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; the contract reserves 2 for runtime
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# config file

_CONFIG_BOOLS = {"true": True, "false": False, "yes": True, "no": False, "1": True, "0": False}


def _as_bool(raw: str) -> bool:
    try:
        return _CONFIG_BOOLS[raw.lower()]
    except KeyError:
        raise ValueError(f"expected a boolean, got {raw!r}") from None


def _as_pair(raw: str) -> tuple[float, float]:
    parts = [p.strip() for p in raw.split(",")]
    if len(parts) != 2:
        raise ValueError(f"expected 'low,high', got {raw!r}")
    return (float(parts[0]), float(parts[1]))


# key -> (section, caster); sections: task, spec, train, derived
_CONFIG_KEYS = {
    "task": ("task", str),
    "size": ("task", int),
    "n_train": ("task", int),
    "n_val": ("task", int),
    "n_test": ("task", int),
    "data_seed": ("task", int),
    "streak_count": ("task", int),
    "streak_len": ("task", _as_pair),
    "streak_intensity": ("task", _as_pair),
    "sigma": ("task", float),
    "blur_sigma": ("task", float),
    "blur_factor": ("task", int),
    "scales": ("spec", int),
    "channels": ("spec", int),
    "bottom_conv": ("spec", _as_bool),
    "steps": ("train", int),
    "k_steps": ("train", int),
    "mode": ("train", str),
    "tie_dicts": ("train", _as_bool),
    "learn_lambda": ("train", _as_bool),
    "learn_eta": ("train", _as_bool),
    "weight_norm": ("train", _as_bool),
    "lambda_init": ("train", float),
    "optimizer": ("train", str),
    "lr": ("train", float),
    "batch_size": ("train", int),
    "seed": ("train", int),
    "eval_interval": ("train", int),
    "power_iters": ("train", int),
    "data_dir": ("train", str),
    "checkpoint": ("train", str),
}


def parse_config(text: str) -> dict[str, object]:
    """Parse a key=value document; unknown keys and bad values are errors."""
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise UsageError(f"config line {lineno}: expected key=value, got {line.rstrip()!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        if key in values:
            raise UsageError(f"config line {lineno}: duplicate key {key!r}")
        _, caster = _CONFIG_KEYS[key]
        try:
            values[key] = caster(raw)
        except ValueError as exc:
            raise UsageError(f"config line {lineno}: key {key!r}: {exc}") from None
    return values


def build_train_config(values: dict[str, object]):
    """Turn parsed config values into a TrainConfig (lazy heavy import)."""
    from .data import TaskSpec
    from .linops import ScaleSpec
    from .training import TrainConfig

    task_kwargs = {}
    spec_kwargs = {}
    train_kwargs = {}
    for key, value in values.items():
        section, _ = _CONFIG_KEYS[key]
        if section == "task":
            task_kwargs["seed" if key == "data_seed" else key] = value
        elif section == "spec":
            spec_kwargs[key] = value
        else:
            train_kwargs[key] = value
    try:
        task = TaskSpec(**task_kwargs)
        scales = spec_kwargs.pop("scales", 2)
        if task.size % (1 << scales):
            raise ValueError(f"size {task.size} not divisible by 2^{scales}")
        side = task.size >> scales
        spec = ScaleSpec(scales=scales, height=side, width=side, **spec_kwargs)
        return TrainConfig(spec=spec, task=task, **train_kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# commands


def _cmd_synth(args) -> int:
    from .data import TaskSpec, gen_corpus, input_psnr, save_corpus

    try:
        task = TaskSpec(
            task=args.task,
            size=args.size,
            n_train=args.n_train,
            n_val=args.n_val,
            n_test=args.n_test,
            seed=args.seed,
            sigma=args.sigma,
            streak_count=args.streak_count,
            blur_sigma=args.blur_sigma,
            blur_factor=args.blur_factor,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    corpora = gen_corpus(task)
    save_corpus(args.out, corpora, task)
    for split in ("train", "val", "test"):
        print(
            f"{split}: {len(corpora[split])} samples, input psnr "
            f"{input_psnr(corpora[split]):.2f} dB",
            file=sys.stderr,
        )
    print(f"corpus written to {args.out}", file=sys.stderr)
    return 0


def _cmd_train(args) -> int:
    from .training import metrics_tsv, train_loop

    values: dict[str, object] = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            values = parse_config(fh.read())
    if args.seed is not None:
        values["seed"] = args.seed
    if args.out:
        values["checkpoint"] = args.out
    cfg = build_train_config(values)
    from .kernels import backend

    print(
        f"training {cfg.steps} steps on {cfg.task.task} ({cfg.task.size}x{cfg.task.size}), "
        f"backend {backend()}",
        file=sys.stderr,
    )
    result = train_loop(cfg)
    sys.stdout.write(metrics_tsv(result.metrics))
    final = result.metrics[-1]
    print(f"final val psnr {final.val_psnr:.2f} dB", file=sys.stderr)
    if cfg.checkpoint:
        print(f"checkpoint written to {cfg.checkpoint}", file=sys.stderr)
    return 0


def _cmd_reconstruct(args) -> int:
    from .model import load_checkpoint
    from .tensor import export_pgm, read_ntf, write_ntf
    from .training import predict

    model = load_checkpoint(args.model)
    img = read_ntf(args.input)
    if img.ndim == 2:
        img = img[None]
    want = model.spec.image_shape()
    if img.shape != want:
        raise ValueError(f"input image has shape {img.shape}, model expects {want}")
    pred = predict(model, img[None])[0]
    write_ntf(args.output, pred)
    print(f"reconstruction written to {args.output}", file=sys.stderr)
    if args.pgm:
        export_pgm(pred[0], args.pgm)
        print(f"preview written to {args.pgm}", file=sys.stderr)
    return 0


_METRICS = ("psnr", "psnr_fr", "nmse")


def _cmd_eval(args) -> int:
    import numpy as np

    from .data import load_corpus, nmse, psnr, psnr_fr
    from .model import load_checkpoint
    from .training import predict

    names = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = [m for m in names if m not in _METRICS]
    if bad or not names:
        raise UsageError(f"metrics must be a comma list from {_METRICS}, got {args.metrics!r}")
    model = load_checkpoint(args.model)
    corpora, _ = load_corpus(args.data)
    if args.split not in corpora:
        raise UsageError(f"split {args.split!r} not in corpus (has {sorted(corpora)})")
    samples = corpora[args.split]
    preds = predict(model, samples.corrupted)
    fns = {"psnr": psnr, "psnr_fr": psnr_fr, "nmse": nmse}
    print("metric\tvalue")
    for name in names:
        fn = fns[name]
        vals = [fn(p, r) for p, r in zip(preds, samples.clean)]
        print(f"{name}\t{float(np.mean(vals))!r}")
    return 0


_ROLE_FLAGS = {"encoder": "enc", "adjoint": "adj", "decoder": "dec"}


def _cmd_atoms(args) -> int:
    from .model import load_checkpoint
    from .probe import atom_grid

    model = load_checkpoint(args.model)
    params = model.dict_params(_ROLE_FLAGS[args.dict])
    count = args.count
    if count is None:
        count = model.spec.channels_at(args.scale)
    records = atom_grid(params, args.scale, count, args.out)
    print("channel\tnorm\tsupport\tpath")
    for rec in records:
        print(f"{rec['channel']}\t{rec['norm']!r}\t{rec['support']}\t{rec['path']}")
    print(f"{len(records)} atoms written to {args.out}", file=sys.stderr)
    return 0


def _cmd_sparsity(args) -> int:
    from .data import load_corpus
    from .model import load_checkpoint
    from .probe import sparsity_profile

    model = load_checkpoint(args.model)
    corpora, _ = load_corpus(args.data)
    if args.split not in corpora:
        raise UsageError(f"split {args.split!r} not in corpus (has {sorted(corpora)})")
    report = sparsity_profile(model, corpora[args.split].corrupted)
    tsv = report.to_tsv()
    sys.stdout.write(tsv)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(tsv)
        print(f"report written to {args.out}", file=sys.stderr)
    return 0


def _cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck

    def report(res):
        status = "PASS" if res.passed else "FAIL"
        print(f"{res.name}\t{status}\t{res.detail}")
        sys.stdout.flush()

    results = run_selfcheck(args.level, report=report)
    failed = [r for r in results if not r.passed]
    total = sum(r.seconds for r in results)
    print(
        f"{len(results) - len(failed)}/{len(results)} checks passed in {total:.1f}s",
        file=sys.stderr,
    )
    return 3 if failed else 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="musc", description="Multiscale unrolled sparse coding toolkit.")
    parser.add_argument(
        "--threads",
        type=int,
        default=1,
        metavar="N",
        help="cap BLAS thread pools (default 1, for bit-reproducible runs)",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic task corpus")
    p.add_argument("--task", choices=("streaks", "gauss", "blur"), default="streaks")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-val", type=int, default=32)
    p.add_argument("--n-test", type=int, default=32)
    p.add_argument("--sigma", type=float, default=0.1, help="gauss noise level")
    p.add_argument("--streak-count", type=int, default=6)
    p.add_argument("--blur-sigma", type=float, default=1.2)
    p.add_argument("--blur-factor", type=int, default=2)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("train", help="train a model (key=value config file)")
    p.add_argument("--config", help="config file; defaults used when omitted")
    p.add_argument("--out", help="checkpoint path (overrides config)")
    p.add_argument("--seed", type=int, default=None, help="training seed (overrides config)")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("reconstruct", help="run one image through a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="input image (NTF)")
    p.add_argument("--output", required=True, help="output image (NTF)")
    p.add_argument("--pgm", help="also write an 8-bit PGM preview")
    p.set_defaults(fn=_cmd_reconstruct)

    p = sub.add_parser("eval", help="batch metrics over a corpus split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--metrics", default="psnr,psnr_fr,nmse")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("atoms", help="export dictionary atoms as PGM images")
    p.add_argument("--model", required=True)
    p.add_argument("--dict", choices=sorted(_ROLE_FLAGS), default="decoder")
    p.add_argument("--scale", type=int, required=True)
    p.add_argument("--count", type=int, default=None, help="default: all channels at scale")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=_cmd_atoms)

    p = sub.add_parser("sparsity", help="per-scale code density over a corpus split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", help="also write the TSV report here")
    p.set_defaults(fn=_cmd_sparsity)

    p = sub.add_parser("selfcheck", help="run the built-in verification suite")
    p.add_argument("--level", choices=("quick", "full"), default="quick")
    p.set_defaults(fn=_cmd_selfcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("musc: error: --threads must be >= 1", file=sys.stderr)
        return 1
    for var in _THREAD_VARS:
        os.environ[var] = str(args.threads)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"musc: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary: report and exit 2
        print(f"musc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
