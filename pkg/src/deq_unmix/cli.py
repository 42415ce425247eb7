"""Command-line entry point: ``deq-unmix {train,separate,count,sweep,gradcheck}``.

Exit codes: 0 success, 1 usage, 2 numeric abort, 3 artifact mismatch,
4 property failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .data import TOY_SOURCES, make_scene_set
from .dsp import istft, masked_estimates, mwf, read_wav, sdr, stft, write_wav
from .kvfile import KeyValueError, format_key_values, read_key_values
from .separator import (
    VARIANTS,
    Checkpoint,
    CheckpointError,
    CheckpointMismatch,
    MagnitudeSet,
    ModelSpec,
    SeparatorModel,
    TrainConfig,
    TrainingAborted,
    count_macs,
    count_params,
    evaluate_loss,
    per_iteration_core_macs,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_MISMATCH, EXIT_PROPERTY = 0, 1, 2, 3, 4

# published reference values: parameters (M) and MACs (G) per 6 s, summed over four targets
PUBLISHED = {
    "umx": ("UMX", 35.55, 9.08),
    "umx_large4": ("UMX large (4 layers)", 41.85, 10.69),
    "umx_large5": ("UMX large (5 layers)", 48.16, 12.30),
    "umx_small": ("UMX small", 25.15, 6.42),
    "wt_umx": ("WT-UMX (L=4)", 25.06, 12.29),
    "deq_umx": ("DEQ-UMX", 25.06, 18.74),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


# every flag that may also come from a config file, with its type and default
_TRAIN_OPTIONS = {
    "variant": (str, "deq_umx"),
    "hidden": (int, 32),
    "unroll": (int, 4),
    "lmax": (int, 6),
    "epsilon": (float, 1e-3),
    "backward": (str, "jfb"),
    "targets": (str, ",".join(TOY_SOURCES)),
    "pretrain_l": (int, 4),
    "pretrain_epochs": (int, 20),
    "epochs": (int, 180),
    "lr": (float, 1e-3),
    "weight_decay": (float, 1e-5),
    "lr_decay_factor": (float, 0.3),
    "plateau_patience": (int, 80),
    "early_stop_patience": (int, 300),
    "batch_size": (int, 16),
    "segment_seconds": (float, 0.4),
    "scene_seconds": (float, 0.8),
    "synthetic": (int, 0),
    "n_valid": (int, 16),
    "data_seed": (int, 1),
    "seed": (int, 0),
}


def _add_options(p: argparse.ArgumentParser, options: dict) -> None:
    for name, (typ, default) in options.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None,
                       help=f"default: {default}")


def _resolve(args: argparse.Namespace, options: dict) -> dict:
    """Flags win over the config file, which wins over defaults; unknown file keys are rejected."""
    values = {k: d for k, (_, d) in options.items()}
    if getattr(args, "config", None):
        try:
            raw = read_key_values(args.config)
        except (OSError, KeyValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        for key, text in raw.items():
            name = key.replace("-", "_")
            if name not in options:
                raise UsageError(f"unknown config key {key!r} in {args.config}")
            try:
                values[name] = options[name][0](text)
            except ValueError as exc:
                raise UsageError(f"bad value for {key!r}: {text!r}") from exc
    for name in options:
        if getattr(args, name, None) is not None:
            values[name] = getattr(args, name)
    return values


def _echo(values: dict, stream=None) -> None:
    stream = stream or sys.stderr
    for line in format_key_values(values).splitlines():
        print(f"# {line}", file=stream)


def _toy_spec(values: dict, targets: tuple[str, ...]) -> ModelSpec:
    return ModelSpec.toy(values["variant"], hidden=values["hidden"], targets=targets, unroll_l=values["unroll"],
                         l_max=values["lmax"], epsilon=values["epsilon"], backward_mode=values["backward"])


def _train_config(values: dict) -> TrainConfig:
    return TrainConfig(
        segment_seconds=values["segment_seconds"], lr=values["lr"], weight_decay=values["weight_decay"],
        lr_decay_factor=values["lr_decay_factor"], plateau_patience_epochs=values["plateau_patience"],
        early_stop_patience_epochs=values["early_stop_patience"], pretrain_unroll_l=values["pretrain_l"],
        pretrain_epochs=values["pretrain_epochs"], l_max_after_pretrain=values["lmax"], epochs=values["epochs"],
        batch_size=values["batch_size"], backward_mode=values["backward"], seed=values["seed"],
    )


# --------------------------------------------------------------------------- datasets


def _load_wav_examples(root: Path, targets: tuple[str, ...], spec: ModelSpec):
    """Each example is a folder holding ``mixture.wav`` and ``<target>.wav``."""
    mixes, sources = [], []
    for folder in sorted(p for p in root.iterdir() if p.is_dir()):
        mix, sr = read_wav(folder / "mixture.wav")
        if sr != spec.sample_rate or mix.shape[0] != spec.channels:
            raise UsageError(f"{folder}: expected {spec.channels} channel(s) at {spec.sample_rate} Hz")
        mixes.append(mix)
        sources.append([read_wav(folder / f"{t}.wav")[0] for t in targets])
    if not mixes:
        raise UsageError(f"no example folders in {root}")
    length = min(m.shape[1] for m in mixes)

    def mags(waves):
        return np.stack([stft(w[:, :length], spec.frame_len, spec.hop, spec.sample_rate).magnitude for w in waves])

    mix_mag = mags(mixes)
    return {t: MagnitudeSet(mix_mag, mags([s[j] for s in sources])) for j, t in enumerate(targets)}


def _datasets(values: dict, data: str | None, spec: ModelSpec):
    if data:
        root = Path(data)
        if not (root / "train").is_dir() or not (root / "valid").is_dir():
            raise UsageError(f"dataset directory {root} needs train/ and valid/ subfolders")
        return (_load_wav_examples(root / "train", spec.targets, spec),
                _load_wav_examples(root / "valid", spec.targets, spec))
    if values["synthetic"] <= 0:
        raise UsageError("a dataset is required: pass --data DIR or --synthetic N")
    unknown = set(spec.targets) - set(TOY_SOURCES)
    if unknown:
        raise UsageError(f"synthetic scenes only provide targets {TOY_SOURCES}, not {sorted(unknown)}")
    tr = make_scene_set(values["synthetic"], spec, values["scene_seconds"], values["data_seed"])
    va = make_scene_set(values["n_valid"], spec, values["scene_seconds"], values["data_seed"] + 1)
    return {t: tr.magnitudes(t) for t in spec.targets}, {t: va.magnitudes(t) for t in spec.targets}


# --------------------------------------------------------------------------- commands


def cmd_train(args) -> int:
    values = _resolve(args, _TRAIN_OPTIONS)
    targets = tuple(t for t in values["targets"].split(",") if t)
    try:
        spec = _toy_spec(values, targets)
        config = _train_config(values)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    _echo(values)
    train_sets, valid_sets = _datasets(values, args.data, spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train.log", "a") as log_file:
        _echo(values, log_file)

        def log(line: str) -> None:
            log_file.write(line + "\n")
            log_file.flush()
            print(line)

        for i, target in enumerate(targets):
            resume = None
            if args.resume:
                resume = Checkpoint.load(out / f"{target}.ckpt")
            model = SeparatorModel(spec, np.random.default_rng([values["seed"], i]))
            log(f"# target = {target}")
            try:
                result = train(model, train_sets[target], valid_sets[target], config, target, log, resume)
            except TrainingAborted as exc:
                exc.checkpoint.save(out / f"{target}.nan.ckpt")
                print(f"numeric abort: {exc}; diagnostic checkpoint {out / f'{target}.nan.ckpt'}", file=sys.stderr)
                return EXIT_NUMERIC
            result.checkpoint.save(out / f"{target}.ckpt")
            log(f"# {target}: initial_loss = {result.initial_loss:.6e}, final_loss = {result.final_loss:.6e}")
    return EXIT_OK


def _parse_references(items: list[str]) -> dict[str, Path]:
    refs = {}
    for item in items or ():
        name, sep, path = item.partition("=")
        if not sep:
            raise UsageError(f"--reference expects TARGET=PATH, got {item!r}")
        refs[name] = Path(path)
    return refs


def cmd_separate(args) -> int:
    _echo({k: v for k, v in vars(args).items() if k != "func"})
    try:
        ckpts = [Checkpoint.load(p) for p in args.checkpoint]
    except (OSError, CheckpointError) as exc:
        print(f"cannot load checkpoint: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    mix, sr = read_wav(args.input)
    models, names = [], []
    for path, ck in zip(args.checkpoint, ckpts):
        spec = ck.spec
        if spec.sample_rate != sr or spec.channels != mix.shape[0]:
            print(f"{path}: model expects {spec.channels} channel(s) at {spec.sample_rate} Hz, input has "
                  f"{mix.shape[0]} at {sr} Hz", file=sys.stderr)
            return EXIT_MISMATCH
        if (spec.frame_len, spec.hop) != (ckpts[0].spec.frame_len, ckpts[0].spec.hop):
            print(f"{path}: framing differs from {args.checkpoint[0]}", file=sys.stderr)
            return EXIT_MISMATCH
        try:
            model = ck.build_model()
        except CheckpointMismatch as exc:
            print(f"{path}: {exc}", file=sys.stderr)
            return EXIT_MISMATCH
        if args.identity_mask:
            model.set_identity_mask()
        models.append(model)
        names.append(ck.meta.get("target") or Path(path).stem)
    spec0 = ckpts[0].spec
    M = stft(mix, spec0.frame_len, spec0.hop, sr)
    mags = [m.separate(M.magnitude) for m in models]
    refs = _parse_references(args.reference)
    modes = []
    if args.mask_only or not args.mwf:
        modes.append(("mask", masked_estimates(mags, M)))
    if args.mwf:
        modes.append(("mwf", mwf(mags, M)))
    out = Path(args.out)
    for mode, estimates in modes:
        (out / mode).mkdir(parents=True, exist_ok=True)
        for name, est in zip(names, estimates):
            wave = istft(est)
            write_wav(out / mode / f"{name}.wav", wave, sr)
            if name in refs:
                ref, _ = read_wav(refs[name])
                print(f"{mode}\t{name}\tsdr_db\t{sdr(ref, wave):.2f}")
    return EXIT_OK


def _count_row(variant: str, scale: str, seconds: float, iterations: int | None, l_max: int | None):
    kwargs = {"l_max": l_max} if l_max is not None and variant == "deq_umx" else {}
    spec = (ModelSpec.full_scale if scale == "full" else ModelSpec.toy)(variant, **kwargs)
    if iterations is not None and not spec.is_equilibrium:
        raise UsageError(f"--unroll applies to wt_umx and deq_umx, not {variant}")
    params = count_params(spec)
    macs = count_macs(spec, seconds, iterations)
    core = per_iteration_core_macs(spec, seconds).total if spec.is_equilibrium else 0
    return spec, params, macs, core


def cmd_count(args) -> int:
    _echo({k: v for k, v in vars(args).items() if k != "func"})
    header = ["variant", "targets", "params_per_target", "params_total_M", "macs_total_G", "core_macs_per_iter_G"]
    variants = list(PUBLISHED) if args.table1 else [args.variant]
    if args.table1:
        header += ["published_params_M", "published_macs_G", "params_dev_pct", "macs_dev_pct"]
    print("\t".join(header))
    totals = {}
    for v in variants:
        spec, params, macs, core = _count_row(v, args.scale, args.seconds, None if args.table1 else args.unroll,
                                              args.lmax)
        totals[v] = params.total
        row = [v, str(len(spec.targets)), str(params.per_target), f"{params.total / 1e6:.3f}",
               f"{macs.total / 1e9:.3f}", f"{core / 1e9:.3f}"]
        if args.table1:
            _, p_ref, m_ref = PUBLISHED[v]
            row += [f"{p_ref:.2f}", f"{m_ref:.2f}", f"{100 * (params.total / 1e6 / p_ref - 1):+.2f}",
                    f"{100 * (macs.total / 1e9 / m_ref - 1):+.2f}"]
        print("\t".join(row))
    if args.table1:
        reduction = (totals["umx"] - totals["deq_umx"]) / totals["umx"]
        print(f"# parameter reduction umx -> deq_umx: {100 * reduction:.2f}%")
    return EXIT_OK


def cmd_sweep(args) -> int:
    if not args.L:
        raise UsageError("--L needs at least one value")
    values = _resolve(args, _TRAIN_OPTIONS)
    values["variant"] = "wt_umx"
    values["targets"] = args.target
    _echo({**values, "L": ",".join(map(str, args.L))})
    if values["synthetic"] <= 0:
        values["synthetic"] = 32
    base = _toy_spec(values, (args.target,))
    train_sets, valid_sets = _datasets(values, None, base)
    test = make_scene_set(values["n_valid"], base, values["scene_seconds"], values["data_seed"] + 2)
    j = TOY_SOURCES.index(args.target)
    print("L\tval_loss\tsdr")
    for L in args.L:
        spec = _toy_spec({**values, "unroll": L}, (args.target,))
        config = _train_config({**values, "pretrain_epochs": 0})
        model = SeparatorModel(spec, np.random.default_rng(values["seed"]))
        try:
            train(model, train_sets[args.target], valid_sets[args.target], config, args.target)
        except TrainingAborted as exc:
            print(f"numeric abort at L={L}: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        val = evaluate_loss(model, valid_sets[args.target], config.batch_size)
        est = model.separate(test.magnitudes(args.target).mixtures)
        scores = [sdr(test.sources[i][j], istft(masked_estimates([est[i]], test.mixture_stfts[i])[0]))
                  for i in range(len(test))]
        print(f"{L}\t{val:.6e}\t{np.mean(scores):.2f}")
    print("# trend across L is reported, not asserted")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _echo({k: v for k, v in vars(args).items() if k != "func"})
    sign = -1.0 if args.inject_sign_flip else 1.0
    n = args.n
    suites = []
    if args.mode in ("all", "unroll"):
        suites.append(lambda: gradcheck.check_unroll_equivalence(n or 20, args.seed))
    if args.mode in ("all", "implicit"):
        if args.dim:
            suites.append(lambda: gradcheck.check_dense_implicit(n or 10, args.seed, dim=args.dim, rhs_sign=sign))
        else:
            suites.append(lambda: gradcheck.check_implicit_fd(n or 10, args.seed, rhs_sign=sign))
    if args.mode in ("all", "jfb"):
        suites.append(lambda: gradcheck.check_jfb_descent(n or 200, args.seed))
    failed = []
    for run in suites:
        result = run()
        print(f"{'PASS' if result.passed else 'FAIL'}\t{result.name}\t{result.detail}")
        if not result.passed:
            failed.append(result)
    if failed:
        dump = [{"suite": r.name, "worst_value": r.worst_value, "instance": r.worst_instance} for r in failed]
        text = json.dumps(dump, indent=2)
        if args.dump:
            Path(args.dump).write_text(text + "\n")
        print(text)
        return EXIT_PROPERTY
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deq-unmix", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one network per target on toy-scale data")
    p.add_argument("--config", help="key = value file; flags take precedence")
    p.add_argument("--data", help="directory with train/ and valid/ example folders of WAV files")
    p.add_argument("--out", required=True, help="output directory for checkpoints and train.log")
    p.add_argument("--resume", action="store_true", help="continue from <out>/<target>.ckpt")
    _add_options(p, _TRAIN_OPTIONS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("separate", help="separate a WAV file with trained checkpoints")
    p.add_argument("--checkpoint", action="append", required=True, help="one per target")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mwf", action="store_true", help="write multichannel-Wiener-filtered estimates")
    p.add_argument("--mask-only", action="store_true", help="write mixture-phase masked estimates")
    p.add_argument("--identity-mask", action="store_true", help="debug: force a unit mask")
    p.add_argument("--reference", action="append", help="TARGET=PATH reference WAV for SDR")
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("count", help="parameter and MAC counts")
    p.add_argument("--variant", choices=VARIANTS, default="deq_umx")
    p.add_argument("--seconds", type=float, default=6.0)
    p.add_argument("--unroll", type=int, help="override the core evaluation count (0 gives the base cost)")
    p.add_argument("--lmax", type=int, help="solver budget for deq_umx")
    p.add_argument("--scale", choices=("full", "toy"), default="full")
    p.add_argument("--table1", action="store_true", help="all six published variants side by side")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("sweep", help="train and score WT-UMX for several unroll depths")
    p.add_argument("--config")
    p.add_argument("--L", type=_int_list, default=list(range(1, 9)))
    p.add_argument("--target", choices=TOY_SOURCES, default="tonal")
    _add_options(p, {k: v for k, v in _TRAIN_OPTIONS.items() if k not in ("variant", "targets", "unroll")})
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="run the equilibrium-layer property suites")
    p.add_argument("--mode", choices=("all", "unroll", "implicit", "jfb"), default="all")
    p.add_argument("--dim", type=int, help="use the dense linear-solve oracle at this state size")
    p.add_argument("--n", type=int, help="instances per suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-sign-flip", action="store_true", help="test hook: negate the backward rhs")
    p.add_argument("--dump", help="write failing instances as JSON here")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
