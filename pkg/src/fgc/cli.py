"""Command-line entry point.

Every subcommand is a thin adapter over the library modules: it parses
options, calls one module function, prints a machine-readable JSON
summary to stdout, and writes any CSV/binary artifacts to ``--out``
paths.  Exit codes: 0 success, 1 usage error, 2 data/format error,
3 infeasible cost model or diverged simulation.

Raw tensors are little-endian f32 binary with an 8-byte length prefix.
The ``FGC_SEED`` environment variable overrides configured seeds for
reproducible CI runs.
"""

from __future__ import annotations

import argparse
import json
import os
import struct
import sys

import numpy as np

from . import codec, costmodel, quantizer, simulator, spectral

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INFEASIBLE = 3

_LEN_PREFIX = struct.Struct("<Q")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems with exit code 1."""

    def error(self, message):
        raise _UsageError(message)


def write_tensor(path: str, values: np.ndarray) -> None:
    data = np.asarray(values, dtype="<f4")
    with open(path, "wb") as handle:
        handle.write(_LEN_PREFIX.pack(data.size))
        handle.write(data.tobytes())


def read_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as handle:
        raw = handle.read()
    if len(raw) < _LEN_PREFIX.size:
        raise ValueError(f"{path}: missing length prefix")
    (count,) = _LEN_PREFIX.unpack_from(raw, 0)
    expected = _LEN_PREFIX.size + 4 * count
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {count} floats, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=_LEN_PREFIX.size).astype(np.float64)


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True))


def _seed_override(seed: int) -> int:
    env = os.environ.get("FGC_SEED")
    return int(env) if env else seed


def _build_codec_config(args) -> codec.CodecConfig:
    spars = spectral.SparsificationSpec(args.theta, args.mode, "frequency")
    if args.nbits == 32:
        quant = None
    else:
        quant = quantizer.tune_eps(-1.0, 1.0, args.nbits, args.mantissa)
    return codec.CodecConfig(
        sparsification=spars,
        quantizer=quant,
        half_precision_pass=getattr(args, "half", False),
        chunk_size=args.chunk,
    )


def _cmd_compress(args) -> int:
    gradient = read_tensor(args.input)
    spars = spectral.SparsificationSpec(args.theta, args.mode, "frequency")
    quant = None
    if args.nbits != 32:
        quant = codec.calibrate([gradient], args.nbits, args.mantissa)
    config = codec.CodecConfig(
        sparsification=spars,
        quantizer=quant,
        half_precision_pass=args.half,
        chunk_size=args.chunk,
    )
    blob = codec.serialize(codec.compress(gradient, config))
    with open(args.out, "wb") as handle:
        handle.write(blob)
    _emit(
        {
            "command": "compress",
            "status": "ok",
            "input": args.input,
            "out": args.out,
            "original_len": int(gradient.size),
            "message_bytes": len(blob),
            "measured_ratio": 4.0 * gradient.size / len(blob),
            "theta": args.theta,
            "n_bits": args.nbits,
            "mode": args.mode,
        }
    )
    return EXIT_OK


def _cmd_decompress(args) -> int:
    with open(args.input, "rb") as handle:
        blob = handle.read()
    gradient = codec.decompress(codec.deserialize(blob))
    write_tensor(args.out, gradient)
    _emit(
        {
            "command": "decompress",
            "status": "ok",
            "input": args.input,
            "out": args.out,
            "original_len": int(gradient.size),
        }
    )
    return EXIT_OK


def _cmd_ratio(args) -> int:
    config = _build_codec_config(args)
    exclude = codec.compression_ratio(config, args.n, include_bitmap=False)
    include = codec.compression_ratio(config, args.n, include_bitmap=True)
    _emit(
        {
            "command": "ratio",
            "status": "ok",
            "theta": args.theta,
            "n_bits": args.nbits,
            "n": args.n,
            "exclude_bitmap_ratio": exclude,
            "include_bitmap_ratio": include,
            "ratio_display": f"{exclude:.2f}",
        }
    )
    return EXIT_OK


def _cmd_inspect(args) -> int:
    signal = read_tensor(args.input)
    spectrum = spectral.dft_forward(signal)
    magnitudes = np.abs(spectrum.coefficients)
    with open(args.out, "w") as handle:
        handle.write("bin,magnitude\n")
        for index, magnitude in enumerate(magnitudes):
            handle.write(f"{index},{float(magnitude)!r}\n")
    _emit(
        {
            "command": "inspect",
            "status": "ok",
            "input": args.input,
            "out": args.out,
            "n": int(signal.size),
            "bins": int(magnitudes.size),
        }
    )
    return EXIT_OK


def _cmd_quantizer_dump(args) -> int:
    config = quantizer.tune_eps(args.min, args.max, args.nbits, args.mantissa, args.eps_init)
    codes = np.arange(2**config.n_bits)
    values = quantizer.decode_array(config, codes)
    with open(args.out, "w") as handle:
        handle.write("code,value\n")
        for code, value in zip(codes, values):
            handle.write(f"{code},{float(value)!r}\n")
    _emit(
        {
            "command": "quantizer-dump",
            "status": "ok",
            "out": args.out,
            "n_bits": config.n_bits,
            "mantissa_bits": config.mantissa_bits,
            "min": config.min,
            "max": config.max,
            "eps": config.eps,
            "pos_count": config.pos_count,
            "codes": int(codes.size),
        }
    )
    return EXIT_OK


def _parse_sweep(text: str) -> np.ndarray:
    # format: tcomm=<start>:<stop>:<count>
    try:
        key, _, spec = text.partition("=")
        if key != "tcomm":
            raise ValueError
        start, stop, count = spec.split(":")
        return np.linspace(float(start), float(stop), int(count))
    except ValueError:
        raise _UsageError(f"bad sweep spec {text!r}, expected tcomm=start:stop:count")


def _cmd_costmodel(args) -> int:
    with open(args.profile) as handle:
        fields = json.load(handle)
    profile = costmodel.ThroughputProfile(**fields)
    summary = {
        "command": "costmodel",
        "status": "ok",
        "profile": fields,
        "out": args.out,
    }
    min_k = costmodel.min_beneficial_k(profile)
    summary["min_k"] = min_k if min_k is not None else "infeasible"
    if args.sweep:
        rows = costmodel.sweep(profile, _parse_sweep(args.sweep))
        if args.out:
            with open(args.out, "w") as handle:
                handle.write(costmodel.sweep_to_csv(rows))
        summary["sweep_rows"] = len(rows)
        _emit(summary)
        return EXIT_OK
    summary["sweep_rows"] = 0
    if min_k is None:
        summary["status"] = "infeasible"
        _emit(summary)
        return EXIT_INFEASIBLE
    _emit(summary)
    return EXIT_OK


def _cmd_bench(args) -> int:
    profile = costmodel.bench_stages(
        elements=args.elements, repeats=args.repeats, t_comm=args.tcomm
    )
    fields = {
        "t_m": profile.t_m,
        "t_f": profile.t_f,
        "t_p": profile.t_p,
        "t_s": profile.t_s,
        "t_comm": profile.t_comm,
    }
    if args.out:
        with open(args.out, "w") as handle:
            json.dump(fields, handle, indent=2)
    _emit(
        {
            "command": "bench",
            "status": "ok",
            "elements": args.elements,
            "profile": fields,
            "out": args.out,
        }
    )
    return EXIT_OK


def _cmd_simulate(args) -> int:
    options = {
        "problem": args.problem,
        "workers": args.workers,
        "batch": args.batch,
        "iters": args.iters,
        "lr": args.lr,
        "lr_schedule": args.lr_schedule,
        "lr_tau": args.lr_tau,
        "lr_power": args.lr_power,
        "theta0": args.theta0,
        "theta1": args.theta1,
        "theta_schedule": args.theta_schedule,
        "switch_at": args.switch_at,
        "theta_power": args.theta_power,
        "mode": args.mode,
        "nbits": args.nbits,
        "mantissa": args.mantissa,
        "clip": args.clip,
        "seed": args.seed,
        "channel": args.channel,
        "hist_interval": args.hist_interval,
        "problem_seed": args.problem_seed,
    }
    if args.config:
        with open(args.config) as handle:
            overrides = json.load(handle)
        unknown = set(overrides) - set(options)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        options.update(overrides)

    seed = _seed_override(options["seed"])
    problem = simulator.make_problem(options["problem"], seed=options["problem_seed"])
    if options["lr"] is None:
        options["lr"] = 1.0 / (8.0 * problem.lipschitz)
    quant = None
    if options["nbits"] != 32:
        quant = quantizer.tune_eps(-1.0, 1.0, options["nbits"], options["mantissa"])
    config = simulator.TrainConfig(
        lr=simulator.LrSchedule(
            eta0=options["lr"],
            kind=options["lr_schedule"],
            tau=options["lr_tau"],
            power=options["lr_power"],
        ),
        theta=simulator.ThetaSchedule(
            kind=options["theta_schedule"],
            theta0=options["theta0"],
            theta1=options["theta1"],
            switch_at=options["switch_at"],
            power=options["theta_power"],
        ),
        workers=options["workers"],
        batch_size=options["batch"],
        mode=options["mode"],
        iterations=options["iters"],
        clip_c1=options["clip"],
        seed=seed,
        quantizer=quant,
        channel=options["channel"],
        hist_interval=options["hist_interval"],
    )
    trace = simulator.run(problem, config)
    if args.out:
        trace.to_csv(args.out)
    _emit(
        {
            "command": "simulate",
            "status": "diverged" if trace.diverged else "ok",
            "problem": options["problem"],
            "iterations": int(trace.iterations),
            "final_loss": float(trace.loss[-1]),
            "min_grad_sq_norm": float(trace.grad_sq_norm.min()),
            "diverged": trace.diverged,
            "seed": seed,
            "out": args.out,
        }
    )
    return EXIT_INFEASIBLE if trace.diverged else EXIT_OK


def _build_parser() -> _Parser:
    parser = _Parser(prog="fgc", description=__doc__.splitlines()[0])
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("compress", help="compress a tensor file into a .fgc message")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--theta", type=float, default=0.7)
    p.add_argument("--nbits", type=int, default=8)
    p.add_argument("--mantissa", type=int, default=3)
    p.add_argument("--mode", choices=["count", "energy"], default="count")
    p.add_argument("--chunk", type=int, default=codec.DEFAULT_CHUNK_SIZE)
    p.add_argument("--half", action="store_true")
    p.set_defaults(func=_cmd_compress)

    p = commands.add_parser("decompress", help="decompress a .fgc message to a tensor file")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_decompress)

    p = commands.add_parser("ratio", help="analytic compression ratio")
    p.add_argument("--theta", type=float, required=True)
    p.add_argument("--nbits", type=int, default=8)
    p.add_argument("--mantissa", type=int, default=3)
    p.add_argument("--mode", choices=["count", "energy"], default="count")
    p.add_argument("--chunk", type=int, default=codec.DEFAULT_CHUNK_SIZE)
    p.add_argument("--n", type=int, default=1 << 16)
    p.set_defaults(func=_cmd_ratio)

    p = commands.add_parser("inspect", help="dump spectrum magnitudes as CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--spectrum", action="store_true", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_inspect)

    p = commands.add_parser("quantizer-dump", help="dump all decoded quantizer values as CSV")
    p.add_argument("--nbits", type=int, default=8)
    p.add_argument("--mantissa", type=int, default=3)
    p.add_argument("--min", type=float, default=-1.0)
    p.add_argument("--max", type=float, default=1.0)
    p.add_argument("--eps-init", type=float, default=0.002)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_quantizer_dump)

    p = commands.add_parser("costmodel", help="evaluate the beneficial-compression bound")
    p.add_argument("--profile", required=True, help="JSON with t_m,t_f,t_p,t_s,t_comm in GB/s")
    p.add_argument("--sweep", help="tcomm=start:stop:count")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_costmodel)

    p = commands.add_parser("bench", help="measure this machine's stage throughputs")
    p.add_argument("--elements", type=int, default=1_000_000)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--tcomm", type=float, default=1.0)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_bench)

    p = commands.add_parser("simulate", help="run compressed BSP SGD")
    p.add_argument("--problem", choices=["quadratic", "logistic", "mlp"], default="quadratic")
    p.add_argument("--problem-seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--lr", type=float, default=None, help="default: 1/(8L)")
    p.add_argument("--lr-schedule", choices=["fixed", "diminishing"], default="fixed")
    p.add_argument("--lr-tau", type=float, default=100.0)
    p.add_argument("--lr-power", type=float, default=1.0)
    p.add_argument("--theta0", type=float, default=0.5)
    p.add_argument("--theta1", type=float, default=0.0)
    p.add_argument(
        "--theta-schedule",
        choices=["fixed", "stepwise", "diminishing", "polynomial"],
        default="fixed",
    )
    p.add_argument("--switch-at", type=int, default=0)
    p.add_argument("--theta-power", type=float, default=1.0)
    p.add_argument("--mode", choices=["count", "energy"], default="count")
    p.add_argument("--nbits", type=int, default=32, help="32 = passthrough")
    p.add_argument("--mantissa", type=int, default=3)
    p.add_argument("--clip", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channel", choices=["wire", "memory"], default="wire")
    p.add_argument("--hist-interval", type=int, default=None)
    p.add_argument("--config", help="JSON file supplying any of the above options")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_simulate)

    return parser


def dispatch(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        _emit({"command": args.command, "status": "error", "error": str(exc)})
        return EXIT_DATA


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
