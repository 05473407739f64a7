"""Command-line front end.

Exit status: 0 on success, 1 on user error (bad flags, unreadable or
malformed input), 2 when an internal invariant check fails.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from mxscale import tensor_io
from mxscale.analysis import (
    PRNG_NAME,
    compare_rounding,
    dtype_sweep,
    format_kv_report,
    format_text_report,
    gaussian_tensor,
    report_records,
)
from mxscale.block_quant import Axis, MxTensor, dequantize_tensor, quantize_tensor
from mxscale.errors import InvariantViolation, MxError
from mxscale.linalg import MmaConfig, MmaPath, mx_matmul
from mxscale.minifloat import FORMATS, get_format
from mxscale.microtrain import ROLES, TrainConfig, train
from mxscale.scaling import ScaleRoundingMode

log = logging.getLogger("mxscale")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fmt(name: str):
    try:
        return get_format(name)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _add_format(p, required=True):
    p.add_argument("--format", type=_fmt, required=required,
                   help="element type: " + ", ".join(f.name.lower() for f in FORMATS))


def _add_axis(p):
    p.add_argument("--axis", type=Axis, choices=list(Axis), default=Axis.ROW)


def _add_mode(p):
    p.add_argument("--scale-rounding", dest="mode", type=ScaleRoundingMode,
                   choices=list(ScaleRoundingMode), default=ScaleRoundingMode.ROUND_UP)


def _add_source(p):
    p.add_argument("--in", dest="inp", help="raw MXT tensor; random Gaussian data if omitted")
    p.add_argument("--rows", type=int, default=1024)
    p.add_argument("--cols", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mxscale", description="Microscaling (MX) format emulation tools")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("formats", help="print the element format reference table")

    p = sub.add_parser("quantize", help="quantize a raw MXT tensor")
    _add_format(p)
    _add_axis(p)
    _add_mode(p)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("dequantize", help="decode an MX MXT tensor to raw binary32")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gemm", help="multiply two tensors through the MX path")
    p.add_argument("--a", required=True, help="left operand (MXT, raw or mx with axis=row)")
    p.add_argument("--b", required=True, help="right operand (MXT, raw or mx with axis=col)")
    _add_format(p, required=False)
    _add_mode(p)
    p.add_argument("--path", type=MmaPath, choices=list(MmaPath), default=MmaPath.EXACT_SCALED)
    p.add_argument("--out", help="write the binary32 product as a raw MXT file")

    p = sub.add_parser("analyze", help="per-format quantization statistics")
    _add_source(p)
    _add_axis(p)
    _add_mode(p)
    _add_format(p, required=False)
    p.add_argument("--out", help="write the key-value (JSON) report here")

    p = sub.add_parser("compare-rounding", help="round-up vs OCP floor scale statistics")
    _add_source(p)
    _add_axis(p)
    _add_format(p)
    p.add_argument("--out", help="write the key-value (JSON) report here")

    p = sub.add_parser("train-demo", help="desk-scale quantized training vs binary32")
    p.add_argument("--cfg", choices=["cfg1", "cfg2", "passthrough"], default="cfg1")
    _add_format(p, required=False)
    _add_mode(p)
    p.add_argument("--model", choices=["mlp", "attention"], default="mlp")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=None,
                   help="learning rate (default 0.05 for mlp, 0.01 for attention)")
    p.add_argument("--path", type=MmaPath, choices=list(MmaPath), default=MmaPath.EXACT_SCALED)
    p.add_argument("--out", help="loss trace of the quantized run (step, loss)")
    p.add_argument("--ref-out", help="loss trace of the binary32 reference run")
    return parser


def _read_raw(path: str, flag: str) -> np.ndarray:
    t = tensor_io.read(path)
    if isinstance(t, MxTensor):
        raise UsageError(f"{flag}: expected a raw tensor, {path} holds an MX tensor")
    return t


def _source(args) -> tuple[np.ndarray, dict]:
    if args.inp:
        return _read_raw(args.inp, "--in"), {"source": args.inp}
    if args.rows <= 0 or args.cols <= 0:
        raise UsageError("--rows/--cols must be positive")
    meta = {"source": "gaussian", "rows": args.rows, "cols": args.cols,
            "seed": args.seed, "prng": PRNG_NAME}
    return gaussian_tensor(args.rows, args.cols, args.seed), meta


def cmd_formats(args, out) -> None:
    out.write(f"{'name':<6}{'destmax':>12}{'min_subnormal':>16}{'binades':>9}"
              f"{'exp':>5}{'man':>5}{'bias':>6}  special\n")
    for f in FORMATS:
        out.write(f"{f.name:<6}{f.destmax:>12g}{f.min_subnormal:>16g}{f.binades:>9.1f}"
                  f"{f.exp_bits:>5}{f.man_bits:>5}{f.bias:>6}  {f.special.name.lower()}\n")


def cmd_quantize(args, out) -> None:
    t = _read_raw(args.inp, "--in")
    q, stats = quantize_tensor(t, args.axis, args.format, args.mode)
    tensor_io.write(args.out, q)
    out.write(format_text_report(report_records([(args.mode, args.format, stats)])))


def cmd_dequantize(args, out) -> None:
    q = tensor_io.read(args.inp)
    if not isinstance(q, MxTensor):
        raise UsageError(f"--in: {args.inp} holds a raw tensor, nothing to dequantize")
    tensor_io.write(args.out, dequantize_tensor(q))
    out.write(f"dequantized {q.rows}x{q.cols} {q.format.name} -> {args.out}\n")


def cmd_gemm(args, out) -> None:
    a, b = tensor_io.read(args.a), tensor_io.read(args.b)
    raw = [t for t in (a, b) if not isinstance(t, MxTensor)]
    if raw and args.format is None:
        raise UsageError("--format is required when an operand is a raw tensor")
    ref_a = a if not isinstance(a, MxTensor) else dequantize_tensor(a)
    ref_b = b if not isinstance(b, MxTensor) else dequantize_tensor(b)
    if ref_a.shape[1] != ref_b.shape[0]:
        raise UsageError(f"--a/--b: shapes {ref_a.shape} and {ref_b.shape} do not contract")
    if not isinstance(a, MxTensor):
        a, _ = quantize_tensor(a, Axis.ROW, args.format, args.mode)
    if not isinstance(b, MxTensor):
        b, _ = quantize_tensor(b, Axis.COL, args.format, args.mode)
    c = mx_matmul(a, b, MmaConfig(args.path))
    ref = ref_a.astype(np.float64) @ ref_b.astype(np.float64)
    err = c.astype(np.float64) - ref
    denom = np.linalg.norm(ref)
    rel = float(np.linalg.norm(err) / denom) if denom else float(np.linalg.norm(err))
    if args.out:
        tensor_io.write(args.out, c)
    out.write(f"path={args.path} shape={c.shape[0]}x{c.shape[1]} "
              f"rel_frobenius_error={rel:.6e} max_abs_error={float(np.max(np.abs(err))):.6e}\n")


def cmd_analyze(args, out) -> None:
    t, meta = _source(args)
    formats = (args.format,) if args.format else FORMATS
    sweep = dtype_sweep(t, args.axis, args.mode, formats)
    records = report_records([(args.mode, f, s) for f, s in sweep.items()])
    meta.update(axis=str(args.axis))
    out.write(format_text_report(records, meta))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(format_kv_report(records, meta))


def cmd_compare_rounding(args, out) -> None:
    t, meta = _source(args)
    cmp = compare_rounding(t, args.format, args.axis)
    if cmp.saturation_rate(ScaleRoundingMode.ROUND_UP) != 0:
        raise InvariantViolation("round-up scaling saturated a block")
    records = report_records([(m, args.format, s) for m, s in cmp.stats.items()])
    meta.update(axis=str(args.axis))
    out.write(format_text_report(records, meta))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(format_kv_report(records, meta))


def cmd_train_demo(args, out) -> None:
    if args.steps <= 0:
        raise UsageError("--steps must be positive")
    factory = {"cfg1": TrainConfig.cfg1, "cfg2": TrainConfig.cfg2,
               "passthrough": TrainConfig.passthrough}[args.cfg]
    if args.format is not None and args.cfg == "passthrough":
        raise UsageError("--format cannot be combined with --cfg passthrough")
    try:
        cfg = factory(steps=args.steps, seed=args.seed, lr=args.lr, mode=args.mode,
                      model=args.model, mma=MmaConfig(args.path))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.format is not None:
        cfg.formats = {r: args.format for r in ROLES}
    result = train(cfg)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(result.trace_text())
    if args.ref_out:
        with open(args.ref_out, "w") as fh:
            fh.write(result.trace_text(reference=True))
    fmts = ",".join(f"{r}={'none' if f is None else f.name}" for r, f in cfg.formats.items())
    out.write(f"model={cfg.model} formats={fmts} mode={cfg.mode} steps={cfg.steps} seed={cfg.seed}\n")
    out.write(f"status={result.status} final_loss={result.final_loss():.6g} "
              f"ref_final_loss={result.ref_final_loss():.6g} n_saturated={result.n_saturated}\n")


COMMANDS = {
    "formats": cmd_formats,
    "quantize": cmd_quantize,
    "dequantize": cmd_dequantize,
    "gemm": cmd_gemm,
    "analyze": cmd_analyze,
    "compare-rounding": cmd_compare_rounding,
    "train-demo": cmd_train_demo,
}


def run(argv=None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"mxscale: error: {exc}", file=sys.stderr)
        return 1
    except InvariantViolation as exc:
        print(f"mxscale: internal error: {exc}", file=sys.stderr)
        return 2
    except (MxError, OSError) as exc:
        print(f"mxscale: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
