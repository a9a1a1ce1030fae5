"""Command-line entry point.

Exit codes: 0 success, 1 other toolkit error, 2 configuration error,
3 data/input error, 4 numeric error, 5 integrity error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from . import harness
from .bank import load_bank, save_bank
from .defenses import DefenseTransform
from .errors import AdvPTError, InputError
from .prompts import load_context, save_context

log = logging.getLogger("advpt")


def _config(args) -> harness.RunConfig:
    cfg = harness.load_config(args.config) if args.config else harness.RunConfig()
    changes = {}
    if getattr(args, "out", None):
        changes["output"] = args.out
    if getattr(args, "defense", None):
        changes["defenses"] = tuple(DefenseTransform(kind=k) for k in args.defense)
    return cfg.replace(**changes) if changes else cfg


def _out(cfg: harness.RunConfig) -> Path:
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_bank_build(args) -> None:
    cfg = _config(args)
    s = harness.Session(cfg)
    bank = s.bank()
    out = _out(cfg)
    save_bank(bank, out / "bank.bin")
    harness.write_config(cfg, out / "config.yaml")
    print(f"wrote {out / 'bank.bin'}  N={len(bank)} L={bank.dim} K={len(bank.class_names)}")


def cmd_bank_inspect(args) -> None:
    bank = load_bank(args.path)
    info = {"N": len(bank), "L": bank.dim, "K": len(bank.class_names), "class_names": bank.class_names,
            "format_version": bank.format_version, "provenance": bank.provenance, "sha256": bank.content_hash()}
    print(json.dumps(info, indent=2, sort_keys=True))


def cmd_tune(args) -> None:
    cfg = _config(args)
    s = harness.Session(cfg)
    bank = load_bank(args.bank) if args.bank else s.bank()
    ctx, trace = s.tune(bank)
    out = _out(cfg)
    save_context(ctx, out / "context.bin")
    harness.write_config(cfg, out / "config.yaml")
    (out / "loss_trace.json").write_text(json.dumps(trace) + "\n")
    print(f"wrote {out / 'context.bin'}  final loss {trace[-1] if trace else float('nan'):.4f}")


def cmd_eval(args) -> None:
    cfg = _config(args)
    if args.context is None:
        report = harness.run_pipeline(cfg)
    else:
        s = harness.Session(cfg)
        ctx = load_context(args.context, expected_dim=s.pair.token_dim)
        report = harness.evaluate_context(cfg, ctx, session=s)
    print(harness.format_table(report), end="")


def cmd_sweep_m(args) -> None:
    values = [int(v) for v in args.values.split(",") if v.strip()]
    report = harness.m_sweep(_config(args), values)
    print(harness.format_table(report), end="")


def cmd_sweep_tradeoff(args) -> None:
    print(harness.format_table(harness.tradeoff_sweep(_config(args))), end="")


def cmd_shift(args) -> None:
    cfg = _config(args)
    styles = [s for s in args.styles.split(",") if s]
    ctx = None
    session = None
    if args.context:
        session = harness.Session(cfg)
        ctx = load_context(args.context, expected_dim=session.pair.token_dim)
    print(harness.format_table(harness.run_shift(cfg, styles, session=session, ctx=ctx)), end="")


def cmd_interpret(args) -> None:
    from .miniclip import load_bundled
    from .encoders import load_checkpoint

    table = (load_checkpoint(args.checkpoint) if args.checkpoint else load_bundled()).table
    ctx = load_context(args.context, expected_dim=table.dim)
    print(harness.format_nearest(harness.nearest_words(ctx, table, args.top)), end="")


def cmd_report(args) -> None:
    report = harness.load_report(args.path)
    if args.out:
        harness.emit_report(report, args.out, args.format)
    elif args.format == "json":
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    else:
        print(harness.format_table(report), end="")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advpt", description="Adversarial prompt tuning toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, defense=True):
        sp.add_argument("--config", help="YAML or JSON run config")
        sp.add_argument("--out", help=f"output directory (default ${harness.OUTPUT_ENV} or ./{harness.DEFAULT_OUTPUT})")
        if defense:
            sp.add_argument("--defense", action="append", choices=["identity", "rescale", "super_resolution"],
                            help="defense applied at evaluation time (repeatable)")
        return sp

    bank = sub.add_parser("bank", help="build or inspect an embedding bank").add_subparsers(dest="bank_cmd", required=True)
    with_config(bank.add_parser("build"), defense=False).set_defaults(fn=cmd_bank_build)
    bi = bank.add_parser("inspect")
    bi.add_argument("path")
    bi.set_defaults(fn=cmd_bank_inspect)

    t = with_config(sub.add_parser("tune", help="tune a context on a bank"), defense=False)
    t.add_argument("--bank", help="existing bank file (built from the config if omitted)")
    t.set_defaults(fn=cmd_tune)

    e = with_config(sub.add_parser("eval", help="evaluate fixed and tuned prompts (runs the full pipeline without --context)"))
    e.add_argument("--context")
    e.set_defaults(fn=cmd_eval)

    sweep = sub.add_parser("sweep", help="parameter sweeps").add_subparsers(dest="sweep_cmd", required=True)
    sm = with_config(sweep.add_parser("m", help="robust accuracy vs context length"))
    sm.add_argument("--values", default="1,4,8,16")
    sm.set_defaults(fn=cmd_sweep_m)
    with_config(sweep.add_parser("tradeoff", help="adversarial vs clean tuning")).set_defaults(fn=cmd_sweep_tradeoff)

    sh = with_config(sub.add_parser("shift", help="evaluate under synthetic domain shift"))
    sh.add_argument("--styles", default="standard,jitter,sketch")
    sh.add_argument("--context")
    sh.set_defaults(fn=cmd_shift)

    it = sub.add_parser("interpret", help="nearest vocabulary words to each context vector")
    it.add_argument("context")
    it.add_argument("--top", type=int, default=5)
    it.add_argument("--checkpoint")
    it.set_defaults(fn=cmd_interpret)

    r = sub.add_parser("report", help="render a stored report")
    r.add_argument("path")
    r.add_argument("--format", choices=["json", "table"], default="table")
    r.add_argument("--out")
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    warnings.simplefilter("default")
    try:
        args.fn(args)
    except AdvPTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return InputError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
