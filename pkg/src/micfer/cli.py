"""Command-line entry point: ``micfer <subcommand> ...``.

Every subcommand is deterministic given its flags; timing numbers are only
written when explicitly requested with ``--timing``.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from .codec import CodecConfig, decode_frame, encode_gop, parse_gop, parse_raw, write_gop, write_raw
from .evaluate import evaluate, measure_mi, probe_identity
from .mine import estimate_mi_converged, gaussian_mi, gaussian_sampler
from .model import load_checkpoint, load_identity, save_checkpoint, save_identity
from .synth import generate_dataset, load_manifest
from .train import (TrainConfig, dims_for, fit, identity_pretrain, load_config, load_split,
                    write_metrics)


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"{self.prog}: {message}")


def _read(path: str) -> bytes:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{path}: no such file")
    return p.read_bytes()


def _write(path: str, blob: bytes) -> None:
    Path(path).write_bytes(blob)


def _n_classes(manifest) -> int:
    return 1 + max(e.expression_label for e in manifest.train + manifest.test)


# ---------------------------------------------------------------------------


def cmd_encode(args) -> None:
    frames = parse_raw(_read(args.input))
    gop = encode_gop(list(frames), CodecConfig(args.mb, args.search))
    _write(args.output, write_gop(gop))


def cmd_decode(args) -> None:
    gop = parse_gop(_read(args.input))
    _write(args.output, write_raw([decode_frame(gop, args.frame)]))


def cmd_gen_data(args) -> None:
    m = generate_dataset(args.out, args.identities, args.classes, args.per_cell, args.profile,
                         args.seed, style_spread=args.style_spread)
    print(f"wrote {len(m.train)} train and {len(m.test)} test sequences to {args.out}")


def cmd_pretrain_id(args) -> None:
    m = load_manifest(args.data)
    train = load_split(m.root, m.train)
    dims = dims_for(train, TrainConfig(d_i=args.d_i), _n_classes(m))
    res = identity_pretrain(train, dims, epochs=args.epochs, seed=args.seed)
    _write(args.out, save_identity(res.encoder, dims))
    print(f"identity encoder held-out accuracy {res.heldout_accuracy:.4f}")


def cmd_train(args) -> None:
    if not Path(args.config).is_file():
        raise CliError(f"{args.config}: no such config file")
    config = load_config(args.config)
    encoder = load_identity(_read(args.id_ckpt))
    m = load_manifest(args.data)
    train = load_split(m.root, m.train, config.with_motion)
    dims = dims_for(train, config, _n_classes(m))
    enc_dims = (encoder.conv1.w.shape[1], encoder.fc.w.shape[1])
    if enc_dims != (dims.channels, dims.d_i):
        raise CliError(f"identity checkpoint has {enc_dims[0]} channels and d_i={enc_dims[1]}, "
                       f"but data/config need {dims.channels} and d_i={dims.d_i}")
    res = fit(config, train, encoder, dims.n_classes)
    _write(args.out, save_checkpoint(res.bundle))
    metrics_path = args.metrics or args.out + ".metrics.csv"
    write_metrics(metrics_path, res.metrics)
    print(f"best epoch {res.best_epoch}; checkpoint {args.out}; metrics {metrics_path}")


def _load_eval_inputs(args):
    bundle = load_checkpoint(_read(args.model))
    m = load_manifest(args.data)
    return bundle, load_split(m.root, m.split(args.split), bundle.dims.with_motion)


def cmd_eval(args) -> None:
    bundle, data = _load_eval_inputs(args)
    report = evaluate(bundle, data)
    probe = probe_identity(bundle, data, args.probe_epochs, args.seed)
    report.identity_probe_accuracy, report.chance = probe.accuracy, probe.chance
    report.mi_ze_zi = measure_mi(bundle, data, args.mi_steps, args.seed).value
    text = report.to_json(timing=args.timing)
    if args.report:
        Path(args.report).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_probe_id(args) -> None:
    bundle, data = _load_eval_inputs(args)
    probe = probe_identity(bundle, data, args.epochs, args.seed)
    print(json.dumps({"identity_probe_accuracy": probe.accuracy, "chance": probe.chance,
                      "n_identities": probe.n_classes}, sort_keys=True))


def cmd_mi_bench(args) -> None:
    rng = np.random.default_rng(args.seed)
    res = estimate_mi_converged(gaussian_sampler(args.rho, args.dim, args.batch), args.dim,
                                args.dim, args.steps, args.lr, rng)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "estimate", "joint_term", "marginal_log_term"])
    for i, e in enumerate(res.trace):
        w.writerow([i, repr(e.value), repr(e.joint_term), repr(e.marginal_log_term)])
    if args.out:
        Path(args.out).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    truth = gaussian_mi(args.rho, args.dim) if abs(args.rho) < 1 else float("inf")
    print(f"final estimate {res.value:.4f} nats (closed form {truth:.4f})", file=sys.stderr)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="micfer", description="Compressed-domain expression recognition toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("encode", help="RRAW frames -> RGOP")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--mb", type=int, default=8)
    s.add_argument("--search", type=int, default=4)
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("decode", help="one frame of an RGOP -> RRAW")
    s.add_argument("--input", required=True)
    s.add_argument("--frame", type=int, required=True)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("gen-data", help="write the synthetic dataset")
    s.add_argument("--identities", type=int, default=20)
    s.add_argument("--classes", type=int, default=7)
    s.add_argument("--per-cell", type=int, default=4)
    s.add_argument("--profile", choices=("ramp", "peak"), default="ramp")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--style-spread", type=float, default=0.0,
                   help="per-identity expression style strength (0 = shared templates)")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("pretrain-id", help="pretrain and freeze the identity encoder")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--d-i", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_pretrain_id)

    s = sub.add_parser("train", help="joint training from a key=value config")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--id-ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--metrics", help="metrics CSV path (default: OUT.metrics.csv)")
    s.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "accuracy, probe and MI report"),
                                 ("probe-id", cmd_probe_id, "identity probe on z_E")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--model", required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--split", choices=("train", "test"), default="test" if name == "eval" else "train")
        s.add_argument("--seed", type=int, default=0)
        if name == "eval":
            s.add_argument("--report")
            s.add_argument("--timing", action="store_true", help="include fps in the report")
            s.add_argument("--probe-epochs", type=int, default=1000)
            s.add_argument("--mi-steps", type=int, default=3000)
        else:
            s.add_argument("--epochs", type=int, default=1000)
        s.set_defaults(func=func)

    s = sub.add_parser("mi-bench", help="MINE on correlated Gaussians")
    s.add_argument("--rho", type=float, required=True)
    s.add_argument("--dim", type=int, default=1)
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--batch", type=int, default=512)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--out")
    s.set_defaults(func=cmd_mi_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, LookupError, ArithmeticError, RuntimeError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
