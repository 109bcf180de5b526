"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench, dataio
from .condense import condensed_size
from .errors import BundleError, NumericError, ProtocolError, StructuralError
from .pipeline import FIELD_DOCS, TgccConfig, intervention_sequence, loss_report, report_tsv, run_condense

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load_config(args) -> TgccConfig:
    data = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        data = json.loads(path.read_text())
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    return TgccConfig.from_dict(data)


def _eval_settings(cfg: TgccConfig) -> bench.EvalSettings:
    return bench.EvalSettings(
        hidden=cfg.hidden, steps=cfg.eval_steps, lr=cfg.eval_lr, weight_decay=cfg.eval_weight_decay,
        threshold=cfg.eval_threshold, link_test_fraction=cfg.link_test_fraction,
    )


def cmd_condense(args) -> int:
    cfg = _load_config(args)
    g = dataio.load_bundle(args.bundle)
    on_epoch = (lambda row: print(json.dumps(row, sort_keys=True), flush=True)) if args.verbose else None
    art = run_condense(g, cfg, on_epoch)
    out = Path(args.out)
    prov = {"kind": "condensed", "source": g.meta.get("provenance", {}), "seed": cfg.seed}
    dataio.save_condensed(art.syn, out, art.config_json, loss_report(art), prov)
    dataio.save_encoder(art.encoder, out / "encoder.bin")
    print(f"condensed {g.n} -> {art.syn.m} nodes: {out}")
    return EXIT_OK


def cmd_augment(args) -> int:
    cfg = _load_config(args)
    g = dataio.load_bundle(args.bundle)
    g_aug = g
    for _, g_aug in intervention_sequence(g, cfg, args.refreshes):
        pass
    dataio.save_bundle(g_aug, args.out, {**g.meta.get("provenance", {}), "augmented": {"rho": cfg.rho, "epsilon": cfg.epsilon, "seed": cfg.seed}})
    print(f"augmented bundle: {args.out}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    g = dataio.load_bundle(args.bundle)
    m = args.m if args.m is not None else condensed_size(g.n, args.ratio, g.num_classes)
    if args.method == "random":
        syn = bench.coreset_random(g, m, args.seed)
    elif args.method == "herding":
        syn = bench.coreset_herding(g, m)
    else:
        syn = bench.coreset_kcenter(g, m, args.seed)
    config = json.dumps({"baseline": args.method, "m": m, "seed": args.seed}, sort_keys=True, indent=2) + "\n"
    dataio.save_condensed(syn, args.out, config, [], {"kind": f"coreset-{args.method}"})
    print(f"{args.method} coreset of {m} nodes: {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    cond = dataio.load_condensed(args.condensed)
    g = dataio.load_bundle(args.bundle)
    settings = _eval_settings(cfg)
    seeds = args.seeds
    if args.protocol == "node":
        report = bench.eval_node_classification(cond.syn, g, seeds, settings)
    elif args.protocol == "link":
        report = bench.eval_link_prediction(cond.syn, g, seeds, settings)
    else:
        report = bench.eval_transfer(cond.syn, g, seeds, settings, link=args.protocol == "transfer-link")
    text = report.to_json()
    if args.out:
        dataio._atomic_write(Path(args.out), text.encode())
    sys.stdout.write(text)
    return EXIT_OK


def cmd_import(args) -> int:
    g = dataio.import_planetoid(args.raw, args.name, seed=args.seed, normalize=not args.raw_features)
    if args.max_nodes:
        g = dataio.subsample(g, args.max_nodes, args.seed)
    dataio.save_bundle(g, args.out)
    print(f"imported n={g.n} d={g.d} C={g.num_classes} edges={g.num_edges()}: {args.out}")
    return EXIT_OK


def cmd_gen(args) -> int:
    g = dataio.gen_sbm(args.blocks, args.p_in, args.p_out, args.d, args.seed)
    dataio.save_bundle(g, args.out)
    print(f"sbm n={g.n} edges={g.num_edges()}: {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    if args.config_defaults:
        for key, value in json.loads(TgccConfig().to_json()).items():
            print(f"{key}\t{json.dumps(value)}\t{FIELD_DOCS.get(key, '')}")
        return EXIT_OK
    if args.loss:
        path = Path(args.loss)
        trace_file = path / "loss_trace.json" if path.is_dir() else path
        if not trace_file.is_file():
            raise FileNotFoundError(f"loss trace not found: {trace_file}")
        sys.stdout.write(report_tsv(json.loads(trace_file.read_text())))
        return EXIT_OK
    if args.eval:
        reports = []
        for p in args.eval:
            path = Path(p)
            if not path.is_file():
                raise FileNotFoundError(f"eval report not found: {path}")
            reports.append(bench.EvalReport(**json.loads(path.read_text())))
        sys.stdout.write(bench.summary_tsv(reports))
        return EXIT_OK
    raise UsageError("report needs --loss, --eval or --config-defaults")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tgcc", description="Graph condensation with spectral intervention and causal contrast.")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    c = sub.add_parser("condense", help="condense a bundle")
    c.add_argument("bundle")
    c.add_argument("--config")
    c.add_argument("--seed", type=int)
    c.add_argument("--out", required=True)
    c.add_argument("--verbose", action="store_true", help="one JSON line per epoch on stdout")
    c.set_defaults(func=cmd_condense)

    a = sub.add_parser("augment", help="write the intervened graph for inspection")
    a.add_argument("bundle")
    a.add_argument("--config")
    a.add_argument("--seed", type=int)
    a.add_argument("--refreshes", type=int, default=1, help="number of Theta refreshes")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_augment)

    b = sub.add_parser("baseline", help="coreset baseline")
    b.add_argument("bundle")
    b.add_argument("--method", choices=("random", "herding", "kcenter"), required=True)
    size = b.add_mutually_exclusive_group(required=True)
    size.add_argument("--ratio", type=float)
    size.add_argument("--m", type=int)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_baseline)

    e = sub.add_parser("eval", help="evaluate a condensed bundle")
    e.add_argument("condensed")
    e.add_argument("bundle", help="target graph bundle")
    e.add_argument("--protocol", choices=("node", "link", "transfer", "transfer-link"), default="node")
    e.add_argument("--seeds", type=int, nargs="+", default=[0])
    e.add_argument("--config")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval, seed=None)

    i = sub.add_parser("import", help="import raw Planetoid files")
    i.add_argument("format", choices=("planetoid",))
    i.add_argument("raw")
    i.add_argument("--name")
    i.add_argument("--seed", type=int, default=0, help="split seed for LINQS-format input")
    i.add_argument("--raw-features", action="store_true", help="skip row normalization")
    i.add_argument("--max-nodes", type=int, help="subsample to at most this many nodes (non-reproducing)")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_import)

    gsub = sub.add_parser("gen", help="generate a synthetic graph")
    gsub.add_argument("kind", choices=("sbm",))
    gsub.add_argument("--blocks", type=int, nargs="+", required=True)
    gsub.add_argument("--p-in", type=float, required=True)
    gsub.add_argument("--p-out", type=float, required=True)
    gsub.add_argument("--d", type=int, default=16)
    gsub.add_argument("--seed", type=int, default=0)
    gsub.add_argument("--out", required=True)
    gsub.set_defaults(func=cmd_gen)

    r = sub.add_parser("report", help="print loss or evaluation tables")
    r.add_argument("--loss", help="condensed bundle or loss_trace.json")
    r.add_argument("--eval", nargs="+", help="EvalReport JSON files")
    r.add_argument("--config-defaults", action="store_true", help="list every config key with its default")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"tgcc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"tgcc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"tgcc: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (BundleError, StructuralError, ProtocolError, FileNotFoundError, json.JSONDecodeError) as exc:
        code = getattr(exc, "code", "data_error")
        print(f"tgcc: data error [{code}]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, TypeError) as exc:
        print(f"tgcc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
