"""``railnet`` command line.

Exit codes: 0 success, 1 usage error, 2 data error (missing or malformed
input), 3 runtime error. Machine-readable commands print one JSON document
on stdout; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import graph, imgpipe, quant, report, tile
from .fuse import fuse_pass

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _load_model(path):
    try:
        return graph.load_model(path)
    except (OSError, graph.ModelFormatError) as e:
        raise DataError(f"cannot load model {path}: {e}") from None


def _load_plan(path):
    try:
        return quant.load_plan(path)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot load plan {path}: {e}") from None


def _load_image(path):
    try:
        return imgpipe.load_normalize(path)
    except (OSError, imgpipe.ImageError) as e:
        raise DataError(str(e)) from None


def _load_dir(data_dir):
    try:
        paths = imgpipe.list_images(data_dir)
    except OSError as e:
        raise DataError(f"cannot read {data_dir}: {e}") from None
    if not paths:
        raise DataError(f"no PNG/PPM images in {data_dir}")
    return [_load_image(p) for p in paths]


def _fx_model(model, plan):
    fused = fuse_pass(model)
    missing = [layer.id for layer in fused.layers if layer.id not in plan.layers]
    if missing:
        raise DataError(f"plan does not cover layers {missing[:3]}; was it made for this model?")
    return quant.quantize_model(fused, plan)


# ----------------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------------

def cmd_init(args):
    model = graph.canonical_railnet(args.seed, init="zeros" if args.zeros else "he")
    graph.save_model(model, args.out)
    _emit({"model": str(args.out), "layers": len(model.layers), "macs": tile.mac_count(model)})


def cmd_fuse(args):
    fused = fuse_pass(_load_model(args.model))
    graph.save_model(fused, args.out)
    _emit({"model": str(args.out), "layers": len(fused.layers)})


def cmd_calibrate(args):
    fused = fuse_pass(_load_model(args.model))
    images = _load_dir(args.data_dir)
    stats = quant.calibrate(fused, images, workers=args.workers)
    plan = quant.plan_formats(stats)
    quant.save_plan(plan, args.out)
    _emit({"plan": str(args.out), "images": len(images), "input_q": str(plan.input_q)})


def cmd_quantize(args):
    model = _load_model(args.model)
    plan = _load_plan(args.qplan)
    images = _load_dir(args.data_dir)
    fxm = _fx_model(model, plan)
    out = quant.parity_report(model, fxm, images)
    out["weight_saturation_count"] = fxm.saturation_count
    if args.out:
        plan.tiling = tile.search_tilings(fxm.graph, plan, args.budget)
        quant.save_plan(plan, args.out)
        out["plan"] = str(args.out)
    _emit(out)


def cmd_infer(args):
    model = _load_model(args.model)
    image = _load_image(args.image)
    macs = tile.mac_count(model)
    out = {"mode": args.mode, "macs": macs}
    if args.mode == "float":
        run = lambda: graph.forward_ref(model, image)  # noqa: E731
        res = run()
        out["logits"] = res.logits.tolist()
    else:
        if not args.qplan:
            raise UsageError(f"--{args.mode} needs --qplan")
        fxm = _fx_model(model, _load_plan(args.qplan))
        if args.mode == "naive":
            run = lambda: quant.fx_forward_naive(fxm, image)  # noqa: E731
        else:
            cfgs = fxm.plan.tiling or tile.search_tilings(fxm.graph, fxm.plan, args.budget)
            run = lambda: tile.run_tiled(fxm, image, cfgs, args.budget).result  # noqa: E731
        res = run()
        out["raw_logits"] = res.raw_logits.tolist()
        out["logits_q"] = str(res.logits_q)
        out["logits"] = res.logits.tolist()
    seconds = tile.median_latency(run, runs=args.runs, warmup=args.warmup)
    out.update(
        class_id=res.class_id,
        class_name=model.class_names[res.class_id],
        confidence=res.confidence,
        latency_ms=seconds * 1e3,
        gops=2 * macs / seconds / 1e9,
    )
    _emit(out)


def cmd_bench(args):
    model = _load_model(args.model)
    fxm = _fx_model(model, _load_plan(args.qplan))
    image = _load_image(args.image)
    _emit(tile.bench(fxm, image, budget=args.budget, power_watts=args.power_watts,
                     runs=args.runs, warmup=args.warmup))


def cmd_dataset_split(args):
    if args.list:
        paths = [s for s in Path(args.list).read_text().splitlines() if s.strip()]
    else:
        paths = imgpipe.list_images(args.source)
    try:
        split = imgpipe.split_dataset(paths, args.seed)
    except ValueError as e:
        raise DataError(str(e)) from None
    files = imgpipe.write_manifests(split, args.out)
    _emit({name: {"count": len(items), "manifest": str(f)}
           for name, items, f in zip(("train", "test", "val"), split, files)})


def cmd_dataset_augment(args):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, path in enumerate(args.images):
        try:
            img = imgpipe.load_image(path)
        except (OSError, imgpipe.ImageError) as e:
            raise DataError(str(e)) from None
        seed = args.seed + i  # per-image seed
        if args.random:
            spec = imgpipe.random_spec(seed, args.noise or imgpipe.DEFAULT_NOISE_SIGMA)
        else:
            spec = imgpipe.AugmentSpec(blur=args.blur, noise_sigma=args.noise, flip=args.flip,
                                       rotate=args.rotate, seed=seed)
        dest = out_dir / f"{Path(path).stem}_aug.png"
        imgpipe.save_png(imgpipe.augment(img, spec), dest)
        written.append(str(dest))
    _emit({"written": written})


def cmd_dataset_synth(args):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    written = []
    for i in range(args.count):
        dest = out_dir / f"synth_{i:05d}.png"
        imgpipe.save_png(imgpipe.synthetic_rail_image(rng), dest)
        written.append(str(dest))
    _emit({"written": len(written), "dir": str(out_dir)})


def cmd_serve(args):
    try:
        Path(args.log).touch()
    except OSError as e:
        raise DataError(f"cannot open log {args.log}: {e}") from None
    return report.serve(args.listen, args.log)


def cmd_send(args):
    ts = args.timestamp_ms if args.timestamp_ms is not None else int(time.time() * 1000)
    try:
        r = report.FaultReport(args.device, ts, args.position_mm, args.class_id, args.confidence_bp)
    except ValueError as e:
        raise UsageError(str(e)) from None
    ack = report.send(args.addr, r, args.timeout_ms)
    _emit({"acked": True, "ack_crc": ack[report.HEADER.size:-report.CRC.size].hex()})


def cmd_reports(args):
    try:
        listing = report.list_reports(args.log, args.class_id, args.since_ms, args.until_ms)
    except OSError as e:
        raise DataError(f"cannot read {args.log}: {e}") from None
    for lineno, msg in listing.errors:
        print(f"{args.log}:{lineno}: malformed line: {msg}", file=sys.stderr)
    _emit({"reports": [r.__dict__ for r in listing.reports],
           "malformed_lines": [n for n, _ in listing.errors]})


# ----------------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="railnet", description="Fixed-point railway fault classifier toolkit.")
    p.add_argument("--config", help="JSON file of default flag values (flags win)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    cmds = {}

    def add(name, fn, **kw):
        sp = sub.add_parser(name, **kw)
        sp.set_defaults(func=fn)
        cmds[name] = sp
        return sp

    def seed(sp):
        sp.add_argument("--seed", type=int, default=42)

    def budget(sp):
        sp.add_argument("--budget", type=int, default=tile.DEFAULT_BUDGET_BYTES,
                        help="on-chip buffer bytes (default: 230.5 BRAM36 blocks)")

    def timing(sp):
        sp.add_argument("--runs", type=int, default=10)
        sp.add_argument("--warmup", type=int, default=3)

    sp = add("init", cmd_init, help="write the canonical model with seeded weights")
    seed(sp)
    sp.add_argument("--zeros", action="store_true", help="all-zero weights")
    sp.add_argument("-o", "--out", required=True)

    sp = add("fuse", cmd_fuse, help="fold BN and ReLU into convolutions")
    sp.add_argument("model")
    sp.add_argument("-o", "--out", required=True)

    sp = add("calibrate", cmd_calibrate, help="calibrate ranges and write a .qplan")
    sp.add_argument("model")
    sp.add_argument("data_dir")
    sp.add_argument("-o", "--out", required=True)
    sp.add_argument("--workers", type=int, default=1)

    sp = add("quantize", cmd_quantize, help="quantize and report float/fixed parity")
    sp.add_argument("model")
    sp.add_argument("qplan")
    sp.add_argument("data_dir")
    sp.add_argument("-o", "--out", help="write the plan with searched tilings here")
    budget(sp)

    sp = add("infer", cmd_infer, help="classify one image")
    sp.add_argument("model")
    sp.add_argument("image")
    sp.add_argument("--qplan")
    mode = sp.add_mutually_exclusive_group()
    for m in ("tiled", "naive", "float"):
        mode.add_argument(f"--{m}", dest="mode", action="store_const", const=m)
    sp.set_defaults(mode="tiled")
    budget(sp)
    timing(sp)

    sp = add("bench", cmd_bench, help="tiled inference counters, latency and GOPS")
    sp.add_argument("model")
    sp.add_argument("qplan")
    sp.add_argument("image")
    sp.add_argument("--power-watts", type=float)
    budget(sp)
    timing(sp)

    sp = add("dataset", None, help="dataset preparation")
    dsub = sp.add_subparsers(dest="dataset_command", required=True, parser_class=_Parser)
    ds = dsub.add_parser("split", help="write train/test/val manifests")
    ds.set_defaults(func=cmd_dataset_split)
    src = ds.add_mutually_exclusive_group(required=True)
    src.add_argument("--source", help="directory of images")
    src.add_argument("--list", help="file with one path per line")
    ds.add_argument("-o", "--out", required=True)
    seed(ds)
    da = dsub.add_parser("augment", help="augment images into PNGs")
    da.set_defaults(func=cmd_dataset_augment)
    da.add_argument("images", nargs="+")
    da.add_argument("-o", "--out", required=True)
    da.add_argument("--blur", action="store_true")
    da.add_argument("--noise", type=float, help="Gaussian sigma in pixel units")
    da.add_argument("--flip", choices=("h", "v"))
    da.add_argument("--rotate", type=int, default=0, choices=(0, 1, 2, 3))
    da.add_argument("--random", action="store_true", help="draw the ops from the seed")
    seed(da)
    dy = dsub.add_parser("synth", help="generate synthetic track images")
    dy.set_defaults(func=cmd_dataset_synth)
    dy.add_argument("count", type=int)
    dy.add_argument("-o", "--out", required=True)
    seed(dy)
    cmds["dataset split"], cmds["dataset augment"], cmds["dataset synth"] = ds, da, dy

    sp = add("serve", cmd_serve, help="receive fault reports over TCP")
    sp.add_argument("--listen", default="127.0.0.1:5555")
    sp.add_argument("--log", default="reports.jsonl")

    sp = add("send", cmd_send, help="send one fault report")
    sp.add_argument("--addr", default="127.0.0.1:5555")
    sp.add_argument("--device", type=int, default=1)
    sp.add_argument("--position-mm", type=int, required=True)
    sp.add_argument("--class-id", type=int, required=True)
    sp.add_argument("--confidence-bp", type=int, required=True)
    sp.add_argument("--timestamp-ms", type=int)
    sp.add_argument("--timeout-ms", type=int, default=2000)

    sp = add("reports", cmd_reports, help="list logged reports")
    sp.add_argument("log")
    sp.add_argument("--class-id", type=int)
    sp.add_argument("--since-ms", type=int)
    sp.add_argument("--until-ms", type=int)
    return p, cmds


def _apply_config(parser, cmds, argv):
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read config {args.config}: {e}") from None
    if not isinstance(cfg, dict):
        raise DataError("config file must hold a JSON object")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    name = args.command + (f" {args.dataset_command}" if args.command == "dataset" else "")
    known = {a.dest for a in cmds[name]._actions}
    cmds[name].set_defaults(**{k: v for k, v in cfg.items() if k in known})
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser, cmds = build_parser()
    try:
        try:
            args = _apply_config(parser, cmds, argv)
        except SystemExit as e:  # argparse: --help or a usage error
            return e.code if isinstance(e.code, int) else EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        rc = args.func(args)
        return EXIT_OK if rc is None else rc
    except UsageError as e:
        print(f"railnet: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, imgpipe.ImageError, graph.ModelFormatError) as e:
        print(f"railnet: {e}", file=sys.stderr)
        return EXIT_DATA
    except (tile.BudgetError, OverflowError, report.SendError, OSError, ValueError) as e:
        print(f"railnet: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
