"""Command-line interface: ``pelee <command> ...``.

Exit status: 0 success, 2 usage error, 3 validation or shape error, 4 I/O error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import bench, cost, detector, graph as gir, models, weights as wio
from .tensor_ops import ShapeError

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_IO = 0, 2, 3, 4

DETECTOR_PRESETS = {
    "pelee_ssd": {},
    "pelee_ssd-3x3": {"head_kernel": 3},
    "pelee_ssd-nores-3x3": {"use_resblock": False, "head_kernel": 3},
    "pelee_ssd-38x38": {"use_resblock": False, "head_kernel": 3, "use_38x38": True},
}


class UsageError(Exception):
    pass


def all_presets() -> list[str]:
    return models.preset_names() + sorted(DETECTOR_PRESETS)


def default_input(model: str) -> int:
    return 304 if model in DETECTOR_PRESETS else 224


def build_model(name: str, input_size: int | None = None) -> gir.Graph:
    if name in DETECTOR_PRESETS:
        cfg = detector.DetectorConfig(input_size=input_size or 304, **DETECTOR_PRESETS[name])
        return detector.build_pelee_ssd(models.build_peleenet(), cfg)
    try:
        return models.build_preset(name)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None


def _load_graph(args) -> tuple[gir.Graph, str]:
    if getattr(args, "graph", None):
        return gir.load_graph(args.graph), Path(args.graph).stem
    if getattr(args, "model", None):
        return build_model(args.model, getattr(args, "input", None)), args.model
    raise UsageError("give --model or --graph")


def _input_size(args) -> int:
    if args.input:
        return args.input
    return default_input(getattr(args, "model", None) or "")


def _input_dims(g: gir.Graph, size: int) -> tuple[int, int, int, int]:
    return (1, g[g.inputs[0]].attrs.channels, size, size)


def _weights(args, g: gir.Graph) -> wio.WeightStore:
    if getattr(args, "weights", None):
        return wio.WeightStore.load(args.weights)
    return wio.init_weights(g, args.seed)


def _input_tensor(args, dims) -> np.ndarray:
    if getattr(args, "tensor", None):
        x = wio.read_tensor(args.tensor)
        if x.ndim == 3:
            x = x[None]
        return x
    if getattr(args, "image", None):
        img = wio.resize_nearest(wio.read_ppm(args.image), dims[2])
        mean = np.asarray(args.mean, dtype=np.float32).reshape(-1, 1, 1)
        std = np.asarray(args.std, dtype=np.float32).reshape(-1, 1, 1)
        return ((img - mean) / std)[None].astype(np.float32)
    rng = np.random.default_rng(args.input_seed)
    return rng.uniform(-1, 1, dims).astype(np.float32)


# -- commands -------------------------------------------------------------------

def cmd_build(args):
    g, _ = _load_graph(args)
    text = gir.dumps(gir.graph_to_dict(g))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if args.init == "random":
        if not args.weights_out:
            raise UsageError("--init random needs --weights-out")
        wio.init_weights(g, args.seed).save(args.weights_out)
    if args.out:
        print(f"wrote {args.out}: {len(g)} nodes")


def cmd_summary(args):
    g, _ = _load_graph(args)
    sys.stdout.write(cost.summarize(g, _input_dims(g, _input_size(args))))


def cmd_flops(args):
    g, name = _load_graph(args)
    report = cost.analyze(g, _input_dims(g, _input_size(args)))
    if args.json:
        doc = {"model": name, "input": _input_size(args)}
        doc.update(report.to_dict())
        sys.stdout.write(gir.dumps(doc))
        return
    print(f"model:            {name} @ {_input_size(args)}")
    print(f"MACs:             {report.total_flops:,} ({report.total_flops / 1e6:.1f} M)")
    print(f"params (total):   {report.total_params:,} ({report.total_params / 1e6:.3f} M)")
    print(f"params (learned): {report.learned_params:,}")
    print(f"conv layers:      {report.conv_layer_count}")


def cmd_fuse(args):
    g = gir.load_graph(args.graph)
    w = wio.WeightStore.load(args.weights)
    gir.check_weights(g, w)
    fg, fw = gir.fold_batchnorm(g, w)
    gir.save_graph(fg, args.out_graph)
    wio.WeightStore(fw).save(args.out_weights)
    print(f"folded {g.count('bn')} batch-norm nodes: {len(g)} -> {len(fg)} nodes")


def cmd_run(args):
    g, _ = _load_graph(args)
    w = _weights(args, g)
    x = _input_tensor(args, _input_dims(g, _input_size(args)))
    outs = gir.execute(g, w, x)
    out_dir = Path(args.out_dir) if args.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    for name, t in outs.items():
        flat = t.reshape(-1)
        print(f"{name}: shape {'x'.join(map(str, t.shape))} sum {float(flat.sum()):.6f} "
              f"argmax {int(flat.argmax())} max {float(flat.max()):.6f}")
        if out_dir:
            wio.write_tensor(out_dir / f"{name}.ntsr", t)


def cmd_bench(args):
    g, name = _load_graph(args)
    w = _weights(args, g)
    dims = _input_dims(g, _input_size(args))
    report = bench.run_benchmark(g, w, dims, args.images, args.runs, args.warmup, args.fused, model=name)
    sys.stdout.write(report.table())
    if args.json:
        Path(args.json).write_text(gir.dumps(report.to_dict()), encoding="utf-8")


def _detector_cfg(args) -> detector.DetectorConfig:
    return detector.DetectorConfig(
        input_size=args.input_size, use_38x38=args.use_38x38, num_classes=args.num_classes,
        score_threshold=getattr(args, "score_threshold", 0.01),
        nms_iou_threshold=getattr(args, "nms_iou", 0.45), top_k=getattr(args, "top_k", 200),
        head_kernel=getattr(args, "head_kernel", 1), use_resblock=not getattr(args, "no_resblock", False),
    )


def cmd_priors(args):
    cfg = _detector_cfg(args)
    priors = detector.generate_priors(cfg)
    print(f"priors: {len(priors)}")
    for (f, scales), a in zip(cfg.maps, cfg.boxes_per_location()):
        print(f"  {f}x{f}: scales {', '.join(map(str, scales))}; {a} boxes/location; {f * f * a} priors")
    if args.dump:
        with open(args.dump, "w", encoding="utf-8") as fh:
            for p in priors:
                fh.write(f"{p.cx:.6f} {p.cy:.6f} {p.w:.6f} {p.h:.6f}\n")


def cmd_detect(args):
    cfg = _detector_cfg(args)
    g = detector.build_pelee_ssd(models.build_peleenet(), cfg)
    w = _weights(args, g)
    x = _input_tensor(args, _input_dims(g, cfg.input_size))
    outs = gir.execute(g, w, x)
    loc, conf = detector.flatten_predictions(outs, cfg)
    dets = detector.postprocess(detector.class_probabilities(conf), loc, detector.generate_priors(cfg), cfg)
    text = detector.format_detections(dets)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {len(dets)} detections to {args.out}")
    else:
        sys.stdout.write(text)


def cmd_lr(args):
    try:
        print(f"{models.cosine_lr(args.epoch, args.base, args.total):.10g}")
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# -- parser -----------------------------------------------------------------------

def _model_args(p, graph=True):
    p.add_argument("--model", help=f"preset name ({', '.join(all_presets())})")
    if graph:
        p.add_argument("--graph", help="graph document written by `build`")
    p.add_argument("--input", type=int, help="square input size (default 224, detectors 304)")


def _weight_args(p):
    p.add_argument("--weights", help="weight file; default is random init from --seed")
    p.add_argument("--seed", type=int, default=0, help="seed for random weights")


def _tensor_args(p):
    p.add_argument("--tensor", help="input tensor file (NTSR)")
    p.add_argument("--image", help="input PPM image, resized to the network input")
    p.add_argument("--mean", type=float, nargs=3, default=(127.5, 127.5, 127.5))
    p.add_argument("--std", type=float, nargs=3, default=(127.5, 127.5, 127.5))
    p.add_argument("--input-seed", type=int, default=0, help="seed for a random input when no file is given")


def _detector_args(p):
    p.add_argument("--input-size", type=int, default=304)
    p.add_argument("--use-38x38", action="store_true")
    p.add_argument("--num-classes", type=int, default=21)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pelee", description="PeleeNet / Pelee-SSD graph engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="emit a graph document, optionally with random weights")
    _model_args(p, graph=False)
    p.add_argument("--out", help="graph output path (default stdout)")
    p.add_argument("--init", choices=["random"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--weights-out", help="weight file to write with --init random")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("summary", help="per-node table of shapes, params and MACs")
    _model_args(p)
    p.set_defaults(func=cmd_summary)

    p = sub.add_parser("flops", help="total MACs, params and conv layer count")
    _model_args(p)
    p.add_argument("--json", action="store_true", help="print the structured cost report")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("fuse", help="fold batch norm into convolutions")
    p.add_argument("--graph", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out-graph", required=True)
    p.add_argument("--out-weights", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("run", help="execute a graph on one input")
    _model_args(p)
    _weight_args(p)
    _tensor_args(p)
    p.add_argument("--out-dir", help="write every output as <name>.ntsr here")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="latency benchmark (batch 1)")
    _model_args(p)
    _weight_args(p)
    p.add_argument("--images", type=int, default=100, help="images per run")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--fused", action="store_true", help="fold batch norm before timing")
    p.add_argument("--json", help="also write the structured report here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("priors", help="generate default boxes")
    _detector_args(p)
    p.add_argument("--dump", help="write one 'cx cy w h' line per prior")
    p.set_defaults(func=cmd_priors)

    p = sub.add_parser("detect", help="run Pelee-SSD and print detections")
    _detector_args(p)
    _weight_args(p)
    _tensor_args(p)
    p.add_argument("--head-kernel", type=int, choices=[1, 3], default=1)
    p.add_argument("--no-resblock", action="store_true")
    p.add_argument("--score-threshold", type=float, default=0.01)
    p.add_argument("--nms-iou", type=float, default=0.45)
    p.add_argument("--top-k", type=int, default=200)
    p.add_argument("--out", help="write detections here instead of stdout")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("lr", help="cosine learning-rate schedule value")
    p.add_argument("--epoch", type=float, required=True)
    p.add_argument("--base", type=float, required=True)
    p.add_argument("--total", type=int, default=120)
    p.set_defaults(func=cmd_lr)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits on --help (0) and on bad arguments (2)
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        args.func(args)
    except UsageError as exc:
        print(f"pelee: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ShapeError, gir.GraphError, gir.WeightError, wio.FormatError, ValueError) as exc:
        print(f"pelee: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"pelee: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
