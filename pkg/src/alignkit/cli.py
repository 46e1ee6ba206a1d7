"""Command-line interface: batch commands emitting JSON reports.

Subcommands: synth, align-eval, rectify, sr, fit, gradcheck. Reports go to
stdout or --out; every report echoes the resolved configuration. Exit codes:
0 success, 1 runtime error (structured message on stderr), 2 usage.
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, backend, harness, ops, pipeline, synthdata, tensor_io
from .errors import DataFormatError, ShapeError
from .flow import FlowEstimatorConfig


def _emit(report, out):
    text = json.dumps(report, indent=1, default=_json_default)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def _report(command, config, result, t0):
    return {
        "command": command,
        "version": __version__,
        "backend": backend.backend_name(),
        "config": config,
        "result": result,
        "wall_clock_s": round(time.perf_counter() - t0, 3),
    }


def _cmd_synth(args):
    t0 = time.perf_counter()
    scene = synthdata.SceneParams(
        seed=args.seed, size=(args.size, args.size), frames=args.frames,
        velocity=tuple(args.velocity), jitter=args.jitter)
    deg = synthdata.DegradeParams(
        focal_crop=args.crop, scale=args.scale, blur_sigma=args.blur,
        noise_sigma=args.noise, color_gain=tuple(args.color_gain),
        color_offset=tuple(args.color_offset), misalign=tuple(args.misalign),
        seed=args.seed)
    seq = synthdata.make_paired_sequence(scene, deg)
    synthdata.write_dataset(seq, args.out)
    config = {"scene": vars(scene) | {"size": list(scene.size)},
              "degrade": vars(deg)}
    result = {"dir": str(args.out), "frames": seq.frames,
              "lr_size": list(seq.lr[0].shape), "hr_size": list(seq.hr[0].shape)}
    _emit(_report("synth", config, result, t0), args.out_report)
    return 0


def _cmd_align_eval(args):
    t0 = time.perf_counter()
    seq = synthdata.read_dataset(args.dataset)
    heads = deform = None
    channels = harness.BENCH_FEATURE_CHANNELS
    if args.weights:
        heads, deform, channels = harness.load_bench_weights(args.weights)
    bench = harness.build_alignment_benchmark(
        seq, flow_bias=tuple(args.bias), wavy_amplitude=args.wavy,
        max_pairs=args.pairs, seed=args.seed, feature_channels=channels)
    if heads is None:
        heads = harness.init_resflow_heads(bench, args.seed)
    if args.ablate:
        rows = harness.alignment_rows(bench, heads, deform)
    else:
        rows = {"base": harness.alignment_rows(bench)["base"]}
    config = {"dataset": str(args.dataset), "bias": list(args.bias),
              "wavy": args.wavy, "pairs": args.pairs, "seed": args.seed,
              "weights": args.weights, "ablate": args.ablate}
    _emit(_report("align-eval", config, {"rows": rows}, t0), args.out)
    return 0


def _cmd_rectify(args):
    t0 = time.perf_counter()
    seq = synthdata.read_dataset(args.dataset)
    report = harness.rectification_report(seq)
    if args.out_dir:
        from .rectify import rectify_target
        d = Path(args.out_dir)
        d.mkdir(parents=True, exist_ok=True)
        manifest = {"frames": seq.frames, "scale": seq.degrade.scale, "files": []}
        for t in range(seq.frames):
            res = rectify_target(seq.lr[t], seq.hr[t], seq.degrade.scale)
            tensor_io.write_image(d / f"target_{t:04d}.ppm", res.y_w)
            tensor_io.write_image(d / f"mask_{t:04d}.pgm", res.mask)
            tensor_io.write_vten(d / f"flow_{t:04d}.vten", res.flow)
            manifest["files"].append({
                "target": f"target_{t:04d}.ppm", "mask": f"mask_{t:04d}.pgm",
                "flow": f"flow_{t:04d}.vten", "low_texture": res.low_texture})
        (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
    config = {"dataset": str(args.dataset), "out_dir": args.out_dir}
    _emit(_report("rectify", config, report, t0), args.out)
    return 0


def _cmd_sr(args):
    t0 = time.perf_counter()
    seq = synthdata.read_dataset(args.dataset)
    scale = args.scale or seq.degrade.scale
    wpath = Path(args.weights)
    if wpath.is_dir():
        wpath = wpath / "weights.vtar"
    weights = pipeline.load_pipeline_weights(wpath)
    outputs = pipeline.vsr_forward(seq.lr, scale, weights)
    if args.out_dir:
        d = Path(args.out_dir)
        d.mkdir(parents=True, exist_ok=True)
        for t, y in enumerate(outputs):
            tensor_io.write_image(d / f"sr_{t:04d}.ppm", y)
    refs = seq.hr if seq.hr[0].shape == outputs[0].shape else None
    config = {"dataset": str(args.dataset), "weights": str(args.weights),
              "scale": scale, "out_dir": args.out_dir}
    if refs is not None:
        result = harness.metric_report(outputs, refs, experiment="sr", config=config,
                                       wall_clock=round(time.perf_counter() - t0, 3))
    else:
        result = {"experiment": "sr", "config": config, "frames": len(outputs),
                  "note": "no same-size HR references in dataset; metrics skipped"}
    result["output_size"] = list(outputs[0].shape)
    _emit(_report("sr", config, result, t0), args.out)
    return 0


def _cmd_fit(args):
    t0 = time.perf_counter()
    seq = synthdata.read_dataset(args.dataset)
    bench = harness.build_alignment_benchmark(
        seq, flow_bias=tuple(args.bias), wavy_amplitude=args.wavy,
        max_pairs=args.pairs, seed=args.seed)
    result = {"base_epe": harness.base_epe(bench)}
    heads, res = harness.fit_resflow_heads(bench, budget=args.budget, seed=args.seed)
    result["resflow"] = {
        "initial_loss": res.initial_loss, "final_loss": res.final_loss,
        "evaluations": res.evaluations,
        "trace_tail": [float(v) for v in res.trace[-5:]],
    }
    deform = None
    if args.target == "align":
        flows = harness.refined_flows(bench, heads)
        deform, dres = harness.fit_deform_head(bench, flows,
                                               budget=args.budget, seed=args.seed)
        result["deform"] = {
            "initial_loss": dres.initial_loss, "final_loss": dres.final_loss,
            "evaluations": dres.evaluations,
        }
    if args.weights_out:
        harness.save_bench_weights(args.weights_out, heads, deform,
                                   bench.feature_channels)
        result["weights"] = str(args.weights_out)
    config = {"dataset": str(args.dataset), "target": args.target,
              "budget": args.budget, "seed": args.seed, "bias": list(args.bias),
              "wavy": args.wavy, "pairs": args.pairs}
    _emit(_report("fit", config, result, t0), args.out)
    return 0


def _cmd_gradcheck(args):
    t0 = time.perf_counter()
    result = harness.gradient_suite(points=args.points, seed=args.seed)
    config = {"points": args.points, "seed": args.seed}
    _emit(_report("gradcheck", config, result, t0), args.out)
    return 0 if result["pass"] else 1


def build_parser():
    p = argparse.ArgumentParser(
        prog="alignkit",
        description="Desk-scale real-world VSR toolkit: synthetic data, "
                    "alignment refinement, target rectification, recurrent SR.")
    p.add_argument("--version", action="version", version=f"alignkit {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic paired dataset")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--frames", type=int, default=8)
    sp.add_argument("--size", type=int, default=64, help="HR frame side before crop")
    sp.add_argument("--scale", type=int, default=4, choices=(2, 4))
    sp.add_argument("--velocity", type=float, nargs=2, default=(2.0, 0.0),
                    metavar=("DX", "DY"))
    sp.add_argument("--jitter", type=float, default=0.0)
    sp.add_argument("--crop", type=float, default=1.0, help="focal crop fraction")
    sp.add_argument("--blur", type=float, default=0.0)
    sp.add_argument("--noise", type=float, default=0.0)
    sp.add_argument("--color-gain", type=float, nargs=3, default=(1.0, 1.0, 1.0))
    sp.add_argument("--color-offset", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    sp.add_argument("--misalign", type=float, nargs=2, default=(0.0, 0.0))
    sp.add_argument("--out", required=True, help="dataset directory")
    sp.add_argument("--out-report", default=None, help="write the JSON report here")
    sp.set_defaults(fn=_cmd_synth)

    ae = sub.add_parser("align-eval", help="EPE / ablation table over a dataset")
    ae.add_argument("dataset")
    ae.add_argument("--ablate", action="store_true")
    ae.add_argument("--weights", default=None, help="fitted head archive (.vtar)")
    ae.add_argument("--bias", type=float, nargs=2, default=(2.0, 0.0))
    ae.add_argument("--wavy", type=float, default=0.0)
    ae.add_argument("--pairs", type=int, default=2)
    ae.add_argument("--seed", type=int, default=0)
    ae.add_argument("--out", default=None)
    ae.set_defaults(fn=_cmd_align_eval)

    rc = sub.add_parser("rectify", help="batch target rectification report")
    rc.add_argument("dataset")
    rc.add_argument("--out-dir", default=None, help="write rectified targets here")
    rc.add_argument("--out", default=None)
    rc.set_defaults(fn=_cmd_rectify)

    sr = sub.add_parser("sr", help="run the VSR forward pass over a dataset")
    sr.add_argument("dataset")
    sr.add_argument("--weights", required=True, help="pipeline weight archive")
    sr.add_argument("--scale", type=int, default=None, choices=(2, 4))
    sr.add_argument("--out-dir", default=None)
    sr.add_argument("--out", default=None)
    sr.set_defaults(fn=_cmd_sr)

    ft = sub.add_parser("fit", help="SPSA-fit alignment heads on a dataset benchmark")
    ft.add_argument("dataset")
    ft.add_argument("--target", choices=("resflow", "align"), default="align")
    ft.add_argument("--budget", type=int, default=2000)
    ft.add_argument("--seed", type=int, default=0)
    ft.add_argument("--bias", type=float, nargs=2, default=(2.0, 0.0))
    ft.add_argument("--wavy", type=float, default=0.0)
    ft.add_argument("--pairs", type=int, default=2)
    ft.add_argument("--weights-out", default=None, help="save fitted heads (.vtar)")
    ft.add_argument("--out", default=None)
    ft.set_defaults(fn=_cmd_fit)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--points", type=int, default=120)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--out", default=None)
    gc.set_defaults(fn=_cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (DataFormatError, ShapeError, ValueError, OSError, ArithmeticError) as e:
        json.dump({"error": type(e).__name__, "message": str(e)}, sys.stderr)
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
