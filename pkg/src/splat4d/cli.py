"""Command-line entry point.

Exit codes: 0 success, 2 missing file, 3 malformed input or contract
violation, 4 training aborted on a non-finite value, 64 bad usage.
Errors are printed to stderr as one JSON line.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import decouple as dec
from .imgio import ImageFormatError, save_float, save_mask_png, save_png
from .render import ContractError, render
from .scene import SceneFormatError, load_camera, load_scene, save_scene
from .synth import SyntheticSpec, generate, load_dataset, write_dataset
from .train import (
    ABLATIONS,
    CKPT_MAGIC,
    TrainConfig,
    TrainingAborted,
    evaluate,
    format_ablation,
    load_checkpoint,
    load_config,
    run_ablation,
    save_checkpoint,
    train,
)

EXIT_MISSING = 2
EXIT_SCHEMA = 3
EXIT_NAN = 4
EXIT_USAGE = 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fmt():
    return argparse.ArgumentDefaultsHelpFormatter


# ---------------------------------------------------------------------------
# helpers


def _require(path, what="file") -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} {p} not found")
    return p


def _load_model(path):
    """(scene, config) from a checkpoint or a bare scene file."""
    p = _require(path, "checkpoint")
    with open(p, "rb") as fh:
        head = fh.read(len(CKPT_MAGIC))
    if head == CKPT_MAGIC.encode():
        st = load_checkpoint(p)
        return st.scene, st.config
    return load_scene(p), TrainConfig()


def _camera(args):
    spec = str(args.camera)
    if spec.isdigit():
        if not args.data:
            raise ContractError("--camera given as an index needs --data")
        cams_file = _require(Path(args.data) / "cameras.txt")
        lines = [ln for ln in cams_file.read_text().splitlines() if ln.strip()]
        idx = int(spec)
        if idx >= len(lines):
            raise ContractError(f"camera index {idx} out of range ({len(lines)} cameras)")
        from .scene import Camera

        return Camera.from_dict(json.loads(lines[idx]))
    return load_camera(_require(spec, "camera file"))


def _config(args) -> TrainConfig:
    cfg = load_config(_require(args.config, "config")) if getattr(args, "config", None) else TrainConfig()
    over = {}
    for key in ("steps", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            over[key] = v
    if getattr(args, "threads", None):
        over["threads"] = args.threads
    if getattr(args, "deterministic", False):
        over["threads"] = 1
    cfg = replace(cfg, **over)
    if getattr(args, "ablation", None):
        cfg = cfg.with_ablation(args.ablation)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_scene(args) -> int:
    d = {}
    if args.spec:
        d = json.loads(_require(args.spec, "spec").read_text())
        if not isinstance(d, dict):
            raise ContractError("spec file must hold an object")
    inline = {
        "n_static": args.n_static, "n_dynamic": args.n_dynamic, "n_frames": args.frames,
        "n_cameras": args.cameras, "width": args.width, "height": args.height,
        "noise_std": args.noise, "seed": args.seed, "amplitude": args.amplitude, "degree": args.degree,
    }
    d.update({k: v for k, v in inline.items() if v is not None})
    spec = SyntheticSpec.from_dict(d)
    sc = generate(spec)
    write_dataset(sc, args.out, spec)
    print(json.dumps({"out": str(args.out), "frames": len(sc.frames), "gaussians": len(sc.truth)}))
    return 0


def cmd_train(args) -> int:
    ds = load_dataset(_require(args.data, "dataset directory"))
    cfg = _config(args)
    state = None
    if args.resume:
        state = load_checkpoint(_require(args.resume, "checkpoint"))
        state.config = replace(state.config, steps=cfg.steps)
        cfg = state.config
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log.jsonl")
    mode = "a" if args.resume else "w"
    with open(log_path, mode) as log:
        state = train(ds, cfg, state=state, log=log)
    save_checkpoint(state, args.out)
    print(json.dumps({"checkpoint": str(args.out), "log": str(log_path), "step": state.step,
                      "gaussians": len(state.scene)}))
    return 0


def cmd_render(args) -> int:
    scene, cfg = _load_model(args.checkpoint)
    cam = _camera(args)
    if not 0.0 <= args.time <= 1.0:
        raise ContractError(f"--time {args.time} outside [0, 1]")
    subset = None
    if args.subset != "full":
        mode = dec.TRAINING if args.tau_d == args.tau_s else dec.INFERENCE
        part = dec.partition(scene, mode, args.tau_d, args.tau_s)
        subset = part.dynamic_indices if args.subset == "dynamic" else part.static_indices
    out = render(scene, cam, args.time, subset_filter=subset, background=cfg.background,
                 modulate=cfg.use_w, nthreads=1 if args.deterministic else args.threads)
    save_png(out.image, args.out)
    res = {"png": str(args.out), **out.diagnostics}
    if args.float_dump:
        fpath = Path(args.out).with_suffix(".sddimg")
        save_float(out.image, fpath)
        res["float_dump"] = str(fpath)
    print(json.dumps(res))
    return 0


def cmd_decouple(args) -> int:
    scene, cfg = _load_model(args.checkpoint)
    part = dec.partition(scene, dec.INFERENCE, args.tau_d, args.tau_s)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if part.dynamic_indices.size:
        save_scene(scene.subset(part.dynamic_indices), out / "dynamic_scene.json")
    if part.static_indices.size:
        save_scene(scene.subset(part.static_indices), out / "static_scene.json")
    hist = dec.coeff_histogram(scene, args.bins, args.tau_s, args.tau_d)
    (out / "histogram.json").write_text(json.dumps(hist.to_dict(), indent=1) + "\n")
    if args.data or not str(args.camera).isdigit():
        cam = _camera(args)
        dyn, sta = dec.render_split(scene, cam, args.time, part, background=cfg.background, modulate=cfg.use_w)
        save_png(dyn.image, out / "render_dynamic.png")
        save_png(sta.image, out / "render_static.png")
    summary = part.summary()
    (out / "partition.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(json.dumps({**summary, "gap_mass": hist.gap_mass, "out": str(out)}))
    return 0


def cmd_eval(args) -> int:
    scene, cfg = _load_model(args.checkpoint)
    ds = load_dataset(_require(args.data, "dataset directory"))
    train_frames, test_frames = ds.split(cfg.holdout_every)
    frames = {"heldout": test_frames or train_frames, "train": train_frames, "all": ds.frames}[args.split]
    masks = [] if args.mask_dir and not args.no_mask else None
    rep = evaluate(scene, frames, cfg, ds.labels, with_mask=not args.no_mask, masks_out=masks)
    if masks:
        mdir = Path(args.mask_dir)
        mdir.mkdir(parents=True, exist_ok=True)
        named = [f for f in frames if f.gt_mask is not None]
        for f, m in zip(named, masks):
            save_mask_png(m, mdir / f"{f.name}.png")
    Path(args.out).write_text(json.dumps(rep.to_dict(), indent=1) + "\n")
    print(rep.table())
    return 0


def cmd_ablate(args) -> int:
    ds = load_dataset(_require(args.data, "dataset directory"))
    cfg = _config(args)
    rows = run_ablation(ds, cfg, configs=tuple(args.configs))
    out = Path(args.out)
    out.write_text(json.dumps(rows, indent=1) + "\n")
    text = format_ablation(rows)
    out.with_suffix(".txt").write_text(text + "\n")
    print(text)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="cap on internal parallelism")
    common.add_argument("--deterministic", action="store_true", help="force fixed-order reductions (single thread)")

    p = _Parser(prog="splat4d", description="Static/dynamic decoupled 4D Gaussian splatting.",
                formatter_class=_fmt())
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-scene", parents=[common], formatter_class=_fmt(), help="generate a synthetic dataset")
    g.add_argument("--spec", help="JSON file with SyntheticSpec fields")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--n-static", type=int, default=None, help="static Gaussians (default 80)")
    g.add_argument("--n-dynamic", type=int, default=None, help="moving Gaussians (default 20)")
    g.add_argument("--frames", type=int, default=None, help="timestamps (default 24)")
    g.add_argument("--cameras", type=int, default=None, help="cameras (default 2)")
    g.add_argument("--width", type=int, default=None, help="image width (default 128)")
    g.add_argument("--height", type=int, default=None, help="image height (default 128)")
    g.add_argument("--noise", type=float, default=None, help="pixel noise std (default 0)")
    g.add_argument("--amplitude", type=float, default=None, help="motion amplitude (default 0.4)")
    g.add_argument("--degree", type=int, default=None, help="polynomial degree of the truth fit (default 2)")
    g.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    g.set_defaults(func=cmd_gen_scene)

    t = sub.add_parser("train", parents=[common], formatter_class=_fmt(), help="optimize a scene")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--config", default=None, help="JSON TrainConfig file")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", default=None, help="JSON-lines log path (default: <out>.log.jsonl)")
    t.add_argument("--ablation", choices=sorted(ABLATIONS), default=None, help="flag preset")
    t.add_argument("--seed", type=int, default=None, help="override config seed")
    t.add_argument("--steps", type=int, default=None, help="override config steps")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", parents=[common], formatter_class=_fmt(), help="render a checkpoint or scene")
    r.add_argument("--checkpoint", required=True, help="checkpoint or scene file")
    r.add_argument("--camera", default="0", help="camera index (with --data) or camera file")
    r.add_argument("--data", default=None, help="dataset directory holding cameras.txt")
    r.add_argument("--time", type=float, default=0.0, help="normalized timestamp")
    r.add_argument("--out", required=True, help="output PNG")
    r.add_argument("--subset", choices=("full", "static", "dynamic"), default="full", help="Gaussians to draw")
    r.add_argument("--tau-d", type=float, default=0.5, help="dynamic threshold for --subset")
    r.add_argument("--tau-s", type=float, default=0.5, help="static threshold for --subset")
    r.add_argument("--float-dump", action="store_true", help="also write an exact float image (.sddimg)")
    r.set_defaults(func=cmd_render)

    d = sub.add_parser("decouple", parents=[common], formatter_class=_fmt(), help="split a scene by w")
    d.add_argument("--checkpoint", required=True, help="checkpoint or scene file")
    d.add_argument("--tau-d", type=float, default=0.85, help="dynamic threshold")
    d.add_argument("--tau-s", type=float, default=0.2, help="static threshold")
    d.add_argument("--out", required=True, help="output directory")
    d.add_argument("--bins", type=int, default=20, help="histogram bins")
    d.add_argument("--data", default=None, help="dataset directory (camera for split renders)")
    d.add_argument("--camera", default="0", help="camera index or file for split renders")
    d.add_argument("--time", type=float, default=0.0, help="timestamp for split renders")
    d.set_defaults(func=cmd_decouple)

    e = sub.add_parser("eval", parents=[common], formatter_class=_fmt(), help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True, help="checkpoint or scene file")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--out", required=True, help="JSON report path")
    e.add_argument("--split", choices=("heldout", "train", "all"), default="heldout", help="frames to score")
    e.add_argument("--no-mask", action="store_true", help="skip the uncertainty-mask IoU")
    e.add_argument("--mask-dir", default=None, help="write predicted motion masks as PNG (0/255) here")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], formatter_class=_fmt(), help="run the five-row ablation")
    a.add_argument("--data", required=True, help="dataset directory")
    a.add_argument("--config", default=None, help="JSON TrainConfig file")
    a.add_argument("--out", required=True, help="JSON table path (a .txt twin is written too)")
    a.add_argument("--steps", type=int, default=None, help="override config steps")
    a.add_argument("--seed", type=int, default=None, help="override config seed")
    a.add_argument("--configs", nargs="+", choices=sorted(ABLATIONS), default=["a", "b", "c", "d", "full"],
                   help="rows to run")
    a.set_defaults(func=cmd_ablate)
    return p


def _fail(code: int, kind: str, msg: str) -> int:
    print(json.dumps({"error": kind, "message": msg}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, "missing_file", str(exc))
    except TrainingAborted as exc:
        return _fail(EXIT_NAN, "non_finite", f"step={exc.step} term={exc.term}")
    except (ContractError, SceneFormatError, ImageFormatError, json.JSONDecodeError, KeyError, ValueError) as exc:
        return _fail(EXIT_SCHEMA, "invalid_input", str(exc))


if __name__ == "__main__":
    sys.exit(main())
