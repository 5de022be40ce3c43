"""``dualstream`` command-line tool.

Exit codes: 0 success, 1 runtime failure, 2 bad input (unreadable or
malformed files, invalid configuration or script).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import composite as comp
from . import depthcodec as codec
from .bench import run_bench
from .config import format_config, load_config, parse_floats
from .errors import DualStreamError
from .frames import read_pgm, read_ppm, write_pgm, write_ppm
from .geometry import Intrinsics, Pose, intrinsics_from_fov
from .pointcloud import export_ply, reconstruct_hologram
from .session import format_report, load_script, report_from_events, simulate

log = logging.getLogger("dualstream")

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2


def _config(args) -> dict[str, str]:
    return load_config(args.config) if args.config else {}


def _sub(cfg: dict[str, str], prefix: str) -> dict[str, str]:
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}


def _params(cfg: dict[str, str], profile: str) -> codec.ColorizationParams:
    base = codec.SELF_PROFILE if profile == "self" else codec.ENV_PROFILE
    return codec.ColorizationParams.from_config(cfg, base)


def _out(args, default_name: str) -> str:
    if args.output:
        return args.output
    out_dir = args.out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, default_name)


def _stem(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def cmd_encode(args) -> int:
    params = _params(_config(args), args.profile)
    out = _out(args, _stem(args.input) + ".ppm")
    write_ppm(out, codec.encode_depth(read_pgm(args.input), params))
    log.info("encoded %s -> %s (%s)", args.input, out, params.canonical())
    return EXIT_OK


def cmd_decode(args) -> int:
    params = _params(_config(args), args.profile)
    out = _out(args, _stem(args.input) + ".pgm")
    write_pgm(out, codec.decode_depth(read_ppm(args.input), params))
    return EXIT_OK


def _pack_profiles(cfg: dict[str, str]) -> tuple[codec.ColorizationParams, codec.ColorizationParams]:
    sp = codec.ColorizationParams.from_config(_sub(cfg, "self."), codec.SELF_PROFILE)
    ep = codec.ColorizationParams.from_config(_sub(cfg, "env."), codec.ENV_PROFILE)
    codec.register_profile(sp)
    codec.register_profile(ep)
    return sp, ep


def _depth_input(path: str | None, params):
    """Depth given as a 16-bit PGM is colour-coded; a PPM is taken as already coded."""
    if path is None:
        return None
    if path.lower().endswith(".pgm"):
        return codec.encode_depth(read_pgm(path), params)
    return read_ppm(path)


def cmd_pack(args) -> int:
    sp, ep = _pack_profiles(_config(args))
    frames = (
        read_ppm(args.self_color) if args.self_color else None,
        _depth_input(args.self_depth, sp),
        read_ppm(args.env_color) if args.env_color else None,
        _depth_input(args.env_depth, ep),
    )
    f = comp.pack(*frames, args.timestamp_us, args.seq, self_params=sp, env_params=ep)
    out = _out(args, f"composite_{args.seq:06d}.dscf")
    with open(out, "wb") as fh:
        fh.write(comp.serialize(f))
    return EXIT_OK


def _read_composite(path: str) -> comp.CompositeFrame:
    with open(path, "rb") as fh:
        return comp.parse(fh.read())


def cmd_unpack(args) -> int:
    _pack_profiles(_config(args))
    f = _read_composite(args.input)
    up = comp.unpack(f)
    args.out_dir = args.out_dir or _stem(args.input)
    os.makedirs(args.out_dir, exist_ok=True)
    meta = {"seq": f.seq, "timestamp_us": f.timestamp_us}
    for q, info in zip(comp.Quadrant, f.quadrants):
        name = q.name.lower()
        meta[f"{name}.present"] = int(info.present)
        if not info.present:
            continue
        meta[f"{name}.size"] = f"{info.width}x{info.height}"
        frame = up.frame(q)
        write_ppm(os.path.join(args.out_dir, f"{name}.ppm"), frame)
        if q.is_depth:
            meta[f"{name}.params_digest"] = info.params_digest.hex()
            params = codec.profile_for_digest(info.params_digest)
            write_pgm(os.path.join(args.out_dir, f"{name}.pgm"), codec.decode_depth(frame, params))
    with open(os.path.join(args.out_dir, "meta.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_config(meta))
    return EXIT_OK


def _intrinsics(cfg: dict[str, str], width: int, height: int) -> Intrinsics:
    if "fx" in cfg:
        return Intrinsics(float(cfg["fx"]), float(cfg.get("fy", cfg["fx"])),
                          float(cfg.get("cx", width / 2)), float(cfg.get("cy", height / 2)), width, height)
    return intrinsics_from_fov(float(cfg.get("hfov", 69.0)), float(cfg.get("vfov", 42.0)), width, height)


def cmd_reconstruct(args) -> int:
    cfg = _config(args)
    _pack_profiles(cfg)
    f = _read_composite(args.input)
    up = comp.unpack(f)
    cq, dq = ((comp.Quadrant.SELF_COLOR, comp.Quadrant.SELF_DEPTH) if args.which == "self"
              else (comp.Quadrant.ENV_COLOR, comp.Quadrant.ENV_DEPTH))
    missing = [q.name for q in (cq, dq) if not f.quadrants[q].present]
    if missing:
        raise comp.LayoutError(f"composite has no {', '.join(missing)} quadrant")
    color, coded = up.frame(cq), up.frame(dq)
    k = _intrinsics({k: v for k, v in cfg.items() if "." not in k}, coded.width, coded.height)
    pose = Pose()
    if args.pose:
        v = parse_floats(args.pose, 7, "--pose")
        pose = Pose(v[:3], v[3:])
    depth_m = codec.decode_depth_m(coded, codec.profile_for_digest(f.quadrants[dq].params_digest))
    cloud = reconstruct_hologram(color, depth_m, k, pose)
    out = _out(args, f"{args.which}_{f.seq:06d}.ply")
    with open(out, "wb") as fh:
        fh.write(export_ply(cloud))
    log.info("wrote %d points to %s", len(cloud), out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.from_log:
        with open(args.from_log, encoding="utf-8") as fh:
            sys.stdout.write(format_report(report_from_events(fh.read())))
        return EXIT_OK
    if not args.script:
        raise DualStreamError("simulate needs a script path (or --from-log)")
    script = load_script(args.script)
    result = simulate(script, seed=args.seed, measure_processing=args.measure_processing)
    result.write(args.out_dir or "simulation")
    sys.stdout.write(result.report_text())
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args)
    res = args.resolution or cfg.get("resolution", "640x480")
    try:
        w, h = (int(x) for x in res.lower().split("x"))
    except ValueError:
        raise DualStreamError(f"--resolution must look like 640x480, got {res!r}") from None
    iterations = args.iterations if args.iterations is not None else int(cfg.get("iterations", 100))
    rep = run_bench(w, h, iterations)
    sys.stdout.write(rep.text())
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        with open(os.path.join(args.out_dir, "bench.txt"), "w", encoding="utf-8") as fh:
            fh.write(rep.text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--seed", type=int, default=None, help="override the random seed")
    common.add_argument("--out-dir", help="directory for output files")

    p = argparse.ArgumentParser(prog="dualstream", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    for name, fn, helptext, ext in (("encode", cmd_encode, "16-bit depth PGM to colour-coded PPM", "pgm"),
                                    ("decode", cmd_decode, "colour-coded PPM to 16-bit depth PGM", "ppm")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("input", help=f"input .{ext}")
        s.add_argument("-o", "--output")
        s.add_argument("--profile", choices=("self", "env"), default="env",
                       help="base colorization profile (d_max 0.8 m or 2.0 m)")
        s.set_defaults(func=fn)

    s = sub.add_parser("pack", parents=[common], help="pack up to four frames into a .dscf composite")
    s.add_argument("--self-color")
    s.add_argument("--self-depth", help=".pgm (coded on the fly) or already-coded .ppm")
    s.add_argument("--env-color")
    s.add_argument("--env-depth", help=".pgm (coded on the fly) or already-coded .ppm")
    s.add_argument("--timestamp-us", type=int, default=0)
    s.add_argument("--seq", type=int, default=0)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_pack)

    s = sub.add_parser("unpack", parents=[common], help="split a .dscf composite into frames")
    s.add_argument("input")
    s.set_defaults(func=cmd_unpack)

    s = sub.add_parser("reconstruct", parents=[common], help="composite quadrants to a PLY point cloud")
    s.add_argument("input")
    s.add_argument("--which", choices=("self", "env"), default="env")
    s.add_argument("--pose", help="camera pose tx,ty,tz,qw,qx,qy,qz")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("simulate", parents=[common], help="run a scripted multi-peer session")
    s.add_argument("script", nargs="?")
    s.add_argument("--measure-processing", action="store_true",
                   help="use wall-clock encode/decode timings instead of the modelled ones")
    s.add_argument("--from-log", help="regenerate the report from an events.log instead")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("bench", parents=[common], help="pipeline throughput benchmark")
    s.add_argument("--resolution", help="per-quadrant size, e.g. 640x480")
    s.add_argument("--iterations", type=int)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("DUALSTREAM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    try:
        return args.func(args)
    except (DualStreamError, ValueError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"dualstream {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - last-resort runtime failure
        log.debug("unhandled error", exc_info=True)
        print(f"dualstream {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
