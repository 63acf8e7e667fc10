"""Command-line entry point: ``vcreg {generate,pretrain,train,register,benchmark,export}``.

Exit codes: 0 success, 1 training diverged / other failure, 2 parse or
configuration error, 3 degenerate geometry, 4 checkpoint mismatch.

CSV schemas
-----------
train / pretrain loss log: ``step,epoch,pair,loss_cor,loss_trans_metric,combined``
  and ``step,epoch,cloud,triplet_loss``.
benchmark: ``method,pairs,failures,rot_mse,rot_rmse,rot_mae,trans_mse,trans_rmse,trans_mae,geodesic_mean``
  (degrees / metres; rotation errors are per Euler angle).
ICP residual trace: ``pair,iteration,residual``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import formats
from .baseline import SCAN_MAX_DISTANCE, IcpConfig, icp, refine
from .data import PROTOCOLS, SHAPES, ProtocolConfig, make_pair, procedural_shape, synthetic_scan
from .errors import ConfigError, TrainingDiverged, VcrError
from .geometry import RigidTransform, apply, registration_error, rotation_angle
from .losses import LossConfig
from .model import ModelConfig, RegistrationNet
from .pretrain import PretrainConfig, pretrain_features
from .train import TrainConfig, train

log = logging.getLogger("vcreg")

DEFAULT_SEED = 0
METHODS = ("icp", "net", "net-icp", "net-iter")
BENCHMARK_FIELDS = ("method", "pairs", "failures", "rot_mse", "rot_rmse", "rot_mae",
                    "trans_mse", "trans_rmse", "trans_mae", "geodesic_mean")


# ---------------------------------------------------------------- helpers


def _model_config(args):
    cfg = ModelConfig.small() if args.arch == "small" else ModelConfig()
    return dataclasses.replace(cfg, k_keypoints=args.K, j_candidates=args.J)


def load_pairs(manifest, points, protocol=None):
    """Seeded pairs for every manifest entry; ``protocol`` overrides the manifest's tag."""
    entries = formats.read_manifest(manifest)
    if not entries:
        raise ConfigError(f"manifest {manifest} lists no clouds")
    cfg = ProtocolConfig(n_points=points)
    return [make_pair(formats.load_cloud(e.path), protocol or e.protocol, e.seed, cfg) for e in entries]


def _load_net(args, path=None):
    net = RegistrationNet.load(path or args.checkpoint)
    if args.K or args.J:
        net.config = dataclasses.replace(net.config, k_keypoints=args.K or net.config.k_keypoints,
                                         j_candidates=args.J or net.config.j_candidates)
    return net


def _icp_config(protocol, iterations=10):
    return IcpConfig(max_iterations=iterations,
                     max_correspondence_distance=SCAN_MAX_DISTANCE if protocol == "scan" else None)


def _fmt_matrix(t):
    return "\n".join(" ".join(f"{v: .12f}" for v in row) for row in t.as_matrix())


def estimate(method, pair, net=None, iterations=4):
    """Transform estimate of one method on one pair."""
    cfg = _icp_config(pair.protocol)
    if method == "icp":
        return icp(pair.source, pair.target, cfg)[0]
    if net is None:
        raise ConfigError(f"method {method!r} needs a checkpoint")
    if method == "net":
        return net.register(pair.source, pair.target, 1)[0]
    if method == "net-iter":
        return net.register(pair.source, pair.target, iterations)[0]
    if method == "net-icp":
        return refine(net.register(pair.source, pair.target, 1)[0], pair.source, pair.target, cfg)
    raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")


def benchmark_rows(pairs, methods, net=None, iterations=4, workers=1):
    """Aggregated metrics per method. Per-pair failures are counted, not raised."""

    def one(job):
        method, pair = job
        try:
            return estimate(method, pair, net, iterations)
        except (VcrError, np.linalg.LinAlgError) as exc:
            log.warning("%s failed on a pair: %s", method, exc)
            return None

    rows = []
    for method in methods:
        jobs = [(method, p) for p in pairs]
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                results = list(pool.map(one, jobs))  # ordered by pair index
        else:
            results = [one(j) for j in jobs]
        ok = [(r, p.truth) for r, p in zip(results, pairs) if r is not None]
        row = {"method": method, "pairs": len(pairs), "failures": len(pairs) - len(ok)}
        if ok:
            m = registration_error([r for r, _ in ok], [t for _, t in ok]).as_dict()
            row.update({"rot_mse": m["rotation_mse"], "rot_rmse": m["rotation_rmse"],
                        "rot_mae": m["rotation_mae"], "trans_mse": m["translation_mse"],
                        "trans_rmse": m["translation_rmse"], "trans_mae": m["translation_mae"],
                        "geodesic_mean": m["geodesic_mean"]})
        else:
            row.update({k: float("nan") for k in BENCHMARK_FIELDS[3:]})
        rows.append(row)
    return rows


def render_table(rows):
    header = list(BENCHMARK_FIELDS)
    cells = [[str(r[k]) if k in ("method", "pairs", "failures") else f"{r[k]:.6f}" for k in header]
             for r in rows]
    widths = [max(len(h), *(len(c[i]) for c in cells)) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(cs, widths)))
              for cs in cells]
    return "\n".join(lines)


def write_benchmark_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, BENCHMARK_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# ---------------------------------------------------------------- commands


def cmd_generate(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    entries = []
    for i in range(args.count):
        seed = int(rng.integers(2**31))
        if args.shape == "scan":
            path = out / f"scan_{i:04d}.bin"
            formats.write_kitti_bin(path, synthetic_scan(seed))
            protocol = "scan"
        else:
            path = out / f"{args.shape}_{i:04d}.off"
            formats.write_off(path, procedural_shape(args.shape, args.cloud_points, seed))
            protocol = args.protocol
        entries.append(formats.ManifestEntry(path, protocol, seed + 1))
    manifest = out / "manifest.txt"
    formats.write_manifest(manifest, entries)
    print(f"wrote {len(entries)} clouds and {manifest}")
    return 0


def cmd_pretrain(args):
    pairs = load_pairs(args.manifest, args.points, args.protocol)
    net = RegistrationNet(_model_config(args), seed=args.seed)
    cfg = PretrainConfig(epochs=args.epochs, lr=args.lr, seed=args.seed,
                         loss=LossConfig(margin=args.margin, l1_weight=args.l1_weight))
    losses = pretrain_features(net.features, [p.source for p in pairs], cfg, args.log)
    net.save(args.out, stage="pretrain", seed=args.seed, epochs=args.epochs)
    for e, v in enumerate(losses):
        print(f"epoch {e + 1} triplet_loss {v!r}")
    print(f"saved {args.out}")
    return 0


def cmd_train(args):
    pairs = load_pairs(args.manifest, args.points, args.protocol)
    if args.init:
        net = _load_net(args, args.init)
    else:
        net = RegistrationNet(_model_config(args), seed=args.seed)
    cfg = TrainConfig(epochs=args.epochs, lr=args.lr, seed=args.seed, resample=args.resample,
                      warmup=args.warmup, decay=args.decay, loss=LossConfig(gamma=args.gamma, beta=args.beta))
    try:
        history = train(net, pairs, cfg, args.log)
    except TrainingDiverged as exc:
        net.save(args.out, stage="train-diverged", seed=args.seed, step=exc.step)
        print(f"error: {exc}; last good parameters saved to {args.out}", file=sys.stderr)
        return exc.exit_code
    net.save(args.out, stage="train", seed=args.seed, epochs=args.epochs)
    for e, v in enumerate(history.epoch_loss_cor):
        print(f"epoch {e + 1} loss_cor {v!r}")
    print(f"saved {args.out}")
    return 0


def _register_inputs(args):
    if args.manifest:
        pairs = load_pairs(args.manifest, args.points, args.protocol)
        if not 0 <= args.index < len(pairs):
            raise ConfigError(f"--index {args.index} outside manifest of {len(pairs)} pairs")
        pair = pairs[args.index]
        return pair.source, pair.target, pair.truth, pair.protocol
    if not (args.source and args.target):
        raise ConfigError("give --manifest (with --index) or both --source and --target")
    return formats.load_cloud(args.source), formats.load_cloud(args.target), None, args.protocol


def cmd_register(args):
    src, dst, truth, protocol = _register_inputs(args)
    net = _load_net(args)
    est, passes = net.register(src, dst, args.iterations)
    trace = None
    if args.icp_refine:
        est, trace = icp(src, dst, dataclasses.replace(_icp_config(protocol), initial=est))
    print("transform (4x4, maps source onto target):")
    print(_fmt_matrix(est))
    print(f"passes {len(passes)}  keypoints {len(passes[-1].correspondences.keypoints)}")
    if trace is not None:
        print("icp residuals " + " ".join(f"{r:.6e}" for r in trace))
        if args.residuals:
            with open(args.residuals, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(("pair", "iteration", "residual"))
                w.writerows((args.index, i, repr(r)) for i, r in enumerate(trace))
    if truth is not None:
        m = registration_error(est, truth)
        print(f"rotation_mae {m.rotation_mae:.6f} deg  translation_mae {m.translation_mae:.6f} m  "
              f"geodesic {m.geodesic_mean:.6f} deg")
    else:
        print(f"self-consistency angle {rotation_angle(est.rotation):.6f} deg")
    if args.out:
        np.savetxt(args.out, est.as_matrix(), fmt="%.17g")
    return 0


def cmd_benchmark(args):
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown methods {bad}; choose from {METHODS}")
    pairs = load_pairs(args.manifest, args.points, args.protocol)
    net = _load_net(args) if any(m != "icp" for m in methods) else None
    rows = benchmark_rows(pairs, methods, net, args.iterations, args.workers)
    print(render_table(rows))
    if args.csv:
        write_benchmark_csv(args.csv, rows)
    return 0


def cmd_export(args):
    src, dst, _, _ = _register_inputs(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.checkpoint:
        net = _load_net(args)
        est, passes = net.register(src, dst, args.iterations)
        cs = passes[-1].correspondences
        # virtual points of the last pass live in the target frame
        formats.write_ply(out / "virtual.ply", cs.virtual, "red")
        (out / "correspondences.txt").write_text(cs.to_text())
    else:
        est = RigidTransform.identity()
    formats.write_ply(out / "source.ply", src, "blue")
    formats.write_ply(out / "target.ply", dst, "green")
    formats.write_ply(out / "aligned.ply", apply(est, src), "blue")
    np.savetxt(out / "transform.txt", est.as_matrix(), fmt="%.17g")
    print(f"exported to {out}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="vcreg", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        if seed:
            sp.add_argument("--seed", type=int, default=DEFAULT_SEED)
        sp.add_argument("--points", type=int, default=1024, help="points per cloud after sampling")
        sp.add_argument("--protocol", choices=PROTOCOLS, default=None,
                        help="override the protocol listed in the manifest")
        sp.add_argument("--K", type=int, default=None, help="keypoints (default min(896, 0.875 N))")
        sp.add_argument("--J", type=int, default=None, help="candidates per keypoint (default 32)")

    g = sub.add_parser("generate", help="write procedural clouds and a manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=8)
    g.add_argument("--shape", choices=SHAPES + ("scan",), default="composite")
    g.add_argument("--cloud-points", type=int, default=4096)
    g.add_argument("--protocol", choices=PROTOCOLS[:3], default="whole")
    g.add_argument("--seed", type=int, default=DEFAULT_SEED)
    g.set_defaults(func=cmd_generate)

    for name, func, epochs, lr in (("pretrain", cmd_pretrain, 30, 0.01), ("train", cmd_train, 50, 0.05)):
        t = sub.add_parser(name, help=f"{name} a network on a manifest")
        t.add_argument("--manifest", required=True)
        t.add_argument("--out", required=True, help="checkpoint to write")
        t.add_argument("--arch", choices=("small", "full"), default="full")
        t.add_argument("--epochs", type=int, default=epochs)
        t.add_argument("--lr", type=float, default=lr)
        t.add_argument("--log", default=None, help="CSV loss log")
        common(t)
        t.set_defaults(func=func)
        if name == "pretrain":
            t.add_argument("--margin", type=float, default=LossConfig.margin)
            t.add_argument("--l1-weight", type=float, default=LossConfig.l1_weight)
        else:
            t.add_argument("--init", default=None, help="start from this checkpoint (e.g. pre-trained)")
            t.add_argument("--gamma", type=float, default=LossConfig.gamma)
            t.add_argument("--beta", type=float, default=LossConfig.beta)
            t.add_argument("--resample", action="store_true",
                           help="draw a fresh ground-truth transform for every step")
            t.add_argument("--warmup", type=int, default=0, help="epochs of linear learning-rate warm-up")
            t.add_argument("--decay", choices=("constant", "cosine"), default="constant")

    for name, func in (("register", cmd_register), ("export", cmd_export)):
        r = sub.add_parser(name, help=f"{name} one pair")
        r.add_argument("--checkpoint", required=(name == "register"), default=None)
        r.add_argument("--manifest", default=None)
        r.add_argument("--index", type=int, default=0)
        r.add_argument("--source", default=None)
        r.add_argument("--target", default=None)
        r.add_argument("--iterations", type=int, default=1)
        common(r)
        if name == "register":
            r.add_argument("--icp-refine", action="store_true")
            r.add_argument("--residuals", default=None, help="CSV of the ICP residual trace")
            r.add_argument("--out", default=None, help="write the 4x4 matrix here")
        else:
            r.add_argument("--out", required=True, help="output directory")
        r.set_defaults(func=func)

    b = sub.add_parser("benchmark", help="aggregate errors of several methods")
    b.add_argument("--manifest", required=True)
    b.add_argument("--checkpoint", default=None)
    b.add_argument("--methods", default="icp,net,net-icp,net-iter")
    b.add_argument("--iterations", type=int, default=4, help="passes for net-iter")
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--csv", default=None)
    common(b)
    b.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if hasattr(args, "seed"):
        log.info("seed %d", args.seed)
    try:
        return args.func(args)
    except VcrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
