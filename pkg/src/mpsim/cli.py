"""Command-line surface: gen, sample, train, sweep, eval, gradcheck, bench.

Configuration precedence: built-in defaults, then --config JSON, then CLI
flags. Every command writes a run_manifest.json (resolved config + SHA-256 of
the input files) into its output directory so runs can be reproduced exactly.
Exit codes: 0 success, 1 validation error, 2 runtime failure.

Heavy imports happen inside the command handlers so --threads can pin the
BLAS/OpenMP pool sizes before numpy loads.
"""

import argparse
import hashlib
import json
import os
import sys

_EXIT_OK = 0
_EXIT_VALIDATION = 1
_EXIT_RUNTIME = 2

_PRESETS = ("plain", "slanted", "sphere", "specular", "benchmark")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_tree(path):
    """Hash a file, or every regular file under a directory (sorted)."""
    if os.path.isfile(path):
        return _sha256(path)
    entries = {}
    for root, _, files in os.walk(path):
        for name in sorted(files):
            p = os.path.join(root, name)
            entries[os.path.relpath(p, path)] = _sha256(p)
    return entries


def _write_manifest(out_dir, command, config, inputs):
    from . import __version__, backend

    manifest = {
        "command": command,
        "config": config,
        "inputs": {k: _hash_tree(v) for k, v in inputs.items() if v is not None},
        "backend": backend.active_name(),
        "threads": os.environ.get("OPENBLAS_NUM_THREADS", ""),
        "version": __version__,
    }
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "run_manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path


def _load_config(path):
    if path is None:
        return {}
    with open(path) as f:
        cfg = json.load(f)
    if not isinstance(cfg, dict):
        raise ValueError("config file must hold a JSON object")
    return cfg


def _resolve(defaults, config, args, keys):
    """defaults < config-file < explicit CLI flags."""
    out = dict(defaults)
    for k in keys:
        if k in config:
            out[k] = config[k]
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args):
    from .render import (
        SceneSpec,
        benchmark_scene_spec,
        plain_scene_spec,
        render_scene,
        save_scene,
        slanted_scene_spec,
        specular_scene_spec,
        sphere_scene_spec,
    )

    if args.spec:
        with open(args.spec) as f:
            spec = SceneSpec.from_json(f.read())
        if args.seed is not None:
            spec.seed = args.seed
    else:
        makers = {
            "plain": plain_scene_spec,
            "slanted": slanted_scene_spec,
            "sphere": sphere_scene_spec,
            "specular": specular_scene_spec,
            "benchmark": benchmark_scene_spec,
        }
        spec = makers[args.preset](seed=args.seed if args.seed is not None else 0)
    scene = render_scene(spec)
    save_scene(args.out, scene)
    _write_manifest(
        args.out, "gen", json.loads(spec.to_json()), {"spec": args.spec}
    )
    print(f"wrote scene with {len(scene.images)} views to {args.out}")
    return _EXIT_OK


_SAMPLE_DEFAULTS = {
    "count": 2000,
    "plane_count": 64,
    "n_views": 5,
    "neg_offset": 15,
    "seed": 0,
    "highlight_fraction": 0.0,
}


def cmd_sample(args):
    import numpy as np

    from . import fileio
    from .geometry import DepthRange, depth_planes
    from .render import load_scene
    from .sampling import sample_patches

    cfg = _resolve(_SAMPLE_DEFAULTS, _load_config(args.config), args, _SAMPLE_DEFAULTS)
    scene = load_scene(args.scene)
    planes = depth_planes(
        DepthRange(scene.spec.z_min, scene.spec.z_max, cfg["plane_count"])
    )
    samples = sample_patches(
        scene,
        planes,
        cfg["count"],
        n_views=cfg["n_views"],
        neg_offset=cfg["neg_offset"],
        seed=cfg["seed"],
        highlight_fraction=cfg["highlight_fraction"],
    )
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    fileio.save_patches(args.out, [(s.patches, s.label) for s in samples])
    _write_manifest(
        os.path.dirname(os.path.abspath(args.out)),
        "sample",
        cfg,
        {"scene": args.scene},
    )
    labels = np.array([s.label for s in samples])
    print(f"wrote {len(samples)} samples ({int(labels.sum())} positive) to {args.out}")
    return _EXIT_OK


_TRAIN_DEFAULTS = {
    "iterations": 1200,
    "batch_size": 64,
    "base_lr": 1e-3,
    "decay_factor": 0.1,
    "decay_period": 700,
    "momentum": 0.9,
    "weight_decay": 0.0,
    "n_views": 5,
    "fusion": "mean",
    "head_width": 256,
    "plane_count": 64,
    "samples_per_scene": 2000,
    "neg_offset": 15,
    "highlight_fraction": 0.15,
    "seed": 0,
}


def cmd_train(args):
    import numpy as np

    from . import fileio, nn
    from .geometry import DepthRange, depth_planes
    from .render import load_scene
    from .sampling import sample_pools
    from .training import TrainSchedule, train

    cfg = _resolve(_TRAIN_DEFAULTS, _load_config(args.config), args, _TRAIN_DEFAULTS)
    scene_dirs = args.scenes
    if not scene_dirs:
        raise ValueError("train needs at least one --scenes directory")
    scenes = [load_scene(d) for d in scene_dirs]
    planes = depth_planes(
        DepthRange(scenes[0].spec.z_min, scenes[0].spec.z_max, cfg["plane_count"])
    )
    pos, neg = sample_pools(
        scenes,
        planes,
        cfg["samples_per_scene"],
        n_views=cfg["n_views"],
        neg_offset=cfg["neg_offset"],
        seed=cfg["seed"],
        highlight_fraction=cfg["highlight_fraction"],
    )
    if args.resume:
        weights = fileio.load_weights(args.resume)
    else:
        weights = nn.make_network(
            fusion=cfg["fusion"],
            n=cfg["n_views"],
            head_width=cfg["head_width"],
            seed=cfg["seed"],
        )
    schedule = TrainSchedule(
        iterations=cfg["iterations"],
        batch_size=cfg["batch_size"],
        base_lr=cfg["base_lr"],
        decay_factor=cfg["decay_factor"],
        decay_period=cfg["decay_period"],
        momentum=cfg["momentum"],
        weight_decay=cfg["weight_decay"],
        seed=cfg["seed"],
    )
    start = args.start_iteration or 0
    weights, curve, _ = train(weights, pos, neg, schedule, start_iteration=start)
    os.makedirs(args.out, exist_ok=True)
    wpath = os.path.join(args.out, "weights.mpsw")
    fileio.save_weights(wpath, weights)
    cpath = os.path.join(args.out, "loss_curve.csv")
    mode = "a" if start and os.path.exists(cpath) else "w"
    with open(cpath, mode) as f:
        if mode == "w":
            f.write("iteration,loss\n")
        for i, loss in enumerate(curve):
            f.write(f"{start + i},{loss:.8f}\n")
    _write_manifest(
        args.out, "train", cfg, {f"scene{i}": d for i, d in enumerate(scene_dirs)}
    )
    print(f"trained {len(curve)} iterations, final loss {curve[-1]:.5f}")
    print(f"weights -> {wpath}\nloss curve -> {cpath}")
    return _EXIT_OK


_SWEEP_DEFAULTS = {
    "measure": "zncc",
    "plane_count": 256,
    "n_views": 5,
    "tile_side": 128,
    "box_filter": True,
    "box_filter_radius": 2,
    "subpixel": True,
    "consensus": "mean",
}


def cmd_sweep(args):
    import numpy as np

    from . import fileio
    from .evalmetrics import error_heatmap
    from .geometry import DepthRange, depth_planes
    from .render import load_scene
    from .sampling import nearest_partner_indices
    from .sweep import SweepConfig, box_filter_volume, build_cost_volume, extract_depth

    cfg = _resolve(_SWEEP_DEFAULTS, _load_config(args.config), args, _SWEEP_DEFAULTS)
    scene = load_scene(args.scene)
    measure = cfg["measure"]
    weights = None
    if measure in ("learned2", "learnedN"):
        if not args.weights:
            raise ValueError(f"measure {measure} needs --weights")
        weights = fileio.load_weights(args.weights)
    sweep_cfg = SweepConfig(
        plane_count=cfg["plane_count"],
        tile_side=cfg["tile_side"],
        box_filter=cfg["box_filter"],
        box_filter_radius=cfg["box_filter_radius"],
        subpixel=cfg["subpixel"],
        consensus=cfg["consensus"],
    )
    planes = depth_planes(
        DepthRange(scene.spec.z_min, scene.spec.z_max, cfg["plane_count"])
    )
    partner_idx = nearest_partner_indices(scene, cfg["n_views"])
    partners = [(scene.images[i], scene.cameras[i]) for i in partner_idx]
    vol = build_cost_volume(
        scene.images[0], scene.cameras[0], partners, planes, measure, sweep_cfg, weights
    )
    if sweep_cfg.box_filter:
        vol = box_filter_volume(vol, sweep_cfg.box_filter_radius)
    dm = extract_depth(vol, sweep_cfg)
    os.makedirs(args.out, exist_ok=True)
    fileio.write_depth_pfm(os.path.join(args.out, "depth.pfm"), dm.depth, dm.valid)
    fileio.write_pfm(os.path.join(args.out, "conf.pfm"), dm.confidence)
    heat = error_heatmap(dm.depth, scene.gt_depth, scene.gt_valid & dm.valid)
    fileio.write_ppm(os.path.join(args.out, "heatmap.ppm"), heat)
    if args.dump_slices:
        for k in range(vol.scores.shape[0]):
            fileio.write_pfm(
                os.path.join(args.out, f"slice_{k:03d}.pfm"), vol.scores[k]
            )
    _write_manifest(
        args.out,
        "sweep",
        {**cfg, "weights": args.weights},
        {"scene": args.scene, "weights": args.weights},
    )
    print(
        f"measure={measure} planes={cfg['plane_count']} views={cfg['n_views']} "
        f"valid={float(dm.valid.mean()):.3f} -> {args.out}"
    )
    return _EXIT_OK


def _eval_one(est_path, gt_path, cams_path, trunc_mm, out_dir, dump_clouds):
    from . import fileio
    from .evalmetrics import evaluate_clouds
    from .geometry import lift_depth_map

    est, est_mask = fileio.read_depth_pfm(est_path)
    gt, gt_mask = fileio.read_depth_pfm(gt_path)
    if est.shape != gt.shape:
        raise ValueError(f"depth maps disagree: {est.shape} vs {gt.shape}")
    cam = fileio.read_cameras(cams_path)[0]
    # evaluate only at pixels with ground truth
    recon = lift_depth_map(cam, est, est_mask & gt_mask)
    gt_cloud = lift_depth_map(cam, gt, gt_mask)
    result = evaluate_clouds(recon, gt_cloud, trunc_mm=trunc_mm)
    if dump_clouds:
        fileio.write_ply(os.path.join(out_dir, "recon.ply"), recon)
        fileio.write_ply(os.path.join(out_dir, "gt.ply"), gt_cloud)
    return result


def cmd_eval(args):
    if bool(args.list) == bool(args.est):
        raise ValueError("give either --est/--gt/--cams or --list, not both")
    os.makedirs(args.out, exist_ok=True)
    if args.list:
        # one row per object: [{"name":..., "est":..., "gt":..., "cams":...}]
        with open(args.list) as f:
            entries = json.load(f)
        rows = []
        inputs = {"list": args.list}
        for i, entry in enumerate(entries):
            res = _eval_one(
                entry["est"], entry["gt"], entry["cams"], args.trunc_mm,
                args.out, False,
            )
            rows.append({"name": entry.get("name", f"object{i}"), **res.to_dict()})
        payload = {"rows": rows}
        out_path = os.path.join(args.out, "eval.json")
    else:
        if not (args.gt and args.cams):
            raise ValueError("--est requires --gt and --cams")
        result = _eval_one(
            args.est, args.gt, args.cams, args.trunc_mm, args.out, args.dump_clouds
        )
        payload = result.to_dict()
        inputs = {"est": args.est, "gt": args.gt, "cams": args.cams}
        out_path = os.path.join(args.out, "eval.json")
    with open(out_path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    _write_manifest(args.out, "eval", {"trunc_mm": args.trunc_mm}, inputs)
    print(json.dumps(payload, indent=2, sort_keys=True))
    return _EXIT_OK


def cmd_gradcheck(args):
    import numpy as np

    from . import nn

    rng = np.random.default_rng(args.seed)
    weights = nn.make_network(
        branch_channels=(3, 5), head_width=6, seed=args.seed, dtype=np.float64
    )
    patches = rng.random((2, 3, 1, 32, 32))
    labels = np.array([1, 0])
    worst, report = nn.gradient_check(weights, patches, labels)
    print(f"{'tensor':<12} {'max rel err':>12}  worst component")
    for name, (err, idx) in report.items():
        print(f"{name:<12} {err:>12.3e}  flat[{idx}]")
    ok = worst < 1e-4
    print(f"max relative error {worst:.3e} -> {'PASS' if ok else 'FAIL'} (limit 1e-4)")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "gradcheck.json"), "w") as f:
            json.dump(
                {
                    "seed": args.seed,
                    "max_rel_err": worst,
                    "per_tensor": {k: v[0] for k, v in report.items()},
                    "pass": bool(ok),
                },
                f,
                indent=2,
                sort_keys=True,
            )
        _write_manifest(args.out, "gradcheck", {"seed": args.seed}, {})
    return _EXIT_OK if ok else _EXIT_RUNTIME


def cmd_bench(args):
    import time

    import numpy as np

    from . import backend, nn

    names = args.backends.split(",") if args.backends else backend.available()
    rng = np.random.default_rng(0)
    results = {}

    def timeit(f, reps=3):
        f()
        t0 = time.perf_counter()
        for _ in range(reps):
            f()
        return (time.perf_counter() - t0) / reps

    for name in names:
        if name not in backend.available():
            raise ValueError(f"backend {name!r} not available ({backend.available()})")
        backend.use(name)
        w = nn.make_network(seed=1)
        batch = rng.random((64, 5, 1, 32, 32), dtype=np.float32)
        labels = (np.arange(64) % 2).astype(np.int64)
        t_train = timeit(lambda: nn.backward(w, batch, labels))
        tiles = np.ascontiguousarray(rng.random((5, 1, 128, 128), dtype=np.float32))
        def tile_pass():
            feats = nn._branch_forward(tiles, w)
            fused = nn.fuse(feats[None], "mean", 5)
            return nn._head_forward(fused, w)
        t_tile = timeit(tile_pass)
        img = rng.random((160, 160), dtype=np.float32)
        mask = np.ones_like(img, dtype=bool)
        hmat = np.array([[1.0, 0.01, 3.2], [-0.01, 1.0, -2.1], [1e-5, 0.0, 1.0]])
        ys, xs = np.mgrid[0:160, 0:160].astype(np.float64)
        t_warp = timeit(lambda: backend.bilinear_sample(img, mask, xs + 3.3, ys - 2.2), 10)
        t_wsum = timeit(lambda: backend.window_sum(img, 32), 10)
        results[name] = {
            "train_iter_ms": t_train * 1e3,
            "tile_forward_ms": t_tile * 1e3,
            "learned_scores_per_s": 625.0 / t_tile,
            "warp_160_ms": t_warp * 1e3,
            "window_sum_ms": t_wsum * 1e3,
        }
    backend.use(os.environ.get("MPSIM_BACKEND", "auto"))
    hdr = f"{'stage':<24}" + "".join(f"{n:>14}" for n in results)
    print(hdr)
    for key in next(iter(results.values())):
        row = f"{key:<24}"
        for n in results:
            row += f"{results[n][key]:>14.2f}"
        print(row)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "bench.json"), "w") as f:
            json.dump(results, f, indent=2, sort_keys=True)
        _write_manifest(args.out, "bench", {"backends": list(results)}, {})
    return _EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(
        prog="mpsim",
        description="Plane-sweep multi-view depth with learned n-way patch similarity",
    )
    p.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread count")
    p.add_argument("--backend", choices=("auto", "cython", "numpy"), default=None)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="render a synthetic scene directory")
    g.add_argument("--spec", help="SceneSpec JSON file")
    g.add_argument("--preset", choices=_PRESETS, default="plain")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("sample", help="draw a patch-sample cache from a scene")
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    for key in _SAMPLE_DEFAULTS:
        s.add_argument(f"--{key.replace('_', '-')}", type=type(_SAMPLE_DEFAULTS[key]))
    s.set_defaults(func=cmd_sample)

    t = sub.add_parser("train", help="train similarity weights on scene directories")
    t.add_argument("--scenes", nargs="+", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--resume", help="weights file to continue from")
    t.add_argument("--start-iteration", type=int, default=0)
    for key, val in _TRAIN_DEFAULTS.items():
        t.add_argument(f"--{key.replace('_', '-')}", type=type(val))
    t.set_defaults(func=cmd_train)

    w = sub.add_parser("sweep", help="plane-sweep depth estimation on a scene")
    w.add_argument("--scene", required=True)
    w.add_argument("--out", required=True)
    w.add_argument("--config")
    w.add_argument("--weights", help="MPSW weights (learned measures)")
    w.add_argument("--dump-slices", action="store_true")
    w.add_argument("--measure", choices=("sad", "zncc", "learned2", "learnedN"))
    w.add_argument("--plane-count", type=int)
    w.add_argument("--n-views", type=int)
    w.add_argument("--tile-side", type=int)
    w.add_argument("--box-filter", type=lambda v: v.lower() in ("1", "true", "yes"))
    w.add_argument("--box-filter-radius", type=int)
    w.add_argument("--subpixel", type=lambda v: v.lower() in ("1", "true", "yes"))
    w.add_argument("--consensus", choices=("mean", "median"))
    w.set_defaults(func=cmd_sweep)

    e = sub.add_parser("eval", help="accuracy/completeness of a depth map vs GT")
    e.add_argument("--est")
    e.add_argument("--gt")
    e.add_argument("--cams")
    e.add_argument("--list", help="JSON list of {name,est,gt,cams}: one row each")
    e.add_argument("--out", required=True)
    e.add_argument("--trunc-mm", type=float, default=20.0)
    e.add_argument("--dump-clouds", action="store_true")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="per-stage timings for the available backends")
    b.add_argument("--backends", help="comma list, default all available")
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse uses exit code 2 for usage errors; those are validation
        return _EXIT_VALIDATION if e.code else _EXIT_OK
    if args.threads is not None:
        if args.threads < 1:
            print("--threads must be >= 1", file=sys.stderr)
            return _EXIT_VALIDATION
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    if args.backend is not None:
        os.environ["MPSIM_BACKEND"] = args.backend
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, NotADirectoryError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return _EXIT_VALIDATION
    except Exception as e:  # noqa: BLE001 - runtime failures map to exit 2
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return _EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
