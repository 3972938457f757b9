"""Command-line pipeline: simulate, denoise, bench, analyze.

Every command is deterministic for a fixed ``--seed`` (wall-time fields
in bench reports aside). Primary parameters are flags; an optional JSON
config can supply any of them, with precedence flag > config > default.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from importlib import resources
from statistics import median

import numpy as np

from . import core, filtering, kernels, metrics, sim

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

_PRECISIONS = {"f32": np.float32, "f64": np.float64}


class DataError(Exception):
    """Bad or missing input data (exit code 3)."""


# ---------------------------------------------------------------------------
# Option plumbing
# ---------------------------------------------------------------------------


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise DataError("config file must hold a JSON object")
    return cfg


def _opt(args, cfg: dict, key: str, default):
    """flag > config > default."""
    val = getattr(args, key.replace("-", "_"), None)
    if val is not None:
        return val
    if key in cfg:
        return cfg[key]
    return default


def _resolve_threads(args, cfg) -> int:
    val = _opt(args, cfg, "threads", None)
    if val is None:
        env = os.environ.get("BURSTKERNEL_THREADS")
        val = int(env) if env else 1
    return max(1, int(val))


def _schema(name: str) -> dict:
    with resources.files("burstkernel.schemas").joinpath(name).open() as fh:
        return json.load(fh)


def _write_json(path, obj, schema_name: str) -> None:
    import jsonschema

    jsonschema.validate(obj, _schema(schema_name))
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _noise_from_opts(args, cfg) -> tuple[core.NoiseParams, int | None]:
    """Noise parameters from --meta, --gain, or explicit sigmas."""
    meta_path = _opt(args, cfg, "meta", None)
    if meta_path is not None:
        try:
            with open(meta_path) as fh:
                meta = json.load(fh)
            return core.NoiseParams(meta["sigma_r"], meta["sigma_s"]), meta.get("gain")
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read noise parameters from {meta_path}: {exc}") from exc
    gain = _opt(args, cfg, "gain", None)
    if gain is not None:
        try:
            return sim.gain_preset(int(gain)), int(gain)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
    sr = _opt(args, cfg, "sigma_r", None)
    ss = _opt(args, cfg, "sigma_s", None)
    if sr is None or ss is None:
        raise DataError("need --meta, --gain, or both --sigma-r and --sigma-s")
    return core.NoiseParams(float(sr), float(ss)), None


def _load_burst(path) -> core.Burst:
    try:
        arr = core.load_tensor(path)
    except (OSError, core.TensorFormatError) as exc:
        raise DataError(f"cannot load burst tensor {path}: {exc}") from exc
    if arr.ndim == 3:
        arr = arr[:, :, :, None]
    if arr.ndim != 4:
        raise DataError(f"burst tensor must be (T, H, W[, C]), got shape {arr.shape}")
    return core.Burst(tuple(core.Image(arr[t]) for t in range(arr.shape[0])))


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    image_path = _opt(args, cfg, "image", None)
    if image_path is None:
        raise DataError("simulate needs --image")
    try:
        clean = core.load_image_png(image_path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load image {image_path}: {exc}") from exc

    frames = int(_opt(args, cfg, "frames", 8))
    max_shift = int(_opt(args, cfg, "max_shift", 2))
    jitter = _opt(args, cfg, "jitter", None)
    seed = int(_opt(args, cfg, "seed", 0))
    params, gain = _noise_from_opts(args, cfg)

    out_dir = _opt(args, cfg, "out_dir", None)
    if out_dir is None:
        raise DataError("simulate needs --out-dir")
    os.makedirs(out_dir, exist_ok=True)

    rng = np.random.default_rng(seed)
    mcfg = sim.MotionConfig(max_shift=max_shift, jitter=None if jitter is None else int(jitter), seed=seed)
    try:
        burst, shifts = sim.synth_motion(clean, frames, mcfg, rng)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    noisy = sim.add_noise(burst, params, rng)

    core.save_tensor(os.path.join(out_dir, "clean.bkt"), burst.stacked(np.float32))
    core.save_tensor(os.path.join(out_dir, "noisy.bkt"), noisy.stacked(np.float32))
    meta = {
        "seed": seed,
        "frames": frames,
        "height": burst.height,
        "width": burst.width,
        "channels": burst.channels,
        "gain": gain,
        "outside_training_range": sim.GAIN_PRESETS[gain].outside_training_range if gain else None,
        "sigma_r": params.sigma_r,
        "sigma_s": params.sigma_s,
        "max_shift": max_shift,
        "jitter": mcfg.jitter,
        "shifts": [list(s) for s in shifts],
    }
    _write_json(os.path.join(out_dir, "meta.json"), meta, "simulate_meta.schema.json")
    print(f"wrote clean.bkt, noisy.bkt, meta.json to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# denoise
# ---------------------------------------------------------------------------


def cmd_denoise(args) -> int:
    cfg = _load_config(args.config)
    noisy_path = _opt(args, cfg, "noisy", None)
    if noisy_path is None:
        raise DataError("denoise needs --noisy")
    noisy = _load_burst(noisy_path)
    params, _ = _noise_from_opts(args, cfg)

    backend = _opt(args, cfg, "backend", "direct")
    precision = _opt(args, cfg, "precision", "f32")
    if precision not in _PRECISIONS:
        raise DataError(f"unknown precision {precision!r}")
    dt = _PRECISIONS[precision]
    tile = int(_opt(args, cfg, "tile", 0))
    k_side = int(_opt(args, cfg, "K", 15))
    patch_radius = int(_opt(args, cfg, "patch_radius", 1))
    bandwidth = float(_opt(args, cfg, "h", 0.6))
    b_req = _opt(args, cfg, "B", None)
    threads = _resolve_threads(args, cfg)
    out_dir = _opt(args, cfg, "out_dir", None)
    if out_dir is None:
        raise DataError("denoise needs --out-dir")
    os.makedirs(out_dir, exist_ok=True)

    try:
        field = kernels.estimate_kernels_nlm(
            noisy, params, patch_radius=patch_radius, K=k_side, h=bandwidth, dtype=dt
        )
    except ValueError as exc:
        raise DataError(str(exc)) from exc

    full_rank = k_side * k_side * noisy.T * noisy.channels
    b_used = None
    if b_req is not None:
        b_used = int(b_req)
    elif backend in ("factored", "fourier"):
        b_used = min(full_rank, noisy.height * noisy.width)

    basis = coeffs = None
    if b_used is not None:
        try:
            basis, coeffs = kernels.compress_kernel_field(field, b_used)
        except ValueError as exc:
            raise DataError(str(exc)) from exc

    if backend == "direct":
        use_field = kernels.reconstruct_kernels(basis, coeffs, dtype=dt) if basis is not None else field
        result = filtering.filter_direct(noisy, use_field, dtype=dt)
    elif backend == "factored":
        result = filtering.filter_factored(noisy, basis, coeffs, dtype=dt)
    elif backend == "fourier":
        result = filtering.filter_fourier(noisy, basis, coeffs, dtype=dt, tile=tile, workers=threads)
    else:
        raise DataError(f"unknown backend {backend!r}")

    core.save_tensor(os.path.join(out_dir, "denoised.bkt"), result.data)
    png_depth = 16 if result.channels == 1 else 8
    core.save_image_png(os.path.join(out_dir, "denoised.png"), result, bit_depth=png_depth)

    clean_path = _opt(args, cfg, "clean", None)
    out_psnr = noisy_psnr = l2 = l1 = per_frame = None
    if clean_path is not None:
        clean = _load_burst(clean_path).reference
        if (clean.height, clean.width, clean.channels) != (result.height, result.width, result.channels):
            raise DataError("clean reference does not match the denoised output size")
        out_psnr = metrics.psnr(result, clean)
        noisy_psnr = metrics.psnr(noisy.reference, clean)
        l2, l1 = metrics.loss_terms(result, clean)
        per_frame = [
            metrics.psnr(est, clean) for est in filtering.per_frame_estimates(noisy, field, dtype=dt)
        ]
    report = {
        "backend": backend,
        "precision": precision,
        "K": k_side,
        "T": noisy.T,
        "B": b_used,
        "tile": tile,
        "bandwidth": bandwidth,
        "patch_radius": patch_radius,
        "sigma_r": params.sigma_r,
        "sigma_s": params.sigma_s,
        "psnr": out_psnr,
        "psnr_noisy_reference": noisy_psnr,
        "l2_intensity": l2,
        "l1_gradient": l1,
        "per_frame_psnr": per_frame,
    }
    _write_json(os.path.join(out_dir, "metrics.json"), report, "denoise_metrics.schema.json")
    print(f"wrote denoised.bkt, denoised.png, metrics.json to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def _bench_direct(noisy: core.Burst, k_side: int, dt, patch: int) -> float:
    """One timed direct-filter pass over the burst in patch x patch blocks.

    All blocks share one uniform kernel-field tile: weight values do not
    affect the filtering cost, and a full-frame per-pixel field at large
    K would not fit in memory.
    """
    h, w = noisy.height, noisy.width
    tile_field = np.full(
        (min(patch, h), min(patch, w), k_side, k_side, noisy.T, 1),
        1.0 / (k_side * k_side * noisy.T),
        dtype=dt,
    )
    start = time.perf_counter()
    for y0 in range(0, h, patch):
        th = min(patch, h - y0)
        for x0 in range(0, w, patch):
            tw = min(patch, w - x0)
            block = core.Burst(
                tuple(core.Image(f.data[y0 : y0 + th, x0 : x0 + tw, :]) for f in noisy.frames)
            )
            kf = core.KernelField(tile_field[:th, :tw], normalized=True)
            filtering.filter_direct(block, kf, dtype=dt)
    return time.perf_counter() - start


def _random_normalized_pair(rng, h, w, k_side, t, c, b, dt):
    elems = np.stack(
        [core.softmax_normalize(rng.standard_normal((k_side, k_side, t, c))) for _ in range(b)],
        axis=-1,
    ).astype(dt)
    basis = core.KernelBasis(elems, normalized=True)
    coeffs = core.CoefficientField(
        core.softmax_normalize(rng.standard_normal((h, w, b)), axis=2).astype(dt), normalized=True
    )
    return basis, coeffs


def cmd_bench(args) -> int:
    cfg = _load_config(args.config)
    height = int(_opt(args, cfg, "height", 768))
    width = int(_opt(args, cfg, "width", 1024))
    frames = int(_opt(args, cfg, "frames", 8))
    k_list = _opt(args, cfg, "K", None) or [15]
    k_list = [int(k) for k in (k_list if isinstance(k_list, (list, tuple)) else [k_list])]
    b_count = int(_opt(args, cfg, "B", 90))
    c_count = int(_opt(args, cfg, "C", 1))
    backends = _opt(args, cfg, "backends", "direct,factored,fourier")
    backends = [b.strip() for b in backends.split(",")] if isinstance(backends, str) else list(backends)
    for b in backends:
        if b not in metrics.BACKENDS:
            raise DataError(f"unknown backend {b!r}")
    trials = int(_opt(args, cfg, "trials", 5))
    warmup = int(_opt(args, cfg, "warmup", 1))
    seed = int(_opt(args, cfg, "seed", 0))
    precision = _opt(args, cfg, "precision", "f32")
    if precision not in _PRECISIONS:
        raise DataError(f"unknown precision {precision!r}")
    dt = _PRECISIONS[precision]
    tile = int(_opt(args, cfg, "tile", 0))
    threads = _resolve_threads(args, cfg)
    if trials < 1:
        raise DataError("need at least one trial")

    rng = np.random.default_rng(seed)
    clean = sim.make_test_image(height, width, channels=c_count, seed=seed)
    burst = core.Burst(tuple(clean for _ in range(frames)))
    noisy = sim.add_noise(burst, sim.gain_preset(2), rng)
    noisy = core.Burst(tuple(core.Image(f.data.astype(dt)) for f in noisy.frames))

    results = []
    for k_side in k_list:
        basis, coeffs = _random_normalized_pair(rng, height, width, k_side, frames, c_count, b_count, dt)
        cache = filtering.PlanCache()
        for backend in backends:
            def run() -> float:
                if backend == "direct":
                    return _bench_direct(noisy, k_side, dt, patch=128)
                start = time.perf_counter()
                if backend == "factored":
                    filtering.filter_factored(noisy, basis, coeffs, dtype=dt)
                else:
                    filtering.filter_fourier(
                        noisy, basis, coeffs, plan_cache=cache, dtype=dt, tile=tile, workers=threads
                    )
                return time.perf_counter() - start

            for _ in range(warmup):
                run()
            times = [run() * 1000.0 for _ in range(trials)]
            results.append(
                {
                    "backend": backend,
                    "K": k_side,
                    "wall_time_ms": median(times),
                    "spread_ms": (max(times) - min(times)) if trials > 1 else None,
                    "trials": trials,
                    "flops": metrics.flop_report(height, width, k_side, frames, b_count, c_count, backend).to_dict(),
                }
            )

    report = {
        "config": {
            "height": height,
            "width": width,
            "frames": frames,
            "B": b_count,
            "C": c_count,
            "trials": trials,
            "warmup": warmup,
            "seed": seed,
            "precision": precision,
            "tile": tile,
        },
        "results": results,
    }
    out_path = _opt(args, cfg, "out", None)
    if out_path:
        _write_json(out_path, report, "bench_report.schema.json")
        print(f"wrote bench report to {out_path}")
    else:
        import jsonschema

        jsonschema.validate(report, _schema("bench_report.schema.json"))
        json.dump(report, sys.stdout, indent=2, sort_keys=True)
        print()
    return 0


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def cmd_analyze(args) -> int:
    cfg = _load_config(args.config)
    burst_paths = _opt(args, cfg, "bursts", None) or []
    if len(burst_paths) < 2:
        raise DataError("analyze needs two or more burst tensors for pairwise statistics")
    params, _ = _noise_from_opts(args, cfg)
    k_side = int(_opt(args, cfg, "K", 15))
    b_count = int(_opt(args, cfg, "B", 90))
    patch_radius = int(_opt(args, cfg, "patch_radius", 1))
    bandwidth = float(_opt(args, cfg, "h", 0.6))
    seed = int(_opt(args, cfg, "seed", 0))
    kmeans_k = _opt(args, cfg, "kmeans", None)

    bases = []
    coeff_fields = []
    ranks, ranks_norm, singvals = [], [], []
    for path in burst_paths:
        burst = _load_burst(path)
        b_eff = min(b_count, burst.height * burst.width, k_side * k_side * burst.T * burst.channels)
        try:
            field = kernels.estimate_kernels_nlm(
                burst, params, patch_radius=patch_radius, K=k_side, h=bandwidth, dtype=np.float32
            )
            basis, coeffs = kernels.compress_kernel_field(field, b_eff)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        bases.append(basis)
        coeff_fields.append(coeffs)
        ranks.append(kernels.basis_rank(basis))
        normalized = core.KernelBasis(
            np.stack(
                [core.softmax_normalize(basis.elements[..., i]) for i in range(basis.B)], axis=-1
            ),
            normalized=True,
        )
        ranks_norm.append(kernels.basis_rank(normalized))
        singvals.append([float(s) for s in kernels.basis_singular_values(basis)])

    pair_rank = []
    overlaps = []
    for i in range(len(bases)):
        for j in range(i + 1, len(bases)):
            pair_rank.append({"i": i, "j": j, "rank": kernels.union_rank(bases[i], bases[j])})
            overlaps.append({"i": i, "j": j, "ratio": kernels.overlap_ratio(bases[i], bases[j])})

    wcss = None
    if kmeans_k is not None:
        km = kernels.cluster_coefficients(coeff_fields[0], int(kmeans_k), seed=seed)
        wcss = km.wcss
        labels_png = _opt(args, cfg, "labels_png", None)
        if labels_png:
            core.save_image_png(labels_png, km.label_image(), bit_depth=8)

    report = {
        "B": b_count,
        "K": k_side,
        "rank": ranks,
        "rank_normalized": ranks_norm,
        "singular_values": singvals,
        "pair_rank": pair_rank,
        "overlap_ratio": overlaps,
        "mean_overlap_ratio": float(np.mean([o["ratio"] for o in overlaps])) if overlaps else None,
        "wcss": wcss,
    }
    out_path = _opt(args, cfg, "out", None)
    if out_path:
        _write_json(out_path, report, "analyze_report.schema.json")
        print(f"wrote analyze report to {out_path}")
    else:
        import jsonschema

        jsonschema.validate(report, _schema("analyze_report.schema.json"))
        json.dump(report, sys.stdout, indent=2, sort_keys=True)
        print()
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="burstkernel",
        description="Burst denoising with low-rank kernel bases: simulate, denoise, bench, analyze.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON config merged under explicit flags")
        p.add_argument("--seed", type=int, help="RNG seed (default 0)")
        p.add_argument("--threads", type=int, help="worker cap; env BURSTKERNEL_THREADS as fallback")

    def add_noise_opts(p):
        p.add_argument("--gain", type=int, choices=(1, 2, 4, 8), help="gain preset")
        p.add_argument("--sigma-r", type=float, help="read-noise std")
        p.add_argument("--sigma-s", type=float, help="shot-noise scale")
        p.add_argument("--meta", help="metadata JSON carrying sigma_r/sigma_s")

    p = sub.add_parser("simulate", help="generate a clean/noisy burst pair from an image")
    add_common(p)
    add_noise_opts(p)
    p.add_argument("--image", help="input PNG (8- or 16-bit)")
    p.add_argument("--frames", type=int, help="burst length T (default 8)")
    p.add_argument("--max-shift", type=int, help="crop margin and shift bound (default 2)")
    p.add_argument("--jitter", type=int, help="per-frame shift bound (default max-shift)")
    p.add_argument("--out-dir", help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("denoise", help="estimate kernels and filter a noisy burst")
    add_common(p)
    add_noise_opts(p)
    p.add_argument("--noisy", help="noisy burst tensor (BKT1)")
    p.add_argument("--clean", help="clean burst tensor for PSNR reporting")
    p.add_argument("--backend", choices=metrics.BACKENDS, help="filtering backend (default direct)")
    p.add_argument("--precision", choices=("f32", "f64"), help="working precision (default f32)")
    p.add_argument("--tile", type=int, help="fourier tile size, 0 = full frame")
    p.add_argument("--K", type=int, help="kernel side (default 15)")
    p.add_argument("--B", type=int, help="basis size; compresses kernels before filtering")
    p.add_argument("--patch-radius", type=int, help="patch radius for kernel estimation (default 1)")
    p.add_argument("--h", type=float, help="estimation bandwidth (default 0.6)")
    p.add_argument("--out-dir", help="output directory")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("bench", help="time filtering backends on a synthetic burst")
    add_common(p)
    p.add_argument("--height", type=int, help="image height (default 768)")
    p.add_argument("--width", type=int, help="image width (default 1024)")
    p.add_argument("--frames", type=int, help="burst length T (default 8)")
    p.add_argument("--K", type=int, nargs="+", help="kernel sides to bench (default 15)")
    p.add_argument("--B", type=int, help="basis size (default 90)")
    p.add_argument("--C", type=int, choices=(1, 3), help="channels (default 1)")
    p.add_argument("--backends", help="comma list from direct,factored,fourier (default all)")
    p.add_argument("--trials", type=int, help="timed trials per entry (default 5)")
    p.add_argument("--warmup", type=int, help="untimed warmup runs (default 1)")
    p.add_argument("--precision", choices=("f32", "f64"), help="working precision (default f32)")
    p.add_argument(
        "--tile",
        type=int,
        help="fourier tile size, 0 = full frame; the direct backend always runs 128x128 patches",
    )
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("analyze", help="rank/overlap statistics across burst-specific bases")
    add_common(p)
    add_noise_opts(p)
    p.add_argument("--bursts", nargs="+", help="two or more burst tensors (BKT1)")
    p.add_argument("--K", type=int, help="kernel side (default 15)")
    p.add_argument("--B", type=int, help="basis size (default 90)")
    p.add_argument("--patch-radius", type=int, help="patch radius (default 1)")
    p.add_argument("--h", type=float, help="estimation bandwidth (default 0.6)")
    p.add_argument("--kmeans", type=int, help="cluster the first burst's coefficients into k groups")
    p.add_argument("--labels-png", help="write the k-means label map here")
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_analyze)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except np.linalg.LinAlgError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
