"""``sigattn`` command line: bench, gradcheck, probe, stability, mmd, jaggedness.

Exit codes: 0 success, 1 a verification check failed, 2 usage error.

Every output file gets a ``<file>.manifest.json`` beside it, holding the
resolved config, the master seed, the argv needed to re-run, timestamps and
the list of outputs.  Component seeds come from :func:`derive_seed`, which
hashes the master seed together with a scope path, so adding a new consumer
never shifts the seeds of existing ones.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
import tempfile
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    GradcheckError,
    composed_jacobian_probe,
    gradcheck_attention,
    jacobian_norm_probe,
    sigmoid_derivative_scan,
)
from .bench import BenchConfig, blocked_impl, dense_impl, emit_report, make_bench_batch, measure
from .jagged import EmptyInputError, JaggedBatch, LengthDistributionSpec, coverage_at_thresholds, length_histogram, sample_lengths
from .kernel import TileConfig, blocked_forward
from .mmd import EmbeddingSet, bootstrap_mmd, gaussian_mixture_embeddings, read_embeddings_csv, write_mmd_table
from .reference import AttentionConfig, dense_forward

OUT_DIR_ENV = "SIGATTN_OUT_DIR"
DEFAULT_THRESHOLDS = (2048, 4096, 8192, 16384)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flag values detected after parsing; maps to exit code 2."""


def derive_seed(master: int, *scope) -> int:
    """Stable 32-bit seed for ``scope`` under ``master``:
    the first four bytes of sha256("<master>/<scope[0]>/<scope[1]>/...")."""
    key = "/".join([str(int(master)), *map(str, scope)])
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:4], "little")


@dataclasses.dataclass
class RunManifest:
    subcommand: str
    config: dict
    seed: int
    argv: list[str]
    tool_version: str = __version__
    started: str = ""
    finished: str = ""
    outputs: list[str] = dataclasses.field(default_factory=list)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def manifest_path(output) -> Path:
    output = Path(output)
    return output.with_name(output.name + ".manifest.json")


def write_manifests(manifest: RunManifest) -> list[Path]:
    """One manifest per output, each listing every output of the run."""
    manifest.finished = _now()
    text = json.dumps(dataclasses.asdict(manifest), indent=2, default=_json_default)
    paths = []
    for out in manifest.outputs:
        p = manifest_path(out)
        _atomic_write(p, text)
        paths.append(p)
    return paths


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _write_json(path: Path, obj) -> Path:
    _atomic_write(path, json.dumps(obj, indent=2, default=_json_default))
    return path


# ---------------------------------------------------------------- flag parsing


def _csv_list(cast):
    def parse(text: str):
        try:
            items = tuple(cast(x) for x in text.split(",") if x.strip())
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
        if not items:
            raise argparse.ArgumentTypeError("empty list")
        return items

    return parse


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _out_dir(args) -> Path:
    d = Path(args.out_dir or os.environ.get(OUT_DIR_ENV) or "sigattn_runs")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _start(args, subcommand: str, config: dict) -> RunManifest:
    return RunManifest(subcommand, config, args.seed, ["sigattn", *args.argv], started=_now())


# ---------------------------------------------------------------- bench


def cmd_bench(args) -> int:
    try:
        cfg = BenchConfig(
            seq_lengths=args.seq_lens,
            token_budget=args.token_budget,
            head_dims=args.head_dims,
            hidden_dim=args.hidden_dim,
            padding_fractions=args.padding,
            iterations=args.iterations,
            warmup_ms=args.warmup_ms,
            confidence=args.confidence,
        )
        tiles = TileConfig(args.block_m, args.block_n, worker_count=args.workers)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    dtype = np.float32 if args.precision == "single" else np.float64
    grid = [
        (n, d, p, direction, impl)
        for n in cfg.seq_lengths
        for d in cfg.head_dims
        for p in cfg.padding_fractions
        for direction in ("forward", "backward")
        for impl in args.impls
    ]
    config = {"bench": dataclasses.asdict(cfg), "tiles": dataclasses.asdict(tiles), "impls": list(args.impls),
              "precision": args.precision, "verify_max_bytes": args.verify_max_bytes}
    if args.dry_run:
        print(json.dumps({**config, "records": len(grid)}, indent=2))
        return EXIT_OK

    manifest = _start(args, "bench", config)
    acfg = AttentionConfig()
    records, verification, failed = [], [], False
    batches = {}
    for n, d, p, direction, impl in grid:
        b, h = cfg.batch_size(n), cfg.hidden_dim // d
        key = (n, d, p)
        if key not in batches:
            batch, dO = make_bench_batch(b, n, h, d, p, derive_seed(args.seed, "bench", n, d, p), dtype)
            batches = {key: (batch, dO)}
            verification.append(_verify_bench_batch(batch, acfg, tiles, args.verify_max_bytes))
            failed |= verification[-1]["ok"] is False
        batch, dO = batches[key]
        if impl == "dense":
            fn = dense_impl(direction, acfg, dO)
        else:
            fn = blocked_impl(direction, acfg, dO)
        run_tiles = dataclasses.replace(tiles, skip_padded_blocks=impl != "blocked_noskip")
        rec = measure(fn, batch, run_tiles, direction, cfg, name=impl, padding=p)
        records.append(rec)
        status = rec.error or f"{rec.mean_s * 1e3:9.3f} ms  {rec.tflops:.4g} TFLOPS"
        print(f"{impl:>15} {direction:>8} n={n:<6} d={d:<4} pad={p:<5} {status}")

    out = Path(args.out) if args.out else _out_dir(args) / f"bench.{args.format}"
    emit_report(records, args.format, out)
    manifest.config["verification"] = verification
    manifest.outputs = [str(out)]
    write_manifests(manifest)
    print(f"wrote {out} ({len(records)} records)")
    if failed:
        print("blocked kernel disagrees with the dense reference", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def _verify_bench_batch(batch: JaggedBatch, acfg, tiles, max_bytes: float) -> dict:
    """Compare the blocked forward with the dense oracle when the oracle fits."""
    info = {"b": batch.Z, "h": batch.H, "n": batch.L_q, "d": batch.D}
    if 8.0 * batch.Z * batch.H * batch.L_q * batch.L_k * 2 > max_bytes:
        return {**info, "ok": None, "rel_err": None}
    from .analysis import rel_err

    got, _ = blocked_forward(batch, acfg, tiles)
    err = rel_err(got, dense_forward(batch, acfg))
    tol = 1e-5 if batch.dtype == np.float32 else 1e-10
    return {**info, "ok": bool(err <= tol), "rel_err": err}


# ---------------------------------------------------------------- gradcheck


def _gradcheck_cases(seed: int, count: int):
    rng = np.random.default_rng(derive_seed(seed, "gradcheck", "cases"))
    for i in range(count):
        Z, H, D = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 5))
        L = int(rng.integers(1, 9))
        n = rng.integers(1, L + 1, Z)
        bm, bn = int(rng.choice([1, 2, 4, 8])), int(rng.choice([1, 2, 4, 8]))
        data = rng.standard_normal((3, Z, L, H, D))
        mask = (np.arange(L)[None, :] < n[:, None])[:, :, None, None]
        yield i, JaggedBatch(data[0] * mask, data[1] * mask, data[2] * mask, n, n.copy()), TileConfig(bm, bn)


def cmd_gradcheck(args) -> int:
    config = {"cases": args.cases, "h": args.h, "tol": args.tol, "model_tol": args.model_tol,
              "model": not args.skip_model, "inject_bug": args.inject_bug}
    manifest = _start(args, "gradcheck", config)
    acfg = AttentionConfig()
    cases, offending = [], []
    for i, batch, tiles in _gradcheck_cases(args.seed, args.cases):
        rep = gradcheck_attention(
            batch, acfg, tiles, args.h, seed=derive_seed(args.seed, "gradcheck", "dO", i),
            fail_above=None, perturb_dq=1e-3 if args.inject_bug else 0.0,
        )
        row = {"case": i, "Z": batch.Z, "L": batch.L_q, "H": batch.H, "D": batch.D,
               "n": batch.n_q.tolist(), "block_m": tiles.block_m, "block_n": tiles.block_n,
               **rep.to_dict(), "passed": bool(rep.worst <= args.tol)}
        cases.append(row)
        if not row["passed"]:
            offending.append(row)
    worst = max(c["worst"] for c in cases)

    model_rows = []
    if not args.skip_model:
        from .lab import EncoderConfig, EncoderModel, MarkovTokenStream, model_gradcheck

        for mech in ("sigmoid", "softmax"):
            ecfg = EncoderConfig(layers=1, d_model=8, heads=1, vocab_size=11, max_len=5, mechanism=mech,
                                 init_std=0.5, block_m=2, block_n=2)
            model = EncoderModel.init(ecfg, derive_seed(args.seed, "gradcheck", "model"))
            batch = next(MarkovTokenStream(11, 5, 3, 0.3, seed=derive_seed(args.seed, "gradcheck", "data")))
            errs = model_gradcheck(model, batch, args.h)
            row = {"mechanism": mech, "worst": max(errs.values()), "per_param": errs}
            row["passed"] = bool(row["worst"] <= args.model_tol)
            model_rows.append(row)
            if not row["passed"]:
                offending.append(row)

    passed = not offending
    out = Path(args.out) if args.out else _out_dir(args) / "gradcheck.json"
    _write_json(out, {"passed": passed, "max_rel_err": worst, "cases": cases, "model": model_rows,
                      "offending": offending})
    manifest.outputs = [str(out)]
    write_manifests(manifest)
    print(f"kernel gradcheck: {len(cases)} cases, max rel err {worst:.3e} (tol {args.tol:g})")
    for row in model_rows:
        print(f"model gradcheck ({row['mechanism']}): max rel err {row['worst']:.3e} (tol {args.model_tol:g})")
    if not passed:
        print("FAILED: " + json.dumps(offending[0], default=_json_default), file=sys.stderr)
        return EXIT_FAIL
    print("PASSED")
    return EXIT_OK


# ---------------------------------------------------------------- probe


def cmd_probe(args) -> int:
    mechs = ("softmax", "sigmoid") if args.mechanism == "both" else (args.mechanism,)
    config = {"mechanism": args.mechanism, "scales": list(args.scales), "rows": args.rows, "n": args.n,
              "composed": args.composed}
    manifest = _start(args, "probe", config)
    rng = np.random.default_rng(derive_seed(args.seed, "probe", "rows"))
    summary = {
        t: {"sigmoid_max_norm": 0.0, "sigmoid_max_offdiag": 0.0, "sigmoid_max_diag": 0.0,
            "softmax_max_norm": 0.0, "softmax_min_offdiag": np.inf}
        for t in args.scales
    }
    for _ in range(args.rows):
        rep = jacobian_norm_probe(rng.standard_normal(args.n), args.scales)
        for j, t in enumerate(args.scales):
            s = summary[t]
            s["sigmoid_max_norm"] = max(s["sigmoid_max_norm"], rep.sigmoid_spectral_norms[j])
            s["sigmoid_max_offdiag"] = max(s["sigmoid_max_offdiag"], rep.sigmoid_max_offdiag[j])
            s["sigmoid_max_diag"] = max(s["sigmoid_max_diag"], rep.sigmoid_max_diag[j])
            s["softmax_max_norm"] = max(s["softmax_max_norm"], rep.softmax_spectral_norms[j])
            s["softmax_min_offdiag"] = min(s["softmax_min_offdiag"], rep.softmax_max_offdiag[j])
    peak, at = sigmoid_derivative_scan(np.linspace(-10, 10, 20001))

    failures = []
    rows = []
    for t in args.scales:
        s = summary[t]
        row = {"scale": t}
        if "sigmoid" in mechs:
            row.update({k: v for k, v in s.items() if k.startswith("sigmoid")})
            if s["sigmoid_max_norm"] > 0.25 or s["sigmoid_max_diag"] > 0.25:
                failures.append(f"t={t}: sigmoid Jacobian norm {s['sigmoid_max_norm']} exceeds 1/4")
            if s["sigmoid_max_offdiag"] != 0.0:
                failures.append(f"t={t}: sigmoid Jacobian has off-diagonal entries")
        if "softmax" in mechs:
            row.update({k: v for k, v in s.items() if k.startswith("softmax")})
            # at large t a random row can saturate to one-hot, so only the first scale is checked
            if args.n >= 2 and t == min(args.scales) and s["softmax_min_offdiag"] == 0.0:
                failures.append(f"t={t}: softmax Jacobian has a row without coupling")
        rows.append(row)
    if "sigmoid" in mechs and abs(peak - 0.25) > 1e-12:
        failures.append(f"sigmoid derivative peak {peak} != 1/4")

    report = {"passed": not failures, "failures": failures, "scales": rows,
              "sigmoid_derivative_peak": {"value": peak, "at": at}}
    if args.composed:
        crng = np.random.default_rng(derive_seed(args.seed, "probe", "composed"))
        x, wq, wk, wv = (crng.standard_normal(s) for s in ((4, 4), (4, 4), (4, 4), (4, 4)))
        report["composed"] = composed_jacobian_probe(x, wq, wk, wv, args.scales)
    out = Path(args.out) if args.out else _out_dir(args) / "probe.json"
    _write_json(out, report)
    manifest.outputs = [str(out)]
    write_manifests(manifest)

    header = f"{'t':>8}" + "".join(f"{m + ' |J|_2':>16}" for m in mechs)
    print(header)
    for t in args.scales:
        print(f"{t:>8g}" + "".join(f"{summary[t][m + '_max_norm']:>16.6g}" for m in mechs))
    if failures:
        for f in failures:
            print("FAILED: " + f, file=sys.stderr)
        return EXIT_FAIL
    print("PASSED")
    return EXIT_OK


# ---------------------------------------------------------------- stability

_ENCODER_FLAGS = {"layers": "layers", "d_model": "d_model", "heads": "heads", "vocab": "vocab_size",
                  "max_len": "max_len", "block": None}
_TRAIN_FLAGS = {"steps": "steps", "lr": "lr", "batch": "batch", "mask_prob": "mask_prob",
                "warmup_steps": "warmup_steps", "weight_decay": "weight_decay"}


def resolve_stability_configs(args):
    """Defaults, then the ``--config`` file, then explicit flags."""
    from .lab import EncoderConfig, TrainConfig

    enc, tr = {}, {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read --config: {exc}") from None
        enc.update(data.get("encoder", {}))
        tr.update(data.get("train", {}))
    for flag, field in _ENCODER_FLAGS.items():
        v = getattr(args, flag)
        if v is None:
            continue
        if flag == "block":
            enc["block_m"] = enc["block_n"] = v
        else:
            enc[field] = v
    for flag, field in _TRAIN_FLAGS.items():
        v = getattr(args, flag)
        if v is not None:
            tr[field] = v
    if args.clip is not None:
        tr["clip_norm"] = None if args.clip == "off" else args.clip
    tr["seed"] = derive_seed(args.seed, "stability") if args.seed is not None else tr.get("seed", 42)
    if args.mechanism is not None:
        enc["mechanism"] = args.mechanism
    try:
        return EncoderConfig(**enc), TrainConfig(**tr)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad stability config: {exc}") from None


def cmd_stability(args) -> int:
    from .lab import train, write_run

    ecfg, tcfg = resolve_stability_configs(args)
    mechs = ("softmax", "sigmoid") if args.paired else (ecfg.mechanism,)
    config = {"encoder": dataclasses.asdict(ecfg), "train": dataclasses.asdict(tcfg), "paired": args.paired}
    manifest = _start(args, "stability", config)
    out_dir = Path(args.out) if args.out else _out_dir(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    logs, failures = {}, []
    for mech in mechs:
        run_cfg = dataclasses.replace(ecfg, mechanism=mech)
        t0 = time.perf_counter()
        log, _ = train(run_cfg, tcfg)
        logs[mech] = log
        csv_path, cfg_path = write_run(log, run_cfg, tcfg, out_dir / f"stability_{mech}.csv")
        manifest.outputs += [str(csv_path), str(cfg_path)]
        loss = log.column("loss")
        print(f"{mech}: {len(log)} steps in {time.perf_counter() - t0:.1f}s, "
              f"loss {loss[0]:.4f} -> {loss[-1]:.4f}, max grad norm {np.nanmax(log.column('global_grad_norm')):.4g}")
        if tcfg.clip_norm is not None:
            post = log.column("post_clip_grad_norm")
            if np.any(post > tcfg.clip_norm + 1e-6):
                failures.append(f"{mech}: post-clip norm {np.nanmax(post)} above {tcfg.clip_norm}")
        if mech == "sigmoid":
            deriv = log.column("layer0_max_weight_derivative")
            if np.any(deriv > 0.25):
                failures.append(f"sigmoid weight derivative {np.nanmax(deriv)} above 1/4")
    if args.paired:
        a, b = (list(logs[m].column("batch_hash")) for m in mechs)
        if a != b:
            failures.append("paired runs consumed different batches")
        else:
            print(f"paired runs share all {len(a)} batch hashes")
    write_manifests(manifest)
    if failures:
        for f in failures:
            print("FAILED: " + f, file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def _clip_flag(text: str):
    if text == "off":
        return "off"
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("--clip must be > 0")
    return v


# ---------------------------------------------------------------- mmd


def cmd_mmd(args) -> int:
    if args.input:
        try:
            sets = read_embeddings_csv(args.input, args.label_column)
        except (OSError, ValueError) as exc:
            raise UsageError(str(exc)) from None
    else:
        sets = gaussian_mixture_embeddings(
            args.synthetic, args.points_per_label, args.dim, seed=derive_seed(args.seed, "mmd", "synthetic")
        )
    if len(sets) < 2:
        raise UsageError(f"need at least two labels, found {len(sets)}")
    if args.estimator == "unbiased" and min(len(s) for s in sets) < 2:
        raise UsageError("the unbiased estimator needs at least two points per label")
    config = {"input": args.input, "synthetic": None if args.input else args.synthetic,
              "points_per_label": args.points_per_label, "dim": args.dim, "resamples": args.resamples,
              "ci": args.ci, "estimator": args.estimator, "labels": [s.label for s in sets]}
    manifest = _start(args, "mmd", config)
    rows = []
    for i, sa in enumerate(sets):
        for sb in sets[i + 1:]:
            res = bootstrap_mmd(sa, sb, args.resamples, args.ci, args.estimator,
                                seed=derive_seed(args.seed, "mmd", "bootstrap", sa.label, sb.label))
            rows.append((f"{sa.label} vs {sb.label}", res))
            print(f"{sa.label} vs {sb.label}: MMD^2 {res.point_estimate:.5f} "
                  f"[{res.ci_lower:.5f}, {res.ci_upper:.5f}]")
    out = Path(args.out) if args.out else _out_dir(args) / "mmd.csv"
    write_mmd_table(rows, out)
    manifest.outputs = [str(out)]
    write_manifests(manifest)
    print(f"wrote {out} ({len(rows)} pairs)")
    return EXIT_OK


# ---------------------------------------------------------------- jaggedness


def _read_lengths(path) -> np.ndarray:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(str(exc)) from None
    try:
        vals = [int(float(tok)) for tok in text.replace(",", " ").split()]
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None
    if any(v < 0 for v in vals):
        raise UsageError(f"{path}: negative length")
    return np.array(vals, dtype=np.int64)


def cmd_jaggedness(args) -> int:
    if args.lengths_file:
        lengths = _read_lengths(args.lengths_file)
        spec = None
    else:
        if args.count < 1:
            raise UsageError("--count must be >= 1")
        try:
            spec = LengthDistributionSpec(args.family, args.loc, args.scale, args.min_len, args.max_len,
                                          derive_seed(args.seed, "jaggedness"))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        lengths = sample_lengths(spec, args.count)
    try:
        cov = coverage_at_thresholds(lengths, args.thresholds)
        counts, edges = length_histogram(lengths, args.bins)
    except EmptyInputError as exc:
        raise UsageError(str(exc)) from None
    config = {"lengths_file": args.lengths_file, "spec": spec and dataclasses.asdict(spec),
              "thresholds": list(args.thresholds), "bins": args.bins, "count": int(lengths.size)}
    manifest = _start(args, "jaggedness", config)
    out_dir = Path(args.out) if args.out else _out_dir(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    cov_path, hist_path = out_dir / "coverage.csv", out_dir / "histogram.csv"
    with open(cov_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("threshold", "coverage"))
        for t, c in zip(args.thresholds, cov):
            w.writerow((t, repr(float(c))))
            print(f"<= {t:>6}: {c:.4f}")
    with open(hist_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("bin_lo", "bin_hi", "count"))
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow((repr(float(lo)), repr(float(hi)), int(c)))
    manifest.outputs = [str(cov_path), str(hist_path)]
    write_manifests(manifest)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _common(seed_default: int | None = 0) -> argparse.ArgumentParser:
    # a fresh parent per subcommand: parent actions are shared, so defaults must not be
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=seed_default, help="master seed")
    common.add_argument("--out-dir", default=None, help=f"output directory (default ${OUT_DIR_ENV} or ./sigattn_runs)")
    return common


def build_parser() -> argparse.ArgumentParser:

    p = argparse.ArgumentParser(prog="sigattn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"sigattn {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    d = BenchConfig()
    b = sub.add_parser("bench", parents=[_common()], help="time blocked attention over a config grid")
    b.add_argument("--seq-lens", type=_csv_list(int), default=d.seq_lengths)
    b.add_argument("--head-dims", type=_csv_list(int), default=d.head_dims)
    b.add_argument("--padding", type=_csv_list(float), default=d.padding_fractions)
    b.add_argument("--token-budget", type=int, default=d.token_budget)
    b.add_argument("--hidden-dim", type=int, default=d.hidden_dim)
    b.add_argument("--iterations", type=int, default=d.iterations)
    b.add_argument("--warmup-ms", type=int, default=d.warmup_ms)
    b.add_argument("--confidence", type=float, default=d.confidence)
    b.add_argument("--block-m", type=_positive_int, default=64)
    b.add_argument("--block-n", type=_positive_int, default=64)
    b.add_argument("--workers", type=_positive_int, default=1)
    b.add_argument("--precision", choices=("single", "double"), default="single")
    b.add_argument("--impls", type=_csv_list(str), default=("blocked",),
                   help="comma list of blocked, blocked_noskip, dense")
    b.add_argument("--verify-max-bytes", type=float, default=2.5e8,
                   help="check blocked output against the dense oracle when its scores fit in this many bytes")
    b.add_argument("--format", choices=("csv", "json"), default="csv")
    b.add_argument("--out", default=None, help="report path")
    b.add_argument("--dry-run", action="store_true", help="print the resolved grid and exit")
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("gradcheck", parents=[_common()], help="finite-difference check of the backward kernels")
    g.add_argument("--cases", type=_positive_int, default=12)
    g.add_argument("--h", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=1e-6)
    g.add_argument("--model-tol", type=float, default=1e-5)
    g.add_argument("--skip-model", action="store_true", help="skip the toy-model gradcheck")
    g.add_argument("--inject-bug", action="store_true", help="perturb dQ to confirm failures are caught")
    g.add_argument("--out", default=None)
    g.set_defaults(func=cmd_gradcheck)

    pr = sub.add_parser("probe", parents=[_common()], help="weight-Jacobian spectral norms versus score scale")
    pr.add_argument("--mechanism", choices=("sigmoid", "softmax", "both"), default="both")
    pr.add_argument("--scales", type=_csv_list(float), default=(1.0, 10.0, 100.0))
    pr.add_argument("--rows", type=_positive_int, default=1000, help="random score rows")
    pr.add_argument("--n", type=_positive_int, default=8, help="keys per row")
    pr.add_argument("--composed", action="store_true", help="also probe a full single-head attention map")
    pr.add_argument("--out", default=None)
    pr.set_defaults(func=cmd_probe)

    # seed defaults to None so a --config file's train seed survives
    s = sub.add_parser("stability", parents=[_common(None)], help="train the toy encoder and log stability statistics")
    s.add_argument("--mechanism", choices=("sigmoid", "softmax"), default=None)
    s.add_argument("--paired", action="store_true", help="run softmax and sigmoid on identical data")
    s.add_argument("--config", default=None, help='JSON with "encoder" and "train" objects; flags win')
    s.add_argument("--steps", type=_positive_int, default=None)
    s.add_argument("--lr", type=float, default=None)
    s.add_argument("--batch", type=_positive_int, default=None)
    s.add_argument("--mask-prob", type=float, default=None)
    s.add_argument("--warmup-steps", type=int, default=None)
    s.add_argument("--weight-decay", type=float, default=None)
    clip = s.add_mutually_exclusive_group()
    clip.add_argument("--clip", type=_clip_flag, default=None, help="global-norm clip threshold")
    clip.add_argument("--no-clip", dest="clip", action="store_const", const="off")
    s.add_argument("--layers", type=_positive_int, default=None)
    s.add_argument("--d-model", type=_positive_int, default=None)
    s.add_argument("--heads", type=_positive_int, default=None)
    s.add_argument("--vocab", type=_positive_int, default=None)
    s.add_argument("--max-len", type=_positive_int, default=None)
    s.add_argument("--block", type=_positive_int, default=None, help="kernel tile size")
    s.add_argument("--out", default=None, help="output directory for the logs")
    s.set_defaults(func=cmd_stability)

    m = sub.add_parser("mmd", parents=[_common()], help="pairwise bootstrap MMD between labelled embedding sets")
    src = m.add_mutually_exclusive_group()
    src.add_argument("--input", default=None, help="CSV with a label column and numeric features")
    src.add_argument("--synthetic", type=_positive_int, default=8, help="labels in a synthetic Gaussian mixture")
    m.add_argument("--label-column", default="label")
    m.add_argument("--points-per-label", type=_positive_int, default=40)
    m.add_argument("--dim", type=_positive_int, default=16)
    m.add_argument("--resamples", type=int, default=1000)
    m.add_argument("--ci", type=float, default=0.95)
    m.add_argument("--estimator", choices=("biased", "unbiased"), default="biased")
    m.add_argument("--out", default=None)
    m.set_defaults(func=cmd_mmd)

    j = sub.add_parser("jaggedness", parents=[_common()], help="length histogram and coverage at thresholds")
    j.add_argument("--lengths-file", default=None, help="whitespace or comma separated integers")
    ld = LengthDistributionSpec()
    j.add_argument("--family", choices=("lognormal", "uniform", "fixed"), default=ld.family)
    j.add_argument("--loc", type=float, default=ld.loc)
    j.add_argument("--scale", type=float, default=ld.scale)
    j.add_argument("--min-len", type=int, default=ld.min_len)
    j.add_argument("--max-len", type=int, default=ld.max_len)
    j.add_argument("--count", type=int, default=10000)
    j.add_argument("--thresholds", type=_csv_list(int), default=DEFAULT_THRESHOLDS)
    j.add_argument("--bins", type=_positive_int, default=32)
    j.add_argument("--out", default=None, help="output directory")
    j.set_defaults(func=cmd_jaggedness)
    return p


def _validate(args) -> None:
    if args.command == "bench":
        bad = set(args.impls) - {"blocked", "blocked_noskip", "dense"}
        if bad:
            raise UsageError(f"unknown impls {sorted(bad)}")
    if args.command == "mmd":
        if args.resamples < 2:
            raise UsageError("--resamples must be >= 2")
        if not 0 < args.ci < 1:
            raise UsageError("--ci must lie in (0, 1)")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    try:
        _validate(args)
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"sigattn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
