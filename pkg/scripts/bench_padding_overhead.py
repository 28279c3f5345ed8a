"""Measure how much throughput trailing padding costs the blocked kernel.

Times the forward pass at 0% and 25% padding for one sequence length, then
reports the relative TFLOPS drop computed on valid tokens only.  Also prints
the same arithmetic on a pair of reference throughputs for comparison.

    python3 scripts/bench_padding_overhead.py --seq-len 1024 --head-dim 64
"""

import argparse

from sigattn.bench import BenchConfig, blocked_impl, make_bench_batch, measure, padding_overhead
from sigattn.kernel import TileConfig


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seq-len", type=int, default=1024)
    p.add_argument("--head-dim", type=int, default=64)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--token-budget", type=int, default=4096)
    p.add_argument("--padding", type=float, default=0.25)
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--block", type=int, default=64)
    args = p.parse_args()

    cfg = BenchConfig(seq_lengths=(args.seq_len,), token_budget=args.token_budget, head_dims=(args.head_dim,),
                      hidden_dim=args.head_dim * args.heads, padding_fractions=(0.0, args.padding),
                      iterations=args.iterations, warmup_ms=50)
    tiles = TileConfig(args.block, args.block)
    recs = []
    for pad in cfg.padding_fractions:
        batch, _ = make_bench_batch(cfg.batch_size(args.seq_len), args.seq_len, args.heads, args.head_dim, pad)
        rec = measure(blocked_impl("forward"), batch, tiles, "forward", cfg, padding=pad)
        recs.append(rec)
        print(f"padding {pad:.2f}: {rec.mean_s * 1e3:8.2f} ms +- {rec.ci_s * 1e3:.2f}  {rec.tflops * 1e3:.4f} GFLOPS")
    print(f"measured overhead: {padding_overhead(recs[0].tflops, recs[1].tflops):.4f}")
    print(f"reference arithmetic 438.4 -> 397.5 TFLOPS: {padding_overhead(438.4, 397.5):.4f}")


if __name__ == "__main__":
    main()
