"""Compare the compiled and pure-Python SGD kernels on one synthetic world.

    python3 benchmarks/bench_kernels.py --users 200 --items 600 --epochs 2

Both backends run the same seeded training; the script reports seconds per
epoch, the speedup, and the largest embedding difference between them.
"""

import argparse
import time

import numpy as np

from crsdebias.dataset import compute_popularity_and_tiers, generate_synthetic, split_interactions
from crsdebias.kernels import compiled_available
from crsdebias.recommender import PalConfig, train


def bench(catalog, split, cfg, mode, backend, repeat):
    best, model = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        model = train(catalog, split, cfg, mode, backend=backend)
        best = min(best, time.perf_counter() - t0)
    return best / cfg.epochs, model


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--users", type=int, default=200)
    ap.add_argument("--items", type=int, default=600)
    ap.add_argument("--attrs", type=int, default=25)
    ap.add_argument("--per-user", type=int, default=20)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--epochs", type=int, default=2)
    ap.add_argument("--mode", choices=("bpr", "pal"), default="pal")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    if not compiled_available():
        raise SystemExit("compiled kernel not built; run `pip install -e . --no-build-isolation` first")
    cat = generate_synthetic(args.users, args.items, args.attrs, 2, args.per_user, 1.0, seed=0)
    split = split_interactions(cat, seed=0)
    cat = compute_popularity_and_tiers(cat, split)
    cfg = PalConfig(dim=args.dim, epochs=args.epochs, learning_rate=0.05, seed=0)
    print(f"{len(split.train)} training pairs, dim {args.dim}, {args.epochs} epoch(s), mode {args.mode}")

    t_py, m_py = bench(cat, split, cfg, args.mode, "python", 1)
    t_cy, m_cy = bench(cat, split, cfg, args.mode, "cython", args.repeat)
    diff = max(float(np.max(np.abs(getattr(m_py, t) - getattr(m_cy, t)))) for t in ("user_emb", "item_emb", "attr_emb"))
    print(f"python  {t_py:8.3f} s/epoch")
    print(f"cython  {t_cy:8.3f} s/epoch")
    print(f"speedup {t_py / t_cy:8.1f}x")
    print(f"max |difference| between backends: {diff:.2e}")


if __name__ == "__main__":
    main()
