"""Build the 16-entry desk-scale dictionary bank from simulated phantoms.

    python3 scripts/build_desk_bank.py --out runs/desk_bank
"""

import argparse
import logging
import time

from cdl_lambda.data import PHANTOMS, phantom
from cdl_lambda.dict_pretrain import PretrainGrid, bank_build


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--out", default="runs/desk_bank")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--images", type=int, default=6)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", choices=["desk", "full"], default="desk")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    corpus = [phantom(PHANTOMS[i % len(PHANTOMS)], args.size, args.size, seed=args.seed + i) for i in range(args.images)]
    grid = PretrainGrid.desk() if args.grid == "desk" else PretrainGrid.full()
    t0 = time.perf_counter()
    bank = bank_build(grid, corpus, epochs=args.epochs, seed=args.seed)
    manifest = bank.save(args.out)
    print(f"{len(bank)} dictionaries in {time.perf_counter() - t0:.1f}s -> {manifest}")
    for key in bank.keys():
        tr = bank[key].trace
        print(f"  {key:<28} objective {tr[0]:.4g} -> {tr[-1]:.4g}" if tr else f"  {key}")


if __name__ == "__main__":
    main()
