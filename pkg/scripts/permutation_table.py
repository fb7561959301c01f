"""Train V1, V2 and V3 at desk scale and tabulate metric changes under filter permutations.

V3 should show deltas at rounding level; V1 and V2 tie each map to a filter
position, so reordering the dictionary changes their reconstructions.

    python3 scripts/permutation_table.py --epochs 4
"""

import argparse
import time

import numpy as np

from cdl_lambda.data import PHANTOMS, make_dataset, phantom
from cdl_lambda.dict_pretrain import DictionaryBank, dict_key, pretrain_dictionary
from cdl_lambda.fista import FistaConfig
from cdl_lambda.lambda_net import LambdaEstimator
from cdl_lambda.pipeline import ReconConfig, TrainConfig, permute_test, train


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--K", type=int, default=8)
    p.add_argument("--train", type=int, default=10)
    p.add_argument("--test", type=int, default=4)
    p.add_argument("--epochs", type=int, default=4)
    p.add_argument("--perms", type=int, default=3)
    p.add_argument("--sigma2", type=float, default=0.01)
    p.add_argument("--keep-frac", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    corpus = [phantom(PHANTOMS[i % 3], args.size, args.size, seed=100 + i) for i in range(8)]
    key = dict_key(args.K, 5, 0.1, 0.25)
    bank = DictionaryBank()
    bank.add(key, pretrain_dictionary(corpus, args.K, 5, 0.1, 0.25, epochs=8, seed=args.seed))
    data = dict(size=args.size, sigma_sq=args.sigma2, keep_frac=args.keep_frac)
    train_set = make_dataset(args.train, seed=args.seed + 50, **data)
    test_set = make_dataset(args.test, seed=args.seed + 900, **data)

    print(f"{'variant':<8} {'perm':>4} {'dMSE mean':>12} {'dMSE std':>10} {'dSSIM mean':>12} {'dSSIM std':>10}")
    for variant in ("v1", "v2", "v3"):
        t0 = time.perf_counter()
        est = LambdaEstimator.create(variant, K=args.K, widths=(8, 16), seed=args.seed)
        recon = ReconConfig(est, fista=FistaConfig(T=20, T_grad=8))
        train(train_set, bank, recon, TrainConfig(epochs=args.epochs, seed=args.seed))
        res = permute_test(test_set, bank[key], recon, n_perms=args.perms, seed=args.seed)
        for j, q in enumerate(res["perms"]):
            print(
                f"{variant:<8} {j + 1:>4} {np.mean(q['d_mse']):>12.3e} {np.std(q['d_mse']):>10.3e} "
                f"{np.mean(q['d_ssim']):>12.3e} {np.std(q['d_ssim']):>10.3e}"
            )
        print(f"# {variant}: {time.perf_counter() - t0:.1f}s, t = {est.t.item():.4g}")


if __name__ == "__main__":
    main()
