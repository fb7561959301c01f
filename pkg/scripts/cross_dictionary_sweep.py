"""Train V3 on a subset of filter counts and evaluate it on every dictionary in a bank.

Prints mean MSE/SSIM per dictionary, marking the ones seen in training.

    python3 scripts/cross_dictionary_sweep.py --train-K 4,8 --eval-K 4,8,16
"""

import argparse

import numpy as np

from cdl_lambda.data import PHANTOMS, make_dataset, phantom
from cdl_lambda.dict_pretrain import PretrainGrid, bank_build, dict_key
from cdl_lambda.fista import FistaConfig
from cdl_lambda.lambda_net import LambdaEstimator
from cdl_lambda.pipeline import ReconConfig, TrainConfig, evaluate, train


def ints(text):
    return tuple(int(v) for v in text.split(","))


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--train-K", type=ints, default=(4, 8))
    p.add_argument("--eval-K", type=ints, default=(4, 8, 16))
    p.add_argument("--kf", type=int, default=5)
    p.add_argument("--train", type=int, default=12)
    p.add_argument("--test", type=int, default=20)
    p.add_argument("--epochs", type=int, default=4)
    p.add_argument("--sigma2", type=float, default=0.01)
    p.add_argument("--keep-frac", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    corpus = [phantom(PHANTOMS[i % 3], args.size, args.size, seed=100 + i) for i in range(8)]
    Ks = tuple(sorted(set(args.train_K) | set(args.eval_K)))
    bank = bank_build(PretrainGrid((0.25,), (0.1,), (args.kf,), Ks), corpus, epochs=8, seed=args.seed)
    seen = [dict_key(K, args.kf, 0.1, 0.25) for K in args.train_K]
    data = dict(size=args.size, sigma_sq=args.sigma2, keep_frac=args.keep_frac)

    est = LambdaEstimator.create("v3", widths=(8, 16), seed=args.seed)
    recon = ReconConfig(est, fista=FistaConfig(T=20, T_grad=8))
    train(make_dataset(args.train, seed=args.seed + 50, **data), bank, recon,
          TrainConfig(epochs=args.epochs, seed=args.seed, bank_subset=seen))
    test_set = make_dataset(args.test, seed=args.seed + 900, **data)

    print(f"{'dictionary':<28} {'seen':>5} {'mean MSE':>12} {'mean SSIM':>10}")
    for K in args.eval_K:
        key = dict_key(K, args.kf, 0.1, 0.25)
        rows = evaluate(test_set, bank[key], recon, dict_key=key)
        print(f"{key:<28} {'yes' if key in seen else 'no':>5} "
              f"{np.mean([r['mse'] for r in rows]):>12.6g} {np.mean([r['ssim'] for r in rows]):>10.4f}")


if __name__ == "__main__":
    main()
