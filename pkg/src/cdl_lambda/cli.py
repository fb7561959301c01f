"""``cdl-lambda`` command-line interface.

Data directories hold ``truth_NNNN.cimg`` / ``kspace_NNNN.cimg`` pairs plus a
``dataset.json`` index with the mask geometry. Every command writes a
``<command>.manifest.json`` next to its outputs.

Exit codes: 0 success, 2 usage, 3 I/O, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .data import PHANTOMS, NoiseModel, Sample, phantom, simulate
from .dict_pretrain import DictionaryBank, PretrainGrid, bank_build
from .fista import DivergenceError, FistaConfig
from .highpass import HighpassConfig
from .io import FormatError, read_checkpoint, read_cimg, write_checkpoint, write_cimg, write_pgm
from .lambda_net import T_INIT, VARIANTS, LambdaEstimator
from .linops import LowResMask
from .pipeline import (
    ReconConfig,
    TrainConfig,
    TrainingError,
    evaluate,
    permute_test,
    reconstruct,
    train,
    write_loss_trace,
    write_metrics_csv,
)
from .rng import stream

log = logging.getLogger("cdl_lambda")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
_NUMERIC = (DivergenceError, TrainingError, FloatingPointError)


class UsageError(Exception):
    pass


# -- helpers -----------------------------------------------------------------------


def _widths(text: str) -> tuple[int, ...]:
    try:
        out = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"widths must be comma-separated integers, got {text!r}") from None
    if not out or any(v < 1 for v in out):
        raise argparse.ArgumentTypeError("widths must be positive")
    return out


def parse_grid(text: str) -> PretrainGrid:
    """``"K=4,8 kf=5,7 lambda=0.1,0.5 beta=0.1,0.25"`` (any order, all four required)."""
    if text.strip().lower() == "full":
        return PretrainGrid.full()
    if text.strip().lower() == "desk":
        return PretrainGrid.desk()
    fields = {}
    for part in text.replace(";", " ").split():
        if "=" not in part:
            raise UsageError(f"grid item {part!r} is not name=v1,v2,...")
        name, vals = part.split("=", 1)
        fields[name.strip().lower()] = vals
    need = {"k", "kf", "lambda", "beta"}
    if set(fields) != need:
        raise UsageError(f"grid needs exactly the fields K, kf, lambda, beta; got {sorted(fields)}")
    try:
        return PretrainGrid(
            betas=tuple(float(v) for v in fields["beta"].split(",")),
            lambdas=tuple(float(v) for v in fields["lambda"].split(",")),
            kernel_sizes=tuple(int(v) for v in fields["kf"].split(",")),
            filter_counts=tuple(int(v) for v in fields["k"].split(",")),
        )
    except ValueError as exc:
        raise UsageError(f"bad grid {text!r}: {exc}") from None


def load_dataset(directory) -> list[Sample]:
    directory = Path(directory)
    index = json.loads((directory / "dataset.json").read_text())
    mask = LowResMask(index["height"], index["width"], index["keep_h"], index["keep_w"])
    out = []
    for entry in index["samples"]:
        y = read_cimg(directory / entry["kspace"])
        x = read_cimg(directory / entry["truth"])
        if y.shape != mask.shape or x.shape != mask.shape:
            raise FormatError(f"{entry['name']}: shape disagrees with dataset.json")
        out.append(Sample(y, x, mask, name=entry["name"], meta=entry.get("meta", {})))
    return out


def load_corpus(directory) -> list[np.ndarray]:
    directory = Path(directory)
    files = sorted(directory.glob("truth_*.cimg")) or sorted(directory.glob("*.cimg"))
    if not files:
        raise FileNotFoundError(f"no .cimg images in {directory}")
    return [read_cimg(f) for f in files]


def _write_manifest(path: Path, command: str, args: argparse.Namespace, inputs, outputs, started: float, **extra) -> None:
    config = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "command": command,
        "config": json.loads(json.dumps(config, default=str)),
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "wall_clock_s": round(time.time() - started, 3),
        **extra,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _recon_config(est: LambdaEstimator, extra: dict, args) -> ReconConfig:
    T = args.T if args.T is not None else extra.get("T", FistaConfig.T)
    T_grad = min(extra.get("T_grad", FistaConfig.T_grad), T)
    beta = args.beta if args.beta is not None else extra.get("beta", HighpassConfig.beta)
    return ReconConfig(est, HighpassConfig(beta), FistaConfig(T=T, T_grad=T_grad), beta_from_dictionary=args.beta is None)


# -- commands ----------------------------------------------------------------------


def cmd_simulate(args) -> int:
    started = time.time()
    if args.size % 2:
        raise UsageError("--size must be even")
    if not 0 < args.keep_frac <= 1:
        raise UsageError("--keep-frac must be in (0, 1]")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    kinds = PHANTOMS if args.phantom == "mixed" else (args.phantom,)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mask = LowResMask.from_fraction(args.size, args.size, args.keep_frac)
    samples, written = [], []
    for i in range(args.count):
        kind = kinds[i % len(kinds)]
        pseed = int(stream(args.seed, "simulate", str(i)).integers(2**31))
        x = phantom(kind, args.size, args.size, seed=pseed)
        y = simulate(x, mask, NoiseModel(args.sigma2, seed=pseed))
        name = f"{i:04d}"
        write_cimg(out / f"truth_{name}.cimg", x)
        write_cimg(out / f"kspace_{name}.cimg", y)
        written += [out / f"truth_{name}.cimg", out / f"kspace_{name}.cimg"]
        samples.append(
            {"name": f"{kind}_{name}", "truth": f"truth_{name}.cimg", "kspace": f"kspace_{name}.cimg",
             "meta": {"kind": kind, "seed": pseed}}
        )
    index = {
        "height": args.size, "width": args.size, "keep_h": mask.keep_h, "keep_w": mask.keep_w,
        "sigma2": args.sigma2, "samples": samples,
    }
    (out / "dataset.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    written.append(out / "dataset.json")
    _write_manifest(out / "simulate.manifest.json", "simulate", args, [], written, started)
    print(f"wrote {args.count} sample(s) of {args.size}x{args.size} to {out}")
    return EXIT_OK


def cmd_pretrain_dict(args) -> int:
    started = time.time()
    grid = parse_grid(args.grid)
    corpus = load_corpus(args.corpus_dir)
    bank = bank_build(grid, corpus, epochs=args.epochs, seed=args.seed, coding_iters=args.coding_iters)
    manifest = bank.save(args.out_bank)
    out = Path(args.out_bank)
    _write_manifest(
        out / "pretrain-dict.manifest.json", "pretrain-dict", args, [args.corpus_dir],
        [manifest] + [out / f"{k}.cdld" for k in bank.keys()], started, n_entries=len(bank),
    )
    print(f"built {len(bank)} dictionaries from {len(corpus)} images into {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    dataset = load_dataset(args.data_dir)
    bank = DictionaryBank.load(args.bank)
    keys = args.dicts.split(",") if args.dicts else bank.keys()
    missing = [k for k in keys if k not in bank.entries]
    if missing:
        raise UsageError(f"keys not in bank: {missing}")
    Ks = {bank[k].K for k in keys}
    K = None
    if args.variant in ("v1", "v2"):
        if len(Ks) != 1:
            raise UsageError(f"{args.variant} needs dictionaries with one filter count; got K in {sorted(Ks)}")
        K = Ks.pop()
    est = LambdaEstimator.create(args.variant, K=K, widths=args.widths, seed=args.seed, t_init=args.t_init)
    try:
        fcfg = FistaConfig(T=args.T, T_grad=args.Tgrad)
        tc = TrainConfig(
            epochs=args.epochs, batch_size=args.batch_size, lr_net=args.lr_net,
            lr_scalars=args.lr_scalars, seed=args.seed, bank_subset=keys,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    recon = ReconConfig(est, HighpassConfig(args.beta), fcfg)
    est, trace = train(dataset, bank, recon, tc)
    ckpt = Path(args.out_ckpt)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    write_checkpoint(ckpt, est, extra={"T": args.T, "T_grad": args.Tgrad, "beta": args.beta, "keys": keys})
    trace_path = ckpt.with_name(ckpt.name + ".loss.csv")
    write_loss_trace(trace, trace_path)
    _write_manifest(
        ckpt.with_name(ckpt.name + ".manifest.json"), "train", args, [args.data_dir, args.bank],
        [ckpt, trace_path], started, final_t=est.t.item(),
    )
    if trace:
        print(f"{args.variant}: mean loss {trace[0]:.6g} -> {trace[-1]:.6g} over {len(trace)} epochs")
    else:
        print(f"{args.variant}: 0 epochs, wrote untrained checkpoint")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    started = time.time()
    est, extra = read_checkpoint(args.ckpt, with_extra=True)
    bank = DictionaryBank.load(args.bank)
    if args.dict_key not in bank.entries:
        raise UsageError(f"{args.dict_key} not in bank")
    D = bank[args.dict_key]
    recon = _recon_config(est, extra, args)
    dataset = load_dataset(args.data_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for s in dataset:
        x = reconstruct(s.y, s.mask, D, recon)
        write_cimg(out / f"recon_{s.name}.cimg", x)
        write_pgm(out / f"recon_{s.name}.pgm", x)
        written += [out / f"recon_{s.name}.cimg", out / f"recon_{s.name}.pgm"]
    _write_manifest(out / "reconstruct.manifest.json", "reconstruct", args, [args.ckpt, args.bank, args.data_dir], written, started)
    print(f"reconstructed {len(dataset)} image(s) with {args.dict_key} into {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    started = time.time()
    est, extra = read_checkpoint(args.ckpt, with_extra=True)
    bank = DictionaryBank.load(args.bank)
    keys = args.dicts.split(",") if args.dicts else bank.keys()
    missing = [k for k in keys if k not in bank.entries]
    if missing:
        raise UsageError(f"keys not in bank: {missing}")
    if est.K is not None:
        skipped = [k for k in keys if bank[k].K != est.K]
        keys = [k for k in keys if bank[k].K == est.K]
        if skipped:
            print(f"{est.variant} is fixed to K={est.K}; skipping {len(skipped)} dictionaries")
    recon = _recon_config(est, extra, args)
    dataset = load_dataset(args.data_dir)

    def one(item):
        key, i = item
        return evaluate([dataset[i]], bank[key], recon, dict_key=key)[0]

    jobs = [(k, i) for k in keys for i in range(len(dataset))]
    if args.workers > 1:
        with ThreadPoolExecutor(args.workers) as pool:
            rows = list(pool.map(one, jobs))
    else:
        rows = [one(j) for j in jobs]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(rows, out)
    print(f"{'dictionary':<28} {'mean MSE':>12} {'mean SSIM':>10}")
    for k in keys:
        sel = [r for r in rows if r["dict_key"] == k]
        print(f"{k:<28} {np.mean([r['mse'] for r in sel]):>12.6g} {np.mean([r['ssim'] for r in sel]):>10.4f}")
    _write_manifest(out.with_name(out.name + ".manifest.json"), "evaluate", args, [args.ckpt, args.bank, args.data_dir], [out], started)
    return EXIT_OK


def cmd_permute_test(args) -> int:
    started = time.time()
    bank = DictionaryBank.load(args.bank)
    if args.dict_key not in bank.entries:
        raise UsageError(f"{args.dict_key} not in bank")
    D = bank[args.dict_key]
    dataset = load_dataset(args.data_dir)
    results = {}
    print(f"{'variant':<8} {'perm':>4} {'dMSE mean':>12} {'dMSE std':>10} {'dSSIM mean':>12} {'dSSIM std':>10}")
    for path in args.ckpt:
        est, extra = read_checkpoint(path, with_extra=True)
        recon = _recon_config(est, extra, args)
        res = permute_test(dataset, D, recon, n_perms=args.n_perms, seed=args.seed)
        label = est.variant if est.variant not in results else f"{est.variant}:{path}"
        results[label] = res
        for j, p in enumerate(res["perms"]):
            print(
                f"{label:<8} {j + 1:>4} {np.mean(p['d_mse']):>12.3e} {np.std(p['d_mse']):>10.3e} "
                f"{np.mean(p['d_ssim']):>12.3e} {np.std(p['d_ssim']):>10.3e}"
            )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(results, indent=2) + "\n")
    _write_manifest(out.with_name(out.name + ".manifest.json"), "permute-test", args, [*args.ckpt, args.bank, args.data_dir], [out], started)
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdl-lambda", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate low-resolution noisy k-space from phantoms")
    s.add_argument("--phantom", choices=PHANTOMS + ("mixed",), default="mixed")
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--sigma2", type=float, default=0.2)
    s.add_argument("--keep-frac", type=float, default=0.5)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("pretrain-dict", help="pretrain a bank of convolutional dictionaries")
    s.add_argument("--corpus-dir", required=True)
    s.add_argument("--grid", default="desk", help='"K=4,8 kf=5,7 lambda=0.1,0.5 beta=0.1,0.25", "desk" or "full"')
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--coding-iters", type=int, default=30)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-bank", required=True)
    s.set_defaults(func=cmd_pretrain_dict)

    s = sub.add_parser("train", help="train a sparsity-map estimator end to end")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--bank", required=True)
    s.add_argument("--variant", choices=VARIANTS, default="v3")
    s.add_argument("--dicts", default=None, help="comma-separated bank keys (default: all)")
    s.add_argument("--T", type=int, default=20)
    s.add_argument("--Tgrad", type=int, default=8)
    s.add_argument("--epochs", type=int, default=48)
    s.add_argument("--batch-size", type=int, default=1)
    s.add_argument("--lr-net", type=float, default=1e-4)
    s.add_argument("--lr-scalars", type=float, default=1e-2)
    s.add_argument("--widths", type=_widths, default=(16, 32, 64))
    s.add_argument("--t-init", type=float, default=T_INIT)
    s.add_argument("--beta", type=float, default=HighpassConfig.beta, help="fallback when a dictionary has no beta")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-ckpt", required=True)
    s.set_defaults(func=cmd_train)

    def recon_flags(s):
        s.add_argument("--ckpt", required=True)
        s.add_argument("--bank", required=True)
        s.add_argument("--data-dir", required=True)
        s.add_argument("--T", type=int, default=None, help="default: the value used in training")
        s.add_argument("--beta", type=float, default=None, help="override the dictionary's beta")

    s = sub.add_parser("reconstruct", help="reconstruct a data directory with one dictionary")
    recon_flags(s)
    s.add_argument("--dict-key", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("evaluate", help="per-dictionary MSE/SSIM/blur table over a bank")
    recon_flags(s)
    s.add_argument("--dicts", default=None)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", required=True, help="metrics CSV")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("permute-test", help="metric deltas under seeded filter permutations")
    s.add_argument("--ckpt", required=True, nargs="+")
    s.add_argument("--bank", required=True)
    s.add_argument("--data-dir", required=True)
    s.add_argument("--dict-key", required=True)
    s.add_argument("--n-perms", type=int, default=3)
    s.add_argument("--T", type=int, default=None)
    s.add_argument("--beta", type=float, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="results JSON")
    s.set_defaults(func=cmd_permute_test)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError, KeyError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except _NUMERIC as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except RuntimeError as exc:
        # bank_build wraps per-key failures
        if isinstance(exc.__cause__, _NUMERIC):
            print(f"numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        raise
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
