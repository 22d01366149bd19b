"""Train the RPN and the mask net on the desk synthetic set and plot both loss traces.

    python3 scripts/loss_curves.py --out runs/loss_curves [--iterations 2000]
"""
import argparse
import csv
import time
from pathlib import Path

from anchormask.experiments import desk_config, drop_ratio, train_both, train_set


def write_trace(path, losses, every):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        w.writerows((i, f"{v:.6f}") for i, v in enumerate(losses) if i % every == 0)


def plot(out, rpn, mask, every):
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib not installed; skipping the figure")
        return
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    for ax, losses, title in zip(axes, (rpn, mask), ("RPN loss", "mask-net loss")):
        xs = range(0, len(losses), every)
        ax.plot(list(xs), [losses[i] for i in xs], lw=0.8)
        ax.set_title(title)
        ax.set_xlabel("iteration")
    fig.tight_layout()
    fig.savefig(out / "loss_curves.png", dpi=120)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/loss_curves"))
    ap.add_argument("--iterations", type=int)
    args = ap.parse_args()
    cfg = desk_config()
    if args.iterations:
        cfg.train_rpn.iterations = cfg.train_mask.iterations = args.iterations
    args.out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    trained = train_both(train_set(), cfg)
    every = cfg.train_rpn.record_every
    write_trace(args.out / "rpn_loss.csv", trained.rpn_losses, every)
    write_trace(args.out / "mask_loss.csv", trained.mask_losses, every)
    trained.nets.save(args.out / "nets.ckpt")
    plot(args.out, trained.rpn_losses, trained.mask_losses, every)
    print(f"trained in {time.time() - t0:.0f}s")
    print(f"rpn  trailing-100 / leading-10 = {drop_ratio(trained.rpn_losses):.3f}")
    print(f"mask trailing-100 / leading-10 = {drop_ratio(trained.mask_losses):.3f}")


if __name__ == "__main__":
    main()
