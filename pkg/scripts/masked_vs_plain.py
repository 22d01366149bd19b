"""Compare plain, masked and masked+fusion RPN on held-out synthetic sequences with a distractor.

    python3 scripts/masked_vs_plain.py --checkpoint runs/loss_curves/nets.ckpt --out runs/compare
"""
import argparse
from pathlib import Path

from anchormask.experiments import desk_config, heldout_set, masked_vs_plain, train_both, train_set
from anchormask.pipeline import Nets


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint", type=Path, help="trained nets; trains from scratch when omitted")
    ap.add_argument("--out", type=Path, default=Path("runs/compare"))
    ap.add_argument("--count", type=int, default=50)
    args = ap.parse_args()
    cfg = desk_config()
    if args.checkpoint:
        nets = Nets.build(cfg).load(args.checkpoint)
    else:
        nets = train_both(train_set(), cfg).nets
    report = masked_vs_plain(heldout_set(args.count), nets, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    report.write_csv(args.out / "metrics.csv")
    report.write_json(args.out / "summary.json")
    for v in report.variant_names():
        print(f"{v:>14}  mean IoU {report.mean_iou(v):.4f}")
    print(f"masked - plain = {report.mean_iou('masked') - report.mean_iou('plain'):+.4f}")
    wins = sum(d["masked"] > d["plain"] for d in report.per_sequence().values())
    print(f"masked better on {wins}/{len(report.sequences)} sequences")


if __name__ == "__main__":
    main()
