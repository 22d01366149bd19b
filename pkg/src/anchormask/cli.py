"""Command-line entry point: ``anchormask <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, set_dotted
from .data import DataError, SuiteSpec, SynthSpec, generate_synthetic, load_vot_sequence, save_sequence, synthetic_suite, write_overlay
from .heatmap import write_pgm
from .pipeline import (DEFAULT_VARIANTS, Nets, NumericError, Report, Variant, evaluate, load_features, run_sequence,
                       sequence_features, train_masknet, train_rpn)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="anchormask", description="Anchor-mask RPN for single-target video detection.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True, ckpt=False):
        sp.add_argument("--out", required=True, type=Path, help="output directory (created)")
        sp.add_argument("--config", type=Path, help="JSON file of dotted keys, e.g. {\"anchors.stride\": 16}")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int, help="seed for initialisation, sampling and synthesis")
        if data:
            sp.add_argument("--data", required=True, type=Path, help="directory of VOT-layout sequences")
            sp.add_argument("--sequences", help="comma-separated subset of sequence names")
        if ckpt:
            sp.add_argument("--checkpoint", required=True, type=Path)

    s = sub.add_parser("synth", help="write synthetic sequences in VOT layout")
    common(s, data=False)
    s.add_argument("--count", type=int, default=20)
    s.add_argument("--frames", type=int, default=20)
    s.add_argument("--distractors", type=int, default=1)
    s.add_argument("--spec", type=Path, help="JSON SynthSpec for a single sequence")

    for name in ("train-rpn", "train-mask"):
        t = sub.add_parser(name, help=f"train the {'RPN' if name == 'train-rpn' else 'mask net'}")
        common(t)
        t.add_argument("--checkpoint", type=Path, help="start from these weights")
        t.add_argument("--iterations", type=int)
        t.add_argument("--lr", type=float)

    for name in ("run", "eval", "export-overlays"):
        r = sub.add_parser(name)
        common(r, ckpt=True)
        r.add_argument("--mask", type=_on_off, help="on|off")
        r.add_argument("--fusion", type=_on_off, help="on|off")
        r.add_argument("--force-ones-mask", action="store_true", help="replace every predicted mask by all ones")
        r.add_argument("--features", type=Path, help="directory of <sequence>.npy precomputed (T,C,14,14) features")
    return p


# --------------------------------------------------------------------------


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        try:
            set_dotted(cfg, key, value)
        except (KeyError, ValueError) as exc:
            raise UsageError(str(exc)) from None
    if args.seed is not None:
        cfg.seed = cfg.train_rpn.seed = cfg.train_mask.seed = args.seed
    for attr, key in (("iterations", "iterations"), ("lr", "lr")):
        value = getattr(args, attr, None)
        if value is not None:
            target = cfg.train_rpn if args.command == "train-rpn" else cfg.train_mask
            setattr(target, key, value)
    if getattr(args, "mask", None) is not None:
        cfg.mask.enabled = args.mask
    if getattr(args, "fusion", None) is not None:
        cfg.mask.fusion = args.fusion
    try:
        return cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def load_sequences(args) -> list:
    root = args.data
    if not root.is_dir():
        raise DataError(f"data directory not found: {root}")
    if (root / "groundtruth.txt").exists():
        dirs = [root]
    else:
        dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if args.sequences:
        wanted = args.sequences.split(",")
        missing = [w for w in wanted if not (root / w).is_dir()]
        if missing:
            raise DataError(f"unknown sequences {missing} in {root}")
        dirs = [root / w for w in wanted]
    if not dirs:
        raise DataError(f"no sequences in {root}")
    return [load_vot_sequence(d) for d in dirs]


def write_manifest(out: Path, args, cfg: RunConfig, extra: dict | None = None) -> None:
    artifacts = {}
    for f in sorted(out.rglob("*")):
        if f.is_file() and f.name != "manifest.json":
            artifacts[str(f.relative_to(out))] = hashlib.sha256(f.read_bytes()).hexdigest()
    manifest = {
        "command": args.command,
        "argv": args.argv,
        "config": cfg.to_flat(),
        "seeds": {"init": cfg.seed, "train_rpn": cfg.train_rpn.seed, "train_mask": cfg.train_mask.seed},
        "artifacts": artifacts,
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _progress(it: int, loss: float) -> None:
    print(f"{it},{loss:.6f}", flush=True)


def cmd_synth(args, cfg):
    out = args.out
    if args.spec:
        spec = SynthSpec.from_json(args.spec.read_text())
        if args.seed is not None:
            spec.seed = args.seed
        seqs = [generate_synthetic(spec)]
    else:
        suite = SuiteSpec(n_frames=args.frames, distractors=args.distractors)
        seqs = synthetic_suite(cfg.seed, args.count, suite)
    for seq in seqs:
        save_sequence(seq, out / seq.name)
    return {"sequences": [s.name for s in seqs]}


def _load_nets(cfg, path) -> Nets:
    nets = Nets.build(cfg)
    if path is not None:
        if not Path(path).exists():
            raise DataError(f"checkpoint not found: {path}")
        nets.load(path)
    return nets


def cmd_train(args, cfg):
    seqs = load_sequences(args)
    nets = _load_nets(cfg, args.checkpoint)
    print("iter,loss", flush=True)
    if args.command == "train-rpn":
        nets, res = train_rpn(seqs, cfg, nets, _progress)
        res.write_trace(args.out / "rpn_loss.csv")
    else:
        nets, res = train_masknet(seqs, cfg, nets, _progress)
        res.write_trace(args.out / "mask_loss.csv")
    nets.save(args.out / "nets.ckpt")
    return {"sequences": [s.name for s in seqs]}


def _features(args, seqs, nets) -> dict:
    if args.features is None:
        return {}
    out = {}
    for seq in seqs:
        path = args.features / f"{seq.name}.npy"
        if path.exists():
            try:
                out[seq.name] = load_features(path, seq, nets)
            except ValueError as exc:
                raise DataError(str(exc)) from None
    return out


def _selected_variant(args, cfg) -> Variant:
    return Variant("single", cfg.mask.enabled, cfg.mask.fusion, args.force_ones_mask)


def cmd_run(args, cfg):
    seqs = load_sequences(args)
    nets = _load_nets(cfg, args.checkpoint)
    variant = _selected_variant(args, cfg)
    feats = _features(args, seqs, nets)
    report = Report(sequences=[s.name for s in seqs])
    for seq in seqs:
        seq_dir = args.out / seq.name
        seq_dir.mkdir(parents=True, exist_ok=True)
        for res in run_sequence(seq, nets, cfg, variant, feats.get(seq.name)):
            det = res.detection
            report.rows.append({"sequence": seq.name, "frame": res.frame, "variant": variant.name, "iou": res.iou_vs_gt,
                                "score": det.score if det else 0.0, "box": tuple(det.box) if det else None})
            write_pgm(seq_dir / f"heatmap_{res.frame:05d}.pgm", res.heatmap)
            if res.mask is not None:
                write_pgm(seq_dir / f"mask_{res.frame:05d}.pgm", res.mask)
    report.write_csv(args.out / "metrics.csv")
    report.write_json(args.out / "summary.json")
    return {"sequences": report.sequences}


def cmd_eval(args, cfg):
    seqs = load_sequences(args)
    nets = _load_nets(cfg, args.checkpoint)
    explicit = args.mask is not None or args.fusion is not None or args.force_ones_mask
    variants = (_selected_variant(args, cfg),) if explicit else DEFAULT_VARIANTS
    report = evaluate(seqs, nets, cfg, variants, _features(args, seqs, nets))
    report.write_csv(args.out / "metrics.csv")
    report.write_json(args.out / "summary.json")
    for v in report.variant_names():
        print(f"{v},{report.mean_iou(v):.6f}")
    return {"sequences": report.sequences}


def cmd_export(args, cfg):
    seqs = load_sequences(args)
    nets = _load_nets(cfg, args.checkpoint)
    masked = Variant("masked", True, cfg.mask.fusion, args.force_ones_mask)
    plain = Variant("plain", False)
    for seq in seqs:
        feats = _features(args, [seq], nets).get(seq.name)
        if feats is None:
            feats = sequence_features(seq, nets)
        runs = {v.name: {r.frame: r for r in run_sequence(seq, nets, cfg, v, feats)} for v in (masked, plain)}
        seq_dir = args.out / seq.name
        seq_dir.mkdir(parents=True, exist_ok=True)
        for t, res in runs["masked"].items():
            boxes = [("gt", seq.box(t))]
            for role in ("masked", "plain"):
                det = runs[role][t].detection
                if det is not None:
                    boxes.append((role, det.box))
            write_overlay(seq.frames[t], boxes, seq_dir / f"overlay_{t:05d}.ppm")
            write_pgm(seq_dir / f"heatmap_{t:05d}.pgm", res.heatmap)
    return {"sequences": [s.name for s in seqs]}


COMMANDS = {"synth": cmd_synth, "train-rpn": cmd_train, "train-mask": cmd_train, "run": cmd_run,
            "eval": cmd_eval, "export-overlays": cmd_export}


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        args.argv = argv
        cfg = resolve_config(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        extra = COMMANDS[args.command](args, cfg)
        write_manifest(args.out, args, cfg, extra)
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, KeyError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def main() -> None:
    np.seterr(over="ignore", under="ignore")
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
