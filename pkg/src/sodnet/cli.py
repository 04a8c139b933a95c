"""Command-line front end.

Exit codes: 0 ok, 1 usage or configuration error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import gradsuite
from . import tensor as T
from .checkpoint import apply_checkpoint, load_checkpoint
from .config import ConfigError, RunConfig, load_config, parse_config, set_key
from .dataio import DataError, Sample, gen_synthetic, list_stems, load_dataset, load_ppm, write_dataset
from .decoder import SODModel
from .encoder import InputShapeError
from .metrics import evaluate_dirs, write_curves_csv, write_report_csv
from .tensor import DimensionError, NumericalError
from .train import ABLATION_AXES, ablate, train, write_predictions

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "synthetic", None) is not None:
        cfg.train.synthetic = args.synthetic
    for kv in getattr(args, "set", None) or []:
        if "=" not in kv:
            raise ConfigError(f"--set expects key=value, got {kv!r}")
        k, v = kv.split("=", 1)
        set_key(cfg, k.strip(), v.strip())
    cfg.validate()
    return cfg


def _samples(cfg: RunConfig, args, out: Path | None) -> list[Sample]:
    data = getattr(args, "data", None) or cfg.train.data_dir
    if cfg.train.synthetic > 0:
        n = cfg.train.image_size
        samples = gen_synthetic(cfg.train.synthetic, n, n, cfg.seed)
        if out is not None:
            write_dataset(samples, out / "data")
        return samples
    if not data:
        raise UsageError("no training data: pass --data <dir> or --synthetic <n>")
    samples = load_dataset(data)
    if not samples:
        raise DataError(f"dataset {data} is empty")
    return samples


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    samples = _samples(cfg, args, out)
    res = train(cfg, samples, out, verbose=not args.quiet)
    print(f"trained {cfg.train.epochs} epochs ({res.steps} steps); final loss {res.log[-1][1]:.6f}, "
          f"val_mae {res.log[-1][2]:.6f}; checkpoint {out / 'checkpoint.m3nt'}")
    return EXIT_OK


def _image_samples(path: Path) -> list[Sample]:
    img_dir = path / "images" if (path / "images").is_dir() else path
    stems = list_stems(img_dir, ".ppm")
    samples = []
    for s in stems:
        img = load_ppm(img_dir / f"{s}.ppm")
        samples.append(Sample(img, np.zeros(img.shape[1:], dtype=bool), s))
    return samples


def load_model(checkpoint) -> tuple[SODModel, RunConfig]:
    ck = load_checkpoint(checkpoint)
    if ck.config_text is None:
        raise DataError(f"checkpoint {checkpoint} has no configuration sidecar")
    cfg = parse_config(ck.config_text)
    model = SODModel(cfg.encoder, cfg.decoder)
    apply_checkpoint(model, ck, np.dtype(cfg.train.dtype))
    return model, cfg


def cmd_infer(args) -> int:
    model, cfg = load_model(args.checkpoint)
    samples = _image_samples(Path(args.images))
    with T.default_dtype(np.dtype(cfg.train.dtype)):
        for s in samples[:1]:
            model.check_input(*s.mask.shape)
        n = write_predictions(model, samples, args.out, args.all_levels, cfg.train.batch)
    print(f"wrote {n} saliency maps to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    gt = Path(args.gt)
    gt_dir = gt / "masks" if (gt / "masks").is_dir() else gt
    ev = evaluate_dirs(args.pred, gt_dir)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(ev, out)
    write_curves_csv(ev.mean, out.with_name(out.stem + "_curves.csv"))
    for w in ev.warnings:
        print(f"warning: {w}", file=sys.stderr)
    m = ev.mean
    print(f"images {len(ev.per_image)}  mae {m.mae:.4f}  e_mean {m.e_mean:.4f}  "
          f"s_measure {m.s_measure:.4f}  wf {m.wf:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    samples = _samples(cfg, args, out)
    values = args.values.split(",") if args.values else None
    rows = ablate(cfg, args.axis, samples, values, out, verbose=not args.quiet)
    for r in rows:
        print(f"{r.axis}={r.value}  hash {r.config_hash}  loss {r.final_loss:.5f}  mae {r.mae:.5f}  "
              f"s {r.s_measure:.4f}  wf {r.wf:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    scopes = list(gradsuite.SCOPES) if args.scope == "all" else [args.scope]
    results = gradsuite.run(scopes, range(args.seeds))
    worst: dict[tuple[str, str], gradsuite.CheckResult] = {}
    for r in results:
        key = (r.scope, r.name)
        if key not in worst or r.error > worst[key].error:
            worst[key] = r
    for (scope, name), r in worst.items():
        print(f"{'PASS' if r.ok else 'FAIL'}  {scope:6s} {name:22s} max rel err {r.error:.3e}  (tol {r.tol:g})")
    return EXIT_OK if all(r.ok for r in results) else EXIT_NUMERIC


def cmd_gen_data(args) -> int:
    if args.synthetic is None:
        raise UsageError("gen-data needs --synthetic <n>")
    seed = 0 if args.seed is None else args.seed
    samples = gen_synthetic(args.synthetic, args.size, args.size, seed)
    write_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sodnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def run_flags(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--synthetic", type=int, metavar="N", help="train on N generated images")
        sp.add_argument("--data", help="dataset root with images/ and masks/")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--out", required=True)
        sp.add_argument("--quiet", action="store_true")

    sp = sub.add_parser("train", help="train a model")
    run_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("infer", help="write saliency maps for a directory of images")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--images", required=True, help="directory of .ppm files, or a dataset root")
    sp.add_argument("--out", required=True)
    sp.add_argument("--all-levels", action="store_true", help="also write every head under level<k>/")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval", help="score predictions against ground truth")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True, help="directory of .pgm masks, or a dataset root")
    sp.add_argument("--out", required=True, help="CSV report path")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="train and score every value of one ablation axis")
    run_flags(sp)
    sp.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    sp.add_argument("--values", help="comma-separated subset of the axis values")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    sp.add_argument("--scope", choices=["ops", "blocks", "model", "all"], default="all")
    sp.add_argument("--seeds", type=int, default=5)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("gen-data", help="write a synthetic dataset")
    sp.add_argument("--synthetic", type=int, metavar="N")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, InputShapeError, DimensionError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
