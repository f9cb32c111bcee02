"""Command line entry point: ``sss <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import SCHEMA, ConfigError, load_config
from .pcsw import PseudoMaskVolume, VolumeTooShortError, predict_pseudo_masks, run_pcsw
from .trainer import NonFiniteError
from .volumes import (MaskVolume, NoTargetPairError, VolumeFormatError, load_volume,
                      save_dataset)

log = logging.getLogger("sss")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DEFAULT_TAUS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


class DataError(RuntimeError):
    pass


def _config(args):
    cfg = load_config(args.config, args.set)
    if getattr(args, "output", None):
        cfg = cfg.replace(**{"run.output_dir": args.output})
    for flag in getattr(args, "ablate", None) or []:
        cfg = cfg.replace(**{"model.use_dfe": False} if flag == "dfe" else {"pcsw.enabled": False})
    return cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# subcommands


def cmd_generate_data(args) -> int:
    from .experiment import build_split

    cfg = _config(args)
    out = Path(cfg["run.output_dir"])
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
    cfg = cfg.replace(**{"data.manifest": ""})
    split = build_split(cfg)
    header = {"config_hash": cfg.hash(), "seed": cfg["data.seed"],
              "labeled": len(split.labeled), "unlabeled": len(split.unlabeled),
              "test": len(split.test)}
    manifest = save_dataset(split, out, header)
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    from .experiment import train

    cfg = _config(args)
    out = Path(cfg["run.output_dir"])

    def progress(rec):
        if rec["step"] % args.log_every == 0:
            log.info("step %d l_sup %.4f l_unsup %.4f lr %.2e", rec["step"], rec["l_sup"],
                     rec["l_unsup"], rec["lr"])

    state = train(cfg, None, out, resume=args.resume, stop_after=args.stop_after,
                  on_step=progress)
    print(f"trained to step {state.step}; artifacts in {out} (config {cfg.hash()})")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .experiment import build_split, evaluate, load_model, split_cases
    from .metrics import summary_csv

    cfg = _config(args)
    out = Path(cfg["run.output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.pt"
    model = load_model(ckpt, cfg, cfg["eval.model"])
    cases, ids = split_cases(build_split(cfg), args.split)
    records, summary = evaluate(model, cases, cfg, ids)
    blob = {"config_hash": cfg.hash(), "seed": cfg["run.seed"], "split": args.split,
            "checkpoint": str(ckpt), "summary": summary, "records": records}
    _write_json(out / f"scores_{args.split}.json", blob)
    table = summary_csv(summary)
    (out / f"scores_{args.split}.csv").write_text(
        f"# config_hash={cfg.hash()} seed={cfg['run.seed']}\n" + table)
    print(table, end="")
    return EXIT_OK


def cmd_pcsw_run(args) -> int:
    cfg = _config(args)
    vol = load_volume(args.volume)
    if isinstance(vol, MaskVolume):
        masks = PseudoMaskVolume.from_labels(vol.labels.astype(np.int64), vol.num_classes)
        image = None
    else:
        if not args.checkpoint:
            raise ConfigError("an image volume needs --checkpoint to predict pseudo-masks")
        import torch

        from .experiment import load_model

        model = load_model(args.checkpoint, cfg, cfg["eval.model"])
        x = torch.as_tensor(vol.slices, dtype=next(model.parameters()).dtype)[:, None]
        with torch.no_grad():
            masks = predict_pseudo_masks(model.encode(x), model.pseudo_head, x.shape[-2:],
                                         cfg["data.num_classes"])
        image = vol
    result = run_pcsw(masks, cfg["pcsw.tau"], per_class=cfg["pcsw.per_class"],
                      strict_band=cfg["pcsw.strict_band"])
    report = {"config_hash": cfg.hash(), "seed": cfg["run.seed"], "volume": str(args.volume),
              "tau": cfg["pcsw.tau"], **result.to_dict()}
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.report:
        Path(args.report).write_text(text)
    else:
        print(text, end="")
    if args.overlay:
        from .plots import mask_overlays

        mask_overlays(Path(args.overlay), masks.hard, image, result)
    return EXIT_OK


def cmd_sweep_tau(args) -> int:
    from .experiment import build_split, run_cell
    from .plots import tau_plot

    cfg = _config(args)
    values = DEFAULT_TAUS if args.values is None else _float_list(args.values)
    if not values:
        raise ConfigError("sweep-tau needs at least one tau value")
    if any(not 0.0 <= v <= 1.0 for v in values):
        raise ConfigError(f"tau values must lie in [0, 1], got {values}")
    seeds = [cfg["run.seed"]] if args.seeds is None else [int(s) for s in args.seeds.split(",")]
    out = Path(cfg["run.output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    split = build_split(cfg)
    rows = []
    for tau in values:
        for seed in seeds:
            cell = cfg.replace(**{"pcsw.tau": tau, "run.seed": seed})
            cell_dir = out / f"tau{tau:.2f}_seed{seed}"
            res = run_cell(cell, split, cell_dir)
            dice = res["summary"]["mean"]["dice"]
            rows.append({"tau": tau, "seed": seed, "dice": dice, "config_hash": cell.hash()})
            log.info("tau %.2f seed %d dice %.2f", tau, seed, dice)
    means = {t: float(np.mean([r["dice"] for r in rows if r["tau"] == t])) for t in values}
    _write_json(out / "sweep.json", {"base_config_hash": cfg.hash(), "rows": rows,
                                     "mean_dice": {f"{t:.2f}": d for t, d in means.items()}})
    lines = ["tau,mean_dice"] + [f"{t:.2f},{d:.4f}" for t, d in means.items()]
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    tau_plot(out / "sweep.png", list(means), list(means.values()))
    print("\n".join(lines))
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plots import metrics_plot

    path = Path(args.metrics)
    if not path.exists():
        raise DataError(f"metrics stream {path} not found")
    records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    if not records:
        raise DataError(f"metrics stream {path} is empty")
    out = Path(args.out) if args.out else path.with_suffix(".png")
    metrics_plot(out, records)
    print(out)
    return EXIT_OK


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad value list {text!r}: {exc}") from None


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sss", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, output=True):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                        help="override one config key (repeatable)")
        if output:
            sp.add_argument("--output", help="shortcut for --set run.output_dir=...")

    sp = sub.add_parser("generate-data", help="write a synthetic dataset and its manifest")
    common(sp)
    sp.add_argument("--force", action="store_true", help="allow a non-empty output directory")
    sp.set_defaults(func=cmd_generate_data)

    sp = sub.add_parser("train", help="train and stream metrics.jsonl")
    common(sp)
    sp.add_argument("--ablate", action="append", choices=("dfe", "pcsw"),
                    help="disable DFE or replace PCSW prompts by raw pseudo-mask prompts")
    sp.add_argument("--resume", action="store_true", help="continue from output_dir/checkpoint.pt")
    sp.add_argument("--stop-after", type=int, help="stop once this many steps are done")
    sp.add_argument("--log-every", type=int, default=50)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="score a checkpoint on a split")
    common(sp)
    sp.add_argument("--ablate", action="append", choices=("dfe", "pcsw"))
    sp.add_argument("--checkpoint", help="defaults to output_dir/checkpoint.pt")
    sp.add_argument("--split", default="test", choices=("test", "labeled", "unlabeled"))
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("pcsw-run", help="window report for one volume file")
    common(sp, output=False)
    sp.add_argument("volume", help="mask volume (used as pseudo-masks) or image volume")
    sp.add_argument("--checkpoint", help="needed for image volumes")
    sp.add_argument("--report", help="write the JSON report here instead of stdout")
    sp.add_argument("--overlay", help="directory for per-slice overlay images")
    sp.set_defaults(func=cmd_pcsw_run)

    sp = sub.add_parser("sweep-tau", help="train+evaluate once per tau value")
    common(sp)
    sp.add_argument("--ablate", action="append", choices=("dfe",))
    sp.add_argument("--values", help="comma separated taus (default 0,0.2,...,1)")
    sp.add_argument("--seeds", help="comma separated run seeds (default run.seed)")
    sp.set_defaults(func=cmd_sweep_tau)

    sp = sub.add_parser("plot", help="loss and DFE-similarity curves from metrics.jsonl")
    sp.add_argument("metrics")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_plot)

    sub.add_parser("keys", help="list config keys").set_defaults(func=cmd_keys)
    return p


def cmd_keys(args) -> int:
    for k, f in SCHEMA.items():
        print(f"{k} ({f.kind}) = {f.default!r}  {f.help}".rstrip())
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    from .experiment import CheckpointError, NumericFailure

    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, VolumeFormatError, NoTargetPairError, VolumeTooShortError,
            FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
