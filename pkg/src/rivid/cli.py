"""``rivid`` command line: synth -> degrade -> train (1, 2, 3) -> eval / diagnose / inspect."""
from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import os
import shutil
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__

log = logging.getLogger("rivid")

RUN_RECORD = "run.json"


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """Usage problems exit with status 1 (argparse's default is 2)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def read_flat_config(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ValueError(f"{path}: config must be flat key-value, found tables {nested}")
    return data


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = dt.datetime.fromtimestamp(int(epoch), dt.timezone.utc) if epoch else dt.datetime.now(dt.timezone.utc)
    return when.isoformat()


def write_run_record(path: Path, argv: list[str], config: dict, seed: int | None, outputs: list[str], started: str) -> None:
    record = {
        "command": ["rivid", *argv],
        "config": config,
        "seed": seed,
        "version": __version__,
        "started": started,
        "finished": _timestamp(),
        "outputs": sorted(outputs),
    }
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _prepare_out_dir(out: Path, overwrite: bool, expected: list[str]) -> None:
    clash = [name for name in expected if (out / name).exists()]
    if clash and not overwrite:
        raise UsageError(f"{out} already holds {clash[0]}; pass --overwrite to replace")
    out.mkdir(parents=True, exist_ok=True)


def _prepare_out_file(out: Path, overwrite: bool) -> None:
    if out.exists() and not overwrite:
        raise UsageError(f"{out} exists; pass --overwrite to replace")
    out.parent.mkdir(parents=True, exist_ok=True)


def cache_dir() -> Path | None:
    root = os.environ.get("RIVID_CACHE")
    return Path(root) if root else None


def cmd_synth(args, argv) -> None:
    from .synth import SynthSpec, synth_corpus

    started = _timestamp()
    conf = read_flat_config(args.spec) if args.spec else {}
    if args.seed is not None:
        conf["seed"] = args.seed
    spec = SynthSpec(**conf)
    out = Path(args.out)
    _prepare_out_dir(out, args.overwrite, ["train.csv", RUN_RECORD])
    key = hashlib.sha256(json.dumps(spec.to_dict(), sort_keys=True).encode()).hexdigest()[:16]
    cached = cache_dir() / f"synth-{key}" if cache_dir() else None
    if cached is not None and (cached / "gallery.csv").is_file():
        for item in ("images", "masks", "train.csv", "query.csv", "gallery.csv"):
            src = cached / item
            if src.is_dir():
                shutil.copytree(src, out / item, dirs_exist_ok=True)
            else:
                shutil.copy2(src, out / item)
    else:
        synth_corpus(spec, out, workers=args.workers)
        if cached is not None:
            shutil.copytree(out, cached, dirs_exist_ok=True, ignore=shutil.ignore_patterns(RUN_RECORD))
    outputs = ["train.csv", "query.csv", "gallery.csv", "images/", "masks/"]
    write_run_record(out / RUN_RECORD, argv, spec.to_dict(), spec.seed, outputs, started)
    print(f"wrote {spec.n_identities * spec.images_per_identity} images to {out}")


def cmd_degrade(args, argv) -> None:
    from .datamodel import load_manifest
    from .degrade import DegradeProtocol, apply_protocol, parse_ratios

    started = _timestamp()
    kind = args.protocol.upper()
    if kind == "VR" and args.ratios:
        raise UsageError("--ratios applies to the mlr protocol only")
    if kind == "MLR" and args.range:
        raise UsageError("--range applies to the vr protocol only")
    kwargs = {"kind": kind, "seed": args.seed}
    if args.range:
        try:
            lo, hi = (int(v) for v in args.range.split(":"))
        except ValueError:
            raise UsageError(f"--range must look like LO:HI, got {args.range!r}") from None
        kwargs["vr_width_range"] = (lo, hi)
    if args.ratios:
        kwargs["mlr_ratios"] = parse_ratios(args.ratios)
    protocol = DegradeProtocol(**kwargs)
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    name = f"{manifest.split}.csv"
    record = f"{manifest.split}.run.json"  # several splits may share one data directory
    _prepare_out_dir(out, args.overwrite, [name, record])
    result = apply_protocol(manifest, protocol, out, workers=args.workers)
    result.save(out / name)
    config = {
        "kind": protocol.kind, "mlr_ratios": [str(r) for r in protocol.mlr_ratios],
        "vr_width_range": list(protocol.vr_width_range), "seed": protocol.seed, "manifest": str(args.manifest),
    }
    write_run_record(out / record, argv, config, args.seed, [name, "images/"], started)
    print(f"degraded {len(result)} images -> {out / name}")


def cmd_train(args, argv) -> None:
    from .datamodel import load_manifest
    from .trainer import Checkpoint, TrainConfig, run_stage, write_loss_log

    started = _timestamp()
    conf = read_flat_config(args.config) if args.config else {}
    conf["stage"] = args.stage
    if args.seed is not None:
        conf["seed"] = args.seed
    if args.from_scratch:
        conf["from_scratch"] = True
    config = TrainConfig.from_dict(conf)
    init = Checkpoint.load(args.init) if args.init else None
    train = load_manifest(Path(args.data) / "train.csv")
    out = Path(args.out)
    _prepare_out_dir(out, args.overwrite, ["model.ckpt", "loss_log.csv", RUN_RECORD])
    ckpt, records = run_stage(config, train, init)
    ckpt.save(out / "model.ckpt")
    write_loss_log(records, out / "loss_log.csv")
    write_run_record(out / RUN_RECORD, argv, config.to_dict(), config.seed, ["model.ckpt", "loss_log.csv"], started)
    last = records[-1]
    print(f"stage {config.stage} done: epoch {last.epoch} mean loss {last.mean_total:.6f}")


def _file_record(out: Path) -> Path:
    return out.with_name(out.stem + ".run.json")


def cmd_eval(args, argv) -> None:
    from .evalkit import evaluate, load_model

    started = _timestamp()
    out = Path(args.out)
    _prepare_out_file(out, args.overwrite)
    model, config, _ = load_model(args.ckpt)
    metrics = evaluate(model, config, args.data)
    out.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_run_record(_file_record(out), argv, config.to_dict(), config.seed, [out.name], started)
    print(json.dumps(metrics, sort_keys=True))


def cmd_diagnose(args, argv) -> None:
    from .evalkit import load_model, load_split, objective_curves

    started = _timestamp()
    out = Path(args.out)
    _prepare_out_file(out, args.overwrite)
    model, config, _ = load_model(args.ckpt)
    query, width_max = load_split(args.data, "query")
    gallery, _ = load_split(args.data, "gallery")
    grid = objective_curves(model, query + gallery, config, width_max, mode=args.mode)
    grid.save(out)
    write_run_record(_file_record(out), argv, {**config.to_dict(), "mode": args.mode}, config.seed, [out.name], started)
    print(grid.to_csv(), end="")


def cmd_inspect(args, argv) -> None:
    from .trainer import Checkpoint

    ckpt = Checkpoint.load(args.ckpt)
    counts = ckpt.parameter_count()
    print(json.dumps({
        "version": ckpt.version,
        "stages": ckpt.stages,
        "train_config": ckpt.train_config,
        "ffsr_config": ckpt.ffsr_config,
        "rife_config": ckpt.rife_config,
        "parameters": {**counts, "total": sum(counts.values())},
        "identities": len(ckpt.identity_map),
    }, indent=2, sort_keys=True))


def build_parser() -> Parser:
    p = Parser(prog="rivid", description="Resolution-invariant person re-identification, desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="{synth,degrade,train,eval,diagnose,inspect}", parser_class=Parser)
    sub.required = True

    def common(sp, seed_required=False):
        sp.add_argument("--out", required=True)
        sp.add_argument("--overwrite", action="store_true")
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--seed", type=int, required=seed_required)

    sp = sub.add_parser("synth", help="render a synthetic identity corpus")
    sp.add_argument("--spec", help="flat TOML with SynthSpec fields")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("degrade", help="apply an MLR or VR degradation protocol to a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--protocol", choices=["mlr", "vr", "MLR", "VR"], required=True)
    sp.add_argument("--range", help="VR width range LO:HI (half-open)")
    sp.add_argument("--ratios", help="MLR ratio set, e.g. 1/2,1/3,1/4")
    common(sp, seed_required=True)
    sp.set_defaults(func=cmd_degrade)

    sp = sub.add_parser("train", help="run one training stage (1 FFSR, 2 RIFE, 3 joint)")
    sp.add_argument("--stage", choices=["1", "2", "3"], required=True)
    sp.add_argument("--config", help="flat TOML with TrainConfig fields")
    sp.add_argument("--data", required=True, help="directory holding train.csv")
    sp.add_argument("--init", help="checkpoint from the previous stage")
    sp.add_argument("--from-scratch", action="store_true", help="allow stage 2 without a stage-1 checkpoint")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="rank-1/rank-5 of query.csv against gallery.csv")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("diagnose", help="distance-ratio objective over a resolution grid")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--mode", choices=["a", "b"], required=True)
    common(sp)
    sp.set_defaults(func=cmd_diagnose)

    sp = sub.add_parser("inspect", help="print checkpoint config, parameter count and stage history")
    sp.add_argument("--ckpt", required=True)
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", 1) < 1:
        parser.print_usage(sys.stderr)
        print("rivid: error: --workers must be >= 1", file=sys.stderr)
        return 1
    try:
        args.func(args, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"rivid: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"rivid: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
