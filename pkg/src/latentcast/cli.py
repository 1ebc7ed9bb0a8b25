"""Command-line entry point: ``latentcast [--config F] [--set k=v ...] COMMAND``.

Exit codes: 0 ok, 2 config error, 3 data or format error, 4 numeric
divergence. Failures print one line ``error: <ClassName>: <message>`` to
stderr. ``LATENTCAST_LOG_LEVEL`` sets log verbosity (default WARNING).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import ablation
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .codec import CodecDivergenceError, CodecShapeError, pca_patch_error
from .config import DEFAULTS, ConfigError, RunConfig, load_config
from .dit import param_report
from .evaluation import EvaluationError, write_report
from .fieldio import FieldFormatError, read_fields, write_fields
from .flow import FlowDivergenceError
from .forecaster import DatasetTooShortError, decode_ensemble
from .grid import CalendarError, CalendarTime, GridError
from .pipeline import climatology_for, derive, fit_forecaster, make_datasets, run_evaluation
from .synthetic import ClimatologyError, ParameterError

logger = logging.getLogger("latentcast")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4
LOG_ENV = "LATENTCAST_LOG_LEVEL"

_EXIT_FOR = (
    ((ConfigError, ParameterError), EXIT_CONFIG),
    ((FlowDivergenceError, CodecDivergenceError, FloatingPointError), EXIT_DIVERGENCE),
    (
        (
            FieldFormatError,
            CheckpointError,
            GridError,
            CalendarError,
            DatasetTooShortError,
            EvaluationError,
            ClimatologyError,
            CodecShapeError,
            OSError,
        ),
        EXIT_DATA,
    ),
)

TRAIN_FILE, EVAL_FILE = "train.mrchk", "eval.mrchk"


def _data_dir(path: str) -> Path:
    p = Path(path)
    if not (p / TRAIN_FILE).is_file():
        raise FileNotFoundError(f"{p / TRAIN_FILE} not found (run gen-data first)")
    return p


def _atomic_checkpoint(path: Path, forecaster, codec, meta: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    save_checkpoint(tmp, forecaster, codec, meta)
    os.replace(tmp, path)


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_gen_data(cfg: RunConfig, args) -> None:
    train, test = make_datasets(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_fields(train, out / TRAIN_FILE)
    write_fields(test, out / EVAL_FILE)
    (out / "config.json").write_text(cfg.to_json())
    _print_json({"train_frames": train.n_steps, "eval_frames": test.n_steps, "out": str(out)})


def cmd_train_codec(cfg: RunConfig, args) -> None:
    d = _data_dir(args.data)
    train, test = read_fields(d / TRAIN_FILE), read_fields(d / EVAL_FILE)
    codec = cfg.codec()
    pca = pca_patch_error(train, test, codec.patch, codec.latent_channels)
    codec.fit(train)
    err = codec.reconstruction_error(test)
    save_checkpoint(args.out, codec=codec, meta={"config": cfg.values, "codec_error": err, "pca_error": pca})
    _print_json({"codec_error": err, "pca_error": pca, "fingerprint": codec.fingerprint()})


def cmd_train_model(cfg: RunConfig, args) -> None:
    d = _data_dir(args.data)
    train = read_fields(d / TRAIN_FILE)
    _, codec, _ = load_checkpoint(args.codec)
    if codec is None:
        raise CheckpointError(f"{args.codec} holds no codec")
    out = Path(args.out)

    def on_checkpoint(f, step):
        _atomic_checkpoint(out, f, codec, {"config": cfg.values, "step": step})

    f = fit_forecaster(cfg, codec, train, on_checkpoint=on_checkpoint)
    _atomic_checkpoint(out, f, codec, {"config": cfg.values, "step": cfg.train().steps})
    with open(out.with_name(out.name + ".loss.tsv"), "w") as fh:
        fh.write("step\tloss\tlr\thorizon_frames\telapsed_s\n")
        for e in f.log_:
            fh.write(f"{e['step']}\t{e['loss']:.6g}\t{e['lr']:.6g}\t{e['horizon_frames']}\t{e['elapsed_s']:.2f}\n")
    _print_json({"steps": cfg.train().steps, "final_loss": f.log_[-1]["loss"] if f.log_ else None})


def _load_model(path: str):
    forecaster, codec, manifest = load_checkpoint(path)
    if forecaster is None or codec is None:
        raise CheckpointError(f"{path} must hold both a forecaster and a codec")
    return forecaster, codec, manifest


def _init_frame(seq, text: str, context: int) -> int:
    """Frame index from an integer or the first frame at a ``MM-DDTHH`` calendar time."""
    if text.lstrip("-").isdigit():
        i = int(text)
    else:
        slot = CalendarTime.parse(text).index
        hits = np.flatnonzero(seq.slots() == slot)
        hits = hits[hits >= context - 1]
        if not len(hits):
            raise CalendarError(f"no frame at {text} with {context} frames of context")
        i = int(hits[0])
    if not context - 1 <= i < seq.n_steps:
        raise DatasetTooShortError(f"init frame {i} needs {context} context frames inside the data")
    return i


def cmd_forecast(cfg: RunConfig, args) -> None:
    forecaster, codec, _ = _load_model(args.checkpoint)
    seq = read_fields(args.data)
    K = forecaster.training.context_frames
    i0 = _init_frame(seq, args.init_time, K)
    latents = codec.transform(seq.slice(i0 - K + 1, i0 + 1))
    ens = forecaster.predict(latents, seq.time_at(i0), args.horizon_days, args.members, args.seed)
    ens = decode_ensemble(codec, ens, seq)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    members = []
    for m in range(ens.n_members):
        name = f"member_{m:03d}.mrchk"
        write_fields(ens.member_sequence(m), out / name)
        digest = hashlib.sha256((out / name).read_bytes()).hexdigest()
        members.append({"file": name, "seed": ens.member_seeds[m], "sha256": digest})
    manifest = {
        "init_time": str(ens.init_time),
        "init_frame": i0,
        "step_hours": ens.step_hours,
        "n_frames": ens.n_steps,
        "lead_hours": ens.lead_hours.tolist(),
        "seed": args.seed,
        "members": members,
        "codec_fingerprint": codec.fingerprint(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    _print_json({"members": len(members), "frames": ens.n_steps, "out": str(out)})


def cmd_evaluate(cfg: RunConfig, args) -> None:
    forecaster, codec, _ = _load_model(args.checkpoint)
    d = _data_dir(args.data)
    train, test = read_fields(d / TRAIN_FILE), read_fields(d / EVAL_FILE)
    overrides = {
        k: v
        for k, v in (
            ("n_init_dates", args.init_dates),
            ("horizon_days", args.horizon_days),
            ("n_members", args.members),
            ("seed", args.seed),
        )
        if v is not None
    }
    report = run_evaluation(cfg, forecaster, codec, test, climatology_for(cfg, train), **overrides)
    paths = write_report(report, args.out)
    _print_json({k: str(v) for k, v in paths.items()})


def cmd_ablate(cfg: RunConfig, args) -> None:
    if not args.full:
        # explicit user settings win over the reduced desk preset
        explicit = {k: v for k, v in cfg.values.items() if v != DEFAULTS[k]}
        cfg = derive(ablation.reduced_config(), explicit)
    rows = ablation.run_ablation(cfg, args.axis)
    path = ablation.write_ablation(rows, args.out, args.axis)
    sys.stdout.write(path.read_text())


def cmd_param_report(cfg: RunConfig, args) -> None:
    c = cfg.codec()
    n_lat, n_lon = cfg.values["data.n_lat"], cfg.values["data.n_lon"]
    if n_lat % c.patch or n_lon % c.patch:
        raise ConfigError(f"grid {n_lat}x{n_lon} not divisible by codec.patch={c.patch}")
    dit = cfg.dit().replace(latent_channels=c.latent_channels, latent_h=n_lat // c.patch, latent_w=n_lon // c.patch)
    _print_json(param_report(dit))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-codec": cmd_train_codec,
    "train-model": cmd_train_model,
    "forecast": cmd_forecast,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "param-report": cmd_param_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentcast", description="Latent flow-matching ensemble forecaster.")
    p.add_argument("--config", help="JSON config file with dotted section.key names")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    sub = p.add_subparsers(dest="command")

    s = sub.add_parser("gen-data", help="write train/eval datasets")
    s.add_argument("--out", required=True)

    s = sub.add_parser("train-codec", help="train and checkpoint the patch codec")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("train-model", help="variable-horizon training of the forecaster")
    s.add_argument("--data", required=True)
    s.add_argument("--codec", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("forecast", help="ensemble rollout to per-member files")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="MRCHK1 file holding the context frames")
    s.add_argument("--init-time", required=True, help="frame index or MM-DDTHH")
    s.add_argument("--horizon-days", type=int, default=None)
    s.add_argument("--members", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("evaluate", help="multi-date metric report")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--init-dates", type=int, default=None)
    s.add_argument("--horizon-days", type=int, default=None)
    s.add_argument("--members", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True)

    s = sub.add_parser("ablate", help="desk-scale ablation sweep for one axis")
    s.add_argument("axis", choices=ablation.AXES)
    s.add_argument("--out", required=True)
    s.add_argument("--full", action="store_true", help="use the config as is instead of the reduced preset")

    sub.add_parser("param-report", help="print parameter accounting for the configured model")
    return p


def _exit_code(exc: BaseException) -> int | None:
    for types, code in _EXIT_FOR:
        if isinstance(exc, types):
            return code
    return None


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(asctime)s %(name)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        if args.print_config:
            print(cfg.to_json())
            return EXIT_OK
        if args.command is None:
            raise ConfigError("no command given")
        COMMANDS[args.command](cfg, args)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        code = _exit_code(exc)
        if code is None:
            raise
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
