"""Command-line entry point: ``denodet {gen,train,detect,denoise,eval,gradcheck,bench}``.

Configuration precedence is built-in defaults, then a flat JSON file given
with ``--config``, then explicit flags.  The effective configuration of each
run is written next to its outputs.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .evaluate import DEFAULT_GATE, detect_from_logits, detections_csv, evaluate, model_threshold
from .gradcheck import run_suite
from .losses import LossConfig
from .model import CheckpointError, Denodet, ModelConfig, load_checkpoint
from .pgm import PGMError, read_pgm16, write_pgm16
from .simgen import SCENARIOS, DatasetError, SequenceSpec, load_dataset, make_sequence
from .train import TrainConfig, TrainingError, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("denodet")


class UsageError(Exception):
    pass


DEFAULTS: dict[str, dict] = {
    "gen": {
        "scenario": "vesicle", "snr": 4.0, "particles": 50, "frames": 20, "size": "128x128",
        "seed": 0, "background": 10.0, "psf_sigma": 1.0, "out": None, "force": False, "threads": None,
    },
    "train": {
        "data": None, "out": None, "epochs": 100, "batch_size": 4, "lr": 1e-4, "warm_start": 20,
        "crop": 128, "seed": 0, "val_fraction": 0.3, "gamma": 0.5, "lam": 1.0, "mu": 1.0,
        "threshold": 0.5, "calibrate": True,
    },
    "detect": {"model": None, "input": None, "out": None, "threshold": None, "nms_radius": 2.0, "window": 7},
    "denoise": {"model": None, "input": None, "out": None},
    "eval": {
        "model": None, "data": None, "out": None, "table": None, "gate": DEFAULT_GATE,
        "threshold": None, "nms_radius": 2.0, "window": 7, "threads": None,
    },
    "gradcheck": {"instances": 100, "model_instances": 2, "model_coords": None, "seed": 0, "flip_backward": None, "out": None},
    "bench": {"size": 128, "batch": 4, "repeats": 3, "frames": 10, "seed": 0, "threads": None},
}
REQUIRED = {"gen": ["out"], "train": ["data", "out"], "detect": ["model", "input", "out"],
            "denoise": ["model", "input", "out"], "eval": ["model", "data"]}


def _opt(p: argparse.ArgumentParser, flag: str, **kw) -> None:
    p.add_argument(flag, default=argparse.SUPPRESS, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="denodet", description="Joint particle denoising and detection.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="flat JSON file of option values")
        return p

    g = command("gen", "generate a synthetic sequence")
    _opt(g, "--scenario", choices=SCENARIOS)
    _opt(g, "--snr", type=float)
    _opt(g, "--particles", type=int)
    _opt(g, "--frames", type=int)
    _opt(g, "--size", help="HxW, e.g. 128x128")
    _opt(g, "--seed", type=int)
    _opt(g, "--background", type=float)
    _opt(g, "--psf-sigma", dest="psf_sigma", type=float)
    _opt(g, "--out")
    _opt(g, "--force", action="store_true")
    _opt(g, "--threads", type=int)

    t = command("train", "train a model on one or more datasets")
    _opt(t, "--data", nargs="+")
    _opt(t, "--out")
    _opt(t, "--epochs", type=int)
    _opt(t, "--batch-size", dest="batch_size", type=int)
    _opt(t, "--lr", type=float)
    _opt(t, "--warm-start", dest="warm_start", type=int)
    _opt(t, "--crop", type=int)
    _opt(t, "--seed", type=int)
    _opt(t, "--val-fraction", dest="val_fraction", type=float)
    _opt(t, "--gamma", type=float)
    _opt(t, "--lam", type=float)
    _opt(t, "--mu", type=float)
    _opt(t, "--threshold", type=float, help="detection threshold for the per-epoch validation F1")
    _opt(t, "--no-calibrate", dest="calibrate", action="store_false",
         help="skip choosing the detection threshold on the validation split after training")

    for name, help in (("detect", "write detections CSV"), ("denoise", "write denoised 16-bit PGM frames")):
        p = command(name, help)
        _opt(p, "--model")
        _opt(p, "--input", help="a PGM file or a dataset directory")
        _opt(p, "--out")
        if name == "detect":
            _opt(p, "--threshold", type=float, help="default: the checkpoint's calibrated value, else 0.5")
            _opt(p, "--nms-radius", dest="nms_radius", type=float)
            _opt(p, "--window", type=int)

    e = command("eval", "score a checkpoint on datasets")
    _opt(e, "--model")
    _opt(e, "--data", nargs="+")
    _opt(e, "--out", help="JSON report path")
    _opt(e, "--table", help="text table path")
    _opt(e, "--gate", type=float)
    _opt(e, "--threshold", type=float, help="default: the checkpoint's calibrated value, else 0.5")
    _opt(e, "--nms-radius", dest="nms_radius", type=float)
    _opt(e, "--window", type=int)
    _opt(e, "--threads", type=int)

    c = command("gradcheck", "run the finite-difference gradient suite")
    _opt(c, "--instances", type=int)
    _opt(c, "--model-instances", dest="model_instances", type=int)
    _opt(c, "--model-coords", dest="model_coords", type=int,
         help="sample this many coordinates per model tensor instead of all")
    _opt(c, "--seed", type=int)
    _opt(c, "--flip-backward", dest="flip_backward", help="test hook: negate this op's backward rule")
    _opt(c, "--out")

    b = command("bench", "time generation and a training step")
    _opt(b, "--size", type=int)
    _opt(b, "--batch", type=int)
    _opt(b, "--repeats", type=int)
    _opt(b, "--frames", type=int)
    _opt(b, "--seed", type=int)
    _opt(b, "--threads", type=int)
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a flat JSON object")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
        cfg.update(loaded)
    cfg.update({k: v for k, v in vars(args).items() if k in cfg})
    missing = [k for k in REQUIRED.get(command, []) if cfg.get(k) in (None, [], "")]
    if missing:
        raise UsageError(f"{command}: missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return cfg


def _threads(cfg: dict) -> int:
    value = cfg.get("threads") or os.environ.get("DNDT_THREADS") or 1
    try:
        n = int(value)
    except ValueError as exc:
        raise UsageError(f"invalid thread count {value!r}") from exc
    if n < 1:
        raise UsageError("thread count must be >= 1")
    return n


def _echo_config(path: Path, command: str, cfg: dict) -> None:
    path.write_text(json.dumps({"command": command, **cfg}, indent=2, sort_keys=True) + "\n")


def _sidecar(out: str, suffix: str) -> Path:
    p = Path(out)
    return p.with_name(p.name + suffix)


def _parse_size(size) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in str(size).lower().split("x"))
    except ValueError as exc:
        raise UsageError(f"--size must look like 128x128, got {size!r}") from exc
    return h, w


def _load_inputs(path: str) -> tuple[list[np.ndarray], list[int], Path | None]:
    p = Path(path)
    if p.is_dir():
        ds = load_dataset(p)
        return list(ds.noisy), list(range(len(ds))), p
    return [read_pgm16(p)], [0], None


# --- commands ---------------------------------------------------------------

def cmd_gen(cfg: dict) -> int:
    h, w = _parse_size(cfg["size"])
    spec = SequenceSpec(cfg["scenario"], float(cfg["snr"]), int(cfg["particles"]), int(cfg["frames"]),
                        height=h, width=w, background=float(cfg["background"]),
                        psf_sigma=float(cfg["psf_sigma"]), seed=int(cfg["seed"]))
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    ds = make_sequence(spec, threads=_threads(cfg))
    try:
        manifest = ds.save(cfg["out"], force=bool(cfg["force"]))
    except FileExistsError as exc:
        raise UsageError(str(exc)) from exc
    _echo_config(Path(cfg["out"]) / "run_config.json", "gen", cfg)
    print(manifest)
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    datasets = [load_dataset(d) for d in cfg["data"]]
    tc = TrainConfig(epochs=int(cfg["epochs"]), batch_size=int(cfg["batch_size"]), lr=float(cfg["lr"]),
                     warm_start_epochs=int(cfg["warm_start"]), crop_size=int(cfg["crop"]),
                     seed=int(cfg["seed"]), val_fraction=float(cfg["val_fraction"]),
                     threshold=float(cfg["threshold"]), calibrate_threshold=bool(cfg["calibrate"]))
    lc = LossConfig(gamma=float(cfg["gamma"]), lam=float(cfg["lam"]), mu=float(cfg["mu"]))
    try:
        tc.validate()
        lc.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    result = train(ModelConfig(seed=int(cfg["seed"])), tc, datasets, lc, out=cfg["out"])
    _echo_config(_sidecar(cfg["out"], ".config.json"), "train", cfg)
    if result.log:
        last = result.log[-1]
        print(f"epochs={len(result.log)} val_loss={last['val_loss']:.4f} val_f1={last['val_f1']:.3f}")
    print(cfg["out"])
    return EXIT_OK


def cmd_detect(cfg: dict) -> int:
    if int(cfg["window"]) % 2 == 0:
        raise UsageError("--window must be odd")
    model = load_checkpoint(cfg["model"])
    threshold = model_threshold(model, cfg["threshold"])
    frames, ids, _ = _load_inputs(cfg["input"])
    dets = []
    for img in frames:
        _, logits = model.predict(img)
        dets.append(detect_from_logits(logits, threshold, float(cfg["nms_radius"]), int(cfg["window"])))
    Path(cfg["out"]).write_text(detections_csv(dets, ids))
    _echo_config(_sidecar(cfg["out"], ".config.json"), "detect", cfg)
    print(f"{sum(len(d) for d in dets)} detections -> {cfg['out']}")
    return EXIT_OK


def rescale_denoised(model: Denodet, denoised: np.ndarray) -> np.ndarray:
    """Map a [0, 1] network output back to photon units with the recorded stats."""
    lo = float(model.norm_stats.get("target_lo", 0.0))
    hi = float(model.norm_stats.get("target_hi", 1.0))
    return lo + np.asarray(denoised, dtype=np.float64) * (hi - lo)


def cmd_denoise(cfg: dict) -> int:
    model = load_checkpoint(cfg["model"])
    frames, ids, source = _load_inputs(cfg["input"])
    out = Path(cfg["out"])
    if source is not None:
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / f"t{t:04d}.pgm" for t in ids]
        config_path = out / "run_config.json"
    else:
        paths = [out]
        config_path = _sidecar(cfg["out"], ".config.json")
    for img, path in zip(frames, paths):
        denoised, _ = model.predict(img)
        write_pgm16(path, rescale_denoised(model, denoised))
    _echo_config(config_path, "denoise", cfg)
    print(out)
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    model = load_checkpoint(cfg["model"])
    datasets = [load_dataset(d) for d in cfg["data"]]
    names = [Path(d).name for d in cfg["data"]]
    threshold = None if cfg["threshold"] is None else float(cfg["threshold"])
    report, _ = evaluate(model, datasets, gate=float(cfg["gate"]), threshold=threshold,
                         nms_radius=float(cfg["nms_radius"]), window=int(cfg["window"]), names=names,
                         threads=_threads(cfg))
    table = report.to_table()
    if cfg["out"]:
        Path(cfg["out"]).write_text(report.to_json())
        _echo_config(_sidecar(cfg["out"], ".config.json"), "eval", cfg)
    if cfg["table"]:
        Path(cfg["table"]).write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


def cmd_gradcheck(cfg: dict) -> int:
    flips = [cfg["flip_backward"]] if cfg["flip_backward"] else []
    with ad.flip_backward(*flips):
        coords = cfg["model_coords"]
        report = run_suite(int(cfg["instances"]), int(cfg["model_instances"]), int(cfg["seed"]),
                           int(coords) if coords else None)
    text = report.to_text() + "\n"
    if cfg["out"]:
        Path(cfg["out"]).write_text(text)
        _echo_config(_sidecar(cfg["out"], ".config.json"), "gradcheck", cfg)
    sys.stdout.write(text)
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_bench(cfg: dict) -> int:
    from .losses import joint_loss

    size, batch, repeats = int(cfg["size"]), int(cfg["batch"]), int(cfg["repeats"])
    spec = SequenceSpec("vesicle", 4.0, 40, int(cfg["frames"]), height=size, width=size, seed=int(cfg["seed"]))
    start = time.perf_counter()
    ds = make_sequence(spec, threads=_threads(cfg))
    gen_s = time.perf_counter() - start

    model = Denodet.create(ModelConfig(seed=int(cfg["seed"])))
    rng = np.random.default_rng(int(cfg["seed"]))
    idx = np.arange(batch) % len(ds)
    x = ad.Tensor((ds.noisy[idx, None] / max(ds.noisy.max(), 1)).astype(np.float32))
    ref = (ds.clean[idx, None] / max(ds.clean.max(), 1)).astype(np.float32)
    truth = [ds.truth[i] for i in idx]
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        with ad.Tape() as tape:
            loss = joint_loss(model(x), ref, truth, LossConfig(), rng)
        tape.backward(loss)
        times.append(time.perf_counter() - start)
    result = {
        "generate_frames_per_s": len(ds) / gen_s,
        "train_step_s_median": float(np.median(times)),
        "batch": batch,
        "size": size,
        "parameters": model.n_parameters(),
    }
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen, "train": cmd_train, "detect": cmd_detect, "denoise": cmd_denoise,
    "eval": cmd_eval, "gradcheck": cmd_gradcheck, "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad usage and 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args.command, args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"denodet: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, PGMError, CheckpointError, OSError) as exc:
        print(f"denodet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, FloatingPointError) as exc:
        print(f"denodet: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
