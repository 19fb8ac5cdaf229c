"""``bitsnn`` command line: train, convert, verify, infer, analyze.

Exit codes: 0 ok, 2 usage or config error, 3 numeric failure (NaN/Inf),
4 verification failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .analyze import (EnergyTable, EnergyTableError, accuracy_vs_timesteps, count_ops, decompose_errors,
                      emit_report, estimate_energy, spiking_activity)
from .ann import AnnModel, build_model
from .checkpoint import CheckpointError, load_file, save_file
from .config import ConfigError, RunConfig, load_config
from .convert import SnnModel, convert, verify_lossless
from .data import Dataset, gen_synthetic, load_idx, read_idx, synthetic_splits
from .snn import SCHEDULERS, run_snn, write_spike_dump
from .trainer import TrainingDivergedError, evaluate, mean_bit_density, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4

log = logging.getLogger("bitsnn")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _versions() -> dict:
    import numba

    return {"bitsnn": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "numba": numba.__version__}


def write_manifest(out, command: str, args: dict, seed: int | None, config: dict | None = None,
                   extra: dict | None = None) -> Path:
    """One manifest per artifact: ``<out>.manifest.json``."""
    out = Path(out)
    doc = {
        "command": command,
        "arguments": args,
        "config": config,
        "seed": seed,
        "versions": _versions(),
        "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "outputs": {str(out): _sha256(out)},
    }
    if extra:
        doc.update(extra)
    path = out.with_name(out.name + ".manifest.json")
    path.write_text(json.dumps(doc, indent=2, default=str) + "\n")
    return path


def _load(path, kind=None):
    try:
        model = load_file(path)
    except FileNotFoundError:
        raise UsageError(f"model file not found: {path}") from None
    except CheckpointError as exc:
        raise UsageError(f"{path}: {exc}") from None
    if kind is AnnModel and not isinstance(model, AnnModel):
        raise UsageError(f"{path} holds a converted SNN; an ANN checkpoint is needed here")
    if kind is SnnModel and not isinstance(model, SnnModel):
        raise UsageError(f"{path} holds an ANN; run 'bitsnn convert' first")
    return model


def _datasets(cfg: RunConfig) -> tuple[Dataset, Dataset | None]:
    d = cfg.data
    if d.synthetic:
        return synthetic_splits(cfg.train.seed, d.n_train, d.n_test, cfg.model.num_classes,
                                cfg.model.input_size)
    try:
        tr = load_idx(d.images, d.labels, cfg.model.num_classes, "train")
        te = None
        if d.test_images:
            te = load_idx(d.test_images, d.test_labels, cfg.model.num_classes, "test")
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return tr, te


def _load_inputs(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"input file not found: {path}")
    try:
        if path.suffix == ".npy":
            x = np.load(path).astype(np.float32)
        else:
            x = read_idx(path).astype(np.float32) / np.float32(255.0)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4:
        raise UsageError(f"{path}: expected (N, H, W) or (N, C, H, W) data, got shape {x.shape}")
    return x


def _emit_json(doc: dict, path=None) -> None:
    text = json.dumps(doc, indent=2)
    print(text)
    if path:
        Path(path).write_text(text + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    m = cfg.model
    model = build_model(input_shape=(1, m.input_size, m.input_size), channels=m.channels,
                        num_classes=m.num_classes, q_steps=m.q_steps, pool_after=m.pool_after,
                        kernel=m.kernel, lam_init=m.lam_init, seed=cfg.train.seed)
    train_set, test_set = _datasets(cfg)
    if tuple(train_set.images.shape[1:]) != model.input_shape:
        raise UsageError(f"data shape {train_set.images.shape[1:]} does not match model input {model.input_shape}")
    model, hist = train(model, train_set, cfg.train, cfg.reg)
    summary = {"train_accuracy": evaluate(model, train_set), "bit_density": hist.bit_density[-1],
               "final_loss": hist.loss[-1]}
    if test_set is not None:
        summary["test_accuracy"] = evaluate(model, test_set)
    model.meta = {"trained_with": cfg.as_dict()}
    save_file(model, args.out)
    write_manifest(args.out, "train", {"config": str(args.config), "out": str(args.out)},
                   cfg.train.seed, cfg.as_dict(), {"summary": summary, "history": hist.as_dict()})
    print(json.dumps(summary))
    return EXIT_OK


def cmd_convert(args) -> int:
    ann = _load(args.model, AnnModel)
    bits = int(math.log2(ann.q_steps))
    steps = bits if args.timesteps is None else args.timesteps
    if steps < 1:
        raise UsageError("--timesteps must be >= 1")
    exact_ok = steps == bits
    if args.neuron == "modified" and not exact_ok and not args.allow_degraded:
        raise UsageError(f"T={steps} does not match log2(Q)={bits} for Q={ann.q_steps}; "
                         "pass --allow-degraded to build a lossy model")
    snn = convert(ann, steps, neuron=args.neuron)
    save_file(snn, args.out)
    if snn.exact:
        banner = f"EXACT MODE: T = log2(Q) = {steps}, bit-level lossless conversion"
    elif args.neuron == "baseline":
        banner = f"BASELINE IF: rate coding over T = {steps}, conversion is approximate"
    else:
        banner = f"DEGRADED MODE: T = {steps} != log2(Q) = {bits}, quantization error returns"
    write_manifest(args.out, "convert", {"model": str(args.model), "timesteps": steps,
                                         "neuron": args.neuron, "out": str(args.out)}, None,
                   extra={"mode": "exact" if snn.exact else "approximate", "banner": banner,
                          "source": {str(args.model): _sha256(args.model)},
                          "theta": snn.theta})
    print(banner)
    return EXIT_OK


def cmd_verify(args) -> int:
    ann = _load(args.ann, AnnModel)
    snn = _load(args.snn, SnnModel)
    rng = np.random.default_rng(args.seed)
    x = rng.random((args.samples,) + ann.input_shape).astype(np.float32)
    rep = verify_lossless(ann, snn, x)
    doc = rep.as_dict(args.tol)
    doc["bits_equal"] = rep.bits_equal
    doc["timesteps"] = snn.timesteps
    doc["exact"] = snn.exact
    _emit_json(doc, args.report)
    return EXIT_OK if rep.passed(args.tol) else EXIT_VERIFY


def cmd_infer(args) -> int:
    snn = _load(args.model)
    if isinstance(snn, AnnModel):
        snn = convert(snn)
    x = _load_inputs(args.input)
    if tuple(x.shape[1:]) != snn.input_shape:
        raise UsageError(f"input shape {x.shape[1:]} does not match model input {snn.input_shape}")
    try:
        res = run_snn(snn, x, scheduler=args.scheduler)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    doc = {"scheduler": res.scheduler, "timesteps": snn.timesteps, "neuron": snn.neuron,
           "predictions": np.argmax(res.logits, axis=1).tolist(),
           "spike_density": spiking_activity(res.spikes)["overall"],
           "cost": res.ledger.as_dict()}
    if args.dump_spikes:
        out = Path(args.dump_spikes)
        out.mkdir(parents=True, exist_ok=True)
        files = []
        for li, (spikes, theta) in enumerate(zip(res.spikes, snn.theta), start=1):
            p = out / f"layer{li}.spk"
            write_spike_dump(p, spikes, li, theta, snn.neuron)
            files.append(str(p))
        doc["spike_dumps"] = files
    _emit_json(doc, args.report)
    return EXIT_OK


def _analysis_data(args, ann: AnnModel) -> Dataset:
    if args.dataset == "synthetic":
        return gen_synthetic(args.seed + 10_000, args.samples, ann.num_classes, ann.input_shape[-1], split="test")
    try:
        data = load_idx(args.dataset, args.labels, ann.num_classes, "test")
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return data.subset(np.arange(min(args.samples, len(data))))


def cmd_analyze(args) -> int:
    ann = _load(args.model, AnnModel)
    bits = int(math.log2(ann.q_steps))
    steps = args.timesteps or bits
    data = _analysis_data(args, ann)
    if tuple(data.images.shape[1:]) != ann.input_shape:
        raise UsageError(f"data shape {data.images.shape[1:]} does not match model input {ann.input_shape}")
    try:
        table = EnergyTable.from_json(args.energy_table) if args.energy_table else EnergyTable()
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"energy table: {exc}") from None
    modified = convert(ann, steps)
    baseline = convert(ann, steps, neuron="baseline")
    errors = decompose_errors(ann, baseline, modified, data.images)
    res = run_snn(modified, data.images)
    activity = spiking_activity(res.spikes)
    dens = [layer["per_step"] for layer in activity["layers"]]
    try:
        energy = estimate_energy(count_ops(modified, dens, steps), table, args.width, dens)
    except EnergyTableError as exc:
        raise UsageError(str(exc.args[0])) from None
    sweep = None
    if args.sweep:
        sweep = accuracy_vs_timesteps(ann, data.images, data.labels, range(1, bits + 1))
    info = {"path": str(args.model), "q_steps": ann.q_steps, "timesteps": steps,
            "blocks": len(ann.blocks), "samples": len(data),
            "snn_accuracy": float(np.mean(np.argmax(res.logits, axis=1) == data.labels)),
            "ann_bit_density": mean_bit_density(ann, data.images)}
    text = emit_report(model_info=info, errors=errors, activity=activity, energy=energy,
                       table=table, sweep=sweep)
    print(text)
    if args.report:
        Path(args.report).write_text(text + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bitsnn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a QCFS ANN from a TOML config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("convert", help="convert an ANN checkpoint to an SNN checkpoint")
    c.add_argument("--model", required=True)
    c.add_argument("--timesteps", type=int, default=None, help="default log2(Q)")
    c.add_argument("--out", required=True)
    c.add_argument("--neuron", choices=("modified", "baseline"), default="modified")
    c.add_argument("--allow-degraded", action="store_true", help="permit T != log2(Q)")
    c.set_defaults(func=cmd_convert)

    v = sub.add_parser("verify", help="compare ANN and SNN layer by layer")
    v.add_argument("--ann", required=True)
    v.add_argument("--snn", required=True)
    v.add_argument("--samples", type=int, default=32)
    v.add_argument("--tol", type=float, default=1e-4)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--report")
    v.set_defaults(func=cmd_verify)

    i = sub.add_parser("infer", help="run an SNN on IDX or .npy inputs")
    i.add_argument("--model", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--scheduler", choices=SCHEDULERS, default="layer_by_layer")
    i.add_argument("--dump-spikes", metavar="DIR")
    i.add_argument("--report")
    i.set_defaults(func=cmd_infer)

    a = sub.add_parser("analyze", help="error decomposition, activity and energy report")
    a.add_argument("--model", required=True, help="ANN checkpoint")
    a.add_argument("--dataset", default="synthetic", help="'synthetic' or an IDX image file")
    a.add_argument("--labels", help="IDX label file for --dataset")
    a.add_argument("--samples", type=int, default=128)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--timesteps", type=int)
    a.add_argument("--energy-table", help="JSON file overriding the default energy table")
    a.add_argument("--width", type=int, choices=(32, 8), default=32)
    a.add_argument("--sweep", action="store_true", help="add accuracy for T = 1..log2(Q)")
    a.add_argument("--report")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"bitsnn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, FloatingPointError) as exc:
        print(f"bitsnn {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
