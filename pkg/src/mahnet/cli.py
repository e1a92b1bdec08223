"""Command-line entry points.

All settings come from one strict JSON config; flags only pick the
subcommand, paths and seed. Failures print one JSON line to stderr and
exit nonzero.
"""
from __future__ import annotations

import argparse
import copy
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import data
from .data.imaging import decode_png, encode_png, overlay
from .metrics import COLUMNS
from .segnet import LossWeights, NetworkSpec, evaluate, load_network, train
from .service import InferenceService, make_server, segment_image

DEFAULTS = {
    "seed": 0,
    "network": {},
    "loss": {},
    "train": {
        "epochs": 10,
        "lr": 3e-3,
        "batch_size": 4,
        "optimizer": "adam",
        "dtype": "float64",
        "eval_every": 0,
        "stop_dsc": None,
    },
    "data": {"bundle": None, "eval_bundle": None},
    "paths": {"checkpoint_dir": "checkpoints", "checkpoint": None, "report": None},
    "preprocess": {
        "image_dir": "images",
        "label_dir": "labels",
        "size": 256,
        "id_pattern": data.pairing.DEFAULT_ID_PATTERN,
        "patient_pattern": data.pairing.DEFAULT_PATIENT_PATTERN,
    },
    "synth": {"n_cases": 16, "size": 64, "lesion_kind": "mixed", "contrast": 0.35, "noise": 0.04},
    "eval": {"predictor": "network", "report": None},
    "bench": {"variants": [], "epochs": 2, "repeats": 1, "report": None},
    "serve": {"host": "127.0.0.1", "port": 8080, "max_pixels": 4096 * 4096, "max_body_bytes": 32 * 1024 * 1024,
              "model_id": None},
}
# sections whose content is validated by the library types instead
_OPEN_SECTIONS = ("network", "loss")


class CliError(Exception):
    """Usage or configuration problem (exit code 2)."""

    kind = "usage"
    code = 2


class InputError(CliError):
    """Some inputs could not be processed (exit code 1)."""

    kind = "input"
    code = 1


def _merge(base: dict, override: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise CliError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict) and key not in _OPEN_SECTIONS:
            if not isinstance(val, dict):
                raise CliError(f"config key {where}{key!r} must be an object")
            out[key] = _merge(base[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


def load_config(path=None, seed: int | None = None) -> dict:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CliError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise CliError("config root must be a JSON object")
    cfg = _merge(DEFAULTS, raw, "")
    if seed is not None:
        cfg["seed"] = seed
    network_spec(cfg)
    loss_weights(cfg)
    return cfg


def network_spec(cfg: dict) -> NetworkSpec:
    try:
        return NetworkSpec.from_dict(cfg["network"])
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid network config: {exc}") from None


def loss_weights(cfg: dict) -> LossWeights:
    try:
        return LossWeights.from_dict(cfg["loss"])
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid loss config: {exc}") from None


def _dtype(cfg: dict):
    name = cfg["train"]["dtype"]
    if name not in ("float64", "float32"):
        raise CliError(f"train.dtype must be float64 or float32, got {name!r}")
    return np.dtype(name)


def _require(value, what: str):
    if value is None:
        raise CliError(f"missing {what}")
    return value


def _write_json(path, payload: dict) -> None:
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _emit(payload: dict) -> None:
    print(json.dumps(payload))


# -- subcommands ---------------------------------------------------------------


def cmd_preprocess(cfg: dict, in_dir, out_bundle) -> int:
    pp = cfg["preprocess"]
    root = Path(in_dir)
    img_dir, lab_dir = root / pp["image_dir"], root / pp["label_dir"]
    if not data.preprocess.volume_files(img_dir):
        raise InputError(f"no volumes found in {img_dir}")
    records, summary = data.preprocess_dirs(img_dir, lab_dir, pp["size"], pp["id_pattern"], pp["patient_pattern"])
    if records:
        data.write_bundle(records, out_bundle)
    _emit({"bundle": str(out_bundle) if records else None, **summary.to_dict()})
    if summary.errors or not records:
        failed = ", ".join(e["file"] for e in summary.errors) or "all volumes"
        raise InputError(f"{len(summary.errors)} volume(s) failed: {failed}")
    return 0


def cmd_synth(cfg: dict, out_bundle) -> int:
    s = cfg["synth"]
    bundle = data.synth_dataset(cfg["seed"], s["n_cases"], s["size"], s["lesion_kind"], s["contrast"], s["noise"])
    data.write_bundle(bundle.records, out_bundle)
    _emit({"bundle": str(out_bundle), "records": len(bundle), "patients": len(bundle.index)})
    return 0


def cmd_train(cfg: dict) -> int:
    t = cfg["train"]
    bundle = data.read_bundle(_require(cfg["data"]["bundle"], "data.bundle"))
    report = train(
        network_spec(cfg), loss_weights(cfg), bundle, t["epochs"], t["lr"], cfg["seed"],
        cfg["paths"]["checkpoint_dir"], batch_size=t["batch_size"], optimizer=t["optimizer"],
        dtype=_dtype(cfg), eval_every=t["eval_every"], stop_dsc=t["stop_dsc"],
        log=lambda msg: print(msg, file=sys.stderr),
    )
    _write_json(cfg["paths"]["report"], report.to_dict())
    _emit({"epochs": len(report.losses), "final_loss": report.losses[-1],
           "checkpoint": report.checkpoints[-1] if report.checkpoints else None})
    return 0


def _latest_checkpoint(cfg: dict) -> str:
    if cfg["paths"]["checkpoint"]:
        return cfg["paths"]["checkpoint"]
    ckdir = Path(cfg["paths"]["checkpoint_dir"])
    found = sorted(ckdir.glob("epoch_*.mahw")) if ckdir.is_dir() else []
    if not found:
        raise CliError(f"no checkpoint given and none found in {ckdir}")
    return str(found[-1])


def _oracle_predictor(record):
    return record.label.copy(), record.label.astype(np.float64)


def cmd_eval(cfg: dict) -> int:
    bundle_path = cfg["data"]["eval_bundle"] or _require(cfg["data"]["bundle"], "data.bundle")
    bundle = data.read_bundle(bundle_path)
    kind = cfg["eval"]["predictor"]
    if kind == "oracle":
        report = evaluate(None, bundle, predictor=_oracle_predictor)
    elif kind == "network":
        net = load_network(network_spec(cfg), _latest_checkpoint(cfg), _dtype(cfg))
        report = evaluate(net, bundle)
    else:
        raise CliError(f"eval.predictor must be 'network' or 'oracle', got {kind!r}")
    payload = report.to_dict()
    _write_json(cfg["eval"]["report"], payload)
    _emit({"columns": list(COLUMNS), "mean": report.table_row(), "cases": len(report.cases)})
    return 0


def _read_image(path, index: int | None):
    path = Path(path)
    if path.suffix.lower() == ".png":
        return decode_png(path.read_bytes())
    bundle = data.read_bundle(path)
    if index is None or not 0 <= index < len(bundle):
        raise CliError(f"--index must select one of the {len(bundle)} bundle records")
    return bundle.records[index].image


def cmd_predict(cfg: dict, image, out_prefix, index: int | None = None) -> int:
    img = _read_image(image, index)
    net = load_network(network_spec(cfg), _latest_checkpoint(cfg), _dtype(cfg))
    mask, prob = segment_image(net, img)
    prefix = Path(out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    mask_path = prefix.with_name(prefix.name + "_mask.png")
    over_path = prefix.with_name(prefix.name + "_overlay.png")
    mask_path.write_bytes(encode_png(mask * np.uint8(255)))
    over_path.write_bytes(encode_png(overlay(img, mask)))
    _emit({"mask": str(mask_path), "overlay": str(over_path), "height": int(img.shape[0]),
           "width": int(img.shape[1]), "foreground_fraction": float(mask.mean())})
    return 0


def machine_info() -> dict:
    return {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpus": os.cpu_count(),
        "processor": platform.processor() or platform.machine(),
    }


def cmd_bench(cfg: dict) -> int:
    b = cfg["bench"]
    if not b["variants"]:
        raise CliError("bench.variants must list at least one variant")
    bundle = data.read_bundle(_require(cfg["data"]["bundle"], "data.bundle"))
    rows = []
    for i, variant in enumerate(b["variants"]):
        variant = dict(variant)
        name = variant.pop("name", f"variant{i}")
        spec = NetworkSpec.from_dict({**cfg["network"], **variant})
        per_run = []
        for _ in range(b["repeats"]):
            rep = train(spec, loss_weights(cfg), bundle, b["epochs"], cfg["train"]["lr"], cfg["seed"], None,
                        batch_size=cfg["train"]["batch_size"], dtype=_dtype(cfg))
            per_run.append(float(np.mean(rep.epoch_seconds)))
        rows.append({"variant": name, "parameter_count": rep.parameter_count,
                     "seconds_per_epoch": float(np.mean(per_run)), "std": float(np.std(per_run)),
                     "repeats": b["repeats"], "epochs": b["epochs"]})
    table = {"machine": machine_info(), "rows": rows}
    _write_json(b["report"], table)
    print(f"# {table['machine']['platform']} | python {table['machine']['python']} | cpus {table['machine']['cpus']}")
    print(f"{'variant':<28}{'params':>10}{'s/epoch':>12}{'std':>10}")
    for r in rows:
        print(f"{r['variant']:<28}{r['parameter_count']:>10}{r['seconds_per_epoch']:>12.3f}{r['std']:>10.3f}")
    return 0


def cmd_serve(cfg: dict, port: int | None = None) -> int:
    s = cfg["serve"]
    ckpt = _latest_checkpoint(cfg)
    net = load_network(network_spec(cfg), ckpt, _dtype(cfg))
    service = InferenceService(net, s["model_id"] or Path(ckpt).stem, s["max_pixels"], s["max_body_bytes"])
    server = make_server(service, s["host"], s["port"] if port is None else port)
    print(json.dumps({"listening": f"http://{server.server_address[0]}:{server.server_address[1]}",
                      "model": service.model_id}), flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mahnet", description="Mamba-AHNet lesion segmentation pipeline")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sp = sub.add_parser("preprocess", help="NIfTI volumes -> ULSB bundle")
    sp.add_argument("in_dir")
    sp.add_argument("out_bundle")
    sp = sub.add_parser("synth", help="write a synthetic lesion bundle")
    sp.add_argument("out_bundle")
    sub.add_parser("train", help="train a network")
    sub.add_parser("eval", help="evaluate a checkpoint on a bundle")
    sp = sub.add_parser("predict", help="segment one image")
    sp.add_argument("image", help="PNG file or ULSB bundle")
    sp.add_argument("out_prefix")
    sp.add_argument("--index", type=int, help="record index when IMAGE is a bundle")
    sub.add_parser("bench", help="per-epoch timing per model variant")
    sp = sub.add_parser("serve", help="HTTP inference server")
    sp.add_argument("--port", type=int)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config, args.seed)
        if args.command == "preprocess":
            return cmd_preprocess(cfg, args.in_dir, args.out_bundle)
        if args.command == "synth":
            return cmd_synth(cfg, args.out_bundle)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "predict":
            return cmd_predict(cfg, args.image, args.out_prefix, args.index)
        if args.command == "bench":
            return cmd_bench(cfg)
        if args.command == "serve":
            return cmd_serve(cfg, args.port)
        raise CliError(f"unknown command {args.command!r}")
    except Exception as exc:  # every failure becomes one machine-readable line
        kind = exc.kind if isinstance(exc, CliError) else type(exc).__name__
        print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
        return exc.code if isinstance(exc, CliError) else 1


if __name__ == "__main__":
    sys.exit(main())
