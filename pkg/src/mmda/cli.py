"""Command-line entry point: gen-data, train, eval, report, selftest.

One layered configuration drives everything: built-in defaults, then an
optional JSON config file, then --section.key=value flags, then the
MMDA_SEED environment variable.  The SHA-256 hash of the merged config is
embedded in every artifact so runs can be matched up later.  All errors go
to stderr with a machine-parsable "MMDA-E<code>:" prefix and a nonzero exit
code; success exits 0.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import re
import sys
from pathlib import Path
from typing import Mapping, Sequence

from .backbone import DEFAULT_CAPTIONS, FrozenEncoderParams, frozen_encoder, load_captions
from .core_types import (
    MMDAError,
    BatchSample,
    CaptionSet,
    ConfigError,
    MANIFEST_NAME,
    ValidationError,
    canonical_json,
    derive_seed,
    load_batch,
    modality_from_name,
    save_batch,
)
from .md2a import MD2AConfig
from .metrics import ScoreRecord
from .protocol_eval import (
    ProtocolConfig,
    ProtocolReport,
    report_from_dict,
    run_protocol,
    split_dev,
    write_score_histogram,
)
from .rs2 import RS2Config
from .synthdata import DomainSpec, GeneratorConfig, default_domains, generate_domain
from .trainer import (
    AdamW,
    MMDAModel,
    TrainConfig,
    apply_checkpoint,
    load_checkpoint,
    save_checkpoint,
    train,
    trainable_parameters,
)
from .udsa import UDSAConfig

# Desk-scale training defaults; full-scale settings (lr 5e-6, 80 epochs,
# width 512) are impractical without a real pretrained backbone.
DEFAULT_CONFIG: dict = {
    "seed": 7,
    "data": {
        "image_size": 32,
        "n_live": 40,
        "n_spoof": 40,
        "spoof_signature_strength": 1.0,
        "modality_noise_sigma": [0.02, 0.02, 0.02],
        "domains": [],
    },
    "backbone": {"n_d": 64, "patch": 8, "v_hash": 2048},
    "md2a": {
        "enabled": True,
        "lambda": 0.5,
        "n_heads": 4,
        "learnable_lambda": False,
        "pairing": "uniform",
    },
    "rs2": {
        "variant": "rs2",
        "label_smoothing": 0.1,
        "distance_mode": "nearest_own_class",
        "reduction": "mean",
    },
    "udsa": {
        "depth": 7,
        "adapter_kind": "dense",
        "n_experts": 4,
        "top_k": 2,
        "exit": "auto",
    },
    "train": {
        "lr": 1e-3,
        "weight_decay": 1e-3,
        "epochs": 10,
        "batch_size": 24,
        "optimizer": "adamw",
        "grad_clip": 1.0,
    },
    "protocol": {
        "protocol": "P1_LOO",
        "train_domains": ["C-like", "P-like", "S-like", "W-like"],
        "test_domains": [],
        "missing": ["DEPTH", "IR"],
        "dev_fraction": 0.1,
        "threshold": "dev_eer",
    },
    "captions": {"file": ""},
}

_FLAG_RE = re.compile(r"^--([A-Za-z0-9_]+(?:\.[A-Za-z0-9_]+)*)=(.*)$")


# ---------------------------------------------------------------------------
# Config loading / merging
# ---------------------------------------------------------------------------

def _set_path(cfg: dict, dotted: str, value: object) -> None:
    parts = dotted.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        node = node[p]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"unknown config key: {dotted}")
    old = node[leaf]
    node[leaf] = _coerce(dotted, old, value)


def _coerce(key: str, old: object, new: object) -> object:
    if isinstance(old, bool):
        if isinstance(new, bool):
            return new
        if isinstance(new, str) and new.lower() in ("true", "false"):
            return new.lower() == "true"
        raise ConfigError(f"config key {key} expects true/false, got {new!r}")
    if isinstance(old, int) and not isinstance(old, bool):
        if isinstance(new, bool) or not isinstance(new, (int, float, str)):
            raise ConfigError(f"config key {key} expects an integer, got {new!r}")
        try:
            f = float(new)
        except ValueError:
            raise ConfigError(f"config key {key} expects an integer, got {new!r}") from None
        if f != int(f):
            raise ConfigError(f"config key {key} expects an integer, got {new!r}")
        return int(f)
    if isinstance(old, float):
        try:
            return float(new)  # type: ignore[arg-type]
        except (TypeError, ValueError):
            raise ConfigError(f"config key {key} expects a number, got {new!r}") from None
    if isinstance(old, str):
        return str(new)
    if isinstance(old, list):
        if isinstance(new, str):
            new = [x for x in new.split(",") if x != ""]
        if not isinstance(new, list):
            raise ConfigError(f"config key {key} expects a list, got {new!r}")
        return new
    return new


def _merge_file(cfg: dict, data: Mapping, prefix: str = "") -> None:
    for k, v in data.items():
        dotted = f"{prefix}{k}"
        if isinstance(v, Mapping):
            if not isinstance(cfg.get(k), dict):
                raise ConfigError(f"unknown config key: {dotted}")
            _merge_file(cfg[k], v, prefix=dotted + ".")
        else:
            if k not in cfg or isinstance(cfg[k], dict):
                raise ConfigError(f"unknown config key: {dotted}")
            cfg[k] = _coerce(dotted, cfg[k], v)


def load_config(path: str | None, overrides: Sequence[str] = ()) -> dict:
    """Defaults < config file < --section.key=value flags < MMDA_SEED."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        _merge_file(cfg, data)
    for raw in overrides:
        m = _FLAG_RE.match(raw)
        if not m:
            raise ConfigError(f"flags must look like --section.key=value, got {raw!r}")
        dotted, text = m.group(1), m.group(2)
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        _set_path(cfg, dotted, value)
    env_seed = os.environ.get("MMDA_SEED")
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"MMDA_SEED must be an integer, got {env_seed!r}") from None
    return cfg


def config_hash(cfg: Mapping) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Builders from the merged config
# ---------------------------------------------------------------------------

def build_domain_specs(cfg: Mapping) -> tuple[DomainSpec, ...]:
    entries = cfg["data"]["domains"]
    if not entries:
        return default_domains(derive_seed(cfg["seed"], "data"))
    specs = []
    for e in entries:
        try:
            specs.append(
                DomainSpec(
                    name=e["name"],
                    shift_vector=tuple(e["shift_vector"]),
                    noise_sigma=float(e["noise_sigma"]),
                    sensor_gain=tuple(e["sensor_gain"]),
                    seed=int(e.get("seed", derive_seed(cfg["seed"], "data", e["name"]))),
                ).validate()
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad entry in data.domains: {exc}") from None
    return tuple(specs)


def build_generator_config(cfg: Mapping) -> GeneratorConfig:
    d = cfg["data"]
    return GeneratorConfig(
        n_live=d["n_live"],
        n_spoof=d["n_spoof"],
        image_size=d["image_size"],
        spoof_signature_strength=d["spoof_signature_strength"],
        modality_noise_sigma=tuple(d["modality_noise_sigma"]),
    ).validate()


def build_captions(cfg: Mapping) -> CaptionSet:
    path = cfg["captions"]["file"]
    return load_captions(path) if path else DEFAULT_CAPTIONS


def build_encoder(cfg: Mapping) -> FrozenEncoderParams:
    b = cfg["backbone"]
    return frozen_encoder(
        seed=derive_seed(cfg["seed"], "encoder"),
        image_size=cfg["data"]["image_size"],
        patch=b["patch"],
        n_d=b["n_d"],
        v_hash=b["v_hash"],
    )


def build_model(cfg: Mapping, init_seed: int) -> MMDAModel:
    n_d = cfg["backbone"]["n_d"]
    md2a_cfg = MD2AConfig(
        n_d=n_d,
        n_heads=cfg["md2a"]["n_heads"],
        lam=cfg["md2a"]["lambda"],
        learnable_lambda=cfg["md2a"]["learnable_lambda"],
        pairing=cfg["md2a"]["pairing"],
        enabled=cfg["md2a"]["enabled"],
    )
    udsa_cfg = UDSAConfig(
        n_d=n_d,
        depth=cfg["udsa"]["depth"],
        adapter_kind=cfg["udsa"]["adapter_kind"],
        n_experts=cfg["udsa"]["n_experts"],
        top_k=cfg["udsa"]["top_k"],
    )
    rs2_cfg = RS2Config(
        label_smoothing=cfg["rs2"]["label_smoothing"],
        distance_mode=cfg["rs2"]["distance_mode"],
        alignment_variant=cfg["rs2"]["variant"],
        reduction=cfg["rs2"]["reduction"],
    )
    return MMDAModel(
        encoder=build_encoder(cfg),
        captions=build_captions(cfg),
        md2a_cfg=md2a_cfg,
        udsa_cfg=udsa_cfg,
        rs2_cfg=rs2_cfg,
        seed=init_seed,
    )


def build_train_config(cfg: Mapping, seed: int) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        lr=t["lr"],
        weight_decay=t["weight_decay"],
        epochs=t["epochs"],
        batch_size=t["batch_size"],
        seed=seed,
        optimizer=t["optimizer"],
        grad_clip=t["grad_clip"],
    ).validate()


def build_protocol_config(cfg: Mapping) -> ProtocolConfig:
    p = cfg["protocol"]
    return ProtocolConfig(
        protocol=p["protocol"],
        train_domains=tuple(p["train_domains"]),
        test_domains=tuple(p["test_domains"]),
        missing=tuple(modality_from_name(m) for m in p["missing"]),
        dev_fraction=p["dev_fraction"],
        threshold=p["threshold"],
    ).validate()


def load_datasets(data_dir: str | Path) -> dict[str, tuple[BatchSample, ...]]:
    root = Path(data_dir)
    if not root.is_dir():
        raise ValidationError(f"data directory not found: {root}")
    datasets = {}
    for sub in sorted(root.iterdir()):
        if (sub / MANIFEST_NAME).is_file():
            datasets[sub.name] = load_batch(sub / MANIFEST_NAME)
    if not datasets:
        raise ValidationError(f"no domain manifests under {root}")
    return datasets


def _protocol_seed(cfg: Mapping) -> int:
    return derive_seed(cfg["seed"], "protocol")


def _train_key(cfg: Mapping) -> tuple[str, ...]:
    return tuple(sorted(cfg["protocol"]["train_domains"]))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: dict, out_dir: str) -> list[Path]:
    chash = config_hash(cfg)
    gcfg = build_generator_config(cfg)
    manifests = []
    for spec in build_domain_specs(cfg):
        samples = generate_domain(spec, gcfg)
        manifests.append(save_batch(samples, Path(out_dir) / spec.name, chash))
    for m in manifests:
        print(m)
    return manifests


def _loss_rows(history) -> list[str]:
    return [f"{h.step},{h.epoch},{h.total!r},{h.l_cls!r},{h.l_align!r}" for h in history]


def resume_hash(cfg: Mapping) -> str:
    """Config hash with train.epochs zeroed out.

    Resuming legitimately extends a run by more epochs; everything else in
    the config must match the checkpoint exactly.
    """
    neutral = copy.deepcopy(dict(cfg))
    neutral["train"]["epochs"] = 0
    return config_hash(neutral)


def cmd_train(cfg: dict, data_dir: str, out_dir: str, resume: str | None = None) -> Path:
    chash = config_hash(cfg)
    rhash = resume_hash(cfg)
    datasets = load_datasets(data_dir)
    key = _train_key(cfg)
    for name in key:
        if name not in datasets:
            raise ConfigError(
                f"protocol.train_domains entry {name!r} has no manifest under {data_dir}"
            )
    pseed = _protocol_seed(cfg)
    pool = [s for d in key for s in datasets[d]]
    pcfg = build_protocol_config(cfg)
    train_split, _dev = split_dev(pool, pcfg.dev_fraction, derive_seed(pseed, "dev", *key))
    model = build_model(cfg, derive_seed(pseed, "model", *key))
    tcfg = build_train_config(cfg, derive_seed(pseed, "train", *key))

    start_epoch = start_step = 0
    opt = AdamW(trainable_parameters(model), lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    old_rows: list[str] = []
    if resume:
        header, tensors = load_checkpoint(resume)
        if header.get("resume_hash") != rhash:
            raise ConfigError(
                "checkpoint was produced under a different config (only "
                "train.epochs may change when resuming)"
            )
        if tcfg.epochs < int(header["epoch"]):
            raise ConfigError(
                f"checkpoint already covers {header['epoch']} epochs; "
                f"train.epochs={tcfg.epochs} asks for fewer"
            )
        apply_checkpoint(model, tensors, opt, header["adamw_t"])
        start_epoch = int(header["epoch"])
        start_step = int(header["step"])
        prev = Path(resume).parent / "loss_history.csv"
        if prev.is_file():
            old_rows = prev.read_text().splitlines()[2:]

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.mmda"

    def flush(epochs_done: int, steps_done: int, history) -> None:
        save_checkpoint(
            ckpt_path, model, opt,
            config_hash=chash, seed=tcfg.seed, epoch=epochs_done, step=steps_done,
            extra={"resume_hash": rhash},
        )
        lines = [f"# config_hash={chash}", "step,epoch,total,l_cls,l_align"]
        lines += old_rows + _loss_rows(history)
        (out / "loss_history.csv").write_text("\n".join(lines) + "\n")
        epoch_losses = [h.total for h in history if h.epoch == epochs_done - 1]
        if epoch_losses:
            print(f"epoch {epochs_done}: mean loss {sum(epoch_losses) / len(epoch_losses):.6f}")

    result, opt = train(
        model, train_split, tcfg,
        start_epoch=start_epoch, start_step=start_step, optimizer=opt,
        on_epoch=flush,
    )
    if result.epochs_done == start_epoch:
        flush(result.epochs_done, result.steps, result.history)
    print(ckpt_path)
    return ckpt_path


def cmd_eval(
    cfg: dict,
    data_dir: str,
    out_dir: str,
    checkpoint: str | None = None,
    plots: bool = False,
) -> ProtocolReport:
    chash = config_hash(cfg)
    datasets = load_datasets(data_dir)
    pcfg = build_protocol_config(cfg)
    pseed = _protocol_seed(cfg)

    model = None
    if checkpoint:
        if not Path(checkpoint).is_file():
            raise ValidationError(f"checkpoint not found: {checkpoint}")
        header, tensors = load_checkpoint(checkpoint)
        if header["config_hash"] != chash:
            raise ConfigError(
                f"checkpoint config hash {header['config_hash']} does not match "
                f"this config ({chash})"
            )
        key = _train_key(cfg)
        model = build_model(cfg, derive_seed(pseed, "model", *key))
        apply_checkpoint(model, tensors)

    scores: dict[str, list[ScoreRecord]] = {}
    report = run_protocol(
        pcfg,
        model,
        datasets,
        builder=lambda s: build_model(cfg, s),
        train_cfg=build_train_config(cfg, seed=0),
        seed=pseed,
        exit_rule=cfg["udsa"]["exit"],
        config_hash=chash,
        collect_scores=scores,
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jpath = report.write_json(out / "report.json")
    report.write_csv(out / "report.csv")
    if plots:
        for name, records in scores.items():
            safe = re.sub(r"[^A-Za-z0-9_.-]", "_", name)
            write_score_histogram(records, out / f"scores_{safe}.png")
    for r in report.rows:
        print(f"{r.name}: HTER={100 * r.hter:.2f}% AUC={100 * r.auc:.2f}% exit={r.exit_layer}")
    print(f"Average: HTER={100 * report.average_hter:.2f}% AUC={100 * report.average_auc:.2f}%")
    print(jpath)
    return report


def cmd_report(inputs: Sequence[str], out_path: str, force: bool = False) -> Path:
    reports = []
    for p in inputs:
        try:
            reports.append(report_from_dict(json.loads(Path(p).read_text())))
        except FileNotFoundError:
            raise ValidationError(f"report not found: {p}") from None
    if not reports:
        raise ValidationError("no reports given")
    hashes = {r.config_hash for r in reports}
    if len(hashes) > 1 and not force:
        raise ValidationError(
            f"refusing to aggregate reports with mismatched config hashes "
            f"{sorted(hashes)}; pass --force to override"
        )
    lines = [f"# config_hashes={','.join(sorted(hashes))}"]
    lines.append("protocol,subprotocol,hter_pct,auc_pct,tau,exit_layer")
    for r in reports:
        for row in r.rows:
            lines.append(
                f"{r.protocol},{row.name},{100 * row.hter:.4f},{100 * row.auc:.4f},"
                f"{row.tau:.6f},{row.exit_layer}"
            )
        lines.append(
            f"{r.protocol},Average,{100 * r.average_hter:.4f},{100 * r.average_auc:.4f},,"
        )
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    print(out)
    return out


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # noqa: D102 - argparse hook
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="mmda", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic domain manifests")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model on the configured train domains")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)

    p = sub.add_parser("eval", help="run the configured protocol and write reports")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--plots", action="store_true")

    p = sub.add_parser("report", help="aggregate report.json files into one CSV")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")

    sub.add_parser("selftest", help="run the built-in analytic invariant checks")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        ns, overrides = _build_parser().parse_known_args(argv)
        if ns.command == "selftest":
            from .selftest import run_selftest
            if overrides:
                raise ConfigError(f"selftest takes no flags, got {overrides}")
            return run_selftest()
        if ns.command == "report":
            if overrides:
                raise ConfigError(f"report takes no config flags, got {overrides}")
            cmd_report(ns.inputs, ns.out, force=ns.force)
            return 0
        cfg = load_config(ns.config, overrides)
        if ns.command == "gen-data":
            cmd_gen_data(cfg, ns.out)
        elif ns.command == "train":
            cmd_train(cfg, ns.data, ns.out, resume=ns.resume)
        elif ns.command == "eval":
            cmd_eval(cfg, ns.data, ns.out, checkpoint=ns.checkpoint, plots=ns.plots)
        return 0
    except MMDAError as exc:
        print(f"MMDA-E{exc.code:02d}: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # pragma: no cover - unexpected failure path
        print(f"MMDA-E99: unexpected {type(exc).__name__}: {exc}", file=sys.stderr)
        return 99


if __name__ == "__main__":
    sys.exit(main())
