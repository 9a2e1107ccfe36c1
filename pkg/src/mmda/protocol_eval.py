"""Cross-domain evaluation protocols and reporting.

Three protocols over named domains: leave-one-domain-out (P1_LOO),
test-time missing modalities (P2_MISSING), and limited source domains
(P3_LIMITED, a 2-train/2-test split run in both directions).  Thresholds
and the early-exit layer are chosen on a dev split carved out of the
training domains, never on test data; a config switch restores the
test-set EER threshold for comparison.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from itertools import combinations
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .core_types import (
    MODALITIES,
    BatchSample,
    ConfigError,
    ModalityKind,
    ValidationError,
    derive_seed,
)
from .metrics import ScoreRecord, auc, eer_threshold, far_frr, hter
from .trainer import MMDAModel, TrainConfig, evaluate_layers, train
from .udsa import select_exit_layer

PROTOCOLS = ("P1_LOO", "P2_MISSING", "P3_LIMITED")
THRESHOLD_RULES = ("dev_eer", "test_eer")


@dataclass
class ProtocolConfig:
    """Which domains train, which test, and what can go missing."""

    protocol: str = "P1_LOO"
    train_domains: tuple[str, ...] = ()
    test_domains: tuple[str, ...] = ()
    missing: tuple[ModalityKind, ...] = (ModalityKind.DEPTH, ModalityKind.IR)
    dev_fraction: float = 0.1
    threshold: str = "dev_eer"

    def validate(self) -> "ProtocolConfig":
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol.protocol must be one of {PROTOCOLS}")
        if self.threshold not in THRESHOLD_RULES:
            raise ConfigError(f"protocol.threshold must be one of {THRESHOLD_RULES}")
        if not 0.0 < self.dev_fraction < 0.5:
            raise ConfigError("protocol.dev_fraction must lie in (0, 0.5)")
        if not self.train_domains:
            raise ConfigError("protocol.train_domains must not be empty")
        overlap = set(self.train_domains) & set(self.test_domains)
        if overlap:
            raise ValidationError(f"train and test domains overlap: {sorted(overlap)}")
        if self.protocol == "P1_LOO":
            if len(self.train_domains) < 2:
                raise ConfigError("P1_LOO needs at least two domains to rotate over")
        else:
            if not self.test_domains:
                raise ConfigError(f"{self.protocol} requires protocol.test_domains")
        if self.protocol == "P2_MISSING":
            mods = {ModalityKind(m) for m in self.missing}
            if not mods or mods >= set(MODALITIES):
                raise ValidationError(
                    "protocol.missing must be a non-empty proper subset of the modalities"
                )
        return self


@dataclass(frozen=True)
class SubprotocolResult:
    name: str
    train_domains: tuple[str, ...]
    test_domains: tuple[str, ...]
    missing: tuple[str, ...]
    hter: float
    auc: float
    tau: float
    exit_layer: int
    n_dev: int
    n_test: int


@dataclass
class ProtocolReport:
    protocol: str
    config_hash: str
    threshold_rule: str
    exit_mode: str
    rows: list[SubprotocolResult] = field(default_factory=list)

    @property
    def average_hter(self) -> float:
        return float(np.mean([r.hter for r in self.rows]))

    @property
    def average_auc(self) -> float:
        return float(np.mean([r.auc for r in self.rows]))

    def to_dict(self) -> dict:
        return {
            "format": "mmda-report-v1",
            "protocol": self.protocol,
            "config_hash": self.config_hash,
            "threshold_rule": self.threshold_rule,
            "exit_mode": self.exit_mode,
            "rows": [
                {
                    "name": r.name,
                    "train_domains": list(r.train_domains),
                    "test_domains": list(r.test_domains),
                    "missing": list(r.missing),
                    "hter": r.hter,
                    "auc": r.auc,
                    "tau": r.tau,
                    "exit_layer": r.exit_layer,
                    "n_dev": r.n_dev,
                    "n_test": r.n_test,
                }
                for r in self.rows
            ],
            "average": {"hter": self.average_hter, "auc": self.average_auc},
        }

    def write_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")
        return path

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [f"# config_hash={self.config_hash}"]
        lines.append("subprotocol,hter_pct,auc_pct,tau,exit_layer")
        for r in self.rows:
            lines.append(
                f"{r.name},{100 * r.hter:.4f},{100 * r.auc:.4f},{r.tau:.6f},{r.exit_layer}"
            )
        lines.append(
            f"Average,{100 * self.average_hter:.4f},{100 * self.average_auc:.4f},,"
        )
        path.write_text("\n".join(lines) + "\n")
        return path


def report_from_dict(d: dict) -> ProtocolReport:
    if d.get("format") != "mmda-report-v1":
        raise ValidationError("not an MMDA protocol report")
    rows = [
        SubprotocolResult(
            name=r["name"],
            train_domains=tuple(r["train_domains"]),
            test_domains=tuple(r["test_domains"]),
            missing=tuple(r["missing"]),
            hter=float(r["hter"]),
            auc=float(r["auc"]),
            tau=float(r["tau"]),
            exit_layer=int(r["exit_layer"]),
            n_dev=int(r["n_dev"]),
            n_test=int(r["n_test"]),
        )
        for r in d["rows"]
    ]
    return ProtocolReport(
        protocol=d["protocol"],
        config_hash=d["config_hash"],
        threshold_rule=d["threshold_rule"],
        exit_mode=d["exit_mode"],
        rows=rows,
    )


# ---------------------------------------------------------------------------
# Dev split and subprotocol plans
# ---------------------------------------------------------------------------

def split_dev(
    samples: Sequence[BatchSample],
    fraction: float,
    seed: int,
) -> tuple[list[BatchSample], list[BatchSample]]:
    """Stratified (domain x label) dev carve-out; returns (train, dev)."""
    strata: dict[tuple[str, int], list[BatchSample]] = {}
    for s in sorted(samples, key=lambda s: s.sample_id):
        strata.setdefault((s.domain, s.label), []).append(s)
    train_out, dev_out = [], []
    for key in sorted(strata):
        members = strata[key]
        k = max(1, round(fraction * len(members)))
        gen = np.random.Generator(np.random.PCG64(derive_seed(seed, "dev", *key)))
        picked = set(gen.choice(len(members), size=k, replace=False).tolist())
        for i, s in enumerate(members):
            (dev_out if i in picked else train_out).append(s)
    return train_out, dev_out


@dataclass(frozen=True)
class _Plan:
    name: str
    train: tuple[str, ...]
    test: tuple[str, ...]
    missing: tuple[ModalityKind, ...] = ()


def _subprotocol_plans(cfg: ProtocolConfig) -> list[_Plan]:
    def span(train: Sequence[str], test: Sequence[str]) -> str:
        return "+".join(train) + "->" + "+".join(test)

    if cfg.protocol == "P1_LOO":
        pool = sorted(cfg.train_domains)
        return [
            _Plan(name=span([d for d in pool if d != held], [held]),
                  train=tuple(d for d in pool if d != held), test=(held,))
            for held in pool
        ]
    if cfg.protocol == "P3_LIMITED":
        a, b = tuple(sorted(cfg.train_domains)), tuple(sorted(cfg.test_domains))
        return [
            _Plan(name=span(a, b), train=a, test=b),
            _Plan(name=span(b, a), train=b, test=a),
        ]
    # P2_MISSING: one split, every non-empty subset of the maskable modalities
    base = _Plan(
        name="",
        train=tuple(sorted(cfg.train_domains)),
        test=tuple(sorted(cfg.test_domains)),
    )
    mods = sorted({ModalityKind(m) for m in cfg.missing})
    plans = []
    for size in range(1, len(mods) + 1):
        for combo in combinations(mods, size):
            label = "missing_" + "&".join(m.short for m in combo)
            plans.append(replace(base, name=label, missing=tuple(combo)))
    return plans


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------

def run_protocol(
    cfg: ProtocolConfig,
    model: MMDAModel | None,
    datasets: Mapping[str, Sequence[BatchSample]],
    *,
    builder: Callable[[int], MMDAModel] | None = None,
    train_cfg: TrainConfig | None = None,
    seed: int = 0,
    exit_rule: str = "auto",
    config_hash: str = "",
    collect_scores: dict[str, list[ScoreRecord]] | None = None,
) -> ProtocolReport:
    """Run every subprotocol and aggregate HTER/AUC rows.

    A pre-trained `model` is reused for every subprotocol sharing one
    training split (P2); otherwise each subprotocol trains its own model via
    `builder` and `train_cfg`.  Thresholds and exit layers come from the dev
    split unless configured otherwise.
    """
    cfg.validate()
    for name in tuple(cfg.train_domains) + tuple(cfg.test_domains):
        if name not in datasets:
            raise ConfigError(f"protocol domain {name!r} not found in the datasets")
    if exit_rule != "auto":
        if not exit_rule.startswith("fixed:"):
            raise ConfigError(f"udsa.exit must be 'auto' or 'fixed:<i>', got {exit_rule!r}")
        try:
            int(exit_rule.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"udsa.exit has a non-integer layer: {exit_rule!r}") from None

    plans = _subprotocol_plans(cfg)
    if model is not None and len({p.train for p in plans}) > 1:
        raise ConfigError(
            "a pre-trained model cannot be reused across subprotocols with "
            "different training splits; omit the checkpoint so each one trains"
        )
    report = ProtocolReport(
        protocol=cfg.protocol,
        config_hash=config_hash,
        threshold_rule=cfg.threshold,
        exit_mode=exit_rule,
    )
    trained: dict[tuple[str, ...], tuple[MMDAModel, list[list[ScoreRecord]]]] = {}
    for plan in plans:
        key = plan.train
        if key not in trained:
            pool = [s for d in plan.train for s in datasets[d]]
            train_split, dev_split = split_dev(pool, cfg.dev_fraction, derive_seed(seed, "dev", *key))
            if model is not None:
                sub_model = model
            else:
                if builder is None or train_cfg is None:
                    raise ConfigError(
                        "run_protocol needs either a pre-trained model or a builder + train_cfg"
                    )
                sub_model = builder(derive_seed(seed, "model", *key))
                sub_cfg = replace(train_cfg, seed=derive_seed(seed, "train", *key))
                train(sub_model, train_split, sub_cfg)
            dev_layers = evaluate_layers(sub_model, dev_split)
            trained[key] = (sub_model, dev_layers)
        sub_model, dev_layers = trained[key]

        if exit_rule == "auto":
            exit_layer = select_exit_layer(dev_layers)
        else:
            exit_layer = int(exit_rule.split(":", 1)[1])
            if not 0 <= exit_layer <= sub_model.depth:
                raise ConfigError(
                    f"fixed exit layer {exit_layer} outside [0, {sub_model.depth}]"
                )
        dev_records = dev_layers[exit_layer]

        test_samples = [s for d in plan.test for s in datasets[d]]
        test_layers = evaluate_layers(sub_model, test_samples, missing=plan.missing)
        test_records = test_layers[exit_layer]
        if collect_scores is not None:
            collect_scores[plan.name] = list(test_records)
        if cfg.threshold == "dev_eer":
            tau = eer_threshold(dev_records)
        else:
            tau = eer_threshold(test_records)
        report.rows.append(
            SubprotocolResult(
                name=plan.name,
                train_domains=plan.train,
                test_domains=plan.test,
                missing=tuple(m.name for m in plan.missing),
                hter=hter(test_records, tau),
                auc=auc(test_records),
                tau=tau,
                exit_layer=exit_layer,
                n_dev=len(dev_records),
                n_test=len(test_records),
            )
        )
    return report


def write_score_histogram(
    records: Sequence[ScoreRecord], path: str | Path, bins: int = 20
) -> Path:
    """Optional score-distribution plot; requires matplotlib."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise ConfigError("plots require matplotlib (pip install mmda[plots])") from exc
    live = [r.score for r in records if r.label == 1]
    spoof = [r.score for r in records if r.label == 0]
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.hist(live, bins=bins, range=(0, 1), alpha=0.6, label="live")
    ax.hist(spoof, bins=bins, range=(0, 1), alpha=0.6, label="spoof")
    ax.set_xlabel("spoof probability")
    ax.set_ylabel("count")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
