"""Built-in analytic invariant checks behind `mmda selftest`.

Small, fast sanity checks with independent straight-line references; the
full verification lives in the test suite.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from .core_types import EmbeddingBatch, TextSpace
from .md2a import batch_reorganize, md2a_head
from .metrics import ScoreRecord, auc, eer_threshold, hter
from .rs2 import RS2Config, TextConstrainedClassifier, rs2_loss
from .synthdata import GeneratorConfig, default_domains, generate_domain
from .udsa import UDSAConfig, UDSAStack


def _rand_emb(gen: torch.Generator, b: int, n: int, d: int) -> EmbeddingBatch:
    tokens = torch.randn(b, n, d, generator=gen, dtype=torch.float64)
    labels = torch.tensor([i % 2 for i in range(b)])
    return EmbeddingBatch.from_tokens(tokens, labels, tuple("dom" for _ in range(b)))


def _check_lambda_zero_is_vanilla() -> None:
    gen = torch.Generator().manual_seed(11)
    emb = _rand_emb(gen, 2, 3, 4)
    paired = batch_reorganize(emb, 0, pairing="self_only")
    w_q = torch.randn(8, 4, generator=gen, dtype=torch.float64)
    w_k = torch.randn(8, 4, generator=gen, dtype=torch.float64)
    w_v = torch.randn(8, 2, generator=gen, dtype=torch.float64)
    out = md2a_head(paired, w_q, w_k, w_v, 0.0)
    joint = paired.joint_tokens
    q = (joint @ w_q)[..., :2]
    k = (joint @ w_k)[..., :2]
    v = joint @ w_v
    ref = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(4), dim=-1) @ v
    err = (out - ref).abs().max().item()
    assert err < 1e-12, f"lambda=0 attention deviates from vanilla by {err}"


def _check_row_sums() -> None:
    gen = torch.Generator().manual_seed(5)
    tokens = torch.randn(3, 4, 4, generator=gen, dtype=torch.float64)
    tokens[..., 0] = 1.0  # constant feature column
    emb = EmbeddingBatch.from_tokens(tokens, torch.tensor([0, 1, 0]), ("d", "d", "d"))
    paired = batch_reorganize(emb, 1)
    w = lambda c: torch.randn(8, c, generator=gen, dtype=torch.float64)
    lam = 0.37
    w_v = torch.zeros(8, 1, dtype=torch.float64)
    w_v[0, 0] = 1.0  # V = the constant column, so outputs are attention row sums
    out = md2a_head(paired, w(4), w(4), w_v, lam)
    err = (out - (1.0 - lam)).abs().max().item()
    assert err < 1e-10, f"attention rows sum to 1-lambda with error {err}"


def _check_udsa_two_pass() -> None:
    stack = UDSAStack(UDSAConfig(n_d=6, depth=3), seed=2)
    v0 = torch.randn(4, 6, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
    vprimes = stack(v0)
    vs = [v0]
    for i in range(3):
        vs.append(stack.adapt[i](vs[-1]))
    ref = [None] * 4
    ref[3] = vs[3]
    for i in (2, 1, 0):
        ref[i] = vs[i] + stack.remap[i](ref[i + 1])
    err = max((a - b).abs().max().item() for a, b in zip(vprimes, ref))
    assert err < 1e-12, f"two-pass recomputation deviates by {err}"


def _check_metric_oracles() -> None:
    gen = np.random.Generator(np.random.PCG64(9))
    records = [
        ScoreRecord(float(gen.uniform()), int(gen.integers(2)), "d", frozenset())
        for _ in range(40)
    ]
    live = [r.score for r in records if r.label == 1]
    spoof = [r.score for r in records if r.label == 0]
    wins = sum(
        1.0 if (1 - a) > (1 - b) else 0.5 if a == b else 0.0
        for a in live for b in spoof
    )
    ref_auc = wins / (len(live) * len(spoof))
    assert abs(auc(records) - ref_auc) == 0.0, "auc mismatch vs pairwise count"
    tau = eer_threshold(records)
    far = sum(s <= tau for s in spoof) / len(spoof)
    frr = sum(s > tau for s in live) / len(live)
    assert abs(hter(records, tau) - (far + frr) / 2) == 0.0, "hter mismatch vs counting"


def _check_loss_algebra() -> None:
    emb_dim = 8
    gen = torch.Generator().manual_seed(21)
    text = TextSpace(
        embeddings=torch.nn.functional.normalize(
            torch.randn(4, emb_dim, generator=gen, dtype=torch.float64), dim=-1
        ),
        class_of=torch.tensor([1, 1, 0, 0]),
    )
    # single live sample at distance 0.5 from its nearest live caption
    t = text.embeddings[0]
    orth = torch.randn(emb_dim, generator=gen, dtype=torch.float64)
    orth = torch.nn.functional.normalize(orth - (orth @ t) * t, dim=-1)
    v = 0.5 * t + math.sqrt(3) / 2 * orth  # cos = 0.5 against t
    d_check = 1.0 - float(v @ t / v.norm())
    assert abs(d_check - 0.5) < 1e-12
    emb = EmbeddingBatch.from_tokens(v[None, None, :], torch.tensor([1]), ("d",))
    cfg = RS2Config(label_smoothing=0.0, distance_mode="nearest_own_class",
                    alignment_variant="smooth")
    loss = rs2_loss(emb, text, TextConstrainedClassifier(emb_dim, 1), cfg)
    near = min(1.0 - float(v @ row / (v.norm() * row.norm())) for row in text.rows_of_class(1))
    assert near <= 0.5 + 1e-12
    assert abs(float(loss.l_align) - (-math.log(1.0 - near))) < 1e-12, "analytic point failed"
    assert float(loss.total) - (float(loss.l_cls) + float(loss.l_align)) == 0.0


def _check_generator_determinism() -> None:
    spec = default_domains(123)[0]
    cfg = GeneratorConfig(n_live=2, n_spoof=2, image_size=16)
    a = generate_domain(spec, cfg)
    b = generate_domain(spec, cfg)
    for x, y in zip(a, b):
        for m in x.images:
            assert np.array_equal(x.images[m], y.images[m]), "generator is not deterministic"


CHECKS = [
    ("md2a_lambda0_equals_vanilla_attention", _check_lambda_zero_is_vanilla),
    ("md2a_rows_sum_to_one_minus_lambda", _check_row_sums),
    ("udsa_two_pass_recomputation", _check_udsa_two_pass),
    ("metrics_match_counting_oracles", _check_metric_oracles),
    ("rs2_analytic_points_and_additivity", _check_loss_algebra),
    ("generator_determinism", _check_generator_determinism),
]


def run_selftest() -> int:
    failed = 0
    for name, fn in CHECKS:
        try:
            fn()
        except AssertionError as exc:
            print(f"FAIL {name}: {exc}")
            failed += 1
        else:
            print(f"PASS {name}")
    return 0 if failed == 0 else 1
