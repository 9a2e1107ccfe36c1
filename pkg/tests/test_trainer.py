import numpy as np
import pytest
import torch

from mmda.core_types import ModalityKind, ValidationError
from mmda.metrics import auc
from mmda.trainer import (
    AdamW,
    TrainConfig,
    apply_checkpoint,
    checkpoint_bytes,
    clip_global_norm,
    evaluate,
    evaluate_layers,
    load_checkpoint,
    save_checkpoint,
    train,
    trainable_parameters,
)

from conftest import tiny_datasets, tiny_model

DEPTH, IR = ModalityKind.DEPTH, ModalityKind.IR


def flat_samples(datasets, domains=None):
    return [s for d in (domains or datasets) for s in datasets[d]]


def train_config(**kw):
    base = dict(lr=1e-3, weight_decay=1e-3, epochs=3, batch_size=16, seed=5)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def small_run():
    datasets = tiny_datasets(seed=1, n=10, n_domains=2)
    model = tiny_model(seed=2, depth=2)
    result, opt = train(model, flat_samples(datasets), train_config(epochs=4))
    return datasets, model, result, opt


class TestAdamW:
    def test_matches_torch_reference_updates(self):
        # same decoupled rule as torch.optim.AdamW; trajectories must agree
        gen = torch.Generator().manual_seed(6)
        p_mine = torch.nn.Parameter(torch.randn(4, 3, generator=gen, dtype=torch.float64))
        p_ref = torch.nn.Parameter(p_mine.detach().clone())
        mine = AdamW([("p", p_mine)], lr=0.01, weight_decay=0.02)
        ref = torch.optim.AdamW([p_ref], lr=0.01, weight_decay=0.02,
                                betas=(0.9, 0.999), eps=1e-8)
        target = torch.randn(4, 3, generator=gen, dtype=torch.float64)
        for _ in range(25):
            for p, opt in ((p_mine, mine), (p_ref, ref)):
                opt.zero_grad()
                loss = ((p - target) ** 2).sum()
                loss.backward()
                opt.step()
        assert (p_mine - p_ref).abs().max().item() < 1e-12

    def test_clip_global_norm(self):
        p = torch.nn.Parameter(torch.zeros(3, dtype=torch.float64))
        p.grad = torch.tensor([3.0, 4.0, 0.0], dtype=torch.float64)
        norm = clip_global_norm([("p", p)], max_norm=1.0)
        assert abs(norm - 5.0) < 1e-12
        assert abs(p.grad.norm().item() - 1.0) < 1e-12

    def test_no_clip_below_threshold(self):
        p = torch.nn.Parameter(torch.zeros(2, dtype=torch.float64))
        p.grad = torch.tensor([0.3, 0.4], dtype=torch.float64)
        clip_global_norm([("p", p)], max_norm=1.0)
        assert abs(p.grad.norm().item() - 0.5) < 1e-12


class TestTrain:
    def test_loss_decreases_on_separable_data(self):
        datasets = tiny_datasets(seed=3, n=12, n_domains=3)
        model = tiny_model(seed=4, n_d=64, depth=2)
        cfg = train_config(epochs=10, batch_size=24, lr=1e-3)
        result, _ = train(model, flat_samples(datasets), cfg)
        assert len(result.history) >= 30
        first = np.mean([h.total for h in result.history[:10]])
        last = np.mean([h.total for h in result.history[-10:]])
        assert last < first

    def test_identical_seeds_identical_histories(self):
        datasets = tiny_datasets(seed=5, n=8, n_domains=2)
        samples = flat_samples(datasets)
        h1 = train(tiny_model(seed=6), samples, train_config())[0].history
        h2 = train(tiny_model(seed=6), samples, train_config())[0].history
        assert h1 == h2

    def test_zero_epochs_keeps_initialization(self):
        datasets = tiny_datasets(seed=7, n=6, n_domains=2)
        model = tiny_model(seed=8)
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        result, opt = train(model, flat_samples(datasets), train_config(epochs=0))
        assert result.history == []
        for n, p in model.named_parameters():
            assert torch.equal(before[n], p)

    def test_loss_decomposition_exact_per_step(self, small_run):
        _, _, result, _ = small_run
        for h in result.history:
            assert h.total == h.l_cls + h.l_align

    def test_frozen_encoder_untouched(self):
        datasets = tiny_datasets(seed=9, n=6, n_domains=2)
        model = tiny_model(seed=10)
        before = model.encoder.state_bytes()
        train(model, flat_samples(datasets), train_config(epochs=2))
        assert model.encoder.state_bytes() == before
        assert torch.equal(model.text_space.embeddings, model.text_space.embeddings)

    def test_backbone_not_in_optimizer(self, small_run):
        _, model, _, opt = small_run
        names = [n for n, _ in opt.named]
        assert all("encoder" not in n and "text" not in n for n in names)
        assert all(p.requires_grad for _, p in opt.named)

    def test_lambda_trains_only_when_flagged(self):
        datasets = tiny_datasets(seed=17, n=6, n_domains=2)
        samples = flat_samples(datasets)
        fixed = tiny_model(seed=18)
        train(fixed, samples, train_config(epochs=1))
        assert float(fixed.md2a.lam) == 0.5
        learnable = tiny_model(seed=18, learnable_lambda=True)
        train(learnable, samples, train_config(epochs=1))
        assert float(learnable.md2a.lam.detach()) != 0.5

    def test_nonfinite_loss_aborts_with_context(self):
        datasets = tiny_datasets(seed=11, n=6, n_domains=2)
        model = tiny_model(seed=12)
        with torch.no_grad():
            model.classifier.w.mul_(torch.inf)
        from mmda.core_types import NumericError
        with pytest.raises(NumericError, match="epoch 0"):
            train(model, flat_samples(datasets), train_config())


class TestEvaluate:
    def test_training_set_auc_after_convergence(self):
        datasets = tiny_datasets(seed=13, n=12, n_domains=3)
        model = tiny_model(seed=14, n_d=64, depth=2)
        samples = flat_samples(datasets)
        train(model, samples, train_config(epochs=8, batch_size=24))
        records = evaluate(model, samples, exit_layer=0)
        assert auc(records) > 0.95

    def test_deterministic(self, small_run):
        datasets, model, _, _ = small_run
        samples = flat_samples(datasets)
        r1 = evaluate(model, samples, exit_layer=1)
        r2 = evaluate(model, samples, exit_layer=1)
        assert r1 == r2

    def test_missing_mask_flags_records(self, small_run):
        datasets, model, _, _ = small_run
        samples = flat_samples(datasets)
        records = evaluate(model, samples, missing=(DEPTH, IR), exit_layer=0)
        assert all(r.modality_mask == frozenset({ModalityKind.RGB}) for r in records)

    def test_layer_list_has_depth_plus_one_entries(self, small_run):
        datasets, model, _, _ = small_run
        layers = evaluate_layers(model, flat_samples(datasets))
        assert len(layers) == model.depth + 1
        assert all(len(l) == len(flat_samples(datasets)) for l in layers)

    def test_multi_chunk_eval_deterministic(self, small_run):
        datasets, model, _, _ = small_run
        samples = flat_samples(datasets)
        small_chunks = evaluate(model, samples, exit_layer=0, batch_size=7)
        again = evaluate(model, samples, exit_layer=0, batch_size=7)
        assert small_chunks == again
        assert len(small_chunks) == len(samples)

    def test_bad_exit_layer_rejected(self, small_run):
        datasets, model, _, _ = small_run
        with pytest.raises(ValidationError):
            evaluate(model, flat_samples(datasets), exit_layer=9)


class TestCheckpoint:
    def test_save_load_save_byte_identical(self, small_run, tmp_path):
        _, model, result, opt = small_run
        blob1 = checkpoint_bytes(model, opt, config_hash="h", seed=5,
                                 epoch=4, step=result.steps)
        p = tmp_path / "ck.mmda"
        p.write_bytes(blob1)
        header, tensors = load_checkpoint(p)
        model2 = tiny_model(seed=99, depth=2)   # different init, same shape
        opt2 = AdamW(trainable_parameters(model2), lr=1e-3, weight_decay=1e-3)
        apply_checkpoint(model2, tensors, opt2, header["adamw_t"])
        blob2 = checkpoint_bytes(model2, opt2, config_hash="h", seed=5,
                                 epoch=4, step=result.steps)
        assert blob1 == blob2

    def test_shape_mismatch_rejected(self, small_run, tmp_path):
        _, model, result, opt = small_run
        p = save_checkpoint(tmp_path / "ck.mmda", model, opt, config_hash="h",
                            seed=5, epoch=4, step=result.steps)
        _, tensors = load_checkpoint(p)
        wrong = tiny_model(seed=1, n_d=64, depth=2)
        with pytest.raises(ValidationError):
            apply_checkpoint(wrong, tensors)

    def test_resume_reproduces_uninterrupted_run(self):
        datasets = tiny_datasets(seed=15, n=8, n_domains=2)
        samples = flat_samples(datasets)

        straight_model = tiny_model(seed=16)
        straight, s_opt = train(straight_model, samples, train_config(epochs=4))

        resumed_model = tiny_model(seed=16)
        first, r_opt = train(resumed_model, samples, train_config(epochs=2))
        blob = checkpoint_bytes(resumed_model, r_opt, config_hash="h", seed=5,
                                epoch=2, step=first.steps)

        fresh = tiny_model(seed=16)
        f_opt = AdamW(trainable_parameters(fresh), lr=1e-3, weight_decay=1e-3)
        header, tensors = load_checkpoint_bytes(blob)
        apply_checkpoint(fresh, tensors, f_opt, header["adamw_t"])
        second, f_opt = train(
            fresh, samples, train_config(epochs=4),
            start_epoch=header["epoch"], start_step=header["step"], optimizer=f_opt,
        )

        assert first.history + second.history == straight.history
        for (n1, p1), (n2, p2) in zip(
            straight_model.named_parameters(), fresh.named_parameters()
        ):
            assert n1 == n2
            assert torch.equal(p1, p2)
        straight_blob = checkpoint_bytes(straight_model, s_opt, config_hash="h",
                                         seed=5, epoch=4, step=straight.steps)
        final_blob = checkpoint_bytes(fresh, f_opt, config_hash="h",
                                      seed=5, epoch=4, step=second.steps)
        assert straight_blob == final_blob


def load_checkpoint_bytes(blob: bytes):
    import json
    import struct

    from mmda.core_types import tensor_from_bytes

    (hlen,) = struct.unpack_from("<I", blob, 8)
    header = json.loads(blob[12 : 12 + hlen].decode())
    offset = 12 + hlen
    tensors = {}
    for name in header["tensors"]:
        arr, offset = tensor_from_bytes(blob, offset)
        tensors[name] = arr
    return header, tensors
