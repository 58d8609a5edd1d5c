import math

import numpy as np
import pytest

from ltu import numerics as nx
from ltu import synthenv as se
from ltu.corpus import encode_ct, encode_sft
from ltu.model import CheckpointError, ConfigError, ModelConfig, forward, init_model
from ltu.trainer import (CT, SFT, TrainConfig, TrainingError, VocabMismatchError, ct_batch, ct_loss,
                         extend_lineage, initial_params, lineage_stage, load_checkpoint, lr_at,
                         pack_documents, reference_clm_loss, run_phase, save_checkpoint, sft_batch,
                         sft_loss)


def docs_for(spec, vocab, n, seed=0, max_len=64):
    trajs = se.sample_dataset(spec, spec.category_names, n, np.random.default_rng(seed))
    return trajs, [encode_ct(t, vocab, max_len) for t in trajs]


def model_for(vocab, **kw):
    base = dict(vocab_size=len(vocab), d_model=16, n_heads=2, n_layers=1, max_seq_len=64)
    base.update(kw)
    return init_model(ModelConfig(**base))


class TestConfig:
    def test_sft_needs_init_or_fresh(self):
        with pytest.raises(ConfigError):
            TrainConfig(phase=SFT)
        TrainConfig(phase=SFT, fresh_init=True)
        TrainConfig(phase=SFT, init_checkpoint="x.ltu")

    def test_rejects_bad_values(self):
        with pytest.raises(ConfigError):
            TrainConfig(steps=0)
        with pytest.raises(ConfigError):
            TrainConfig(phase="RL")
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"steps": 3, "momentum": 0.9})

    def test_warmup_then_constant(self):
        cfg = TrainConfig(steps=100, lr=1.0)
        assert [lr_at(s, cfg) for s in range(6)] == [0.2, 0.4, 0.6, 0.8, 1.0, 1.0]
        assert lr_at(99, cfg) == 1.0


class TestPacking:
    def test_never_splits_documents(self):
        docs = [np.arange(1, n + 1) for n in (3, 4, 2, 5, 1)]
        rows = pack_documents(docs, 6, pad_id=0)
        assert rows.shape == (3, 6)
        flat = [r[r != 0].tolist() for r in rows]
        assert flat == [[1, 2, 3], [1, 2, 3, 4, 1, 2], [1, 2, 3, 4, 5, 1]]

    def test_too_long(self):
        with pytest.raises(ValueError):
            pack_documents([np.ones(8, int)], 6, 0)

    def test_ct_mask_ignores_padding(self):
        rows = np.array([[2, 5, 3, 0, 0]])
        x, y, m = ct_batch(rows, 0)
        assert x.tolist() == [[2, 5, 3, 0]]
        assert y.tolist() == [[5, 3, 0, 0]]
        assert m.tolist() == [[1, 1, 0, 0]]


class TestLosses:
    def test_batched_ct_matches_scalar_reference(self, ppc_spec, vocab):
        p = model_for(vocab, init_scale=0.2)
        _, docs = docs_for(ppc_spec, vocab, 12)
        rows = pack_documents(docs, 65, vocab.pad_id)
        x, y, m = ct_batch(rows, vocab.pad_id)
        with nx.no_grad():
            batched = ct_loss(p, x, y, m).item()
        assert abs(batched - reference_clm_loss(p, x, y, m)) < 1e-10

    def test_sft_loss_equals_full_masked_loss(self, ppc_spec, vocab):
        p = model_for(vocab, init_scale=0.2)
        trajs, _ = docs_for(ppc_spec, vocab, 5)
        batch = sft_batch([encode_sft(t, vocab) for t in trajs], vocab.pad_id)
        with nx.no_grad():
            full = nx.cross_entropy_masked(forward(p, batch[0]), batch[1], batch[2]).item()
            assert sft_loss(p, *batch).item() == pytest.approx(full, abs=1e-12)

    def test_masked_target_perturbation_changes_nothing(self, ppc_spec, vocab):
        p = model_for(vocab, init_scale=0.2)
        trajs, _ = docs_for(ppc_spec, vocab, 4)
        x, y, m = sft_batch([encode_sft(t, vocab) for t in trajs], vocab.pad_id)

        def loss_and_grads(targets):
            p.zero_grad()
            loss = sft_loss(p, x, targets, m)
            nx.backward(loss)
            return loss.item(), [g.copy() for g in p.grads()]

        l0, g0 = loss_and_grads(y)
        y2 = y.copy()
        y2[m == 0] = (y2[m == 0] + 3) % len(vocab)
        l1, g1 = loss_and_grads(y2)
        assert l0 == l1
        assert all(np.array_equal(a, b) for a, b in zip(g0, g1))


class TestRunPhase:
    def test_step0_loss_near_log_v(self, ppc_spec, vocab):
        _, docs = docs_for(ppc_spec, vocab, 50)
        res = run_phase(model_for(vocab), docs, TrainConfig(steps=1, batch_size=4), vocab.pad_id, len(vocab))
        assert abs(res.losses[0] - math.log(len(vocab))) < 0.1 * math.log(len(vocab))

    def test_ct_descends(self, ppc_spec, vocab):
        _, docs = docs_for(ppc_spec, vocab, 200)
        cfg = TrainConfig(steps=300, batch_size=8, lr=3e-3)
        res = run_phase(model_for(vocab, d_model=32), docs, cfg, vocab.pad_id, len(vocab))
        assert np.mean(res.losses[-20:]) < res.losses[0] - 0.5

    def test_bitwise_reproducible(self, ppc_spec, vocab):
        _, docs = docs_for(ppc_spec, vocab, 40)
        cfg = TrainConfig(steps=15, batch_size=4, seed=3)
        a = run_phase(model_for(vocab), docs, cfg, vocab.pad_id)
        b = run_phase(model_for(vocab), docs, cfg, vocab.pad_id)
        assert a.losses == b.losses
        assert a.params.flat().tobytes() == b.params.flat().tobytes()
        assert a.provenance == b.provenance

    def test_sft_phase_runs(self, ppc_spec, vocab):
        trajs, _ = docs_for(ppc_spec, vocab, 30)
        cfg = TrainConfig(phase=SFT, steps=5, batch_size=4, fresh_init=True)
        res = run_phase(model_for(vocab), [encode_sft(t, vocab) for t in trajs], cfg, vocab.pad_id)
        assert len(res.losses) == 5 and res.provenance["phase"] == SFT

    def test_errors(self, ppc_spec, vocab):
        _, docs = docs_for(ppc_spec, vocab, 5)
        with pytest.raises(TrainingError):
            run_phase(model_for(vocab), [], TrainConfig(steps=1))
        with pytest.raises(VocabMismatchError):
            run_phase(model_for(vocab), docs, TrainConfig(steps=1), vocab_size=len(vocab) + 1)
        small = init_model(ModelConfig(vocab_size=10, d_model=8, n_heads=2, n_layers=1, max_seq_len=64))
        with pytest.raises(VocabMismatchError):
            run_phase(small, docs, TrainConfig(steps=1))

    def test_non_finite_loss_reports_step(self, ppc_spec, vocab):
        _, docs = docs_for(ppc_spec, vocab, 20)
        p = model_for(vocab)

        def poison(step, loss):
            if step == 2:
                p["lnf.g"].data[:] = np.nan
        with pytest.raises(TrainingError, match="step 3"):
            run_phase(p, docs, TrainConfig(steps=6, batch_size=2), vocab.pad_id, on_step=poison)


class TestCheckpoints:
    def test_round_trip_and_sidecar(self, tmp_path, vocab):
        p = model_for(vocab, init_seed=4)
        prov = {"phase": CT, "lineage": "CT:ppc-seed4", "seed": 4, "steps": 10,
                "data_fingerprint": "abc", "final_loss": 1.25}
        save_checkpoint(p, tmp_path / "c.ltu", prov)
        q, back = load_checkpoint(tmp_path / "c.ltu", vocab_size=len(vocab))
        assert q.flat().tobytes() == p.flat().tobytes()
        assert back == prov

    def test_wrong_vocab(self, tmp_path, vocab):
        save_checkpoint(model_for(vocab), tmp_path / "c.ltu")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c.ltu", vocab_size=len(vocab) - 1)

    def test_lineage_of_ltu_arm(self, tmp_path, vocab):
        ct_line = lineage_stage(CT, "seo", 7)
        save_checkpoint(model_for(vocab), tmp_path / "ct.ltu", {"lineage": ct_line})
        cfg = TrainConfig(phase=SFT, init_checkpoint=str(tmp_path / "ct.ltu"))
        _, parent = initial_params(cfg, None, len(vocab))
        line = extend_lineage(parent, lineage_stage(SFT, "ppc", 3))
        assert line == "CT:seo-seed7 → SFT:ppc-seed3"
        stages = line.split(" → ")
        assert [s.split(":")[0] for s in stages].count(CT) == 1
        assert [s.split(":")[0] for s in stages].count(SFT) == 1
