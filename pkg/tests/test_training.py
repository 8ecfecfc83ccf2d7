import math

import pytest
import torch

from phrasevae import training
from phrasevae.config import load_config
from phrasevae.model import load_checkpoint, read_checkpoint_header
from phrasevae.training import (
    DependencyError,
    TrainingError,
    lr_at,
    plan_for_phase,
    run_phase,
    run_pipeline,
)

from conftest import make_cache

TINY = [
    "model.d=8",
    "model.hidden=32",
    "model.expander_hidden=16",
    "train.eval_on=train",
    "train.lr_horizon_steps=200",
] + [
    f"phases.{ph}.{k}={v}"
    for ph in ("pretrain2", "pretrain4", "pretrain8", "finetune1", "finetune2")
    for k, v in (("batch_size", 16), ("max_epochs", 2), ("K", 8))
]


@pytest.fixture(scope="module")
def tiny_cache():
    return make_cache(n_songs=8, seed=2)


@pytest.fixture
def tiny_cfg():
    return load_config(overrides=TINY)


class TestPlans:
    def test_finetune1_freezes_encoder(self, tiny_cfg):
        plan = plan_for_phase(tiny_cfg, "finetune1")
        assert plan.frozen_groups == ["encoder"]
        assert "infonce" in plan.loss_terms
        assert "kl" not in plan.loss_terms

    def test_finetune2_terms(self, tiny_cfg):
        plan = plan_for_phase(tiny_cfg, "finetune2")
        assert plan.frozen_groups == []
        assert {"infonce", "structured_infonce", "kl_phrase"} <= plan.loss_terms

    def test_pretrain8_has_structured(self, tiny_cfg):
        plan = plan_for_phase(tiny_cfg, "pretrain8")
        assert "structured_infonce" in plan.loss_terms
        assert "infonce" not in plan.loss_terms

    def test_no_contrastive_strips_terms(self, tiny_cfg):
        plan = plan_for_phase(tiny_cfg, "finetune2", no_contrastive=True)
        assert not plan.loss_terms & {"infonce", "structured_infonce"}
        assert "kl_phrase" in plan.loss_terms

    def test_shipped_defaults(self):
        cfg = load_config()
        pre = plan_for_phase(cfg, "pretrain8")
        assert pre.batch_size == 128 and pre.K == 512 and pre.tau == 1.0
        fin = plan_for_phase(cfg, "finetune1")
        assert fin.batch_size == 64 and fin.K == 256 and fin.max_epochs == 25
        assert plan_for_phase(cfg, "finetune2").beta == 0.1

    def test_unknown_phase(self, tiny_cfg):
        with pytest.raises(TrainingError):
            plan_for_phase(tiny_cfg, "pretrain16")


class TestLrSchedule:
    def test_endpoints(self, tiny_cfg):
        plan = plan_for_phase(tiny_cfg, "pretrain2")
        assert lr_at(plan, 0) == pytest.approx(1e-3)
        assert lr_at(plan, plan.lr_horizon_steps) == pytest.approx(1e-5)
        assert lr_at(plan, plan.lr_horizon_steps * 10) == pytest.approx(1e-5)

    def test_geometric_midpoint(self, tiny_cfg):
        plan = plan_for_phase(tiny_cfg, "pretrain2")
        assert lr_at(plan, plan.lr_horizon_steps // 2) == pytest.approx(1e-4, rel=1e-6)

    def test_monotone(self, tiny_cfg):
        plan = plan_for_phase(tiny_cfg, "pretrain2")
        rates = [lr_at(plan, s) for s in range(0, plan.lr_horizon_steps + 10, 7)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))
        assert all(1e-5 <= r <= 1e-3 for r in rates)


class TestPhases:
    def test_missing_prerequisite(self, tiny_cfg, tiny_cache, tmp_path):
        with pytest.raises(DependencyError):
            run_phase(tiny_cfg, "pretrain4", tiny_cache, tmp_path)

    def test_pipeline_order_and_resume(self, tiny_cfg, tiny_cache, tmp_path):
        records, final = run_pipeline(tiny_cfg, tiny_cache, tmp_path)
        assert list(records) == ["pretrain2", "pretrain4", "pretrain8", "finetune1", "finetune2"]
        assert final.exists()
        for phase in records:
            assert read_checkpoint_header(tmp_path / f"{phase}.pt")["stage"] == phase
        # resume: nothing retrains, records are reloaded
        records2, _ = run_pipeline(tiny_cfg, tiny_cache, tmp_path)
        assert [len(r.epochs) for r in records2.values()] == [len(r.epochs) for r in records.values()]

    def test_finetune1_encoder_frozen_every_epoch(self, tiny_cfg, tiny_cache, tmp_path):
        for phase in ("pretrain2", "pretrain4", "pretrain8"):
            run_phase(tiny_cfg, phase, tiny_cache, tmp_path)
        pre8, _ = load_checkpoint(tmp_path / "pretrain8.pt")
        from phrasevae.model import group_hash

        encoder_hash = group_hash(pre8, "encoder")
        record, _ = run_phase(tiny_cfg, "finetune1", tiny_cache, tmp_path)
        hashes = {e["encoder_hash"] for e in record.epochs}
        assert hashes == {encoder_hash}

    def test_no_fixed_skips_finetune1(self, tiny_cfg, tiny_cache, tmp_path):
        tiny_cfg["ablation"]["no_fixed"] = True
        records, final = run_pipeline(tiny_cfg, tiny_cache, tmp_path)
        assert "finetune1" not in records
        assert final.name == "finetune2.pt"

    def test_metrics_log_written(self, tiny_cfg, tiny_cache, tmp_path):
        record, _ = run_phase(tiny_cfg, "pretrain2", tiny_cache, tmp_path)
        lines = (tmp_path / "pretrain2.metrics.jsonl").read_text().splitlines()
        assert len(lines) == len(record.epochs)
        import json

        entry = json.loads(lines[0])
        assert {"epoch", "recon_acc", "rhythm_acc", "recon_ce", "rhythm_ce"} <= set(entry)


class TestReproducibility:
    def test_same_seed_same_first_epoch(self, tiny_cfg, tiny_cache, tmp_path):
        cfg = load_config(overrides=TINY + ["phases.pretrain2.max_epochs=1"])
        rec_a, _ = run_phase(cfg, "pretrain2", tiny_cache, tmp_path / "a")
        rec_b, _ = run_phase(cfg, "pretrain2", tiny_cache, tmp_path / "b")
        assert rec_a.epochs[0]["recon_ce"] == rec_b.epochs[0]["recon_ce"]
        assert rec_a.epochs[0]["recon_acc"] == rec_b.epochs[0]["recon_acc"]

    def test_zero_weight_term_leaves_total(self, tiny_cfg, tiny_cache, tmp_path):
        # adding the phrase KL with beta=0 must not change the loss value
        cfg0 = load_config(overrides=TINY + ["train.kl_weight=0"])
        plan = plan_for_phase(cfg0, "pretrain2")
        assert "kl" in plan.loss_terms
        rec, _ = run_phase(cfg0, "pretrain2", tiny_cache, tmp_path / "kl0")
        entry = rec.epochs[0]
        assert entry["total"] == pytest.approx(entry["recon_ce"] + entry["rhythm_ce"], abs=1e-7)


def test_nan_losses_abort(tiny_cfg, tiny_cache, tmp_path, monkeypatch):
    import phrasevae.training as tr

    def bad_loss(*args, **kwargs):
        return {"total": torch.tensor(float("nan"), requires_grad=True)}

    monkeypatch.setattr(tr, "_loss_step", bad_loss)
    with pytest.raises(TrainingError, match="non-finite"):
        run_phase(tiny_cfg, "pretrain2", tiny_cache, tmp_path)
