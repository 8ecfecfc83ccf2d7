import numpy as np
import pytest
import torch

from phrasevae import evaluation
from phrasevae.evaluation import (
    EvaluationError,
    emit_curves,
    epochs_to_threshold,
    reconstruction_accuracy,
    disentanglement_probe,
)
from phrasevae.model import FlatModel
from phrasevae.training import RunRecord

from conftest import make_phrase
import random


def probe_melodies(n=6, root=55):
    rng = random.Random(0)
    return torch.from_numpy(np.stack([make_phrase(rng, 8, root=root) for _ in range(n)])).long()


class TestAccuracy:
    def test_brute_force_oracle(self):
        # 4-step toy batch scored against an explicit per-token count
        model = FlatModel(2, d=8, hidden=32)
        mels = probe_melodies(3)[:, :32]
        acc = reconstruction_accuracy(model, mels)
        from phrasevae.corpus import derive_rhythm
        from phrasevae.model import LatentPair

        hits_m = hits_r = total = 0
        with torch.no_grad():
            for mel in mels:
                rhy = torch.from_numpy(derive_rhythm(mel.numpy()))[None]
                post = model.encode(mel[None])
                ml, rl = model.decode(
                    LatentPair(post.mean_p, post.mean_r), teacher_melody=mel[None], teacher_rhythm=rhy
                )
                for t in range(32):
                    hits_m += int(ml[0, t].argmax()) == int(mel[t])
                    hits_r += int(rl[0, t].argmax()) == int(rhy[0, t])
                    total += 1
        assert acc.recon_acc == pytest.approx(hits_m / total)
        assert acc.rhythm_acc == pytest.approx(hits_r / total)
        assert acc.n_steps == total

    def test_scale_mismatch(self):
        model = FlatModel(2, d=8, hidden=32)
        with pytest.raises(EvaluationError):
            reconstruction_accuracy(model, probe_melodies(2))

    def test_bounds(self):
        model = FlatModel(8, d=8, hidden=32)
        acc = reconstruction_accuracy(model, probe_melodies(4))
        assert 0.0 <= acc.recon_acc <= 1.0 and 0.0 <= acc.rhythm_acc <= 1.0


class TestProbe:
    def test_identity_shift_is_zero(self):
        model = FlatModel(8, d=8, hidden=32)
        probe = disentanglement_probe(model, probe_melodies(), semitones=[0])
        assert probe.delta_zp == [0.0] and probe.delta_zr == [0.0]

    def test_smoke_all_shifts(self):
        model = FlatModel(8, d=8, hidden=32)
        probe = disentanglement_probe(model, probe_melodies())
        assert probe.semitones == list(range(1, 13))
        assert all(np.isfinite(probe.delta_zp)) and all(np.isfinite(probe.delta_zr))
        assert all(d >= 0 for d in probe.delta_zp + probe.delta_zr)

    def test_order_invariant(self):
        model = FlatModel(8, d=8, hidden=32)
        mels = probe_melodies()
        a = disentanglement_probe(model, mels)
        b = disentanglement_probe(model, mels[torch.randperm(len(mels), generator=torch.Generator().manual_seed(0))])
        assert np.allclose(a.delta_zp, b.delta_zp, atol=1e-5)

    def test_overflow_filtering(self):
        model = FlatModel(8, d=8, hidden=32)
        high = probe_melodies(3, root=120)  # cannot go up 12 semitones
        low = probe_melodies(3, root=55)
        probe = disentanglement_probe(model, torch.cat([high, low]))
        assert probe.n_excluded == 3 and probe.n_probe == 3

    def test_all_filtered(self):
        model = FlatModel(8, d=8, hidden=32)
        with pytest.raises(EvaluationError):
            disentanglement_probe(model, probe_melodies(2, root=124))


class TestCurves:
    def _records(self):
        return {
            "full": RunRecord("x", 0, "h", epochs=[
                {"epoch": 0, "recon_acc": 0.3, "rhythm_acc": 0.5},
                {"epoch": 1, "recon_acc": 0.9, "rhythm_acc": 0.95},
            ]),
            "no_cl": RunRecord("x", 0, "h", epochs=[
                {"epoch": 0, "recon_acc": 0.2, "rhythm_acc": 0.4},
                {"epoch": 2, "recon_acc": 0.6, "rhythm_acc": 0.7},
            ]),
        }

    def test_table_shape(self):
        table = emit_curves(self._records())
        lines = table.strip().splitlines()
        assert lines[0].split("\t") == ["variant", "epoch", "recon_acc", "rhythm_acc"]
        assert len(lines) == 5

    def test_gaps_preserved(self):
        table = emit_curves(self._records())
        no_cl_epochs = [line.split("\t")[1] for line in table.strip().splitlines() if line.startswith("no_cl")]
        assert no_cl_epochs == ["0", "2"]  # the missing epoch 1 is not interpolated

    def test_threshold_epoch(self):
        records = self._records()
        assert epochs_to_threshold(records["full"], 0.8) == 1
        assert epochs_to_threshold(records["no_cl"], 0.8) is None
