import math

import numpy as np
import pytest
import torch

from phrasevae.generation import (
    GenerationError,
    interpolate_rhythm,
    slerp,
    style_transfer,
    theme_variation,
)
from phrasevae.model import FlatModel, HierModel, LatentPair

from conftest import make_phrase
import random


@pytest.fixture
def phrases():
    rng = random.Random(3)
    return [torch.from_numpy(make_phrase(rng, 8)).long() for _ in range(2)]


@pytest.fixture
def model():
    return HierModel(d=8, hidden=32, expander_hidden=16)


class TestSlerp:
    def test_endpoints_exact(self):
        a, b = torch.randn(6), torch.randn(6)
        assert torch.equal(slerp(a, b, 0.0), a)
        assert torch.equal(slerp(a, b, 1.0), b)

    def test_orthogonal_midpoint(self):
        a = torch.tensor([1.0, 0.0])
        b = torch.tensor([0.0, 1.0])
        mid = slerp(a, b, 0.5)
        expected = (a + b) / math.sqrt(2)
        assert torch.allclose(mid, expected, atol=1e-6)
        assert float(mid.norm()) == pytest.approx(1.0, abs=1e-6)

    def test_colinear_degenerate(self):
        a = torch.randn(5)
        for t in (0.25, 0.5, 0.9):
            assert torch.allclose(slerp(a, a.clone(), t), a, atol=1e-6)

    def test_unit_inputs_stay_unit(self):
        a = torch.nn.functional.normalize(torch.randn(8), dim=0)
        b = torch.nn.functional.normalize(torch.randn(8), dim=0)
        for t in np.linspace(0, 1, 7):
            assert float(slerp(a, b, float(t)).norm()) == pytest.approx(1.0, abs=1e-5)

    def test_zero_vector_rejected(self):
        with pytest.raises(GenerationError):
            slerp(torch.zeros(4), torch.randn(4), 0.5)


class TestStyleTransfer:
    def test_self_swap_identity(self, phrases, model):
        a = phrases[0]
        piece_c, piece_d = style_transfer(a, a, model)
        post = model.encode(a[None])
        recon = model.decode(LatentPair(post.mean_p, post.mean_r))[2][0]
        assert torch.equal(piece_c, recon)
        assert torch.equal(piece_d, recon)

    def test_output_length(self, phrases, model):
        piece_c, piece_d = style_transfer(phrases[0], phrases[1], model)
        assert piece_c.shape == (128,) and piece_d.shape == (128,)

    def test_works_on_flat_model(self, phrases):
        flat = FlatModel(8, d=8, hidden=32)
        piece_c, piece_d = style_transfer(phrases[0], phrases[1], flat)
        assert piece_c.shape == (128,)


class TestInterpolate:
    def test_endpoint_matches_reconstruction(self, phrases, model):
        pieces = interpolate_rhythm(phrases[0], phrases[1], [0.0], model)
        post = model.encode(phrases[0][None])
        recon = model.decode(LatentPair(post.mean_p, post.mean_r))[2][0]
        assert torch.equal(pieces[0], recon)

    def test_count_and_length(self, phrases, model):
        pieces = interpolate_rhythm(phrases[0], phrases[1], [0.0, 0.25, 0.5, 0.75, 1.0], model)
        assert len(pieces) == 5
        assert all(p.shape == (128,) for p in pieces)

    def test_bad_weight(self, phrases, model):
        with pytest.raises(GenerationError):
            interpolate_rhythm(phrases[0], phrases[1], [1.5], model)


class TestVariation:
    def test_sigma_zero_is_reconstruction(self, phrases, model):
        pieces = theme_variation(phrases[0], 0.0, 2, seed=1, model=model)
        post = model.encode(phrases[0][None])
        recon = model.decode(LatentPair(post.mean_p, post.mean_r))[2][0]
        assert all(torch.equal(p, recon) for p in pieces)

    def test_seed_reproducible(self, phrases, model):
        a = theme_variation(phrases[0], 0.8, 3, seed=9, model=model)
        b = theme_variation(phrases[0], 0.8, 3, seed=9, model=model)
        assert all(torch.equal(x, y) for x, y in zip(a, b))

    def test_sigma_grid(self, phrases, model):
        for sigma in (0.1, 0.5, 1.0):
            pieces = theme_variation(phrases[0], sigma, 2, seed=0, model=model)
            assert len(pieces) == 2 and all(p.shape == (128,) for p in pieces)

    def test_negative_sigma_rejected(self, phrases, model):
        with pytest.raises(GenerationError):
            theme_variation(phrases[0], -0.1, 1, seed=0, model=model)
