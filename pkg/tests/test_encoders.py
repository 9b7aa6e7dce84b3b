import numpy as np
import pytest
import torch

from advgen.encoders import (SurrogateEnsemble, encode, load_external_encoder, make_toy_encoder)
from advgen.errors import ConfigError, DimensionError, InvalidInputError, LoadError


def rand_batch(rng, n, hw=32, dtype=torch.float32):
    return torch.tensor(rng.random((n, 3, hw, hw)), dtype=dtype)


class TestToyEncoder:
    def test_rows_unit_norm(self):
        rng = np.random.default_rng(0)
        enc = make_toy_encoder(7)
        for _ in range(5):
            z = encode(enc, rand_batch(rng, 6))
            np.testing.assert_allclose(z.norm(dim=1).numpy(), 1.0, atol=1e-6)

    def test_identical_inputs_identical_rows(self):
        rng = np.random.default_rng(1)
        x = rand_batch(rng, 1)
        batch = torch.cat([x, x], dim=0)
        z = encode(make_toy_encoder(7), batch)
        assert torch.equal(z[0], z[1])

    def test_same_seed_same_outputs(self):
        rng = np.random.default_rng(2)
        x = rand_batch(rng, 4)
        za = encode(make_toy_encoder(9), x)
        zb = encode(make_toy_encoder(9), x)
        assert torch.equal(za, zb)

    def test_different_seeds_differ(self):
        rng = np.random.default_rng(3)
        enc_a = make_toy_encoder(1, input_shape=(8, 8, 3), embed_dim=8)
        enc_b = make_toy_encoder(2, input_shape=(8, 8, 3), embed_dim=8)
        collisions = 0
        for _ in range(100):
            x = rand_batch(rng, 2, hw=8)
            if torch.allclose(encode(enc_a, x), encode(enc_b, x)):
                collisions += 1
        assert collisions == 0

    def test_zero_image_finite_unit(self):
        z = encode(make_toy_encoder(7), torch.zeros(2, 3, 32, 32))
        assert torch.isfinite(z).all()
        np.testing.assert_allclose(z.norm(dim=1).numpy(), 1.0, atol=1e-6)

    def test_row_independence_under_permutation(self):
        rng = np.random.default_rng(4)
        enc = make_toy_encoder(7, dtype=torch.float64)
        x = rand_batch(rng, 8, dtype=torch.float64)
        perm = torch.tensor(rng.permutation(8))
        z = encode(enc, x)
        zp = encode(enc, x[perm])
        np.testing.assert_allclose(zp.numpy(), z[perm].numpy(), atol=1e-12)

    def test_matches_numpy_reference_forward(self):
        # independent reimplementation with raw matrix math, float64
        rng = np.random.default_rng(5)
        enc = make_toy_encoder(11, dtype=torch.float64)
        x = rng.random((8, 3, 32, 32))
        z = encode(enc, torch.tensor(x, dtype=torch.float64)).numpy()

        wc = enc.conv.weight.detach().numpy().reshape(8, 48)  # (out, in*4*4)
        bc = enc.conv.bias.detach().numpy()
        wl = enc.lin.weight.detach().numpy()
        bl = enc.lin.bias.detach().numpy()
        x2 = x * 2.0 - 1.0
        patches = x2.reshape(8, 3, 8, 4, 8, 4).transpose(0, 2, 4, 1, 3, 5).reshape(8, 64, 48)
        conv = patches @ wc.T + bc  # (n, 64, out)
        feat = np.tanh(conv).reshape(8, 8, 8, 8).transpose(0, 3, 1, 2).reshape(8, -1)
        v = feat @ wl.T + bl
        ref = v / np.linalg.norm(v, axis=1, keepdims=True)
        np.testing.assert_allclose(z, ref, atol=1e-12)

    def test_input_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        enc = make_toy_encoder(3, input_shape=(8, 8, 3), embed_dim=8, dtype=torch.float64)
        x = torch.tensor(rng.random((2, 3, 8, 8)), dtype=torch.float64, requires_grad=True)
        w = torch.tensor(rng.normal(size=(2, 8)), dtype=torch.float64)
        (encode(enc, x) * w).sum().backward()
        analytic = x.grad.detach().numpy()

        h = 1e-6
        fd = np.zeros_like(analytic)
        xf = x.detach().clone()
        for idx in np.ndindex(*xf.shape):
            for sign in (1.0, -1.0):
                xp = xf.clone()
                xp[idx] += sign * h
                val = float((encode(enc, xp) * w).sum())
                fd[idx] += sign * val / (2 * h)
        rel = np.linalg.norm(analytic - fd) / np.linalg.norm(fd)
        assert rel < 1e-4, f"relative gradient error {rel:.2e}"

    def test_shape_and_nan_validation(self):
        enc = make_toy_encoder(7)
        with pytest.raises(DimensionError):
            encode(enc, torch.rand(2, 3, 16, 16))  # wrong spatial size
        with pytest.raises(DimensionError):
            encode(enc, torch.rand(2, 3, 32))  # not 4-d
        bad = torch.rand(2, 3, 32, 32)
        bad[0, 0, 0, 0] = float("nan")
        with pytest.raises(InvalidInputError):
            encode(enc, bad)

    def test_parameter_validation(self):
        with pytest.raises(ConfigError):
            make_toy_encoder(0, embed_dim=1)
        with pytest.raises(ConfigError):
            make_toy_encoder(0, input_shape=(30, 32, 3))

    def test_weights_frozen(self):
        enc = make_toy_encoder(7)
        assert all(not p.requires_grad for p in enc.parameters())


def _script_linear_encoder(tmp_path, in_hw=8, dim=16, scale=3.7):
    class Flat(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.lin = torch.nn.Linear(3 * in_hw * in_hw, dim)
            self.scale = float(scale)

        def forward(self, x):
            return self.lin(x.flatten(1)) * self.scale  # deliberately not unit-norm

    torch.manual_seed(0)
    m = Flat()
    path = tmp_path / "enc.pt"
    torch.jit.script(m).save(str(path))
    return path


class TestExternalAdapter:
    def test_load_and_renormalize(self, tmp_path):
        weights = _script_linear_encoder(tmp_path)
        cfg = tmp_path / "enc.yaml"
        cfg.write_text(
            f"name: tiny\nweights: {weights.name}\ninput_shape: [8, 8, 3]\nembed_dim: 16\n")
        enc = load_external_encoder(cfg)
        z = encode(enc, torch.rand(4, 3, 8, 8))
        np.testing.assert_allclose(z.norm(dim=1).numpy(), 1.0, atol=1e-6)

    def test_missing_weights_is_load_error(self, tmp_path):
        cfg = tmp_path / "enc.yaml"
        cfg.write_text("name: x\nweights: nowhere.pt\ninput_shape: [8, 8, 3]\nembed_dim: 4\n")
        with pytest.raises(LoadError):
            load_external_encoder(cfg)

    def test_missing_config_is_load_error(self, tmp_path):
        with pytest.raises(LoadError):
            load_external_encoder(tmp_path / "missing.yaml")

    def test_undeclared_embed_dim_is_config_error(self, tmp_path):
        weights = _script_linear_encoder(tmp_path)
        cfg = tmp_path / "enc.yaml"
        cfg.write_text(f"name: x\nweights: {weights.name}\ninput_shape: [8, 8, 3]\n")
        with pytest.raises(ConfigError):
            load_external_encoder(cfg)

    def test_wrong_declared_dim_caught_at_load(self, tmp_path):
        weights = _script_linear_encoder(tmp_path, dim=16)
        cfg = tmp_path / "enc.yaml"
        cfg.write_text(f"name: x\nweights: {weights.name}\ninput_shape: [8, 8, 3]\nembed_dim: 99\n")
        with pytest.raises(ConfigError):
            load_external_encoder(cfg)


class TestSurrogateEnsemble:
    def test_uniform_default_weights(self):
        e = SurrogateEnsemble(make_toy_encoder(1, input_shape=(8, 8, 3), embed_dim=4),
                              (make_toy_encoder(2, input_shape=(8, 8, 3), embed_dim=4),))
        np.testing.assert_allclose(e.weights, [0.5, 0.5])
        assert len(e.members) == 2

    def test_weights_must_sum_to_one(self):
        enc = make_toy_encoder(1, input_shape=(8, 8, 3), embed_dim=4)
        with pytest.raises(ConfigError):
            SurrogateEnsemble(enc, (), weights=(0.9,))
        with pytest.raises(ConfigError):
            SurrogateEnsemble(enc, (), weights=(0.5, 0.5))
        with pytest.raises(ConfigError):
            SurrogateEnsemble(enc, (make_toy_encoder(2, input_shape=(8, 8, 3), embed_dim=4),),
                              weights=(1.5, -0.5))
