import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dpcc.entropy_model import (
    FactorizedPrior,
    build_cdf_tables,
    decode_features,
    encode_features,
    quantize,
    quantize_pmf,
)
from dpcc.errors import DecodeError

from oracles import finite_difference_error

D = torch.float64


def prior(channels=4, seed=None, **kw):
    p = FactorizedPrior(channels, **kw).double()
    if seed is not None:
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for t in p.parameters():
                t.add_(0.3 * torch.randn(t.shape, generator=g, dtype=D))
    return p


def sample_from_pmf(rng, pmf, values, n):
    return rng.choice(values, size=n, p=pmf / pmf.sum())


class TestQuantize:
    def test_rounding_rule(self):
        assert quantize(np.array([0.4, 0.5, -0.5, -0.4, 1.5, -2.5])).tolist() == [0, 1, -1, 0, 2, -3]
        assert quantize(torch.tensor([0.5, -0.5])).tolist() == [1.0, -1.0]

    @given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=50))
    def test_idempotent_and_close(self, ys):
        y = np.array(ys)
        q = quantize(y)
        np.testing.assert_array_equal(quantize(q), q)
        assert np.all(np.abs(y - q) <= 0.5)


class TestPrior:
    def test_fresh_prior_is_peaked_at_zero(self):
        p = prior()
        lik = p.likelihood(torch.tensor([[0.0] * 4, [10.0] * 4], dtype=D))
        assert torch.all(lik[0] > lik[1])

    def test_fresh_prior_mass_is_normalized(self):
        p = prior(8)
        v = torch.arange(-30, 31, dtype=D)[:, None].expand(-1, 8)
        total = p.likelihood(v).sum(dim=0)
        assert torch.all((total - 1).abs() < 1e-3)

    def test_cdf_is_strictly_monotone(self):
        for seed in range(5):
            p = prior(4, seed)
            grid = np.broadcast_to(np.linspace(-60, 60, 4001), (4, 4001))
            assert np.all(np.diff(p.logits_numpy(grid), axis=1) > 0)

    def test_likelihood_is_positive_and_bounded(self):
        p = prior(3, 1)
        y = torch.tensor([[0.0, 5.0, -1e4]], dtype=D)
        lik = p.likelihood(y)
        assert torch.all(lik >= 1e-9) and torch.all(lik <= 1)

    def test_gradient_of_bits(self):
        rng = np.random.default_rng(0)
        for trial in range(20):
            p = prior(2, trial)
            names = [n for n, _ in p.named_parameters()]
            params = [t.detach() for _, t in p.named_parameters()]
            y = torch.tensor(rng.normal(0, 2, size=(6, 2)), dtype=D)

            def bits(y, *ps):
                lik = torch.func.functional_call(p, dict(zip(names, ps)), (y,))
                return -torch.log2(lik).sum()

            err = finite_difference_error(bits, [y, *params])
            assert err < 1e-5, (trial, err)


class TestEstimateBits:
    def test_empty(self):
        assert prior().estimate_bits(torch.zeros((0, 4), dtype=D)).item() == 0.0

    def test_mode_is_cheaper_than_tails(self):
        p = prior(4)
        assert p.estimate_bits(torch.zeros(10, 4, dtype=D)) < p.estimate_bits(torch.full((10, 4), 5.0, dtype=D))

    def test_monte_carlo_matches_entropy(self):
        rng = np.random.default_rng(1)
        p = prior(1, 3)
        values = np.arange(-200, 201)
        pmf = p.pmf_numpy(values[None].astype(float))[0]
        entropy = -(pmf * np.log2(pmf)).sum()
        y = sample_from_pmf(rng, pmf, values, 100_000)
        per_elem = p.estimate_bits(torch.tensor(y, dtype=D)[:, None]).item() / len(y)
        assert abs(per_elem - entropy) / entropy < 0.02


class TestTables:
    def test_quantize_pmf(self):
        cdf = quantize_pmf(np.array([0.5, 0.25, 0.25, 0.0]))
        assert cdf[0] == 0 and cdf[-1] == 1 << 16
        assert np.all(np.diff(cdf) >= 1)

    def test_symmetric_prior_has_symmetric_support(self):
        p = prior(3)
        with torch.no_grad():
            for b in p.biases:
                b.zero_()
        table = build_cdf_tables(p)
        np.testing.assert_array_equal(table.v_min, -table.v_max)

    def test_coded_size_matches_table_entropy(self):
        rng = np.random.default_rng(2)
        p = prior(2, 5)
        table = build_cdf_tables(p)
        cols, ideal = [], 0.0
        for c in range(2):
            probs = table.probabilities(c)[:-1]  # no escapes
            values = np.arange(table.v_min[c], table.v_max[c] + 1)
            col = sample_from_pmf(rng, probs, values, 10_000)
            cols.append(col)
            q = table.probabilities(c)
            ideal -= np.log2(q[col - table.v_min[c]]).sum()
        symbols = np.stack(cols, axis=1)
        data = encode_features(symbols, table)
        assert abs(len(data) - ideal / 8) <= 0.01 * ideal / 8 + 32
        np.testing.assert_array_equal(decode_features(data, table, len(symbols)), symbols)

    def test_escape_roundtrip(self):
        p = prior(3)
        table = build_cdf_tables(p)
        symbols = np.array([[0, 1, -1], [10_000, -70_000, 0], [2**31 - 1, -(2**31), 5]])
        data = encode_features(symbols, table)
        np.testing.assert_array_equal(decode_features(data, table, 3), symbols)

    def test_decoder_uses_stream_bounds(self):
        p = prior(2, 7)
        table = build_cdf_tables(p)
        again = build_cdf_tables(p, bounds=(table.v_min, table.v_max))
        for a, b in zip(table.cdfs, again.cdfs):
            np.testing.assert_array_equal(a, b)

    def test_damaged_stream_fails(self):
        p = prior(2)
        table = build_cdf_tables(p)
        rng = np.random.default_rng(3)
        symbols = rng.integers(-3, 4, size=(200, 2))
        data = encode_features(symbols, table)
        with pytest.raises(DecodeError):
            decode_features(data + b"\x00", table, 200)
        with pytest.raises(DecodeError):
            decode_features(data[:-2], table, 200)

    def test_channel_mismatch(self):
        table = build_cdf_tables(prior(2))
        with pytest.raises(ValueError):
            encode_features(np.zeros((3, 3), np.int64), table)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_feature_roundtrip(seed):
    rng = np.random.default_rng(seed)
    p = prior(3, seed % 1000)
    table = build_cdf_tables(p)
    symbols = np.round(rng.laplace(0, rng.uniform(0.5, 20), size=(int(rng.integers(1, 60)), 3))).astype(np.int64)
    data = encode_features(symbols, table)
    np.testing.assert_array_equal(decode_features(data, table, len(symbols)), symbols)
