import numpy as np
import pytest
from hypothesis import given, strategies as st

from otfsradar import DomainError, SingularFisherError
from otfsradar.channel import UlaArray
from otfsradar.crlb import (PARAM_NAMES, ParamVector, SignalModel, compare_strategies, crlb,
                            fisher_from_derivatives, fisher_matrix, signal_derivatives, signal_mean)
from otfsradar.otfs import OtfsConfig, generate_symbols

from .conftest import crandn

CFG = OtfsConfig(4, 4, 1e6)
ARR = UlaArray(4)


def model(B=3, nrf=2, seed=0, na=4, cfg=CFG):
    rng = np.random.default_rng(seed)
    sched = [np.linalg.qr(crandn(rng, na, nrf))[0] for _ in range(B)]
    beam = crandn(rng, na)
    return SignalModel(cfg, UlaArray(na), sched, beam / np.linalg.norm(beam))


def random_theta(rng, cfg=CFG):
    # keep the delay clear of bin edges, where l_tau jumps
    tau = (rng.integers(0, cfg.M) + rng.uniform(0.1, 0.9)) * cfg.delay_step
    nu = rng.uniform(-0.45, 0.45) * cfg.delta_f
    return ParamVector(rng.uniform(0.5, 2.0), rng.uniform(-np.pi, np.pi), tau, nu,
                       rng.uniform(-1.2, 1.2))


FD_STEPS = lambda th: (1e-4 * th.A, 1e-4, 1e-4, 1e-4 * CFG.delay_step, 1e-4 * CFG.doppler_step)


def test_zero_amplitude_and_phase_flip():
    m = model()
    x = generate_symbols(CFG, 1, 1.0, np.random.default_rng(1), blocks=3)
    th = ParamVector(1.3, 0.4, 1.5 * CFG.delay_step, 0.1 * CFG.delta_f, 0.3)
    assert np.array_equal(signal_mean(ParamVector(0.0, 0.4, th.tau, th.nu, th.phi), m, x), np.zeros((3, 32)))
    flipped = ParamVector(th.A, th.psi + np.pi, th.tau, th.nu, th.phi)
    np.testing.assert_allclose(signal_mean(flipped, m, x), -signal_mean(th, m, x), atol=1e-14)
    with pytest.raises(DomainError):
        ParamVector(-1.0, 0.0, 0.0, 0.0, 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_derivatives_match_central_differences(seed):
    rng = np.random.default_rng(seed)
    m = model(seed=seed)
    x = generate_symbols(CFG, 1, 1.0, rng, blocks=3)
    th = random_theta(rng)
    D = signal_derivatives(th, m, x)
    for i, h in enumerate(FD_STEPS(th)):
        fd = (signal_mean(th.shifted(i, h), m, x) - signal_mean(th.shifted(i, -h), m, x)) / (2 * h)
        assert np.linalg.norm(D[i] - fd) / np.linalg.norm(D[i]) < 1e-5, PARAM_NAMES[i]


def test_param_order():
    th = ParamVector(1.0, 2.0, 3.0, 4.0, 5.0)
    assert tuple(th.ordered()) == (1.0, 2.0, 5.0, 3.0, 4.0)
    assert th.shifted(2, 0.5).phi == 5.5


@given(st.integers(0, 2 ** 32 - 1))
def test_fisher_symmetric_psd_and_a_psi_zero(seed):
    rng = np.random.default_rng(seed)
    th = random_theta(rng)
    I = fisher_matrix(th, model(seed=seed % 7), 0.3, 1.0)
    np.testing.assert_allclose(I, I.T, atol=1e-10 * np.abs(I).max())
    assert np.linalg.eigvalsh(I).min() >= -1e-8 * np.trace(I)
    assert abs(I[0, 1]) <= 1e-12 * np.abs(I).max()


def test_fisher_block_additivity():
    th = random_theta(np.random.default_rng(3))
    m = model(B=4)
    per = fisher_matrix(th, m, 0.5, 2.0, per_block=True)
    assert per.shape == (4, 5, 5)
    np.testing.assert_allclose(per.sum(axis=0), fisher_matrix(th, m, 0.5, 2.0), rtol=1e-12)
    for b in range(4):
        single = SignalModel(CFG, ARR, [m.U[b]], m.f)
        np.testing.assert_allclose(fisher_matrix(th, single, 0.5, 2.0), per[b], rtol=1e-12, atol=1e-30)


def test_fisher_sample_form_and_mc_path():
    th = random_theta(np.random.default_rng(4))
    m = model(B=2)
    x = generate_symbols(CFG, 1, 1.0, np.random.default_rng(5), blocks=2)
    D = signal_derivatives(th, m, x)
    sample = fisher_from_derivatives(D, 0.5)
    assert sample.shape == (5, 5)
    mc = fisher_matrix(th, m, 0.5, 1.0, method="mc", mc_trials=300, rng=np.random.default_rng(6))
    closed = fisher_matrix(th, m, 0.5, 1.0)
    d = np.sqrt(np.outer(np.diag(closed), np.diag(closed)))
    assert np.max(np.abs(mc - closed) / d) < 0.1


def test_fisher_errors():
    th = random_theta(np.random.default_rng(0))
    with pytest.raises(DomainError):
        fisher_matrix(th, model(), 0.0, 1.0)
    with pytest.raises(DomainError):
        fisher_matrix(th, model(), 1.0, 1.0, method="mc", mc_trials=0)


def test_crlb_diagonal_and_singular():
    np.testing.assert_allclose(crlb(np.diag([1.0, 2.0, 4.0, 8.0, 16.0])), 1 / np.array([1, 2, 4, 8, 16.0]))
    bad = np.ones((5, 5))
    with pytest.raises(SingularFisherError) as e:
        crlb(bad)
    assert e.value.condition > 1e14
    with pytest.raises(SingularFisherError):
        crlb(np.diag([1.0, 0.0, 1.0, 1.0, 1.0]))


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 5), st.floats(0.01, 100.0))
def test_crlb_monotone_in_blocks_and_snr(seed, B, gain):
    rng = np.random.default_rng(seed)
    th = random_theta(rng)
    full = model(B=6, seed=seed % 5)
    head = SignalModel(CFG, ARR, list(full.U[:B]), full.f)
    more = SignalModel(CFG, ARR, list(full.U[:B + 1]), full.f)
    c_b = crlb(fisher_matrix(th, head, 1.0, 1.0))
    c_b1 = crlb(fisher_matrix(th, more, 1.0, 1.0))
    assert np.all(c_b1 <= c_b * (1 + 1e-9))
    c_snr = crlb(fisher_matrix(th, head, 1.0, 1.0 + gain))
    assert np.all(c_snr <= c_b * (1 + 1e-9))


def test_compare_strategies_keys():
    th = random_theta(np.random.default_rng(8))
    m = model(B=2)
    out = compare_strategies(th, CFG, ARR, m.f, {"a": list(m.U), "b": list(m.U[:1])}, 1.0, 1.0)
    assert set(out) == {"a", "b", "fully_digital"}
    assert all(v.shape == (5,) and np.all(v > 0) for v in out.values())
    assert np.all(out["a"] <= out["b"] * (1 + 1e-9))
