"""Binary container round trips and corruption handling."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from koopman_mpc.container import MAGIC, load_estimate, save_estimate
from koopman_mpc.dynamics import Box, van_der_pol
from koopman_mpc.edmd import GeneratorEstimate, fit, sample_states
from koopman_mpc.dictionary import monomial_dictionary
from koopman_mpc.errors import ContainerFormatError


def random_estimate(rng, size, n_c, consistency):
    return GeneratorEstimate(
        drift=rng.standard_normal((size, size)),
        inputs=tuple(rng.standard_normal((size, size)) for _ in range(n_c)),
        dict_id=f"monomial-n2-p{size}",
        sample_count=int(rng.integers(1, 1 << 40)),
        consistency_enforced=consistency,
    )


@given(
    size=st.integers(min_value=1, max_value=12),
    n_c=st.integers(min_value=1, max_value=3),
    consistency=st.booleans(),
    seed=st.integers(min_value=0, max_value=2**31),
)
def test_round_trip_is_bit_identical(tmp_path_factory, size, n_c, consistency, seed):
    rng = np.random.default_rng(seed)
    est = random_estimate(rng, size, n_c, consistency)
    path = tmp_path_factory.mktemp("containers") / "est.genest"
    save_estimate(est, path)
    back = load_estimate(path)
    np.testing.assert_array_equal(back.drift, est.drift)
    assert len(back.inputs) == n_c
    for a, b in zip(back.inputs, est.inputs):
        np.testing.assert_array_equal(a, b)
    assert back.dict_id == est.dict_id
    assert back.sample_count == est.sample_count
    assert back.consistency_enforced == est.consistency_enforced


def test_fitted_estimate_survives_save_and_reload(tmp_path):
    box = Box([-2.0, -2.0], [2.0, 2.0])
    dictionary = monomial_dictionary(2, 2)
    est = fit(dictionary, van_der_pol(), sample_states(box, 100, 0))
    path = tmp_path / "vdp.genest"
    save_estimate(est, path)
    back = load_estimate(path)
    np.testing.assert_array_equal(back.drift, est.drift)
    np.testing.assert_array_equal(back.inputs[0], est.inputs[0])
    assert back.dict_id == dictionary.dict_id
    # fit diagnostics are not serialized; only the estimate itself is
    assert back.info == ()
    assert est.info != ()


def test_double_save_produces_identical_bytes(tmp_path):
    rng = np.random.default_rng(8)
    est = random_estimate(rng, 5, 2, True)
    first, second = tmp_path / "a.genest", tmp_path / "b.genest"
    save_estimate(est, first)
    save_estimate(est, second)
    assert first.read_bytes() == second.read_bytes()


def test_bad_magic_rejected(tmp_path):
    rng = np.random.default_rng(1)
    path = tmp_path / "est.genest"
    save_estimate(random_estimate(rng, 3, 1, False), path)
    raw = bytearray(path.read_bytes())
    raw[:8] = b"GENEST99"
    path.write_bytes(bytes(raw))
    with pytest.raises(ContainerFormatError, match="magic"):
        load_estimate(path)


def test_truncated_header_rejected(tmp_path):
    path = tmp_path / "est.genest"
    path.write_bytes(MAGIC + b"\x00" * 4)
    with pytest.raises(ContainerFormatError, match="truncated"):
        load_estimate(path)


def test_truncated_payload_rejected(tmp_path):
    rng = np.random.default_rng(2)
    path = tmp_path / "est.genest"
    save_estimate(random_estimate(rng, 4, 1, False), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(ContainerFormatError, match="expected"):
        load_estimate(path)


def test_trailing_garbage_rejected(tmp_path):
    rng = np.random.default_rng(3)
    path = tmp_path / "est.genest"
    save_estimate(random_estimate(rng, 4, 1, False), path)
    path.write_bytes(path.read_bytes() + b"\x00" * 3)
    with pytest.raises(ContainerFormatError, match="expected"):
        load_estimate(path)
