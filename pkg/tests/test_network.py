import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lesionseg import network as N
from lesionseg.data_io import FormatError
from lesionseg.tensor import GradTape, ParameterError, ShapeError, Tensor


def conv(cin, cout, k):
    return cout * cin * k * k + cout


def expected_params(w, cpb, cin=1):
    """Closed-form count: init, 4 encoder blocks of 2 units, optional context block, 4 decoder blocks, head."""
    total = conv(cin, w, 3) + 2 * w
    prev = w
    for f in (w, 2 * w, 4 * w, 8 * w):
        total += conv(prev, f, 3) + conv(f, f, 3) + 4 * f + conv(prev, f, 1)  # unit 1 with projection
        total += 2 * conv(f, f, 3) + 4 * f  # unit 2
        prev = f
    if cpb:
        total += conv(prev, prev, 1) + 4 * conv(prev, prev, 3)
    for f, skip in zip((16 * w, 8 * w, 4 * w, 2 * w), (4 * w, 2 * w, w, w)):
        total += conv(prev + skip, f, 3) + 2 * f
        prev = f
    return total + conv(prev, 1, 1)


@pytest.mark.parametrize("w", [4, 8, 16, 32])
@pytest.mark.parametrize("cpb", [True, False])
def test_param_count_matches_closed_form(w, cpb):
    assert N.count_params(N.build_model(base_width=w, cpb_enabled=cpb)).total == expected_params(w, cpb)


def test_param_count_near_reported_totals():
    with_cpb = N.count_params(N.build_model(base_width=32, cpb_enabled=True)).total
    without = N.count_params(N.build_model(base_width=32, cpb_enabled=False)).total
    assert abs(with_cpb - 8.75e6) / 8.75e6 < 0.02
    assert abs(without - 6.32e6) / 6.32e6 < 0.02
    assert abs((with_cpb - without) - 2.43e6) / 2.43e6 < 0.05


def test_ledger_subtotals():
    ledger = N.count_params(N.build_model(base_width=8))
    assert ledger.subtotal("cpb") == conv(64, 64, 1) + 4 * conv(64, 64, 3)
    assert ledger.subtotal("enc1") + ledger.subtotal("enc2") + ledger.subtotal("enc3") + ledger.subtotal("enc4") \
        + ledger.subtotal("cpb") + ledger.subtotal("dec1") + ledger.subtotal("dec2") + ledger.subtotal("dec3") \
        + ledger.subtotal("dec4") + ledger.subtotal("init") + ledger.subtotal("head") == ledger.total
    assert N.count_params(None).total == 0
    assert "TOTAL" in ledger.to_text()


def test_build_is_seeded():
    a, b, c = N.build_model(base_width=4, seed=1), N.build_model(base_width=4, seed=1), N.build_model(base_width=4, seed=2)
    assert a.checksum() == b.checksum() != c.checksum()
    with pytest.raises(ParameterError):
        N.build_model(base_width=2)


def test_forward_shapes_and_ladder(rng):
    params = N.build_model(base_width=4)
    feats = {}
    out = N.forward(params, Tensor(rng.standard_normal((2, 1, 32, 48)).astype(np.float32)), "train", feats)
    assert out.shape == (2, 1, 32, 48)
    assert np.all((out.data > 0) & (out.data < 1))
    assert feats["init"].shape == (2, 4, 32, 48)
    assert [feats[f"enc{i}"].shape[2:] for i in range(1, 5)] == [(16, 24), (8, 12), (4, 6), (2, 3)]
    assert [feats[f"dec{i}"].shape[1] for i in range(1, 5)] == [64, 32, 16, 8]


@pytest.mark.parametrize("size", [(24, 32), (32, 20)])
def test_forward_rejects_non_multiple_of_16(size):
    with pytest.raises(ShapeError):
        N.forward(N.build_model(base_width=4), Tensor(np.zeros((1, 1) + size, np.float32)))


def test_forward_rejects_bad_mode():
    with pytest.raises(ParameterError):
        N.forward(N.build_model(base_width=4), Tensor(np.zeros((1, 1, 16, 16), np.float32)), mode="test")


def test_eval_mode_is_batch_independent(rng):
    params = N.build_model(base_width=4)
    x = rng.standard_normal((3, 1, 16, 16)).astype(np.float32)
    full = N.predict(params, x, batch_size=3)
    single = N.predict(params, x[1:2], batch_size=1)
    np.testing.assert_allclose(full[1], single[0], atol=1e-6)


def test_cpb_is_sum_of_paths(rng):
    params = N.build_model(base_width=4)
    x = Tensor(rng.standard_normal((1, 32, 4, 4)).astype(np.float32))
    names = ("proj", "dil1", "dil2", "dil4", "dil8")
    total = N.cpb_forward(params, x).data
    parts = sum(N.cpb_forward(params, x, (p,)).data for p in names)
    np.testing.assert_allclose(total, parts, atol=1e-5)
    with pytest.raises(ShapeError):
        N.cpb_forward(params, Tensor(np.zeros((1, 8, 4, 4), np.float32)))
    with pytest.raises(ShapeError):
        N.cpb_forward(N.build_model(base_width=4, cpb_enabled=False), x)


@settings(max_examples=10, deadline=None)
@given(st.sampled_from([1, 2, 4, 8]), st.integers(0, 4), st.integers(0, 4))
def test_dilated_path_reaches_exactly_its_dilation(d, r, c):
    # an impulse at (r, c) on a 9x9 grid only touches pixels whose offset is 0 or +-d along each axis
    params = N.build_model(base_width=4)
    for name in params.names():
        if name.startswith("cpb."):
            params[name].data[...] = 0
    params[f"cpb.dil{d}.weight"].data[...] = 1
    x = np.zeros((1, 32, 9, 9), np.float32)
    x[0, 0, r + 2, c + 2] = 1
    out = N.cpb_forward(params, Tensor(x), (f"dil{d}",)).data[0, 0]
    hit = set(zip(*np.nonzero(out)))
    expect = {(r + 2 + dy, c + 2 + dx) for dy in (-d, 0, d) for dx in (-d, 0, d)
              if 0 <= r + 2 + dy < 9 and 0 <= c + 2 + dx < 9}
    assert hit == expect


def test_cpb_penalty_value():
    params = N.build_model(base_width=4)
    expect = 1e-3 * sum(float(np.sum(k.data.astype(np.float64) ** 2)) for k in N.cpb_kernels(params))
    assert float(N.cpb_penalty(params, 1e-3).data) == pytest.approx(expect, rel=1e-5)
    assert float(N.cpb_penalty(N.build_model(base_width=4, cpb_enabled=False), 1e-3).data) == 0.0


def test_penalty_gradient_only_on_cpb_kernels():
    params = N.build_model(base_width=4)
    with GradTape() as tape:
        loss = N.cpb_penalty(params, 0.5)
    grads = dict(zip(params.names(), tape.gradient(loss, params.trainable())))
    for name, g in grads.items():
        if name.startswith("cpb.") and name.endswith(".weight"):
            np.testing.assert_allclose(g, params[name].data, rtol=1e-6)
        else:
            assert not g.any()


def test_weights_round_trip(tmp_path, rng):
    params = N.build_model(base_width=4, seed=3)
    N.forward(params, Tensor(rng.standard_normal((2, 1, 16, 16)).astype(np.float32)), "train")
    N.save_weights(tmp_path / "w.lswt", params)
    back = N.load_weights(tmp_path / "w.lswt")
    assert back.checksum() == params.checksum()
    assert back.config == params.config
    x = rng.standard_normal((1, 16, 16)).astype(np.float32)
    np.testing.assert_array_equal(N.predict(back, x), N.predict(params, x))


def test_weights_corruption(tmp_path):
    path = tmp_path / "w.lswt"
    N.save_weights(path, N.build_model(base_width=4))
    raw = path.read_bytes()
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError):
        N.load_weights(path)
    path.write_bytes(raw[:-5])
    with pytest.raises(FormatError):
        N.load_weights(path)
    path.write_bytes(raw + b"\0")
    with pytest.raises(FormatError):
        N.load_weights(path)
