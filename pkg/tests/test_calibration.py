import numpy as np
import pytest

from tailspace import calibration as cal
from tailspace import tspm
from tailspace.adapter import init_astra
from tailspace.linalg import DimensionError, sym_eigh
from tailspace.model import LinearSpec, ToyModel

W0 = [[1.0, -0.5], [0.25, 2.0], [-1.5, 0.75]]
B0 = [0.5, -0.25, 0.125]
W1 = [[0.5, -1.0, 0.25], [1.5, 0.5, -0.75]]
B1 = [-0.5, 0.25]
INPUTS = [[1.0, 2.0], [-0.5, 0.25], [3.0, -1.0], [0.0, 0.0], [-2.0, -0.75]]


def fixed_model():
    specs = [LinearSpec("fc_0", 2, 3, activation="relu"), LinearSpec("fc_1", 3, 2)]
    return ToyModel(specs, weights={"fc_0": W0, "fc_1": W1}, biases={"fc_0": B0, "fc_1": B1})


def hand_forward(x):
    # all entries are dyadic so every product and sum here is exact
    z0 = [sum(W0[i][k] * x[k] for k in range(2)) + B0[i] for i in range(3)]
    h = [max(v, 0.0) for v in z0]
    z1 = [sum(W1[i][k] * h[k] for k in range(3)) + B1[i] for i in range(2)]
    return {"fc_0": z0, "fc_1": z1}


def hand_transcript(layer):
    """Accumulator state after each sample, traced with plain Python floats."""
    dim = len(hand_forward(INPUTS[0])[layer])
    total = [[0.0] * dim for _ in range(dim)]
    count = 0
    steps = []
    for x in INPUTS:
        y = hand_forward(x)[layer]
        peak = max(abs(v) for v in y)
        y = [v / peak for v in y]
        for i in range(dim):
            for j in range(dim):
                total[i][j] = total[i][j] + y[i] * y[j]
        count += 1
        steps.append(([row[:] for row in total], count))
    final = [[v / count for v in row] for row in total]
    return steps, final


def test_accumulator_transcript_bit_exact():
    seen = {"fc_0": [], "fc_1": []}

    def record(name, acc):
        seen[name].append((acc.sum_outer.copy(), acc.sample_count))

    data = cal.CalibrationSet(np.array(INPUTS).T)
    covs = cal.calibrate_model(fixed_model(), data, on_batch=record)
    for layer in ("fc_0", "fc_1"):
        steps, final = hand_transcript(layer)
        assert len(seen[layer]) == len(steps)
        for (got, n_got), (want, n_want) in zip(seen[layer], steps):
            assert n_got == n_want
            assert got.tobytes() == np.array(want).tobytes()
        assert covs[layer].tobytes() == np.array(final).tobytes()


def test_counts_batches_not_columns(rng):
    y = rng.standard_normal((3, 8))
    acc = cal.CovarianceAccumulator(3)
    acc.accumulate(y[:, :4]).accumulate(y[:, 4:])
    assert acc.sample_count == 2 and acc.column_count == 8
    expect = sum((p / np.max(np.abs(p))) @ (p / np.max(np.abs(p))).T for p in (y[:, :4], y[:, 4:])) / 2
    np.testing.assert_allclose(acc.finalize(), expect, rtol=1e-14)


def test_zero_batch_is_not_scaled():
    acc = cal.CovarianceAccumulator(2)
    acc.accumulate(np.zeros((2, 1)))
    acc.accumulate(np.array([[2.0], [-4.0]]))
    assert acc.unscaled_batches == 1 and acc.sample_count == 2
    np.testing.assert_array_equal(acc.finalize(), [[0.125, -0.25], [-0.25, 0.5]])


@pytest.mark.parametrize("c", [1e-6, 3.0, -2.0, 1e8])
def test_scale_invariance(rng, c):
    y = rng.standard_normal((5, 12))
    a = cal.CovarianceAccumulator(5)
    b = cal.CovarianceAccumulator(5)
    for col in range(12):
        a.accumulate(y[:, col:col + 1])
        b.accumulate(c * y[:, col:col + 1])
    np.testing.assert_allclose(a.finalize(), b.finalize(), rtol=1e-13, atol=1e-15)


def test_mean_centered_two_pass_oracle(rng):
    y = rng.standard_normal((4, 30)) + 2.0
    acc = cal.CovarianceAccumulator(4, "mean_centered")
    for col in y.T:
        acc.accumulate(col[:, None])
    scaled = y / np.max(np.abs(y), axis=0)
    centred = scaled - scaled.mean(axis=1, keepdims=True)
    np.testing.assert_allclose(acc.finalize(), centred @ centred.T / 30, atol=1e-13)


def test_mean_centered_single_sample_is_zero():
    acc = cal.CovarianceAccumulator(3, "mean_centered").accumulate(np.array([[1.0], [2.0], [3.0]]))
    assert np.max(np.abs(acc.finalize())) < 1e-15
    assert np.all(sym_eigh(acc.finalize()).eigenvalues >= 0.0)


def test_merge_equals_single_pass(rng):
    y = rng.standard_normal((6, 20))
    whole = cal.CovarianceAccumulator(6, "mean_centered")
    left = cal.CovarianceAccumulator(6, "mean_centered")
    right = cal.CovarianceAccumulator(6, "mean_centered")
    for col in range(20):
        whole.accumulate(y[:, col:col + 1])
        (left if col < 7 else right).accumulate(y[:, col:col + 1])
    merged = left.merge(right)
    assert merged.sample_count == 20 and merged.column_count == 20
    np.testing.assert_allclose(merged.finalize(), whole.finalize(), atol=1e-13)
    with pytest.raises(ValueError):
        left.merge(cal.CovarianceAccumulator(6))


@pytest.mark.parametrize("centering", cal.CENTERING)
def test_covariance_symmetric_psd(rng, centering):
    model = ToyModel.random([LinearSpec("fc_0", 6, 9, activation="gelu"), LinearSpec("fc_1", 9, 4)], seed=2)
    covs = cal.calibrate_model(model, cal.CalibrationSet(rng.standard_normal((6, 16))), centering=centering)
    for name, cov in covs.items():
        assert cov.shape == (model.spec(name).d_out,) * 2
        np.testing.assert_array_equal(cov, cov.T)
        assert np.all(sym_eigh(cov).eigenvalues >= 0.0)


def test_target_subset_and_errors(rng):
    model = fixed_model()
    data = cal.CalibrationSet(rng.standard_normal((2, 3)))
    assert list(cal.calibrate_model(model, data, targets=["fc_1"])) == ["fc_1"]
    with pytest.raises(KeyError):
        cal.calibrate_model(model, data, targets=["fc_9"])
    with pytest.raises(ValueError):
        cal.CalibrationSet(np.zeros((2, 0)))
    with pytest.raises(ValueError):
        cal.CalibrationSet(np.ones((2, 2)), source="web")
    with pytest.raises(ValueError):
        cal.CovarianceAccumulator(2, "centred")
    with pytest.raises(ValueError):
        cal.CovarianceAccumulator(2).finalize()
    with pytest.raises(DimensionError):
        cal.CovarianceAccumulator(2).accumulate(np.ones((3, 1)))


def test_adapters_do_not_touch_calibration(rng):
    model = fixed_model()
    data = cal.CalibrationSet(np.array(INPUTS).T)
    before = cal.calibrate_model(model, data)
    layer = init_astra(np.array(W0), before["fc_0"], 1, 1.0, bias=np.array(B0))
    layer.adapter.a += 1.0
    model.inject("fc_0", layer)
    after = cal.calibrate_model(model, data)
    for name in before:
        assert after[name].tobytes() == before[name].tobytes()


def test_batch_size_groups_columns(rng):
    data = cal.CalibrationSet(rng.standard_normal((2, 5)), batch_size=2)
    assert [b.shape[1] for b in data.batches()] == [2, 2, 1]
    accs = cal.collect(fixed_model(), data)
    assert accs["fc_0"].sample_count == 3 and accs["fc_0"].column_count == 5


def test_dump_covariances(tmp_path, rng):
    covs = cal.calibrate_model(fixed_model(), cal.CalibrationSet(rng.standard_normal((2, 4))))
    paths = cal.dump_covariances(covs, tmp_path)
    assert sorted(p.name for p in paths) == ["fc_0.cov.tspm", "fc_1.cov.tspm"]
    assert tspm.load(tmp_path / "fc_1.cov.tspm").tobytes() == covs["fc_1"].tobytes()
