import numpy as np
import pytest

from spectronet import calib
from spectronet.calib import ConditioningWarning, HeadConfig, loo_evaluate, maxe, rmse, train_head
from spectronet.errors import CoverageError
from spectronet.spectra import OXIDES, Dataset, Spectrum, rng_for
from spectronet.synth import gen_dataset


def test_metric_examples():
    assert rmse([1, 2], [1, 2]) == 0 and maxe([1, 2], [1, 2]) == 0
    assert rmse([0], [3]) == 3 and maxe([0], [3]) == 3
    assert rmse([0, 0], [3, 4]) == pytest.approx(3.5355339059327378, abs=1e-15)
    assert maxe([0, 0], [3, 4]) == 4
    with pytest.raises(ValueError):
        rmse([], [])
    with pytest.raises(ValueError):
        maxe([1], [1, 2])


def test_rmse_permutation_and_scaling():
    rng = np.random.default_rng(0)
    p, t = rng.normal(size=(2, 20))
    perm = rng.permutation(20)
    assert rmse(p[perm], t[perm]) == pytest.approx(rmse(p, t), rel=1e-15)
    assert rmse(3 * p, 3 * t) == pytest.approx(3 * rmse(p, t), rel=1e-14)


def test_head_matches_normal_equations():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(200, 6))
    w_true = rng.normal(size=6)
    y = X @ w_true + 2.5
    head = train_head(X, y)
    A = np.hstack([X, np.ones((200, 1))])
    sol = np.linalg.lstsq(A, y, rcond=None)[0]
    assert np.linalg.norm(head.weights - sol[:6]) / np.linalg.norm(sol[:6]) < 1e-2
    assert rmse(head.predict(X), y) < 1e-2


def test_two_point_line():
    head = train_head([[1.0], [3.0]], [2.0, 6.0])
    np.testing.assert_allclose(head.predict([[1.0], [3.0]]), [2.0, 6.0], atol=1e-6)
    assert head.weights[0] == pytest.approx(2.0, abs=1e-6)
    assert head.bias == pytest.approx(0.0, abs=1e-6)


def test_zero_labels():
    X = np.random.default_rng(2).normal(size=(30, 4))
    head = train_head(X, np.zeros(30))
    assert np.max(np.abs(head.weights)) < 1e-12
    assert abs(head.bias) < 1e-12


def test_identical_inputs_warn():
    with pytest.warns(ConditioningWarning):
        head = train_head(np.ones((5, 3)), np.arange(5.0))
    assert head.predict(np.ones((1, 3)))[0] == pytest.approx(2.0)


def test_lr_held_before_decay():
    head = train_head(np.random.default_rng(3).normal(size=(10, 2)), np.arange(10.0))
    assert len(head.lr_trace) == 200
    assert all(lr == 1.0 for lr in head.lr_trace[:75])
    assert head.lr_trace[76] < 1.0
    assert head.lr_trace[-1] < 1e-3


def test_head_deterministic():
    X = np.random.default_rng(4).normal(size=(100, 5))
    y = X.sum(axis=1)
    a, b = train_head(X, y, HeadConfig(seed=7)), train_head(X, y, HeadConfig(seed=7))
    assert a.weights.tobytes() == b.weights.tobytes() and a.bias == b.bias


def test_head_input_validation():
    with pytest.raises(ValueError):
        train_head([[1.0]], [1.0])
    with pytest.raises(ValueError):
        train_head(np.zeros((3, 2)), np.zeros(4))


# ---------------------------------------------------------------- leave-one-out

def labelled_set(n_std=5, locations=2, shots=3, n=4, seed=0):
    rng = rng_for(seed)
    grid = np.arange(float(n))
    W = rng.normal(size=(n, len(OXIDES)))
    samples, labels = [], {}
    for t in range(n_std):
        tid = f"S{t}"
        base = rng.normal(size=n)
        labels[tid] = base @ W + 50.0
        for loc in range(locations):
            for s in range(shots):
                samples.append(Spectrum(grid, base, tid, loc, s, f"{tid}_{loc}_{s}"))
    return Dataset(samples, grid, labels), W


def test_oracle_rep_zero_error():
    d, _ = gen_dataset(16, 4, 2, 32, seed=1)
    for i, ox in enumerate(OXIDES):
        # the representation is the oxide value itself; the identity head is exact
        rec = loo_evaluate(d, lambda s: d.labels[s.target_id][[i]], ox)
        assert rec.rmse == 0.0 and rec.maxe == 0.0


def test_three_standards_three_rounds():
    d, _ = labelled_set(n_std=3)
    rec = loo_evaluate(d, lambda s: s.intensities, "SiO2", HeadConfig(epochs=5), keep_heads=True)
    assert rec.n_rounds == 3
    assert len({id(h) for h in rec.heads.values()}) == 3
    assert rec.target_ids == ["S0", "S1", "S2"]


def test_coverage_error():
    d, _ = labelled_set(n_std=2)
    with pytest.raises(CoverageError):
        loo_evaluate(d, lambda s: s.intensities, "SiO2")
    with pytest.raises(ValueError):
        loo_evaluate(labelled_set()[0], lambda s: s.intensities, "TiO")


def perturbed(d, target, delta):
    samples = [s.with_intensities(s.intensities + delta) if s.target_id == target else s for s in d.samples]
    return Dataset(samples, d.grid, d.labels)


def test_loo_canary():
    d, _ = labelled_set(n_std=5)
    cfg = HeadConfig(epochs=20)
    base = loo_evaluate(d, lambda s: s.intensities, "CaO", cfg, keep_heads=True)
    for t in d.labels:
        other = loo_evaluate(perturbed(d, t, 1e3), lambda s: s.intensities, "CaO", cfg, keep_heads=True)
        assert other.heads[t].weights.tobytes() == base.heads[t].weights.tobytes()
        assert other.heads[t].bias == base.heads[t].bias
        assert other.prediction[other.target_ids.index(t)] != base.prediction[base.target_ids.index(t)]


def test_unlabelled_targets_ignored():
    d, _ = labelled_set(n_std=4)
    extra = [Spectrum(d.grid, np.full(d.n_bins, 9.0), "U", 0, 0, "U_0")]
    d2 = Dataset(d.samples + extra, d.grid, d.labels)
    a = loo_evaluate(d, lambda s: s.intensities, "MgO", HeadConfig(epochs=10))
    b = loo_evaluate(d2, lambda s: s.intensities, "MgO", HeadConfig(epochs=10))
    np.testing.assert_array_equal(a.prediction, b.prediction)


def test_kfold_rounds():
    d, _ = labelled_set(n_std=7)
    rec = loo_evaluate(d, lambda s: s.intensities, "K2O", HeadConfig(epochs=5, kfold=3))
    assert rec.n_rounds == 3
    assert len(rec.prediction) == 7


def test_clamp_flag():
    d, _ = labelled_set(n_std=4)
    d = Dataset(d.samples, d.grid, {t: v - 1e4 for t, v in d.labels.items()})
    rec = loo_evaluate(d, lambda s: s.intensities, "SiO2", HeadConfig(epochs=5, clamp_nonnegative=True))
    assert np.all(rec.prediction >= 0)


def test_results_roundtrip(tmp_path):
    d, _ = labelled_set(n_std=4)
    recs = [loo_evaluate(d, lambda s: s.intensities, ox, HeadConfig(epochs=3), representation="raw")
            for ox in ("SiO2", "FeOT")]
    calib.write_results(recs, tmp_path / "r.csv")
    calib.write_summary(recs, tmp_path / "s.csv")
    back = calib.read_results(tmp_path / "r.csv")
    assert list(back) == ["SiO2", "FeOT"]
    np.testing.assert_array_equal(back["FeOT"]["prediction"], recs[1].prediction)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "oxide,rmse,maxe,representation" and len(lines) == 3
