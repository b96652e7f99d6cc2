import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from npstream import tasks
from npstream.models import TaskBatch
from npstream.tasks import KernelSpec, OnlineNormalizer, ShiftSpec, TabularPriorSpec

FAMILIES = tasks.KERNEL_FAMILIES


# --- kernels --------------------------------------------------------------------------------


@pytest.mark.parametrize("family", FAMILIES)
def test_kernel_diagonal_is_one(family):
    spec = KernelSpec(family, 0.37)
    for x in (-1.7, 0.0, 2.3):
        assert tasks.kernel_eval(spec, x, x) == 1.0


def test_rbf_unit_distance():
    assert abs(tasks.kernel_eval(KernelSpec("rbf", 1.0), 0.0, 1.0) - 0.6065307) < 5e-8


def test_periodic_full_period():
    spec = KernelSpec("periodic", 0.5, period=2.0)
    assert abs(tasks.kernel_eval(spec, 0.3, 2.3) - 1.0) < 1e-12
    assert spec.period == 2.0


@pytest.mark.parametrize(
    "family,expected",
    [
        ("matern12", math.exp(-1.0)),
        ("matern32", (1 + math.sqrt(3)) * math.exp(-math.sqrt(3))),
        ("matern52", (1 + math.sqrt(5) + 5 / 3) * math.exp(-math.sqrt(5))),
        ("periodic", math.exp(-2 * math.sin(math.pi * 0.5 / 2.0) ** 2 / 0.25)),
    ],
)
def test_kernel_closed_forms_at_r_equal_lengthscale(family, expected):
    ell = 0.5
    assert abs(tasks.kernel_eval(KernelSpec(family, ell), 0.1, 0.1 + ell) - expected) < 1e-14


def test_matern_frozen_values():
    assert abs(tasks.kernel_eval(KernelSpec("matern32", 1.0), 0, 1) - 0.4833577) < 5e-8
    assert abs(tasks.kernel_eval(KernelSpec("matern52", 1.0), 0, 1) - 0.5239941) < 5e-8


def test_kernel_spec_validation():
    with pytest.raises(ValueError):
        KernelSpec("cosine", 1.0)
    with pytest.raises(ValueError):
        KernelSpec("rbf", 0.0)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(FAMILIES), st.floats(0.25, 1.0), st.integers(0, 2**31 - 1))
def test_kernel_symmetry_and_psd(family, ell, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2, 2, size=(int(rng.integers(2, 65)), 1))
    K = KernelSpec(family, ell).gram(x)
    assert np.array_equal(K, K.T)
    assert np.all(np.diag(K) == 1.0)
    L = tasks.jittered_cholesky(K)
    assert np.linalg.eigvalsh(L @ L.T).min() > -1e-8


def test_cholesky_failure_after_escalation():
    with pytest.raises(tasks.CholeskyError):
        tasks.jittered_cholesky(np.array([[1.0, 0.0], [0.0, -1.0]]))


# --- GP sampling ------------------------------------------------------------------------------


@pytest.mark.parametrize("family", FAMILIES)
def test_gp_covariance_monte_carlo(family):
    spec = KernelSpec(family, 0.6)
    sigma = 0.1
    x = np.array([0.0, 0.35])
    K = spec.gram(x)
    target = K + sigma**2 * np.eye(2)
    draws = tasks.sample_gp_values(K, sigma, np.random.default_rng(11), n_draws=10_000)
    n = draws.shape[0]
    emp = np.cov(draws.T, bias=True)
    for i in range(2):
        for j in range(2):
            se = math.sqrt((target[i, i] * target[j, j] + target[i, j] ** 2) / n)
            assert abs(emp[i, j] - target[i, j]) < 3 * se + 1e-6


def test_duplicate_inputs_noise_free():
    x = np.array([[0.3], [0.3], [-1.0]])
    y = tasks.sample_gp_values(KernelSpec("rbf", 0.5).gram(x), 0.0, np.random.default_rng(0))
    assert abs(y[0] - y[1]) < 1e-2  # only the 1e-6 jitter separates them
    assert y.shape == (3,)


def test_gp_task_shapes_and_ranges():
    rng = np.random.default_rng(1)
    task = tasks.sample_gp_task("matern32", (1, 16), 8, 0.1, 4, rng)
    assert task.X_c.shape[0] == 4 and 1 <= task.n_context <= 16 and task.n_target == 8
    X = np.concatenate([task.X_c, task.X_t], axis=1)
    assert X.min() >= -2 and X.max() <= 2


def test_context_size_uniform_on_range():
    rng = np.random.default_rng(2)
    sizes = [tasks.sample_gp_task("rbf", (1, 4), 1, 0.1, 1, rng).n_context for _ in range(2000)]
    counts = np.bincount(sizes, minlength=5)[1:]
    assert counts.min() > 0 and stats.chisquare(counts).pvalue > 0.01


def test_gp_task_determinism():
    a = tasks.sample_gp_task("mixed", (1, 8), 4, 0.1, 2, np.random.default_rng(7))
    b = tasks.sample_gp_task("mixed", (1, 8), 4, 0.1, 2, np.random.default_rng(7))
    for u, v in zip((a.X_c, a.Y_c, a.X_t, a.Y_t), (b.X_c, b.Y_c, b.X_t, b.Y_t)):
        assert u.tobytes() == v.tobytes()


def test_mixed_kernel_frequencies_and_lengthscales():
    rng = np.random.default_rng(3)
    specs = [tasks.sample_mixed_kernel(rng) for _ in range(100_000)]
    fams = np.array([FAMILIES.index(s.family) for s in specs])
    freq = np.bincount(fams, minlength=5) / len(specs)
    assert np.all(np.abs(freq - 0.2) < 0.01)
    log_ell = np.log10([s.lengthscale for s in specs])
    lo = math.log10(0.25)
    assert stats.kstest(log_ell, "uniform", args=(lo, -lo)).pvalue > 0.01
    assert all(s.period == 2.0 for s in specs if s.family == "periodic")


# --- change surface ---------------------------------------------------------------------------


def shift_spec(tau=5.0):
    return ShiftSpec(KernelSpec("rbf", 0.4), KernelSpec("matern12", 0.9), t0=20.0, tau=tau)


def test_change_surface_limits():
    spec = shift_spec()
    k1 = tasks.kernel_eval(spec.k1, 0.1, 0.6)
    k2 = tasks.kernel_eval(spec.k2, 0.1, 0.6)
    assert abs(tasks.change_surface_eval(spec, (0.1, -500.0), (0.6, -400.0)) - k1) < 1e-12
    assert abs(tasks.change_surface_eval(spec, (0.1, 500.0), (0.6, 400.0)) - k2) < 1e-12
    assert abs(tasks.change_surface_eval(spec, (0.1, 20.0), (0.6, 20.0)) - (k1 + k2) / 4) < 1e-15


def test_change_surface_step_at_zero_temperature():
    spec = shift_spec(tau=0.0)
    assert spec.weight(19.0) < 1e-12 and spec.weight(21.0) > 1 - 1e-12
    assert abs(float(spec.weight(20.0)) - 0.5) < 1e-15


def test_change_surface_gram_matches_pointwise_and_psd():
    spec = shift_spec()
    rng = np.random.default_rng(4)
    x, t = rng.uniform(-2, 2, 12), np.arange(12.0) * 4
    G = spec.gram(x[:, None], t)
    ref = np.array([[tasks.change_surface_eval(spec, (x[i], t[i]), (x[j], t[j])) for j in range(12)] for i in range(12)])
    assert np.max(np.abs(G - ref)) < 1e-14
    assert np.linalg.eigvalsh(G).min() > -1e-8


def test_shift_task_targets_at_final_time():
    task, spec = tasks.sample_shift_task("rbf", 30, 5, t0=10.0, tau=2.0, rng=np.random.default_rng(5))
    assert task.n_context == 30 and task.n_target == 5
    assert spec.k1.family == spec.k2.family == "rbf"
    with pytest.raises(ValueError):
        ShiftSpec(spec.k1, spec.k2, 0.0, -1.0)


# --- tabular prior ----------------------------------------------------------------------------


def test_truncated_depth_and_width_minimums():
    rng = np.random.default_rng(6)
    spec = TabularPriorSpec()
    depths = [tasks.sample_truncated_int(rng, spec.depth_range, spec.depth_min) for _ in range(10_000)]
    widths = [tasks.sample_truncated_int(rng, spec.width_range, spec.width_min) for _ in range(10_000)]
    assert min(depths) >= 2 and min(widths) >= 4
    assert max(depths) > 2 and max(widths) > 4


@pytest.mark.parametrize("seed", range(5))
def test_tabular_features_zscored_and_padded(seed):
    ds = tasks.sample_tabular_dataset(TabularPriorSpec(), 300, np.random.default_rng(seed))
    used = ds.X[:, : ds.n_features]
    assert ds.X.shape == (300, 20) and 1 <= ds.n_features <= 20
    assert np.all(np.abs(used.mean(axis=0)) < 1e-10)
    assert np.all(np.abs(used.var(axis=0) - 1) < 1e-6)
    assert np.all(ds.X[:, ds.n_features :] == 0.0)
    assert ds.depth >= 2 and ds.width >= 4
    assert ds.scaling in tasks.TARGET_SCALINGS and np.isfinite(ds.y).all()


def test_target_scalings():
    y = np.array([1.0, 2.0, 3.0, 4.0, 10.0])
    z = tasks.scale_targets(y, "zscore")
    assert abs(z.mean()) < 1e-15 and abs(z.std() - 1) < 1e-15
    mm = tasks.scale_targets(y, "minmax")
    assert mm.min() == 0.0 and mm.max() == 1.0
    assert np.abs(tasks.scale_targets(y, "maxabs")).max() == 1.0
    assert np.allclose(tasks.scale_targets(y, "robust"), (y - 3.0) / 2.0)
    with pytest.raises(ValueError):
        tasks.scale_targets(y, "log")


def test_iqr_clip():
    y = np.array([0.0, 1.0, 2.0, 3.0, 100.0])
    assert np.array_equal(tasks.iqr_clip(y, 3.0), [0.0, 1.0, 2.0, 3.0, 9.0])


def test_tabular_degenerate_resample_limit(monkeypatch):
    calls = []
    monkeypatch.setattr(tasks, "_tabular_attempt", lambda spec, n, rng: calls.append(1))
    with pytest.raises(RuntimeError):
        tasks.sample_tabular_dataset(TabularPriorSpec(), 50, np.random.default_rng(0))
    assert len(calls) == 5


def test_tabular_task_shape_and_determinism():
    a = tasks.sample_tabular_task(None, (10, 20), 6, np.random.default_rng(8), batch=2)
    b = tasks.sample_tabular_task(None, (10, 20), 6, np.random.default_rng(8), batch=2)
    assert a.X_c.shape[2] == 20 and a.n_target == 6
    assert a.X_c.tobytes() == b.X_c.tobytes() and a.Y_t.tobytes() == b.Y_t.tobytes()


# --- Fourier features -------------------------------------------------------------------------


def test_fourier_at_zero():
    out = tasks.fourier_encode(0.0, 0.5, 8.0, 6)
    assert np.array_equal(out[0::2], np.ones(3)) and np.array_equal(out[1::2], np.zeros(3))


def test_fourier_full_cycle():
    lam = tasks.fourier_wavelengths(0.5, 8.0, 6)
    for i, L in enumerate(lam):
        pair = tasks.fourier_encode(L, 0.5, 8.0, 6)[2 * i : 2 * i + 2]
        assert np.allclose(pair, [1.0, 0.0], atol=1e-12)


def test_fourier_wavelengths_log_spaced():
    assert np.allclose(tasks.fourier_wavelengths(1.0, 4.0, 4), [1.0, 4.0], atol=1e-15)
    lam = tasks.fourier_wavelengths(1.0, 16.0, 10)
    assert np.allclose(lam, [1, 2, 4, 8, 16], rtol=1e-12)
    assert np.array_equal(tasks.fourier_wavelengths(1.0, 4.0, 2), [1.0])


@pytest.mark.parametrize("D", [0, 3, 7])
def test_fourier_odd_width_rejected(D):
    with pytest.raises(ValueError):
        tasks.fourier_encode(0.3, 1.0, 4.0, D)


def test_fourier_shape():
    assert tasks.fourier_encode(np.zeros((2, 3)), 1.0, 4.0, 4).shape == (2, 3, 4)


# --- online normaliser -------------------------------------------------------------------------


def test_normalizer_constant_stream():
    norm = OnlineNormalizer(2)
    norm.calibrate(np.full((200, 2), 3.5))
    out = norm.transform(np.full((4, 2), 3.5))
    assert np.array_equal(out, np.zeros((4, 2)))
    assert np.array_equal(norm.std, np.ones(2))


def test_normalizer_matches_two_pass():
    rng = np.random.default_rng(9)
    X = rng.standard_normal((777, 3)) * [1.0, 50.0, 1e-3] + [5.0, -2.0, 1e4]
    norm = OnlineNormalizer(3)
    norm.calibrate(X[:200])
    for row in X[200:]:
        _, norm = tasks.online_normalize(norm, row)
    assert norm.count == 777
    assert np.max(np.abs(norm.mean - X.mean(axis=0))) < 1e-10
    assert np.max(np.abs(norm.variance - X.var(axis=0))) < 1e-10


def test_normalizer_emits_before_update_and_clips():
    rng = np.random.default_rng(10)
    norm = OnlineNormalizer(1)
    norm.calibrate(rng.standard_normal((1000, 1)))
    far = norm.mean + 10 * norm.std
    out, norm = tasks.online_normalize(norm, far)
    assert out.item() == 5.0 and norm.count == 1001
    assert norm.transform(norm.mean - 10 * norm.std).item() == -5.0


def test_normalizer_requires_calibration():
    with pytest.raises(tasks.NotCalibratedError):
        OnlineNormalizer(1).transform(np.zeros(1))


def test_calibration_size():
    assert OnlineNormalizer.calibration_size(100) == 200
    assert OnlineNormalizer.calibration_size(5001) == 1001


# --- task files --------------------------------------------------------------------------------


def some_tasks():
    rng = np.random.default_rng(12)
    return [tasks.sample_gp_task("rbf", (1, 6), 3, 0.1, 2, rng), tasks.sample_gp_task("periodic", (1, 6), 4, 0.1, 1, rng)]


def same_tasks(a, b):
    assert len(a) == len(b)
    for u, v in zip(a, b):
        for p, q in zip((u.X_c, u.Y_c, u.X_t, u.Y_t), (v.X_c, v.Y_c, v.X_t, v.Y_t)):
            assert p.shape == q.shape and p.tobytes() == q.tobytes()


def split(batches):
    return [t.item(i) for t in batches for i in range(t.batch)]


def test_binary_round_trip(tmp_path):
    src = some_tasks()
    path = tmp_path / "t.nptk"
    tasks.write_tasks(path, src)
    raw = path.read_bytes()
    assert raw[:4] == b"NPTK" and int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 3
    same_tasks(tasks.read_tasks(path), split(src))


def test_csv_round_trip(tmp_path):
    src = some_tasks()
    path = tmp_path / "t.csv"
    tasks.write_tasks_csv(path, src)
    same_tasks(tasks.read_tasks_csv(path), split(src))
    same_tasks(tasks.read_tasks(path), split(src))


def test_truncated_and_bad_files(tmp_path):
    path = tmp_path / "t.nptk"
    tasks.write_tasks(path, some_tasks())
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(tasks.TaskFileError):
        tasks.read_tasks(path)
    path.write_bytes(raw + b"\0")
    with pytest.raises(tasks.TaskFileError):
        tasks.read_tasks(path)
    path.write_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    with pytest.raises(tasks.TaskFileError):
        tasks.read_tasks(path)
    path.write_bytes(b"hello,world\n")
    with pytest.raises(tasks.TaskFileError):
        tasks.read_tasks(path)


def test_mixed_dimensions_rejected(tmp_path):
    a = TaskBatch(np.zeros((1, 1, 1)), np.zeros((1, 1, 1)), np.zeros((1, 1, 1)), np.zeros((1, 1, 1)))
    b = TaskBatch(np.zeros((1, 1, 2)), np.zeros((1, 1, 1)), np.zeros((1, 1, 2)), np.zeros((1, 1, 1)))
    with pytest.raises(tasks.TaskFileError):
        tasks.write_tasks(tmp_path / "x", [a, b])


def test_seeded_files_byte_identical(tmp_path):
    for name in ("a", "b"):
        tasks.write_tasks(tmp_path / name, some_tasks())
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
