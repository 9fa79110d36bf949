import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from koopmanmpc import dataset
from koopmanmpc.dataset import (
    Dataset,
    DatasetFormatError,
    Sample,
    Scaler,
    ScalerError,
    fit_scaler,
    generate,
    load,
    rollout_seed,
    save,
    split,
    window_history,
)
from koopmanmpc.plant import (
    PlantState,
    U_MAX,
    default_config,
    full_policy,
    mirror_config,
    rollout,
    run_episode,
    zero_policy,
)


def small_dataset(n_loads=2, seed=7):
    cfg = default_config()
    return generate(cfg.model, cfg.schedule, n_loads=n_loads, seed=seed, fault=cfg.fault)


class TestWindowing:
    def test_mirror_window_shape(self):
        cfg = mirror_config()
        traj = run_episode(cfg.model, cfg.schedule, cfg.fault, zero_policy(cfg.model))
        win = window_history(traj, 1)
        assert win.shape == (12, 4)

    def test_single_column_when_h_is_one(self):
        from koopmanmpc.plant import Schedule

        cfg = default_config()
        sched = Schedule(ts=3.0, tc=3.0, n_instants=3)
        init = PlantState(v=cfg.model.equilibrium())
        traj = rollout(cfg.model, init, zero_policy(cfg.model), sched)
        win = window_history(traj, 2)
        assert win.shape == (6, 1)
        assert np.array_equal(win[:, 0], traj.voltages[2])

    def test_constant_trajectory_windows_equal_equilibrium(self):
        cfg = default_config()
        init = PlantState(v=cfg.model.equilibrium())
        traj = rollout(cfg.model, init, zero_policy(cfg.model), cfg.schedule)
        win = window_history(traj, 3)
        assert np.max(np.abs(win - cfg.model.equilibrium()[:, None])) < 1e-9

    def test_last_column_is_sample_at_instant(self):
        cfg = default_config()
        traj = run_episode(cfg.model, cfg.schedule, cfg.fault, full_policy(cfg.model))
        h = cfg.schedule.h
        for k in (1, 3, 6):
            win = window_history(traj, k)
            assert np.array_equal(win[:, -1], traj.voltages[k * h])

    def test_adjacent_windows_share_no_columns(self):
        # successor window starts exactly one ts after the last column
        cfg = default_config()
        traj = run_episode(cfg.model, cfg.schedule, cfg.fault, full_policy(cfg.model))
        h = cfg.schedule.h
        w1 = window_history(traj, 1)
        w2 = window_history(traj, 2)
        assert np.array_equal(w2[:, 0], traj.voltages[h + 1])
        joined = np.hstack([w1, w2])
        assert np.array_equal(joined, traj.voltages[1 : 2 * h + 1].T)

    def test_out_of_range_index(self):
        cfg = default_config()
        init = PlantState(v=cfg.model.equilibrium())
        traj = rollout(cfg.model, init, zero_policy(cfg.model), cfg.schedule)
        with pytest.raises(IndexError):
            window_history(traj, 0)
        with pytest.raises(IndexError):
            window_history(traj, 6)


class TestGenerate:
    def test_sample_count(self):
        ds = small_dataset(n_loads=2)
        assert len(ds) == 2 * 3 * 5

    def test_debug_zero_policy_only(self):
        cfg = default_config()
        ds = generate(cfg.model, cfg.schedule, n_loads=1, seed=0, fault=cfg.fault,
                      policies=("zero",))
        assert len(ds) == 5
        for s in ds.samples:
            assert np.all(s.u_k == 0.0)

    def test_same_seed_identical_files(self, tmp_path):
        for sub in ("a", "b"):
            save(small_dataset(n_loads=2, seed=99), tmp_path / sub)
        for name in (dataset.MANIFEST_NAME, dataset.SAMPLES_NAME):
            da = hashlib.sha256((tmp_path / "a" / name).read_bytes()).hexdigest()
            db = hashlib.sha256((tmp_path / "b" / name).read_bytes()).hexdigest()
            assert da == db

    def test_different_seeds_differ(self):
        a = small_dataset(n_loads=1, seed=1)
        b = small_dataset(n_loads=1, seed=2)
        assert not dataset.datasets_equal(a, b)

    def test_controls_within_bounds(self):
        ds = small_dataset(n_loads=3)
        _, u, _ = ds.stacked()
        assert np.all(u >= 0.0) and np.all(u <= U_MAX)

    def test_rollout_seed_mix_is_stable(self):
        # frozen values: the mix is a documented file-format-level contract
        assert rollout_seed(0, 0, 0) == rollout_seed(0, 0, 0)
        assert rollout_seed(1, 2, 3) != rollout_seed(1, 3, 2)
        assert rollout_seed(1, 2, 3) != rollout_seed(3, 2, 1)


class TestScaler:
    def test_voltage_endpoints(self):
        sc = Scaler(v_ref=1.0, v_lo=-0.1, v_hi=0.1)
        assert sc.normalize_v(0.9) == pytest.approx(0.0)
        assert sc.normalize_v(1.1) == pytest.approx(1.0)

    def test_control_endpoints(self):
        sc = Scaler(v_ref=1.0, v_lo=-0.1, v_hi=0.1)
        assert sc.normalize_u(0.0) == pytest.approx(-1.0)
        assert sc.normalize_u(0.25) == pytest.approx(1.0)

    @given(
        x=st.floats(min_value=0.5, max_value=1.2),
        lo=st.floats(min_value=-0.5, max_value=-0.01),
        hi=st.floats(min_value=0.01, max_value=0.5),
    )
    @settings(max_examples=200, deadline=None)
    def test_round_trip_identity(self, x, lo, hi):
        sc = Scaler(v_ref=1.0, v_lo=lo, v_hi=hi)
        assert abs(sc.denormalize_v(sc.normalize_v(x)) - x) < 1e-12
        u = (x - 0.5) / 0.7 * 0.25
        assert abs(sc.denormalize_u(sc.normalize_u(u)) - u) < 1e-12

    def test_fitted_scaler_bounds_data(self):
        ds = small_dataset(n_loads=3)
        v_k, u, v_next = ds.stacked()
        nv = np.concatenate([ds.scaler.normalize_v(v_k).ravel(),
                             ds.scaler.normalize_v(v_next).ravel()])
        nu = ds.scaler.normalize_u(u)
        assert nv.min() >= -1e-12 and nv.max() <= 1.0 + 1e-12
        assert nu.min() >= -1.0 - 1e-12 and nu.max() <= 1.0 + 1e-12

    def test_degenerate_range_rejected(self):
        with pytest.raises(ScalerError):
            Scaler(v_ref=1.0, v_lo=0.0, v_hi=0.0)
        const = Dataset(samples=[Sample(v_k=np.ones((2, 2)), u_k=np.zeros(1),
                                        v_next=np.ones((2, 2)))])
        with pytest.raises(ScalerError):
            fit_scaler(const)


class TestSplit:
    def test_ratio_70_30(self):
        ds = small_dataset(n_loads=10)  # 150 samples
        train, test = split(ds, 0.7, seed=4)
        assert len(train) == 105 and len(test) == 45

    def test_two_samples_half(self):
        ds = small_dataset(n_loads=1)
        ds2 = Dataset(samples=ds.samples[:2], scaler=ds.scaler)
        a, b = split(ds2, 0.5, seed=0)
        assert len(a) == 1 and len(b) == 1

    def test_deterministic_partition(self):
        ds = small_dataset(n_loads=4)
        a1, b1 = split(ds, 0.7, seed=11)
        a2, b2 = split(ds, 0.7, seed=11)
        assert dataset.datasets_equal(a1, a2) and dataset.datasets_equal(b1, b2)

    def test_partition_is_disjoint_cover(self):
        ds = small_dataset(n_loads=2)
        train, test = split(ds, 0.6, seed=3)
        assert len(train) + len(test) == len(ds)
        key = lambda s: s.v_k.tobytes() + s.u_k.tobytes() + s.v_next.tobytes()
        all_keys = sorted(key(s) for s in ds.samples)
        got = sorted([key(s) for s in train.samples] + [key(s) for s in test.samples])
        assert got == all_keys

    def test_empty_and_bad_ratio(self):
        ds = small_dataset(n_loads=1)
        with pytest.raises(ValueError):
            split(Dataset(samples=[]), 0.5, seed=0)
        with pytest.raises(ValueError):
            split(ds, 1.0, seed=0)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        ds = small_dataset(n_loads=2)
        save(ds, tmp_path)
        back = load(tmp_path)
        assert dataset.datasets_equal(ds, back)

    def test_manifest_dimension_mismatch(self, tmp_path):
        ds = small_dataset(n_loads=1)
        save(ds, tmp_path)
        manifest = (tmp_path / dataset.MANIFEST_NAME).read_text()
        (tmp_path / dataset.MANIFEST_NAME).write_text(manifest.replace('"n": 6', '"n": 12'))
        with pytest.raises(DatasetFormatError):
            load(tmp_path)

    def test_empty_dataset_round_trip(self, tmp_path):
        ds = Dataset(samples=[], scaler=None, meta={"note": "empty"})
        save(ds, tmp_path)
        back = load(tmp_path)
        assert len(back) == 0 and back.meta == {"note": "empty"}

    def test_non_finite_rejected(self, tmp_path):
        ds = small_dataset(n_loads=1)
        save(ds, tmp_path)
        lines = (tmp_path / dataset.SAMPLES_NAME).read_text().splitlines()
        cells = lines[1].split(",")
        cells[0] = "nan"
        lines[1] = ",".join(cells)
        (tmp_path / dataset.SAMPLES_NAME).write_text("\r\n".join(lines) + "\r\n")
        with pytest.raises(DatasetFormatError):
            load(tmp_path)
