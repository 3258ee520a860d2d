import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from summuscat.data import (MAGIC, CokrigeSchedule, Dataset, SyntheticConfig, generate_synthetic, load_dataset,
                            make_cokrige_schedule, read_tensor, save_dataset, split_train_test, write_tensor)
from summuscat.errors import DataFormatError, DatasetIOError, ParameterError, ShapeError
from summuscat.graph import LATLON, StationSet
from summuscat.muscat import muscat_predict


class TestSynthetic:
    def test_noiseless_reproducible_from_truth(self):
        ds = generate_synthetic(SyntheticConfig(S=6, T=12, N=3, L=2, K_true=2, seed=1))
        tasks = ds.to_tasks()
        worst = 0.0
        for s, p in enumerate(ds.truth["task_params"]):
            for t in range(ds.T):
                worst = max(worst, abs(muscat_predict(tasks.x[s, t], t, p) - tasks.y[s, t]))
        assert worst <= 1e-10

    def test_same_seed_bit_identical(self):
        cfg = SyntheticConfig(S=5, T=8, noise_sigma=0.1, hetero_sigma=0.2, spatial_corr="clustered",
                              n_clusters=2, predictor_noise=0.05, seed=3)
        a, b = generate_synthetic(cfg), generate_synthetic(cfg)
        assert a == b
        assert all(x.values.tobytes() == y.values.tobytes() for x, y in zip(a.X, b.X))
        assert generate_synthetic(SyntheticConfig(S=5, T=8, noise_sigma=0.1, seed=4)) != a

    def test_noise_level(self):
        ds = generate_synthetic(SyntheticConfig(S=100, T=100, noise_sigma=0.1, seed=0))
        resid = np.asarray(ds.Y) - ds.truth["Y_clean"]
        assert abs(resid.std() - 0.1) <= 0.005

    def test_clustered_geography(self):
        ds = generate_synthetic(SyntheticConfig(S=40, spatial_corr="clustered", n_clusters=4, cluster_spread=1.0,
                                                seed=0))
        cl = ds.truth["cluster"]
        c = ds.stations.coords
        within = np.mean([np.linalg.norm(c[i] - c[j]) for i in range(40) for j in range(40)
                          if i != j and cl[i] == cl[j]])
        across = np.mean([np.linalg.norm(c[i] - c[j]) for i in range(40) for j in range(40) if cl[i] != cl[j]])
        assert within < 0.2 * across

    def test_dense_response_form(self):
        ds = generate_synthetic(SyntheticConfig(S=3, T=5, response_form="dense", seed=0))
        assert "task_coef" in ds.truth and ds.Y.dims == (1, 5, 3)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 8), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3),
           st.sampled_from(["iid", "clustered"]), st.integers(0, 2 ** 32 - 1))
    def test_type_invariants(self, S, T, N, L, K, corr, seed):
        ds = generate_synthetic(SyntheticConfig(S=S, T=T, N=N, L=L, K_true=K, spatial_corr=corr,
                                                n_clusters=1 if corr == "clustered" else 4, seed=seed,
                                                noise_sigma=0.1, hetero_sigma=0.1))
        assert len(ds.X) == L
        assert all(x.dims == (N, T, S) for x in ds.X)
        assert ds.Y.dims == (1, T, S)
        assert len(ds.stations) == S
        assert ds.to_tasks().x.shape == (S, T, L, N)

    @pytest.mark.parametrize("kw", [dict(S=0), dict(noise_sigma=-1.0), dict(spatial_corr="grid"),
                                    dict(spatial_corr="clustered", n_clusters=30), dict(response_form="mlp")])
    def test_config_validation(self, kw):
        with pytest.raises(ParameterError):
            SyntheticConfig(**kw)

    def test_to_tasks_orientation(self):
        ds = generate_synthetic(SyntheticConfig(S=3, T=4, N=2, L=2, seed=0))
        tasks = ds.to_tasks()
        np.testing.assert_array_equal(tasks.x[2, 1, 1], np.asarray(ds.X[1])[:, 1, 2])
        assert tasks.y[2, 3] == np.asarray(ds.Y)[0, 3, 2]


class TestDatasetType:
    def test_dims_checked(self):
        st_ = StationSet(("a", "b"), np.zeros((2, 2)))
        with pytest.raises(ShapeError):
            Dataset((np.zeros((2, 3, 2)), np.zeros((2, 4, 2))), np.zeros((1, 3, 2)), st_)
        with pytest.raises(ShapeError):
            Dataset((np.zeros((2, 3, 2)),), np.zeros((1, 3, 3)), st_)
        with pytest.raises(ShapeError):
            Dataset((np.zeros((2, 3, 3)),), np.zeros((1, 3, 3)), st_)


class TestSplit:
    def test_examples(self):
        ds = generate_synthetic(SyntheticConfig(S=2, T=10, seed=0))
        tr, te = split_train_test(ds, 0.8)
        assert (tr.T, te.T) == (8, 2)
        ds5 = generate_synthetic(SyntheticConfig(S=2, T=5, seed=0))
        tr, te = split_train_test(ds5, 0.5)
        assert (tr.T, te.T) == (2, 3)

    def test_partition_identity(self):
        ds = generate_synthetic(SyntheticConfig(S=3, T=9, L=2, seed=1))
        tr, te = split_train_test(ds, 0.7)
        for l in range(ds.L):
            np.testing.assert_array_equal(np.concatenate([tr.X[l].array, te.X[l].array], axis=1), ds.X[l].array)
        np.testing.assert_array_equal(np.concatenate([tr.Y.array, te.Y.array], axis=1), ds.Y.array)
        assert tr.stations == ds.stations

    def test_empty_side(self):
        ds = generate_synthetic(SyntheticConfig(S=2, T=3, seed=0))
        for ratio in (0.0, 1.0, 0.2):
            with pytest.raises(ParameterError):
                split_train_test(ds, ratio)


class TestSchedule:
    def test_paper_protocol_sizes(self):
        sched = make_cokrige_schedule(tuple(f"s{i}" for i in range(240)), 24, seed=0)
        assert sched.G == 24
        assert all(len(g) == 10 for g in sched.groups)

    def test_counting_example(self):
        sched = make_cokrige_schedule(tuple(map(str, range(12))), 4, seed=1)
        assert sorted(len(g) for g in sched.groups) == [3, 3, 3, 3]

    def test_seed_determinism(self):
        ids = tuple(map(str, range(30)))
        assert make_cokrige_schedule(ids, 7, 5) == make_cokrige_schedule(ids, 7, 5)
        assert make_cokrige_schedule(ids, 7, 5) != make_cokrige_schedule(ids, 7, 6)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 60), st.data())
    def test_partition_properties(self, n, data):
        G = data.draw(st.integers(1, n))
        ids = tuple(f"s{i}" for i in range(n))
        sched = make_cokrige_schedule(ids, G, data.draw(st.integers(0, 2 ** 32 - 1)))
        sizes = [len(g) for g in sched.groups]
        flat = [i for g in sched.groups for i in g]
        assert max(sizes) - min(sizes) <= 1
        assert sorted(flat) == sorted(ids) and len(set(flat)) == n
        assert sorted(sched.deletion_order) == list(range(G))
        assert set(sched.deleted_ids(G)) == set(ids)

    def test_errors(self):
        with pytest.raises(ParameterError):
            make_cokrige_schedule(("a", "b"), 0, 0)
        with pytest.raises(ParameterError):
            make_cokrige_schedule(("a", "b"), 3, 0)

    def test_deleted_ids_follow_order(self):
        sched = CokrigeSchedule((("a",), ("b", "c"), ("d",)), (2, 0, 1), 0)
        assert sched.deleted_ids(0) == []
        assert sched.deleted_ids(2) == ["d", "a"]


class TestPersistence:
    def test_round_trip(self, tmp_path):
        ds = generate_synthetic(SyntheticConfig(S=4, T=6, N=3, L=2, noise_sigma=0.3, seed=2))
        save_dataset(ds, tmp_path / "d")
        back = load_dataset(tmp_path / "d")
        assert back == ds
        assert all(a.values.tobytes() == b.values.tobytes() for a, b in zip(back.X, ds.X))

    def test_latlon_round_trip(self, tmp_path):
        ds = generate_synthetic(SyntheticConfig(S=2, T=3, seed=0))
        ds = Dataset(ds.X, ds.Y, StationSet(ds.stations.ids, [[45.5, -120.25], [-10.0, 170.0]], LATLON), ds.meta)
        save_dataset(ds, tmp_path)
        assert load_dataset(tmp_path).stations == ds.stations

    def test_file_layout(self, tmp_path):
        ds = generate_synthetic(SyntheticConfig(S=2, T=3, N=2, L=2, seed=0))
        save_dataset(ds, tmp_path)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["meta.json", "scale_0.f64", "scale_1.f64",
                                                              "stations.csv", "targets.f64"]
        raw = (tmp_path / "scale_0.f64").read_bytes()
        assert raw[:8] == MAGIC
        assert struct.unpack("<QQQ", raw[8:32]) == (2, 3, 2)
        assert (tmp_path / "stations.csv").read_text().splitlines()[0] == "id,c1,c2,coord_system"
        assert json.loads((tmp_path / "meta.json").read_text())["L"] == 2

    def test_tampered_dims(self, tmp_path):
        ds = generate_synthetic(SyntheticConfig(S=2, T=3, seed=0))
        save_dataset(ds, tmp_path)
        p = tmp_path / "targets.f64"
        raw = bytearray(p.read_bytes())
        raw[8:16] = struct.pack("<Q", 5)
        p.write_bytes(bytes(raw))
        with pytest.raises(DataFormatError, match="targets.f64"):
            load_dataset(tmp_path)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.f64"
        write_tensor(p, np.zeros((1, 1, 1)))
        p.write_bytes(b"NOTMAGIC" + p.read_bytes()[8:])
        with pytest.raises(DataFormatError):
            read_tensor(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "x.f64"
        p.write_bytes(MAGIC)
        with pytest.raises(DataFormatError):
            read_tensor(p)

    def test_consistent_but_wrong_shape(self, tmp_path):
        ds = generate_synthetic(SyntheticConfig(S=2, T=3, seed=0))
        save_dataset(ds, tmp_path)
        write_tensor(tmp_path / "targets.f64", np.zeros((1, 4, 2)))
        with pytest.raises(DataFormatError):
            load_dataset(tmp_path)

    def test_missing_stations(self, tmp_path):
        ds = generate_synthetic(SyntheticConfig(S=2, T=3, seed=0))
        save_dataset(ds, tmp_path)
        (tmp_path / "stations.csv").unlink()
        with pytest.raises(DatasetIOError, match="stations.csv"):
            load_dataset(tmp_path)

    def test_missing_scale_and_directory(self, tmp_path):
        ds = generate_synthetic(SyntheticConfig(S=2, T=3, L=2, seed=0))
        save_dataset(ds, tmp_path)
        (tmp_path / "scale_1.f64").unlink()
        with pytest.raises(DatasetIOError, match="scale_1.f64"):
            load_dataset(tmp_path)
        with pytest.raises(DatasetIOError):
            load_dataset(tmp_path / "nope")

    def test_bad_stations_csv(self, tmp_path):
        ds = generate_synthetic(SyntheticConfig(S=2, T=3, seed=0))
        save_dataset(ds, tmp_path)
        (tmp_path / "stations.csv").write_text("name,x,y\n")
        with pytest.raises(DataFormatError):
            load_dataset(tmp_path)
        (tmp_path / "stations.csv").write_text("id,c1,c2,coord_system\na,1,zz,planar\nb,0,0,planar\n")
        with pytest.raises(DataFormatError):
            load_dataset(tmp_path)

    def test_bad_meta(self, tmp_path):
        ds = generate_synthetic(SyntheticConfig(S=2, T=3, seed=0))
        save_dataset(ds, tmp_path)
        (tmp_path / "meta.json").write_text("{not json")
        with pytest.raises(DataFormatError):
            load_dataset(tmp_path)
        (tmp_path / "meta.json").write_text('{"L": 0}')
        with pytest.raises(DataFormatError):
            load_dataset(tmp_path)
