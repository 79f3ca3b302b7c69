import numpy as np
import pytest

from cpfas_sde import datasets as ds
from cpfas_sde.errors import ConfigurationError, ParseError
from cpfas_sde.timegrid import make_uniform_grid


def _files(tmp_path, clouds):
    paths = []
    for k, pts in enumerate(clouds):
        p = tmp_path / f"m{k}.csv"
        np.savetxt(p, pts, delimiter=",", header="a,b", comments="")
        paths.append(str(p))
    return paths


class TestParams:
    def test_merge_is_deep_and_non_mutating(self):
        p = ds.params_for("double_well", {"model": {"T": 2.0}})
        assert p["model"]["T"] == 2.0 and p["model"]["dt"] == 0.01
        assert ds.DEFAULTS["double_well"]["model"]["T"] == 40.0

    def test_unknown(self):
        with pytest.raises(ConfigurationError):
            ds.params_for("nope")

    def test_published_settings(self):
        d = ds.DEFAULTS
        assert (d["double_well"]["model"]["T"], d["double_well"]["data"]["n_obs"]) == (40.0, 50)
        assert d["double_well"]["chain"]["n_particles"] == 100
        assert d["two_circles"]["chain"]["n_chains"] == 10
        assert d["two_circles"]["train"]["batch_size"] == 1024


class TestDoubleWell:
    def test_drift_values(self):
        data = ds.gen_double_well(0, {"model": {"T": 1.0}, "data": {"n_obs": 5}})
        f = data.model.drift
        np.testing.assert_allclose(f(np.array([[0.0], [1.0], [-1.0], [0.5]]), 0.0)[:, 0], [0, 0, 0, 1.5])

    def test_observations(self):
        data = ds.gen_double_well(0)
        assert data.grid.n_steps == 4000 and len(data.obs) == 50
        idx = data.obs.indices()
        assert idx[-1] == 4000 and np.all(np.diff(idx) == 80)
        resid = np.array([data.obs.slots[j].points[0, 0] - data.truth.states[j, 0] for j in idx])
        assert 0.05 < resid.std() < 0.15

    def test_bit_identical(self, tmp_path):
        for sub in ("a", "b"):
            ds.write_data(ds.gen_double_well(3, {"model": {"T": 2.0}}), tmp_path / sub, seed=3)
        for name in ("observations.csv", "truth.csv", "spec.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestTwoCircles:
    def test_schedule(self):
        g = ds.gen_two_circles(100).model.diffusion
        assert g(0.0) == 5.0 and g(1.5) == 5.0
        assert g(3.0) == pytest.approx(0.01)
        assert g(2.25) == pytest.approx((5 + 0.01) / 2)

    def test_slots(self):
        data = ds.gen_two_circles(200, seed=1)
        mid, end = data.obs.slots[150], data.obs.slots[300]
        assert data.obs.indices() == [150, 300] and data.obs.terminal_index == 300
        r = np.linalg.norm(mid.points, axis=1)
        assert len(mid.points) == 10 and np.allclose(r, r[0])
        assert (mid.sigma_obs, mid.h_nearest, end.h_nearest) == (0.5, 3, 5)
        assert end.sigma_obs == pytest.approx(0.05)

    def test_terminal_circles(self):
        pts = ds.gen_two_circles(1000, seed=0).terminal_points
        r = np.linalg.norm(pts, axis=1)
        inner, outer = np.median(r[r < 0.75]), np.median(r[r >= 0.75])
        assert inner / outer == pytest.approx(0.5, abs=0.02)
        assert abs(np.sum(r >= 0.75) - 500) <= 5

    def test_too_few(self):
        with pytest.raises(ConfigurationError):
            ds.gen_two_circles(5)


class TestVehicle:
    def test_layout(self):
        data = ds.gen_vehicle_synthetic(0)
        assert len(data.grid) == 1000 and data.grid.times[-1] == pytest.approx(9.99)
        assert len(data.obs) == 20
        np.testing.assert_array_equal(data.obs.slots[0].points[0], [0.0, 0.0])
        for j in data.obs.indices():
            assert data.obs.slots[j].points[0].tobytes() == data.truth.states[j].tobytes()

    def test_seed_changes_track(self):
        a, b = ds.gen_vehicle_synthetic(0), ds.gen_vehicle_synthetic(1)
        assert not np.array_equal(a.truth.states, b.truth.states)


class TestMarginals:
    def test_five_files(self, tmp_path):
        rng = np.random.default_rng(0)
        paths = _files(tmp_path, [rng.normal(size=(20, 2)) for _ in range(5)])
        obs = ds.load_marginals_csv(paths, [0, 1, 2, 3, 4])
        assert obs.indices() == [0, 100, 200, 300, 400] and obs.terminal_index == 400
        assert all(obs.slots[j].h_nearest == 5 and obs.slots[j].mode == "knn" for j in obs.indices())

    def test_header_optional(self, tmp_path):
        (tmp_path / "a.csv").write_text("1,2\n3,4\n")
        (tmp_path / "b.csv").write_text("x,y\n1,2\n3,4\n")
        assert np.array_equal(ds.read_points_csv(tmp_path / "a.csv"), ds.read_points_csv(tmp_path / "b.csv"))

    @pytest.mark.parametrize("body,line", [("1,2\n3\n", 2), ("x,y\n1,2\n3,z\n", 3), ("1,2\nfoo,bar\n", 2)])
    def test_malformed_rows(self, tmp_path, body, line):
        (tmp_path / "m.csv").write_text(body)
        with pytest.raises(ParseError) as info:
            ds.read_points_csv(tmp_path / "m.csv")
        assert info.value.line == line

    def test_empty_file(self, tmp_path):
        (tmp_path / "m.csv").write_text("x,y\n")
        with pytest.raises(ParseError, match="no data"):
            ds.load_marginals_csv([tmp_path / "m.csv"], [0.0])

    def test_duplicate_time(self, tmp_path):
        paths = _files(tmp_path, [np.zeros((3, 2)), np.ones((3, 2))])
        with pytest.raises(ConfigurationError, match="duplicate"):
            ds.load_marginals_csv(paths, [1.0, 1.004])

    def test_dimension_mismatch(self, tmp_path):
        paths = _files(tmp_path, [np.zeros((3, 2))])
        (tmp_path / "w.csv").write_text("0,0,0\n")
        with pytest.raises(ParseError):
            ds.load_marginals_csv(paths + [str(tmp_path / "w.csv")], [0.0, 1.0])

    def test_small_file_clamps_h(self, tmp_path):
        obs = ds.load_marginals_csv(_files(tmp_path, [np.zeros((2, 2))]), [4.0])
        assert obs.slots[400].h_nearest == 2

    def test_toy_generation(self):
        data = ds.generate("marginal_transport", 0, {"data": {"n_per_time": 30, "dim": 3}})
        assert data.obs.indices() == [0, 100, 200, 300, 400]
        assert data.model.dim == 3 and data.obs.terminal_index == 400


@pytest.mark.parametrize("name,params", [
    ("double_well", {"model": {"T": 2.0}, "data": {"n_obs": 4}}),
    ("two_circles", {"data": {"n_terminal": 50}}),
    ("vehicle_synthetic", {"data": {"n_points": 201}}),
    ("marginal_transport", {"data": {"n_per_time": 15}}),
])
def test_write_load_round_trip(tmp_path, name, params):
    data = ds.generate(name, 5, params)
    ds.write_data(data, tmp_path, seed=5)
    back = ds.load(name, tmp_path, params)
    assert back.obs.indices() == data.obs.indices()
    assert back.obs.terminal_index == data.obs.terminal_index
    for j in data.obs.indices():
        a, b = data.obs.slots[j], back.obs.slots[j]
        assert a.points.tobytes() == b.points.tobytes()
        assert (a.sigma_obs, a.h_nearest, a.mode) == (b.sigma_obs, b.h_nearest, b.mode)
    if data.truth is not None:
        assert back.truth.states.tobytes() == data.truth.states.tobytes()
    assert back.grid.same_as(make_uniform_grid(0, data.grid.times[-1], data.grid.deltas[0]))
