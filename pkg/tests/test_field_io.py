import json
import types

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from packages import field_io
from packages import space_time_grid as stg
from packages.errors import ConfigError


@pytest.fixture
def random_state(line, rng):
    return types.SimpleNamespace(grid=line, u=rng.normal(size=(line.steps + 1,) + line.nodes),
                                 v=(rng.normal(size=(line.steps + 1, line.cells[0])),))


def test_state_files_reload_exactly(tmp_path, random_state, line):
    path = field_io.save_state(random_state, str(tmp_path / "state.csv"))
    assert (tmp_path / "state_faces.csv").exists()
    u, v = field_io.load_state(path, line)
    assert_allclose(u, random_state.u, rtol=1e-11, atol=1e-11)
    assert_allclose(v[0], random_state.v[0], rtol=1e-11, atol=1e-11)


def test_planar_state_files(tmp_path, square, rng):
    state = types.SimpleNamespace(grid=square, u=rng.normal(size=(square.steps + 1,) + square.nodes),
                                  v=(rng.normal(size=(square.steps + 1, 16, 17)), rng.normal(size=(square.steps + 1, 17, 16))))
    path = field_io.save_state(state, str(tmp_path / "planar.csv"))
    u, v = field_io.load_state(path, square)
    assert_allclose(u, state.u, rtol=1e-11, atol=1e-11)
    assert_allclose(v[1], state.v[1], rtol=1e-11, atol=1e-11)


def test_state_file_on_the_wrong_grid(tmp_path, random_state):
    path = field_io.save_state(random_state, str(tmp_path / "state.csv"))
    with pytest.raises(ConfigError):
        field_io.load_state(path, stg.interval_grid(nodes=17, horizon=0.01, steps=16))


def test_field_frame_layout(line):
    u = np.zeros((line.steps + 1,) + line.nodes)
    v = (np.ones((line.steps + 1, line.cells[0])),)
    frame = field_io.field_frame(u, v, line, slices=[0, line.steps])
    assert list(frame.columns) == ["x", "t", "value", "vx"]
    assert len(frame) == 2 * line.nodes[0]
    assert frame["t"].iloc[-1] == pytest.approx(line.horizon)
    assert frame["vx"].iloc[0] == 0.5 and frame["vx"].iloc[1] == 1.0


class TestLoadInitial:
    def test_rows_in_any_order(self, tmp_path, line):
        x = line.axes[0]
        path = tmp_path / "initial.csv"
        pd.DataFrame({"x": x, "value": x ** 2}).sample(frac=1.0, random_state=1).to_csv(path, index=False)
        assert_allclose(field_io.load_initial(str(path), line), x ** 2)

    @pytest.mark.parametrize("frame", [
        pd.DataFrame({"x": np.linspace(0, 1, 33)}),
        pd.DataFrame({"x": np.linspace(0, 1, 33) + 0.01, "value": 0.0}),
        pd.DataFrame({"x": np.linspace(0, 1, 33)[:-1], "value": 0.0}),
        pd.DataFrame({"x": np.r_[np.linspace(0, 1, 33), 0.0], "value": 0.0}),
    ])
    def test_rejects_mismatched_tables(self, tmp_path, line, frame):
        path = tmp_path / "initial.csv"
        frame.to_csv(path, index=False)
        with pytest.raises(ConfigError) as info:
            field_io.load_initial(str(path), line)
        assert info.value.key == "initial"


def test_unsupported_extension(tmp_path):
    with pytest.raises(ValueError):
        field_io.save_data(pd.DataFrame({"a": [1]}), str(tmp_path / "table.txt"))
    with pytest.raises(ValueError):
        field_io.load_data(str(tmp_path / "table.txt"))


def test_save_json_is_deterministic(tmp_path):
    first = field_io.save_json({"b": np.float64(0.5), "a": np.arange(3)}, str(tmp_path / "first.json"))
    second = field_io.save_json({"a": [0, 1, 2], "b": 0.5}, str(tmp_path / "second.json"))
    assert open(first).read() == open(second).read()
    assert field_io.load_json(first) == {"a": [0, 1, 2], "b": 0.5}
    assert json.loads(open(first).read())["a"] == [0, 1, 2]


def test_json_tables(tmp_path):
    data = pd.DataFrame({"x": [0.0, 0.5], "value": [1.0, 2.0]})
    path = str(tmp_path / "table.json")
    field_io.save_data(data, path)
    assert field_io.load_data(path)["value"].tolist() == [1.0, 2.0]


def test_save_json_twice_gives_the_same_bytes(tmp_path, rng):
    payload = {"trace": rng.normal(size=4), "nested": {"z": np.int64(3), "a": [np.float64(0.1), None]}}
    first = field_io.save_json(payload, str(tmp_path / "first.json"))
    second = field_io.save_json(payload, str(tmp_path / "second.json"))
    with open(first, "rb") as one, open(second, "rb") as two:
        assert one.read() == two.read()
