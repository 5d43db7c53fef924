"""CSV and JSON import/export for fields, reports and run summaries."""
import json
import logging
import os

import numpy as np
import pandas as pd

from packages import space_time_grid as stg
from packages.errors import ConfigError

logger = logging.getLogger(__name__)

SPATIAL_COLUMNS = ("x", "y")
FLUX_COLUMNS = ("vx", "vy")


def load_data(data_path):
    """Load a table from CSV or JSON based on file extension."""
    if data_path.endswith('.csv'):
        return pd.read_csv(data_path)
    elif data_path.endswith('.json'):
        return pd.read_json(data_path, orient="records")
    else:
        raise ValueError("Unsupported file format. Only CSV and JSON are supported.")


def save_data(data, output_path):
    """Save a table to CSV or JSON based on file extension."""
    if output_path.endswith('.csv'):
        data.to_csv(output_path, index=False, float_format="%.12g")
    elif output_path.endswith('.json'):
        data.to_json(output_path, orient="records", double_precision=12)
    else:
        raise ValueError("Unsupported file format. Only CSV and JSON are supported.")
    logger.info("Saved %d rows to %s", len(data), output_path)


def faces_to_nodes(v, grid):
    """Average each face family onto the nodes; the zero boundary-normal faces are padded back in."""
    out = []
    for k, component in enumerate(v):
        axis = component.ndim - grid.dimension + k
        pad = [(0, 0)] * component.ndim
        pad[axis] = (1, 1)
        padded = np.pad(component, pad)
        upper = np.take(padded, range(1, padded.shape[axis]), axis=axis)
        lower = np.take(padded, range(0, padded.shape[axis] - 1), axis=axis)
        out.append(0.5 * (upper + lower))
    return tuple(out)


def field_frame(u, v, grid, slices=None):
    """
    Long-format table of a state: one row per (slice, node) with columns
    x[, y], t, value and the node averages vx[, vy] of the face field.
    """
    slices = np.arange(grid.steps + 1) if slices is None else np.atleast_1d(slices)
    coords = stg.node_coordinates(grid)
    nodal_v = faces_to_nodes(v, grid) if v is not None else ()
    frames = []
    for n in slices:
        columns = {name: c.ravel() for name, c in zip(SPATIAL_COLUMNS, coords)}
        columns["t"] = np.full(coords[0].size, grid.times[n])
        columns["value"] = u[n].ravel()
        for name, component in zip(FLUX_COLUMNS, nodal_v):
            columns[name] = component[n].ravel()
        frames.append(pd.DataFrame(columns))
    return pd.concat(frames, ignore_index=True)


def save_snapshot(state, output_path, slices=None):
    os.makedirs(os.path.dirname(output_path) or ".", exist_ok=True)
    save_data(field_frame(state.u, state.v, state.grid, slices), output_path)
    return output_path


def load_initial(data_path, grid):
    """
    Read initial node values from a table with columns x[, y], value.

    Rows may come in any order; they are matched to the grid nodes by
    coordinates, and every node must be present exactly once.
    """
    data = load_data(data_path)
    names = list(SPATIAL_COLUMNS[:grid.dimension])
    missing = [c for c in names + ["value"] if c not in data.columns]
    if missing:
        raise ConfigError(f"Initial data {data_path} lacks columns {missing}", section="problem", key="initial")
    data = data.dropna(subset=names + ["value"])
    if data.duplicated(subset=names).any():
        raise ConfigError(f"Initial data {data_path} repeats node coordinates", section="problem", key="initial")
    indices = []
    for name, axis in zip(names, grid.axes):
        index = np.rint((data[name].to_numpy() - axis[0]) / (axis[1] - axis[0])).astype(int)
        if np.any(index < 0) or np.any(index >= len(axis)) or not np.allclose(axis[np.clip(index, 0, len(axis) - 1)],
                                                                               data[name].to_numpy(), atol=1e-9):
            raise ConfigError(f"Column {name} of {data_path} does not match the grid nodes", section="problem",
                              key="initial")
        indices.append(index)
    if len(data) != int(np.prod(grid.nodes)):
        raise ConfigError(f"Initial data {data_path} has {len(data)} rows for {int(np.prod(grid.nodes))} nodes",
                          section="problem", key="initial")
    u0 = np.empty(grid.nodes)
    u0[tuple(indices)] = data["value"].to_numpy()
    return u0


def save_json(payload, output_path):
    """Write a JSON document with sorted keys so that re-runs are byte-identical."""
    os.makedirs(os.path.dirname(output_path) or ".", exist_ok=True)
    with open(output_path, "w") as handle:
        handle.write(json.dumps(_plain(payload), sort_keys=True, indent=2))
        handle.write("\n")
    logger.info("Saved %s", output_path)
    return output_path


def load_json(data_path):
    with open(data_path) as handle:
        return json.load(handle)


def save_report(report, output_path):
    return save_json(report.to_dict(), output_path)


def _plain(value):
    """numpy scalars and arrays to built-in types."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    return value


def face_frame(v, grid, slices=None):
    """Long-format table of the interior faces: axis, x[, y], t, value."""
    slices = np.arange(grid.steps + 1) if slices is None else np.atleast_1d(slices)
    frames = []
    for axis, component in enumerate(v):
        coords = stg.face_coordinates(grid, axis)
        for n in slices:
            columns = {"axis": np.full(coords[0].size, axis)}
            columns.update({name: c.ravel() for name, c in zip(SPATIAL_COLUMNS, coords)})
            columns["t"] = np.full(coords[0].size, grid.times[n])
            columns["value"] = component[n].ravel()
            frames.append(pd.DataFrame(columns))
    return pd.concat(frames, ignore_index=True)


def faces_path(snapshot_path):
    root, extension = os.path.splitext(snapshot_path)
    return f"{root}_faces{extension}"


def save_state(state, output_path):
    """Node snapshot at ``output_path`` plus the exact face field next to it, all slices."""
    save_snapshot(state, output_path)
    save_data(face_frame(state.v, state.grid), faces_path(output_path))
    return output_path


def _slice_index(times, grid):
    index = np.rint(np.asarray(times) / grid.dt).astype(int)
    if np.any(index < 0) or np.any(index > grid.steps):
        raise ConfigError("Snapshot times do not match the configured time grid", section="problem", key="steps")
    return index


def load_state(snapshot_path, grid):
    """Read (u, v) written by ``save_state`` back onto ``grid``."""
    nodes = load_data(snapshot_path)
    names = list(SPATIAL_COLUMNS[:grid.dimension])
    shape = (grid.steps + 1,) + grid.nodes
    if len(nodes) != int(np.prod(shape)):
        raise ConfigError(f"{snapshot_path} has {len(nodes)} rows, the grid needs {int(np.prod(shape))}",
                          section="problem", key="nodes")
    nodes = nodes.assign(n=_slice_index(nodes["t"], grid)).sort_values(["n"] + names, kind="mergesort")
    u = nodes["value"].to_numpy().reshape(shape)

    faces = load_data(faces_path(snapshot_path))
    v = []
    for axis in range(grid.dimension):
        part = faces[faces["axis"] == axis]
        part = part.assign(n=_slice_index(part["t"], grid)).sort_values(["n"] + names, kind="mergesort")
        face_shape = list(grid.nodes)
        face_shape[axis] -= 1
        v.append(part["value"].to_numpy().reshape((grid.steps + 1,) + tuple(face_shape)))
    return u, tuple(v)
