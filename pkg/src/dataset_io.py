"""
Text formats of datasets and run outputs.

imu.csv          t_ns,wx,wy,wz,ax,ay,az   (EuRoC column order)
frames.csv       t_ns,feature_id,u_px,v_px
groundtruth.csv  t_ns,px,py,pz,qw,qx,qy,qz,vx,vy,vz
scenario.json    simulator scenario (schema_version)

All timestamps are integer nanoseconds; floats are written in shortest round-trip form.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import pandas as pd
from scipy.spatial.transform import Rotation, Slerp

from enums import DatasetFiles
from errors import DatasetError
from evaluation import TrajectoryRecord
from imu_preintegration import ImuSample
from manifold_state import ImuKeyState, quat_normalize
from sliding_window_estimator import FrameInput
from utils import load_json, save_json, write_text_atomic

IMU_HEADER = ["t_ns", "wx", "wy", "wz", "ax", "ay", "az"]
FRAMES_HEADER = ["t_ns", "feature_id", "u_px", "v_px"]
GROUNDTRUTH_HEADER = ["t_ns", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz"]
TRAJECTORY_HEADER = ["t_ns", "px", "py", "pz", "qw", "qx", "qy", "qz"]
WAYPOINTS_HEADER = ["t_s", "x", "y", "z"]

_INTEGER = r"[+-]?\d+"


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    frame = pd.DataFrame(list(rows), columns=list(header))
    write_text_atomic(path, frame.to_csv(index=False, lineterminator="\n"))


def read_csv(path: str | Path, columns: int | tuple[int, ...], int_columns: int = 1) -> pd.DataFrame:
    """
    Reads a single-header numeric CSV. The first `int_columns` columns must hold integers.
    The returned frame is indexed by each row's 1-based line number; blank lines are skipped.

    Raises:
        DatasetError: When the file is missing, a row has the wrong number of fields or a
            field is not a number.
    """
    path = Path(path)
    allowed = (columns,) if isinstance(columns, int) else columns
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=False)
    except OSError as e:
        raise DatasetError(path, f"cannot read file: {e.strerror}") from e
    except pd.errors.EmptyDataError as e:
        raise DatasetError(path, "empty file, expected a header line", 1) from e
    except pd.errors.ParserError as e:
        found = re.search(r"line (\d+), saw (\d+)", str(e))
        if found is None:
            raise DatasetError(path, f"unreadable CSV: {e}") from e
        raise DatasetError(path, f"expected {allowed[0]} fields, got {found[2]}", int(found[1])) from e
    if len(raw.columns) not in allowed:
        raise DatasetError(path, f"expected {allowed[0]} fields, got {len(raw.columns)}", 1)

    raw.index = raw.index + 2
    raw = raw[~(raw.fillna("") == "").all(axis=1)]
    short = raw.isna().any(axis=1)
    if short.any():
        line = int(short.idxmax())
        raise DatasetError(path, f"expected {len(raw.columns)} fields, got {raw.loc[line].notna().sum()}", line)

    cells = raw.apply(lambda c: c.str.strip())
    values = cells.apply(pd.to_numeric, errors="coerce")
    bad = values.isna().to_numpy()
    for k in range(int_columns):
        bad[:, k] |= ~cells.iloc[:, k].str.fullmatch(_INTEGER).to_numpy(dtype=bool)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        message = f"malformed number {cells.iat[row, col]!r} in column {cells.columns[col]}"
        raise DatasetError(path, message, int(cells.index[row]))
    return values


def _increasing(path: Path, t_ns: np.ndarray, lines: np.ndarray) -> None:
    bad = np.diff(t_ns) <= 0
    if bad.any():
        k = int(np.argmax(bad)) + 1
        raise DatasetError(path, f"timestamp {t_ns[k]} not increasing", int(lines[k]))


def _stamps(table: pd.DataFrame) -> np.ndarray:
    return table.iloc[:, 0].to_numpy(dtype=np.int64)


def write_imu_csv(path: str | Path, t_ns: np.ndarray, gyro: np.ndarray, accel: np.ndarray) -> None:
    write_csv(
        path,
        IMU_HEADER,
        ([int(t), *g, *a] for t, g, a in zip(t_ns, np.asarray(gyro).tolist(), np.asarray(accel).tolist())),
    )


def read_imu_csv(path: str | Path) -> tuple[np.ndarray, list[ImuSample]]:
    path = Path(path)
    table = read_csv(path, len(IMU_HEADER))
    t_ns = _stamps(table)
    _increasing(path, t_ns, table.index.to_numpy())
    values = table.iloc[:, 1:].to_numpy(dtype=float)
    return t_ns, [ImuSample(t * 1e-9, row[3:6], row[0:3]) for t, row in zip(t_ns.tolist(), values)]


def write_frames_csv(path: str | Path, frames: Sequence[FrameInput]) -> None:
    def rows():
        for frame in frames:
            t = int(round(frame.t_image * 1e9))
            for fid, u, v in frame.tracks:
                yield [t, int(fid), float(u), float(v)]

    write_csv(path, FRAMES_HEADER, rows())


def read_frames_csv(path: str | Path) -> list[FrameInput]:
    """Groups consecutive rows that share a stamp into one frame."""
    path = Path(path)
    table = read_csv(path, len(FRAMES_HEADER), int_columns=2)
    t_ns = _stamps(table)
    fids = table.iloc[:, 1].to_numpy(dtype=np.int64)
    uv = table.iloc[:, 2:].to_numpy(dtype=float)
    lines = table.index.to_numpy()
    first = np.r_[True, t_ns[1:] != t_ns[:-1]] if len(t_ns) else np.zeros(0, dtype=bool)
    repeated = pd.DataFrame({"frame": np.cumsum(first), "fid": fids}).duplicated().to_numpy()
    if repeated.any():
        k = int(np.argmax(repeated))
        raise DatasetError(path, f"feature {fids[k]} repeated in frame {t_ns[k]}", int(lines[k]))
    starts = np.flatnonzero(first)
    _increasing(path, t_ns[starts], lines[starts])
    ends = np.r_[starts[1:], len(t_ns)]
    return [
        FrameInput(
            t_image=int(t_ns[s]) * 1e-9,
            tracks=[(int(f), float(u), float(v)) for f, (u, v) in zip(fids[s:e], uv[s:e])],
        )
        for s, e in zip(starts, ends)
    ]


@dataclass(frozen=True, eq=False)
class GroundTruth:
    t_ns: np.ndarray
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray

    @property
    def t(self) -> np.ndarray:
        return self.t_ns * 1e-9

    def records(self) -> list[TrajectoryRecord]:
        return [TrajectoryRecord(t, p, q) for t, p, q in zip(self.t, self.p, self.q)]

    def interpolate(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Linear position/velocity and slerped attitude at the times `t`."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if t.min() < self.t[0] or t.max() > self.t[-1]:
            raise ValueError("interpolation time outside the ground-truth span")
        p = np.column_stack([np.interp(t, self.t, self.p[:, k]) for k in range(3)])
        v = np.column_stack([np.interp(t, self.t, self.v[:, k]) for k in range(3)])
        xyzw = Slerp(self.t, Rotation.from_quat(self.q[:, [1, 2, 3, 0]]))(t).as_quat()
        q = xyzw[:, [3, 0, 1, 2]]
        return p, quat_normalize(np.where(q[:, :1] < 0, -q, q)), v


def write_groundtruth_csv(path: str | Path, t_ns: np.ndarray, p: np.ndarray, q: np.ndarray, v: np.ndarray) -> None:
    rows = zip(t_ns.tolist(), np.asarray(p).tolist(), np.asarray(q).tolist(), np.asarray(v).tolist())
    write_csv(path, GROUNDTRUTH_HEADER, ([t, *pp, *qq, *vv] for t, pp, qq, vv in rows))


def read_groundtruth_csv(path: str | Path) -> GroundTruth:
    path = Path(path)
    table = read_csv(path, len(GROUNDTRUTH_HEADER))
    t_ns = _stamps(table)
    _increasing(path, t_ns, table.index.to_numpy())
    if len(t_ns) < 2:
        raise DatasetError(path, "need at least two ground-truth rows")
    data = table.iloc[:, 1:].to_numpy(dtype=float)
    return GroundTruth(t_ns, data[:, 0:3], data[:, 3:7], data[:, 7:10])


def write_trajectory_csv(path: str | Path, records: Sequence[TrajectoryRecord]) -> None:
    write_csv(
        path,
        TRAJECTORY_HEADER,
        ([int(round(r.t * 1e9)), *r.p.tolist(), *r.q.tolist()] for r in records),
    )


def read_trajectory_csv(path: str | Path) -> list[TrajectoryRecord]:
    """Reads est_trajectory.csv, or the pose columns of a groundtruth.csv."""
    path = Path(path)
    table = read_csv(path, (len(TRAJECTORY_HEADER), len(GROUNDTRUTH_HEADER)))
    t_ns = _stamps(table)
    _increasing(path, t_ns, table.index.to_numpy())
    poses = table.iloc[:, 1:8].to_numpy(dtype=float)
    return [TrajectoryRecord(t * 1e-9, row[0:3], row[3:7]) for t, row in zip(t_ns.tolist(), poses)]


def read_waypoints_csv(path: str | Path) -> tuple[tuple[float, float, float, float], ...]:
    """Reads spline waypoints (t_s,x,y,z) for the waypoint_spline trajectory."""
    path = Path(path)
    table = read_csv(path, len(WAYPOINTS_HEADER), int_columns=0)
    rows = tuple(tuple(float(x) for x in row) for row in table.to_numpy(dtype=float))
    if len(rows) < 2:
        raise DatasetError(path, "need at least two waypoints")
    if any(b[0] <= a[0] for a, b in zip(rows, rows[1:])):
        raise DatasetError(path, "waypoint times must increase")
    return rows


def write_scenario(path: str | Path, scenario) -> None:
    save_json(path, scenario.to_dict())


@dataclass(frozen=True, eq=False)
class Dataset:
    root: Path
    imu_t_ns: np.ndarray
    imu: list[ImuSample]
    frames: list[FrameInput]
    groundtruth: GroundTruth | None
    scenario: dict[str, Any] | None

    def initial_state(
        self,
        td: float,
        velocity_noise: float = 0.0,
        seed: int = 0,
        configured: ImuKeyState | None = None,
    ) -> ImuKeyState:
        """
        State at the first key-state stamp t_image0 + td, interpolated from the ground truth,
        or `configured` when the dataset has none; `velocity_noise` perturbs the velocity
        seed (m/s, per axis).

        Raises:
            DatasetError: Without ground truth covering that instant and no configured state.
        """
        t0 = self.frames[0].t_image + td
        if self.groundtruth is not None:
            try:
                p, q, v = (a[0] for a in self.groundtruth.interpolate([t0]))
            except ValueError as e:
                raise DatasetError(self.root / DatasetFiles.GROUNDTRUTH, str(e)) from e
        elif configured is not None:
            p, q, v = configured.p, configured.q, configured.v
        else:
            raise DatasetError(
                self.root / DatasetFiles.GROUNDTRUTH,
                "ground truth or estimator.init_position needed to seed the first state",
            )
        if velocity_noise > 0:
            v = v + np.random.default_rng([seed, 2]).normal(0.0, velocity_noise, v.shape)
        return ImuKeyState(q=q, p=p, v=v, t_stamp=t0, t_dj=td)


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(root, "dataset directory not found")
    imu_t_ns, imu = read_imu_csv(root / DatasetFiles.IMU)
    frames = read_frames_csv(root / DatasetFiles.FRAMES)
    if not frames:
        raise DatasetError(root / DatasetFiles.FRAMES, "no frames")
    gt_path = root / DatasetFiles.GROUNDTRUTH
    groundtruth = read_groundtruth_csv(gt_path) if gt_path.exists() else None
    scenario_path = root / DatasetFiles.SCENARIO
    scenario = None
    if scenario_path.exists():
        try:
            scenario = load_json(scenario_path)
        except ValueError as e:
            raise DatasetError(scenario_path, f"not valid JSON: {e}") from e
    return Dataset(root, imu_t_ns, imu, frames, groundtruth, scenario)
