"""
Online sliding-window estimator with time-offset calibration.

Every frame becomes a key state stamped t_image + td (td being the estimate at that moment,
frozen into the state as t_dj). Later td updates reach the visual factors only through pose
compensation. When the window overflows, the oldest key state is marginalized together with
the features whose factors touch it; those features come back as fresh variables that only
carry observations made afterwards.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from config import EstimatorConfig
from decorators import ensure_initialized
from enums import Parameterization, VariableKind
from errors import (
    EstimatorError,
    FactorEvaluationError,
    ImuGapError,
    InsufficientImu,
    NonMonotonicTimestamp,
    TimeOffsetDiverged,
)
from imu_preintegration import ImuSample, batch_between, interpolate_sample, predict_state, preintegrate
from manifold_state import ImuKeyState
from nlls_solver import (
    LmReport,
    PriorFactor,
    VariableLayout,
    WindowProblem,
    build_normal_equations,
    diagonal_prior,
    lm_solve,
    marginalize,
)
from visual_factors import FeatureInvDepth, TimeOffset, compensate_pose, feature_world_from_anchor
from window_factors import TD_KEY, InertialFactor, InvDepthFactorBatch, XyzFactorBatch

TD_BOUND = 0.5
MIN_TRIANGULATED_DEPTH = 0.1
PROGRESS_EVERY = 30


@dataclass
class FrameInput:
    t_image: float
    tracks: list[tuple[int, float, float]] = field(default_factory=list)

    def __post_init__(self):
        ids = [t[0] for t in self.tracks]
        if len(ids) != len(set(ids)):
            raise ValueError(f"frame at {self.t_image:.6f}s repeats a feature id")


@dataclass(frozen=True, eq=False)
class EstimatorOutput:
    frame_index: int
    t_image: float
    state: ImuKeyState
    td: float
    cost: float
    iterations: int
    lm_status: str
    window_size: int
    marginalized: bool
    prior_dim: int
    n_visual: int = 0
    n_dropped: int = 0
    n_outliers: int = 0


@dataclass
class _Slot:
    uid: int
    frame_index: int
    t_image: float

    @property
    def key(self) -> str:
        return f"x{self.uid}"


@dataclass
class FeatureTrack:
    feature_id: int
    generation: int = 0
    pixels: dict[int, np.ndarray] = field(default_factory=dict)
    active: list[int] = field(default_factory=list)
    anchor_uid: int | None = None
    initialized: bool = False

    @property
    def key(self) -> str:
        return f"f{self.feature_id}.{self.generation}"


def _state_key(uid: int) -> str:
    return f"x{uid}"


class SlidingWindowEstimator:
    def __init__(self, config: EstimatorConfig | None = None):
        self.config = config or EstimatorConfig()
        self.model = self.config.visual_model()
        self.feature_kind = (
            VariableKind.INV_DEPTH
            if self.config.parameterization == Parameterization.INV_DEPTH
            else VariableKind.FEATURE_XYZ
        )
        self.initialized = False
        self.frame_count = 0
        self._imu: deque[ImuSample] = deque()
        self._slots: list[_Slot] = []
        self._values: dict[str, Any] = {TD_KEY: float(self.config.init_td)}
        self._inertial: list[InertialFactor] = []
        self._tracks: dict[int, FeatureTrack] = {}
        self._prior: PriorFactor | None = None
        self._next_uid = 0

    @property
    def window(self) -> list[ImuKeyState]:
        return [self._values[s.key] for s in self._slots]

    @property
    def tracks(self) -> dict[int, FeatureTrack]:
        return self._tracks

    @property
    def prior(self) -> PriorFactor | None:
        return self._prior

    def values(self) -> dict[str, Any]:
        return dict(self._values)

    def process_imu(self, s: ImuSample) -> None:
        if self._imu and s.t <= self._imu[-1].t:
            raise NonMonotonicTimestamp(
                f"IMU sample at {s.t:.9f}s does not follow {self._imu[-1].t:.9f}s", self.frame_count
            )
        self._imu.append(s)
        if self._slots:
            oldest = self._values[self._slots[0].key].t_stamp
            while len(self._imu) > 2 and self._imu[1].t <= oldest:
                self._imu.popleft()

    def _gyro_at(self, t: float) -> np.ndarray | None:
        if len(self._imu) < 2 or self._imu[0].t > t or self._imu[-1].t < t:
            return None
        samples = list(self._imu)
        times = np.array([s.t for s in samples])
        k = min(max(int(np.searchsorted(times, t)), 1), len(samples) - 1)
        return interpolate_sample(samples[k - 1], samples[k], t).gyro

    def _new_slot(self, frame: FrameInput) -> _Slot:
        slot = _Slot(self._next_uid, self.frame_count, frame.t_image)
        self._next_uid += 1
        self.frame_count += 1
        self._slots.append(slot)
        return slot

    def bootstrap(self, first_frames: Sequence[FrameInput], initial_state: ImuKeyState) -> list[EstimatorOutput]:
        """
        Starts the window at the first frame with `initial_state` (ground truth or a
        configured guess) held by a diagonal prior, then processes the remaining frames.
        """
        if self.initialized:
            raise EstimatorError("estimator already bootstrapped", self.frame_count)
        if not first_frames:
            raise ValueError("bootstrap needs at least one frame")
        cfg = self.config
        first = first_frames[0]
        td = float(cfg.init_td)
        t_stamp = first.t_image + td
        gyro = self._gyro_at(t_stamp)
        state = replace(
            initial_state,
            t_stamp=t_stamp,
            t_dj=td,
            gyro_raw=initial_state.gyro_raw if gyro is None else gyro,
        )
        slot = self._new_slot(first)
        self._values[slot.key] = state
        sigmas = {slot.key: cfg.prior_sigmas()}
        kinds = {slot.key: VariableKind.KEYSTATE}
        if cfg.calibrate_td:
            sigmas[TD_KEY] = np.array([cfg.prior_sigma_td])
            kinds[TD_KEY] = VariableKind.TD
        self._prior = PriorFactor(diagonal_prior(sigmas, kinds, self._values))
        self.initialized = True
        self._add_observations(slot, first)
        logging.info(f"Bootstrapped at t={t_stamp:.3f}s with td={td * 1e3:.2f} ms")

        outputs = [self._output(slot, LmReport(status="bootstrap"), marginalized=False)]
        outputs.extend(self.process_frame(f) for f in first_frames[1:])
        return outputs

    @ensure_initialized
    def current_time_offset(self) -> float:
        return float(self._values[TD_KEY])

    @ensure_initialized
    def process_frame(self, f: FrameInput) -> EstimatorOutput:
        cfg = self.config
        index = self.frame_count
        td = self.current_time_offset()
        t_stamp = f.t_image + td
        prev_slot = self._slots[-1]
        prev = self._values[prev_slot.key]
        if t_stamp <= prev.t_stamp:
            raise NonMonotonicTimestamp(f"key-state stamp {t_stamp:.6f}s does not follow {prev.t_stamp:.6f}s", index)
        if not self._imu or self._imu[-1].t < t_stamp:
            raise InsufficientImu(f"IMU buffer does not reach {t_stamp:.6f}s", index)
        try:
            batch = batch_between(list(self._imu), prev.t_stamp, t_stamp)
            preint = preintegrate(batch, prev.b_a, prev.b_g, cfg.imu)
        except ImuGapError as e:
            raise InsufficientImu(str(e), index) from e

        slot = self._new_slot(f)
        self._values[slot.key] = predict_state(prev, preint, cfg.world, t_stamp, td, batch[-1].gyro)
        self._inertial.append(
            InertialFactor(prev_slot.key, slot.key, preint, cfg.world, cfg.relinearization_threshold)
        )
        self._add_observations(slot, f)
        self._initialize_features()

        report, n_visual = self._optimize()
        for factor in self._inertial:
            factor.refresh(self._values)
        td_now = self._values[TD_KEY]
        if not abs(td_now) < TD_BOUND:
            raise TimeOffsetDiverged(f"td estimate {td_now * 1e3:.1f} ms left the +/-500 ms bound", index)
        n_outliers = self._reject_outliers()

        marginalized = False
        if len(self._slots) > cfg.window_size:
            self.marginalize_oldest()
            marginalized = True
        out = self._output(slot, report, marginalized, n_visual=n_visual, n_outliers=n_outliers)
        if index % PROGRESS_EVERY == 0:
            logging.info(
                f"frame {index}: td={td_now * 1e3:.2f} ms cost={report.final_cost:.4g} "
                f"window={len(self._slots)} features={n_visual}"
            )
        return out

    def _output(self, slot: _Slot, report: LmReport, marginalized: bool, **counts) -> EstimatorOutput:
        return EstimatorOutput(
            frame_index=slot.frame_index,
            t_image=slot.t_image,
            state=self._values[slot.key],
            td=float(self._values[TD_KEY]),
            cost=report.final_cost,
            iterations=report.iterations,
            lm_status=report.status,
            window_size=len(self._slots),
            marginalized=marginalized,
            prior_dim=self._prior.prior.dim if self._prior else 0,
            n_dropped=report.dropped,
            **counts,
        )

    def _add_observations(self, slot: _Slot, frame: FrameInput) -> None:
        inv_depth = self.feature_kind == VariableKind.INV_DEPTH
        for fid, u, v in frame.tracks:
            track = self._tracks.get(fid)
            if track is None:
                track = self._tracks[fid] = FeatureTrack(fid)
                track.pixels[slot.uid] = np.array([u, v], dtype=float)
                if inv_depth:
                    track.anchor_uid = slot.uid
                else:
                    track.active.append(slot.uid)
                continue
            track.pixels[slot.uid] = np.array([u, v], dtype=float)
            if inv_depth and track.anchor_uid is None:
                track.anchor_uid = slot.uid
            else:
                track.active.append(slot.uid)

    def _camera_ray(self, uid: int, pixel: np.ndarray, td: float) -> tuple[np.ndarray, np.ndarray]:
        """Camera centre and (z = 1 scaled) ray direction in world for `pixel` seen from slot `uid`."""
        R, p = compensate_pose(self._values[_state_key(uid)], TimeOffset(td))
        ext = self.model.extrinsics
        xy = self.model.intrinsics.normalize(pixel)
        return p + R @ ext.p_ic, R @ ext.R_ic @ np.array([xy[0], xy[1], 1.0])

    def triangulate(self, uid_a: int, pixel_a: np.ndarray, uid_b: int, pixel_b: np.ndarray) -> tuple[float, np.ndarray]:
        """
        Two-view midpoint triangulation.

        Returns:
            (depth along the first camera's optical axis, world point); the depth falls back to
            `default_depth` below the parallax threshold or for points not in front.
        """
        td = float(self._values[TD_KEY])
        c_a, d_a = self._camera_ray(uid_a, pixel_a, td)
        c_b, d_b = self._camera_ray(uid_b, pixel_b, td)
        cos_parallax = d_a @ d_b / (np.linalg.norm(d_a) * np.linalg.norm(d_b))
        parallax = np.degrees(np.arccos(np.clip(cos_parallax, -1.0, 1.0)))
        depth = self.config.default_depth
        if parallax >= self.config.min_parallax_deg:
            (s, _), *_ = np.linalg.lstsq(np.column_stack([d_a, -d_b]), c_b - c_a, rcond=None)
            if s > MIN_TRIANGULATED_DEPTH:
                depth = float(s)
        return depth, c_a + depth * d_a

    def _initialize_features(self) -> None:
        inv_depth = self.feature_kind == VariableKind.INV_DEPTH
        for track in self._tracks.values():
            if track.initialized:
                continue
            if inv_depth and track.active:
                a, b = track.anchor_uid, track.active[-1]
            elif not inv_depth and len(track.active) >= 2:
                a, b = track.active[0], track.active[-1]
            else:
                continue
            try:
                depth, point = self.triangulate(a, track.pixels[a], b, track.pixels[b])
            except FactorEvaluationError:
                # compensation out of range for an old slot; retry on a later frame
                continue
            self._values[track.key] = 1.0 / depth if inv_depth else point
            track.initialized = True

    def _in_solve(self, track: FeatureTrack) -> bool:
        needed = 1 if self.feature_kind == VariableKind.INV_DEPTH else 2
        return track.initialized and len(track.active) >= needed

    def _visual_batch(self, tracks: Sequence[FeatureTrack]):
        """The batched visual factor over all active observations of `tracks`, plus its row map."""
        rows = [(t, uid) for t in tracks for uid in t.active]
        if not rows:
            return None, rows
        z = np.array([t.pixels[uid] for t, uid in rows])
        targets = [_state_key(uid) for _, uid in rows]
        features = [t.key for t, _ in rows]
        if self.feature_kind == VariableKind.FEATURE_XYZ:
            return XyzFactorBatch(targets, features, z, self.model, self.config.huber_threshold), rows
        anchors = [_state_key(t.anchor_uid) for t, _ in rows]
        anchor_obs = self.model.intrinsics.normalize(np.array([t.pixels[t.anchor_uid] for t, _ in rows]))
        return (
            InvDepthFactorBatch(anchors, targets, features, anchor_obs, z, self.model, self.config.huber_threshold),
            rows,
        )

    def _kind(self, key: str) -> VariableKind:
        if key == TD_KEY:
            return VariableKind.TD
        return VariableKind.KEYSTATE if key.startswith("x") else self.feature_kind

    def _layout(self, keys: Sequence[str]) -> VariableLayout:
        keys = [k for k in dict.fromkeys(keys) if k != TD_KEY or self.config.calibrate_td]
        return VariableLayout.from_variables((k, self._kind(k)) for k in keys)

    def _optimize(self) -> tuple[LmReport, int]:
        tracks = [t for t in self._tracks.values() if self._in_solve(t)]
        batch, rows = self._visual_batch(tracks)
        factors = [self._prior, *self._inertial] + ([batch] if batch is not None else [])
        keys = [s.key for s in self._slots] + [t.key for t in tracks] + [TD_KEY]
        layout = self._layout(keys)
        self._values, report = lm_solve(WindowProblem(layout, self._values, factors), self.config.solver)
        if report.dropped:
            logging.warning(f"frame {self.frame_count - 1}: {report.dropped} visual factor(s) dropped")
        return report, len(rows)

    def _reject_outliers(self) -> int:
        tracks = [t for t in self._tracks.values() if self._in_solve(t)]
        batch, rows = self._visual_batch(tracks)
        if batch is None:
            return 0
        lin = batch.linearize(self._values, with_jacobians=False)
        norms = np.linalg.norm(lin.residuals, axis=1)
        bad = np.flatnonzero((norms > self.config.outlier_threshold) | (~lin.valid))
        for n in bad:
            track, uid = rows[n]
            track.active.remove(uid)
            track.pixels.pop(uid, None)
        if len(bad):
            logging.warning(f"frame {self.frame_count - 1}: removed {len(bad)} outlier observation(s)")
        return len(bad)

    def _world_point(self, track: FeatureTrack) -> np.ndarray:
        value = self._values[track.key]
        if self.feature_kind == VariableKind.FEATURE_XYZ:
            return np.asarray(value, dtype=float)
        anchor = self._values[_state_key(track.anchor_uid)]
        anchor_obs = self.model.intrinsics.normalize(track.pixels[track.anchor_uid])
        f = FeatureInvDepth(track.feature_id, value, track.anchor_uid, anchor_obs)
        return feature_world_from_anchor(
            f, anchor, self.model.extrinsics, TimeOffset(self._values[TD_KEY]), self.config.min_inverse_depth
        )

    def _drop_track(self, track: FeatureTrack) -> None:
        self._values.pop(track.key, None)
        del self._tracks[track.feature_id]

    def _reintroduce(self, track: FeatureTrack, point: np.ndarray) -> None:
        """Fresh variable for a marginalized feature, keeping only its retained pixel history."""
        self._values.pop(track.key, None)
        track.generation += 1
        track.active = []
        if not track.pixels:
            del self._tracks[track.feature_id]
            return
        if self.feature_kind == VariableKind.FEATURE_XYZ:
            self._values[track.key] = point
            track.initialized = True
            return
        track.anchor_uid = max(track.pixels)
        try:
            R, p = compensate_pose(self._values[_state_key(track.anchor_uid)], TimeOffset(self._values[TD_KEY]))
        except FactorEvaluationError:
            del self._tracks[track.feature_id]
            return
        ext = self.model.extrinsics
        depth = float((ext.R_ic.T @ (R.T @ (point - p) - ext.p_ic))[2])
        if depth <= MIN_TRIANGULATED_DEPTH or 1.0 / depth < self.config.min_inverse_depth:
            del self._tracks[track.feature_id]
            return
        self._values[track.key] = 1.0 / depth
        track.initialized = True

    @ensure_initialized
    def marginalize_oldest(self) -> None:
        """
        Folds the oldest key state, its inertial factor, the current prior and every feature
        whose factors touch it into a new prior over the remaining variables.
        """
        if len(self._slots) < 2:
            raise EstimatorError("cannot marginalize a window with a single key state", self.frame_count)
        oldest = self._slots[0]
        inv_depth = self.feature_kind == VariableKind.INV_DEPTH
        in_solve = [t for t in self._tracks.values() if self._in_solve(t)]
        dropped_tracks = [
            t for t in in_solve if (t.anchor_uid == oldest.uid if inv_depth else oldest.uid in t.active)
        ]
        batch, _ = self._visual_batch(dropped_tracks)
        factors = [self._prior, self._inertial[0]] + ([batch] if batch is not None else [])

        drop_keys = [oldest.key] + [t.key for t in dropped_tracks]
        touched = set().union(*(f.variables() for f in factors))
        retained = [k for k in [s.key for s in self._slots[1:]] + [TD_KEY] if k in touched]
        layout = self._layout(drop_keys + retained)
        ne = build_normal_equations(factors, layout, self._values)
        drop_set = set(drop_keys)
        prior = marginalize(ne.H, ne.b, layout.columns(drop_keys))
        keep = [k for k in layout.keys if k not in drop_set]
        self._prior = PriorFactor(prior.with_linearization_point(keep, layout.kinds, self._values))
        logging.debug(
            "Marginalized %s with %d feature(s); prior %dx%d",
            oldest.key,
            len(dropped_tracks),
            prior.J_p.shape[0],
            prior.J_p.shape[1],
        )

        points = {}
        for track in dropped_tracks:
            try:
                points[track.feature_id] = self._world_point(track)
            except FactorEvaluationError:
                points[track.feature_id] = None

        self._slots.pop(0)
        self._inertial.pop(0)
        self._values.pop(oldest.key)
        dropped_ids = {t.feature_id for t in dropped_tracks}
        for track in list(self._tracks.values()):
            track.pixels.pop(oldest.uid, None)
            if oldest.uid in track.active:
                track.active.remove(oldest.uid)
            if track.feature_id in dropped_ids:
                point = points[track.feature_id]
                if point is None:
                    self._drop_track(track)
                else:
                    self._reintroduce(track, point)
            elif not track.pixels:
                self._drop_track(track)
            elif inv_depth and track.anchor_uid == oldest.uid:
                self._values.pop(track.key, None)
                track.anchor_uid = min(track.pixels)
                track.active = [u for u in track.active if u != track.anchor_uid]
                track.initialized = False


def run_stream(
    estimator: SlidingWindowEstimator,
    imu: Sequence[ImuSample],
    frames: Sequence[FrameInput],
    initial_state: ImuKeyState,
) -> list[EstimatorOutput]:
    """
    Feeds an IMU stream and frames in timestamp order: before each frame, IMU samples up to
    t_image + td + imu_lookahead are pushed. Stops at the first frame the IMU no longer covers.
    """
    lookahead = estimator.config.imu_lookahead
    i = 0

    def feed(until: float) -> None:
        nonlocal i
        while i < len(imu) and imu[i].t <= until:
            estimator.process_imu(imu[i])
            i += 1

    if not frames:
        return []
    feed(frames[0].t_image + estimator.config.init_td + lookahead)
    outputs = estimator.bootstrap([frames[0]], initial_state)
    for frame in frames[1:]:
        td = estimator.current_time_offset()
        feed(frame.t_image + td + lookahead)
        if i == 0 or imu[i - 1].t < frame.t_image + td:
            logging.info(f"IMU stream ends before frame at {frame.t_image:.3f}s; stopping")
            break
        outputs.append(estimator.process_frame(frame))
    return outputs
