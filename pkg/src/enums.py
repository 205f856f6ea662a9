from enum import IntEnum, StrEnum


class EnvironmentKeys(StrEnum):
    LOG_LEVEL = "LOG_LEVEL"
    CONFIG_PATH = "TDCAL_CONFIG"
    SWEEP_JOBS = "TDCAL_JOBS"


class ConfigSection(StrEnum):
    ESTIMATOR = "estimator"
    IMU = "imu"
    SOLVER = "solver"
    CAMERA = "camera"
    SIMULATOR = "simulator"


class Parameterization(StrEnum):
    XYZ = "xyz"
    INV_DEPTH = "inv_depth"


class CompensationJacobian(StrEnum):
    # pose_only: velocity/gyro-bias columns left at zero; exact: full chain rule
    POSE_ONLY = "pose_only"
    EXACT = "exact"


class VariableKind(StrEnum):
    KEYSTATE = "keystate"
    FEATURE_XYZ = "feature_xyz"
    INV_DEPTH = "inv_depth"
    TD = "td"


class FactorKind(StrEnum):
    PRIOR = "prior"
    INERTIAL = "inertial"
    VISUAL_XYZ = "visual_xyz"
    VISUAL_INVDEPTH = "visual_invdepth"


class TrajectoryKind(StrEnum):
    SINUSOID3D = "sinusoid3d"
    CIRCLE = "circle"
    WAYPOINT_SPLINE = "waypoint_spline"


class DatasetFiles(StrEnum):
    IMU = "imu.csv"
    FRAMES = "frames.csv"
    GROUNDTRUTH = "groundtruth.csv"
    SCENARIO = "scenario.json"


class RunFiles(StrEnum):
    REPORT = "report.json"
    TD_TRACE = "td_trace.csv"
    EST_TRAJECTORY = "est_trajectory.csv"
    EVAL = "eval.json"
    SWEEP = "sweep.csv"
    SUMMARY = "summary.csv"


class ExitCode(IntEnum):
    SUCCESS = 0
    USAGE = 1
    DATA_ERROR = 2
    DIVERGED = 3
