"""Conformal prediction toolkit.

Score functions (thr/aps/raps), marginal and class-balanced calibration,
prediction sets, coverage/inefficiency metrics, synthetic shift benchmarks,
and a CLI harness. The conformal-training module (``cpkit.conftr``) depends
on torch and is imported on demand rather than here.
"""

from ._kernels import backend_name
from .calibration import (
    CalibratedModel,
    CalibrationSet,
    Side,
    calibrate_class_balanced,
    calibrate_marginal,
    finite_sample_quantile,
)
from .errors import (
    CalibrationError,
    ConfigError,
    CPKitError,
    DataError,
    FormatError,
    ShapeError,
    TrainingDiverged,
)
from .metrics import (
    EvalReport,
    PerClassStats,
    accuracy,
    cover_violations,
    coverage,
    evaluate_sets,
    inefficiency,
    macro_accuracy,
    macro_coverage,
    macro_inefficiency,
    per_class_coverage,
)
from .prediction import (
    membership_matrix,
    predict_batch,
    predict_set,
    set_sizes,
    sets_from_jsonl,
    sets_to_jsonl,
)
from .records import LogitRecordSet, load_records, save_records, save_records_csv
from .scores import (
    Method,
    Orientation,
    RAPS_PRESETS,
    ScoreConfig,
    aps_score,
    raps_score,
    score_matrix,
    softmax,
    sort_probs,
    thr_score,
)
from .synthetic import (
    LabelPrior,
    OracleWorld,
    ShiftKind,
    ShiftSpec,
    rng_for,
    sample_features,
    sample_records,
    split,
)

__version__ = "0.1.0"
