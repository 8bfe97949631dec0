"""nowcal: calibration toolkit for multiclass probabilistic gridded forecasts."""

__version__ = "0.1.0"

from .metrics import (  # noqa: F401
    CalibrationReport,
    ConfidenceBinning,
    RateBinning,
    ReliabilityTable,
    class_probabilities,
    compute_report,
    diagram_export,
    ece,
    etce,
    exceedance_labels,
    exceedance_probabilities,
    f1_at_threshold,
    reliability_table,
    sce,
)
from .calibrators import (  # noqa: F401
    CalibratorBundle,
    GlobalTemperature,
    LtsRegressor,
    SelectiveScaler,
    apply_calibrator,
    apply_lts,
    apply_ss,
    apply_temperature,
    fit_lts,
    fit_ss,
    fit_temperature,
    load_calibrator,
    save_calibrator,
)
from .synth import Distortion, SynthScenario, generate, planted_corruption_trigger  # noqa: F401
from .tensorio import read_tensor, validate_dataset, write_tensor  # noqa: F401
