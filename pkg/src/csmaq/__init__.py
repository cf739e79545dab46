"""Full-reference audio quality measurement with a cognitive salience model."""

__version__ = "0.1.0"

from ._validation import CsmaqError  # noqa: E402
from .audio import AlignedSignalPair, PipelineConfig, Waveform, load_pair, load_waveform, preprocess_pair  # noqa: E402
from .calibration import CognitiveSalienceRegressor, compute_salience, interaction_metric  # noqa: E402
from .csm import CsmModel, count_parameters, default_model, load_model, save_model, score  # noqa: E402
from .database import ListeningTestDatabase, load_manifest  # noqa: E402
from .evaluation import ThirdOrderMapper, evaluate_scores, pearson_r  # noqa: E402
from .features import CEM_NAMES, DM_NAMES, FeatureExtractor, FeatureSeries, extract_features  # noqa: E402
from .frontend import FrontEndConfig  # noqa: E402
from .mars import MARSRegressor  # noqa: E402
from .pipeline import calibrate, database_features, evaluate, mars_baseline, score_pair  # noqa: E402
from .stepwise import StepwiseRegression  # noqa: E402

__all__ = [
    "AlignedSignalPair", "CEM_NAMES", "CognitiveSalienceRegressor", "CsmModel", "CsmaqError", "DM_NAMES",
    "FeatureExtractor", "FeatureSeries", "FrontEndConfig", "ListeningTestDatabase", "MARSRegressor",
    "PipelineConfig", "StepwiseRegression", "ThirdOrderMapper", "Waveform", "calibrate", "compute_salience",
    "count_parameters", "database_features", "default_model", "evaluate", "evaluate_scores",
    "extract_features", "interaction_metric", "load_manifest", "load_model", "load_pair", "load_waveform",
    "mars_baseline", "pearson_r", "preprocess_pair", "save_model", "score", "score_pair",
]
