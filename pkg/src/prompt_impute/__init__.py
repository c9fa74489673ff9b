"""Train sequence predictors on incomplete time series with a learnable
feature prompt in place of imputation, next to impute-then-regress baselines."""

__version__ = "0.1.0"

from .data import Dataset, GenConfig, NormStats, TimeSeriesRecord, synthesize  # noqa: E402
from .models import ArchConfig, count_parameters, init_model  # noqa: E402
from .prompt import FeaturePrompt, fill_prompt, init_prompt  # noqa: E402
from .training import TrainConfig, TrainedRun, predict, train  # noqa: E402
