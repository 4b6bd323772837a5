"""Black-box backdoored-input detection by scaled prediction consistency."""

__version__ = "0.1.0"

from .detector import DEFAULT_SCALES, detect_data_free, detect_data_limited, nspc, spc  # noqa: F401
from .evaluation import auroc, roc_curve  # noqa: F401
