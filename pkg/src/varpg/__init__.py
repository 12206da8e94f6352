from .risk_metrics import Metric, MetricKind, QuantileMethod  # noqa: F401
__version__ = "0.1.0"
