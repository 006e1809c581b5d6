from .archspec import ArchSpec, ExperimentConfig, SamplerConfig
from .factory import assemble, audit
from .engine import evaluate, train, train_progressive
from .plotter import ReportPlotter
