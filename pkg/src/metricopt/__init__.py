"""MetricOpt: metric-aware finetuning of compact adapter parameters.

A small learned value function maps adapter parameters to a black-box
evaluation metric (misclassification rate, F-measure, Jaccard index or
area under the precision-recall curve). Trained across finetuning tasks,
it supplies search gradients that steer an otherwise loss-driven
optimizer toward better metric values.
"""

from metricopt._kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
