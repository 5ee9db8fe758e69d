"""Smallest possible loss/metric disagreement, for demos and sanity checks.

The training loss is a quadratic bowl at one point; the evaluation metric
is another quadratic bowl at the origin. An optimizer that only follows
the loss therefore walks straight away from the metric optimum, which
makes this 2-D problem a millisecond-scale probe of whether metric
guidance actually changes where an optimizer goes.
"""

import numpy as np

LOSS_ARGMIN = np.array([1.0, -0.7])
METRIC_OFFSET = 0.05       # keeps the metric bowl strictly positive
INIT_MEAN = 0.8            # start away from both optima
INIT_STD = 0.2


def bowl_value(phi):
    phi = np.asarray(phi, dtype=np.float64).ravel()
    return METRIC_OFFSET + 0.5 * float(phi @ phi)


class ToyMismatchTask:
    """Duck-typed finetuning task over 2 parameters with a full-batch loss."""

    dim = 2

    def init_phi(self, rng):
        return rng.normal(INIT_MEAN, INIT_STD, size=self.dim)

    def batches(self, batch_size, n, rng):
        # the loss is deterministic; batch selectors are placeholders
        return [None] * n

    def loss(self, phi, split="train"):
        d = phi - LOSS_ARGMIN
        return 0.5 * float(d @ d)

    def loss_grad(self, phi, sel=None):
        d = phi - LOSS_ARGMIN
        return 0.5 * float(d @ d), d.copy()

    # the "black-box" metric is the bowl itself, identical on every split
    def metric_minimized(self, phi, split="val"):
        return bowl_value(phi)

    def metric_raw(self, phi, split="val"):
        return bowl_value(phi)


class QuadraticBowl:
    """Value-function stand-in whose predictions are exact by construction.

    Implements the prediction surface the optimizers consume (`predict`,
    `predict_grad`) for the metric f(phi) = offset + 0.5 |phi|^2.
    """

    def predict(self, phis, mode="eval"):
        phis = np.atleast_2d(np.asarray(phis, dtype=np.float64))
        return METRIC_OFFSET + 0.5 * np.sum(phis ** 2, axis=1)

    def predict_grad(self, phi):
        phi = np.asarray(phi, dtype=np.float64).ravel()
        return bowl_value(phi), phi.copy()
