"""Variable-step BDF differentiation contexts shared by devices and circuit.

A context encodes d/dt x(t_new) ~ alpha0*x_new + alpha1*x_prev + alpha2*x_prev2.
Order 0 is the steady state (all weights zero), order 1 is backward Euler
(used on the first step and after waveform discontinuities), order 2 is the
variable-step BDF-2 whose weights are exact on quadratics.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class BdfContext:
    order: int
    dt: float
    alpha0: float
    alpha1: float
    alpha2: float

    @property
    def steady(self) -> bool:
        return self.order == 0

    def derivative(self, x_new, x_prev, x_prev2=None):
        if self.order == 0:
            return 0.0 * x_new
        if self.order == 1:
            return self.alpha0 * x_new + self.alpha1 * x_prev
        return self.alpha0 * x_new + self.alpha1 * x_prev + self.alpha2 * x_prev2

    def history_term(self, x_prev, x_prev2=None):
        """The part of the derivative that is fixed during a Newton solve."""
        if self.order == 0:
            return 0.0 * x_prev
        if self.order == 1:
            return self.alpha1 * x_prev
        return self.alpha1 * x_prev + self.alpha2 * x_prev2


STEADY = BdfContext(order=0, dt=0.0, alpha0=0.0, alpha1=0.0, alpha2=0.0)


def bdf_context(history_times, dt: float, force_order_1: bool = False) -> BdfContext:
    """Weights for the step to t = history_times[0] + dt.

    history_times holds accepted times, newest first.  With fewer than two
    history points (or after a discontinuity restart) this degrades to BDF-1.
    Equal steps h give the classic (3/2, -2, 1/2)/h weights.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    times = list(history_times)
    if force_order_1 or len(times) < 2:
        return BdfContext(order=1, dt=dt, alpha0=1.0 / dt, alpha1=-1.0 / dt, alpha2=0.0)
    h1 = dt
    h2 = times[0] - times[1]
    if h2 <= 0.0:
        raise ValueError("history times must be strictly decreasing")
    a0 = 1.0 / h1 + 1.0 / (h1 + h2)
    a1 = -(h1 + h2) / (h1 * h2)
    a2 = h1 / (h2 * (h1 + h2))
    return BdfContext(order=2, dt=dt, alpha0=a0, alpha1=a1, alpha2=a2)


def quadratic_predictor(t_new, history):
    """Extrapolate state arrays to t_new from [(t, x), ...] newest first.

    Quadratic through three points when available, linear through two,
    otherwise the newest value itself.  Used for Newton initial guesses and
    the local-truncation-error estimate.
    """
    if not history:
        raise ValueError("predictor needs at least one history point")
    if len(history) == 1:
        return history[0][1]
    t0, x0 = history[0][0], history[0][1]
    t1, x1 = history[1][0], history[1][1]
    if len(history) == 2:
        w = (t_new - t1) / (t0 - t1)
        return w * x0 + (1.0 - w) * x1
    t2, x2 = history[2][0], history[2][1]
    l0 = (t_new - t1) * (t_new - t2) / ((t0 - t1) * (t0 - t2))
    l1 = (t_new - t0) * (t_new - t2) / ((t1 - t0) * (t1 - t2))
    l2 = (t_new - t0) * (t_new - t1) / ((t2 - t0) * (t2 - t1))
    return l0 * x0 + l1 * x1 + l2 * x2
