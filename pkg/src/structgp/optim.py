"""L-BFGS maximisation with the stopping rule shared by all trainers."""
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize


class OptimizerDivergence(FloatingPointError):
    """Objective became non-finite; ``last_x`` holds the last finite iterate."""

    def __init__(self, msg, last_x):
        super().__init__(msg)
        self.last_x = last_x


@dataclass
class OptimSettings:
    max_iter: int = 2000
    tol: float = 1e-6
    patience: int = 5
    max_nonfinite: int = 50


@dataclass
class OptimResult:
    x: np.ndarray
    value: float
    n_iter: int
    converged: bool
    log: list = field(default_factory=list)


def maximize(fun, x0, settings=None, bounds=None, callback=None):
    """Maximise ``fun(x) -> (value, grad)`` with scipy's L-BFGS-B.

    Stops once the objective changes by less than ``tol`` for ``patience``
    consecutive iterations or after ``max_iter`` iterations.  Non-finite trial
    points are turned into a large penalty so the line search backtracks; a
    non-finite start raises :class:`OptimizerDivergence`.
    """
    st = settings or OptimSettings()
    x0 = np.asarray(x0, dtype=float).copy()
    v0, g0 = fun(x0)
    if not np.isfinite(v0) or not np.all(np.isfinite(g0)):
        raise OptimizerDivergence("objective is not finite at the initial point", x0)

    state = {"nonfinite": 0, "last": x0.copy(), "last_val": float(v0), "calm": 0}
    log = []

    def neg(x):
        try:
            v, g = fun(x)
        except (np.linalg.LinAlgError, FloatingPointError):
            v, g = np.nan, x
        if not np.isfinite(v) or not np.all(np.isfinite(g)):
            state["nonfinite"] += 1
            if state["nonfinite"] > st.max_nonfinite:
                raise OptimizerDivergence("objective stayed non-finite", state["last"])
            return 1e300, np.zeros_like(x)
        state["cache"] = (x.copy(), np.asarray(g, dtype=float))
        return -float(v), -np.asarray(g, dtype=float)

    def cb(intermediate_result):
        x = intermediate_result.x
        val = -float(intermediate_result.fun)
        step = float(np.linalg.norm(x - state["last"]))
        cx, g = state.get("cache", (None, None))
        if cx is None or not np.array_equal(cx, x):
            _, g = fun(x)
        rec = {
            "iteration": len(log) + 1,
            "bound": val,
            "grad_norm": float(np.linalg.norm(g)),
            "step_size": step,
        }
        log.append(rec)
        if callback is not None:
            callback(rec)
        state["calm"] = state["calm"] + 1 if abs(val - state["last_val"]) < st.tol else 0
        state["last"], state["last_val"] = x.copy(), val
        if state["calm"] >= st.patience:
            raise StopIteration

    res = optimize.minimize(
        neg, x0, jac=True, method="L-BFGS-B", bounds=bounds, callback=cb,
        options={"maxiter": st.max_iter, "maxfun": 20 * st.max_iter, "ftol": 0.0, "gtol": 1e-10},
    )
    x = res.x if np.isfinite(res.fun) and res.fun < 1e299 else state["last"]
    value, _ = fun(x)
    if not np.isfinite(value):
        raise OptimizerDivergence("optimizer finished at a non-finite point", state["last"])
    if value < state["last_val"]:
        # scipy may report a trial point; keep the best accepted iterate
        x, value = state["last"], state["last_val"]
    converged = state["calm"] >= st.patience or bool(res.success)
    return OptimResult(x=np.asarray(x), value=float(value), n_iter=len(log), converged=converged, log=log)
