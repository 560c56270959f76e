"""Central finite-difference checks against the autograd engine, in float64."""
from __future__ import annotations

import numpy as np

from segrefine import tensor as T

from oracles import numeric_grad

H = 1e-6
# denominators below this are treated as this, so exact-zero gradients do
# not turn roundoff into a huge relative error
REL_FLOOR = 1e-4


def relative_errors(build, leaves: dict[str, np.ndarray], points: int = 10, seed: int = 0) -> dict[str, float]:
    """Worst relative error per leaf over ``points`` random coordinates.

    ``build(tensors)`` maps a dict of float64 leaf Tensors to a scalar Tensor.
    """
    rng = np.random.default_rng(seed)
    worst = {}
    with T.precision("float64"):
        tensors = {k: T.Tensor(v.astype(np.float64), requires_grad=True) for k, v in leaves.items()}
        loss = build(tensors)
        loss.backward()
        for name, t in tensors.items():
            flat_n = t.data.size
            idx = rng.choice(flat_n, size=min(points, flat_n), replace=False)

            def f():
                with T.no_grad():
                    return build(tensors).item()

            num = numeric_grad(f, t.data, idx, H)
            ana = t.grad.reshape(-1)[idx]
            denom = np.maximum(np.maximum(np.abs(num), np.abs(ana)), REL_FLOOR)
            worst[name] = float(np.max(np.abs(num - ana) / denom))
    return worst
