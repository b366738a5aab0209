"""Independent oracles shared by the unit and acceptance suites.

These deliberately avoid the package's own forward/backward code paths:
the gated-cell oracle is the textbook closed form, and gradients come
from central finite differences.
"""

import numpy as np
import pytest

from treecell.compiler import CellState, cell_backward, cell_forward, compile_tree


def rng_for(seed):
    return np.random.Generator(np.random.PCG64(seed))


def closed_form_lstm(x_gates, c_prev):
    """Textbook gated-cell equations; rows of x_gates are the four gate
    preactivations (input, forget, candidate, output)."""
    i = 1.0 / (1.0 + np.exp(-x_gates[0]))
    f = 1.0 / (1.0 + np.exp(-x_gates[1]))
    g = np.tanh(x_gates[2])
    o = 1.0 / (1.0 + np.exp(-x_gates[3]))
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c


def finite_difference_check(genome, seed, eps=1e-5, width=4):
    """Worst relative error between reverse-mode and central-difference
    gradients of all three outputs w.r.t. all ten inputs."""
    cell = compile_tree(genome)
    rng = rng_for(seed)
    base = state = None
    for _ in range(50):
        base = rng.normal(0.0, 1.0, size=(8, width))
        state = CellState(rng.normal(size=width), rng.normal(size=width),
                          rng.normal(size=width))
        # finite differences are invalid near relu kinks; redraw if close
        _, tape = cell_forward(cell, base, state, record=True)
        if all(op.func != "relu" or np.min(np.abs(tape[op.args[0]])) >= 50 * eps
               for op in cell.ops):
            break
    else:
        pytest.skip("could not find a kink-free sample")

    weights = [rng.normal(size=width) for _ in range(3)]

    def objectives(b, c_prev, d_prev):
        out = cell_forward(cell, b, CellState(state.h, c_prev, d_prev))
        return (float(weights[0] @ out.h), float(weights[1] @ out.c),
                float(weights[2] @ out.d))

    _, tape = cell_forward(cell, base, state, record=True)
    worst = 0.0
    zeros = np.zeros(width)
    for which in range(3):
        gh = weights[0] if which == 0 else zeros
        gc = weights[1] if which == 1 else zeros
        gd = weights[2] if which == 2 else zeros
        grads = cell_backward(cell, tape, gh, gc, gd)
        analytic = np.concatenate([grads.base.ravel(), grads.c_prev, grads.d_prev])
        fd = np.zeros_like(analytic)
        idx = 0
        for k in range(8):
            for u in range(width):
                bp = base.copy(); bp[k, u] += eps
                bm = base.copy(); bm[k, u] -= eps
                fd[idx] = (objectives(bp, state.c, state.d)[which]
                           - objectives(bm, state.c, state.d)[which]) / (2 * eps)
                idx += 1
        for u in range(width):
            cp = state.c.copy(); cp[u] += eps
            cm = state.c.copy(); cm[u] -= eps
            fd[idx] = (objectives(base, cp, state.d)[which]
                       - objectives(base, cm, state.d)[which]) / (2 * eps)
            idx += 1
        for u in range(width):
            dp = state.d.copy(); dp[u] += eps
            dm = state.d.copy(); dm[u] -= eps
            fd[idx] = (objectives(base, state.c, dp)[which]
                       - objectives(base, state.c, dm)[which]) / (2 * eps)
            idx += 1
        denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(fd)))
        worst = max(worst, float(np.max(np.abs(analytic - fd) / denom)))
    return worst
