import numpy as np
import pytest

from mfgflow.flows import FlowConfig, FlowStack


def perturb(model, scale, seed=0):
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.value += scale * rng.standard_normal(p.value.shape)
    return model


def make_shift_stack(d: int, steps: int, v) -> FlowStack:
    """Exact straight-line stack: F_k(x) = x + k * v / steps."""
    v = np.asarray(v, dtype=np.float64)
    stack = FlowStack(FlowConfig(dim=d, steps=steps, width=8, seed=0))
    for block in stack.blocks:
        # for d == 1 both sub-layers act on the same coordinate
        couplings = (block.couple_a,) if d == 1 else (block.couple_a, block.couple_b)
        for coupling in couplings:
            m = len(coupling.out_idx)
            bias = coupling.cond.biases[-1] if coupling.cond.const is None else coupling.cond.const
            bias.value[m:] = v[coupling.out_idx] / steps
    return stack


@pytest.fixture
def rng():
    return np.random.default_rng(0)
