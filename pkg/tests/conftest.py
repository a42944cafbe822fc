"""Shared numeric helpers and a small-model config for the test suite.

The gradient checks here are the package's main correctness oracle: every
hand-written backward pass is compared against central finite differences on
float64 instances, where the difference scheme is trustworthy to ~1e-10.
"""

import numpy as np
import pytest

from dream import nn
from dream.core import RunConfig


def rel_err(a, b, floor=1e-8):
    """Worst-case elementwise relative error with an absolute floor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def assert_grads_match(loss_fn, params, analytic, h=1e-6, tol=1e-5,
                       coords=None, rng=None):
    """Check analytic gradients against central differences, in place.

    loss_fn() must return the scalar loss as a function of the current
    contents of `params` (float64 arrays, perturbed in place). `analytic`
    is the matching list of gradient arrays, computed beforehand. `coords`
    caps the number of entries checked per array (sampled without
    replacement) to keep big sweeps inside the runtime budget.
    Returns the worst relative error seen.
    """
    worst = 0.0
    for p, g in zip(params, analytic):
        assert p.dtype == np.float64, "finite differences need float64 parameters"
        idxs = np.arange(p.size)
        if coords is not None and p.size > int(coords):
            assert rng is not None, "coordinate sampling needs an rng"
            idxs = rng.choice(p.size, size=int(coords), replace=False)
        diffs, nmax = [], 0.0
        for fi in idxs:
            orig = p.flat[fi]
            p.flat[fi] = orig + h
            up = loss_fn()
            p.flat[fi] = orig - h
            dn = loss_fn()
            p.flat[fi] = orig
            num = (up - dn) / (2.0 * h)
            diffs.append((abs(float(g.flat[fi]) - num), fi, num))
            nmax = max(nmax, abs(num))
        # max-norm relative error of the gradient vector: exact at coordinates
        # with saturated (effectively zero) true gradients, where the central
        # difference itself carries ~1e-9 of float64 cancellation noise
        scale = max(float(np.max(np.abs(g))), nmax)
        diff, fi, num = max(diffs)
        err = diff / max(scale, 1e-3)
        assert err < tol, (f"gradient mismatch at flat index {fi}: "
                           f"analytic {float(g.flat[fi]):.10g} vs numeric {num:.10g} "
                           f"(vector rel {err:.2e}, scale {scale:.3g})")
        worst = max(worst, err)
    return worst


def iter_layers(obj):
    """Yield leaf layers of a Sequential/Residual/Parallel tree."""
    if isinstance(obj, nn.Sequential):
        for layer in obj.layers:
            yield from iter_layers(layer)
    elif isinstance(obj, nn.Residual):
        for layer in obj.inner:
            yield from iter_layers(layer)
    elif isinstance(obj, nn.Parallel):
        for branch in obj.branches:
            for layer in branch:
                yield from iter_layers(layer)
    else:
        yield obj


def buffer_param_ids(net) -> set:
    """ids of parameter arrays that are fixed buffers (zero grads by contract).

    Standardize keeps mu/sd in params() so checkpoints carry them, but the
    optimizer never moves them; finite differences against the loss would
    report a real (nonzero) sensitivity, so sweeps must skip these arrays.
    """
    out = set()
    for layer in iter_layers(net):
        if isinstance(layer, nn.Standardize):
            out.update(id(p) for p in layer.params())
    return out


def trainable_params_and_grads(net):
    """(params, grads) aligned lists with fixed buffers filtered out."""
    skip = buffer_param_ids(net)
    pairs = [(p, g) for p, g in zip(net.params(), net.grads()) if id(p) not in skip]
    return [p for p, _ in pairs], [g for _, g in pairs]


def tiny_config(**overrides) -> RunConfig:
    """Smallest config the architecture constraints allow; fast to train."""
    base = dict(
        image_size=16, voxel_dim=64, embed_dim=16, tokens=2,
        hidden_dim=64, res_blocks=1, num_shapes=2, num_colors=4,
        train_items=24, test_items=8, unpaired_items=8,
        batch_size=8, epochs=3, noise_sigma=0.01,
        stage1_epochs=2, stage2_epochs=2, stage3_epochs=1,
        decoder_batch_size=8, seed=11,
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture
def cfg_tiny() -> RunConfig:
    return tiny_config()
