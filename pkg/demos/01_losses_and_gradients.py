#!/usr/bin/env python3
"""Loss walkthrough on a six-item toy batch.

Prints every loss the trainers optimize, checks a few analytic gradient
entries against central finite differences, and verifies the two mixing
identities (exact convex reconstruction, cross-entropy endpoints) so the
arithmetic can be eyeballed end to end.
"""

import numpy as np

from dream.core import child_rng
from dream.rpkm import stage1_loss_and_grad, stage2_loss_and_grad
from dream.rvac import (TripletBatch, combined_loss_and_grad, contrastive_loss_and_grad,
                        mixco_loss, mixco_loss_and_grad, mixco_mix)

TAU = 0.07
ALPHA = 0.3
BETA = 0.9


def fd(loss_fn, x, index, h=1e-6):
    """Central-difference derivative of loss_fn wrt one coordinate of x."""
    orig = x.flat[index]
    x.flat[index] = orig + h
    up = loss_fn()
    x.flat[index] = orig - h
    dn = loss_fn()
    x.flat[index] = orig
    return (up - dn) / (2.0 * h)


def unit_rows(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def main():
    rng = np.random.default_rng(0)
    n, dim = 6, 12

    # --- 1. a toy batch: predictions p against text/image targets c, v
    # (unit rows, like the encoder emits; chance level is 2 ln n ~ 3.58)
    p = unit_rows(rng.standard_normal((n, dim)))
    c = unit_rows(rng.standard_normal((n, dim)))
    v = unit_rows(rng.standard_normal((n, dim)))

    loss, dp, dc, dv = contrastive_loss_and_grad(p, c, v, TAU)
    print(f"contrastive loss (both target streams): {loss:.6f}")
    got = fd(lambda: contrastive_loss_and_grad(p, c, v, TAU)[0], p, 0)
    print(f"  dL/dp[0,0] analytic {dp[0, 0]:+.8f}  finite-diff {got:+.8f}")

    # --- 2. fmri mixing: convex combinations with distinct partners
    emb = rng.standard_normal((n, dim))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    batch = TripletBatch(fmri=rng.standard_normal((n, 24)).astype(np.float32),
                         text=emb, image=emb)
    mixed = mixco_mix(batch, child_rng(7, "demo-mix"))
    manual = (mixed.lambdas[:, None] * batch.fmri
              + (1.0 - mixed.lambdas)[:, None] * batch.fmri[mixed.partners])
    print(f"mixing reconstruction exact: {np.array_equal(mixed.mixed_fmri, manual)}")

    # --- 3. the mixed loss interpolates two cross-entropies
    p_star = unit_rows(rng.standard_normal((n, dim)))
    lam = rng.uniform(0.1, 0.9, n)
    l_mid, dps = mixco_loss_and_grad(p_star, c, lam, mixed.partners, TAU)
    l_own = mixco_loss(p_star, c, np.ones(n), mixed.partners, TAU)
    l_par = mixco_loss(p_star, c, np.zeros(n), mixed.partners, TAU)
    print(f"mixed loss {l_mid:.6f}; endpoints own-label {l_own:.6f}, partner-label {l_par:.6f}")
    got = fd(lambda: mixco_loss_and_grad(p_star, c, lam, mixed.partners, TAU)[0], p_star, 5)
    print(f"  dL/dp*[0,5] analytic {dps[0, 5]:+.8f}  finite-diff {got:+.8f}")

    # --- 4. combined objective: contrastive plus alpha-weighted mixing term
    total, l_p, l_mix, _, _ = combined_loss_and_grad(p, p_star, c, v, lam,
                                                     mixed.partners, TAU, ALPHA)
    print(f"combined {total:.6f} = {l_p:.6f} + {ALPHA} * {l_mix:.6f}")

    # --- 5. voxel alignment loss: beta * MSE minus (1 - beta) * cosine
    r = rng.standard_normal(32)
    r_hat = rng.standard_normal(32)
    l1, dr, drh = stage1_loss_and_grad(r, r_hat, BETA)
    got = fd(lambda: stage1_loss_and_grad(r, r_hat, BETA)[0], r_hat, 3)
    print(f"alignment loss {l1:.6f}; dL/dr_hat[3] analytic {drh[3]:+.8f} finite-diff {got:+.8f}")

    # --- 6. reconstruction loss: L1 plus total-variation smoothness
    d = rng.uniform(0.05, 0.95, (8, 8, 4))
    d_hat = rng.uniform(0.05, 0.95, (8, 8, 4))
    l2, ddh = stage2_loss_and_grad(d, d_hat, 1.0)
    got = fd(lambda: stage2_loss_and_grad(d, d_hat, 1.0)[0], d_hat, 17)
    print(f"reconstruction loss {l2:.6f}; dL/dd_hat[17] analytic {ddh.flat[17]:+.8f} "
          f"finite-diff {got:+.8f}")


if __name__ == "__main__":
    main()
