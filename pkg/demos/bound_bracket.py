"""
How far is the single-pass estimate from the order-marginalised probability?
============================================================================

A child state reveals k tokens at once.  The cheap estimate reads all k
tokens off one forward pass on the parent; the exact probability averages
over every order in which the k tokens could have been revealed one at a
time.  The ratio of the two stays inside a bracket set by the confidence
gap eps.
"""

import numpy as np

from treerpo.estimator import ORDER_KINDS, check_bounds, random_instance, self_consistent_instance, sharpening_sweep

rng = np.random.default_rng(0)

# a handful of random toy transformers, parents and reveals
print(f"{'k':>2} {'V':>2} {'Q':>8} {'eps':>7} {'P/P_hat':>9} {'lower':>8} {'upper':>10}  holds")
for _ in range(6):
    k, V = int(rng.integers(2, 5)), int(rng.integers(3, 7))
    inst = random_instance(rng, k, V)
    for Q in ORDER_KINDS:
        r = check_bounds(inst.model, inst.parent, inst.positions, inst.tokens, Q)
        print(f"{k:>2} {V:>2} {Q.kind:>8} {r.eps:7.3f} {r.ratio:9.4f} {r.lower_bound:8.4f} {r.upper_bound:10.3g}  {r.holds}")

# %%
# Sharpening a model that is confident in the right tokens shrinks eps,
# and the estimation error shrinks with it.
insts = [self_consistent_instance(rng, 3, 5) for _ in range(40)]
print("\ntemperature  mean|log ratio|  mean eps")
for temp, err, eps in sharpening_sweep(None, insts, [1.0, 0.5, 0.25, 0.125]):
    print(f"{temp:11.3f}  {err:15.4f}  {eps:8.4f}")
