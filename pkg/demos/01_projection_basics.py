"""Walk through the closed-form reconstruction that scores a query.

A class is represented by the pooled location vectors of its support
images.  A query feature map is reconstructed as a ridge-regularized
combination of those pool rows; the per-location mean squared residual
is the class distance.  Smaller ridge -> closer fit; larger ridge ->
everything shrinks toward zero.
"""

import numpy as np

from fpl import build_pool, feature_map, reconstruct

rng = np.random.default_rng(0)

# One support image, 2x2 spatial grid, 4 channels.
support = feature_map(rng.standard_normal((4, 4)), 2, 2)
pool = build_pool([support])
print(f"pool rows: {pool.pool.shape[0]}  channels: {pool.pool.shape[1]}")

# A query that lies exactly in the pool's row space reconstructs
# perfectly as the ridge vanishes.
mix = rng.standard_normal((4, 4))
query_in_span = feature_map(mix @ pool.pool, 2, 2)
for delta in [1e-9, 1e-3, 1.0, 1e3, 1e9]:
    rec = reconstruct(query_in_span, pool, delta)
    print(f"delta={delta:8.0e}  distance={rec.distance:12.6g}  "
          f"|reconstruction|={np.linalg.norm(rec.reconstructed):8.4f}")

# A random query keeps a residual at any ridge strength; the distance
# carries an analytic derivative with respect to mu (delta = exp(mu)),
# which is what training uses.
query = feature_map(rng.standard_normal((4, 4)), 2, 2)
mu = 0.0
rec = reconstruct(query, pool, float(np.exp(mu)))
h = 1e-6
fd = (
    reconstruct(query, pool, float(np.exp(mu + h))).distance
    - reconstruct(query, pool, float(np.exp(mu - h))).distance
) / (2 * h)
print(f"\nrandom query at mu=0: distance={rec.distance:.6f}")
print(f"analytic d(distance)/d(mu) = {rec.ddistance_dmu:+.8f}")
print(f"finite-difference check    = {fd:+.8f}")
