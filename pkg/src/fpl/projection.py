"""Prototype pools and ridge-regression reconstruction of query feature maps.

A query image is represented by a feature map: one feature vector per
spatial location, stored as an (H*W, C) matrix.  Each class pools every
location vector of its support images into an (N*H*W, C) prototype
matrix.  A query map is scored against a class by reconstructing it as
a ridge-regularized linear combination of that class's pool rows; the
mean squared residual over locations is the class distance.

The optimal combination is closed form.  Two algebraically identical
routes exist:

* the C-by-C Gram route, used whenever C <= N*H*W (the common case):
  reconstructed = M @ solve(F^T F + delta*I, F^T F)
* the N*H*W-by-N*H*W route, used otherwise:
  reconstructed = (M F^T) @ solve(F F^T + delta*I, F)

Both are computed with Cholesky solves, never explicit inverses.  The
ridge strength delta is parameterized as exp(mu) elsewhere; each
Reconstruction therefore carries the analytic derivative of its
distance (and of the reconstructed map) with respect to mu.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import EmptyClass, NotPositiveDefinite, ShapeMismatch
from .tensorcore import Matrix, as_matrix

_UNIT_ROW_TOL = 1e-4


@dataclass(frozen=True)
class FeatureMap:
    """Spatial feature grid of one image: (height*width, C) row-major values.

    Row k holds the feature vector of location (k // width, k % width).
    """

    height: int
    width: int
    channels: int
    values: Matrix

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.channels < 1:
            raise ShapeMismatch("FeatureMap: H, W, C must all be >= 1")
        values = as_matrix(self.values, "FeatureMap.values")
        if values.shape != (self.height * self.width, self.channels):
            raise ShapeMismatch(
                f"FeatureMap: values shape {values.shape} != "
                f"({self.height * self.width}, {self.channels})"
            )
        object.__setattr__(self, "values", values)

    @property
    def locations(self) -> int:
        return self.height * self.width

    def rows_unit_norm(self, tol: float = _UNIT_ROW_TOL) -> bool:
        norms = np.linalg.norm(self.values, axis=1)
        return bool(np.all(np.abs(norms - 1.0) <= tol))


def feature_map(values, height: int, width: int) -> FeatureMap:
    """Build a FeatureMap from an (H*W, C) array."""
    values = as_matrix(values, "feature_map")
    return FeatureMap(height, width, values.shape[1], values)


@dataclass(frozen=True)
class ClassPrototypePool:
    """All support location vectors of one class, plus the cached Gram.

    ``pool`` stacks the (H*W, C) values of each support map in support
    order; ``gram`` caches pool^T @ pool (C x C, symmetric PSD).
    """

    class_id: int
    shots: int
    pool: Matrix
    gram: Matrix


def build_pool(support_maps, class_id: int = 0) -> ClassPrototypePool:
    """Concatenate the support maps of one class into a prototype pool.

    Maps must agree on H, W and C; rows are stacked in support order,
    row-major over locations within each map.
    """
    maps = list(support_maps)
    if not maps:
        raise EmptyClass(f"build_pool: class {class_id} has no support maps")
    first = maps[0]
    for m in maps[1:]:
        if (m.height, m.width, m.channels) != (first.height, first.width, first.channels):
            raise ShapeMismatch(
                f"build_pool: map dims {(m.height, m.width, m.channels)} != "
                f"{(first.height, first.width, first.channels)}"
            )
    pool = np.concatenate([m.values for m in maps], axis=0)
    gram = pool.T @ pool
    gram = (gram + gram.T) * 0.5
    return ClassPrototypePool(class_id=class_id, shots=len(maps), pool=pool, gram=gram)


@dataclass(frozen=True)
class Reconstruction:
    """Result of reconstructing a query map from one class pool.

    ``distance`` is ||M - reconstructed||_F^2 / (H*W), exactly by
    construction.  ``ddistance_dmu`` and ``dreconstructed_dmu`` are the
    analytic derivatives with respect to mu, where delta = exp(mu).
    """

    reconstructed: Matrix
    distance: float
    ddistance_dmu: float
    dreconstructed_dmu: Matrix


def _cho_factor(a: Matrix):
    try:
        return scipy.linalg.cho_factor(a, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc


def _reconstruct_primal(values: Matrix, gram: Matrix, delta: float, locations: int):
    """Gram-route reconstruction; needs only the C x C Gram matrix."""
    c = gram.shape[0]
    factor = _cho_factor(gram + delta * np.eye(c))
    weights = scipy.linalg.cho_solve(factor, gram, check_finite=False)
    recon = values @ weights
    residual = values - recon
    # d(recon)/d(delta) = -M (G + dI)^-2 G; reuse the factorization.
    shrink = scipy.linalg.cho_solve(factor, weights, check_finite=False)
    grad_map = values @ shrink
    distance = float(np.sum(residual * residual)) / locations
    ddist_ddelta = 2.0 * float(np.sum(residual * grad_map)) / locations
    return recon, distance, ddist_ddelta, -grad_map


def _reconstruct_dual(values: Matrix, pool: Matrix, delta: float, locations: int):
    """Row-kernel route; solves the (N*H*W)-sized system literally."""
    n = pool.shape[0]
    kernel = pool @ pool.T
    kernel = (kernel + kernel.T) * 0.5
    factor = _cho_factor(kernel + delta * np.eye(n))
    coeff = values @ pool.T
    solved = scipy.linalg.cho_solve(factor, pool, check_finite=False)
    recon = coeff @ solved
    residual = values - recon
    twice = scipy.linalg.cho_solve(factor, solved, check_finite=False)
    grad_map = coeff @ twice
    distance = float(np.sum(residual * residual)) / locations
    ddist_ddelta = 2.0 * float(np.sum(residual * grad_map)) / locations
    return recon, distance, ddist_ddelta, -grad_map


def reconstruct(query: FeatureMap, pool: ClassPrototypePool, delta: float) -> Reconstruction:
    """Closed-form ridge reconstruction of ``query`` from ``pool``.

    Picks the C-by-C Gram route when C <= N*H*W, otherwise the literal
    row-kernel route; the two agree by the push-through identity.
    """
    if query.channels != pool.pool.shape[1]:
        raise ShapeMismatch(
            f"reconstruct: query C={query.channels} vs pool C={pool.pool.shape[1]}"
        )
    if not delta > 0.0:
        raise ShapeMismatch("reconstruct: delta must be > 0")
    values = query.values
    locations = query.locations
    nhw = pool.pool.shape[0]
    if query.channels <= nhw:
        recon, dist, ddd, dmap_ddelta = _reconstruct_primal(
            values, pool.gram, delta, locations
        )
    else:
        recon, dist, ddd, dmap_ddelta = _reconstruct_dual(
            values, pool.pool, delta, locations
        )
    # Chain rule through delta = exp(mu).
    return Reconstruction(
        reconstructed=recon,
        distance=dist,
        ddistance_dmu=ddd * delta,
        dreconstructed_dmu=dmap_ddelta * delta,
    )


def reconstruct_all(query: FeatureMap, pools, delta: float) -> list[Reconstruction]:
    """Reconstruct ``query`` against every class pool, in class order."""
    return [reconstruct(query, pool, delta) for pool in pools]
