"""Vectorized evaluation of batch losses, gradients and distances.

This module is an internal optimization of the math in ``projection``
and ``classifier``; results agree with composing those modules'
operations query by query, to floating-point accuracy.  The key idea:
eigendecompose each class Gram once (it does not depend on the ridge
strength), after which every per-query, per-class quantity needed for
the loss is a weighted sum over the spectrum.

Write G_d = V diag(lam) V^T.  For a query map M define the spectral
energies s[a] = ||M v_a||^2 (computed once per query/class pair).  With
P = (G + delta I)^-1 and W = P G, the reconstruction is M W and:

    distance            = delta^2/HW * sum_a s[a] / (lam_a + delta)^2
    d distance / d delta = 2 delta/HW * sum_a s[a] lam_a / (lam_a + delta)^3
    ||M W||^2           = sum_a s[a] lam_a^2 / (lam_a + delta)^2
    tr(M^T M P)         = sum_a s[a] / (lam_a + delta)

so the cross-entropy path costs O(C) per query/class per step.

The orthogonality loss needs pairwise cosines between the D
reconstructions of a query.  Those are computed exactly in two parts:
a factored sum that is correct for pairs whose cosine is provably
positive, plus explicit corrections for the (typically few) pairs whose
sign cannot be certified.  Certification splits each flattened
reconstruction m_i into its component along the query m (coefficient
sigma_i/||m||^2 with sigma_i = tr(M^T M W_i) >= 0) and a perpendicular
remainder, then applies Cauchy-Schwarz to the remainders:

    <m_i, m_j> >= sigma_i sigma_j/||m||^2 - r_i r_j,
    r_i^2 = ||m_i||^2 - sigma_i^2/||m||^2

where every term is an O(C) spectral sum.  Reconstructions are
dominated by their component along the query, so the bound is usually
positive; when it is, the pair's |cos| equals its cos and is covered by
the factored sum sum_{i<j} cos_ij = (||sum_i m_i/n_i||^2 - D)/2.
"""

from __future__ import annotations

import numpy as np

from .classifier import HyperParams, softmax
from .errors import DegenerateReconstruction, NotPositiveDefinite, ShapeMismatch

_PROB_CLAMP = 1e-12
_NORM_FLOOR = 1e-12


def _eigh_psd(gram: np.ndarray):
    """Eigendecomposition of a symmetric PSD matrix, eigenvalues clamped at 0."""
    sym = (gram + gram.T) * 0.5
    lam, vec = np.linalg.eigh(sym)
    if lam[-1] < -1e-6 * max(1.0, abs(lam[-1])):
        raise NotPositiveDefinite("engine: Gram matrix has a large negative eigenvalue")
    return np.maximum(lam, 0.0), vec


class EpisodeEngine:
    """Precomputed spectral state for a fixed set of pools and query maps.

    Optionally, individual queries can carry a leave-one-out override of
    their own class's Gram (used when a training query is itself one of
    the support images).
    """

    def __init__(self, pools, maps):
        pools = list(pools)
        maps = list(maps)
        if len(pools) < 2:
            raise ShapeMismatch("EpisodeEngine: need at least 2 class pools")
        if not maps:
            raise ShapeMismatch("EpisodeEngine: need at least one query map")
        c = pools[0].pool.shape[1]
        first = maps[0]
        self.hw = first.locations
        self.c = c
        self.d = len(pools)
        self.q = len(maps)
        for p in pools:
            if p.pool.shape[1] != c:
                raise ShapeMismatch("EpisodeEngine: pools disagree on channel count")
        for m in maps:
            if m.channels != c or m.locations != self.hw:
                raise ShapeMismatch("EpisodeEngine: query maps disagree on dims")

        self.vecs = np.empty((self.d, c, c))
        self.lams = np.empty((self.d, c))
        for di, p in enumerate(pools):
            lam, vec = _eigh_psd(p.gram)
            self.lams[di] = lam
            self.vecs[di] = vec

        self.maps = np.stack([m.values for m in maps])  # (Q, HW, C)
        self.m_sq = np.einsum("qhc,qhc->q", self.maps, self.maps)

        # s[q, d, a] = ||M_q @ v_a(d)||^2
        flat = self.maps.reshape(self.q * self.hw, c)
        self.s = np.empty((self.q, self.d, c))
        for di in range(self.d):
            proj = flat @ self.vecs[di]
            self.s[:, di, :] = (proj * proj).reshape(self.q, self.hw, c).sum(axis=1)

        # Leave-one-out overrides: query index -> (class, lam, vec, s_vec)
        self._loo: dict[int, tuple[int, np.ndarray, np.ndarray, np.ndarray]] = {}

    def set_leave_one_out(self, query_index: int, class_id: int, gram: np.ndarray):
        """Replace ``query_index``'s own-class Gram with a leave-one-out one."""
        lam, vec = _eigh_psd(gram)
        proj = self.maps[query_index] @ vec
        s_vec = (proj * proj).sum(axis=0)
        self._loo[query_index] = (class_id, lam, vec, s_vec)

    # ----- spectral reductions -------------------------------------------

    def _reductions(self, idx: np.ndarray, delta: float):
        """Per-(query, class) scalars needed by both loss paths.

        Returns dist, ddist_ddelta, u (recon norm^2), udot and sigma
        (inner product of the reconstruction with the query).
        """
        s = self.s[idx]  # (B, D, C)
        lam = self.lams  # (D, C)
        inv1 = 1.0 / (lam + delta)
        inv3 = inv1 * inv1 * inv1
        w = lam * inv1
        dist = (delta * delta / self.hw) * np.einsum("bdc,dc->bd", s, inv1 * inv1)
        ddist_ddelta = (2.0 * delta / self.hw) * np.einsum("bdc,dc->bd", s, lam * inv3)
        u = np.einsum("bdc,dc->bd", s, w * w)
        udot = -2.0 * np.einsum("bdc,dc->bd", s, lam * lam * inv3)
        sigma = np.einsum("bdc,dc->bd", s, w)

        for bi, qi in enumerate(idx):
            over = self._loo.get(int(qi))
            if over is None:
                continue
            cid, llam, _, ls = over
            li1 = 1.0 / (llam + delta)
            li3 = li1 * li1 * li1
            lw = llam * li1
            dist[bi, cid] = (delta * delta / self.hw) * float(ls @ (li1 * li1))
            ddist_ddelta[bi, cid] = (2.0 * delta / self.hw) * float(ls @ (llam * li3))
            u[bi, cid] = float(ls @ (lw * lw))
            udot[bi, cid] = -2.0 * float(ls @ (llam * llam * li3))
            sigma[bi, cid] = float(ls @ lw)
        return dist, ddist_ddelta, u, udot, sigma

    def distances(self, delta: float, indices=None) -> np.ndarray:
        """Reconstruction distances, shape (len(indices), D)."""
        idx = np.arange(self.q) if indices is None else np.asarray(indices)
        return self._reductions(idx, delta)[0]

    # ----- orthogonality loss --------------------------------------------

    def _basis(self, qi: int, cid: int):
        over = self._loo.get(qi)
        if over is not None and over[0] == cid:
            return over[1], over[2]
        return self.lams[cid], self.vecs[cid]

    def _po_terms(self, idx, delta, u, udot, sigma, doubled):
        """Exact mean |pairwise cosine| per query plus d/d(delta)."""
        b = len(idx)
        n = np.sqrt(u)
        if n.min() < _NORM_FLOOR:
            bad = np.argwhere(n < _NORM_FLOOR)[0]
            raise DegenerateReconstruction(
                f"orthogonality loss: reconstruction of query {int(idx[bad[0]])} "
                f"for class {int(bad[1])} has near-zero norm"
            )
        inv_n = 1.0 / n  # (B, D)
        coef_dot = -udot / (2.0 * u * n)  # d(1/n)/d(delta) = -udot/(2 n^3)

        # Per-step eigen-assembled W and dW/d(delta) for every class.
        lam = self.lams
        inv1 = 1.0 / (lam + delta)
        w = lam * inv1
        wdot = -lam * inv1 * inv1
        wmats = (self.vecs * w[:, None, :]) @ np.transpose(self.vecs, (0, 2, 1))
        wdmats = (self.vecs * wdot[:, None, :]) @ np.transpose(self.vecs, (0, 2, 1))
        wflat = wmats.reshape(self.d, -1)
        wdflat = wdmats.reshape(self.d, -1)

        w_sum_weight = inv_n.copy()
        wd_weight1 = inv_n.copy()
        wd_weight2 = coef_dot.copy()
        own_rows = []
        for bi, qi in enumerate(idx):
            over = self._loo.get(int(qi))
            if over is None:
                continue
            cid = over[0]
            w_sum_weight[bi, cid] = 0.0
            wd_weight1[bi, cid] = 0.0
            wd_weight2[bi, cid] = 0.0
            own_rows.append((bi, cid, over[1], over[2]))

        csq = self.c * self.c
        wsum = (w_sum_weight @ wflat).reshape(b, self.c, self.c)
        wsumdot = (wd_weight1 @ wdflat + wd_weight2 @ wflat).reshape(b, self.c, self.c)
        for bi, cid, llam, lvec in own_rows:
            li1 = 1.0 / (llam + delta)
            lw = llam * li1
            lwdot = -llam * li1 * li1
            w_own = (lvec * lw) @ lvec.T
            wd_own = (lvec * lwdot) @ lvec.T
            wsum[bi] += w_own * inv_n[bi, cid]
            wsumdot[bi] += wd_own * inv_n[bi, cid] + w_own * coef_dot[bi, cid]

        maps_b = self.maps[idx]
        msum = maps_b @ wsum
        msumdot = maps_b @ wsumdot
        s_pos = 0.5 * (np.einsum("bhc,bhc->b", msum, msum) - self.d)
        ds_pos = np.einsum("bhc,bhc->b", msum, msumdot)

        # Sign certification: pairs with a positive lower bound need no
        # correction; the rest are evaluated explicitly.
        m_sq = self.m_sq[idx][:, None]
        radius = np.sqrt(np.maximum(u - sigma * sigma / m_sq, 0.0))
        lower = (
            sigma[:, :, None] * sigma[:, None, :] / m_sq[:, :, None]
            - radius[:, :, None] * radius[:, None, :]
        )
        upper_tri = np.triu(np.ones((self.d, self.d), dtype=bool), k=1)
        flagged = (lower <= 0.0) & upper_tri

        po = s_pos.copy()
        dpo = ds_pos.copy()
        for bi in np.argwhere(flagged.any(axis=(1, 2))).ravel():
            qi = int(idx[bi])
            pairs = np.argwhere(flagged[bi])
            classes = np.unique(pairs)
            m_flat = self.maps[qi].ravel()
            recon = {}
            recon_dot = {}
            for cid in classes:
                llam, lvec = self._basis(qi, int(cid))
                li1 = 1.0 / (llam + delta)
                proj = self.maps[qi] @ lvec
                e1 = ((proj * li1) @ lvec.T).ravel()
                e2 = ((proj * li1 * li1) @ lvec.T).ravel()
                recon[int(cid)] = m_flat - delta * e1
                recon_dot[int(cid)] = delta * e2 - e1
            for i, j in pairs:
                i, j = int(i), int(j)
                ninj = n[bi, i] * n[bi, j]
                uij = float(recon[i] @ recon[j])
                udij = float(recon_dot[i] @ recon[j]) + float(recon[i] @ recon_dot[j])
                cos = uij / ninj
                dcos = udij / ninj - cos * (
                    udot[bi, i] / (2.0 * u[bi, i]) + udot[bi, j] / (2.0 * u[bi, j])
                )
                po[bi] += abs(cos) - cos
                dpo[bi] += (np.sign(cos) - 1.0) * dcos
        scale = 1.0 / (self.d * (self.d - 1))
        if doubled:
            scale *= 2.0
        return po * scale, dpo * scale

    # ----- full loss -------------------------------------------------------

    def loss_and_grads(self, indices, labels, clip_probs, mu: float,
                       epsilon: float, hp: HyperParams, gamma=None):
        """Mean fused cross-entropy + gamma * mean orthogonality loss.

        Returns (loss, dloss/dmu, dloss/depsilon, n_correct); predictions
        counted at the fused argmax.
        """
        idx = np.asarray(indices)
        labels = np.asarray(labels)
        clip_probs = np.asarray(clip_probs, dtype=np.float64)
        if clip_probs.shape != (len(idx), self.d):
            raise ShapeMismatch("loss_and_grads: clip_probs must be (B, D)")
        gamma = hp.gamma if gamma is None else gamma
        delta = float(np.exp(mu))
        dist, ddd, u, udot, sigma = self._reductions(idx, delta)
        g = delta * ddd  # d(distance)/d(mu)

        s = softmax(-epsilon * dist)
        p_tot = (clip_probs + hp.eta * s) / (1.0 + hp.eta)
        rows = np.arange(len(idx))
        p_y = p_tot[rows, labels]
        ce = -np.log(np.maximum(p_y, _PROB_CLAMP))
        live = p_y > _PROB_CLAMP
        mix = hp.eta / (1.0 + hp.eta)
        s_y = s[rows, labels]
        ds_deps = s_y * (np.einsum("bd,bd->b", s, dist) - dist[rows, labels])
        ds_dmu = epsilon * s_y * (np.einsum("bd,bd->b", s, g) - g[rows, labels])
        safe_py = np.where(live, p_y, 1.0)
        dce_deps = np.where(live, -(mix / safe_py) * ds_deps, 0.0)
        dce_dmu = np.where(live, -(mix / safe_py) * ds_dmu, 0.0)

        loss = float(ce.mean())
        dmu = float(dce_dmu.mean())
        deps = float(dce_deps.mean())
        if gamma > 0.0:
            po, dpo_ddelta = self._po_terms(
                idx, delta, u, udot, sigma, hp.po_doubled
            )
            loss += gamma * float(po.mean())
            dmu += gamma * delta * float(dpo_ddelta.mean())
        ncorrect = int(np.sum(np.argmax(p_tot, axis=1) == labels))
        return loss, dmu, deps, ncorrect
