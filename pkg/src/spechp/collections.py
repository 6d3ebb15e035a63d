"""Batched evaluation of elemental operators over same-shape, same-basis
element groups, under selectable strategies:

* StdMat     - one dense standard-element operator, applied to the whole
               packed block with a single matrix-matrix product;
* IterPerExp - staged-contraction kernels run element by element, with
               geometric factors folded into the loop;
* SumFac     - staged contractions batched across the whole group, the
               element index riding along as a matrix dimension.

The packed layout is coefficient-contiguous per element, elements
concatenated (block shape: num_elements x per-element size).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .stdregions import Shape, StdExpansion


class OperatorKind(Enum):
    BWD_TRANS = "bwdtrans"
    IPRODUCT_WRT_BASE = "iproductwrtbase"
    PHYS_DERIV = "physderiv"


class Strategy(Enum):
    STD_MAT = "stdmat"
    ITER_PER_EXP = "iterperexp"
    SUM_FAC = "sumfac"
    AUTO = "auto"


CONCRETE_STRATEGIES = (Strategy.STD_MAT, Strategy.ITER_PER_EXP, Strategy.SUM_FAC)


class CollectionError(ValueError):
    pass


@dataclass(frozen=True)
class CollectionKey:
    shape: Shape
    basis_keys: tuple
    operator: OperatorKind
    num_elements: int


def _normalise(elements):
    """Accept StdExpansion or region.Element entries; return (exps, geoms)."""
    exps, geoms = [], []
    for e in elements:
        if isinstance(e, StdExpansion):
            exps.append(e)
            geoms.append(None)
        else:
            exps.append(e.exp)
            geoms.append(e.gf)
    if not exps:
        raise CollectionError("empty element group")
    ref = exps[0]
    for e in exps[1:]:
        if e.shape is not ref.shape or e.basis_keys != ref.basis_keys:
            raise CollectionError(
                "heterogeneous group: all elements must share shape and basis")
    if any(g is None for g in geoms) and any(g is not None for g in geoms):
        raise CollectionError("mix of standard and physical elements")
    return ref, (None if geoms[0] is None else geoms)


class Collection:
    """One operator over one homogeneous element group under one strategy."""

    def __init__(self, elements, operator: OperatorKind, strategy: Strategy):
        if strategy not in CONCRETE_STRATEGIES:
            raise CollectionError(f"strategy must be concrete, got {strategy}")
        exp, geoms = _normalise(elements)
        self.exp = exp
        self.geoms = geoms
        self.operator = operator
        self.strategy = strategy
        self.num_elements = len(elements)
        self.key = CollectionKey(exp.shape, exp.basis_keys, operator,
                                 self.num_elements)
        self._build()

    # -- shapes ---------------------------------------------------------------

    @property
    def input_size(self):
        if self.operator is OperatorKind.BWD_TRANS:
            return self.exp.num_modes
        return self.exp.num_points

    @property
    def output_shape(self):
        if self.operator is OperatorKind.BWD_TRANS:
            return (self.num_elements, self.exp.num_points)
        if self.operator is OperatorKind.IPRODUCT_WRT_BASE:
            return (self.num_elements, self.exp.num_modes)
        return (self.num_elements, 2, self.exp.num_points)

    # -- precomputation ---------------------------------------------------------

    def _build(self):
        exp = self.exp
        if self.operator is OperatorKind.IPRODUCT_WRT_BASE:
            if self.geoms is None:
                self._wts = np.broadcast_to(exp.weights,
                                            (self.num_elements, exp.num_points))
            else:
                self._wts = np.stack([g.weights_world for g in self.geoms])
        if self.operator is OperatorKind.PHYS_DERIV and self.geoms is not None:
            self._inv = np.stack([g.inv for g in self.geoms])  # (E, npts, 2, 2)
        if self.strategy is Strategy.STD_MAT:
            if self.operator is OperatorKind.PHYS_DERIV:
                self._dmats = exp.deriv_matrices
            else:
                self._bmat = exp.bwd_matrix
        if exp.shape is not Shape.SEG and self.strategy is not Strategy.STD_MAT:
            from .quadrature import diff_matrix

            self._d1 = diff_matrix(exp.rules[0])
            self._d2 = diff_matrix(exp.rules[1])

    # -- kernels ----------------------------------------------------------------

    def _bwd_block_sumfac(self, block):
        exp = self.exp
        q1, q2 = exp.num_points_dir
        m1 = exp.basis_keys[0].num_modes
        a1 = exp.tables[0][0]
        if exp.shape is Shape.QUAD:
            m2 = exp.basis_keys[1].num_modes
            tmp = block.reshape(-1, m1, m2) @ exp.tables[1][0]   # (E, m1, Q2)
        else:
            b2 = exp.tables[1]
            tmp = np.empty((block.shape[0], m1, q2))
            for p in range(m1):
                lo = b2.block_start[p]
                hi = b2.block_start[p + 1] if p + 1 < m1 else len(b2.index)
                tmp[:, p, :] = block[:, lo:hi] @ b2.values[lo:hi]
            tmp[:, 1, :] += np.outer(block[:, 1], b2.values[1])
        out = np.einsum("pi,epj->eij", a1, tmp, optimize=True)
        return out.reshape(block.shape[0], q1 * q2)

    def _iproduct_block_sumfac(self, wu):
        exp = self.exp
        q1, q2 = exp.num_points_dir
        m1 = exp.basis_keys[0].num_modes
        a1 = exp.tables[0][0]
        tmp = np.einsum("pi,eij->epj", a1, wu.reshape(-1, q1, q2),
                        optimize=True)
        if exp.shape is Shape.QUAD:
            return (tmp @ exp.tables[1][0].T).reshape(wu.shape[0], -1)
        b2 = exp.tables[1]
        out = np.empty((wu.shape[0], exp.num_modes))
        for n, (p, q) in enumerate(b2.index):
            out[:, n] = tmp[:, p, :] @ b2.values[n]
            if (p, q) == (0, 1):
                out[:, n] += tmp[:, 1, :] @ b2.values[n]
        return out

    def _ref_deriv_block(self, block):
        exp = self.exp
        q1, q2 = exp.num_points_dir
        u = block.reshape(-1, q1, q2)
        d1 = np.einsum("ik,ekj->eij", self._d1, u, optimize=True)
        d2 = u @ self._d2.T
        if exp.shape is Shape.TRI:
            f, g = exp._collapse_factors
            d1, d2 = f * d1, g * d1 + d2
        n = block.shape[0]
        return d1.reshape(n, -1), d2.reshape(n, -1)

    def _metric_transform(self, d1, d2):
        inv = self._inv
        dx = inv[:, :, 0, 0] * d1 + inv[:, :, 1, 0] * d2
        dy = inv[:, :, 0, 1] * d1 + inv[:, :, 1, 1] * d2
        return np.stack([dx, dy], axis=1)

    # -- public apply -------------------------------------------------------------

    def apply(self, block, out=None):
        """Evaluate the operator over the packed block.

        block: (num_elements, input_size); returns output_shape (PhysDeriv
        yields both world components, or reference components for standard
        element groups).
        """
        block = np.asarray(block, dtype=float)
        if block.shape != (self.num_elements, self.input_size):
            raise CollectionError(
                f"block shape {block.shape} does not match "
                f"({self.num_elements}, {self.input_size})")
        op, strat, exp = self.operator, self.strategy, self.exp

        if op is OperatorKind.BWD_TRANS:
            if strat is Strategy.STD_MAT:
                result = block @ self._bmat
            elif strat is Strategy.SUM_FAC:
                result = self._bwd_block_sumfac(block)
            else:
                from .stdregions import bwd_trans_sumfac

                result = np.empty(self.output_shape)
                for e in range(self.num_elements):
                    result[e] = bwd_trans_sumfac(exp, block[e])

        elif op is OperatorKind.IPRODUCT_WRT_BASE:
            wu = self._wts * block
            if strat is Strategy.STD_MAT:
                result = wu @ self._bmat.T
            elif strat is Strategy.SUM_FAC:
                result = self._iproduct_block_sumfac(wu)
            else:
                result = np.empty(self.output_shape)
                for e in range(self.num_elements):
                    result[e] = self._iproduct_block_sumfac(wu[e:e + 1])[0]

        else:   # PHYS_DERIV
            if strat is Strategy.STD_MAT:
                d1 = block @ self._dmats[0].T
                d2 = block @ self._dmats[1].T
            elif strat is Strategy.SUM_FAC:
                d1, d2 = self._ref_deriv_block(block)
            else:
                d1 = np.empty((self.num_elements, exp.num_points))
                d2 = np.empty_like(d1)
                for e in range(self.num_elements):
                    a, b = self._ref_deriv_block(block[e:e + 1])
                    d1[e], d2[e] = a[0], b[0]
            if self.geoms is None:
                result = np.stack([d1, d2], axis=1)
            else:
                result = self._metric_transform(d1, d2)

        if out is not None:
            out[...] = result
            return out
        return result

    # -- cost model -----------------------------------------------------------------

    def mac_count(self):
        """Multiply-adds for one apply, derived from the actual staged shapes."""
        exp = self.exp
        e = self.num_elements
        npts, nmodes = exp.num_points, exp.num_modes
        if exp.shape is Shape.SEG:
            return e * nmodes * npts
        q1, q2 = exp.num_points_dir
        m1 = exp.basis_keys[0].num_modes
        dense = nmodes * npts
        if exp.shape is Shape.QUAD:
            staged = m1 * exp.basis_keys[1].num_modes * q2 + m1 * q1 * q2
        else:
            staged = (nmodes + 1) * q2 + m1 * q1 * q2
        if self.operator is OperatorKind.BWD_TRANS:
            per = dense if self.strategy is Strategy.STD_MAT else staged
        elif self.operator is OperatorKind.IPRODUCT_WRT_BASE:
            per = npts + (dense if self.strategy is Strategy.STD_MAT else staged)
        else:
            ref = (2 * npts * npts if self.strategy is Strategy.STD_MAT
                   else q1 * q1 * q2 + q1 * q2 * q2
                   + (2 * npts if exp.shape is Shape.TRI else 0))
            per = ref + (4 * npts if self.geoms is not None else 0)
        return e * per


def create_collection(elements, operator, strategy=Strategy.AUTO,
                      trials=5, warmups=2):
    """Build a collection; AUTO strategy autotunes at creation time."""
    if strategy is Strategy.AUTO:
        strategy, _ = autotune(elements, operator, trials=trials,
                               warmups=warmups)
    return Collection(elements, operator, strategy)


def autotune(elements, operator, trials=5, warmups=2, candidates=None):
    """Time every concrete strategy on this group and pick the fastest.

    Returns (strategy, report); the report lists the median and raw wall
    times for each candidate.  Must not run concurrently with other timed
    work.
    """
    if trials < 1:
        raise CollectionError("trials must be >= 1")
    candidates = tuple(candidates or CONCRETE_STRATEGIES)
    report = {}
    rng = np.random.default_rng(0)
    best, best_time = None, np.inf
    for strat in candidates:
        coll = Collection(elements, operator, strat)
        block = rng.standard_normal((coll.num_elements, coll.input_size))
        for _ in range(warmups):
            coll.apply(block)
        times = []
        for _ in range(trials):
            t0 = time.perf_counter()
            coll.apply(block)
            times.append(time.perf_counter() - t0)
        med = float(np.median(times))
        report[strat.value] = {"median_s": med, "times_s": times,
                               "mac_count": coll.mac_count()}
        if med < best_time:
            best, best_time = strat, med
    return best, report


def pack(vectors):
    """Stack per-element vectors into the packed block layout."""
    return np.ascontiguousarray(np.stack([np.asarray(v, float)
                                          for v in vectors]))


def unpack(block):
    return [np.array(row) for row in np.asarray(block)]
