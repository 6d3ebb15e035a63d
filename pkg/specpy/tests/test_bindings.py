import json
import subprocess
import sys
import tracemalloc

import numpy as np
import pytest

import specpy as sp


def make_quad(n_modes=8, n_pts=9):
    p_key = sp.PointsKey(n_pts, sp.PointsType.GaussLobattoLegendre)
    b_key = sp.BasisKey(sp.BasisType.Modified_A, n_modes, p_key)
    return sp.StdQuadExp(b_key, b_key)


def projection_script():
    """The introductory projection script, line for line."""
    nModes = 8
    nPts = nModes + 1

    pType = sp.PointsType.GaussLobattoLegendre
    pKey = sp.PointsKey(nPts, pType)

    bType = sp.BasisType.Modified_A
    bKey = sp.BasisKey(bType, nModes, pKey)

    quad = sp.StdQuadExp(bKey, bKey)

    x, y = quad.GetCoords()
    fx = np.cos(x) * np.cos(y)
    proj = quad.FwdTrans(fx)

    return quad.Integral(fx), proj


def test_projection_script_prints_4dp():
    integral, proj = projection_script()
    assert f"{integral:.4f}" == "2.8323"
    assert len(proj) == 64


def test_matches_primary_cli_value(tmp_path):
    integral, _ = projection_script()
    from spechp.meshio import single_quad_mesh, write_mesh

    write_mesh(single_quad_mesh(), tmp_path / "ref_quad.nmj")
    (tmp_path / "listing.json").write_text(json.dumps({
        "mesh": "ref_quad.nmj",
        "expansions": [{"composites": [0], "order": 7}],
        "points": 9,
        "solver": {"kind": "project", "mode": "dg"},
        "expression": "cos(x)*cos(y)",
    }), encoding="utf-8")
    proc = subprocess.run(
        [sys.executable, "-m", "spechp.cli", "project",
         "--session", str(tmp_path / "listing.json"),
         "--out", str(tmp_path / "out")],
        capture_output=True, text=True, check=True)
    cli_line = [l for l in proc.stdout.splitlines()
                if l.startswith("Integral")][0]
    assert f"{float(cli_line.split('=')[1]):.4f}" == "2.8323"
    report = json.loads((tmp_path / "out" / "project_report.json").read_text())
    assert abs(report["integral"] - integral) < 1e-12


def test_fwd_bwd_roundtrip_identity():
    quad = make_quad()
    for k in (0, 5, 63):
        e_k = np.zeros(quad.GetNcoeffs())
        e_k[k] = 1.0
        back = quad.FwdTrans(quad.BwdTrans(e_k))
        assert np.max(np.abs(back - e_k)) < 1e-12


def test_integral_of_ones_is_reference_area():
    quad = make_quad()
    assert quad.Integral(np.ones(quad.GetTotPoints())) == pytest.approx(4.0)


def test_numerically_identical_to_primary_calls():
    from spechp.basis import BasisKey as PBasisKey
    from spechp.basis import BasisType as PBasisType
    from spechp.quadrature import PointsKey as PPointsKey
    from spechp.quadrature import PointsType as PPointsType
    from spechp.stdregions import (Shape, StdExpansion, bwd_trans, fwd_trans,
                                   integral)

    rng = np.random.default_rng(42)
    for n_modes, n_pts in ((4, 5), (8, 9), (6, 8)):
        bound = make_quad(n_modes, n_pts)
        key = PBasisKey(PBasisType.MODIFIED_A, n_modes,
                        PPointsKey(n_pts, PPointsType.GAUSS_LOBATTO_LEGENDRE))
        direct = StdExpansion(Shape.QUAD, (key, key))
        values = rng.standard_normal(direct.num_points)
        coeffs = rng.standard_normal(direct.num_modes)
        assert np.max(np.abs(bound.FwdTrans(values)
                             - fwd_trans(direct, values))) < 1e-14
        assert np.max(np.abs(bound.BwdTrans(coeffs)
                             - bwd_trans(direct, coeffs))) < 1e-14
        assert abs(bound.Integral(values) - integral(direct, values)) < 1e-14


def test_formatted_parity_with_primary_path():
    # fixed random (P, Q, input) triples, byte-equal formatted outputs
    from spechp.stdregions import fwd_trans, make_quad as primary_quad

    rng = np.random.default_rng(7)
    for order, n_pts in ((3, 5), (5, 7), (7, 9)):
        bound = make_quad(order + 1, n_pts)
        direct = primary_quad(order, num_points=n_pts)
        values = rng.standard_normal(direct.num_points)
        mine = " ".join(format(v, ".17g") for v in bound.FwdTrans(values))
        ref = " ".join(format(v, ".17g") for v in fwd_trans(direct, values))
        assert mine == ref


def test_coords_share_memory_with_expansion():
    quad = make_quad()
    x, y = quad.GetCoords()
    assert np.shares_memory(x, quad._exp.points)
    assert np.shares_memory(y, quad._exp.points)


def test_float64_input_not_copied():
    quad = make_quad()
    values = np.ones(quad.GetTotPoints())
    from specpy import _as_buffer

    assert _as_buffer(values, len(values), "x") is values
    # other dtypes fall back to a conversion copy
    as32 = values.astype(np.float32)
    assert _as_buffer(as32, len(values), "x") is not as32


def test_shape_mismatch_reports_sizes():
    quad = make_quad()
    with pytest.raises(ValueError, match="81"):
        quad.FwdTrans(np.ones(80))
    with pytest.raises(ValueError, match="64"):
        quad.BwdTrans(np.ones(63))


def test_validation_matches_primary():
    p_key = sp.PointsKey(5, sp.PointsType.GaussLobattoLegendre)
    with pytest.raises(Exception):
        sp.BasisKey(sp.BasisType.Modified_A, 1, p_key)   # needs >= 2 modes
    with pytest.raises(Exception):
        sp.PointsKey(0, sp.PointsType.GaussLegendre)


def test_no_memory_growth_over_repeated_transforms():
    quad = make_quad()
    values = np.cos(quad.GetCoords()[0])
    for _ in range(1000):          # warm caches before measuring
        quad.FwdTrans(values)
    tracemalloc.start()
    base, _ = tracemalloc.get_traced_memory()
    for _ in range(100_000):
        quad.FwdTrans(values)
    current, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    assert current - base < 2_000_000   # no per-call accumulation
