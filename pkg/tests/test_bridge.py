"""Divergence/gradient transfer maps: bookkeeping, residuals, round-trip."""

import numpy as np
import pytest

from lamewave import ball as ballmod
from lamewave import bridge, classify, eig, fem
from lamewave import mesh as meshmod
from lamewave.errors import ValidationError

PARAMS = fem.MaterialParams(1.0, 1.0)
LAM = PARAMS.lam


def disk(refine):
    return meshmod.generate_structure_mesh(meshmod.shape("disk", 1.0), refine)


def ball3(refine):
    return meshmod.generate_structure_mesh(meshmod.shape("ball", 1.0), refine)


def _interp_inputs(msh):
    """Interpolated radial mode pair (vector psi + scalar potential u)."""
    mode = ballmod.ball_mode(1, 1.0, PARAMS)
    dmv = fem.dof_map(msh, "vector", 2, "SOLID")
    sdm = fem.dof_map(msh, "scalar", 2, "SOLID")
    psi = dmv.interpolate(mode)
    t, _, _ = fem.boundary_traction(msh, PARAMS, psi, mode.mu,
                                    require_dirichlet=False)
    qhat = classify.fit_normal_traction(t, msh).qhat
    u = sdm.interpolate(lambda pts: mode.potential(pts))
    Mb, bn = fem.boundary_node_mass(msh, sdm, meshmod.INTERFACE)
    one = np.ones(bn.size)
    c = float((u[bn] @ (Mb.mat @ one)) / (one @ (Mb.mat @ one)))
    return mode, psi, qhat, u, c


@pytest.fixture(scope="module")
def ball_maps():
    """div/grad/roundtrip results for the interpolated ball mode, r2 and r3."""
    out = {}
    for r in (2, 3):
        msh = ball3(r)
        mode, psi, qhat, u, c = _interp_inputs(msh)
        out[r] = {
            "mode": mode,
            "div": bridge.div_map(psi, mode.mu, qhat, PARAMS, msh),
            "grad": bridge.grad_map(u, mode.root ** 2, c, PARAMS, msh),
            "rt": bridge.roundtrip(psi, mode.mu, PARAMS, msh),
            "wave_grad": bridge.wave_variant_map(u, mode.root ** 2, c, msh,
                                                 direction="grad"),
        }
    return out


# ---------------------------------------------------------------------------
# parameter bookkeeping (exact arithmetic contracts)


def test_div_map_bookkeeping_exact():
    msh = disk(2)
    mode = ballmod.disk_mode(1, 1.0, PARAMS)
    dmv = fem.dof_map(msh, "vector", 2, "SOLID")
    psi = dmv.interpolate(mode)
    res = bridge.div_map(psi, mode.mu, 0.7371, PARAMS, msh)
    assert res.eigenvalue == mode.mu / LAM
    assert res.constant == 0.7371 / LAM


def test_grad_map_bookkeeping_exact():
    msh = disk(2)
    sdm = fem.dof_map(msh, "scalar", 2, "SOLID")
    u = sdm.interpolate(lambda p: p[:, 0] ** 2 - p[:, 1] ** 2)
    res = bridge.grad_map(u, 3.7, -0.21, PARAMS, msh)
    assert res.eigenvalue == LAM * 3.7
    assert res.constant == -LAM * 3.7 * (-0.21)


def test_wave_map_value_passthrough():
    msh = disk(2)
    sdm = fem.dof_map(msh, "scalar", 2, "SOLID")
    u = sdm.interpolate(lambda p: np.cos(np.pi * p[:, 0]))
    res = bridge.wave_variant_map(u, 9.87, 0.5, msh, direction="grad")
    assert res.eigenvalue == 9.87
    assert res.constant == -9.87 * 0.5


# ---------------------------------------------------------------------------
# degenerate inputs


def test_zero_field_degenerate():
    msh = disk(1)
    dmv = fem.dof_map(msh, "vector", 2, "SOLID")
    res = bridge.div_map(np.zeros(dmv.num_dofs), 3.0, 0.5, PARAMS, msh)
    assert res.degenerate
    assert not res.field.any()
    assert all(v == 0.0 for v in res.diagnostics.values())
    # bookkeeping still carried through
    assert res.eigenvalue == 1.5 and res.constant == 0.25


def test_constant_scalar_degenerate():
    msh = disk(2)
    sdm = fem.dof_map(msh, "scalar", 2, "SOLID")
    res = bridge.grad_map(np.full(sdm.num_dofs, 4.2), 2.0, 1.0, PARAMS, msh)
    assert res.degenerate
    assert not res.field.any()


def test_rotation_field_divergence_free_degenerate():
    # (-y, x) has pointwise zero divergence; the projected load cancels
    # exactly, so the div direction must flag the kernel of the composition
    msh = disk(2)
    dmv = fem.dof_map(msh, "vector", 2, "SOLID")
    rot = dmv.interpolate(lambda p: np.stack([-p[:, 1], p[:, 0]], axis=1))
    res = bridge.div_map(rot, 5.0, 1.0, PARAMS, msh)
    assert res.degenerate
    rt = bridge.roundtrip(rot, 5.0, PARAMS, msh)
    assert rt.degenerate
    assert rt.diagnostics["angle_deg"] == 90.0


# ---------------------------------------------------------------------------
# the ball mode through both directions


def test_div_map_boundary_values_near_constant(ball_maps):
    res = ball_maps[3]["div"]
    assert not res.degenerate
    assert res.diagnostics["trace_rho"] <= 0.05          # measured 0.0425
    assert res.diagnostics["rayleigh_rel"] <= 0.07       # measured 0.0564


def test_div_map_diagnostics_shrink_under_refinement(ball_maps):
    d2, d3 = ball_maps[2]["div"].diagnostics, ball_maps[3]["div"].diagnostics
    for key in ("pde_rel", "rayleigh_rel", "neumann_rel", "trace_rho"):
        assert d3[key] < d2[key]


def test_div_map_radial_profile(ball_maps):
    """The mapped field follows the radial potential profile up to scale."""
    msh = ball3(3)
    mode = ball_maps[3]["mode"]
    sdm = fem.dof_map(msh, "scalar", 2, "SOLID")
    v = ball_maps[3]["div"].field
    ref = sdm.interpolate(lambda pts: mode.potential(pts))
    num = abs(fem.inner_l2(v, ref, msh, kind="scalar"))
    den = np.sqrt(fem.inner_l2(v, v, msh, kind="scalar")
                  * fem.inner_l2(ref, ref, msh, kind="scalar"))
    assert num / den >= 0.99


def test_grad_map_near_dirichlet_and_normal_traction(ball_maps):
    res = ball_maps[3]["grad"]
    # RMS boundary trace over RMS field strength; the radial mode's gradient
    # vanishes on the boundary both ways
    assert res.diagnostics["dirichlet_rel"] <= 0.06      # measured 0.0513
    assert res.diagnostics["traction_rho"] <= 0.10       # measured 0.0834
    assert res.diagnostics["q_rel_err"] <= 0.10          # measured 0.0094


def test_grad_map_diagnostics_shrink_under_refinement(ball_maps):
    d2, d3 = ball_maps[2]["grad"].diagnostics, ball_maps[3]["grad"].diagnostics
    for key in ("dirichlet_rel", "traction_rho", "q_rel_err"):
        assert d3[key] < d2[key]


def test_discrete_witness_grad_map():
    """Gradient direction fed with the detected (discrete) witness mode.

    The discrete eigenfunction carries its own O(h) derivative noise on top
    of the recovery error, so the fits land above the interpolated-mode
    numbers: traction rho 0.184 (r2) -> 0.122 (r3), q error 0.33 -> 0.11.
    """
    rhos, qerrs = {}, {}
    for r in (2, 3):
        msh = ball3(r)
        sdm = fem.dof_map(msh, "scalar", 2, "SOLID")
        A, M = fem.assemble_scalar_laplacian(msh)
        pairs = eig.neumann_smallest_eigs(A, M, 10)
        Mb, bn = fem.boundary_node_mass(msh, sdm, meshmod.INTERFACE)
        best = None
        for pr in pairs:
            chat, rho, excl = classify.schiffer_trace_fit(pr.psi_tilde[bn], Mb)
            if not excl and (best is None or rho < best[2]):
                best = (pr, chat, rho)
        pr, chat, rho = best
        assert rho <= 0.1  # it really is the Schiffer witness
        res = bridge.grad_map(pr.psi_tilde, pr.mu, chat, PARAMS, msh)
        rhos[r] = res.diagnostics["traction_rho"]
        qerrs[r] = res.diagnostics["q_rel_err"]
    assert rhos[3] <= 0.15 and qerrs[3] <= 0.15
    assert rhos[3] < rhos[2] and qerrs[3] < qerrs[2]


# ---------------------------------------------------------------------------
# round trip


def test_roundtrip_angle_small_and_shrinking(ball_maps):
    a2 = ball_maps[2]["rt"].diagnostics["angle_deg"]
    a3 = ball_maps[3]["rt"].diagnostics["angle_deg"]
    assert a3 <= 10.0                                    # measured 7.19
    assert a3 < a2                                       # 10.24 -> 7.19


def test_roundtrip_scaling_bit_identical():
    msh = disk(2)
    mode = ballmod.disk_mode(1, 1.0, PARAMS)
    dmv = fem.dof_map(msh, "vector", 2, "SOLID")
    psi = dmv.interpolate(mode)
    base = bridge.roundtrip(psi, mode.mu, PARAMS, msh)
    doubled = bridge.roundtrip(2.0 * psi, mode.mu, PARAMS, msh)
    np.testing.assert_array_equal(doubled.field, 2.0 * base.field)


def test_roundtrip_rejects_nonpositive_eigenvalue():
    msh = disk(1)
    dmv = fem.dof_map(msh, "vector", 2, "SOLID")
    psi = np.ones(dmv.num_dofs)
    with pytest.raises(ValidationError):
        bridge.roundtrip(psi, 0.0, PARAMS, msh)
    with pytest.raises(ValidationError):
        bridge.roundtrip(psi, -2.0, PARAMS, msh)


def test_maps_linear_in_field():
    msh = disk(2)
    dmv = fem.dof_map(msh, "vector", 2, "SOLID")
    rng = np.random.default_rng(7)
    f = rng.standard_normal(dmv.num_dofs)
    g = rng.standard_normal(dmv.num_dofs)
    ra = bridge.div_map(f, 4.0, 1.0, PARAMS, msh).field
    rb = bridge.div_map(g, 4.0, 1.0, PARAMS, msh).field
    rab = bridge.div_map(3.0 * f - 2.0 * g, 4.0, 1.0, PARAMS, msh).field
    np.testing.assert_allclose(rab, 3.0 * ra - 2.0 * rb, rtol=0, atol=1e-10)


# ---------------------------------------------------------------------------
# wave variant


def test_wave_direction_validated():
    msh = disk(1)
    with pytest.raises(ValidationError):
        bridge.wave_variant_map(np.zeros(3), 1.0, 0.0, msh, direction="curl")


def test_wave_grad_traction_fit(ball_maps):
    # full-gradient traction is half the elastic one here, so the tangential
    # noise weighs double: 0.25 (r2) -> 0.13 (r3), under 0.1 by refinement 4
    w2 = ball_maps[2]["wave_grad"].diagnostics
    w3 = ball_maps[3]["wave_grad"].diagnostics
    assert w3["traction_rho"] <= 0.15                    # measured 0.1335
    assert w3["traction_rho"] < w2["traction_rho"]
    assert w3["q_rel_err"] <= 0.05                       # measured 0.0376


def test_wave_grad_traction_refinement_four():
    msh = ball3(4)
    mode = ballmod.ball_mode(1, 1.0, PARAMS)
    sdm = fem.dof_map(msh, "scalar", 2, "SOLID")
    u = sdm.interpolate(lambda pts: mode.potential(pts))
    fit = classify.fit_normal_traction(
        bridge.gradient_traction(msh, u, 1.0, 0.0), msh)
    assert fit.rho <= 0.1                                # measured 0.0896


def test_wave_div_matches_scalar_plumbing():
    """direction='div' with value mu and constant q reproduces div_map's
    field (lambda=1 passthrough, same projection)."""
    msh = disk(2)
    mode = ballmod.disk_mode(1, 1.0, PARAMS)
    dmv = fem.dof_map(msh, "vector", 2, "SOLID")
    psi = dmv.interpolate(mode)
    wave = bridge.wave_variant_map(psi, mode.mu, 0.3, msh, direction="div")
    lame = bridge.div_map(psi, mode.mu, 0.3 * LAM, PARAMS, msh)
    np.testing.assert_array_equal(wave.field, lame.field)
    assert wave.eigenvalue == mode.mu
    assert wave.constant == 0.3


# ---------------------------------------------------------------------------
# serialization and validation


def test_result_json_roundtrip(tmp_path, ball_maps):
    res = ball_maps[2]["div"]
    path = tmp_path / "bridge.json"
    bridge.save_result(path, res)
    back = bridge.load_result(path)
    np.testing.assert_array_equal(back.field, res.field)
    assert back.diagnostics == res.diagnostics
    assert back.eigenvalue == res.eigenvalue
    assert back.constant == res.constant
    assert back.kind == res.kind and back.degenerate == res.degenerate


def test_from_json_rejects_other_documents():
    with pytest.raises(ValidationError):
        bridge.BridgeResult.from_json('{"format": "something-else"}')


def test_field_shape_validated():
    msh = disk(1)
    with pytest.raises(ValidationError):
        bridge.div_map(np.zeros(7), 1.0, 0.0, PARAMS, msh)
    with pytest.raises(ValidationError):
        bridge.grad_map(np.zeros(5), 1.0, 0.0, PARAMS, msh)


def test_nonfinite_diagnostics_rejected():
    with pytest.raises(ValidationError):
        bridge.BridgeResult(kind="div", field=np.zeros(3), eigenvalue=1.0,
                            constant=0.0, diagnostics={"pde_rel": np.inf})


def test_result_field_read_only(ball_maps):
    res = ball_maps[2]["grad"]
    with pytest.raises(ValueError):
        res.field[0] = 1.0
