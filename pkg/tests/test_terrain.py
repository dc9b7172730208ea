import numpy as np
import pytest

from cahsor.terrain import (
    Control,
    DEFAULT_TERRAIN_TYPES,
    InstabilityMetrics,
    SimConfig,
    TerrainError,
    VehicleState,
    make_terrain_map,
    oracle_metrics,
    step,
    wrap_angle,
)

BANDS_SPEC = {
    "layout": "bands",
    "bands": ["pavement", "grass", "rocks"],
    "band_axis": "x",
    "width": 60,
    "height": 60,
    "cell_size": 0.25,
    "seed": 7,
    "types": ["pavement", "grass", "rocks"],
}


def test_band_layout_cells():
    m = make_terrain_map(BANDS_SPEC)
    assert m.type_names[m.cells[30, 5]] == "pavement"
    assert m.type_names[m.cells[30, 30]] == "grass"
    assert m.type_names[m.cells[30, 55]] == "rocks"


def test_map_determinism():
    a = make_terrain_map(BANDS_SPEC)
    b = make_terrain_map(BANDS_SPEC)
    assert np.array_equal(a.cells, b.cells)
    assert np.array_equal(a.texture, b.texture)


def test_map_seed_changes_texture():
    a = make_terrain_map(BANDS_SPEC)
    b = make_terrain_map({**BANDS_SPEC, "seed": 8})
    assert not np.array_equal(a.texture, b.texture)


def test_unknown_type_rejected():
    with pytest.raises(TerrainError):
        make_terrain_map({**BANDS_SPEC, "bands": ["pavement", "mud", "rocks"]})
    with pytest.raises(TerrainError):
        make_terrain_map({**BANDS_SPEC, "types": ["pavement", "mud"]})


def test_bad_dimensions_rejected():
    with pytest.raises(TerrainError):
        make_terrain_map({**BANDS_SPEC, "width": 0})


def test_checkerboard_and_explicit_cells():
    m = make_terrain_map(
        {
            "layout": "checkerboard",
            "board": ["pavement", "grass"],
            "tile": 4,
            "width": 16,
            "height": 16,
            "cell_size": 0.25,
            "seed": 1,
        }
    )
    assert m.type_names[m.cells[0, 0]] == "pavement"
    assert m.type_names[m.cells[0, 4]] == "grass"
    m2 = make_terrain_map(
        {
            "layout": "cells",
            "base": "pavement",
            "cells": [[2, 3, "rocks"]],
            "width": 8,
            "height": 8,
            "cell_size": 0.5,
            "seed": 1,
        }
    )
    assert m2.type_names[m2.cells[3, 2]] == "rocks"
    assert m2.type_names[m2.cells[0, 0]] == "pavement"


# Frozen hand evaluation of the oracle formulas at the two operating points
# (kappa = tan(0.5)/0.55, a_lat = 16 * kappa, grip = mu * 9.81).
PAVEMENT_POINT = InstabilityMetrics(0.3531718034091498, 1.3243500000000001, 0.04)
GRASS_POINT = InstabilityMetrics(0.6229468034091498, 0.515025, 0.12)


def test_oracle_hand_values():
    cfg = SimConfig()
    st = VehicleState(v=4.0)
    u = Control(v_cmd=4.0, steer=0.5)
    got_p = oracle_metrics(st, u, DEFAULT_TERRAIN_TYPES["pavement"], cfg)
    assert got_p.sliding == pytest.approx(PAVEMENT_POINT.sliding, abs=1e-12)
    assert got_p.roll == pytest.approx(PAVEMENT_POINT.roll, abs=1e-12)
    assert got_p.bumpiness == pytest.approx(PAVEMENT_POINT.bumpiness, abs=1e-12)
    got_g = oracle_metrics(st, u, DEFAULT_TERRAIN_TYPES["grass"], cfg)
    assert got_g.sliding == pytest.approx(GRASS_POINT.sliding, abs=1e-12)
    assert got_g.roll == pytest.approx(GRASS_POINT.roll, abs=1e-12)
    assert got_g.bumpiness == pytest.approx(GRASS_POINT.bumpiness, abs=1e-12)


def test_oracle_zero_speed():
    cfg = SimConfig()
    for name, cell in DEFAULT_TERRAIN_TYPES.items():
        m = oracle_metrics(VehicleState(v=0.0), Control(0.0, 0.37), cell, cfg)
        assert (m.sliding, m.roll, m.bumpiness) == (0.0, 0.0, 0.0), name


def test_oracle_monotone_in_speed():
    cfg = SimConfig()
    u = Control(v_cmd=0.0, steer=0.35)
    for cell in DEFAULT_TERRAIN_TYPES.values():
        prev = None
        for v in np.linspace(0.0, 4.8, 25):
            m = oracle_metrics(VehicleState(v=float(v)), u, cell, cfg)
            if prev is not None:
                assert m.sliding >= prev.sliding - 1e-12
                assert m.roll >= prev.roll - 1e-12
                assert m.bumpiness >= prev.bumpiness - 1e-12
            prev = m


def test_terrain_separation():
    cfg = SimConfig()
    st = VehicleState(v=4.0)
    u = Control(4.0, 0.5)
    p = oracle_metrics(st, u, DEFAULT_TERRAIN_TYPES["pavement"], cfg)
    g = oracle_metrics(st, u, DEFAULT_TERRAIN_TYPES["grass"], cfg)
    r = oracle_metrics(st, u, DEFAULT_TERRAIN_TYPES["rocks"], cfg)
    assert p.roll > g.roll
    assert g.sliding > p.sliding
    assert r.bumpiness > p.bumpiness


def test_step_rate_limit():
    m = make_terrain_map(BANDS_SPEC)
    cfg = SimConfig()
    res = step(VehicleState(x=2.0, y=7.5, v=0.0), Control(4.8, 0.0), m, cfg)
    assert res.state.v == pytest.approx(0.3, abs=1e-12)


def test_step_straight_has_no_lateral_channels():
    m = make_terrain_map(BANDS_SPEC)
    cfg = SimConfig(noise_scale=0.0)
    st = VehicleState(x=2.0, y=7.5, v=2.0)
    for _ in range(10):
        res = step(st, Control(3.0, 0.0), m, cfg)
        assert res.metrics.sliding == 0.0
        assert res.metrics.roll == 0.0
        st = res.state
    assert st.y == pytest.approx(7.5)


def test_step_noise_free_matches_oracle_bitwise():
    m = make_terrain_map(BANDS_SPEC)
    cfg = SimConfig(noise_scale=0.0)
    st = VehicleState(x=7.5, y=7.5, v=3.0, yaw=0.3)
    u = Control(2.0, 0.4)
    res = step(st, u, m, cfg, rng=np.random.default_rng(0))
    cell = m.type_at(st.x, st.y)
    expect = oracle_metrics(VehicleState(v=res.state.v), u, cell, cfg)
    assert res.metrics == expect


def test_replay_determinism():
    m = make_terrain_map(BANDS_SPEC)
    cfg = SimConfig(noise_scale=0.3)

    def run():
        rng = np.random.default_rng(42)
        st = VehicleState(x=3.0, y=3.0, v=0.0)
        out = []
        for k in range(60):
            u = Control(2.5, 0.3 * np.sin(0.2 * k))
            res = step(st, u, m, cfg, rng)
            st = res.state
            out.append((st.x, st.y, st.yaw, st.v, res.metrics))
        return out

    assert run() == run()


def test_step_noise_keeps_metrics_nonnegative():
    m = make_terrain_map(BANDS_SPEC)
    cfg = SimConfig(noise_scale=2.0)
    rng = np.random.default_rng(1)
    st = VehicleState(x=7.5, y=7.5, v=1.0)
    for _ in range(200):
        res = step(st, Control(1.0, 0.1), m, cfg, rng)
        assert res.metrics.sliding >= 0.0
        assert res.metrics.roll >= 0.0
        assert res.metrics.bumpiness >= 0.0


def test_out_of_bounds_clamped_and_flagged():
    m = make_terrain_map(BANDS_SPEC)
    cfg = SimConfig()
    res = step(VehicleState(x=0.05, y=7.5, yaw=np.pi, v=4.0), Control(4.0, 0.0), m, cfg)
    assert res.clamped
    assert m.in_bounds(res.state.x, res.state.y)


def test_wrap_angle():
    assert wrap_angle(np.pi) == pytest.approx(np.pi)
    assert wrap_angle(-np.pi) == pytest.approx(np.pi)
    assert wrap_angle(3 * np.pi + 0.1) == pytest.approx(-np.pi + 0.1)
