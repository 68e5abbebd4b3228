import pytest
import yaml

from mflq.config import parse_config, parse_mapping, preset_names
from mflq.errors import ConfigError
from mflq.exhaustible import ExhaustibleParams


def paths(exc):
    return {p for p, _ in exc.value.errors}


def minimal_exhaustible():
    return {"grid": {"t0": 0.0, "T": 1.0, "n_steps": 100},
            "exhaustible": {"mu": 0.1, "nu": 0.3, "nu0": 0.2, "epsilon": 2.0},
            "simulation": {"init": {"kind": "point", "x0": [1.0]}}}


def test_presets_parse():
    assert {"classical", "exhaustible", "general"} <= set(preset_names())
    for name in preset_names():
        cfg = parse_config(f"preset:{name}")
        cfg.coefficient_set()


def test_minimal_exhaustible_is_valid():
    cfg = parse_mapping(minimal_exhaustible())
    p = cfg.exhaustible_params()
    assert (p.mu, p.nu, p.nu0, p.epsilon, p.mean_reserve) == (0.1, 0.3, 0.2, 2.0, 1.0)
    assert cfg.run["phi_convention"] == "terminal-zero"
    assert isinstance(p, ExhaustibleParams)


def test_model_and_preset_conflict():
    raw = minimal_exhaustible()
    raw["model"] = {"d": 1, "m": 1, "coefficients": {"R": 1.0}}
    with pytest.raises(ConfigError) as exc:
        parse_mapping(raw)
    assert {"model", "exhaustible"} <= paths(exc)
    assert "model" in str(exc.value) and "exhaustible" in str(exc.value)


def test_single_step_grid_rejected():
    raw = minimal_exhaustible()
    raw["grid"]["n_steps"] = 1
    with pytest.raises(ConfigError) as exc:
        parse_mapping(raw)
    assert "grid.n_steps" in paths(exc)


@pytest.mark.parametrize("mutate, where", [
    (lambda r: r.update(extra=1), "extra"),
    (lambda r: r["grid"].update(T=-1.0), "grid.T"),
    (lambda r: r["simulation"].update(mode="fast"), "simulation.mode"),
    (lambda r: r["simulation"].update(seed=-3), "simulation.seed"),
    (lambda r: r.update(run={"phi_convention": "nope"}), "run.phi_convention"),
    (lambda r: r.update(run={"verify": {"gateaux_steps": 0}}), "run.verify.gateaux_steps"),
    (lambda r: r.update(run={"verify": {"bsde_steps": [250, 300]}}), "run.verify.bsde_steps"),
    (lambda r: r.update(run={"nash": {"families": ["psychic"]}}), "run.nash.families"),
    (lambda r: r["exhaustible"].update(gamma=0.5), "exhaustible"),
    (lambda r: r["simulation"].update(init={"kind": "point", "x0": [0.0]}), "simulation.init"),
])
def test_schema_errors(mutate, where):
    raw = minimal_exhaustible()
    mutate(raw)
    with pytest.raises(ConfigError) as exc:
        parse_mapping(raw)
    assert where in paths(exc)


def test_model_section_checks():
    base = {"grid": {"T": 1.0, "n_steps": 4}, "model": {"d": 2, "m": 1, "coefficients": {}}}
    raw = dict(base, model={"d": 2, "m": 1, "coefficients": {"B": [[1.0, 0.0]], "Zeta": 1}})
    with pytest.raises(ConfigError) as exc:
        parse_mapping(raw)
    assert {"model.coefficients.B", "model.coefficients.Zeta"} <= paths(exc)
    raw = dict(base, model={"d": 1, "m": 1, "coefficients": {"R": {"rule": "tabulated", "value": [1, 2, 3]}}})
    with pytest.raises(ConfigError) as exc:
        parse_mapping(raw)
    assert "model.coefficients.R" in paths(exc)


def test_model_shorthand_and_schedules():
    raw = {"grid": {"T": 2.0, "n_steps": 4},
           "model": {"d": 1, "m": 1, "coefficients": {
               "B": 1, "R": {"rule": "exp_discount", "value": 1.0, "rate": 0.1},
               "q": {"rule": "tabulated", "value": [0, 1, 2, 3, 4]}, "H": 2.0}}}
    cs = parse_mapping(raw).coefficient_set()
    t = cs.node_table
    assert t.B[0, 0, 0] == 1.0 and t.q[2, 0] == 2.0 and cs.H[0, 0] == 2.0


@pytest.mark.parametrize("name", ["exhaustible", "general", "classical"])
def test_resolved_config_round_trip(name):
    cfg = parse_config(f"preset:{name}")
    again = parse_mapping(yaml.safe_load(cfg.dump()))
    assert again == cfg


def test_overrides():
    cfg = parse_config("preset:exhaustible").with_overrides(seed=9, steps=40, particles=3, paths=2,
                                                           phi_convention="paper-forward-integral", out="x")
    assert cfg.simulation["seed"] == 9 and cfg.grid["n_steps"] == 40
    assert cfg.simulation["particles"] == 3 and cfg.simulation["paths"] == 2
    assert cfg.run["phi_convention"] == "paper-forward-integral" and cfg.output["directory"] == "x"


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "missing.yaml")
    with pytest.raises(ConfigError):
        parse_config("preset:nonexistent")
    bad = tmp_path / "bad.yaml"
    bad.write_text("grid: [unclosed")
    with pytest.raises(ConfigError):
        parse_config(bad)
    bad.write_text("- just\n- a list\n")
    with pytest.raises(ConfigError):
        parse_config(bad)
