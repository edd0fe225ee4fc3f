import numpy as np
import pytest

from reiterate.config import (
    ExperimentConfig,
    parse_config,
    parse_number,
    parse_number_list,
)
from reiterate.errors import ConfigError
from reiterate.grid import Grid


def write(tmp_path, text):
    path = tmp_path / "exp.cfg"
    path.write_text(text)
    return str(path)


MINIMAL = """
field = constant(3)
dim = 1
eps = 1/8
"""

PRODUCT = """
field = laminate1d(2+sin(2*pi*y1), 2+sin(2*pi*y2))
dim = 1
eps = 1/8, 1/16
"""


def test_number_grammar():
    assert parse_number("2^-5") == 1 / 32
    assert parse_number("2^3") == 8.0
    assert parse_number("3/4") == 0.75
    assert parse_number("1e-3") == 1e-3
    assert parse_number(" 42 ") == 42.0
    assert parse_number_list("1/2, 1/4 , 1/8") == (0.5, 0.25, 0.125)
    with pytest.raises(ValueError):
        parse_number("2**5")


def test_minimal_config_parses(tmp_path):
    cfg = parse_config(write(tmp_path, MINIMAL))
    assert cfg.d == 1
    assert cfg.eps_values == (0.125,)
    assert cfg.lambdas == (1.0,)  # constant field defaults to a one-rung ladder
    assert cfg.rhs_source == "1"
    assert cfg.boundary_source == "0"
    assert cfg.out == "runs"
    assert cfg.seed == 0


def test_comments_and_blank_lines_ignored(tmp_path):
    cfg = parse_config(write(tmp_path, """
# leading comment
field = constant(2)   # trailing comment

dim = 1
eps = 1/4
"""))
    assert cfg.field_source == "constant(2)"


def test_unknown_key_named(tmp_path):
    with pytest.raises(ConfigError, match="key 'fild': unknown"):
        parse_config(write(tmp_path, MINIMAL + "fild = constant(1)\n"))


def test_all_violations_collected(tmp_path):
    try:
        parse_config(write(tmp_path, """
field = constant(3)
dim = 7
eps = 3, 1/8
bogus = 1
jobs = 0
"""))
    except ConfigError as exc:
        message = str(exc)
    else:
        pytest.fail("expected ConfigError")
    assert "key 'dim'" in message
    assert "key 'eps'" in message
    assert "key 'bogus'" in message
    assert "key 'jobs'" in message


def test_duplicate_key_rejected(tmp_path):
    with pytest.raises(ConfigError, match="assigned twice"):
        parse_config(write(tmp_path, MINIMAL + "eps = 1/4\n"))


def test_ladder_ordering_error_names_the_invariant(tmp_path):
    with pytest.raises(ConfigError, match="decrease strictly"):
        parse_config(write(tmp_path, """
field = constant(3)
dim = 1
scales = 1/4, 1/2
"""))


def test_scales_conflict_with_eps(tmp_path):
    with pytest.raises(ConfigError, match="not both"):
        parse_config(write(tmp_path, MINIMAL + "scales = 1/8\n"))


def test_lambdas_default_to_slot_count(tmp_path):
    cfg = parse_config(write(tmp_path, PRODUCT))
    assert cfg.lambdas == (1.0, 2.0)
    ladders = cfg.ladders()
    assert len(ladders) == 2
    assert ladders[0].scales == (1 / 8, 1 / 64)


def test_lambdas_must_match_slots(tmp_path):
    with pytest.raises(ConfigError, match="2 fast slots"):
        parse_config(write(tmp_path, PRODUCT + "lambdas = 1\n"))


def test_rhs_expression_evaluates(tmp_path):
    cfg = parse_config(write(tmp_path, MINIMAL + "bvp.rhs = sin(2*pi*x1)\n"))
    grid = Grid.box(0.0, 1.0, 16)
    bvp = cfg.bvp_for(grid)
    # quarter-period node carries the crest
    assert bvp.rhs.values[4] == pytest.approx(1.0)


def test_bad_expression_names_key(tmp_path):
    with pytest.raises(ConfigError, match="key 'bvp.rhs'"):
        parse_config(write(tmp_path, MINIMAL + "bvp.rhs = tan(x1)\n"))
    with pytest.raises(ConfigError, match="key 'bvp.boundary'"):
        parse_config(write(tmp_path, MINIMAL + "bvp.boundary = y1\n"))


def test_infeasible_resolution_reports_requirement(tmp_path):
    with pytest.raises(ConfigError, match="need at least 256 cells"):
        parse_config(write(tmp_path, """
field = laminate1d(2+sin(2*pi*y1))
dim = 1
eps = 1/32
resolution = 64
"""))


def test_memory_limit_guards_huge_grids(tmp_path):
    with pytest.raises(ConfigError, match="GiB"):
        parse_config(write(tmp_path, """
field = checkerboard(1, 3)
dim = 2
eps = 2^-14
"""))


def test_feasibility_precomputed(tmp_path):
    cfg = parse_config(write(tmp_path, PRODUCT))
    assert len(cfg.feasibility) == 2
    first = cfg.feasibility[0]
    # 16 cells across the finest scale 1/64
    assert first.resolution == 1024
    assert first.spacing == pytest.approx(1 / 1024)
    assert first.memory_bytes == 5 * 8 * 1025
    assert cfg.resolution_for(cfg.ladders()[0]) == 1024


def test_probe_t_restricted_to_candidates(tmp_path):
    cfg = parse_config(write(tmp_path, MINIMAL + "probe.t = 1/32\n"))
    assert cfg.probe.t == 1 / 32
    with pytest.raises(ConfigError, match="key 'probe.t'"):
        parse_config(write(tmp_path, MINIMAL + "probe.t = 1/5\n"))


def test_probe_defaults_follow_domain(tmp_path):
    cfg = parse_config(write(tmp_path, MINIMAL + "domain = 0, 2\n"))
    assert cfg.probe_center() == (1.0,)
    assert cfg.probe_radius() == 0.5
    cfg = parse_config(write(tmp_path, MINIMAL + "probe.center = 0.25\n"
                                                 "probe.radius = 1/8\n"))
    assert cfg.probe_center() == (0.25,)
    assert cfg.probe_radius() == 0.125


def test_digest_tracks_content(tmp_path):
    a = parse_config(write(tmp_path, MINIMAL))
    b = parse_config(write(tmp_path, MINIMAL))
    assert a.digest() == b.digest()
    c = parse_config(write(tmp_path, MINIMAL + "seed = 1\n"))
    assert c.digest() != a.digest()


def test_cache_resolution_order(tmp_path, monkeypatch):
    cfg = parse_config(write(tmp_path, MINIMAL + "cache = from-config\n"))
    monkeypatch.delenv("REITERATE_CACHE", raising=False)
    assert cfg.resolved_cache_dir() == "from-config"
    monkeypatch.setenv("REITERATE_CACHE", "from-env")
    assert cfg.resolved_cache_dir() == "from-env"
    bare = parse_config(write(tmp_path, MINIMAL))
    monkeypatch.delenv("REITERATE_CACHE", raising=False)
    assert bare.resolved_cache_dir() == ".reiterate-cache"


def test_overrides_replace_out_and_jobs(tmp_path):
    cfg = parse_config(write(tmp_path, MINIMAL))
    cfg2 = cfg.with_overrides(out="elsewhere", jobs=4)
    assert cfg2.out == "elsewhere"
    assert cfg2.jobs == 4
    assert cfg.out == "runs"  # original untouched


def test_missing_file_is_config_error():
    with pytest.raises(ConfigError, match="cannot read config"):
        parse_config("/nonexistent/exp.cfg")
