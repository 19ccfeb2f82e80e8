import math
from dataclasses import replace

import numpy as np
import pytest

from stochstokes.experiments import (
    ConfigError,
    ExperimentConfig,
    collect_samples,
    default_config,
    estimate_strong_error,
    fit_rate,
    run_convergence_study,
    stability_audit,
    summarize,
)
from stochstokes.fem import NestingError
from stochstokes.results import SAMPLES_FILE, load_results, persist_results, read_samples, write_samples

TINY = dict(n_list=(2,), ref_n=4, tau_list=(2.0**-2, 2.0**-3, 2.0**-4), ref_tau=2.0**-5, samples=6)


def tiny(**kw):
    return default_config("time", **{**TINY, **kw})


def test_fit_rate_identities():
    assert fit_rate([1, 0.5, 0.25], [1, 0.5, 0.25]) == pytest.approx((1.0, 0.0), abs=1e-14)
    assert fit_rate([1, 1 / 4, 1 / 16], [1, 0.5, 0.25]) == pytest.approx((2.0, 0.0), abs=1e-14)


def test_fit_rate_perturbed_quadratic():
    rng = np.random.default_rng(0)
    h = 2.0 ** -np.arange(1, 7)
    # multiplicative perturbations of at most 5% bend the slope by < 0.05
    e = 3.0 * h**2 * (1 + 0.05 * rng.uniform(-1, 1, size=h.size))
    slope, res = fit_rate(e, h)
    assert abs(slope - 2) < 0.05 and res > 0


@pytest.mark.parametrize("errs,scales", [([1, 0, 1], [1, 2, 3]), ([1, 2, -3], [1, 2, 3]), ([1, 2], [1, 2]), ([1, 2, 3], [1, 2, 0])])
def test_fit_rate_rejects(errs, scales):
    with pytest.raises(ValueError):
        fit_rate(errs, scales)


def test_config_validation():
    tiny().validate()
    with pytest.raises(ConfigError):
        tiny(ref_n=3).validate()
    with pytest.raises(ConfigError):
        tiny(tau_list=(0.3, 0.1, 0.05)).validate()
    with pytest.raises(ConfigError):
        tiny(ref_tau=2.0**-2, tau_list=(2.0**-3,), n_list=(2,), ref_n=2).validate()
    with pytest.raises(ConfigError):
        tiny(r=3.0).validate()
    with pytest.raises(ConfigError):
        replace(tiny(), study="weird").validate()


def test_reference_level_error_is_zero():
    cfg = tiny()
    for s in range(4):
        eu, ep = estimate_strong_error(cfg, (cfg.ref_n, cfg.ref_tau), s)
        assert eu == 0.0 and ep == 0.0


def test_non_nested_level_rejected():
    with pytest.raises(NestingError):
        estimate_strong_error(tiny(), (3, 2.0**-3), 0)


def test_errors_deterministic_and_sample_dependent():
    cfg = tiny()
    a = estimate_strong_error(cfg, 1, 0)
    b = estimate_strong_error(cfg, 1, 1)
    assert a != b
    assert a == estimate_strong_error(cfg, 1, 0)
    assert a[0] > 0 and a[1] > 0


def test_zero_noise_spatial_error_strictly_decreasing():
    """Zero noise, f=(1,1), same tau: the error against n_ref decreases strictly in n."""
    cfg = default_config("space", zero_noise=True, n_list=(2, 4, 8), ref_n=16, tau_list=(2.0**-3,), ref_tau=2.0**-3, samples=1)
    errs = [estimate_strong_error(cfg, li, 0)[0] for li in range(3)]
    assert errs[0] > errs[1] > errs[2], errs


def _smooth_forcing(t, x, y):
    return (np.cos(np.pi * x) * np.sin(np.pi * y) * (1 + t), x * y)


def test_deterministic_spatial_error_with_nonconstant_forcing():
    # a forcing outside the discrete space makes the spatial error visible
    cfg = default_config(
        "space", zero_noise=True, n_list=(4, 8, 16), ref_n=64, tau_list=(2.0**-3,), ref_tau=2.0**-3, samples=1, f=_smooth_forcing
    )
    errs = np.sqrt([estimate_strong_error(cfg, li, 0)[0] for li in range(3)])
    assert errs[0] > errs[1] > errs[2]
    # second order once the mesh resolves the forcing
    assert np.log2(errs[1] / errs[2]) > 1.8


def test_mc_average_independent_of_workers_and_order(tmp_path):
    cfg = tiny(samples=20)
    serial = collect_samples(cfg, None, workers=1)
    parallel = collect_samples(cfg, None, workers=2)
    assert serial == parallel
    a = summarize(cfg, serial)
    b = summarize(cfg, list(reversed(parallel)))
    assert a == b
    for r1, r2 in zip(a.rows, b.rows):
        assert r1.err_u_ms == r2.err_u_ms  # bitwise


def test_study_table_shape_and_slopes(tmp_path):
    cfg = tiny(out_dir=str(tmp_path))
    table = run_convergence_study(cfg)
    assert [r.tau for r in table.rows] == list(cfg.tau_list)
    assert all(r.M == 6 and r.err_u_ms >= 0 and r.err_u_se >= 0 for r in table.rows)
    assert {s.quantity for s in table.slopes} == {"velocity", "pressure_integral"}
    assert (tmp_path / SAMPLES_FILE).exists()


def test_fewer_than_three_levels_warns(tmp_path):
    table = run_convergence_study(tiny(tau_list=(2.0**-2, 2.0**-3), out_dir=str(tmp_path)))
    assert table.slopes == [] and table.warnings


def test_resume_recomputes_only_missing(tmp_path, monkeypatch):
    cfg = tiny(samples=8, out_dir=str(tmp_path / "full"))
    full = run_convergence_study(cfg)
    persist_results(full, cfg.out_dir)
    side = tmp_path / "full" / SAMPLES_FILE
    recs = read_samples(side)
    kept = [r for r in recs if (r.level * 8 + r.sample_index) % 2 == 0]
    part_dir = tmp_path / "part"
    part_dir.mkdir()
    write_samples(kept, part_dir / SAMPLES_FILE)

    import stochstokes.experiments as ex

    seen = []
    real = ex.compute_block

    def spy(config, wanted):
        seen.extend((li, s) for li, ss in wanted.items() for s in ss)
        return real(config, wanted)

    monkeypatch.setattr(ex, "compute_block", spy)
    resumed = run_convergence_study(replace(cfg, out_dir=str(part_dir)), workers=1)
    missing = {(r.level, r.sample_index) for r in recs} - {(r.level, r.sample_index) for r in kept}
    assert set(seen) == missing
    assert resumed == full
    persist_results(resumed, part_dir)
    for name in ("results.csv", "slopes.csv", SAMPLES_FILE):
        assert (part_dir / name).read_bytes() == (tmp_path / "full" / name).read_bytes()


def test_rms_and_se_aggregation():
    cfg = tiny(samples=5)
    recs = collect_samples(cfg, None, workers=1)
    table = summarize(cfg, recs)
    lvl0 = np.array([r.err_u_sq for r in recs if r.level == 0])
    assert table.rows[0].err_u_ms == pytest.approx(lvl0.mean(), rel=1e-15)
    assert table.rows[0].err_u_se == pytest.approx(lvl0.std(ddof=1) / math.sqrt(5), rel=1e-12)


def test_stability_zero_everything():
    cfg = default_config("stability", zero_noise=True, f=(0.0, 0.0), n_list=(4,), samples=2)
    audit = stability_audit(cfg)
    for row in audit.rows:
        assert row.max_l2_sq == 0 and row.sum_increment_sq == 0 and row.tau_sum_h1_sq == 0


@pytest.fixture(scope="module")
def stab32():
    return stability_audit(default_config("stability", samples=32))


def test_stability_ratios_case_I(stab32):
    assert [r.tau for r in stab32.rows] == [2.0**-4, 2.0**-5]
    assert stab32.passed
    assert all(0.5 <= v <= 2 for v in stab32.ratios.values())
    assert stab32.to_csv().splitlines()[0].startswith("tau,M,")


def test_stability_mc_consistency(stab32):
    big = stability_audit(default_config("stability", samples=128))
    for a, b in zip(stab32.rows, big.rows):
        for q in ("max_l2_sq", "sum_increment_sq", "tau_sum_h1_sq"):
            se = math.hypot(getattr(a, q + "_se"), getattr(b, q + "_se"))
            assert abs(getattr(a, q) - getattr(b, q)) < 3 * se


def test_config_is_frozen():
    with pytest.raises(Exception):
        ExperimentConfig().samples = 3
