import logging

import numpy as np
import pandas as pd
import pytest

from fedisl.config import DatasetConfig, StochasticDelayModel
from fedisl.errors import DomainError
from fedisl.experiments import (
    CONVERGENCE_RUNS,
    ConvergenceResult,
    FailureSetup,
    aggregation_load,
    bound_bits,
    chain_bits_table,
    check_chain_table,
    check_commload,
    check_convergence,
    check_failure,
    check_nnz_table,
    convergence_preset,
    default_overlap,
    failure_ratio,
    format_table_report,
    growth_exponents,
    iteration_timeline,
    nnz_table,
    overlap_gradients,
    run_commload_experiment,
    run_convergence_experiment,
    run_failure_experiment,
    step_gaps,
    time_to_fraction,
    trained_gradients,
)
from fedisl.flcore import to_dense
from fedisl.sparsify import kept_count

N_D, OMEGA = 50, 32
S = N_D * OMEGA


def _dense(K, rng):
    return overlap_gradients(K, N_D, 1.0, OMEGA, rng, 0.0)


def test_single_satellite_plane_has_no_isl_traffic(rng):
    load = aggregation_load(_dense(1, rng), 1.0)
    assert load.ia_isl == 0 and load.noia_isl == 0
    assert load.ia_ps == load.noia_ps == S


def test_dense_loads_have_closed_forms(rng):
    load = aggregation_load(_dense(8, rng), 1.0)
    # ring depths from the sink: 0,1,2,3,4,3,2,1
    assert load.ia_isl == 7 * S and load.ia_ps == S
    assert load.noia_isl == 16 * S and load.noia_ps == 8 * S
    assert load.noia_isl + load.sink_only_ps == 17 * S


def test_dense_reduction_grows_with_plane_size():
    df = run_commload_experiment([4, 8], [1.0], n_d=N_D, elem_bits=OMEGA, source="independent", trials=2)
    reduction = dict(zip(df["K_p"], df["reduction_pct"]))
    assert reduction[4] == pytest.approx(50.0)
    assert reduction[8] == pytest.approx(100 * 2 / 3)
    np.testing.assert_allclose(df["ia_total_bits"], df["bound_bits"])


def test_sparse_aggregation_stays_below_the_independent_bound():
    df = run_commload_experiment([4, 8], [0.1], n_d=200, elem_bits=OMEGA, source="overlap", trials=3, seed=5)
    assert (df["ia_total_bits"] <= df["bound_bits"]).all()
    assert (df["ia_total_bits"] < df["noia_total_bits"]).all()
    assert (df["sink_only_total_bits"] <= df["noia_total_bits"]).all()


def test_unknown_gradient_source():
    with pytest.raises(DomainError):
        run_commload_experiment([4], [0.1], n_d=100, source="made-up", trials=1)
    with pytest.raises(DomainError):
        run_commload_experiment([4], [0.1], n_d=100, source="trained", trials=1)


SMALL_DATA = DatasetConfig(num_samples=300, test_samples=10, num_features=20, num_classes=3)
SMALL_N_D = (20 + 1) * 3


def test_trained_gradients_are_weighted_top_q_vectors():
    grads = trained_gradients(4, 0.1, seed=0, dataset=SMALL_DATA, warmup_rounds=1)
    assert len(grads) == 4
    assert sum(g.weight for g in grads) == pytest.approx(300.0)
    assert all(g.n_d == SMALL_N_D and len(g.indices) <= kept_count(SMALL_N_D, 0.1) for g in grads)


def test_trained_gradients_change_after_warm_up():
    cold = trained_gradients(4, 0.1, seed=0, dataset=SMALL_DATA, warmup_rounds=0)
    warm = trained_gradients(4, 0.1, seed=0, dataset=SMALL_DATA, warmup_rounds=2)
    assert not np.allclose(to_dense(cold[0]), to_dense(warm[0]))


def test_trained_source_keeps_the_dense_closed_form():
    df = run_commload_experiment([4], [1.0], n_d=SMALL_N_D, source="trained", trials=1, dataset=SMALL_DATA)
    assert df["source"].tolist() == ["trained"]
    assert df["reduction_pct"].item() == pytest.approx(50.0)


def test_default_overlap_interpolates_in_log_q():
    assert default_overlap(1.0) == 0.0
    assert default_overlap(0.1) == pytest.approx(0.38)
    assert default_overlap(0.01) == pytest.approx(0.10)
    assert default_overlap(10 ** -1.5) == pytest.approx(0.24)
    assert default_overlap(1e-4) == pytest.approx(0.10)


def test_overlap_gradients_share_a_core(rng):
    grads = overlap_gradients(3, 100, 0.1, OMEGA, rng, 0.5)
    supports = [set(g.indices.tolist()) for g in grads]
    assert all(len(s) == 10 for s in supports)
    assert len(set.intersection(*supports)) >= 5


def test_bound_bits_dense_is_every_vector_once():
    assert bound_bits(6, N_D, OMEGA, 1.0) == 6 * S


def test_growth_exponents_split_linear_from_quadratic():
    exponents = growth_exponents(list(range(8, 41, 4)), n_d=10, elem_bits=OMEGA)
    assert exponents["ia"] < 1.1
    assert exponents["noia"] > 1.8


# -- failure handling ---------------------------------------------------------


def test_timeline_without_jitter_is_the_deterministic_schedule():
    delays = StochasticDelayModel(learning_time=100.0, comm_time=10.0, enabled=False)
    tl = iteration_timeline(5, custodian=1, t0=0.0, sink=3, delays=delays, rng=np.random.default_rng(0))
    assert tl.arrival == {1: 0.0, 2: 10.0, 5: 10.0, 3: 20.0, 4: 20.0}
    assert tl.learned[3] == 120.0
    # slot 1 reaches sink 3 through slot 2
    assert tl.ready[2] == max(tl.learned[2], tl.ready[1] + 10.0)
    assert tl.ready[3] == max(tl.learned[3], tl.ready[2] + 10.0, tl.ready[4] + 10.0)


def test_without_jitter_no_sink_misses_its_window(caplog):
    setup = FailureSetup(delays=StochasticDelayModel(enabled=False), starts=2)
    with caplog.at_level(logging.WARNING, logger="fedisl.experiments"):
        df = run_failure_experiment([8], draws=4, seed=1, setup=setup)
    assert "noisy" in caplog.text
    assert list(df["scheme"]) == ["pass-to-neighbor", "determine-new-sink"]
    assert (df["failures"] == 0).all() and (df["mean_s"] == 0).all()
    assert (df["draws"] == 4).all()


def test_enough_draws_do_not_warn(caplog):
    setup = FailureSetup(delays=StochasticDelayModel(enabled=False), starts=2)
    with caplog.at_level(logging.WARNING, logger="fedisl.experiments"):
        df = run_failure_experiment([8], draws=100, seed=1, setup=setup)
    assert "noisy" not in caplog.text
    assert (df["draws"] == 100).all()


def test_unknown_failure_scheme():
    with pytest.raises(DomainError):
        run_failure_experiment([8], schemes=("bogus",), draws=200)


def test_failure_ratio_and_check():
    df = pd.DataFrame(
        {
            "scheme": ["pass-to-neighbor", "determine-new-sink"] * 2,
            "K_p": [40, 40, 48, 48],
            "mean_s": [900.0, 100.0, 300.0, 150.0],
        }
    )
    ratio = failure_ratio(df)
    assert ratio[40] == pytest.approx(9.0)
    assert check_failure(df, min_ratio=3.0) == [
        "K_p=48: pass-to-neighbor/determine-new-sink = 2.00 < 3.0"
    ]
    assert check_failure(df[df["scheme"] == "pass-to-neighbor"]) == []


# -- estimators and checks ----------------------------------------------------


def test_small_estimator_tables_agree_with_their_formulas():
    nnz = nnz_table([100], [0.1], [1, 2, 3], trials=2000, seed=0)
    assert nnz.loc[nnz["L"] == 1, "formula"].item() == pytest.approx(10.0)
    assert check_nnz_table(nnz, sigmas=4.0) == []
    chain = chain_bits_table(200, OMEGA, [0.1], [1, 2, 3], trials=500, shared_trials=50, seed=0)
    assert check_chain_table(chain, rel_tol=0.05) == []


def test_check_commload_flags_a_small_reduction():
    df = run_commload_experiment([8], [1.0], n_d=N_D, elem_bits=OMEGA, source="independent", trials=1)
    problems = check_commload(df, K_check=8, exponents={"ia": 1.5, "noia": 2.0})
    assert any("IA reduction" in p for p in problems)
    assert any("growth exponent" in p for p in problems)


def test_format_table_report():
    df = pd.DataFrame({"K_p": [4], "reduction_pct": [50.0]})
    assert "all thresholds met" in format_table_report("LOAD", df, [])
    report = format_table_report("LOAD", df, ["q=1.0: off"])
    assert "FAIL q=1.0: off" in report
    assert "CHECKS" not in format_table_report("LOAD", df)


def test_check_commload_without_targets_keeps_the_structural_checks():
    df = run_commload_experiment([8], [1.0], n_d=N_D, elem_bits=OMEGA, source="independent", trials=1)
    problems = check_commload(df, K_check=8, targets=False)
    assert not any("IA reduction" in p for p in problems)
    assert any("sink-only" in p for p in problems)


# -- convergence --------------------------------------------------------------


def test_time_to_fraction_uses_the_last_accuracy():
    trace = pd.DataFrame({"t_seconds": [0.0, 100.0, 200.0, 300.0], "accuracy": [0.1, 0.5, 0.8, 0.85]})
    assert time_to_fraction(trace) == 200.0
    assert time_to_fraction(trace, 0.5) == 100.0
    assert np.isnan(time_to_fraction(trace.iloc[:0]))


def test_step_gaps_sort_the_update_times():
    np.testing.assert_array_equal(step_gaps([300.0, 100.0, 700.0]), [200.0, 400.0])
    assert len(step_gaps([5.0])) == 0


def test_convergence_presets():
    assert convergence_preset("leo-sync-noisl") == "wdelta-leo-sync-noisl"
    assert convergence_preset("gs-async-isl", "wstar") == "wstar-gs-async-isl"
    with pytest.raises(DomainError):
        convergence_preset("moon-sync-isl")


def _summary(**overrides):
    rows = {
        "leo-sync-isl": {"t90_s": 1000.0, "updates": 20, "updates_12h": 20},
        "leo-sync-noisl": {"t90_s": 8000.0, "updates": 4, "updates_12h": 4},
        "gs-sync-noisl": {"t90_s": 9000.0, "updates": 3, "updates_12h": 3, "min_step_gap_s": 9000.0},
        "gs-sync-isl": {"t90_s": 2000.0, "updates": 10, "updates_12h": 10},
        "gs-async-isl": {"t90_s": 1500.0, "updates": 30, "updates_12h": 30},
    }
    for label, values in overrides.items():
        rows[label].update(values)
    frame = pd.DataFrame([{"label": k, "min_step_gap_s": np.nan, "orbital_period_s": 7600.0, **v}
                          for k, v in rows.items()])
    return ConvergenceResult(pd.DataFrame(columns=["label", "t_seconds", "accuracy", "iteration"]), frame)


def test_check_convergence_passes_and_flags_each_condition():
    assert check_convergence(_summary()) == []
    problems = check_convergence(_summary(**{
        "leo-sync-isl": {"t90_s": 3000.0},
        "gs-sync-noisl": {"min_step_gap_s": 5000.0},
        "gs-async-isl": {"updates_12h": 10},
    }))
    assert len(problems) == 3
    assert "ratio 0.375" in problems[0]
    assert "less than one orbital period" in problems[1]
    assert "async made 10 updates in 12 h, sync 10" == problems[2]


def test_check_convergence_edge_cases(caplog):
    result = _summary(**{"leo-sync-noisl": {"t90_s": np.nan}, "gs-sync-noisl": {"updates": 1}})
    with caplog.at_level(logging.WARNING, logger="fedisl.experiments"):
        assert check_convergence(result) == []
    assert "no step spacing" in caplog.text
    assert check_convergence(_summary(**{"leo-sync-isl": {"t90_s": np.nan}})) == ["leo-sync-isl made no global update"]
    partial = _summary()
    partial.summary = partial.summary[partial.summary["label"] == "gs-sync-isl"]
    assert check_convergence(partial) == []


# -- desk-scale acceptance runs -----------------------------------------------


@pytest.mark.slow
def test_new_sink_beats_passing_around_the_ring_at_forty_satellites():
    df = run_failure_experiment([40], draws=400, seed=0)
    assert (df["failures"] > 0).all()
    assert failure_ratio(df)[40] >= 3.0
    assert check_failure(df) == []


@pytest.mark.slow
def test_trained_gradients_at_forty_satellites():
    df = run_commload_experiment([40], [1.0, 0.1, 0.01], trials=1, seed=0).set_index("q")
    # dense: 40 vectors with IA against sum of ring depths (400) plus 40 uploads without
    assert df.loc[1.0, "reduction_pct"] == pytest.approx(100.0 * (1 - 40 / 440))
    assert df.loc[1.0, "sink_only_ratio"] >= 8.0
    assert (df["ia_total_bits"] <= df["bound_bits"]).all()
    assert df.loc[1.0, "reduction_pct"] > df.loc[0.1, "reduction_pct"] > df.loc[0.01, "reduction_pct"] > 0.0


@pytest.mark.slow
def test_convergence_runs():
    result = run_convergence_experiment(seed=0)
    assert set(result.traces["label"]) == set(CONVERGENCE_RUNS)
    row = result.row
    # ISL reaches its plateau sooner than the same setup without ISLs
    assert row("leo-sync-isl").t90_s < row("leo-sync-noisl").t90_s
    # async incorporates cluster models as they arrive
    assert row("gs-async-isl").updates_12h > row("gs-sync-isl").updates_12h
    stairs = row("gs-sync-noisl")
    if stairs.updates >= 2:
        assert stairs.min_step_gap_s >= stairs.orbital_period_s
