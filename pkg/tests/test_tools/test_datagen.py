"""Unit tests for surrogate fault runs, window slicing, normalization, splits and file formats."""

import itertools
import logging
import math

import numpy as np
import pandas as pd
import pytest

from src.tools.datagen import (
    CSV_COLUMNS,
    FAULT_ONSET,
    NUM_WINDOWS,
    RUN_LENGTH,
    Dataset,
    FaultScenario,
    NormStats,
    align_to_graph,
    apply_normalizer,
    build_dataset,
    class_histogram,
    dataset_fingerprint,
    export_csv,
    fault_factors,
    fit_normalizer,
    generate_run,
    generate_runs,
    import_csv,
    load_cache,
    sample_scenario,
    save_cache,
    signature_context,
    slice_windows,
    split,
    windows_from_runs,
)
from src.tools.errors import ConfigError, FeederSemanticError, SchemaError, ShapeError
from src.tools.models import (
    FAULT_POSITIONS,
    FAULT_RESISTANCES,
    NUM_CLASSES,
    DatagenConfig,
    FaultType,
    SurrogateConfig,
)

QUIET = SurrogateConfig(sigma=0.0)


def _tiny_run(topology, placement, location="c", fault_type=FaultType.ABC, resistance=0.1, **kw):
    loads = {bus: 0.9 for bus in topology.bus_ids}
    scenario = FaultScenario(location, fault_type, resistance, loads)
    return generate_run(topology, placement, scenario, np.random.default_rng(0), QUIET, **kw)


@pytest.fixture
def tiny_config():
    return DatagenConfig(fault_buses=["b", "c"], fault_types=[FaultType.ABC, FaultType.AG], seed=3)


class TestFaultSignature:
    """Tests for the surrogate voltage traces."""

    def test_positions_have_distinct_signatures(self, default_topology, placement):
        """Test any two fault positions differ at some sensor for every type and resistance."""
        context = signature_context(default_topology, placement, FAULT_POSITIONS, QUIET)
        for fault_type in FaultType:
            for resistance in FAULT_RESISTANCES:
                factors = {
                    bus: fault_factors(context, bus, fault_type, resistance, QUIET)
                    for bus in FAULT_POSITIONS
                }
                for a, b in itertools.combinations(FAULT_POSITIONS, 2):
                    gap = np.abs(factors[a] - factors[b]).max()
                    assert gap > 1e-3, (a, b, fault_type.value, resistance)

    def test_steady_state_and_sag(self, tiny_topology, tiny_placement):
        """Test pre-fault voltage at nominal load and the sag at the faulted sensor."""
        run = _tiny_run(tiny_topology, tiny_placement)
        c = run.sensor_buses.index("c")
        np.testing.assert_allclose(run.traces[c, :, :FAULT_ONSET], 1.0)
        np.testing.assert_allclose(run.traces[c, :, FAULT_ONSET:], 0.4)

    def test_sag_decays_with_distance(self, tiny_topology, tiny_placement):
        """Test a sensor 3.5 units away sees depth * exp(-beta * 3.5)."""
        run = _tiny_run(tiny_topology, tiny_placement)
        a = run.sensor_buses.index("a")
        expected = 1.0 - 0.6 * math.exp(-0.5 * 3.5)
        np.testing.assert_allclose(run.traces[a, :, FAULT_ONSET], expected)

    def test_grounded_fault_swells_healthy_phases(self, tiny_topology, tiny_placement):
        """Test an AG fault sags phase A and swells B and C by gamma at the fault."""
        run = _tiny_run(tiny_topology, tiny_placement, fault_type=FaultType.AG, resistance=10.0)
        c = run.sensor_buses.index("c")
        np.testing.assert_allclose(run.traces[c, :, FAULT_ONSET], [0.88, 1.03, 1.03])

    def test_ungrounded_fault_leaves_other_phase(self, tiny_topology, tiny_placement):
        """Test a BC fault without ground leaves phase A untouched."""
        run = _tiny_run(tiny_topology, tiny_placement, fault_type=FaultType.BC)
        c = run.sensor_buses.index("c")
        np.testing.assert_allclose(run.traces[c, 0, FAULT_ONSET], 1.0)

    def test_missing_phases_are_zero(self, tiny_topology, tiny_placement):
        """Test a single-phase sensor reports zeros on its absent phases."""
        run = _tiny_run(tiny_topology, tiny_placement)
        d = run.sensor_buses.index("d")
        assert run.phase_mask[d].tolist() == [True, False, False]
        assert (run.traces[d, 1:] == 0).all()
        assert (run.traces[d, 0] > 0).all()

    def test_load_shifts_steady_state(self, tiny_topology, tiny_placement):
        """Test heavier loading lowers the pre-fault voltage by kappa per unit."""
        loads = {bus: 1.3 for bus in tiny_topology.bus_ids}
        scenario = FaultScenario("c", FaultType.ABC, 0.1, loads)
        run = generate_run(tiny_topology, tiny_placement, scenario, np.random.default_rng(0), QUIET)
        np.testing.assert_allclose(run.traces[0, :, 0], 1.0 - 0.05 * 0.4)

    def test_noise_level(self, default_topology, placement):
        """Test measurement noise has the configured spread."""
        rng = np.random.default_rng(1)
        scenario = sample_scenario(default_topology, "13", FaultType.ABC, 1.0, rng)
        run = generate_run(default_topology, placement, scenario, np.random.default_rng(2))
        residual = np.diff(run.traces[run.phase_mask][:, :FAULT_ONSET], axis=-1)
        assert residual.std() / math.sqrt(2) == pytest.approx(0.002, rel=0.1)

    def test_depth_ordering(self, tiny_topology, tiny_placement):
        """Test lower fault resistance gives a deeper sag."""
        context = signature_context(tiny_topology, tiny_placement, ["c"])
        depths = [fault_factors(context, "c", FaultType.ABC, r)[0, 0] for r in (0.1, 1.0, 10.0)]
        assert depths[0] < depths[1] < depths[2] < 1.0

    def test_unknown_resistance(self, tiny_topology, tiny_placement):
        """Test a resistance without a configured depth is rejected."""
        context = signature_context(tiny_topology, tiny_placement, ["c"])
        with pytest.raises(ConfigError):
            fault_factors(context, "c", FaultType.ABC, 5.0)

    def test_fault_type_must_fit_bus(self, tiny_topology):
        """Test a B-phase fault cannot sit on an A-only lateral."""
        FaultScenario("d", FaultType.AG, 1.0).check(tiny_topology)
        with pytest.raises(FeederSemanticError):
            FaultScenario("d", FaultType.BG, 1.0).check(tiny_topology)

    def test_scenario_loads_in_range(self, default_topology):
        """Test sampled load multipliers stay within [0.5, 1.3]."""
        rng = np.random.default_rng(0)
        scenario = sample_scenario(default_topology, "13", FaultType.ABC, 1.0, rng)
        values = np.array(list(scenario.load_multipliers.values()))
        assert len(values) == len(default_topology.bus_ids)
        assert values.min() >= 0.5 and values.max() <= 1.3


class TestSliceWindows:
    """Tests for the 40-window protocol."""

    def test_forty_windows_half_fault_free(self, tiny_topology, tiny_placement):
        """Test starts 1..40, the first twenty labeled no-fault."""
        windows = slice_windows(_tiny_run(tiny_topology, tiny_placement, label=7, run_id=3))
        assert len(windows) == NUM_WINDOWS
        assert [w.group_key for w in windows] == [(3, s) for s in range(1, 41)]
        assert [w.label for w in windows] == [0] * 20 + [7] * 20
        assert all(w.features.shape == (3, 3, 20) for w in windows)
        assert windows[0].features.dtype == np.float32

    def test_boundary_window(self, tiny_topology, tiny_placement):
        """Test window 21 holds exactly one in-fault sample and window 20 none."""
        run = _tiny_run(tiny_topology, tiny_placement)
        windows = slice_windows(run)
        c = run.sensor_buses.index("c")
        assert (windows[19].features[c] == 1.0).all()
        in_fault = windows[20].features[c] != 1.0
        assert in_fault[:, -1].all() and not in_fault[:, :-1].any()

    def test_malformed_run(self, tiny_topology, tiny_placement):
        """Test runs of the wrong length are rejected."""
        run = _tiny_run(tiny_topology, tiny_placement)
        short = type(run)(
            run_id=0,
            scenario=run.scenario,
            traces=run.traces[:, :, :50],
            sensor_buses=run.sensor_buses,
            phase_mask=run.phase_mask,
            label=1,
        )
        with pytest.raises(ShapeError):
            slice_windows(short)

    def test_layouts_must_agree(self, tiny_topology, tiny_placement, default_topology, placement):
        """Test runs over different sensors cannot share a dataset."""
        tiny = _tiny_run(tiny_topology, tiny_placement)
        big = generate_run(
            default_topology,
            placement,
            sample_scenario(default_topology, "13", FaultType.ABC, 1.0, np.random.default_rng(0)),
            np.random.default_rng(0),
        )
        with pytest.raises(ShapeError):
            windows_from_runs([tiny, big])
        with pytest.raises(ValueError):
            windows_from_runs([])


class TestBuildDataset:
    """Tests for whole-dataset generation."""

    def test_small_dataset(self, small_dataset):
        """Test 2 runs give 80 windows, half of them no-fault."""
        assert len(small_dataset) == 2 * NUM_WINDOWS
        assert small_dataset.features.shape == (80, 25, 3, 20)
        histogram = class_histogram(small_dataset)
        assert histogram.shape == (NUM_CLASSES,)
        assert histogram[:3].tolist() == [40, 20, 20]
        assert small_dataset.metadata["fingerprint"]

    def test_location_shares(self, default_topology, placement):
        """Test every fault position holds 2% of all windows with one run each."""
        config = DatagenConfig(type_assignment="sampled", seed=1)
        dataset = build_dataset(config, default_topology, placement, workers=4)
        histogram = class_histogram(dataset)
        assert histogram[0] == len(dataset) // 2
        np.testing.assert_allclose(histogram[1:] / len(dataset), 0.02)

    def test_sampled_types_fit_buses(self, default_topology, placement):
        """Test sampled fault types only use phases present at the fault bus."""
        config = DatagenConfig(type_assignment="sampled", runs_per_scenario=2, seed=4)
        for run in generate_runs(config, default_topology, placement):
            available = default_topology.bus(run.scenario.location).phases
            assert run.scenario.fault_type.phases <= available

    def test_reproducible_across_workers(self, small_config, default_topology, placement):
        """Test the same seed yields bit-identical data for any worker count."""
        serial = build_dataset(small_config, default_topology, placement, workers=1)
        parallel = build_dataset(small_config, default_topology, placement, workers=4)
        np.testing.assert_array_equal(serial.features, parallel.features)
        np.testing.assert_array_equal(serial.labels, parallel.labels)

    def test_seed_changes_data(self, small_config, small_dataset, default_topology, placement):
        """Test another seed draws other loads and noise."""
        reseeded = small_config.model_copy(update={"seed": 1})
        other = build_dataset(reseeded, default_topology, placement)
        assert not np.array_equal(other.features, small_dataset.features)
        assert other.metadata["fingerprint"] != small_dataset.metadata["fingerprint"]

    def test_fingerprint_tracks_topology(
        self, small_config, default_topology, green_topology, placement
    ):
        """Test the fingerprint changes with the feeder configuration."""
        first = dataset_fingerprint(small_config, default_topology, placement)
        assert first == dataset_fingerprint(small_config, default_topology, placement)
        assert first != dataset_fingerprint(small_config, green_topology, placement)

    def test_cross_assignment(self, tiny_config, tiny_topology, tiny_placement):
        """Test cross assignment runs every type at every position."""
        runs = generate_runs(tiny_config, tiny_topology, tiny_placement)
        pairs = [(r.scenario.location, r.scenario.fault_type) for r in runs]
        assert pairs == [("b", "ABC"), ("b", "AG"), ("c", "ABC"), ("c", "AG")]
        assert [r.label for r in runs] == [1, 1, 2, 2]


class TestNormalizer:
    """Tests for per-phase z-scoring."""

    def test_zero_mean_unit_std(self, small_dataset):
        """Test observed entries are standardized and absent phases stay zero."""
        stats = fit_normalizer(small_dataset)
        scaled = apply_normalizer(small_dataset, stats)
        for f in range(3):
            observed = small_dataset.entry_mask[:, f]
            values = scaled.features[:, observed, f, :].astype(np.float64)
            assert values.mean() == pytest.approx(0.0, abs=1e-6)
            assert values.std() == pytest.approx(1.0, abs=1e-6)
            assert (scaled.features[:, ~observed, f, :] == 0).all()
        assert scaled.norm_stats == stats

    def test_idempotent(self, small_dataset):
        """Test refitting on standardized data gives (0, 1) and changes nothing."""
        scaled = apply_normalizer(small_dataset, fit_normalizer(small_dataset))
        again = fit_normalizer(scaled)
        np.testing.assert_allclose(again.mean, 0.0, atol=1e-6)
        np.testing.assert_allclose(again.std, 1.0, atol=1e-6)
        rescaled = apply_normalizer(scaled, again).features
        np.testing.assert_allclose(rescaled, scaled.features, atol=1e-6)

    def test_zero_variance_clamped(self, caplog):
        """Test a constant feature gets std 1 and a warning."""
        ds = Dataset(
            features=np.full((2, 1, 3, 4), 2.0, dtype=np.float32),
            labels=np.zeros(2, dtype=np.uint8),
            group_keys=np.array([[0, 1], [0, 2]]),
            node_buses=("x",),
            entry_mask=np.ones((1, 3), dtype=bool),
        )
        with caplog.at_level(logging.WARNING):
            stats = fit_normalizer(ds)
        assert stats.std == (1.0, 1.0, 1.0)
        assert stats.mean == (2.0, 2.0, 2.0)
        assert "zero variance" in caplog.text

    def test_empty(self, small_dataset):
        """Test an empty training set cannot be fitted."""
        with pytest.raises(ValueError):
            fit_normalizer(small_dataset.subset([]))


class TestSplit:
    """Tests for group-disjoint partitioning."""

    def test_window_groups(self, small_dataset):
        """Test 70/15/15 sizes and disjoint, exhaustive window groups."""
        parts = split(small_dataset, (0.7, 0.15, 0.15), rng=0)
        assert [len(p) for p in parts] == [56, 12, 12]
        keys = [set(map(tuple, p.group_keys.tolist())) for p in parts]
        assert not (keys[0] & keys[1] or keys[0] & keys[2] or keys[1] & keys[2])
        assert set.union(*keys) == set(map(tuple, small_dataset.group_keys.tolist()))

    def test_run_groups(self, small_dataset):
        """Test grouping by run keeps every run whole."""
        parts = split(small_dataset, (0.5, 0.0, 0.5), rng=0, group_by="run")
        runs = [set(p.group_keys[:, 0].tolist()) for p in parts]
        assert runs[1] == set()
        assert runs[0] and runs[2] and not runs[0] & runs[2]
        assert len(parts[0]) == len(parts[2]) == NUM_WINDOWS

    def test_deterministic(self, small_dataset):
        """Test the same seed reproduces the partition."""
        first = split(small_dataset, rng=5)[0].group_keys
        np.testing.assert_array_equal(first, split(small_dataset, rng=5)[0].group_keys)

    @pytest.mark.parametrize(
        ("ratios", "group_by"),
        [
            ((0.5, 0.5), "window"),
            ((0.8, 0.3, -0.1), "window"),
            ((0.6, 0.2, 0.1), "window"),
            ((0.7, 0.15, 0.15), "sensor"),
        ],
    )
    def test_invalid(self, small_dataset, ratios, group_by):
        """Test bad ratios and unknown groupings raise ConfigError."""
        with pytest.raises(ConfigError):
            split(small_dataset, ratios, group_by=group_by)


class TestAlignToGraph:
    """Tests for re-indexing onto a graph's node order."""

    def test_full_topology(self, small_dataset, full_graph):
        """Test unobserved buses are zero and observed ones keep their data."""
        aligned = align_to_graph(small_dataset, full_graph)
        assert aligned.features.shape == (80, 128, 3, 20)
        assert aligned.node_buses == full_graph.buses
        np.testing.assert_array_equal(aligned.observed, full_graph.observed_mask)
        assert (aligned.features[:, ~full_graph.observed_mask] == 0).all()
        bus = full_graph.index_of("13")
        np.testing.assert_array_equal(
            aligned.features[:, bus],
            small_dataset.features[:, small_dataset.node_buses.index("13")],
        )

    def test_measured_only_is_identity(self, small_dataset, measured_graph):
        """Test a dataset already in graph order is returned as is."""
        assert align_to_graph(small_dataset, measured_graph) is small_dataset

    def test_mismatched_sensors(self, small_dataset, tiny_graph):
        """Test a graph over other buses is rejected."""
        with pytest.raises(ShapeError):
            align_to_graph(small_dataset, tiny_graph)


class TestCsv:
    """Tests for the long-format CSV interchange."""

    def test_roundtrip(self, tiny_config, tiny_topology, tiny_placement, tmp_path):
        """Test export then import reproduces the windows bit for bit."""
        runs = generate_runs(tiny_config, tiny_topology, tiny_placement)
        path = tmp_path / "runs.csv"
        export_csv(runs, path)
        table = pd.read_csv(path)
        assert tuple(table.columns) == CSV_COLUMNS
        # a, c three-phase plus d single-phase: 7 measured channels
        assert len(table) == len(runs) * 7 * RUN_LENGTH
        imported = import_csv(path, tiny_config.fault_buses)
        reference = windows_from_runs(runs)
        np.testing.assert_array_equal(imported.features, reference.features)
        np.testing.assert_array_equal(imported.labels, reference.labels)
        np.testing.assert_array_equal(imported.group_keys, reference.group_keys)
        np.testing.assert_array_equal(imported.entry_mask, reference.entry_mask)
        assert imported.node_buses == reference.node_buses

    def _write(self, tmp_path, runs, edit):
        path = tmp_path / "runs.csv"
        export_csv(runs, path)
        table = pd.read_csv(path, dtype=str, keep_default_na=False)
        edit(table)
        table.to_csv(path, index=False)
        return path

    def test_missing_column(self, tiny_config, tiny_topology, tiny_placement, tmp_path):
        """Test a missing column is named."""
        runs = generate_runs(tiny_config, tiny_topology, tiny_placement)
        path = self._write(tmp_path, runs, lambda t: t.drop(columns=["phase"], inplace=True))
        with pytest.raises(SchemaError, match="phase") as info:
            import_csv(path)
        assert info.value.column == "phase"

    def test_non_numeric_value(self, tiny_config, tiny_topology, tiny_placement, tmp_path):
        """Test a non-numeric voltage reports its file row."""
        runs = generate_runs(tiny_config, tiny_topology, tiny_placement)

        def edit(table):
            table.loc[5, "v_rms_pu"] = "n/a"

        path = self._write(tmp_path, runs, edit)
        with pytest.raises(SchemaError) as info:
            import_csv(path)
        assert info.value.row_number == 7
        assert info.value.column == "v_rms_pu"

    def test_bad_phase(self, tiny_config, tiny_topology, tiny_placement, tmp_path):
        """Test unknown phase letters are rejected."""
        runs = generate_runs(tiny_config, tiny_topology, tiny_placement)

        def edit(table):
            table.loc[0, "phase"] = "D"

        with pytest.raises(SchemaError, match="row 2"):
            import_csv(self._write(tmp_path, runs, edit))

    def test_duplicate_sample(self, tiny_config, tiny_topology, tiny_placement, tmp_path):
        """Test two readings of one channel at one instant are rejected."""
        runs = generate_runs(tiny_config, tiny_topology, tiny_placement)

        def edit(table):
            table.loc[1, "t_ms"] = table.loc[0, "t_ms"]

        with pytest.raises(SchemaError, match="duplicate"):
            import_csv(self._write(tmp_path, runs, edit))

    def test_mixed_run_description(self, tiny_config, tiny_topology, tiny_placement, tmp_path):
        """Test one run may not change its fault description midway."""
        runs = generate_runs(tiny_config, tiny_topology, tiny_placement)

        def edit(table):
            table.loc[3, "fault_type"] = "BG" if table.loc[3, "fault_type"] != "BG" else "CG"

        with pytest.raises(SchemaError, match="mixes") as info:
            import_csv(self._write(tmp_path, runs, edit))
        assert info.value.row_number == 5

    def test_unknown_fault_bus(self, tiny_config, tiny_topology, tiny_placement, tmp_path):
        """Test runs at positions outside the label list are rejected."""
        runs = generate_runs(tiny_config, tiny_topology, tiny_placement)
        path = tmp_path / "runs.csv"
        export_csv(runs, path)
        with pytest.raises(SchemaError, match="not a known fault position"):
            import_csv(path, ["b"])


class TestCache:
    """Tests for the binary dataset cache."""

    def test_roundtrip(self, small_dataset, tmp_path):
        """Test every field survives, including normalizer statistics."""
        ds = apply_normalizer(small_dataset, NormStats((1.0, 1.0, 1.0), (0.5, 0.5, 0.5)))
        path = tmp_path / "d.stgd"
        save_cache(ds, path)
        loaded = load_cache(path)
        np.testing.assert_array_equal(loaded.features, ds.features)
        np.testing.assert_array_equal(loaded.labels, ds.labels)
        np.testing.assert_array_equal(loaded.group_keys, ds.group_keys)
        np.testing.assert_array_equal(loaded.entry_mask, ds.entry_mask)
        assert loaded.node_buses == ds.node_buses
        assert loaded.norm_stats == ds.norm_stats
        assert dict(loaded.metadata) == dict(ds.metadata)

    def test_corrupt(self, small_dataset, tmp_path):
        """Test wrong magic and truncation raise SchemaError."""
        path = tmp_path / "d.stgd"
        save_cache(small_dataset, path)
        data = path.read_bytes()
        path.write_bytes(data[:-1])
        with pytest.raises(SchemaError, match="size"):
            load_cache(path)
        path.write_bytes(b"NOPE" + data[4:])
        with pytest.raises(SchemaError, match="not a dataset cache"):
            load_cache(path)
        path.write_bytes(data[:10])
        with pytest.raises(SchemaError, match="truncated"):
            load_cache(path)


class TestDatasetShape:
    """Tests for dataset invariants."""

    def test_inconsistent_layout(self):
        """Test labels, keys and node layout must match the feature tensor."""
        features = np.zeros((2, 3, 3, 20), dtype=np.float32)
        with pytest.raises(ShapeError):
            Dataset(features, np.zeros(3, np.uint8), np.zeros((2, 2), np.int64), ("a", "b", "c"),
                    np.ones((3, 3), bool))
        with pytest.raises(ShapeError):
            Dataset(features, np.zeros(2, np.uint8), np.zeros((2, 2), np.int64), ("a", "b"),
                    np.ones((3, 3), bool))

    def test_indexing(self, small_dataset):
        """Test item access returns one window with its group key."""
        sample = small_dataset[25]
        assert sample.features.shape == (25, 3, 20)
        assert sample.label == small_dataset.labels[25]
        assert sample.group_key == (0, 26)
        assert len(small_dataset.samples) == 80
