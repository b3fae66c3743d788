import pytest

from scripts.errors import ConfigError, NonFiniteError, SearchError
from scripts.settings import SearchOptions, SpaceConfig
from scripts.search import (
    SearchConfig,
    expected_iterations,
    initial_scores,
    run_search,
    search_iterative,
    search_oneshot,
    search_seeds,
    track_pruning,
)
from scripts.spaces import CellSpace, Genotype, SequentialSpace, build_space

SPACE = CellSpace()
SMALL = CellSpace(channels=4, input_hw=4, num_classes=3)
ONE_EDGE = CellSpace(num_nodes=2, channels=4, input_hw=4, num_classes=3)
SKIP_OR_NONE = CellSpace(num_nodes=3, ops=("skip_connect", "none"), channels=4, input_hw=4, num_classes=3)


class TestIterative:
    def test_prunes_until_discrete(self):
        genotype, trace = search_iterative(SPACE, seed=0)
        assert expected_iterations(SPACE) == 24
        assert len(trace.steps) == 24
        assert trace.scoring_passes == 24
        assert genotype.matches(SPACE)
        assert trace.final == genotype
        assert trace.error is None

    def test_none_goes_first(self):
        _, trace = search_iterative(SMALL, seed=1)
        assert [s.pruned for s in trace.steps[:6]] == [(e, 0) for e in range(6)]
        assert all(s.pruned_label == "none" for s in trace.steps[:6])
        assert all(s.score == 0.0 for s in trace.steps[:6])

    def test_single_edge(self):
        genotype, trace = search_iterative(ONE_EDGE, seed=0)
        assert len(trace.steps) == 4
        assert len(genotype.ops) == 1
        assert genotype.ops[0] != "none"

    def test_sequential_space(self):
        space = SequentialSpace()
        genotype, trace = search_iterative(space, seed=0)
        assert len(trace.steps) == expected_iterations(space) == 4
        assert genotype.matches(space)

    def test_deterministic(self):
        _, first = search_iterative(SMALL, seed=5)
        _, second = search_iterative(SMALL, seed=5)
        assert first.digest() == second.digest()
        assert first.wall_time_ms >= 0

    @pytest.mark.parametrize("variant", ["vanilla", "label_agnostic"])
    def test_data_variants(self, variant):
        genotype, trace = search_iterative(SMALL, seed=0, variant=variant,
                                           options=SearchOptions(batch_size=8))
        assert genotype.matches(SMALL)
        assert trace.config["variant"] == variant

    def test_fresh_init_each_round(self):
        options = SearchOptions(fresh_init_each_round=True)
        _, fresh = search_iterative(SMALL, seed=2, options=options)
        _, same = search_iterative(SMALL, seed=2)
        # round 0 scores the same supernet either way
        assert fresh.steps[0].table_digest == same.steps[0].table_digest
        assert len(fresh.steps) == len(same.steps)

    def test_failure_keeps_partial_trace(self, monkeypatch):
        import scripts.search as search_module

        real = search_module.compute_zeros
        calls = {"n": 0}

        def flaky(*args, **kwargs):
            calls["n"] += 1
            if calls["n"] == 3:
                raise NonFiniteError("sum_reduce", where="loss")
            return real(*args, **kwargs)

        monkeypatch.setattr(search_module, "compute_zeros", flaky)
        with pytest.raises(SearchError) as info:
            search_iterative(SMALL, seed=0)
        assert len(info.value.trace.steps) == 2
        assert "loss" in info.value.trace.error


    def test_none_goes_first_across_seeds(self):
        for seed in range(8):
            _, trace = search_iterative(SMALL, seed=seed)
            assert sorted(s.pruned for s in trace.steps[:6]) == [(e, 0) for e in range(6)]

    def test_last_signal_op_survives_ties(self):
        # one signal op per edge: its lone softmax entry scores exactly 0, like ``none``
        genotype, trace = search_iterative(SKIP_OR_NONE, seed=0)
        assert genotype.ops == ("skip_connect",) * 3
        assert all(s.pruned_label == "none" for s in trace.steps)
        assert search_oneshot(SKIP_OR_NONE, seed=0)[0].ops == ("skip_connect",) * 3

    def test_initial_scores_match_first_round(self):
        for mode in ("iterative", "oneshot"):
            config = SearchConfig(mode=mode, seed=4)
            _, trace = run_search(SMALL, config)
            assert initial_scores(SMALL, config).digest() == trace.steps[0].table_digest

    @pytest.mark.slow
    def test_under_five_seconds(self):
        _, trace = search_iterative(SPACE, seed=0)
        assert trace.wall_time_ms < 5000.0


class TestOneShot:
    def test_single_scoring_pass(self):
        genotype, trace = search_oneshot(SPACE, seed=0)
        assert trace.scoring_passes == 1
        assert len(trace.steps) == 24
        assert {s.iteration for s in trace.steps} == {0}
        assert genotype.matches(SPACE)
        assert "none" not in genotype.ops

    def test_run_search_dispatch(self):
        config = SearchConfig(mode="oneshot", seed=3)
        genotype, trace = run_search(SMALL, config)
        assert trace.config["mode"] == "oneshot"
        assert genotype == search_oneshot(SMALL, seed=3)[0]
        with pytest.raises(ConfigError):
            run_search(SMALL, SearchConfig(mode="greedy"))


    @pytest.mark.slow
    def test_modes_differ_somewhere(self):
        differ = [search_iterative(SPACE, seed=s)[0] != search_oneshot(SPACE, seed=s)[0] for s in range(20)]
        assert any(differ)


class TestTracking:
    def test_one_point_per_round(self):
        trajectory = track_pruning(SMALL, 0, "data_agnostic", lambda g: 1.0)
        assert len(trajectory.points) == 25
        assert trajectory.values == [1.0] * 25
        assert trajectory.error is None
        assert Genotype.parse(trajectory.points[-1].genotype) == trajectory.trace.final

    def test_evaluator_failure_truncates(self):
        seen = []

        def evaluator(g):
            if len(seen) == 3:
                raise KeyError(str(g))
            seen.append(g)
            return 0.5

        trajectory = track_pruning(SMALL, 0, "data_agnostic", evaluator)
        assert len(trajectory.points) == 3
        assert "iteration 3" in trajectory.error


class TestSeeds:
    def test_sequential_and_pool_agree(self):
        space_config = SpaceConfig(num_nodes=2, channels=4, input_hw=4, num_classes=3)
        configs = [SearchConfig(seed=s) for s in (0, 1)]
        inline = search_seeds(space_config, configs, workers=1)
        pooled = search_seeds(space_config, configs, workers=2)
        assert [g for g, _ in inline] == [g for g, _ in pooled]
        assert [t.digest() for _, t in inline] == [t.digest() for _, t in pooled]
        assert inline[0][0].matches(build_space(space_config))

    def test_keep_going_returns_failures(self, monkeypatch):
        import scripts.search as search_module

        real = search_module.compute_zeros

        def failing_for_seed_one(net, variant, seed=0, round_index=0, **kwargs):
            if seed == 1 and round_index == 1:
                raise NonFiniteError("sum_reduce", where="loss")
            return real(net, variant, seed=seed, round_index=round_index, **kwargs)

        monkeypatch.setattr(search_module, "compute_zeros", failing_for_seed_one)
        space_config = SpaceConfig(num_nodes=2, channels=4, input_hw=4, num_classes=3)
        configs = [SearchConfig(seed=s) for s in (0, 1, 2)]
        results = search_seeds(space_config, configs, keep_going=True)
        assert isinstance(results[1], SearchError)
        assert len(results[1].trace.steps) == 1
        assert [r[0].matches(build_space(space_config)) for r in (results[0], results[2])] == [True, True]
        with pytest.raises(SearchError):
            search_seeds(space_config, configs)
