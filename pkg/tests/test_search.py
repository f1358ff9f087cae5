import itertools

import numpy as np
import pytest

from voxnas import dataset as D
from voxnas import morph, net
from voxnas.search import (
    AccuracyTable,
    BeamConfig,
    BeamSearch,
    SearchState,
    check_monotone,
    expansion_count,
    heuristic,
    log_to_csv,
    parse_log_csv,
    run_search,
)
from voxnas.trainer import TrainConfig, derive_seed

from _util import random_inputs

INPUT = (1, 14, 14, 14)
CLASSES = 3


def state(acc):
    arch = net.initial_architecture(INPUT, CLASSES)
    return SearchState(0, arch, None, acc, None, None, 0, 0)


def test_heuristic_examples():
    assert heuristic(state(0.5), state(0.5)) == 0.0
    assert heuristic(state(0.70), state(0.85)) == pytest.approx(0.15)
    a, b = state(0.3), state(0.9)
    assert heuristic(a, b) == -heuristic(b, a)


def test_config_validation():
    with pytest.raises(ValueError):
        BeamConfig(beam_width=0)
    with pytest.raises(ValueError):
        BeamConfig(improvement_epsilon=-1)


# -- exhaustive oracle ------------------------------------------------------
#
# Architectures are tracked as plain filter lists. On a 14^3 input the first
# conv layer (k6 s2) outputs 5^3 and the second (k5 s2) outputs 1^3; every
# deepened layer is k5 p2 s1 so the spatial extent stays 1.


def oracle_children(filters, max_conv, max_filters):
    out = []
    if len(filters) + 1 <= max_conv:
        out.append(("deepen_top", filters + [filters[-1]]))
    if 2 * filters[-1] <= max_filters:
        out.append(("widen_top", filters[:-1] + [2 * filters[-1]]))
    return out


def oracle_param_count(filters):
    total = filters[0] * 216 + filters[0]
    for prev, cur in zip(filters, filters[1:]):
        total += cur * prev * 125 + cur
    return total + 400 * filters[-1] + 400 + CLASSES * 400 + CLASSES


def oracle_search(table, K, depth, eps, max_conv, max_filters):
    """Brute-force enumeration of every action sequence below each beam state."""
    arch_of = {(): [16, 32]}

    def key(path):
        return (-table["/".join(path)], oracle_param_count(arch_of[path]), path)

    def leaves(path, remaining):
        kids = oracle_children(arch_of[path], max_conv, max_filters)
        if remaining == 0 or not kids:
            return [path]
        out = []
        for action, filters in kids:
            arch_of[path + (action,)] = filters
            out += leaves(path + (action,), remaining - 1)
        return out

    best, beam, rounds = (), [()], []
    while True:
        scored = []
        for b in beam:
            for action, filters in oracle_children(arch_of[b], max_conv, max_filters):
                child = b + (action,)
                arch_of[child] = filters
                scored += [(key(leaf), child) for leaf in leaves(child, depth - 1)]
        chosen = []
        for _, child in sorted(scored):
            if child not in chosen:
                chosen.append(child)
        chosen = chosen[:K]
        if not chosen:
            return best, arch_of[best], rounds, "beam_empty"
        accepted = [c for c in chosen if table["/".join(c)] > table["/".join(best)] + eps]
        if not accepted:
            return best, arch_of[best], rounds, "no_improvement"
        rounds.append(accepted)
        best = min(accepted + [best], key=key)
        beam = accepted


def all_paths(max_conv, max_filters):
    paths, stack = [], [((), [16, 32])]
    while stack:
        path, filters = stack.pop()
        paths.append(path)
        stack += [(path + (a,), f) for a, f in oracle_children(filters, max_conv, max_filters)]
    return paths


def make_table(rng, paths):
    # coarse values on a rising trend so rounds chain together and ties are common
    table = {}
    for p in paths:
        table["/".join(p)] = round(0.3 + 0.1 * len(p) + 0.1 * int(rng.integers(-1, 2)), 1)
    return table


def table_search(table, K, depth, eps=1e-4, max_conv=4, max_filters=128):
    cfg = BeamConfig(beam_width=K, depth_limit=depth, improvement_epsilon=eps, max_conv_layers=max_conv,
                     max_filters=max_filters, max_expansions=10_000, root_seed=7)
    arch = net.initial_architecture(INPUT, CLASSES, "relu")
    return BeamSearch(AccuracyTable(table), cfg).run(arch)


def filters_of(arch):
    return [arch.layers[i].units for i in arch.conv_indices]


def test_reachable_state_space_is_small():
    assert len(all_paths(4, 128)) == 19
    assert len(all_paths(4, 128)) <= 30


def test_oracle_param_count_matches_geometry():
    arch = net.initial_architecture(INPUT, CLASSES)
    assert net.param_count(arch) == oracle_param_count([16, 32])


@pytest.mark.parametrize("K, depth", list(itertools.product([1, 2], [1, 2, 3])))
def test_search_matches_exhaustive_oracle(K, depth):
    rng = np.random.default_rng(100 * K + depth)
    paths = all_paths(4, 128)
    for _ in range(12):
        table = make_table(rng, paths)
        result = table_search(table, K, depth)
        best, filters, rounds, stop = oracle_search(table, K, depth, 1e-4, 4, 128)
        assert result.best.path == best
        assert filters_of(result.best.arch) == filters
        assert result.stop_reason == stop
        selected = [[result.states[r["state_id"]].path for r in result.log if r["selected"] and r["round"] == i]
                    for i in range(1, result.rounds + 1)]
        assert [s for s in selected if s] == rounds


def test_all_ties_prefer_fewer_parameters():
    # every state scores the same, so ranking falls to param count; on 14^3 widening
    # adds ~77k weights and deepening ~128k
    paths = all_paths(4, 128)
    table = {"/".join(p): 0.5 for p in paths}
    cfg = BeamConfig(beam_width=1, depth_limit=1, max_conv_layers=4, max_filters=128)
    search = BeamSearch(AccuracyTable(table), cfg)
    root = search.make_root(net.initial_architecture(INPUT, CLASSES, "relu"))
    assert oracle_param_count([16, 64]) < oracle_param_count([16, 32, 32])
    assert [c.path for c in search.lookahead_and_backtrack([root])] == [("widen_top",)]


def test_depth_one_is_plain_ranking_of_children():
    table = {"": 0.1, "deepen_top": 0.4, "widen_top": 0.6}
    cfg = BeamConfig(beam_width=2, depth_limit=1)
    search = BeamSearch(AccuracyTable(table), cfg)
    root = search.make_root(net.initial_architecture(INPUT, CLASSES))
    chosen = search.lookahead_and_backtrack([root])
    assert [c.action for c in chosen] == ["widen_top", "deepen_top"]


def test_lookahead_backtracks_to_ancestor_of_best_leaf():
    # deepen looks worse one step out but leads to the best depth-2 leaf
    paths = all_paths(8, 512)
    table = {"/".join(p): 0.2 for p in paths}
    table.update({"deepen_top": 0.3, "widen_top": 0.5, "deepen_top/widen_top": 0.9})
    search = BeamSearch(AccuracyTable(table), BeamConfig(beam_width=1, depth_limit=2))
    root = search.make_root(net.initial_architecture(INPUT, CLASSES))
    assert [c.path for c in search.lookahead_and_backtrack([root])] == [("deepen_top",)]


# -- expand -----------------------------------------------------------------


def test_expand_initial_state():
    search = BeamSearch(AccuracyTable({"": 0.0, "deepen_top": 0.0, "widen_top": 0.0}), BeamConfig())
    root = search.make_root(net.initial_architecture(INPUT, CLASSES, "relu"))
    deepened, widened = search.expand(root)
    assert len(deepened.arch.conv_indices) == 3 and deepened.action == "deepen_top"
    assert filters_of(widened.arch) == [16, 64]
    for child in (deepened, widened):
        assert child.parent_id == root.id and child.depth == 1
        assert child.seed == derive_seed(root.seed, child.action, 1)


def test_children_compute_the_parent_function_before_finetuning():
    search = BeamSearch(AccuracyTable({"": 0.0, "deepen_top": 0.0, "widen_top": 0.0}), BeamConfig())
    root = search.make_root(net.initial_architecture(INPUT, CLASSES, "relu"))
    x = random_inputs(root.arch, np.random.default_rng(0), 10)
    ref = net.forward(root.arch, root.params, x)
    for child in search.expand(root):
        assert np.abs(net.forward(child.arch, child.params, x) - ref).max() <= 1e-9


def test_saturated_state_has_no_children():
    arch = net.initial_architecture(INPUT, CLASSES)
    cfg = BeamConfig(max_conv_layers=2, max_filters=32)
    search = BeamSearch(AccuracyTable({"": 0.5}), cfg)
    root = search.make_root(arch)
    assert search.expand(root) == []
    assert search.lookahead_and_backtrack([root]) == []


def test_saturated_root_ends_search_with_empty_beam():
    cfg = BeamConfig(max_conv_layers=2, max_filters=32)
    result = BeamSearch(AccuracyTable({"": 0.5}), cfg).run(net.initial_architecture(INPUT, CLASSES))
    assert result.stop_reason == "beam_empty"
    assert result.best is result.initial


def test_expand_is_cached():
    search = BeamSearch(AccuracyTable({"": 0.0, "deepen_top": 0.0, "widen_top": 0.0}), BeamConfig())
    root = search.make_root(net.initial_architecture(INPUT, CLASSES))
    first = search.expand(root)
    assert search.expand(root) is first
    assert search.expansions == 1


# -- run_search -------------------------------------------------------------


def test_unreachable_epsilon_keeps_initial_state():
    paths = all_paths(4, 128)
    table = {"/".join(p): 0.99 for p in paths}
    table[""] = 0.1
    result = table_search(table, 2, 2, eps=1.0)
    assert result.rounds == 1
    assert result.best is result.initial
    assert result.stop_reason == "no_improvement"


def test_expansion_budget_stops_search():
    table = {"/".join(p): 0.1 * len(p) for p in all_paths(8, 512)}
    cfg = BeamConfig(beam_width=1, depth_limit=2, max_expansions=3)
    result = BeamSearch(AccuracyTable(table), cfg).run(net.initial_architecture(INPUT, CLASSES))
    assert result.stop_reason == "max_expansions"
    assert result.expansions >= 3


def test_caps_never_violated():
    rng = np.random.default_rng(3)
    table = make_table(rng, all_paths(4, 128))
    result = table_search(table, 2, 3)
    for s in result.states.values():
        assert len(s.arch.conv_indices) <= 4
        assert max(filters_of(s.arch)) <= 128


def test_lineage_replay_reproduces_state():
    table = {"/".join(p): 0.1 * len(p) for p in all_paths(4, 128)}
    result = table_search(table, 2, 2)
    root = result.initial
    for sid, s in result.states.items():
        chain = result.lineage(sid)
        assert chain[0] is root
        arch, params, seed = root.arch, root.params, root.seed
        for depth, node in enumerate(chain[1:], 1):
            seed = derive_seed(seed, node.action, depth)
            arch, params = morph.apply_action(node.action, arch, params, seed)
        assert arch == s.arch
        assert seed == s.seed


def test_table_search_is_deterministic():
    table = make_table(np.random.default_rng(8), all_paths(4, 128))
    a, b = table_search(table, 2, 2), table_search(table, 2, 2)
    assert log_to_csv(a.log) == log_to_csv(b.log)


def test_log_round_trip_and_contract():
    table = {"/".join(p): 0.1 * len(p) for p in all_paths(4, 128)}
    result = table_search(table, 1, 1)
    text = result.log_csv()
    assert text.splitlines()[0] == "round,state_id,parent_id,action,depth,train_accuracy,param_count,selected"
    rows = parse_log_csv(text)
    assert log_to_csv(rows) == text
    assert check_monotone(rows, 1e-4)
    assert rows[0]["action"] is None and rows[0]["selected"]
    assert 1 <= expansion_count(rows) <= result.expansions


def test_monotone_check_flags_violations():
    row = lambda rnd, acc, sel: dict(round=rnd, state_id=0, parent_id=None, action=None, depth=0,
                                     train_accuracy=acc, param_count=1, selected=sel)
    assert check_monotone([row(0, 0.5, True), row(1, 0.7, False), row(1, 0.6, True)], 1e-4)
    assert not check_monotone([row(0, 0.5, True), row(1, 0.5, True)], 1e-4)
    assert not check_monotone([row(0, 0.5, True), row(1, 0.6, True), row(0, 0.9, False)], 1e-4)


def test_real_search_never_loses_accuracy():
    ds = D.split(D.generate_synthetic(3, 12, 14, seed=5), 0.8, 0)
    result = run_search(ds, TrainConfig(learning_rate=0.03, batch_size=8, epochs=3, seed=1),
                        BeamConfig(beam_width=1, depth_limit=1, finetune_epochs=2, root_seed=1))
    assert result.best.train_accuracy >= result.initial.train_accuracy
    assert check_monotone(result.log, 1e-4)
    assert result.best.params is not None and result.initial.params is not None


def test_run_search_needs_enough_training_samples():
    ds = D.split(D.generate_synthetic(2, 2, 14, seed=5), 0.5, 0)
    with pytest.raises(ValueError):
        run_search(ds, TrainConfig(epochs=1), BeamConfig(beam_width=2))
