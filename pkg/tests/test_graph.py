import pytest

from pulselab import graph
from pulselab.graph import THETA, MaskScheme, x_node


def test_node_counts():
    for W in (1, 2, 3, 5):
        dag = graph.build_two_sample_ssm(W)
        assert len(dag.parents) == 1 + 4 * W


def test_edges_w3():
    dag = graph.build_two_sample_ssm(3)
    for n in "ij":
        assert dag.parents[x_node(n, 1)] == ()
        assert set(dag.parents[x_node(n, 2)]) == {x_node(n, 1), THETA}
        assert set(dag.parents[x_node(n, 3)]) == {x_node(n, 2), THETA}
        for t in (1, 2, 3):
            assert dag.parents[graph.y_node(n, t)] == (x_node(n, t),)
    assert dag.parents[THETA] == ()


@pytest.mark.parametrize("W", [2, 3, 4, 6])
def test_full_sample_masks_give_theta(W):
    dag = graph.build_two_sample_ssm(W)
    for keep in [((False,) * W, (True,) * W), ((True,) * W, (False,) * W)]:
        mask = MaskScheme(keep)
        assert graph.minimal_shared_set(dag, mask) == {THETA}
        assert graph.brute_force_shared_set(dag, mask) == {THETA}


def test_three_subsequence_cases():
    W = 6
    dag = graph.build_two_sample_ssm(W)
    cases = {(1, 3): {x_node("i", 3)}, (4, 6): {x_node("i", 3)},
             (3, 4): {x_node("i", 2), x_node("i", 4)}, (2, 2): {x_node("i", 1), x_node("i", 2)}}
    for (t0, t1), want in cases.items():
        mask = MaskScheme.subsequence(W, t0, t1)
        assert graph.minimal_shared_set(dag, mask) == want
        assert graph.brute_force_shared_set(dag, mask) == want


def test_both_samples_partial_only_states():
    W = 4
    dag = graph.build_two_sample_ssm(W)
    mask = MaskScheme(((True, False, True, True), (False, False, True, True)))
    got = graph.minimal_shared_set(dag, mask)
    assert THETA not in got
    assert got == {x_node("i", 1), x_node("i", 2), x_node("j", 2)}


def test_members_are_shared_ancestors():
    for W in (2, 3, 4):
        dag = graph.build_two_sample_ssm(W)
        for mask in graph.all_masks(W):
            anc_m = set().union(*(dag.ancestors(y) for y in mask.masked()))
            anc_u = set().union(*(dag.ancestors(y) for y in mask.unmasked()))
            assert graph.minimal_shared_set(dag, mask) <= anc_m & anc_u


def test_relabelling_samples_swaps_result():
    W = 4
    dag = graph.build_two_sample_ssm(W)
    swap = lambda s: frozenset(n.replace("[i,", "[#,").replace("[j,", "[i,").replace("[#,", "[j,")
                               for n in s)  # noqa: E731
    for mask in graph.all_masks(W):
        mirrored = MaskScheme((mask.keep[1], mask.keep[0]))
        assert graph.minimal_shared_set(dag, mirrored) == swap(graph.minimal_shared_set(dag, mask))


def test_invalid_mask_rejected():
    dag = graph.build_two_sample_ssm(3)
    with pytest.raises(ValueError):
        graph.minimal_shared_set(dag, MaskScheme(((True,) * 3, (True,) * 3)))


def test_verify_report_counts():
    report = graph.verify_theorem1(2, 4)
    assert report.ok
    assert report.masks_checked == sum(2 ** (2 * W) - 2 for W in (2, 3, 4))
    # per sample: W-1 left, W-1 right, (W-1)(W-2)/2 middle
    assert report.case_counts["left"] == 2 * sum(W - 1 for W in (2, 3, 4))
    assert report.case_counts["right"] == 2 * sum(W - 1 for W in (2, 3, 4))
    assert report.case_counts["middle"] == 2 * sum((W - 1) * (W - 2) // 2 for W in (2, 3, 4))


def test_verify_rejects_w1():
    with pytest.raises(ValueError):
        graph.verify_theorem1(1, 3)
