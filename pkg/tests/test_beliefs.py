import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scanirl import beliefs as bl
from scanirl.beliefs import GRID_H, GRID_W

cells = st.tuples(st.integers(0, GRID_H - 1), st.integers(0, GRID_W - 1))
histories = st.lists(cells, min_size=0, max_size=8)


def stacks(seed=0, c=4):
    rng = np.random.default_rng(seed)
    names = tuple(f"ch{i}" for i in range(c))
    low = bl.BeliefStack(rng.random((c, GRID_H, GRID_W)), names, "low")
    high = bl.BeliefStack(rng.random((c, GRID_H, GRID_W)), names, "high")
    return low, high


def disc_oracle(cell, radius):
    r, c = cell
    return {(i, j) for i in range(GRID_H) for j in range(GRID_W) if (i - r) ** 2 + (j - c) ** 2 <= radius ** 2}


def as_set(mask):
    return {tuple(x) for x in np.argwhere(mask)}


def test_mask_small_radius_is_one_cell():
    assert as_set(bl.make_fixation_mask((10, 16), 0.5)) == {(10, 16)}


def test_mask_plus_shape_and_corner_clip():
    # Euclidean rule: the plus shape holds for 1 <= r < sqrt(2); at r = 1.5 the diagonals join
    plus = {(10, 16), (9, 16), (11, 16), (10, 15), (10, 17)}
    assert as_set(bl.make_fixation_mask((10, 16), 1.2)) == plus
    assert as_set(bl.make_fixation_mask((0, 0), 1.2)) == {(0, 0), (1, 0), (0, 1)}
    assert as_set(bl.make_fixation_mask((10, 16), 1.5)) == {(r, c) for r in (9, 10, 11) for c in (15, 16, 17)}
    assert as_set(bl.make_fixation_mask((0, 0), 1.5)) == {(0, 0), (1, 0), (0, 1), (1, 1)}


@settings(max_examples=60, deadline=None)
@given(cells, st.floats(0.3, 5.0))
def test_mask_matches_enumeration(cell, radius):
    assert as_set(bl.make_fixation_mask(cell, radius)) == disc_oracle(cell, radius)


def test_mask_rejects_bad_input():
    with pytest.raises(ValueError):
        bl.make_fixation_mask((20, 0))
    with pytest.raises(ValueError):
        bl.make_fixation_mask((0, 0), 0.0)


def test_union_cases():
    a = bl.make_fixation_mask((5, 5), 2.0)
    b = bl.make_fixation_mask((15, 25), 2.0)
    assert np.array_equal(bl.union_masks([a, a]), a)
    assert np.array_equal(bl.union_masks([a, np.zeros_like(a)]), a)
    assert bl.union_masks([a, b]).sum() == a.sum() + b.sum()


def test_empty_history_is_low():
    low, high = stacks()
    assert np.array_equal(bl.dcb_state(low, high, []).channels, low.channels)


def test_full_coverage_is_high():
    low, high = stacks(1)
    every = [(r, c) for r in range(GRID_H) for c in range(GRID_W)]
    assert np.array_equal(bl.dcb_state(low, high, every).channels, high.channels)


def test_three_fixations_closed_form_equals_recurrence():
    low, high = stacks(2)
    h = [(3, 4), (10, 20), (18, 30)]
    assert np.array_equal(bl.dcb_state(low, high, h).channels, bl.dcb_recurrent(low, high, h).channels)


@settings(max_examples=60, deadline=None)
@given(histories, st.integers(0, 10_000))
def test_each_cell_is_low_or_high(h, seed):
    low, high = stacks(seed % 7)
    b = bl.dcb_state(low, high, h).channels
    m = bl.history_mask(h) if h else np.zeros((GRID_H, GRID_W), bool)
    assert np.array_equal(b[:, m], high.channels[:, m])
    assert np.array_equal(b[:, ~m], low.channels[:, ~m])


@settings(max_examples=60, deadline=None)
@given(histories, histories)
def test_monotone_revelation(h, extra):
    low, high = stacks(3)
    revealed = np.all(bl.dcb_state(low, high, h).channels == high.channels, axis=0)
    revealed2 = np.all(bl.dcb_state(low, high, h + extra).channels == high.channels, axis=0)
    assert np.all(revealed2[revealed])


@settings(max_examples=60, deadline=None)
@given(histories, st.randoms(use_true_random=False))
def test_permutation_invariance(h, rnd):
    low, high = stacks(4)
    p = list(h)
    rnd.shuffle(p)
    assert np.array_equal(bl.dcb_state(low, high, h).channels, bl.dcb_state(low, high, p).channels)


def test_misaligned_stacks_rejected():
    low, _ = stacks(0, 4)
    _, high = stacks(0, 3)
    with pytest.raises(ValueError):
        bl.dcb_state(low, high, [(1, 1)])


def test_ablation_cases():
    rng = np.random.default_rng(5)
    names = ("fork", "cup", "sky")
    s = bl.BeliefStack(rng.random((3, GRID_H, GRID_W)), names)
    assert bl.ablate_channels(s, []) is s
    assert not bl.ablate_channels(s, [0, 1, 2]).channels.any()
    once = bl.ablate_channels(s, ["fork"])
    assert np.array_equal(bl.ablate_channels(once, ["fork"]).channels, once.channels)
    assert not once.channels[0].any() and np.array_equal(once.channels[1:], s.channels[1:])
    with pytest.raises(KeyError):
        bl.ablate_channels(s, ["knife"])


def test_auxiliary_channels_134_to_136():
    names = tuple(f"c{i}" for i in range(134))
    s = bl.BeliefStack(np.zeros((134, GRID_H, GRID_W)), names, n_things=80)
    assert bl.attach_auxiliary_channels(s).n_channels == 134
    hist = [(2, 3), (9, 9)]
    hm = bl.history_mask(hist).astype(float)
    out = bl.attach_auxiliary_channels(s, np.full((GRID_H, GRID_W), 0.5), hm)
    assert out.n_channels == 136
    assert out.channel_names[-2:] == (bl.SALIENCY, bl.HISTORY)
    assert np.array_equal(out.channels[-1], bl.union_masks(bl.make_fixation_mask(c) for c in hist))
    g = bl.channel_groups(out, "c5")
    assert g.target == (5,) and len(g.context_things) == 79 and len(g.stuff) == 54
    assert g.saliency == (134,) and g.history == (135,)
    with pytest.raises(ValueError):
        bl.attach_auxiliary_channels(s, np.full((GRID_H, GRID_W), 2.0))


def test_task_ids():
    assert bl.N_TASKS == 18
    assert bl.task_id("bottle") == 0 and bl.task_id("tv") == 17
    with pytest.raises(KeyError):
        bl.task_id("zebra")


def test_belief_file_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    vals = rng.random((3, GRID_H, GRID_W)).astype(np.float32).astype(np.float64)
    s = bl.BeliefStack(vals, ("a", "b c", "d"))
    bl.write_belief_file(tmp_path / "x.dcbt", s)
    r = bl.read_belief_file(tmp_path / "x.dcbt", "high", 2)
    assert r.channel_names == s.channel_names and r.n_things == 2
    assert np.array_equal(r.channels, vals)


def test_belief_file_rejects_out_of_range(tmp_path):
    s = bl.BeliefStack(np.full((1, GRID_H, GRID_W), 1.5), ("a",))
    bl.write_belief_file(tmp_path / "x.dcbt", s)
    with pytest.raises(ValueError, match="outside"):
        bl.read_belief_file(tmp_path / "x.dcbt")
    (tmp_path / "y.dcbt").write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(ValueError, match="magic"):
        bl.read_belief_file(tmp_path / "y.dcbt")
