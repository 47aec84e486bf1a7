import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fabseg.exceptions import InvalidArgument, NoEligiblePixels, NumericalError, ShapeError
from fabseg.prompts import (BACKGROUND, FOREGROUND, PADDING, batch_point_prompts, generate_point_prompts,
                            mask_prompt_from_logits, step_seed, to_probability_map)


def test_probability_map_examples():
    assert np.all(to_probability_map(np.zeros((3, 3))) == 0.5)
    assert to_probability_map(np.array([10.0]))[0] == pytest.approx(0.9999546, abs=1e-7)


@given(arrays(np.float64, (4, 5), elements=st.floats(-50, 50)))
def test_probability_map_symmetry(mp):
    assert np.allclose(to_probability_map(-mp), 1 - to_probability_map(mp), atol=1e-15)


def test_probability_map_rejects_nan():
    with pytest.raises(NumericalError):
        to_probability_map(np.array([np.nan]))


def test_mask_prompt_is_logit_difference():
    logits = np.stack([np.full((2, 2), 1.0), np.full((2, 2), 3.5)])
    assert np.all(mask_prompt_from_logits(logits) == 2.5)
    with pytest.raises(ShapeError):
        mask_prompt_from_logits(np.zeros((3, 2, 2)))


def test_no_eligible_pixels():
    with pytest.raises(NoEligiblePixels):
        generate_point_prompts(np.full((8, 8), 0.5), 3, 3)


def test_unique_candidate_is_chosen():
    P = np.full((6, 6), 0.05)
    P[2, 4] = 0.95
    pts = generate_point_prompts(P, n_fg=1, n_bg=0, seed=11)
    assert pts.coords.tolist() == [[2, 4]] and pts.labels.tolist() == [FOREGROUND]


def test_small_pool_reports_shortfall():
    P = np.full((4, 4), 0.1)
    P[0, 0] = 0.9
    pts = generate_point_prompts(P, n_fg=3, n_bg=2, seed=0)
    assert pts.shortfall == {"foreground": 2}
    assert (pts.labels == FOREGROUND).sum() == 1 and (pts.labels == BACKGROUND).sum() == 2


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (10, 10), elements=st.floats(0, 1)), st.integers(0, 8), st.integers(0, 8),
       st.integers(0, 2**32 - 1))
def test_points_respect_thresholds_and_are_distinct(P, n_fg, n_bg, seed):
    try:
        pts = generate_point_prompts(P, n_fg, n_bg, seed)
    except NoEligiblePixels:
        assert not ((P > 0.7) | (P < 0.3)).any()
        return
    vals = P[pts.coords[:, 0], pts.coords[:, 1]]
    assert np.all(vals[pts.labels == FOREGROUND] > 0.7)
    assert np.all(vals[pts.labels == BACKGROUND] < 0.3)
    assert len({tuple(c) for c in pts.coords}) == len(pts)
    assert (pts.labels == FOREGROUND).sum() == min(n_fg, int((P > 0.7).sum()))


def test_same_seed_same_points():
    P = np.random.default_rng(0).uniform(size=(16, 16))
    a, b = generate_point_prompts(P, 4, 4, seed=9), generate_point_prompts(P, 4, 4, seed=9)
    assert np.array_equal(a.coords, b.coords) and np.array_equal(a.labels, b.labels)


def test_threshold_validation():
    with pytest.raises(InvalidArgument):
        generate_point_prompts(np.zeros((2, 2)), 1, 1, t_fg=0.3, t_bg=0.7)


def test_batch_padding():
    maps = np.stack([np.full((4, 4), 0.5), np.full((4, 4), 0.9)])
    coords, labels = batch_point_prompts(maps, 2, 2, seeds=[0, 1])
    assert coords.shape == (2, 4, 2)
    assert (labels[0] == PADDING).all()
    assert labels[1].tolist() == [FOREGROUND, FOREGROUND, PADDING, PADDING]


def test_step_seed_depends_on_every_key():
    seeds = {step_seed(0, s, i) for s in range(10) for i in range(10)}
    assert len(seeds) == 100
    assert step_seed(1, 2, 3) == step_seed(1, 2, 3)
