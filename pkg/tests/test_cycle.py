import numpy as np
import pytest
import torch

from looptrack.cycle import (
    CropSpec,
    CycleEntry,
    CycleResult,
    StepResult,
    crop,
    crop_search,
    crop_template,
    cycle_loss_targets,
    mask_targets,
    mask_to_frame_affine,
    mask_window_coords,
    pair_targets,
    run_cycle,
    track_step,
)
from looptrack.errors import CycleDiscarded, TrackingLostError
from looptrack.geometry import Box
from looptrack.model import to_tensor


def _frame(seed=0, size=120):
    return np.random.default_rng(seed).random((size, size, 3)).astype(np.float32)


def test_crop_sides():
    spec = CropSpec()
    box = Box(50, 50, 10, 10)
    assert spec.template_side(box) == pytest.approx(20.0)
    assert spec.search_side(box) == pytest.approx(20.0 * 255 / 127)


def test_integer_aligned_crop_copies_pixels():
    frame = np.random.default_rng(0).random((300, 300, 3)).astype(np.float32)
    patch = crop(frame, 150.5, 150.5, 127, 127)
    assert patch.pixels.shape == (127, 127, 3)
    assert np.allclose(patch.pixels, frame[87:214, 87:214], atol=1e-5)


def test_crop_fills_outside_with_mean_color():
    frame = np.zeros((40, 40, 3), dtype=np.float32)
    frame[:, 20:] = 1.0
    patch = crop(frame, 0.0, 0.0, 80, 80)
    assert patch.pixels[0, 0] == pytest.approx([0.5, 0.5, 0.5], abs=1e-5)


def test_patch_provenance_round_trip():
    patch = crop_search(_frame(), Box(60, 55, 20, 30))
    x, y = patch.to_patch(*patch.to_frame(17.0, 200.0))
    assert (x, y) == pytest.approx((17.0, 200.0))
    assert patch.to_patch(60, 55) == pytest.approx((127.5, 127.5))
    box = Box(70, 50, 12, 8)
    assert patch.box_to_frame(patch.box_to_patch(box)).as_array() == pytest.approx(box.as_array())


def test_crop_outside_frame_is_lost():
    with pytest.raises(TrackingLostError):
        crop_template(_frame(), Box(500, 500, 10, 10))


def test_track_step_picks_max_objectness(tiny_net, tiny_grid):
    frame = _frame()
    box = Box(60, 60, 24, 20)
    step = track_step(tiny_net, crop_template(frame, box), frame, box, tiny_grid)
    probs = step.response.objectness()[0].numpy()
    assert step.index == int(np.argmax(probs))
    assert step.score == pytest.approx(float(probs.max()))
    assert step.box.w >= 2 and step.box.h >= 2
    assert not step.response.scores.requires_grad


def test_track_step_breaks_ties_by_lowest_index(tiny_net, tiny_grid):
    with torch.no_grad():
        tiny_net.score_head[-1].weight.zero_()
        tiny_net.box_head[-1].weight.zero_()
    frame = _frame(size=400)
    box = Box(200, 200, 30, 30)
    step = track_step(tiny_net, crop_template(frame, box), frame, box, tiny_grid)
    assert step.index == 0
    assert step.score == pytest.approx(0.5)
    assert step.search.box_to_patch(step.box).as_array() == pytest.approx(tiny_grid.box(0).as_array())


def test_run_cycle_visits_frames_forward_then_back(steady_net, tiny_grid):
    frames = [_frame(i, 400) for i in range(3)]
    box = Box(200, 200, 30, 30)
    result = run_cycle(steady_net, frames, box, tiny_grid, frame_ids=[0, 2, 3])
    assert [e.frame_index for e in result.entries] == [0, 2, 3, 2, 0]
    assert len(result.steps) == 4
    assert result.entries[0].box == box
    assert [e.frame_index for e in result.forward_entries] == [0, 2, 3]
    assert [e.frame_index for e in result.backward_entries] == [3, 2, 0]
    center = tiny_grid.size // 2
    for step in result.steps:
        assert step.index == center * tiny_grid.size + center
        assert (step.box.cx, step.box.cy) == pytest.approx((200.0, 200.0))


def test_run_cycle_keeps_graph_only_for_trained_steps(steady_net, tiny_grid):
    frames = [_frame(i, 400) for i in range(3)]
    box = Box(200, 200, 30, 30)
    result = run_cycle(steady_net, frames, box, tiny_grid)
    assert not any(s.response.scores.requires_grad for s in result.steps)
    result = run_cycle(steady_net, frames, box, tiny_grid, train=True)
    assert result.final.response.scores.requires_grad
    assert not any(s.response.scores.requires_grad for s in result.steps[:-1])
    result = run_cycle(steady_net, frames, box, tiny_grid, train=True, intermediate=True)
    assert [s.response.scores.requires_grad for s in result.steps] == [False, False, True, True]


def test_cycle_result_validates_indices():
    box = Box(10, 10, 4, 4)
    with pytest.raises(ValueError):
        CycleResult([CycleEntry(0, box, 1.0), CycleEntry(1, box, 1.0), CycleEntry(2, box, 1.0)], [], box)
    with pytest.raises(ValueError):
        CycleResult([CycleEntry(0, box, 1.0), CycleEntry(0, box, 1.0), CycleEntry(0, box, 1.0)], [], box)


def test_lost_target_discards_cycle(tiny_net, tiny_grid):
    with pytest.raises(CycleDiscarded) as info:
        run_cycle(tiny_net, [_frame(), _frame(1)], Box(500, 500, 10, 10), tiny_grid)
    assert info.value.reason == "lost"


def _step_at(net, grid, frame, prior: Box, template_box: Box) -> StepResult:
    template = crop_template(frame, template_box)
    search = crop_search(frame, prior)
    response = net(to_tensor(template.pixels), to_tensor(search.pixels))
    return StepResult(prior, 0.5, response, search, 0)


def test_cycle_targets_label_the_initial_box(tiny_mask_net, tiny_grid, moving_sequence):
    frame = moving_sequence.frame(0)
    box = moving_sequence.boxes[0]
    mask = moving_sequence.mask(0) == 1
    step = _step_at(tiny_mask_net, tiny_grid, frame, box, box)
    result = CycleResult(
        [CycleEntry(0, box, 1.0), CycleEntry(1, box, 0.5), CycleEntry(0, box, 0.5)], [step, step], box, mask
    )
    target = cycle_loss_targets(result, tiny_grid)
    assert target.gt.cx == pytest.approx(127.5) and target.gt.cy == pytest.approx(127.5)
    assert len(target.labels.positives) >= 1
    assert target.mask is not None
    assert np.array_equal(target.mask.positions, target.labels.positive_positions(tiny_grid))
    assert target.mask.targets.shape == (len(target.mask.positions), 15 * 15)
    assert set(np.unique(target.mask.targets)) <= {-1.0, 1.0}
    assert (target.mask.targets == 1).any()


def test_drifted_cycle_is_discarded(tiny_net, tiny_grid):
    frame = _frame(size=400)
    init = Box(40, 40, 16, 16)
    far = _step_at(tiny_net, tiny_grid, frame, Box(340, 340, 16, 16), init)
    result = CycleResult(
        [CycleEntry(0, init, 1.0), CycleEntry(1, init, 0.5), CycleEntry(0, far.box, 0.5)], [far, far], init
    )
    with pytest.raises(CycleDiscarded) as info:
        cycle_loss_targets(result, tiny_grid)
    assert info.value.reason == "drift"


def test_mask_targets_of_uniform_masks(tiny_grid):
    search = crop_search(_frame(size=400), Box(200, 200, 40, 40))
    positions = np.array([0, 312, 624])
    full = mask_targets(np.ones((400, 400), bool), search, tiny_grid, positions, 15, 127.0)
    empty = mask_targets(np.zeros((400, 400), bool), search, tiny_grid, positions, 15, 127.0)
    assert full.shape == (3, 225)
    assert np.all(full == 1.0)
    assert np.all(empty == -1.0)


def test_mask_paste_affine_matches_window_coords(tiny_grid):
    search = crop_search(_frame(size=400), Box(200, 180, 40, 30))
    position = 7 * tiny_grid.size + 19
    px, py = mask_window_coords(tiny_grid, np.array([position]), 15, 127.0)
    fx, fy = search.to_frame(px[0], py[0])
    affine = mask_to_frame_affine(search, tiny_grid.position_center(7, 19), 15, 127.0)
    for i, j in [(0, 0), (3, 11), (14, 14)]:
        col, row = affine @ np.array([j, i, 1.0])
        assert col + 0.5 == pytest.approx(fx[i, j])
        assert row + 0.5 == pytest.approx(fy[i, j])


def test_pair_targets_use_backward_steps(steady_net, tiny_grid):
    frame = _frame(size=400)
    frames = [frame, frame, frame]
    result = run_cycle(steady_net, frames, Box(200, 200, 30, 30), tiny_grid, train=True, intermediate=True)
    pairs = pair_targets(result, tiny_grid)
    assert len(pairs) == 1
    pair = pairs[0]
    assert pair.step is result.steps[2]
    assert pair.mask is None
    assert (pair.gt.cx, pair.gt.cy) == pytest.approx((127.5, 127.5))
    assert len(pair.labels.positives) >= 1
    assert pair.step.response.deltas.requires_grad
    target = cycle_loss_targets(result, tiny_grid)
    assert (target.gt.cx, target.gt.cy) == pytest.approx((127.5, 127.5))
