import pytest
import torch

from looptrack.checkpoint import CHECKPOINT_FORMAT, load_checkpoint, save_checkpoint
from looptrack.cycle import CropSpec
from looptrack.errors import CheckpointError
from looptrack.model import SiameseNet


def test_round_trip_is_bit_exact(tiny_mask_net, tmp_path):
    with torch.no_grad():
        next(tiny_mask_net.parameters()).add_(0.25)
    crop = CropSpec(context_margin=0.4)
    path = save_checkpoint(tmp_path / "run" / "model.pt", tiny_mask_net, crop, step=12)
    net, loaded_crop, meta = load_checkpoint(path)
    assert meta == {"step": 12, "version": 1}
    assert loaded_crop == crop
    assert net.config == tiny_mask_net.config
    assert not net.training
    for key, value in tiny_mask_net.state_dict().items():
        assert torch.equal(value, net.state_dict()[key])


def test_loaded_network_gives_identical_outputs(tiny_net, tmp_path):
    path = save_checkpoint(tmp_path / "model.pt", tiny_net)
    net, _, _ = load_checkpoint(path)
    z, x = torch.rand(1, 3, 127, 127), torch.rand(1, 3, 255, 255)
    with torch.no_grad():
        assert torch.equal(net(z, x).scores, tiny_net.eval()(z, x).scores)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "absent.pt")


def test_foreign_files_are_rejected(tmp_path):
    torch.save({"format": "something-else"}, tmp_path / "other.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "other.pt")
    (tmp_path / "garbage.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "garbage.pt")


def test_version_and_contents_are_checked(tiny_net, tmp_path):
    payload = torch.load(save_checkpoint(tmp_path / "model.pt", tiny_net), weights_only=True)
    torch.save({**payload, "version": 99}, tmp_path / "future.pt")
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "future.pt")
    wider = SiameseNet(tiny_net.config.model_copy(update={"width": 16}))
    torch.save({**payload, "state_dict": wider.state_dict()}, tmp_path / "mismatch.pt")
    with pytest.raises(CheckpointError, match="corrupt"):
        load_checkpoint(tmp_path / "mismatch.pt")
    assert payload["format"] == CHECKPOINT_FORMAT
