import dataclasses

import numpy as np
import pytest
import torch

from fabseg.checkpoint import save_checkpoint
from fabseg.config import AblationFlags, PromptConfig, TrainConfig, finetune_train_defaults, prompter_train_defaults
from fabseg.exceptions import InvalidArgument, NumericalError, SchemaError
from fabseg.sam import build_sam
from fabseg.checkpoint import Checkpoint
from fabseg.trainer import (TrainingLog, finetune_sam_block, frozen_drift, poly_lr, prompter_from_checkpoint,
                            sam_from_checkpoint, train_prompter)


def test_poly_lr_examples():
    assert poly_lr(0, 100, 0.004) == 0.004
    assert poly_lr(100, 100, 0.004) == 0.0
    assert poly_lr(50, 100, 0.004) == pytest.approx(0.004 * 0.5 ** 0.9, abs=1e-12)
    lrs = [poly_lr(s, 1000, 0.004) for s in range(1001)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


def test_default_schedules():
    assert prompter_train_defaults().lr0 == 0.004 and prompter_train_defaults().optimizer == "sgd"
    assert finetune_train_defaults().optimizer == "adam" and finetune_train_defaults().batch_size == 4
    with pytest.raises(InvalidArgument):
        TrainConfig(optimizer="rmsprop")


def test_prompter_loss_decreases_and_lr_starts_at_default(tiny_dataset, small_prompter_config):
    log = TrainingLog()
    train_prompter(prompter_train_defaults(iterations=300, batch_size=4), tiny_dataset, small_prompter_config,
                   training_log=log)
    losses = log.losses()
    assert log.rows[0][1] == 0.004
    assert np.mean(losses[290:300]) < np.mean(losses[:10])
    assert losses[-1] < losses[0]


def test_prompter_training_is_deterministic(tiny_dataset, small_prompter_config):
    cfg = prompter_train_defaults(iterations=5, batch_size=2, seed=4)
    a = train_prompter(cfg, tiny_dataset, small_prompter_config)
    b = train_prompter(cfg, tiny_dataset, small_prompter_config)
    assert save_checkpoint(a) == save_checkpoint(b)
    assert a.config["kind"] == "prompter"


def test_prompter_training_log_file(tmp_path, tiny_dataset, small_prompter_config):
    train_prompter(prompter_train_defaults(iterations=3, batch_size=2), tiny_dataset, small_prompter_config,
                   log_path=tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "step,lr,loss,main,aux" and len(lines) == 4


def test_prompter_divergence_reports_step(tiny_dataset, small_prompter_config):
    cfg = prompter_train_defaults(iterations=50, batch_size=4, lr0=1e12)
    with pytest.raises(NumericalError, match=r"step \d+"):
        train_prompter(cfg, tiny_dataset, small_prompter_config)


def test_wrong_phase_rejected(tiny_dataset, tiny_prompter_ckpt):
    with pytest.raises(InvalidArgument):
        train_prompter(finetune_train_defaults(), tiny_dataset)
    with pytest.raises(InvalidArgument):
        finetune_sam_block(prompter_train_defaults(), tiny_dataset, tiny_prompter_ckpt, "region")
    with pytest.raises(InvalidArgument):
        finetune_sam_block(finetune_train_defaults(), tiny_dataset, tiny_prompter_ckpt, "edges")


def test_finetune_keeps_encoder_frozen(tiny_dataset, tiny_prompter_ckpt, small_sam_config, quick_finetune):
    init = Checkpoint.from_module(build_sam(small_sam_config, quick_finetune.seed), "sam.")
    after = finetune_sam_block(quick_finetune, tiny_dataset, tiny_prompter_ckpt, "boundary",
                               sam_config=small_sam_config)
    assert frozen_drift(init, after) == 0.0
    assert after.frozen_manifest == ["sam.image_encoder."]
    changed = [n for n in after.names() if not np.array_equal(after.arrays[n], init.arrays[n])]
    assert changed and all(n.startswith(("sam.decoder_boundary.", "sam.prompt_encoder.")) for n in changed)


def test_finetune_without_trainable_parts_is_identity(tiny_dataset, tiny_prompter_ckpt, small_sam_config,
                                                      quick_finetune):
    init = Checkpoint.from_module(build_sam(small_sam_config, 7), "sam.", config={"sam": small_sam_config.__dict__})
    out = finetune_sam_block(quick_finetune, tiny_dataset, tiny_prompter_ckpt, "region",
                             AblationFlags(ftd=False, ftpe=False), init=init)
    assert out.names() == init.names()
    assert all(out.arrays[n].tobytes() == init.arrays[n].tobytes() for n in out.names())


@pytest.mark.parametrize("flags", [AblationFlags(mp=False), AblationFlags(pp=False), AblationFlags(ftpe=False)])
def test_finetune_ablations_run(flags, tiny_dataset, tiny_prompter_ckpt, small_sam_config, quick_finetune):
    out = finetune_sam_block(quick_finetune, tiny_dataset, tiny_prompter_ckpt, "region", flags,
                             sam_config=small_sam_config)
    assert out.config["flags"] == dataclasses.asdict(flags)
    init = Checkpoint.from_module(build_sam(small_sam_config, quick_finetune.seed), "sam.")
    pe_changed = any(not np.array_equal(out.arrays[n], init.arrays[n]) for n in out.names("sam.prompt_encoder."))
    assert pe_changed == flags.ftpe


def test_finetune_with_ground_truth_prompts(tiny_dataset, tiny_prompter_ckpt, small_sam_config, quick_finetune):
    out = finetune_sam_block(quick_finetune, tiny_dataset, tiny_prompter_ckpt, "region",
                             sam_config=small_sam_config, prompt_config=PromptConfig(source="ground_truth"))
    assert out.config["prompts"]["source"] == "ground_truth"


def test_finetune_is_deterministic(tiny_dataset, tiny_prompter_ckpt, small_sam_config, quick_finetune):
    a = finetune_sam_block(quick_finetune, tiny_dataset, tiny_prompter_ckpt, "region", sam_config=small_sam_config)
    b = finetune_sam_block(quick_finetune, tiny_dataset, tiny_prompter_ckpt, "region", sam_config=small_sam_config)
    assert save_checkpoint(a) == save_checkpoint(b)
    assert isinstance(sam_from_checkpoint(a).decoder("region"), torch.nn.Module)


def test_checkpoint_kind_checks(tiny_prompter_ckpt):
    with pytest.raises(SchemaError):
        sam_from_checkpoint(tiny_prompter_ckpt)
    with pytest.raises(SchemaError):
        prompter_from_checkpoint(Checkpoint({}, config={}))
