"""Two-phase optimisation: Prompter training, then per-head SAM-block fine-tuning."""

from __future__ import annotations

import dataclasses
import logging
import math

import numpy as np
import torch

from .checkpoint import Checkpoint
from .config import AblationFlags, PromptConfig, TrainConfig
from .exceptions import InvalidArgument, NumericalError, SchemaError
from .losses import FinetuneLossWeights, PrompterLossWeights, finetune_loss, prompter_loss
from .prompter import PrompterConfig, PrompterNet, images_to_tensor
from .prompts import batch_point_prompts, step_seed
from .sam import HEADS, SamConfig, build_sam

log = logging.getLogger(__name__)

FROZEN_PREFIX = "sam.image_encoder."


def poly_lr(step, max_steps, lr0, power=0.9):
    if max_steps <= 0:
        raise InvalidArgument("max_steps must be positive")
    if not 0 <= step <= max_steps:
        raise InvalidArgument(f"step {step} outside [0, {max_steps}]")
    return lr0 * (1 - step / max_steps) ** power


def _set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr


class TrainingLog:
    """Collects ``step,lr,loss,<terms>`` rows; optionally mirrors them to a text file."""

    def __init__(self, path=None):
        self.rows = []
        self.path = path
        self._fh = None

    def write(self, step, lr, loss, terms):
        self.rows.append((step, lr, loss, dict(terms)))
        if self.path is not None:
            if self._fh is None:
                self._fh = open(self.path, "w")
                self._fh.write(",".join(["step", "lr", "loss", *terms]) + "\n")
            self._fh.write(",".join([str(step), f"{lr:.8g}", f"{loss:.8g}", *(f"{v:.8g}" for v in terms.values())]) + "\n")

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def losses(self):
        return np.array([r[2] for r in self.rows])


def _batches(rng, n, batch_size):
    """Endless stream of index batches, reshuffled every pass over the data."""
    batch_size = min(batch_size, n)
    buf = np.empty(0, dtype=np.int64)
    while True:
        while buf.size < batch_size:
            buf = np.concatenate([buf, rng.permutation(n)])
        yield buf[:batch_size]
        buf = buf[batch_size:]


def _make_optimizer(config: TrainConfig, params):
    if config.optimizer == "sgd":
        return torch.optim.SGD(params, lr=config.lr0, momentum=config.momentum, weight_decay=config.weight_decay)
    return torch.optim.Adam(params, lr=config.lr0, betas=config.betas, eps=config.eps,
                            weight_decay=config.weight_decay)


def build_prompter(cfg: PrompterConfig, seed=0):
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return PrompterNet(cfg)


def prompter_from_checkpoint(ckpt: Checkpoint):
    try:
        cfg = PrompterConfig(**ckpt.config["prompter"])
    except KeyError as exc:
        raise SchemaError("checkpoint carries no Prompter configuration") from exc
    net = PrompterNet(cfg)
    ckpt.load_into(net, "prompter.")
    return net.eval()


def sam_from_checkpoint(ckpt: Checkpoint):
    try:
        cfg = SamConfig(**ckpt.config["sam"])
    except KeyError as exc:
        raise SchemaError("checkpoint carries no SAM-block configuration") from exc
    sam = build_sam(cfg)
    ckpt.load_into(sam, "sam.")
    return sam.eval()


def train_prompter(config: TrainConfig, dataset, prompter_config: PrompterConfig | None = None,
                   loss_weights: PrompterLossWeights | None = None, init: Checkpoint | None = None,
                   log_path=None, training_log: TrainingLog | None = None):
    """SGD over the main + auxiliary cross-entropy with a poly schedule.

    Runs for ``config.iterations`` steps; deterministic given ``config.seed``.
    """
    if config.phase != "prompter":
        raise InvalidArgument("train_prompter needs a config with phase='prompter'")
    h, w = dataset.images.shape[1:3]
    if init is not None:
        net = prompter_from_checkpoint(init)
        prompter_config = net.config
    else:
        prompter_config = dataclasses.replace(prompter_config or PrompterConfig(), input_size=(h, w))
        net = build_prompter(prompter_config, config.seed)
    loss_weights = loss_weights or PrompterLossWeights()
    x_all = images_to_tensor(dataset.images)
    y_all = torch.from_numpy(dataset.region.astype(np.float32))
    optimizer = _make_optimizer(config, net.parameters())
    batches = _batches(np.random.default_rng(config.seed), len(dataset), config.batch_size)
    tlog = training_log or TrainingLog(log_path)
    net.train()
    try:
        for step in range(config.iterations):
            idx = torch.from_numpy(next(batches))
            lr = poly_lr(step, config.iterations, config.lr0, config.power)
            _set_lr(optimizer, lr)
            out = net(x_all[idx])
            loss = prompter_loss(out.main_logits, out.aux_logits, y_all[idx], loss_weights)
            if not torch.isfinite(loss.value):
                raise NumericalError("Prompter loss became non-finite", step=step)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            tlog.write(step, lr, float(loss), loss.terms)
    finally:
        if training_log is None:
            tlog.close()
    net.eval()
    return Checkpoint.from_module(
        net, "prompter.",
        config={"kind": "prompter", "prompter": dataclasses.asdict(prompter_config),
                "train": dataclasses.asdict(config), "loss": dataclasses.asdict(loss_weights)},
        rng_state={"seed": config.seed, "steps": config.iterations},
    )


@torch.no_grad()
def prompter_mask_prompts(prompter, x, batch=32):
    """Farmland-minus-background logits ``(N, 1, H, W)`` from a frozen Prompter."""
    prompter.eval()
    outs = []
    for i in range(0, x.shape[0], batch):
        logits = prompter(x[i:i + batch]).main_logits
        outs.append(logits[:, 1:2] - logits[:, 0:1])
    return torch.cat(outs)


@torch.no_grad()
def image_embeddings(sam, x, batch=32):
    return torch.cat([sam.encode_image(x[i:i + batch]) for i in range(0, x.shape[0], batch)])


def ground_truth_mask_prompts(region, magnitude=4.0):
    """Mask prompt built from region labels: +magnitude inside farmland, -magnitude outside."""
    return torch.from_numpy((2.0 * region.astype(np.float32) - 1.0) * magnitude)[:, None]


def finetune_sam_block(config: TrainConfig, dataset, prompter_ckpt: Checkpoint, head: str,
                       flags: AblationFlags | None = None, sam_config: SamConfig | None = None,
                       prompt_config: PromptConfig | None = None,
                       loss_weights: FinetuneLossWeights | None = None, init: Checkpoint | None = None,
                       log_path=None, training_log: TrainingLog | None = None):
    """Adam fine-tuning of one decoder head (and optionally the prompt encoder).

    The Prompter and the image encoder stay frozen. Point prompts are
    resampled every step from the current mask prompt with a seed derived
    from ``(config.seed, step, sample)``.
    """
    if config.phase != "finetune":
        raise InvalidArgument("finetune_sam_block needs a config with phase='finetune'")
    if head not in HEADS:
        raise InvalidArgument(f"unknown head {head!r}")
    flags = flags or AblationFlags()
    prompt_config = prompt_config or PromptConfig()
    loss_weights = loss_weights or FinetuneLossWeights()
    targets = torch.from_numpy(dataset.labels(head).astype(np.float32))
    h, w = dataset.images.shape[1:3]

    prompter = prompter_from_checkpoint(prompter_ckpt)
    if init is not None:
        sam = sam_from_checkpoint(init)
    else:
        sam_config = dataclasses.replace(sam_config or SamConfig(), input_size=(h, w))
        sam = build_sam(sam_config, config.seed)
    sam_config = sam.cfg
    meta = {
        "kind": "sam", "sam": dataclasses.asdict(sam_config), "head": head,
        "flags": dataclasses.asdict(flags), "prompts": dataclasses.asdict(prompt_config),
        "train": dataclasses.asdict(config), "loss": dataclasses.asdict(loss_weights),
    }

    params = []
    if flags.ftd:
        params += list(sam.decoder(head).parameters())
    if flags.ftpe:
        params += [p for p in sam.prompt_encoder.parameters() if p.requires_grad]
    n = len(dataset)
    steps_per_epoch = math.ceil(n / min(config.batch_size, n))
    total = config.epochs * steps_per_epoch
    if not params or total == 0:
        return Checkpoint.from_module(sam, "sam.", frozen_manifest=[FROZEN_PREFIX], config=meta,
                                      rng_state={"seed": config.seed, "steps": 0})

    sam.requires_grad_(False)
    for p in params:
        p.requires_grad_(True)
    x_all = images_to_tensor(dataset.images)
    f_image = image_embeddings(sam, x_all)
    if prompt_config.source == "ground_truth":
        mp_all = ground_truth_mask_prompts(dataset.region)
    else:
        mp_all = prompter_mask_prompts(prompter, x_all)
    prob_all = torch.sigmoid(mp_all[:, 0].double()).numpy()

    optimizer = _make_optimizer(config, params)
    rng = np.random.default_rng(config.seed)
    tlog = training_log or TrainingLog(log_path)
    sam.train()
    step = 0
    try:
        for _ in range(config.epochs):
            order = rng.permutation(n)
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                lr = poly_lr(step, total, config.lr0, config.power)
                _set_lr(optimizer, lr)
                points = None
                if flags.pp:
                    seeds = [step_seed(config.seed, step, i) for i in idx]
                    coords, labels = batch_point_prompts(prob_all[idx], prompt_config.n_fg, prompt_config.n_bg,
                                                         seeds, prompt_config.t_fg, prompt_config.t_bg)
                    points = (torch.from_numpy(coords), torch.from_numpy(labels))
                tidx = torch.from_numpy(idx)
                mp = mp_all[tidx] if flags.mp else None
                f_mp, f_pp = sam.encode_prompts(mp, points, batch_size=len(idx))
                logits = sam.decode(f_image[tidx], f_mp, f_pp, head)
                loss = finetune_loss(torch.sigmoid(logits[:, 0]), targets[tidx], loss_weights)
                if not torch.isfinite(loss.value):
                    raise NumericalError("fine-tuning loss became non-finite", step=step)
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                tlog.write(step, lr, float(loss), loss.terms)
                step += 1
    finally:
        if training_log is None:
            tlog.close()
    sam.requires_grad_(True)
    sam.image_encoder.requires_grad_(False)
    sam.eval()
    return Checkpoint.from_module(sam, "sam.", frozen_manifest=[FROZEN_PREFIX], config=meta,
                                  rng_state={"seed": config.seed, "steps": total})


def frozen_drift(before: Checkpoint, after: Checkpoint, prefix=FROZEN_PREFIX):
    """Largest absolute change over arrays under ``prefix`` (0.0 means bit-identical)."""
    names = before.names(prefix)
    if names != after.names(prefix):
        raise SchemaError(f"checkpoints disagree on the arrays under {prefix!r}")
    drift = 0.0
    for name in names:
        a, b = before.arrays[name], after.arrays[name]
        if not np.array_equal(a, b):
            drift = max(drift, float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64)))))
    return drift
