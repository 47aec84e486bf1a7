"""Numerical oracles: central finite differences, brute-force raster checks and the reported-score fixture.

Every check returns a :class:`CheckResult`; :func:`run_oracle_suite` runs the
whole set and is what ``fabseg verify`` calls.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from importlib import resources

import numpy as np
import torch

from .exceptions import NumericalError


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_parameter: str
    step: float
    precision: str = "double"

    def passed(self, tol):
        return self.max_rel_error < tol


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail} ({self.seconds:.2f}s)"


def finite_difference_gradient(f, x, step=1e-5):
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every coordinate of ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(f(x))
        flat[i] = orig - step
        down = float(f(x))
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericalError(f"function is not finite around coordinate {i}")
        gflat[i] = (up - down) / (2 * step)
    return grad


def relative_error(a, b):
    """``|a - b| / max(|a|, |b|, 1e-12)`` with Euclidean norms over whole arrays."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def autograd_gradient(f, x):
    t = torch.tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    out = f(t)
    (grad,) = torch.autograd.grad(out, t)
    return grad.numpy()


def gradcheck(f, x, name="x", step=1e-5):
    """Compare autograd against central differences for a scalar torch function ``f``."""
    analytic = autograd_gradient(f, x)
    with torch.no_grad():
        numeric = finite_difference_gradient(lambda arr: f(torch.from_numpy(arr)).item(), x, step)
    return GradCheckReport(relative_error(analytic, numeric), name, step)


def projection(shape, seed=0):
    """Fixed random weights turning a tensor into a scalar with a non-degenerate gradient."""
    return torch.from_numpy(np.random.default_rng(seed).standard_normal(shape))


# -- reported-score fixture ---------------------------------------------------

def reported_score_rows():
    text = resources.files("fabseg").joinpath("fixtures/reported_scores.csv").read_text()
    return list(csv.DictReader(text.splitlines()))


def check_reported_scores():
    """Recompute each printed mIOU from its region and boundary IoUs.

    A row passes when the half-up 2-decimal rounding of the exact mean equals
    the printed value and the float mean lies within 0.005 of it.
    """
    from .metrics import miou

    start = time.perf_counter()
    mismatches = []
    rows = reported_score_rows()
    for row in rows:
        r, b, printed = (Decimal(row[k]) for k in ("region_iou", "boundary_iou", "miou"))
        exact = ((r + b) / 2).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
        approx = 100 * miou(float(r) / 100, float(b) / 100)
        if exact != printed or abs(approx - float(printed)) > 0.005 + 1e-9:
            mismatches.append(f"{row['dataset']}/{row['method']}: {exact} vs {printed}")
    detail = f"{len(rows) - len(mismatches)}/{len(rows)} rows match" + (f"; {mismatches}" if mismatches else "")
    return CheckResult("reported_miou_arithmetic", not mismatches and len(rows) == 10, detail,
                       time.perf_counter() - start)


# -- individual oracle checks ---------------------------------------------------

def check_loss_values():
    from .losses import cross_entropy_loss, dice_loss, focal_loss

    start = time.perf_counter()
    failures = []
    dice = float(dice_loss(np.array([0.8, 0.2, 0.6, 0.4]), np.array([1.0, 0.0, 1.0, 0.0])))
    if abs(dice - 0.3) > 1e-9:
        failures.append(f"dice={dice!r}")
    focal = float(focal_loss(np.array([0.9]), np.array([1.0]), alpha=0.25, gamma=2.0))
    if abs(focal - 2.634e-4) > 1e-7:
        failures.append(f"focal={focal!r}")
    ce = float(cross_entropy_loss(np.full(16, 0.5), np.ones(16)))
    if abs(ce - np.log(2)) > 1e-9:
        failures.append(f"ce={ce!r}")
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        y = rng.uniform(0, 1, 64)
        t = (rng.uniform(size=64) < 0.5).astype(np.float64)
        diff = abs(float(focal_loss(y, t, alpha=0.5, gamma=0.0)) - 0.5 * float(cross_entropy_loss(y, t)))
        worst = max(worst, diff)
    if worst > 1e-9:
        failures.append(f"focal/CE gap {worst:.2e}")
    return CheckResult("loss_values", not failures, "; ".join(failures) or f"focal vs CE gap {worst:.1e}",
                       time.perf_counter() - start)


def loss_gradient_reports(seed=0):
    from .losses import cross_entropy_loss, dice_loss, finetune_loss, focal_loss, prompter_loss

    rng = np.random.default_rng(seed)
    y = rng.uniform(0.05, 0.95, 48)
    t = (rng.uniform(size=48) < 0.4).astype(np.float64)
    logits = rng.normal(size=(2, 2, 4, 4))
    aux = torch.from_numpy(rng.normal(size=(2, 2, 4, 4)))
    t_img = torch.from_numpy((rng.uniform(size=(2, 4, 4)) < 0.5).astype(np.float64))
    tt = torch.from_numpy(t)
    return [
        gradcheck(lambda v: cross_entropy_loss(v, tt).value, y, "cross_entropy_loss"),
        gradcheck(lambda v: prompter_loss(v, aux, t_img).value, logits, "prompter_loss"),
        gradcheck(lambda v: dice_loss(v, tt).value, y, "dice_loss"),
        gradcheck(lambda v: focal_loss(v, tt).value, y, "focal_loss"),
        gradcheck(lambda v: finetune_loss(v, tt).value, y, "finetune_loss"),
    ]


def tiny_prompter(seed=0):
    from .prompter import PrompterConfig, PrompterNet

    torch.manual_seed(seed)
    cfg = PrompterConfig(backbone_channels=(4, 6, 8, 8), aspp_channels=6, decoder_channels=6,
                         low_level_channels=4, input_size=(32, 32))
    return PrompterNet(cfg).double()


def tiny_sam(seed=0):
    from .sam import SamConfig, build_sam

    cfg = SamConfig(input_size=(32, 32), patch_size=8, embed_dim=16, encoder_depth=2, encoder_heads=2,
                    prompt_dim=16, decoder_depth=2, decoder_heads=2, decoder_mlp_dim=32)
    return build_sam(cfg, seed).double()


def network_gradient_reports(seed=0):
    """Input / parameter gradients of the Prompter and SAM-block forwards at 32x32."""
    from torch.func import functional_call

    rng = np.random.default_rng(seed)
    reports = []

    net = tiny_prompter(seed).train()
    x = rng.uniform(0, 1, (1, 3, 32, 32))
    proj = projection((1, 2, 32, 32), seed)
    reports.append(gradcheck(lambda v: (net(v).main_logits * proj).sum(), x, "prompter.main_logits/input"))

    feats = net.backbone(torch.from_numpy(x))[2].detach()
    w0 = net.aux_head.conv3.weight.detach().numpy()
    other = {k: v for k, v in net.aux_head.named_parameters() if k != "conv3.weight"}

    def aux_of(w):
        return (functional_call(net.aux_head, {**other, "conv3.weight": w}, (feats, (32, 32))) * proj).sum()

    reports.append(gradcheck(aux_of, w0, "prompter.aux_head.conv3.weight"))

    sam = tiny_sam(seed)
    img = rng.uniform(0, 1, (1, 3, 32, 32))
    f_shape = (1, 16, 4, 4)
    reports.append(gradcheck(lambda v: (sam.encode_image(v) * projection(f_shape, seed + 1)).sum(),
                             img, "sam.image_encoder/input"))
    with torch.no_grad():
        f_i = sam.encode_image(torch.from_numpy(img))
        coords = torch.tensor([[[3, 5], [20, 11]]])
        labels = torch.tensor([[1, 0]])
        mp = torch.from_numpy(rng.normal(size=(1, 1, 32, 32)))
        f_mp0, f_pp = sam.encode_prompts(mp, (coords, labels))
    out_proj = projection((1, 1, 32, 32), seed + 2)
    reports.append(gradcheck(lambda v: (sam.decode(f_i, v, f_pp, "region") * out_proj).sum(),
                             f_mp0.numpy(), "sam.decoder_region/F_mp"))
    return reports


def check_gradients(loss_tol=1e-5, net_tol=1e-4):
    start = time.perf_counter()
    rows = [(r, loss_tol) for r in loss_gradient_reports()] + [(r, net_tol) for r in network_gradient_reports()]
    bad = [f"{r.worst_parameter}={r.max_rel_error:.2e}" for r, tol in rows if not r.passed(tol)]
    worst = max(rows, key=lambda rt: rt[0].max_rel_error / rt[1])[0]
    detail = "; ".join(bad) or f"worst {worst.worst_parameter} rel err {worst.max_rel_error:.1e}"
    return CheckResult("gradient_suite", not bad, detail, time.perf_counter() - start)


def check_prompt_rules(n_maps=1000, n_draws=100_000, seed=0):
    from .exceptions import NoEligiblePixels
    from .prompts import generate_point_prompts

    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    violations = 0
    for k in range(n_maps):
        P = rng.uniform(0, 1, (16, 16)) ** rng.uniform(0.3, 3)
        try:
            pts = generate_point_prompts(P, 4, 4, seed=k)
        except NoEligiblePixels:
            continue
        vals = P[pts.coords[:, 0], pts.coords[:, 1]]
        violations += int(np.sum(vals[pts.labels == 1] <= 0.7) + np.sum(vals[pts.labels == 0] >= 0.3))
    pool = np.array([[0.8, 0.9]])
    hits = sum(int(generate_point_prompts(pool, 1, 0, seed=s).coords[0, 1] == 1) for s in range(n_draws))
    freq, expected = hits / n_draws, 0.9 / 1.7
    ok = violations == 0 and abs(freq - expected) <= 0.01
    return CheckResult("prompt_rules", ok, f"{violations} threshold violations; pick freq {freq:.4f} vs {expected:.4f}",
                       time.perf_counter() - start)


def check_raster_oracles(seed=0):
    from .data import crop_tiles
    from .metrics import confusion_counts
    from .postprocess import stitch_tiles, symmetric_difference

    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    failures = []
    for _ in range(200):
        a, b = rng.integers(0, 2, (2, 8, 8))
        brute = np.array([[1 if (a[i, j] == 1) != (b[i, j] == 1) else 0 for j in range(8)] for i in range(8)])
        if not np.array_equal(symmetric_difference(a, b), brute):
            failures.append("xor")
            break
    for _ in range(30):
        h, w = rng.integers(1, 601, 2)
        ts = int(rng.choice([64, 128, 256]))
        img = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
        if not np.array_equal(stitch_tiles(crop_tiles(img, ts)), img):
            failures.append(f"stitch {h}x{w}/{ts}")
            break
    for _ in range(200):
        p, g = rng.integers(0, 2, (2, 8, 8))
        tp = fp = tn = fn = 0
        for pv, gv in zip(p.ravel(), g.ravel()):
            tp += pv and gv
            fp += pv and not gv
            fn += gv and not pv
            tn += not pv and not gv
        c = confusion_counts(p, g)
        if (c.tp, c.fp, c.tn, c.fn) != (tp, fp, tn, fn):
            failures.append("confusion")
            break
    return CheckResult("raster_oracles", not failures, ", ".join(failures) or "xor, stitch and counts agree",
                       time.perf_counter() - start)


def run_oracle_suite():
    checks = [check_reported_scores, check_loss_values, check_gradients, check_prompt_rules, check_raster_oracles]
    return [check() for check in checks]
