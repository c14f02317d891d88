"""Desk-scale optimization loop: decoupled-weight-decay Adam, a fixed-then-
cosine learning-rate schedule, seeded batch assembly, periodic held-out
evaluation, and bit-exact resume.

Per-iteration randomness derives from SeedSequence([seed, iteration]), so
resuming at iteration k replays exactly the batches a straight run would
have drawn.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import network, ops
from .autodiff import Tensor, backward, record
from .metrics import psnr_y, ssim_y
from .ops import l1_loss

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
WEIGHT_DECAY = 1e-4
CLIP_NORM = 1.0


class TrainingHalted(RuntimeError):
    """Raised when a non-finite loss or gradient stops the run."""


@dataclass
class LrSchedule:
    """Fixed rate for a leading phase, then cosine decay to a floor."""

    fixed_iters: int
    fixed_lr: float
    cosine_iters: int
    floor_lr: float

    def lr_at(self, iteration):
        if iteration < self.fixed_iters:
            return self.fixed_lr
        t = iteration - self.fixed_iters
        if t >= self.cosine_iters:
            return self.floor_lr
        return self.floor_lr + 0.5 * (self.fixed_lr - self.floor_lr) * (
            1.0 + math.cos(math.pi * t / self.cosine_iters))

    @classmethod
    def for_run(cls, iterations, base_lr, floor_lr=1e-6, fixed_fraction=0.25):
        fixed = int(round(iterations * fixed_fraction))
        return cls(fixed, base_lr, max(1, iterations - fixed), floor_lr)


def paper_schedule():
    """The published protocol's shape: 92K fixed at 1e-4, 208K cosine to 1e-6."""
    return LrSchedule(92_000, 1e-4, 208_000, 1e-6)


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params):
        return cls(0, {n: np.zeros(t.shape, np.float32) for n, t in params.items()},
                   {n: np.zeros(t.shape, np.float32) for n, t in params.items()})


def clip_global_norm(grads, max_norm):
    """Scale the gradient dict in place if its global norm exceeds max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.vdot(g, g))
    norm = math.sqrt(total)
    if max_norm and norm > max_norm:
        scale = np.float32(max_norm / norm)
        for g in grads.values():
            g *= scale
    return norm


def adamw_step(params, grads, state, lr, beta1=BETA1, beta2=BETA2,
               eps=ADAM_EPS, weight_decay=WEIGHT_DECAY):
    """One decoupled-weight-decay Adam update.

    Decay applies multiplicatively before the moment update; the moment
    step uses the classic one-pass form
        p -= lr * sqrt(1-b2^t)/(1-b1^t) * m / (sqrt(v) + eps)
    so a constant scalar gradient g moves the parameter by
    -lr * g / (|g| + eps / sqrt(1-b2^t)) on the first step.
    """
    for name, t in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise TrainingHalted(f"non-finite gradient in parameter {name!r}")
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * np.square(g)
    state.step += 1
    t_ = state.step
    step_size = np.float32(lr * math.sqrt(1.0 - beta2 ** t_) / (1.0 - beta1 ** t_))
    eps32 = np.float32(eps)
    for name, t in params.items():
        if name not in grads:
            continue
        if weight_decay:
            t.data *= np.float32(1.0 - lr * weight_decay)
        t.data -= step_size * state.m[name] / (np.sqrt(state.v[name]) + eps32)


@dataclass
class TrainSettings:
    iterations: int = 2000
    batch_size: int = 4
    patch_size: int = 32
    base_lr: float = 2e-4
    floor_lr: float = 1e-6
    fixed_fraction: float = 0.25
    eval_interval: int = 0          # 0: evaluate only at the end
    seed: int = 0
    weight_decay: float = WEIGHT_DECAY
    clip_norm: float = CLIP_NORM

    def schedule(self):
        return LrSchedule.for_run(self.iterations, self.base_lr,
                                  self.floor_lr, self.fixed_fraction)


@dataclass
class TrainRun:
    entries: list = field(default_factory=list)   # (iter, loss, lr, psnr?, ssim?)
    halted: str = ""

    def log(self, iteration, loss, lr, psnr=None, ssim=None):
        self.entries.append((iteration, loss, lr, psnr, ssim))

    def lines(self):
        out = []
        for it, loss, lr, p, s in self.entries:
            pc = f"{p:.4f}" if p is not None else "-"
            sc = f"{s:.6f}" if s is not None else "-"
            out.append(f"{it}\t{loss:.6f}\t{lr:.3e}\t{pc}\t{sc}")
        return out

    def write(self, path):
        Path(path).write_text("\n".join(self.lines()) + "\n")

    def eval_entries(self):
        return [(it, p, s) for it, _, _, p, s in self.entries if p is not None]


def _assemble_batch(pairs, images, settings, iteration):
    """Deterministic batch of (rainy, clean) patches as (B,3,P,P) arrays."""
    from . import dataset as ds
    rng = np.random.default_rng(np.random.SeedSequence([settings.seed, iteration]))
    idx = rng.integers(0, len(pairs), size=settings.batch_size)
    rs, cs = [], []
    for i in idx:
        rainy, clean = images[int(i)]
        rainy, clean = ds.crop_patch(rainy, clean, settings.patch_size, rng)
        rainy, clean = ds.random_flip(rainy, clean, rng)
        rs.append(rainy.transpose(2, 0, 1))
        cs.append(clean.transpose(2, 0, 1))
    return (np.ascontiguousarray(np.stack(rs), dtype=np.float32),
            np.ascontiguousarray(np.stack(cs), dtype=np.float32))


def evaluate(model, manifest, split="test"):
    """Mean Y-channel PSNR/SSIM of restored outputs against ground truth."""
    rows = []
    for entry in manifest.pairs(split):
        rainy, clean = manifest.load_pair(entry)
        restored = infer(model, rainy)
        rows.append((entry.rainy, psnr_y(restored, clean), ssim_y(restored, clean)))
    if not rows:
        raise ValueError(f"manifest has no {split!r} pairs")
    mp = float(np.mean([r[1] for r in rows]))
    ms = float(np.mean([r[2] for r in rows]))
    return mp, ms, rows


def infer(model, rainy_hwc):
    """Forward one (H,W,3) image in [0,1]; reflect-pads to multiples of 8
    and crops back, returns the clamped restored image."""
    h, w = rainy_hwc.shape[:2]
    ph = (-h) % 8
    pw = (-w) % 8
    x = rainy_hwc.transpose(2, 0, 1).astype(np.float32)
    if ph or pw:
        mode = "reflect" if min(h, w) > max(ph, pw) else "edge"
        x = np.pad(x, ((0, 0), (0, ph), (0, pw)), mode=mode)
    out = network.forward(model, Tensor(x[None]))
    restored = out.data[0, :, :h, :w].transpose(1, 2, 0)
    return np.clip(restored, 0.0, 1.0)


def train(model, manifest, settings, out_dir=None, optimizer_state=None,
          start_iteration=0, stop_iteration=None):
    """Run the optimization loop; returns (TrainRun, AdamWState).

    Checkpoints (latest and best-PSNR) and the run log are written under
    out_dir when given. The schedule spans settings.iterations; pass
    stop_iteration to pause a longer run early. Resuming: pass the loaded
    optimizer state and the stored iteration with the same settings; the
    batch and learning-rate streams continue exactly where they stopped.
    """
    pairs = manifest.pairs("train")
    if not pairs:
        raise ValueError("manifest has no train pairs")
    if not manifest.pairs("test"):
        raise ValueError("manifest has no test pairs")
    images = [manifest.load_pair(e) for e in pairs]
    sched = settings.schedule()
    state = optimizer_state or AdamWState.for_params(model.params)
    run = TrainRun()
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    model.set_requires_grad(True)
    name_of = {id(t): n for n, t in model.params.items()}
    best_psnr = -1.0
    stop = settings.iterations if stop_iteration is None else min(
        stop_iteration, settings.iterations)
    t0 = time.perf_counter()

    def save(tag, iteration):
        if out:
            network.save_checkpoint(model, out / f"{tag}.ckpt", iteration=iteration,
                                    optimizer=(state.step, state.m, state.v))

    try:
        for it in range(start_iteration, stop):
            rainy, clean = _assemble_batch(pairs, images, settings, it)
            lr = sched.lr_at(it)
            with record() as tape:
                pred = network.forward(model, Tensor(rainy))
                loss = l1_loss(pred, Tensor(clean))
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                run.halted = f"non-finite loss at iteration {it}"
                raise TrainingHalted(run.halted)
            grads = backward(tape, loss)
            named = {name_of[id(t)]: g for t, g in grads.items() if id(t) in name_of}
            del tape, grads
            clip_global_norm(named, settings.clip_norm)
            adamw_step(model.params, named, state, lr,
                       weight_decay=settings.weight_decay)
            evaluated = (settings.eval_interval
                         and (it + 1) % settings.eval_interval == 0)
            if evaluated:
                model.set_requires_grad(False)
                mp, ms, _ = evaluate(model, manifest)
                model.set_requires_grad(True)
                run.log(it, loss_val, lr, mp, ms)
                if mp > best_psnr:
                    best_psnr = mp
                    save("best", it + 1)
            else:
                run.log(it, loss_val, lr)
    except TrainingHalted:
        save("halted", state.step)
        if out:
            run.write(out / "train_log.tsv")
        model.set_requires_grad(False)
        return run, state
    model.set_requires_grad(False)
    save("final", stop)
    if out:
        run.write(out / "train_log.tsv")
        elapsed = time.perf_counter() - t0
        (out / "timing.txt").write_text(f"{elapsed:.1f} s\n")
    return run, state
