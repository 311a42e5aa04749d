"""Training loop: episode sampling, gradient aggregation, Adam, checkpoints and resume."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import container
from .autodiff.optim import AdamState, adam_step
from .data import SequenceRecord, subsample_window
from .losses import LossLog, NonFiniteLoss, total_loss
from .model import RunConfig, SceneModel, reparameterize

log = logging.getLogger(__name__)

MAX_CONSECUTIVE_FAILURES = 10


class TrainingAborted(FloatingPointError):
    """Too many consecutive non-finite steps."""


class ConfigMismatch(ValueError):
    """Model configuration does not fit the dataset."""


@dataclass
class Episode:
    frames: np.ndarray  # (B, L, H, W, 3)
    cameras: list
    noise: np.ndarray  # (B, d)
    render_frames: list[int]

    def split(self, parts: int) -> list[Episode]:
        n = len(self.cameras) // parts
        return [
            Episode(self.frames[i * n : (i + 1) * n], self.cameras[i * n : (i + 1) * n], self.noise[i * n : (i + 1) * n],
                    self.render_frames)
            for i in range(parts)
        ]


def check_compatible(run: RunConfig, records: Sequence[SequenceRecord]) -> None:
    m = run.model
    if not records:
        raise ConfigMismatch("no training sequences")
    r = records[0]
    L, H, W = r.frames.shape[:3]
    if (H, W) != (m.height, m.width):
        raise ConfigMismatch(f"model renders {m.height}x{m.width} but the dataset has {H}x{W} frames")
    if m.frames > L:
        raise ConfigMismatch(f"model window of {m.frames} frames exceeds the {L}-frame sequences")
    if run.render_frames is not None and not 1 <= run.render_frames <= m.frames:
        raise ConfigMismatch(f"render_frames must lie in [1, {m.frames}]")
    fov = 2 * math.degrees(math.atan(H / 2 / r.cameras.intrinsics[1]))
    if abs(fov - m.fov_y) > 1e-6:
        raise ConfigMismatch(f"model field of view {m.fov_y} differs from the dataset's {fov:.4f}")


def sample_episode(run: RunConfig, records: Sequence[SequenceRecord], step: int) -> Episode:
    """Every random choice of one optimisation step, drawn from a stream keyed by (seed, step)."""
    rng = np.random.default_rng([run.seed, step, 1])
    m = run.model
    n = run.batch_size * run.accumulate
    idx = rng.choice(len(records), size=n, replace=len(records) < n)
    windows = []
    for i in idx:
        r = records[i]
        start = int(rng.integers(0, r.length - m.frames + 1))
        windows.append(subsample_window(r, start, m.frames))
    noise = rng.standard_normal((n, m.d))
    if run.render_frames is None or run.render_frames >= m.frames:
        frames = list(range(m.frames))
    else:
        frames = sorted(rng.choice(m.frames, size=run.render_frames, replace=False).tolist())
    return Episode(np.stack([w.frames for w in windows]), [w.cameras for w in windows], noise, frames)


def episode_loss(model: SceneModel, episode: Episode, run: RunConfig, step: int):
    """Forward pass for one micro-batch; returns the LossBreakdown."""
    dtype = ad.get_default_dtype()
    phi = model.encode_camera(episode.cameras)
    x = episode.frames.astype(dtype)
    post = model.encode_video(x, phi)
    z = reparameterize(post, episode.noise.astype(dtype))
    params = model.decode(z, phi)
    render = model.render(params, episode.cameras, episode.render_frames)
    target = x[:, episode.render_frames]
    return total_loss(target, render, post, params, model, run.loss, step, run.steps)


def aggregated_gradients(model: SceneModel, episode: Episode, run: RunConfig, step: int):
    """Mean gradient over ``run.accumulate`` micro-batches, plus averaged loss values."""
    params = list(model.store)
    grads = [np.zeros_like(p.data) for p in params]
    values: dict[str, float] = {}
    parts = episode.split(run.accumulate)
    for part in parts:
        for p in params:
            p.grad = None
        loss = episode_loss(model, part, run, step)
        loss.total.backward()
        for g, p in zip(grads, params):
            if p.grad is not None:
                g += p.grad
        for k, v in loss.values().items():
            values[k] = values.get(k, 0.0) + v / len(parts)
    for g in grads:
        g /= len(parts)
    for p in params:
        p.grad = None
    values["beta"] = run.loss.beta(step, run.steps)
    return grads, values


class Trainer:
    """Owns the model, optimiser state and output directory of one run."""

    def __init__(self, run: RunConfig, records: Sequence[SequenceRecord], out=None, model: SceneModel | None = None):
        check_compatible(run, records)
        self.run = run
        self.records = list(records)
        self.out = Path(out or run.out)
        self.out.mkdir(parents=True, exist_ok=True)
        run.save(self.out / "config.json")
        self.model = model or SceneModel(run.model, seed=run.seed)
        self.adam = AdamState()
        self.step = 0
        self.failures = 0
        self.skipped: list[int] = []
        self.log = LossLog(self.out / "loss.csv")

    # -- checkpoints --------------------------------------------------------

    def checkpoint_dir(self, step: int) -> Path:
        return self.out / "checkpoints" / f"step_{step:07d}"

    def save_checkpoint(self) -> Path:
        d = self.checkpoint_dir(self.step)
        self.model.save(d, extra={"step": self.step, "run": self.run.to_dict()})
        opt = d / "adam"
        opt.mkdir(parents=True, exist_ok=True)
        for i, (m, v) in enumerate(zip(self.adam.m, self.adam.v)):
            container.save(opt / f"m_{i:04d}.o3vt", m)
            container.save(opt / f"v_{i:04d}.o3vt", v)
        (opt / "state.json").write_text(json.dumps({"step": self.adam.step, "slots": len(self.adam.m)}))
        (self.out / "latest").write_text(d.name + "\n")
        return d

    @classmethod
    def resume(cls, out, records: Sequence[SequenceRecord], run: RunConfig | None = None) -> Trainer:
        """Continue the run in ``out`` from its latest checkpoint; ``run`` may raise the step budget."""
        out = Path(out)
        latest = out / "latest"
        if not latest.exists():
            raise FileNotFoundError(f"no checkpoint to resume in {out}")
        d = out / "checkpoints" / latest.read_text().strip()
        model, meta = SceneModel.load(d)
        saved = RunConfig.from_dict(meta["run"])
        if run is not None and run.model != saved.model:
            raise ConfigMismatch("resumed run changes the model configuration")
        run = run or saved
        trainer = cls(run, records, out, model=model)
        trainer.step = int(meta["step"])
        state = json.loads((d / "adam" / "state.json").read_text())
        trainer.adam = AdamState(
            state["step"],
            [container.load(d / "adam" / f"m_{i:04d}.o3vt") for i in range(state["slots"])],
            [container.load(d / "adam" / f"v_{i:04d}.o3vt") for i in range(state["slots"])],
        )
        # drop log rows written after the checkpoint so numbering continues cleanly
        rows = [r for r in LossLog.read(trainer.log.path) if r["step"] <= trainer.step]
        trainer.log.path.unlink()
        trainer.log = LossLog(trainer.log.path)
        for r in rows:
            trainer.log.append(int(r["step"]), {k: v for k, v in r.items() if k != "step"})
        return trainer

    # -- optimisation -------------------------------------------------------

    def train_step(self) -> dict[str, float] | None:
        """One aggregated Adam update; None when the step was skipped as non-finite."""
        step = self.step + 1
        episode = sample_episode(self.run, self.records, step)
        try:
            grads, values = aggregated_gradients(self.model, episode, self.run, step)
            ok = adam_step(list(self.model.store), grads, self.adam, self.run.learning_rate)
            if not ok:
                raise NonFiniteLoss("gradient", math.nan)
        except NonFiniteLoss as err:
            self.failures += 1
            self.skipped.append(step)
            for p in self.model.store:
                p.grad = None
            log.warning("step %d skipped: %s (%d consecutive)", step, err, self.failures)
            self.step = step
            if self.failures >= MAX_CONSECUTIVE_FAILURES:
                raise TrainingAborted(
                    f"{self.failures} consecutive non-finite steps ending at step {step}; last: {err}; "
                    f"skipped steps {self.skipped[-MAX_CONSECUTIVE_FAILURES:]}"
                ) from err
            return None
        self.failures = 0
        self.step = step
        return values

    def fit(self, steps: int | None = None, progress=None) -> Path | None:
        """Train until ``steps`` (default ``run.steps``) total steps; returns the last checkpoint."""
        target = self.run.steps if steps is None else steps
        last = None
        t0 = time.perf_counter()
        while self.step < target:
            values = self.train_step()
            if values is not None and (self.step % self.run.log_every == 0 or self.step == 1):
                self.log.append(self.step, values)
                if progress:
                    progress(self.step, values, time.perf_counter() - t0)
            if self.step % self.run.checkpoint_every == 0 or self.step == target:
                last = self.save_checkpoint()
        return last
