"""MAE objective, Adam training loop with early stopping, and ablation variants."""

from __future__ import annotations

import copy
import csv
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from .dataset import (ForecastSample, Standardizer, SplitError, WindowSpec, chrono_split,
                      fit_standardizer)
from .errors import ConfigError, NumericError, ShapeError
from .fusion import FusionParts
from .net import DTYPE, Batch, ForecastNet, ModelConfig

# Canonical names first, CLI spellings second.
VARIANTS = ("Full", "w/o Inv", "DecOnly", "w/o AF", "DecOnly w/o AF")
VARIANT_ALIASES = {
    "full": "Full",
    "no-inv": "w/o Inv",
    "dec-only": "DecOnly",
    "no-af": "w/o AF",
    "dec-only-no-af": "DecOnly w/o AF",
}
GRAD_CLIP_NORM = 5.0


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 4
    max_epochs: int = 200
    patience: int = 10
    val_fraction_of_train: float = 0.1
    seed: int = 3407
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    shuffle: bool = False
    grad_clip: float | None = GRAD_CLIP_NORM

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if not 0 <= self.val_fraction_of_train < 1:
            raise ConfigError("val_fraction_of_train must be in [0, 1)")


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    wall_time: float = 0.0
    n_train: int = 0
    n_val: int = 0

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch - 1]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "best"])
            for i, (tr, va) in enumerate(zip(self.train_loss, self.val_loss), start=1):
                w.writerow([i, repr(tr), repr(va), int(i == self.best_epoch)])


def make_variant(name: str, spec: WindowSpec | None = None,
                 base: ModelConfig | None = None) -> ModelConfig:
    """Model config for one ablation row (``Full``, ``w/o Inv``, ``DecOnly``, ...)."""
    canonical = VARIANT_ALIASES.get(name, name)
    if canonical not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; expected one of "
                          f"{', '.join(VARIANTS)} or {', '.join(VARIANT_ALIASES)}")
    base = base or ModelConfig()
    if spec is not None:
        base = replace(base, spec=spec)
    return replace(
        base,
        use_inverse_embedding="w/o Inv" not in canonical,
        use_encoder="DecOnly" not in canonical,
        use_adaptive_fusion="w/o AF" not in canonical,
    )


def variant_name(cfg: ModelConfig) -> str:
    for name in VARIANTS:
        probe = make_variant(name, base=cfg)
        if probe == cfg:
            return name
    return "custom"


def mae_loss(yhat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over every (time step, channel) entry."""
    if yhat.shape != y.shape:
        raise ShapeError(f"prediction shape {tuple(yhat.shape)} != target {tuple(y.shape)}")
    return (yhat - y).abs().mean()


def collate(samples: Sequence[ForecastSample], standardizer: Standardizer) -> Batch:
    def t(arrs):
        return torch.from_numpy(np.stack(arrs).astype(np.float64))

    has_y = all(s.y is not None for s in samples)
    return Batch(
        x_enc=t([standardizer.apply_enc(s.x_enc) for s in samples]),
        x_enc_mark=t([s.x_enc_mark for s in samples]),
        x_dec=t([standardizer.apply_dec(s.x_dec) for s in samples]),
        x_dec_mark=t([s.x_dec_mark for s in samples]),
        x_dec_raw=t([s.x_dec for s in samples]),
        y=t([s.y for s in samples]) if has_y else None,
    )


def _slice(batch: Batch, idx) -> Batch:
    return Batch(*(None if v is None else v[idx] for v in batch))


@dataclass
class Forecaster:
    """A trained network together with the input statistics it was trained on."""

    model: ForecastNet
    standardizer: Standardizer
    seed: int = 3407

    @property
    def config(self) -> ModelConfig:
        return self.model.cfg

    def predict(self, samples: Sequence[ForecastSample]) -> np.ndarray:
        """Raw-count predictions ``(n, L_dec, C_out)``."""
        self.model.eval()
        with torch.no_grad():
            return self.model(collate(samples, self.standardizer)).numpy()

    def predict_parts(self, samples: Sequence[ForecastSample]) -> dict[str, np.ndarray]:
        """Prediction plus baseline/gate/smoothed terms when the fusion head is active."""
        self.model.eval()
        with torch.no_grad():
            out = self.model.parts(collate(samples, self.standardizer))
        if isinstance(out, FusionParts):
            return {k: v.numpy() for k, v in out._asdict().items()}
        return {"yhat": out.numpy()}


def _epoch_loss(model: ForecastNet, data: Batch) -> float:
    model.eval()
    with torch.no_grad():
        return float(mae_loss(model(data), data.y))


def train(model_cfg: ModelConfig, samples: Sequence[ForecastSample],
          cfg: TrainConfig = TrainConfig()) -> tuple[Forecaster, TrainReport]:
    """Fit one model; returns the best-validation-epoch parameters.

    Validation is the chronological tail of ``samples``.  When the set is too small
    to carve one, early stopping watches the training loss instead.
    """
    if not samples:
        raise ConfigError("no training samples")
    start = time.perf_counter()
    fit, val = list(samples), []
    if cfg.val_fraction_of_train > 0 and len(samples) >= 2:
        try:
            fit, val = chrono_split(samples, 1.0 - cfg.val_fraction_of_train)
        except SplitError:
            fit, val = list(samples), []
    standardizer = fit_standardizer(fit)
    fit_data = collate(fit, standardizer)
    val_data = collate(val, standardizer) if val else None

    model = ForecastNet(model_cfg, seed=cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                           betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)
    order_rng = np.random.default_rng(cfg.seed)
    report = TrainReport(n_train=len(fit), n_val=len(val))
    best, best_state = float("inf"), copy.deepcopy(model.state_dict())

    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        order = order_rng.permutation(len(fit)) if cfg.shuffle else np.arange(len(fit))
        total = 0.0
        for b, lo in enumerate(range(0, len(fit), cfg.batch_size)):
            batch = _slice(fit_data, torch.from_numpy(order[lo:lo + cfg.batch_size]))
            opt.zero_grad(set_to_none=True)
            loss = mae_loss(model(batch), batch.y)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            loss.backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            total += float(loss.detach()) * batch.y.shape[0]
        report.train_loss.append(total / len(fit))
        monitor = _epoch_loss(model, val_data) if val_data is not None else report.train_loss[-1]
        report.val_loss.append(monitor)
        report.stopped_epoch = epoch
        if monitor < best:
            best, report.best_epoch = monitor, epoch
            best_state = copy.deepcopy(model.state_dict())
        elif epoch - report.best_epoch >= cfg.patience:
            break

    model.load_state_dict(best_state)
    model.eval()
    report.wall_time = time.perf_counter() - start
    return Forecaster(model, standardizer, cfg.seed), report
