"""Training and fine-tuning: freezing schemes, the shared optimisation loop,
volume prediction and checkpoints."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import zipfile
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import Cohort, IntegrityError, PatientVolume, Zone, augment_arrays, draw_augmentation, stack_samples
from .loss import LossConfig, dice_loss_torch
from .metrics import evaluate_cohort
from .model import ModelConfig, ModifiedUNet, build_model, group_names, param_groups

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "dwiseg-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointVersionError(RuntimeError):
    pass


@dataclass(frozen=True)
class FineTuneScheme:
    name: str
    trainable_groups: frozenset[str]


def make_scheme(name: str, n_levels: int, freeze_bottleneck: bool = True) -> FineTuneScheme:
    """Named freezing scheme for a model with ``n_levels`` down/up blocks.

    ``WG``: decoder and head only. ``TZ``: additionally the shallowest
    ceil(L/2) down-blocks. The bottleneck stays frozen in both unless
    ``freeze_bottleneck`` is False.
    """
    ups = {f"Up-{i}" for i in range(1, n_levels + 1)} | {"Head"}
    if name in ("WG", "WG-scheme"):
        groups = ups
    elif name in ("TZ", "TZ-scheme"):
        groups = ups | {f"Down-{i}" for i in range(1, math.ceil(n_levels / 2) + 1)}
    elif name == "all-trainable":
        return FineTuneScheme(name, frozenset(group_names(n_levels)))
    elif name == "all-frozen":
        return FineTuneScheme(name, frozenset())
    else:
        raise ValueError(f"unknown fine-tune scheme {name!r}")
    if not freeze_bottleneck:
        groups = groups | {"Bottleneck"}
    return FineTuneScheme(name, frozenset(groups))


def scheme_for_zone(zone: Zone, n_levels: int, freeze_bottleneck: bool = True) -> FineTuneScheme:
    return make_scheme(zone, n_levels, freeze_bottleneck)


def apply_scheme(model: ModifiedUNet, scheme: FineTuneScheme) -> tuple[list[torch.nn.Parameter], list[torch.nn.Parameter]]:
    """Set ``requires_grad`` per group; returns (trainable, frozen) parameters."""
    groups = param_groups(model)
    unknown = set(scheme.trainable_groups) - set(groups)
    if unknown:
        raise KeyError(f"scheme {scheme.name!r} names unknown groups: {sorted(unknown)}")
    trainable, frozen = [], []
    for g, params in groups.items():
        on = g in scheme.trainable_groups
        for p in params.values():
            p.requires_grad_(on)
            (trainable if on else frozen).append(p)
    return trainable, frozen


@dataclass
class TrainConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    epochs: int = 25
    batch_size: int = 16
    seed: int = 0
    augment: bool = False
    # "constant" or "cosine" (anneals to zero over the run, stepped per epoch)
    lr_schedule: str = "constant"
    loss: LossConfig = field(default_factory=LossConfig)
    zone: Zone = "WG"

    def __post_init__(self) -> None:
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        self.betas = tuple(self.betas)
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.zone not in ("WG", "TZ"):
            raise ValueError(f"unknown zone {self.zone!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int | None = None

    def to_csv(self, path: str | Path) -> None:
        lines = ["epoch,train_loss,val_dsc"]
        for e in self.epochs:
            val = "" if e["val_dsc"] is None else repr(e["val_dsc"])
            lines.append(f"{e['epoch']},{e['train_loss']!r},{val}")
        Path(path).write_text("\n".join(lines) + "\n")


def _fit(
    model: ModifiedUNet,
    train: Cohort,
    val: Cohort | None,
    config: TrainConfig,
    scheme: FineTuneScheme,
) -> tuple[ModifiedUNet, TrainLog]:
    model = copy.deepcopy(model)
    history = TrainLog()
    if config.epochs == 0:
        return model, history
    images, masks = stack_samples(train, config.zone)
    n = len(images)
    if n == 0:
        raise ValueError("empty training set")
    dtype = next(model.parameters()).dtype
    trainable, _ = apply_scheme(model, scheme)
    opt = torch.optim.Adam(trainable, lr=config.lr, betas=config.betas) if trainable else None
    sched = None
    if opt is not None and config.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.epochs)
    gen = torch.Generator().manual_seed(config.seed)

    best_dsc, best_state = -math.inf, None
    for epoch in range(1, config.epochs + 1):
        model.train()
        rng = np.random.default_rng([config.seed, epoch])
        order = torch.randperm(n, generator=gen).numpy()
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb, yb = images[idx], masks[idx]
            if config.augment:
                pairs = [augment_arrays(x, [y], draw_augmentation(rng)) for x, y in zip(xb, yb)]
                xb = np.stack([p[0] for p in pairs])
                yb = np.stack([p[1][0] for p in pairs])
            x = torch.as_tensor(xb, dtype=dtype)[:, None]
            y = torch.as_tensor(yb, dtype=dtype)[:, None]
            loss = dice_loss_torch(model(x), y, config.loss)
            if opt is not None:
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
            total += loss.item() * len(idx)
        if sched is not None:
            sched.step()
        entry = {"epoch": epoch, "train_loss": total / n, "val_dsc": None}
        if val is not None:
            entry["val_dsc"] = validation_dsc(model, val, config.zone)
            if entry["val_dsc"] > best_dsc:
                best_dsc = entry["val_dsc"]
                best_state = copy.deepcopy(model.state_dict())
                history.best_epoch = epoch
        history.epochs.append(entry)
        log.debug("epoch %d loss %.4f val %s", epoch, entry["train_loss"], entry["val_dsc"])
    if best_state is not None:
        model.load_state_dict(best_state)
    elif val is None:
        history.best_epoch = config.epochs
    for p in model.parameters():
        p.requires_grad_(True)
    model.eval()
    return model, history


def validation_dsc(model: ModifiedUNet, cohort: Cohort, zone: Zone) -> float:
    preds = {p.patient_id: predict_volume(model, p)[1] for p in cohort.patients}
    gts = {p.patient_id: p.masks(zone) for p in cohort.patients}
    dsc = evaluate_cohort(preds, gts, zone).mean_dsc
    return -1.0 if math.isnan(dsc) else dsc


def train_source(
    model: ModifiedUNet, source_train: Cohort, source_val: Cohort | None, config: TrainConfig
) -> tuple[ModifiedUNet, TrainLog]:
    """Train every group on source data; returns the best-validation-epoch model."""
    scheme = make_scheme("all-trainable", model.config.n_levels)
    return _fit(model, source_train, source_val, config, scheme)


def finetune(
    pretrained: ModifiedUNet,
    target_subset: Cohort,
    scheme: FineTuneScheme,
    config: TrainConfig,
    val: Cohort | None = None,
) -> tuple[ModifiedUNet, TrainLog]:
    """Continue training ``pretrained`` on target data with ``scheme`` applied.

    Without ``val`` the parameters after the last epoch are returned.
    """
    if config.augment:
        raise ValueError("augmentation is not used when fine-tuning on the target domain")
    return _fit(pretrained, target_subset, val, config, scheme)


def train_scratch(
    model_config: ModelConfig,
    model_seed: int,
    target_subset: Cohort,
    config: TrainConfig,
    val: Cohort | None = None,
) -> tuple[ModifiedUNet, TrainLog]:
    model = build_model(model_config, model_seed)
    return finetune(model, target_subset, make_scheme("all-trainable", model_config.n_levels), config, val)


def predict_volume(
    model: ModifiedUNet,
    patient: PatientVolume,
    b_value_policy: str | float = "mean",
    threshold: float = 0.5,
    batch_size: int = 64,
) -> tuple[np.ndarray, np.ndarray]:
    """Soft (n_slices, H, W) masks and their binarisation.

    ``"mean"`` averages soft masks over b-values; a number selects that b-value.
    """
    n, nb, h, w = patient.images.shape
    if b_value_policy == "mean":
        cols = list(range(nb))
    else:
        try:
            cols = [list(patient.b_values).index(b_value_policy)]
        except ValueError:
            raise ValueError(f"b-value {b_value_policy!r} not in {patient.b_values}") from None
    flat = patient.images[:, cols].reshape(-1, h, w)
    dtype = next(model.parameters()).dtype
    model.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, len(flat), batch_size):
            x = torch.as_tensor(flat[start : start + batch_size], dtype=dtype)[:, None]
            outs.append(model(x)[:, 0].numpy())
    soft = np.concatenate(outs).reshape(n, len(cols), h, w)
    soft = soft[:, 0] if len(cols) == 1 else soft.mean(axis=1)
    return soft, (soft >= threshold).astype(np.uint8)


# --------------------------------------------------------------------------
# checkpoints


def _digest(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for key in sorted(arrays):
        h.update(key.encode())
        h.update(str(arrays[key].dtype).encode())
        h.update(str(arrays[key].shape).encode())
        h.update(arrays[key].tobytes())
    return h.hexdigest()


def save_checkpoint(model: ModifiedUNet, path: str | Path, extra: dict | None = None) -> Path:
    """Write weights as an ``.npz`` container with a JSON header.

    Arrays are keyed ``"<group>/<parameter name>"``; the header echoes the
    model config, format version and a SHA-256 over all tensors.
    """
    path = Path(path)
    arrays = {}
    for g, params in param_groups(model).items():
        for name, p in params.items():
            arrays[f"{g}/{name}"] = p.detach().cpu().contiguous().numpy().copy()
    header = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "dtype": str(next(model.parameters()).dtype).removeprefix("torch."),
        "sha256": _digest(arrays),
        "extra": extra or {},
    }
    with open(path, "wb") as f:
        np.savez(f, __header__=np.frombuffer(json.dumps(header, sort_keys=True).encode(), np.uint8), **arrays)
    return path


def read_checkpoint_header(path: str | Path) -> dict:
    try:
        with np.load(path, allow_pickle=False) as z:
            return json.loads(z["__header__"].tobytes())
    except (zipfile.BadZipFile, zlib.error, ValueError, KeyError, EOFError, OSError) as exc:
        raise IntegrityError(f"unreadable checkpoint {path}: {exc}") from None


def load_checkpoint(path: str | Path) -> ModifiedUNet:
    path = Path(path)
    if not path.is_file():
        raise IntegrityError(f"missing checkpoint: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(z["__header__"].tobytes())
            arrays = {k: z[k] for k in z.files if k != "__header__"}
    except (zipfile.BadZipFile, zlib.error, ValueError, KeyError, EOFError, OSError) as exc:
        raise IntegrityError(f"corrupted checkpoint {path}: {exc}") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise IntegrityError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {header.get('format_version')!r}, expected {CHECKPOINT_VERSION}"
        )
    if _digest(arrays) != header["sha256"]:
        raise IntegrityError(f"checksum mismatch in checkpoint {path}")
    model = build_model(ModelConfig(**header["model_config"]), 0, dtype=getattr(torch, header["dtype"]))
    state = {}
    for g, params in param_groups(model).items():
        for name in params:
            key = f"{g}/{name}"
            if key not in arrays:
                raise IntegrityError(f"{path}: missing tensor {key}")
            state[name] = torch.from_numpy(arrays[key])
    model.load_state_dict(state, strict=True)
    return model


def snapshot(model: ModifiedUNet, groups: Sequence[str] | None = None) -> dict[str, torch.Tensor]:
    """Detached copies of parameters, optionally restricted to some groups."""
    out = {}
    for g, params in param_groups(model).items():
        if groups is None or g in groups:
            out.update({f"{g}/{n}": p.detach().clone() for n, p in params.items()})
    return out
