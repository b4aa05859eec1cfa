"""Voxel-grid shape classifier and the shared training loop.

The spatial-domain (ST) reference classifier rasterizes a resampled cloud onto
a G^3 grid with 1 + 3K channels (occupancy plus the in-cell offsets of the
first K points), then applies conv units (Conv3D + LeakyReLU + BatchNorm),
a Flatten, and FC units (FullyConnected + LeakyReLU, last one bare logits).

Units — one parameterized block each — are what pruning, freezing, and
compatibility accounting operate on; Flatten is structural and belongs to no
unit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import net
from .errors import ConfigError
from .losses import cross_entropy_grad
from .modelio import load_model, save_model
from .optim import Adam


def featurize(points, grid: int, k: int = 1) -> np.ndarray:
    """Rasterize float points in [-1,1]^3 to a (G,G,G,1+3K) float32 volume.

    Channel 0 is occupancy; channels 1+3r..3+3r hold the in-cell offset (in
    [0,1)^3) of the r-th point that landed in the cell, in input order.
    Offsets stay zero for cells with fewer than r+1 points.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ConfigError("cannot featurize an empty cloud")
    scaled = (pts + 1.0) * 0.5 * grid
    cell = np.clip(np.floor(scaled), 0, grid - 1).astype(np.int64)
    off = scaled - cell
    vol = np.zeros((grid * grid * grid, 1 + 3 * k), dtype=np.float32)
    flat = (cell[:, 0] * grid + cell[:, 1]) * grid + cell[:, 2]
    vol[flat, 0] = 1.0
    if k > 0:
        order = np.argsort(flat, kind="stable")
        sf = flat[order]
        first = np.r_[True, sf[1:] != sf[:-1]]
        group_start = np.maximum.accumulate(np.where(first, np.arange(len(sf)), 0))
        rank = np.arange(len(sf)) - group_start
        for r in range(k):
            sel = rank == r
            vol[sf[sel], 1 + 3 * r:4 + 3 * r] = off[order[sel]]
    return vol.reshape(grid, grid, grid, 1 + 3 * k)


# ---------------------------------------------------------------------------
# unit structure

@dataclass(frozen=True)
class Unit:
    name: str
    kind: str            # "conv" | "fc"
    layer_indices: tuple


def scan_units(layers) -> list:
    """Group layers into parameterized units; Flatten/activations attach."""
    units = []
    i = 0
    conv_n = fc_n = 0
    while i < len(layers):
        kind = layers[i].kind
        if kind in ("Conv3D", "FullyConnected"):
            idx = [i]
            j = i + 1
            while j < len(layers) and layers[j].kind in ("LeakyReLU", "BatchNorm", "Sigmoid"):
                idx.append(j)
                j += 1
            if kind == "Conv3D":
                conv_n += 1
                units.append(Unit(f"conv{conv_n}", "conv", tuple(idx)))
            else:
                fc_n += 1
                units.append(Unit(f"fc{fc_n}", "fc", tuple(idx)))
            i = j
        else:
            i += 1  # Flatten or a stray activation: structural, uncounted
    return units


def unit_param_count(model: net.NetworkModel, unit: Unit) -> int:
    return sum(net.param_count(model.layers[i]) for i in unit.layer_indices)


def freeze_units(model: net.NetworkModel, units, frozen=True):
    for u in units:
        for i in u.layer_indices:
            model.frozen[i] = frozen


# ---------------------------------------------------------------------------
# ST classifier

def build_st_layers(num_classes, grid=32, k=1, conv_channels=(64, 32, 16, 16, 16, 16),
                    conv_strides=(2, 2, 1, 1, 1, 1), fc_sizes=(256, 64)):
    if len(conv_channels) != len(conv_strides):
        raise ConfigError("conv_channels and conv_strides must align")
    in_ch = 1 + 3 * k
    side = grid
    layers = []
    for ch, s in zip(conv_channels, conv_strides):
        layers += [net.conv3d(in_ch, ch, kernel=3, stride=s),
                   net.leaky_relu(), net.batch_norm(ch)]
        in_ch = ch
        side = -(-side // s)
    layers.append(net.flatten())
    feat = side ** 3 * in_ch
    for width in fc_sizes:
        layers += [net.fully_connected(feat, width), net.leaky_relu()]
        feat = width
    layers.append(net.fully_connected(feat, num_classes))
    return layers


@dataclass
class ClassifierModel:
    network: net.NetworkModel
    grid: int
    k: int
    num_classes: int
    resample_points: int = 1024
    units: list = field(default_factory=list)

    def __post_init__(self):
        if not self.units:
            self.units = scan_units(self.network.layers)

    @property
    def input_channels(self) -> int:
        return 1 + 3 * self.k

    def meta(self) -> dict:
        return {"grid": self.grid, "k": self.k, "num_classes": self.num_classes,
                "resample_points": self.resample_points}

    def save(self, path):
        save_model(path, self.network, self.meta())

    @classmethod
    def load(cls, path) -> "ClassifierModel":
        network, meta = load_model(path)
        return cls(network, meta["grid"], meta["k"], meta["num_classes"],
                   meta.get("resample_points", 1024))


def fresh_st_classifier(num_classes, grid, k, conv_channels, conv_strides,
                        fc_sizes, resample_points, rng) -> ClassifierModel:
    layers = build_st_layers(num_classes, grid, k, conv_channels, conv_strides, fc_sizes)
    return ClassifierModel(net.init_network(layers, rng), grid, k, num_classes,
                           resample_points)


def predict_logits(network: net.NetworkModel, features: np.ndarray, batch=64):
    if len(features) == 0:
        return np.zeros((0, network.layers[-1].out_channels), dtype=np.float32)
    outs = []
    for start in range(0, len(features), batch):
        outs.append(net.forward(network, features[start:start + batch]))
    return np.concatenate(outs)


# ---------------------------------------------------------------------------
# shared supervised trainer

@dataclass
class TrainHyper:
    batch_size: int = 32
    lr: float = 1e-4
    max_epochs: int = 30
    stop_patience: int = 15
    lr_patience: int = 10
    lr_factor: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999


@dataclass
class TrainResult:
    best_epoch: int
    best_val_top1: float
    epochs: list


def _snapshot_unfrozen(model: net.NetworkModel):
    out = []
    for i, p in enumerate(model.params):
        if not model.frozen[i]:
            out.append((i, {k: v.copy() for k, v in p.items()}))
    return out


def _restore(model: net.NetworkModel, snap):
    for i, p in snap:
        for k, v in p.items():
            model.params[i][k][...] = v


def train_network(model: net.NetworkModel, x_train, y_train, x_val, y_val,
                  hyper: TrainHyper, rng, eval_batch=64) -> TrainResult:
    """Adam + cross-entropy with val-accuracy early stopping and lr halving.

    Frozen layers are excluded from the optimizer and from best-weight
    restoration, so their parameters are bit-identical before and after.
    """
    from .metrics import topk_accuracy

    opt = Adam(lr=hyper.lr, beta1=hyper.beta1, beta2=hyper.beta2)
    opt.register_model(model)
    n = len(x_train)
    bs = min(hyper.batch_size, n)
    best_top1 = -1.0
    best_epoch = -1
    best_snap = None
    bad_epochs = 0
    lr_bad = 0
    rows = []
    for epoch in range(hyper.max_epochs):
        perm = rng.permutation(n)
        tot = 0.0
        nb = 0
        for start in range(0, n - bs + 1, bs):
            idx = perm[start:start + bs]
            logits, caches = net.forward(model, x_train[idx], train=True)
            loss, d_logits = cross_entropy_grad(logits, y_train[idx])
            grads, _ = net.backward(model, caches, d_logits)
            opt.step(opt.model_grads(model, grads))
            tot += loss
            nb += 1
        val_logits = predict_logits(model, x_val, eval_batch)
        val_top1 = topk_accuracy(val_logits, y_val, 1)
        rows.append({"epoch": epoch, "train_loss": tot / max(nb, 1),
                     "val_top1": val_top1, "lr": opt.lr})
        if val_top1 > best_top1 + 1e-12:
            best_top1 = val_top1
            best_epoch = epoch
            best_snap = _snapshot_unfrozen(model)
            bad_epochs = 0
            lr_bad = 0
        else:
            bad_epochs += 1
            lr_bad += 1
            if lr_bad >= hyper.lr_patience:
                opt.lr *= hyper.lr_factor
                lr_bad = 0
            if bad_epochs >= hyper.stop_patience:
                break
    if best_snap is not None:
        _restore(model, best_snap)
    return TrainResult(best_epoch, best_top1, rows)
