"""Taxonomy-driven adaptation of the ST classifier to the compressed domain.

Pruning keeps the reference layers from the volume-matching point on (the
Partial Classifier); an optional Bridge (two k=3 stride-1 convs with a
LeakyReLU between) adapts the latents first. Presets differ only in what gets
retrained:

    HighComp            nothing retrained, no bridge (reference weights as-is)
    MediumComp          first 2 partial conv units retrained
    LowComp             all partial conv units retrained (FC stack frozen)
    *+Bridge            same, plus a bridge trained first (partial frozen),
                        then fine-tuned together with the retrain scope

Compatibility accounting: architecture compatibility counts parameterized
units shared with the reference over total units (bridge units are new;
Flatten is uncounted); weights compatibility is the FromReference parameter
fraction. Tiers: High > 90%, Medium 30-90%, Low < 30%.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import net
from .classifier import (ClassifierModel, TrainHyper, Unit, freeze_units,
                         scan_units, train_network, unit_param_count)
from .errors import ConfigError
from .modelio import load_model, save_model
from .seeding import derive_rng

PRESETS = {
    "HighComp": (False, 0),
    "MediumComp": (False, 2),
    "LowComp": (False, None),   # None = all partial conv units
    "HighComp+Bridge": (True, 0),
    "MediumComp+Bridge": (True, 2),
    "LowComp+Bridge": (True, None),
}
PRESET_ORDER = ("HighComp", "MediumComp", "LowComp",
                "HighComp+Bridge", "MediumComp+Bridge", "LowComp+Bridge")


def bridge_layers(in_channels, out_channels, depth=2):
    """depth k=3 stride-1 convs with LeakyReLU strictly between them."""
    if depth < 1:
        raise ConfigError("bridge needs at least one conv")
    layers = []
    ch = in_channels
    for i in range(depth):
        layers.append(net.conv3d(ch, out_channels, kernel=3, stride=1))
        ch = out_channels
        if i < depth - 1:
            layers.append(net.leaky_relu())
    return layers


def bridge_param_count(in_channels, out_channels, depth=2) -> int:
    return sum(net.param_count(s) for s in bridge_layers(in_channels, out_channels, depth))


def prune(reference: ClassifierModel, pruning_units: int):
    """Drop the first `pruning_units` conv units; keep the rest verbatim.

    Returns (partial NetworkModel with FromReference provenance, start layer
    index in the reference). pruning_units=0 copies the whole network.
    """
    conv_units = [u for u in reference.units if u.kind == "conv"]
    if not 0 <= pruning_units <= len(conv_units):
        raise ConfigError(f"pruning_units must be in [0, {len(conv_units)}]")
    if pruning_units == 0:
        start = 0
    elif pruning_units < len(conv_units):
        start = conv_units[pruning_units].layer_indices[0]
    else:  # every conv unit dropped: keep from Flatten on
        start = conv_units[-1].layer_indices[-1] + 1
    partial = net.NetworkModel(
        layers=list(reference.network.layers[start:]),
        params=[{k: v.copy() for k, v in p.items()}
                for p in reference.network.params[start:]],
        frozen=[False] * (len(reference.network.layers) - start),
        provenance=[net.PROV_REFERENCE] * (len(reference.network.layers) - start),
    )
    return partial, start


@dataclass
class AdaptedClassifier:
    network: net.NetworkModel      # bridge layers (if any) + partial layers
    preset: str
    lambda_index: int
    n_bridge_layers: int
    prune_start: int               # first reference layer index kept
    latent_grid: int
    latent_channels: int
    num_classes: int
    reference_digest: str
    units: list = field(default_factory=list)

    def __post_init__(self):
        if not self.units:
            self.units = scan_units(self.network.layers)

    @property
    def bridge_units(self):
        return [u for u in self.units if u.layer_indices[0] < self.n_bridge_layers]

    @property
    def partial_units(self):
        return [u for u in self.units if u.layer_indices[0] >= self.n_bridge_layers]

    def meta(self) -> dict:
        return {"preset": self.preset, "lambda_index": self.lambda_index,
                "n_bridge_layers": self.n_bridge_layers,
                "prune_start": self.prune_start, "latent_grid": self.latent_grid,
                "latent_channels": self.latent_channels,
                "num_classes": self.num_classes,
                "reference_digest": self.reference_digest}

    def save(self, path):
        save_model(path, self.network, self.meta())

    @classmethod
    def load(cls, path) -> "AdaptedClassifier":
        network, m = load_model(path)
        return cls(network, m["preset"], m["lambda_index"], m["n_bridge_layers"],
                   m["prune_start"], m["latent_grid"], m["latent_channels"],
                   m["num_classes"], m["reference_digest"])


def make_adapted(reference: ClassifierModel, pruning_units: int, preset: str,
                 latent_shape, rng) -> AdaptedClassifier:
    """Assemble the (bridge +) partial network for a preset, all frozen.

    latent_shape is the dense global latent volume (G, G, G, C); the data-
    volume matching constraint requires the partial classifier's first layer
    to accept exactly this volume (directly or through the bridge).
    """
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; pick from {PRESET_ORDER}")
    use_bridge, _ = PRESETS[preset]
    partial, start = prune(reference, pruning_units)
    ref_shapes = net.infer_shapes(reference.network.layers,
                                  (reference.grid, reference.grid, reference.grid,
                                   reference.input_channels))
    partial_in = ref_shapes[start][0]
    latent_shape = tuple(latent_shape)
    if use_bridge:
        if len(latent_shape) != 4:
            raise ConfigError("latent volume must be rank 4 (D,H,W,C)")
        bl = bridge_layers(latent_shape[3], partial_in[3])
        bridge = net.init_network(bl, rng)
        combined = net.NetworkModel(
            layers=bridge.layers + partial.layers,
            params=bridge.params + partial.params,
            frozen=[False] * len(bridge.layers) + [True] * len(partial.layers),
            provenance=[net.PROV_FRESH] * len(bridge.layers) + partial.provenance,
        )
        n_bridge = len(bl)
    else:
        combined = partial
        combined.frozen = [True] * len(partial.layers)
        n_bridge = 0
    # data-volume matching: the assembled network must accept the latents
    if not n_bridge and latent_shape != partial_in:
        raise ConfigError(f"latent volume {latent_shape} != partial input {partial_in};"
                          " a bridge could resample it")
    shapes = net.infer_shapes(combined.layers, latent_shape)
    if n_bridge and shapes[n_bridge][0] != partial_in:
        raise ConfigError(f"bridge output {shapes[n_bridge][0]} != partial input {partial_in}")
    return AdaptedClassifier(combined, preset, -1, n_bridge, start,
                             latent_shape[0], latent_shape[3],
                             reference.num_classes, reference.network.digest())


def retrain_scope_units(adapted: AdaptedClassifier, preset: str):
    """Partial conv units unfrozen during fine-tuning for this preset."""
    _, n_convs = PRESETS[preset]
    partial_convs = [u for u in adapted.partial_units if u.kind == "conv"]
    if n_convs is None:
        return partial_convs
    return partial_convs[:n_convs]


@dataclass
class AdaptLog:
    preset: str
    lambda_index: int
    phases: list


def adapt(reference: ClassifierModel, pruning_units: int, preset: str,
          lambda_index: int, latents_train, y_train, latents_val, y_val,
          bridge_hyper: TrainHyper, ft_hyper: TrainHyper, seed):
    """Build and train one adapted classifier for one ladder rung."""
    latent_shape = latents_train.shape[1:]
    rng_init = derive_rng(seed, "adapt-init", preset, lambda_index)
    adapted = make_adapted(reference, pruning_units, preset, latent_shape, rng_init)
    adapted.lambda_index = lambda_index
    phases = []
    if adapted.n_bridge_layers:
        freeze_units(adapted.network, adapted.partial_units, True)
        rng = derive_rng(seed, "adapt-bridge", preset, lambda_index)
        res = train_network(adapted.network, latents_train, y_train,
                            latents_val, y_val, bridge_hyper, rng)
        phases.append({"phase": "bridge", "best_epoch": res.best_epoch,
                       "best_val_top1": res.best_val_top1, "epochs": res.epochs})
    scope = retrain_scope_units(adapted, preset)
    if scope:
        freeze_units(adapted.network, scope, False)
        rng = derive_rng(seed, "adapt-ft", preset, lambda_index)
        res = train_network(adapted.network, latents_train, y_train,
                            latents_val, y_val, ft_hyper, rng)
        phases.append({"phase": "finetune", "best_epoch": res.best_epoch,
                       "best_val_top1": res.best_val_top1, "epochs": res.epochs})
    net.mark_retrained(adapted.network)
    return adapted, AdaptLog(preset, lambda_index, phases)


# ---------------------------------------------------------------------------
# compatibility accounting

@dataclass
class CompatRow:
    unit: str
    kind: str
    params: int
    frozen: bool
    provenance: str


@dataclass
class CompatReport:
    preset: str
    rows: list
    total_params: int
    reference_params: int
    new_params: int
    weights_pct: float
    arch_shared: int
    arch_total: int
    arch_pct: float
    tier: str


def _tier(pct: float) -> str:
    if pct > 90.0:
        return "High"
    if pct < 30.0:
        return "Low"
    return "Medium"


def _unit_provenance(model: net.NetworkModel, unit: Unit) -> str:
    provs = {model.provenance[i] for i in unit.layer_indices
             if model.layers[i].kind in net.TRAINABLE_KEYS}
    for p in (net.PROV_FRESH, net.PROV_RETRAINED, net.PROV_REFERENCE):
        if p in provs:
            return p
    return net.PROV_REFERENCE


def compatibility_report(adapted: AdaptedClassifier) -> CompatReport:
    model = adapted.network
    rows = []
    ref_params = 0
    total = 0
    for u in adapted.units:
        params = unit_param_count(model, u)
        prov = _unit_provenance(model, u)
        frozen = all(model.frozen[i] for i in u.layer_indices
                     if model.layers[i].kind in net.TRAINABLE_KEYS)
        rows.append(CompatRow(u.name, u.kind, params, frozen, prov))
        total += params
        if prov == net.PROV_REFERENCE:
            ref_params += params
    shared = len(adapted.partial_units)
    arch_total = len(adapted.units)
    weights_pct = 100.0 * ref_params / total if total else 0.0
    return CompatReport(adapted.preset, rows, total, ref_params, total - ref_params,
                        weights_pct, shared, arch_total,
                        100.0 * shared / arch_total, _tier(weights_pct))


def compat_summary(partial_unit_params, frozen_flags, bridge_unit_params=()):
    """Pure accounting over unit parameter counts (no tensors involved).

    partial_unit_params: per-unit parameter counts of the partial classifier;
    frozen_flags: which of those units stay FromReference; bridge units are
    always new. Returns the Table-style row as a dict.
    """
    if len(partial_unit_params) != len(frozen_flags):
        raise ConfigError("unit count and frozen flags must align")
    total = int(sum(partial_unit_params) + sum(bridge_unit_params))
    ref = int(sum(p for p, f in zip(partial_unit_params, frozen_flags) if f))
    shared = len(partial_unit_params)
    arch_total = shared + len(bridge_unit_params)
    weights_pct = 100.0 * ref / total if total else 0.0
    return {
        "total_params": total,
        "reference_params": ref,
        "new_params": total - ref,
        "weights_pct": weights_pct,
        "arch_shared": shared,
        "arch_total": arch_total,
        "arch_pct": 100.0 * shared / arch_total,
        "tier": _tier(weights_pct),
    }


def parameter_budget_ok(adapted: AdaptedClassifier, reference: ClassifierModel):
    a = adapted.network.total_params()
    r = reference.network.total_params()
    return a < r, a, r


# ---------------------------------------------------------------------------
# sensitivity sweep

def sensitivity_sweep(reference: ClassifierModel, pruning_units: int,
                      lambda_index: int, latents_train, y_train, latents_val,
                      y_val, latents_test, y_test, hyper: TrainHyper, seed,
                      ks=None):
    """Freeze the last k partial units (output side) for k = n..0; train the
    rest; report weights compatibility and test Top-1 per row."""
    from .classifier import predict_logits
    from .metrics import topk_accuracy

    latent_shape = latents_train.shape[1:]
    probe = make_adapted(reference, pruning_units, "HighComp", latent_shape,
                         derive_rng(seed, "sweep-probe"))
    n_units = len(probe.units)
    if ks is None:
        ks = range(n_units, -1, -1)
    rows = []
    for k in ks:
        adapted = make_adapted(reference, pruning_units, "HighComp", latent_shape,
                               derive_rng(seed, "sweep-init", k))
        adapted.lambda_index = lambda_index
        unfrozen = adapted.units[:n_units - k]
        if unfrozen:
            freeze_units(adapted.network, unfrozen, False)
            rng = derive_rng(seed, "sweep-train", k)
            train_network(adapted.network, latents_train, y_train,
                          latents_val, y_val, hyper, rng)
        net.mark_retrained(adapted.network)
        report = compatibility_report(adapted)
        logits = predict_logits(adapted.network, latents_test)
        rows.append({"frozen_units": k, "unfrozen_units": n_units - k,
                     "weights_pct": report.weights_pct,
                     "reference_params": report.reference_params,
                     "new_params": report.new_params,
                     "top1": topk_accuracy(logits, y_test, 1),
                     "tier": report.tier})
    return rows
