"""Pruning, bridging, preset semantics, and compatibility accounting."""

import numpy as np
import pytest

from latentvox import adaptation as ad
from latentvox import net
from latentvox.classifier import TrainHyper, fresh_st_classifier
from latentvox.errors import ConfigError

# Reference-dims component totals (partial classifier 4 conv + 3 FC units).
CONV_UNITS = (1_327_872, 1_327_872, 1_902_080, 1_902_080)   # sum 6,459,904
FC_UNITS = (746_424, 746_424, 746_424)                      # sum 2,239,272
PARTIAL_UNITS = CONV_UNITS + FC_UNITS                       # sum 8,699,176
BRIDGE_UNITS = (442_496, 442_496)                           # sum 884,992


@pytest.fixture
def reference(rng):
    # Toy reference: strides (2,2,1) take grid 16 -> 8 -> 4 -> 4, so pruning
    # two conv units leaves a partial classifier that accepts (4,4,4,4).
    return fresh_st_classifier(3, grid=16, k=0, conv_channels=(8, 4, 4),
                               conv_strides=(2, 2, 1), fc_sizes=(16,),
                               resample_points=64, rng=rng)


def _latent_data(rng, n, classes):
    x = rng.standard_normal((n, 4, 4, 4, 4)).astype(np.float32)
    y = rng.integers(0, classes, n)
    x += y[:, None, None, None, None].astype(np.float32)
    return x, y


# ---------------------------------------------------------------------------
# bridge

def test_bridge_param_count_reference_dims():
    assert ad.bridge_param_count(128, 128, depth=2) == 884_992


def test_bridge_param_count_small():
    assert ad.bridge_param_count(32, 32, depth=2) == 2 * (27 * 32 * 32 + 32)


def test_bridge_depth_one_single_conv():
    layers = ad.bridge_layers(16, 8, depth=1)
    assert [l.kind for l in layers] == ["Conv3D"]
    assert ad.bridge_param_count(16, 8, depth=1) == 27 * 16 * 8 + 8


def test_bridge_structure():
    layers = ad.bridge_layers(32, 16, depth=2)
    assert [l.kind for l in layers] == ["Conv3D", "LeakyReLU", "Conv3D"]
    for l in layers:
        if l.kind == "Conv3D":
            assert l.stride == 1 and l.kernel == 3


def test_bridge_zero_depth_raises():
    with pytest.raises(ConfigError):
        ad.bridge_layers(8, 8, depth=0)


# ---------------------------------------------------------------------------
# pruning

def test_prune_zero_copies_everything(reference):
    partial, start = ad.prune(reference, 0)
    assert start == 0
    assert len(partial.layers) == len(reference.network.layers)
    assert partial.digest() == reference.network.digest()
    assert all(p == net.PROV_REFERENCE for p in partial.provenance)


def test_prune_drops_leading_conv_units(reference):
    partial, start = ad.prune(reference, 2)
    conv_units = [u for u in reference.units if u.kind == "conv"]
    assert start == conv_units[2].layer_indices[0]
    assert partial.layers[0].kind == "Conv3D"
    # Copied parameters are bit-equal to the reference tail.
    for i, p in enumerate(partial.params):
        ref_p = reference.network.params[start + i]
        for k in p:
            assert np.array_equal(p[k], ref_p[k])


def test_prune_all_convs_keeps_flatten_on(reference):
    partial, start = ad.prune(reference, 3)
    assert partial.layers[0].kind == "Flatten"
    assert reference.network.layers[start].kind == "Flatten"


def test_prune_out_of_range(reference):
    with pytest.raises(ConfigError):
        ad.prune(reference, 4)
    with pytest.raises(ConfigError):
        ad.prune(reference, -1)


# ---------------------------------------------------------------------------
# make_adapted / presets

def test_make_adapted_no_bridge_all_frozen(reference, rng):
    adapted = ad.make_adapted(reference, 2, "HighComp", (4, 4, 4, 4), rng)
    assert adapted.n_bridge_layers == 0
    assert all(adapted.network.frozen)
    assert adapted.latent_grid == 4 and adapted.latent_channels == 4
    assert adapted.reference_digest == reference.network.digest()
    names = [u.name for u in adapted.partial_units]
    assert [u.kind for u in adapted.units] == ["conv", "fc", "fc"]
    assert names == [u.name for u in adapted.units]


def test_make_adapted_bridge_fresh_and_partial_frozen(reference, rng):
    adapted = ad.make_adapted(reference, 2, "HighComp+Bridge", (4, 4, 4, 4), rng)
    nb = adapted.n_bridge_layers
    assert nb == 3  # Conv3D, LeakyReLU, Conv3D
    assert adapted.network.provenance[:nb] == [net.PROV_FRESH] * nb
    assert not any(adapted.network.frozen[:nb])
    assert all(adapted.network.frozen[nb:])
    assert len(adapted.bridge_units) == 2
    assert len(adapted.partial_units) == 3


def test_make_adapted_volume_mismatch_raises(reference, rng):
    with pytest.raises(ConfigError, match="latent volume"):
        ad.make_adapted(reference, 2, "HighComp", (4, 4, 4, 8), rng)
    with pytest.raises(ConfigError, match="rank 4"):
        ad.make_adapted(reference, 2, "HighComp+Bridge", (4, 4, 4), rng)


def test_make_adapted_unknown_preset(reference, rng):
    with pytest.raises(ConfigError, match="unknown preset"):
        ad.make_adapted(reference, 2, "UltraComp", (4, 4, 4, 4), rng)


def test_retrain_scope_per_preset(reference, rng):
    adapted = ad.make_adapted(reference, 2, "HighComp", (4, 4, 4, 4), rng)
    assert ad.retrain_scope_units(adapted, "HighComp") == []
    # One conv unit survives pruning here, so MediumComp's "first two" and
    # LowComp's "all" both reduce to that single unit.
    med = ad.retrain_scope_units(adapted, "MediumComp")
    low = ad.retrain_scope_units(adapted, "LowComp")
    assert [u.name for u in med] == [u.name for u in low]
    assert len(low) == 1 and low[0].kind == "conv"


# ---------------------------------------------------------------------------
# compatibility accounting: reference-dims regression

EXPECTED_TABLE = {
    # preset: (total, weights_pct, new_weights, arch_shared, arch_total, tier)
    "HighComp": (8_699_176, 100.0, 0, 7, 7, "High"),
    "MediumComp": (8_699_176, 69.47, 2_655_744, 7, 7, "Medium"),
    "LowComp": (8_699_176, 25.74, 6_459_904, 7, 7, "Low"),
    "HighComp+Bridge": (9_584_168, 90.77, 884_992, 7, 9, "High"),
    "MediumComp+Bridge": (9_584_168, 63.06, 3_540_736, 7, 9, "Medium"),
    "LowComp+Bridge": (9_584_168, 23.36, 7_344_896, 7, 9, "Low"),
}

FROZEN_FLAGS = {
    "HighComp": (True,) * 7,
    "MediumComp": (False, False) + (True,) * 5,
    "LowComp": (False,) * 4 + (True,) * 3,
}


@pytest.mark.parametrize("preset", ad.PRESET_ORDER)
def test_compat_summary_reference_dims(preset):
    base = preset.replace("+Bridge", "")
    bridge = BRIDGE_UNITS if preset.endswith("+Bridge") else ()
    row = ad.compat_summary(PARTIAL_UNITS, FROZEN_FLAGS[base], bridge)
    total, pct, new, shared, arch_total, tier = EXPECTED_TABLE[preset]
    assert row["total_params"] == total
    assert row["new_params"] == new
    assert row["reference_params"] == total - new
    assert abs(row["weights_pct"] - pct) < 0.005
    assert (row["arch_shared"], row["arch_total"]) == (shared, arch_total)
    assert row["tier"] == tier


def test_compat_summary_bridge_arch_pct():
    row = ad.compat_summary(PARTIAL_UNITS, FROZEN_FLAGS["HighComp"], BRIDGE_UNITS)
    assert abs(row["arch_pct"] - 100.0 * 7 / 9) < 1e-9


def test_compat_summary_misaligned_raises():
    with pytest.raises(ConfigError):
        ad.compat_summary((1, 2, 3), (True, False))


def test_compatibility_report_identity_and_monotonicity(reference, rng):
    pcts = {}
    for preset in ad.PRESET_ORDER:
        adapted = ad.make_adapted(reference, 2, preset, (4, 4, 4, 4), rng)
        scope = ad.retrain_scope_units(adapted, preset)
        for u in scope:
            for i in u.layer_indices:
                adapted.network.provenance[i] = net.PROV_RETRAINED
        rep = ad.compatibility_report(adapted)
        assert rep.reference_params + rep.new_params == rep.total_params
        pcts[preset] = rep.weights_pct
    assert pcts["HighComp"] == 100.0
    assert pcts["MediumComp"] < pcts["HighComp"]
    for base in ("HighComp", "MediumComp", "LowComp"):
        assert pcts[base + "+Bridge"] < pcts[base]


# ---------------------------------------------------------------------------
# adapt (training) semantics

def test_adapt_highcomp_is_untouched_reference_tail(reference, rng):
    x_tr, y_tr = _latent_data(rng, 12, 3)
    x_va, y_va = _latent_data(rng, 6, 3)
    hyper = TrainHyper(batch_size=6, lr=1e-2, max_epochs=2, stop_patience=2,
                       lr_patience=2)
    adapted, log = ad.adapt(reference, 2, "HighComp", 0, x_tr, y_tr, x_va,
                            y_va, hyper, hyper, seed=7)
    assert log.phases == []
    partial, start = ad.prune(reference, 2)
    for i, p in enumerate(adapted.network.params):
        for k in p:
            assert np.array_equal(p[k], reference.network.params[start + i][k])


def test_adapt_frozen_layers_bit_identical(reference, rng):
    x_tr, y_tr = _latent_data(rng, 18, 3)
    x_va, y_va = _latent_data(rng, 6, 3)
    hyper = TrainHyper(batch_size=6, lr=1e-2, max_epochs=2, stop_patience=2,
                       lr_patience=2)
    adapted, log = ad.adapt(reference, 2, "MediumComp+Bridge", 0, x_tr, y_tr,
                            x_va, y_va, hyper, hyper, seed=7)
    assert [p["phase"] for p in log.phases] == ["bridge", "finetune"]
    # The FC stack never enters a retrain scope: bit-equal to the reference.
    _, start = ad.prune(reference, 2)
    nb = adapted.n_bridge_layers
    for u in adapted.partial_units:
        if u.kind != "fc":
            continue
        for i in u.layer_indices:
            ref_p = reference.network.params[start + (i - nb)]
            for k in adapted.network.params[i]:
                assert np.array_equal(adapted.network.params[i][k], ref_p[k])


def test_adapt_marks_retrained_provenance(reference, rng):
    x_tr, y_tr = _latent_data(rng, 12, 3)
    x_va, y_va = _latent_data(rng, 6, 3)
    hyper = TrainHyper(batch_size=6, lr=1e-2, max_epochs=1, stop_patience=1,
                       lr_patience=1)
    adapted, _ = ad.adapt(reference, 2, "LowComp", 0, x_tr, y_tr, x_va, y_va,
                          hyper, hyper, seed=7)
    rep = ad.compatibility_report(adapted)
    by_name = {r.unit: r.provenance for r in rep.rows}
    assert by_name["conv1"] == net.PROV_RETRAINED
    assert by_name["fc1"] == net.PROV_REFERENCE


def test_parameter_budget_all_presets(reference, rng):
    for preset in ad.PRESET_ORDER:
        adapted = ad.make_adapted(reference, 2, preset, (4, 4, 4, 4), rng)
        ok, a, r = ad.parameter_budget_ok(adapted, reference)
        assert ok, f"{preset}: {a} >= {r}"


# ---------------------------------------------------------------------------
# sensitivity sweep

def test_sensitivity_sweep_rows(reference, rng):
    x_tr, y_tr = _latent_data(rng, 12, 3)
    x_va, y_va = _latent_data(rng, 6, 3)
    x_te, y_te = _latent_data(rng, 6, 3)
    hyper = TrainHyper(batch_size=6, lr=1e-2, max_epochs=1, stop_patience=1,
                       lr_patience=1)
    rows = ad.sensitivity_sweep(reference, 2, 0, x_tr, y_tr, x_va, y_va,
                                x_te, y_te, hyper, seed=3, ks=(3, 1, 0))
    assert [r["frozen_units"] for r in rows] == [3, 1, 0]
    assert rows[0]["weights_pct"] == 100.0      # everything frozen
    assert rows[-1]["weights_pct"] == 0.0       # everything retrained
    pcts = [r["weights_pct"] for r in rows]
    assert pcts == sorted(pcts, reverse=True)
