"""End-to-end experiment orchestration.

Produces, under `out/`:
  dataset/   PLY clouds + manifest.json
  models/    codec ladder (.lbcm), ST classifier and adapted classifiers (.lbnm)
  streams/   per-cloud LBPC bitstreams for the test split, one dir per lambda
  reports/   CSV tables, training logs (JSON), SVG plots

Every CSV row carries the provenance triple (config_hash, seed, build). All
steps are pure functions of (config, seed): no timestamps, no machine state.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict

import numpy as np

from . import adaptation, codec, net
from .classifier import (ClassifierModel, featurize, fresh_st_classifier,
                         predict_logits, train_network)
from .config import ExperimentConfig
from .datagen import Dataset, generate_dataset, load_dataset, save_dataset
from .errors import ConfigError
from .metrics import bd_quality_fit, psnr_d1, topk_accuracy
from .pcloud import PointCloudV, fps_resample, devoxelize, voxelize
from .seeding import derive_rng
from .svgplot import plot_xy

PIPELINE_ORIGINAL = "original"
PIPELINE_VOXELIZED = "voxelized"
PIPELINE_DECOMPRESSED = "decompressed"
PIPELINE_COMPRESSED = "compressed"


def preset_slug(preset: str) -> str:
    return preset.lower().replace("+bridge", "_bridge")


class Harness:
    def __init__(self, cfg: ExperimentConfig, out_dir):
        self.cfg = cfg
        self.out = str(out_dir)
        for sub in ("dataset", "models", "streams", "reports",
                    os.path.join("reports", "training"),
                    os.path.join("reports", "plots")):
            os.makedirs(os.path.join(self.out, sub), exist_ok=True)
        self._dataset = None
        self._voxelized = {}
        self._codecs = {}
        self._st = None
        self._latents = {}
        self._decoded = {}

    # -- paths ------------------------------------------------------------
    def path(self, *parts):
        return os.path.join(self.out, *parts)

    def codec_path(self, li):
        return self.path("models", f"codec_l{li}.lbcm")

    def st_path(self):
        return self.path("models", "classifier_st.lbnm")

    def adapted_path(self, preset, li):
        return self.path("models", f"adapted_{preset_slug(preset)}_l{li}.lbnm")

    def stream_path(self, li, cloud_idx):
        return self.path("streams", f"lambda{li}", f"cloud_{cloud_idx:05d}.lbpc")

    # -- shared artifacts ---------------------------------------------------
    @property
    def dataset(self) -> Dataset:
        if self._dataset is None:
            self._dataset = load_dataset(self.path("dataset"))
        return self._dataset

    def voxelized(self, idx) -> PointCloudV:
        if idx not in self._voxelized:
            self._voxelized[idx] = voxelize(self.dataset.points[idx],
                                            self.cfg.codec.bit_depth)
        return self._voxelized[idx]

    def codec_model(self, li) -> codec.CodecModel:
        if li not in self._codecs:
            self._codecs[li] = codec.CodecModel.load(self.codec_path(li))
        return self._codecs[li]

    def st_model(self) -> ClassifierModel:
        if self._st is None:
            self._st = ClassifierModel.load(self.st_path())
        return self._st

    def _csv(self, name, columns, rows):
        """Write a CSV with the provenance triple appended to every row."""
        prov = self.cfg.provenance()
        path = self.path("reports", name)
        with open(path, "w") as f:
            f.write(",".join(list(columns) + ["config_hash", "seed", "build"]) + "\n")
            for row in rows:
                cells = [_cell(row[c]) for c in columns]
                cells += [prov["config_hash"], str(prov["seed"]), prov["build"]]
                f.write(",".join(cells) + "\n")
        return path

    def _json(self, relpath, payload):
        path = self.path("reports", relpath)
        with open(path, "w") as f:
            json.dump(payload, f, indent=1, sort_keys=True)
            f.write("\n")
        return path

    # -- steps --------------------------------------------------------------
    def gen_data(self):
        ds = self.cfg.dataset
        data = generate_dataset(ds.num_classes, ds.clouds_per_class,
                                ds.points_per_cloud, self.cfg.seed, ds.jitter,
                                (ds.scale_min, ds.scale_max))
        save_dataset(data, self.path("dataset"))
        self._dataset = data
        self.cfg.save(self.path("reports", "run_config.json"))
        return data

    def train_codec(self):
        ds = self.dataset
        train_idx = ds.indices("train")
        clouds = [self.voxelized(i) for i in train_idx]
        models, logs = codec.train_codec(clouds, self.cfg.codec, self.cfg.seed)
        for li, model in enumerate(models):
            model.save(self.codec_path(li))
            self._codecs[li] = model
        self._json(os.path.join("training", "codec_ladder.json"), {
            "training_order": [
                {"lambda_index": lg.lambda_index, "lambda": lg.lambda_value,
                 "init_digest": lg.init_digest, "final_digest": lg.final_digest,
                 "epochs": lg.epochs}
                for lg in logs],
        })
        return models

    def _features_for(self, clouds_float, tag, rng_scope):
        clf = self.cfg.classifier
        feats = np.empty((len(clouds_float), clf.grid, clf.grid, clf.grid,
                          1 + 3 * clf.k), dtype=np.float32)
        for i, pts in enumerate(clouds_float):
            rng = derive_rng(self.cfg.seed, "fps-pad", rng_scope, tag, i)
            sampled = fps_resample(pts, clf.resample_points, rng)
            feats[i] = featurize(sampled, clf.grid, clf.k)
        return feats

    def train_classifier(self):
        ds = self.dataset
        clf = self.cfg.classifier
        tr, va = ds.indices("train"), ds.indices("val")
        x_train = self._features_for([ds.points[i] for i in tr], "train", "st")
        x_val = self._features_for([ds.points[i] for i in va], "val", "st")
        model = fresh_st_classifier(ds_num_classes(ds), clf.grid, clf.k,
                                    clf.conv_channels, clf.conv_strides,
                                    clf.fc_sizes, clf.resample_points,
                                    derive_rng(self.cfg.seed, "clf-init"))
        res = train_network(model.network, x_train, ds.labels[tr], x_val,
                            ds.labels[va], clf.train,
                            derive_rng(self.cfg.seed, "clf-train"))
        model.save(self.st_path())
        self._st = model
        self._json(os.path.join("training", "classifier_st.json"), {
            "best_epoch": res.best_epoch, "best_val_top1": res.best_val_top1,
            "epochs": res.epochs, "total_params": model.network.total_params()})
        return model

    def eval_rd(self):
        """Encode + decode the test split per ladder rung; write rd tables."""
        ds = self.dataset
        test_idx = ds.indices("test")
        n_lambdas = len(self.cfg.codec.lambdas)
        agg_rows, point_rows = [], []
        for li in range(n_lambdas):
            model = self.codec_model(li)
            os.makedirs(self.path("streams", f"lambda{li}"), exist_ok=True)
            bpps, psnrs, inf_count, clamped = [], [], 0, 0
            decoded_cache = self._decoded.setdefault(li, {})
            for idx in test_idx:
                pcv = self.voxelized(idx)
                stream = codec.encode_pc(pcv, model,
                                         orig_point_count=len(ds.points[idx]))
                with open(self.stream_path(li, idx), "wb") as f:
                    f.write(stream.data)
                bpp = stream.total_bits / stream.stats["point_count"]
                rec = codec.decode_pc(stream.data, model)
                decoded_cache[idx] = rec
                bpps.append(bpp)
                if len(rec) == 0:
                    psnrs.append(np.nan)
                else:
                    d1 = psnr_d1(pcv.coords, rec.coords, self.cfg.codec.bit_depth)
                    psnrs.append(d1.psnr if not d1.infinite else np.inf)
                    inf_count += int(d1.infinite)
                point_rows.append({"lambda_index": li,
                                   "lambda": model.lambda_value,
                                   "cloud": idx, "bpp": bpp,
                                   "psnr_d1": psnrs[-1],
                                   "decoded_points": len(rec)})
            finite = [p for p in psnrs if np.isfinite(p)]
            agg_rows.append({
                "lambda_index": li, "lambda": model.lambda_value,
                "mean_bpp": float(np.mean(bpps)),
                "mean_psnr_d1": float(np.mean(finite)) if finite else np.nan,
                "n_infinite": inf_count,
                "n_clouds": len(test_idx)})
        self._csv("rd_points.csv",
                  ["lambda_index", "lambda", "cloud", "bpp", "psnr_d1",
                   "decoded_points"], point_rows)
        self._csv("rd_table.csv",
                  ["lambda_index", "lambda", "mean_bpp", "mean_psnr_d1",
                   "n_infinite", "n_clouds"], agg_rows)
        plot_xy(self.path("reports", "plots", "rd_curve.svg"),
                [("codec", [r["mean_bpp"] for r in agg_rows],
                  [r["mean_psnr_d1"] for r in agg_rows])],
                "bits per input point", "PSNR D1 (dB)", "Rate-distortion, test split")
        return agg_rows

    def latents_for_split(self, li, split):
        """Dense global latent volumes (encoder side) for a dataset split."""
        key = (li, split)
        if key not in self._latents:
            ds = self.dataset
            idxs = ds.indices(split)
            model = self.codec_model(li)
            g = model.config.global_latent_grid
            c = model.config.latent_channels
            out = np.zeros((len(idxs), g, g, g, c), dtype=np.float32)
            for row, idx in enumerate(idxs):
                blocks = codec.extract_latents(self.voxelized(idx), model)
                out[row] = codec.assemble_latents(blocks, model.config)
            self._latents[key] = (out, ds.labels[idxs])
        return self._latents[key]

    def adapt(self):
        ds = self.dataset
        clf = self.cfg.classifier
        ad = self.cfg.adaptation
        reference = self.st_model()
        compat_rows = []
        unit_detail = {}
        for li in range(len(self.cfg.codec.lambdas)):
            x_tr, y_tr = self.latents_for_split(li, "train")
            x_va, y_va = self.latents_for_split(li, "val")
            for preset in ad.presets:
                adapted, log = adaptation.adapt(
                    reference, clf.pruning_units, preset, li, x_tr, y_tr,
                    x_va, y_va, ad.bridge, ad.finetune, self.cfg.seed)
                adapted.save(self.adapted_path(preset, li))
                report = adaptation.compatibility_report(adapted)
                ok, a_params, r_params = adaptation.parameter_budget_ok(
                    adapted, reference)
                if not ok:
                    raise ConfigError(
                        f"{preset}: adapted params {a_params} exceed ST {r_params}")
                compat_rows.append({
                    "preset": preset, "lambda_index": li,
                    "lambda": self.cfg.codec.lambdas[li],
                    "total_params": report.total_params,
                    "reference_params": report.reference_params,
                    "new_params": report.new_params,
                    "weights_pct": report.weights_pct,
                    "arch_shared": report.arch_shared,
                    "arch_total": report.arch_total,
                    "arch_pct": report.arch_pct,
                    "tier": report.tier,
                    "st_params": r_params,
                    "budget_ok": int(ok)})
                unit_detail[f"{preset}@l{li}"] = [asdict(r) for r in report.rows]
                self._json(os.path.join(
                    "training", f"adapt_{preset_slug(preset)}_l{li}.json"),
                    {"preset": preset, "lambda_index": li,
                     "phases": log.phases})
        self._csv("compat_table.csv",
                  ["preset", "lambda_index", "lambda", "total_params",
                   "reference_params", "new_params", "weights_pct",
                   "arch_shared", "arch_total", "arch_pct", "tier",
                   "st_params", "budget_ok"], compat_rows)
        self._json("compat_units.json", unit_detail)
        return compat_rows

    # -- pipelines ------------------------------------------------------------
    def _classify_clouds(self, clouds_float, labels, tag, scope):
        """ST-classifier Top-1/Top-5 percentages; None entries count as misses."""
        st = self.st_model()
        valid = [i for i, c in enumerate(clouds_float) if c is not None and len(c)]
        feats = self._features_for([clouds_float[i] for i in valid], tag, scope)
        logits = predict_logits(st.network, feats)
        k5 = min(5, st.num_classes)
        hits1 = hits5 = 0
        for row, i in enumerate(valid):
            order = np.argsort(-logits[row], kind="stable")
            hits1 += int(order[0] == labels[i])
            hits5 += int(labels[i] in order[:k5])
        n = len(clouds_float)
        return 100.0 * hits1 / n, 100.0 * hits5 / n, n - len(valid)

    def eval_pipelines(self):
        ds = self.dataset
        test_idx = ds.indices("test")
        labels = ds.labels[test_idx]
        n_lambdas = len(self.cfg.codec.lambdas)
        rows = []

        orig = [ds.points[i] for i in test_idx]
        t1, t5, failed = self._classify_clouds(orig, labels, "test", "orig")
        rows.append(_pipe_row(PIPELINE_ORIGINAL, "", -1, 0.0, "", t1, t5,
                              len(test_idx), failed))

        vox = [devoxelize(self.voxelized(i)) for i in test_idx]
        t1, t5, failed = self._classify_clouds(vox, labels, "test", "vox")
        rows.append(_pipe_row(PIPELINE_VOXELIZED, "", -1, 0.0, "", t1, t5,
                              len(test_idx), failed))

        bpp_by_lambda = {}
        for li in range(n_lambdas):
            model = self.codec_model(li)
            decoded, bpps = [], []
            cache = self._decoded.get(li, {})
            for idx in test_idx:
                data = self._read_stream(li, idx)
                bpps.append(len(data) * 8 /
                            codec.parse_bitstream(data)[0]["point_count"])
                rec = cache.get(idx)
                if rec is None:
                    rec = codec.decode_pc(data, model)
                decoded.append(devoxelize(rec) if len(rec) else None)
            bpp_by_lambda[li] = float(np.mean(bpps))
            t1, t5, failed = self._classify_clouds(decoded, labels, "test",
                                                   f"dec{li}")
            rows.append(_pipe_row(PIPELINE_DECOMPRESSED, "", li,
                                  model.lambda_value, bpp_by_lambda[li], t1, t5,
                                  len(test_idx), failed))

        # compressed domain: latents only — prove no decoder involvement
        before = codec.snapshot_counters()
        k5 = min(5, ds_num_classes(ds))
        for li in range(n_lambdas):
            x_te, y_te = self.latents_for_split(li, "test")
            for preset in self.cfg.adaptation.presets:
                adapted = adaptation.AdaptedClassifier.load(
                    self.adapted_path(preset, li))
                logits = predict_logits(adapted.network, x_te)
                t1 = topk_accuracy(logits, y_te, 1)
                t5 = topk_accuracy(logits, y_te, k5)
                rows.append(_pipe_row(PIPELINE_COMPRESSED, preset, li,
                                      self.cfg.codec.lambdas[li],
                                      bpp_by_lambda[li], t1, t5, len(y_te), 0))
        after = codec.snapshot_counters()
        decoder_deltas = {k: after[k] - before[k]
                          for k in ("synthesis_forward", "range_decode_symbols",
                                    "decode_pc")}
        if any(decoder_deltas.values()):
            raise ConfigError(f"compressed pipeline touched the decoder: {decoder_deltas}")
        self._json("instrumentation.json", {
            "compressed_pipeline_decoder_deltas": decoder_deltas})

        self._csv("classification_curves.csv",
                  ["pipeline", "preset", "lambda_index", "lambda", "mean_bpp",
                   "top1", "top5", "n_clouds", "n_failed"], rows)
        self._plot_pipelines(rows)
        return rows

    def _read_stream(self, li, idx):
        with open(self.stream_path(li, idx), "rb") as f:
            return f.read()

    def _plot_pipelines(self, rows):
        def curve(pred):
            pts = sorted([(r["mean_bpp"], r) for r in rows if pred(r)])
            return [p for p, _ in pts], [r["top1"] for _, r in pts]

        series = []
        xs, ys = curve(lambda r: r["pipeline"] == PIPELINE_DECOMPRESSED)
        if xs:
            series.append(("decompressed", xs, ys))
            span = (min(xs), max(xs))
            for name in (PIPELINE_ORIGINAL, PIPELINE_VOXELIZED):
                flat = [r["top1"] for r in rows if r["pipeline"] == name]
                if flat:
                    series.append((name, list(span), [flat[0], flat[0]]))
        for preset in self.cfg.adaptation.presets:
            xs, ys = curve(lambda r, p=preset: r["pipeline"] == PIPELINE_COMPRESSED
                           and r["preset"] == p)
            if xs:
                series.append((preset, xs, ys))
        plot_xy(self.path("reports", "plots", "top1_vs_rate.svg"), series,
                "bits per input point", "Top-1 accuracy",
                "Classification pipelines, test split")

    def bd_report(self):
        rows = _read_csv(self.path("reports", "classification_curves.csv"))
        dec = [r for r in rows if r["pipeline"] == PIPELINE_DECOMPRESSED]
        dec.sort(key=lambda r: float(r["lambda_index"]))
        ref_rates = [float(r["mean_bpp"]) for r in dec]
        ref_t1 = [float(r["top1"]) for r in dec]
        ref_t5 = [float(r["top5"]) for r in dec]
        out = []
        for preset in self.cfg.adaptation.presets:
            sub = [r for r in rows if r["pipeline"] == PIPELINE_COMPRESSED
                   and r["preset"] == preset]
            sub.sort(key=lambda r: float(r["lambda_index"]))
            rates = [float(r["mean_bpp"]) for r in sub]
            bd1, deg = bd_quality_fit(ref_rates, ref_t1, rates,
                                      [float(r["top1"]) for r in sub])
            bd5, _ = bd_quality_fit(ref_rates, ref_t5, rates,
                                    [float(r["top5"]) for r in sub])
            out.append({"preset": preset, "reference": PIPELINE_DECOMPRESSED,
                        "bd_top1": bd1, "bd_top5": bd5, "fit_degree": deg,
                        "n_points": len(sub)})
        self._csv("bd_table.csv",
                  ["preset", "reference", "bd_top1", "bd_top5", "fit_degree",
                   "n_points"], out)
        return out

    def sweep(self):
        ad = self.cfg.adaptation
        if not ad.sweep_enabled:
            return []
        li = ad.sweep_lambda_index
        x_tr, y_tr = self.latents_for_split(li, "train")
        x_va, y_va = self.latents_for_split(li, "val")
        x_te, y_te = self.latents_for_split(li, "test")
        rows = adaptation.sensitivity_sweep(
            self.st_model(), self.cfg.classifier.pruning_units, li,
            x_tr, y_tr, x_va, y_va, x_te, y_te, ad.sweep, self.cfg.seed)
        for r in rows:
            r["lambda_index"] = li
            r["lambda"] = self.cfg.codec.lambdas[li]
        self._csv("sweep_table.csv",
                  ["lambda_index", "lambda", "frozen_units", "unfrozen_units",
                   "weights_pct", "reference_params", "new_params", "top1",
                   "tier"], rows)
        return rows

    def run_all(self):
        self.gen_data()
        self.train_codec()
        self.train_classifier()
        self.eval_rd()
        self.adapt()
        self.eval_pipelines()
        self.bd_report()
        self.sweep()
        return self.out


def ds_num_classes(ds: Dataset) -> int:
    return len(ds.class_names)


def _cell(v) -> str:
    if isinstance(v, float):
        if np.isnan(v):
            return "nan"
        if np.isinf(v):
            return "inf"
        return f"{v:.6f}"
    return str(v)


def _pipe_row(pipeline, preset, li, lam, bpp, t1, t5, n, failed):
    return {"pipeline": pipeline, "preset": preset, "lambda_index": li,
            "lambda": lam, "mean_bpp": bpp, "top1": t1, "top5": t5,
            "n_clouds": n, "n_failed": failed}


def _read_csv(path):
    with open(path) as f:
        header = f.readline().strip().split(",")
        rows = []
        for line in f:
            cells = line.rstrip("\n").split(",")
            rows.append(dict(zip(header, cells)))
    return rows
