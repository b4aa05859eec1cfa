"""Learned block-based voxel geometry codec.

Pipeline: voxelize -> optional SF down-sampling -> fixed BS block partition ->
per-block analysis transform (strided 3D convs) -> quantization (uniform noise
in training, round-half-away-from-zero at inference) -> per-channel Laplacian
entropy model -> range-coded bitstream. Decoding mirrors with an upsampling
synthesis transform producing occupancy logits, thresholded at
logit(decode_threshold).

Training minimizes FocalLoss + lambda * bits / occupied_voxels per batch; the
lambda ladder is trained sequentially from the highest-rate (lowest lambda)
rung, each next model initialized from the previous one's final weights.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import net
from .errors import (ConfigError, CrcMismatchError, FormatError,
                     TruncatedStreamError, UnsupportedVersionError)
from .losses import focal_loss_logits_grad
from .modelio import ByteReader, ByteWriter, model_bytes, model_from_bytes
from .optim import Adam
from .pcloud import (PointCloudV, downsample, merge, occupancy_volume,
                     partition, upsample_coords, volume_to_coords)
from .rangecoder import PRECISION, CdfTable, RangeDecoder, RangeEncoder
from .seeding import derive_rng

LATENT_MIN = -64
LATENT_MAX = 63
RATE_FLOOR = 2.0 ** -PRECISION
LOG2E = float(np.log2(np.e))

MAGIC = b"LBPC"
VERSION = 1
CODEC_MAGIC = b"LBCM"

# instrumentation: pipelines assert on these to prove the compressed-domain
# path never touches the decoder
COUNTERS = {"analysis_forward": 0, "synthesis_forward": 0,
            "range_decode_symbols": 0, "encode_pc": 0, "decode_pc": 0}


def reset_counters():
    for k in COUNTERS:
        COUNTERS[k] = 0


def snapshot_counters():
    return dict(COUNTERS)


@dataclass(frozen=True)
class CodecConfig:
    bit_depth: int = 6
    block_size: int = 32
    sample_factor: int = 1
    latent_channels: int = 32
    analysis_channels: tuple = (8, 16)
    synthesis_channels: tuple = (16, 8, 4)
    lambdas: tuple = (1e-2, 1e-3, 2.5e-4)
    epochs: int = 16
    first_rung_epochs: int = 36
    batch_blocks: int = 8
    max_train_blocks: int = 128
    lr: float = 1.5e-2
    lr_decay: float = 0.92
    alpha: float = 0.9
    gamma: float = 2.0
    decode_threshold: float = 0.5
    decode_mode: str = "threshold"  # or "topn": per-block top-count selection

    @property
    def downsample_steps(self) -> int:
        return len(self.analysis_channels) + 1

    @property
    def latent_grid(self) -> int:
        g = self.block_size >> self.downsample_steps
        if g << self.downsample_steps != self.block_size:
            raise ConfigError("block_size must be divisible by 2^downsample_steps")
        return g

    @property
    def effective_bit_depth(self) -> int:
        return self.bit_depth - (self.sample_factor.bit_length() - 1)

    @property
    def blocks_per_axis(self) -> int:
        return max(1, (1 << self.effective_bit_depth) // self.block_size)

    @property
    def global_latent_grid(self) -> int:
        return self.blocks_per_axis * self.latent_grid

    def to_dict(self):
        return {
            "bit_depth": self.bit_depth, "block_size": self.block_size,
            "sample_factor": self.sample_factor,
            "latent_channels": self.latent_channels,
            "analysis_channels": list(self.analysis_channels),
            "synthesis_channels": list(self.synthesis_channels),
            "lambdas": list(self.lambdas), "epochs": self.epochs,
            "first_rung_epochs": self.first_rung_epochs,
            "batch_blocks": self.batch_blocks,
            "max_train_blocks": self.max_train_blocks, "lr": self.lr,
            "lr_decay": self.lr_decay,
            "alpha": self.alpha, "gamma": self.gamma,
            "decode_threshold": self.decode_threshold,
            "decode_mode": self.decode_mode,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("analysis_channels", "synthesis_channels", "lambdas"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def build_analysis_layers(cfg: CodecConfig):
    chans = (1,) + tuple(cfg.analysis_channels) + (cfg.latent_channels,)
    layers = []
    for i in range(len(chans) - 1):
        layers.append(net.conv3d(chans[i], chans[i + 1], kernel=3, stride=2))
        if i < len(chans) - 2:
            layers.append(net.leaky_relu())
    return layers


def build_synthesis_layers(cfg: CodecConfig):
    """Latents -> occupancy logits (the sigmoid lives in the focal loss)."""
    chans = (cfg.latent_channels,) + tuple(cfg.synthesis_channels)
    layers = []
    for i in range(len(chans) - 1):
        layers.append(net.conv3d(chans[i], chans[i + 1], kernel=3, stride=1))
        layers.append(net.leaky_relu())
        layers.append(net.upsample3d(2))
    layers.append(net.conv3d(chans[-1], 1, kernel=3, stride=1))
    return layers


# ---------------------------------------------------------------------------
# Laplacian factorized entropy model

def laplace_interval_prob(y, mu, b):
    """p(k) = F(y+1/2) - F(y-1/2) for Laplace(mu, b), numerically stable."""
    z_lo = (y - 0.5 - mu) / b
    z_hi = (y + 0.5 - mu) / b
    shrink = -np.expm1(-1.0 / b)  # 1 - e^(-1/b) > 0
    p_below = 0.5 * np.exp(np.minimum(z_hi, 0.0)) * shrink        # z_hi <= 0
    p_above = 0.5 * np.exp(-np.maximum(z_lo, 0.0)) * shrink       # z_lo >= 0
    # straddling case: 1 - 0.5 e^{-z_hi} - 0.5 e^{z_lo}; the clamps only
    # affect elements where another branch is selected (overflow guard)
    p_strad = (1.0 - 0.5 * np.exp(-np.maximum(z_hi, 0.0))
               - 0.5 * np.exp(np.minimum(z_lo, 0.0)))
    return np.where(z_hi <= 0, p_below, np.where(z_lo >= 0, p_above, p_strad))


def _laplace_pdf(x, mu, b):
    return np.exp(-np.abs(x - mu) / b) / (2.0 * b)


@dataclass
class LaplaceEntropy:
    """Per-channel Laplacian prior over quantized latents."""

    mu: np.ndarray      # (C,)
    log_b: np.ndarray   # (C,)

    @classmethod
    def fresh(cls, channels, dtype=np.float32):
        return cls(np.zeros(channels, dtype=dtype),
                   np.full(channels, np.log(0.5), dtype=dtype))

    def copy(self):
        return LaplaceEntropy(self.mu.copy(), self.log_b.copy())

    def astype(self, dtype):
        return LaplaceEntropy(self.mu.astype(dtype), self.log_b.astype(dtype))

    def bits_elementwise(self, y):
        """-log2 max(p, 2^-16) per element; y shaped (..., C)."""
        b = np.exp(self.log_b.astype(np.float64))
        p = laplace_interval_prob(np.asarray(y, dtype=np.float64), self.mu.astype(np.float64), b)
        return -np.log2(np.maximum(p, RATE_FLOOR))

    def bits_total(self, y) -> float:
        return float(self.bits_elementwise(y).sum())

    def bits_and_grads(self, y):
        """(total bits, dbits/dy, dbits/dmu (C,), dbits/dlog_b (C,))."""
        y = np.asarray(y)
        mu = self.mu.astype(y.dtype)
        b = np.exp(self.log_b.astype(y.dtype))
        p = laplace_interval_prob(y, mu, b)
        floored = p < RATE_FLOOR
        p_eff = np.maximum(p, RATE_FLOOR)
        bits = float(-np.log2(p_eff).sum())
        f_hi = _laplace_pdf(y + 0.5, mu, b)
        f_lo = _laplace_pdf(y - 0.5, mu, b)
        scale = np.where(floored, 0.0, -LOG2E / p_eff)
        dp_dy = f_hi - f_lo
        d_dy = scale * dp_dy
        d_dmu_elem = -d_dy
        dp_db = -((y + 0.5 - mu) * f_hi - (y - 0.5 - mu) * f_lo) / b
        d_db_elem = scale * dp_db
        axes = tuple(range(y.ndim - 1))
        d_mu = d_dmu_elem.sum(axis=axes)
        d_logb = (d_db_elem * b).sum(axis=axes)
        return bits, d_dy, d_mu, d_logb

    def cdf_tables(self):
        """Deterministic per-channel 16-bit tables over [-64, 63]."""
        ks = np.arange(LATENT_MIN, LATENT_MAX + 1, dtype=np.float64)
        tables = []
        for c in range(len(self.mu)):
            b = float(np.exp(np.float64(self.log_b[c])))
            pmf = laplace_interval_prob(ks, float(np.float64(self.mu[c])), b)
            tables.append(CdfTable.from_pmf(np.maximum(pmf, 1e-12)))
        return tables

    def digest_arrays(self):
        return [self.mu, self.log_b]


def quantize(latents, mode, rng=None):
    """Train mode adds U(-1/2, 1/2) noise; infer rounds half away from zero."""
    if mode == "train":
        if rng is None:
            raise ConfigError("train-mode quantization needs an rng")
        noise = rng.uniform(-0.5, 0.5, size=latents.shape).astype(latents.dtype)
        return latents + noise
    if mode == "infer":
        y = np.asarray(latents)
        return np.where(y >= 0, np.floor(y + 0.5), -np.floor(-y + 0.5)).astype(np.int32)
    raise ConfigError(f"unknown quantization mode {mode!r}")


# ---------------------------------------------------------------------------
# codec model

@dataclass
class CodecModel:
    config: CodecConfig
    analysis: net.NetworkModel
    synthesis: net.NetworkModel
    entropy: LaplaceEntropy
    lambda_index: int

    @property
    def lambda_value(self) -> float:
        return self.config.lambdas[self.lambda_index]

    @classmethod
    def fresh(cls, cfg: CodecConfig, lambda_index: int, rng):
        analysis = net.init_network(build_analysis_layers(cfg), rng)
        synthesis = net.init_network(build_synthesis_layers(cfg), rng)
        # Occupancy input is ~1% ones: at He scale the first conv's responses
        # (and hence the latents) would start below quantization resolution,
        # so boost its initial gain to keep early latents informative.
        for i, spec in enumerate(analysis.layers):
            if spec.kind == "Conv3D":
                analysis.params[i]["w"] *= 8.0
                break
        # Start the occupancy head at the sparse prior (sigmoid(-4) ~ 2%)
        # instead of 0.5, so early steps learn geometry, not the base rate.
        for i, spec in enumerate(synthesis.layers):
            if spec.kind == "Conv3D" and spec.out_channels == 1:
                synthesis.params[i]["b"][...] = -4.0
        return cls(cfg, analysis, synthesis,
                   LaplaceEntropy.fresh(cfg.latent_channels),
                   lambda_index)

    def successor(self, lambda_index: int) -> "CodecModel":
        """Next ladder rung, bit-exactly initialized from this model."""
        return CodecModel(self.config, self.analysis.copy(),
                          self.synthesis.copy(), self.entropy.copy(), lambda_index)

    def digest(self) -> str:
        import hashlib
        h = hashlib.sha256()
        h.update(self.analysis.digest().encode())
        h.update(self.synthesis.digest().encode())
        for arr in self.entropy.digest_arrays():
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def to_bytes(self) -> bytes:
        w = ByteWriter()
        w.raw(CODEC_MAGIC)
        w.pack("H", VERSION)
        w.pack("B", self.lambda_index)
        w.pack("d", self.lambda_value)
        cfg = self.config
        w.pack("BHBH", cfg.bit_depth, cfg.block_size, cfg.sample_factor,
               cfg.latent_channels)
        w.string(",".join(str(c) for c in cfg.analysis_channels))
        w.string(",".join(str(c) for c in cfg.synthesis_channels))
        w.string(",".join(repr(l) for l in cfg.lambdas))
        w.pack("d", cfg.decode_threshold)
        w.string(cfg.decode_mode)
        w.blob(model_bytes(self.analysis))
        w.blob(model_bytes(self.synthesis))
        w.raw(np.ascontiguousarray(self.entropy.mu, dtype="<f4").tobytes())
        w.raw(np.ascontiguousarray(self.entropy.log_b, dtype="<f4").tobytes())
        w.pack("I", zlib.crc32(w.buf) & 0xFFFFFFFF)
        return w.bytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "CodecModel":
        if len(data) < 12:
            raise TruncatedStreamError("codec blob too short")
        stored = struct.unpack("<I", data[-4:])[0]
        computed = zlib.crc32(data[:-4]) & 0xFFFFFFFF
        if stored != computed:
            raise CrcMismatchError("codec model", stored, computed)
        r = ByteReader(data[:-4])
        if r.raw(4) != CODEC_MAGIC:
            raise FormatError("bad codec magic")
        version = r.unpack("H")
        if version != VERSION:
            raise UnsupportedVersionError(f"codec version {version}")
        lambda_index = r.unpack("B")
        r.unpack("d")  # lambda value, redundant with the ladder below
        bit_depth, block_size, sample_factor, latent_channels = r.unpack("BHBH")
        ach = tuple(int(x) for x in r.string().split(","))
        sch = tuple(int(x) for x in r.string().split(","))
        lambdas = tuple(float(x) for x in r.string().split(","))
        threshold = r.unpack("d")
        decode_mode = r.string()
        analysis, _ = model_from_bytes(r.blob())
        synthesis, _ = model_from_bytes(r.blob())
        c = latent_channels
        mu = np.frombuffer(r.raw(4 * c), dtype="<f4").copy()
        log_b = np.frombuffer(r.raw(4 * c), dtype="<f4").copy()
        cfg = CodecConfig(bit_depth=bit_depth, block_size=block_size,
                          sample_factor=sample_factor, latent_channels=c,
                          analysis_channels=ach, synthesis_channels=sch,
                          lambdas=lambdas, decode_threshold=threshold,
                          decode_mode=decode_mode)
        return cls(cfg, analysis, synthesis, LaplaceEntropy(mu, log_b), lambda_index)

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "CodecModel":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


# ---------------------------------------------------------------------------
# encode / decode

def _prepare_blocks(pcv: PointCloudV, cfg: CodecConfig):
    if pcv.bit_depth != cfg.bit_depth:
        raise ConfigError(f"cloud bit_depth {pcv.bit_depth} != codec {cfg.bit_depth}")
    work = downsample(pcv, cfg.sample_factor)
    return partition(work, cfg.block_size)


def analysis_batch(model: CodecModel, volumes: np.ndarray):
    """volumes (B, BS, BS, BS) -> latents (B, g, g, g, C), float."""
    COUNTERS["analysis_forward"] += len(volumes)
    return net.forward(model.analysis, volumes[..., None].astype(np.float32))


def _latents_for_blocks(model: CodecModel, blocks):
    cfg = model.config
    if not blocks:
        return []
    vols = np.stack([occupancy_volume(local, cfg.block_size) for _, local in blocks])
    lat = analysis_batch(model, vols)
    q = quantize(lat, "infer")
    q = np.clip(q, LATENT_MIN, LATENT_MAX)
    return [(blocks[i][0], q[i]) for i in range(len(blocks))]


def extract_latents(pcv: PointCloudV, model: CodecModel):
    """Encoder-side quantized latents: list of (origin, (g,g,g,C) int32).

    Bit-identical to range-decoding the bitstream payloads (tested); this is
    what the compressed-domain pipeline consumes.
    """
    return _latents_for_blocks(model, _prepare_blocks(pcv, model.config))


def assemble_latents(latent_blocks, cfg: CodecConfig) -> np.ndarray:
    """Scatter per-block latents into the dense global (G, G, G, C) volume."""
    g = cfg.latent_grid
    size = cfg.global_latent_grid
    out = np.zeros((size, size, size, cfg.latent_channels), dtype=np.float32)
    for origin, lat in latent_blocks:
        o = [c // cfg.block_size * g for c in origin]
        out[o[0]:o[0] + g, o[1]:o[1] + g, o[2]:o[2] + g, :] = lat
    return out


@dataclass
class Bitstream:
    data: bytes
    stats: dict = field(default_factory=dict)

    @property
    def total_bits(self) -> int:
        return len(self.data) * 8


def encode_pc(pcv: PointCloudV, model: CodecModel, orig_point_count=None) -> Bitstream:
    """Encode a voxelized cloud into the LBPC container."""
    COUNTERS["encode_pc"] += 1
    cfg = model.config
    blocks = _prepare_blocks(pcv, cfg)
    latent_blocks = _latents_for_blocks(model, blocks)
    tables = model.entropy.cdf_tables()
    n_points = int(orig_point_count if orig_point_count is not None else len(pcv))
    w = ByteWriter()
    w.raw(MAGIC)
    w.pack("H", VERSION)
    w.pack("BHBB", cfg.bit_depth, cfg.block_size, cfg.sample_factor, model.lambda_index)
    w.pack("BH", cfg.latent_grid, cfg.latent_channels)
    w.pack("II", len(latent_blocks), n_points)
    payload_bits = []
    estimate_bits = []
    for (origin, lat), (_, local) in zip(latent_blocks, blocks):
        enc = RangeEncoder()
        for c in range(cfg.latent_channels):
            syms = (lat[..., c].ravel() - LATENT_MIN).tolist()
            cum = tables[c].cum
            for s in syms:
                enc.encode(cum[s], cum[s + 1])
        payload = enc.finish()
        w.pack("HHH", *origin)
        w.pack("I", len(local))
        w.blob(payload)
        payload_bits.append(len(payload) * 8)
        estimate_bits.append(model.entropy.bits_total(lat))
    w.pack("I", zlib.crc32(w.buf) & 0xFFFFFFFF)
    stats = {"payload_bits": payload_bits, "estimate_bits": estimate_bits,
             "n_blocks": len(latent_blocks), "point_count": n_points}
    return Bitstream(bytes(w.buf), stats)


def parse_bitstream(data: bytes):
    """Verify CRC + header; return (header dict, [(origin, payload)])."""
    if len(data) < 26:
        raise TruncatedStreamError("bitstream shorter than header")
    stored = struct.unpack("<I", data[-4:])[0]
    computed = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if stored != computed:
        raise CrcMismatchError("bitstream", stored, computed)
    r = ByteReader(data[:-4])
    if r.raw(4) != MAGIC:
        raise FormatError("bad bitstream magic")
    version = r.unpack("H")
    if version != VERSION:
        raise UnsupportedVersionError(f"bitstream version {version}")
    bit_depth, block_size, sample_factor, lambda_index = r.unpack("BHBB")
    latent_grid, latent_channels = r.unpack("BH")
    n_blocks, n_points = r.unpack("II")
    header = {"bit_depth": bit_depth, "block_size": block_size,
              "sample_factor": sample_factor, "lambda_index": lambda_index,
              "latent_grid": latent_grid, "latent_channels": latent_channels,
              "n_blocks": n_blocks, "point_count": n_points}
    blocks = []
    for _ in range(n_blocks):
        origin = r.unpack("HHH")
        occupied = r.unpack("I")
        blocks.append((tuple(int(o) for o in origin), int(occupied), r.blob()))
    if not r.done():
        raise FormatError("trailing bytes after last block")
    return header, blocks


def _check_stream_model(header, cfg: CodecConfig):
    for key, val in (("bit_depth", cfg.bit_depth), ("block_size", cfg.block_size),
                     ("sample_factor", cfg.sample_factor),
                     ("latent_grid", cfg.latent_grid),
                     ("latent_channels", cfg.latent_channels)):
        if header[key] != val:
            raise FormatError(f"stream {key}={header[key]} incompatible with model {key}={val}")


def decode_latents(data: bytes, model: CodecModel):
    """Range-decode every block back to integer latents."""
    cfg = model.config
    header, blocks = parse_bitstream(data)
    _check_stream_model(header, cfg)
    tables = model.entropy.cdf_tables()
    g = cfg.latent_grid
    out = []
    for origin, occupied, payload in blocks:
        dec = RangeDecoder(payload)
        lat = np.empty((g, g, g, cfg.latent_channels), dtype=np.int32)
        n_spatial = g ** 3
        for c in range(cfg.latent_channels):
            table = tables[c]
            syms = [dec.decode_symbol(table) for _ in range(n_spatial)]
            lat[..., c] = (np.array(syms, dtype=np.int32) + LATENT_MIN).reshape(g, g, g)
        COUNTERS["range_decode_symbols"] += n_spatial * cfg.latent_channels
        out.append((origin, occupied, lat))
    return header, out


def synthesis_batch(model: CodecModel, latents: np.ndarray):
    COUNTERS["synthesis_forward"] += len(latents)
    return net.forward(model.synthesis, latents.astype(np.float32))


def decode_pc(data: bytes, model: CodecModel) -> PointCloudV:
    """Decode a bitstream to a voxelized cloud at the original bit depth."""
    COUNTERS["decode_pc"] += 1
    cfg = model.config
    header, latent_blocks = decode_latents(data, model)
    if not latent_blocks:
        return PointCloudV(np.zeros((0, 3), dtype=np.int32), cfg.bit_depth)
    lat = np.stack([l for _, _, l in latent_blocks]).astype(np.float32)
    logits = synthesis_batch(model, lat)[..., 0]
    if cfg.decode_mode not in ("threshold", "topn"):
        raise ConfigError(f"unknown decode_mode {cfg.decode_mode!r}")
    thr = float(np.log(cfg.decode_threshold / (1.0 - cfg.decode_threshold)))
    pieces = []
    for i, (origin, occupied, _) in enumerate(latent_blocks):
        if cfg.decode_mode == "topn":
            flat = logits[i].ravel()
            n = min(int(occupied), flat.size)
            mask = np.zeros(flat.size, dtype=bool)
            if n > 0:
                # stable sort: ties resolve to the lowest voxel index
                mask[np.argsort(-flat, kind="stable")[:n]] = True
            coords = volume_to_coords(mask.reshape(logits[i].shape))
        else:
            coords = volume_to_coords(logits[i] >= thr)
        if len(coords):
            pieces.append((origin, coords))
    work = merge(pieces, cfg.effective_bit_depth)
    return upsample_coords(work, cfg.sample_factor)


def rate_estimate(latent_blocks, entropy: LaplaceEntropy) -> float:
    """Model-estimated bits for a set of latent blocks."""
    return float(sum(entropy.bits_total(lat) for _, lat in latent_blocks))


# ---------------------------------------------------------------------------
# training

@dataclass
class RungLog:
    lambda_index: int
    lambda_value: float
    init_digest: str
    final_digest: str
    epochs: list


def collect_training_blocks(clouds, cfg: CodecConfig, seed):
    """Occupancy volumes (uint8) for a deterministic subsample of all blocks."""
    vols = []
    for pcv in clouds:
        for _, local in _prepare_blocks(pcv, cfg):
            vols.append(occupancy_volume(local, cfg.block_size, dtype=np.uint8))
    if not vols:
        raise ConfigError("no occupied blocks in codec training set")
    vols = np.stack(vols)
    if len(vols) > cfg.max_train_blocks:
        rng = derive_rng(seed, "codec-blocks")
        keep = np.sort(rng.choice(len(vols), size=cfg.max_train_blocks, replace=False))
        vols = vols[keep]
    return vols


def _train_one_rung(model: CodecModel, vols: np.ndarray, seed, n_epochs) -> list:
    cfg = model.config
    lam = model.lambda_value
    opt = Adam(lr=cfg.lr)
    opt.register_model(model.analysis, "analysis")
    opt.register_model(model.synthesis, "synthesis")
    opt.register(("entropy", 0, "mu"), model.entropy.mu)
    opt.register(("entropy", 0, "log_b"), model.entropy.log_b)
    rng = derive_rng(seed, "codec-train", model.lambda_index)
    n = len(vols)
    bs = min(cfg.batch_blocks, n)
    epoch_rows = []
    for epoch in range(n_epochs):
        opt.lr = cfg.lr * cfg.lr_decay ** epoch
        perm = rng.permutation(n)
        tot_loss = tot_focal = tot_bits = tot_occ = 0.0
        for start in range(0, n - bs + 1, bs):
            idx = perm[start:start + bs]
            x = vols[idx].astype(np.float32)[..., None]
            y, a_caches = net.forward(model.analysis, x, train=True)
            y_t = quantize(y, "train", rng)
            z, s_caches = net.forward(model.synthesis, y_t, train=True)
            focal, d_z = focal_loss_logits_grad(z, x, cfg.alpha, cfg.gamma)
            bits, d_y_rate, d_mu, d_logb = model.entropy.bits_and_grads(y_t)
            occupied = max(float(x.sum()), 1.0)
            loss = focal + lam * bits / occupied
            s_grads, d_yt = net.backward(model.synthesis, s_caches, d_z,
                                         need_input_grad=True)
            d_yt = d_yt + (lam / occupied) * d_y_rate
            a_grads, _ = net.backward(model.analysis, a_caches, d_yt.astype(np.float32))
            g = opt.model_grads(model.analysis, a_grads, "analysis")
            g.update(opt.model_grads(model.synthesis, s_grads, "synthesis"))
            g[("entropy", 0, "mu")] = (lam / occupied) * d_mu
            g[("entropy", 0, "log_b")] = (lam / occupied) * d_logb
            opt.step(g)
            tot_loss += loss
            tot_focal += focal
            tot_bits += bits
            tot_occ += occupied
        nb = max(1, (n - bs) // bs + 1)
        epoch_rows.append({"epoch": epoch, "loss": tot_loss / nb,
                           "focal": tot_focal / nb,
                           "bits_per_occupied_voxel": tot_bits / max(tot_occ, 1.0)})
    return epoch_rows


def train_codec(clouds, cfg: CodecConfig, seed):
    """Train the lambda ladder sequentially; returns (models, logs).

    models[i] corresponds to cfg.lambdas[i]. Training starts at the
    lowest-rate rung (largest lambda) and relaxes toward smaller lambdas,
    each rung initialized bit-exactly from its predecessor's final weights.
    Relaxing is the well-conditioned direction: a decoder only ever gains
    bits, so quality improves monotonically along the ladder.
    """
    vols = collect_training_blocks(clouds, cfg, seed)
    order = sorted(range(len(cfg.lambdas)), key=lambda i: -cfg.lambdas[i])
    models = [None] * len(cfg.lambdas)
    logs = []
    prev = None
    for li in order:
        if prev is None:
            model = CodecModel.fresh(cfg, li, derive_rng(seed, "codec-init"))
            n_epochs = cfg.first_rung_epochs
        else:
            model = prev.successor(li)
            n_epochs = cfg.epochs
        init_digest = model.digest()
        epochs = _train_one_rung(model, vols, seed, n_epochs)
        logs.append(RungLog(li, cfg.lambdas[li], init_digest, model.digest(), epochs))
        models[li] = model
        prev = model
    return models, logs
