"""Model heads: encoder, projector, factorization, evidential, auxiliary.

Parameters are engine tensors held in an insertion-ordered dict so that
traversal, optimizer updates, and checkpoint layout are all deterministic.
Each head draws its init from its own derived stream, which makes the
encoder/projector init identical across objective variants under one seed
(the ablation comparisons rely on that).
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import rng as rng_mod

CHECKPOINT_MAGIC = b"TSSLCKPT"
CHECKPOINT_VERSION = 1

# Init stream tags (per head).
_INIT_ENCODER = 0
_INIT_PROJECTOR = 1
_INIT_STEM = 2
_INIT_FACTORS = 3
_INIT_EVIDENTIAL = 4
_INIT_AUX = 5
_INIT_GATE = 6

NUM_FAMILIES = 10


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    conv_widths: tuple = (16, 32, 64)
    backbone_dim: int = 128     # D
    projector_dim: int = 64     # P
    num_factors: int = 6        # T
    factor_dim: int = 16        # d
    num_prototypes: int = 16    # M
    prior_strength: float = 0.05  # beta

    def __post_init__(self):
        if self.image_size < 16:
            raise ValueError(f"image_size must be >= 16, got {self.image_size}")
        if self.num_factors < 1:
            raise ValueError("num_factors must be >= 1")
        if self.prior_strength <= 0:
            raise ValueError("prior_strength must be positive")


@dataclass
class Model:
    config: ModelConfig
    params: dict                      # name -> ad.Tensor, insertion-ordered
    degenerate_norm_count: int = 0    # rows hit by the factor-norm epsilon

    def param_arrays(self) -> dict:
        return {name: t.data for name, t in self.params.items()}


def _uniform_fan_in(stream, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return stream.uniform(-bound, bound, size=shape)


def _inverse_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


def init_model(config: ModelConfig, seed: int) -> Model:
    """Build all heads with deterministic per-head init streams."""
    c = config
    params = {}

    enc = rng_mod.derive(seed, rng_mod.PURPOSE_INIT, _INIT_ENCODER)
    in_ch = 3
    for i, width in enumerate(c.conv_widths, start=1):
        fan_in = in_ch * 9
        params[f"enc/conv{i}/w"] = ad.parameter(
            _uniform_fan_in(enc, (width, in_ch, 3, 3), fan_in))
        params[f"enc/conv{i}/b"] = ad.parameter(np.zeros(width))
        in_ch = width
    params["enc/fc/w"] = ad.parameter(_uniform_fan_in(enc, (in_ch, c.backbone_dim), in_ch))
    params["enc/fc/b"] = ad.parameter(np.zeros(c.backbone_dim))

    proj = rng_mod.derive(seed, rng_mod.PURPOSE_INIT, _INIT_PROJECTOR)
    d_ = c.backbone_dim
    params["proj/fc1/w"] = ad.parameter(_uniform_fan_in(proj, (d_, d_), d_))
    params["proj/fc1/b"] = ad.parameter(np.zeros(d_))
    params["proj/fc2/w"] = ad.parameter(_uniform_fan_in(proj, (d_, c.projector_dim), d_))
    params["proj/fc2/b"] = ad.parameter(np.zeros(c.projector_dim))

    stem = rng_mod.derive(seed, rng_mod.PURPOSE_INIT, _INIT_STEM)
    params["stem/fc1/w"] = ad.parameter(_uniform_fan_in(stem, (d_, d_), d_))
    params["stem/fc1/b"] = ad.parameter(np.zeros(d_))
    params["stem/fc2/w"] = ad.parameter(_uniform_fan_in(stem, (d_, d_), d_))
    params["stem/fc2/b"] = ad.parameter(np.zeros(d_))

    # Factor projections: rows orthonormal across the whole T*d stack where
    # the backbone dimension allows, so factors start non-collapsed.
    fstream = rng_mod.derive(seed, rng_mod.PURPOSE_INIT, _INIT_FACTORS)
    total_rows = c.num_factors * c.factor_dim
    raw = fstream.standard_normal((total_rows, d_))
    if total_rows <= d_:
        q, _ = np.linalg.qr(raw.T)          # (D, total_rows), orthonormal columns
        rows = q.T
    else:
        q, _ = np.linalg.qr(raw[:d_].T)
        rows = np.concatenate(
            [q.T, raw[d_:] / np.linalg.norm(raw[d_:], axis=1, keepdims=True)], axis=0)
    for t in range(c.num_factors):
        block = rows[t * c.factor_dim : (t + 1) * c.factor_dim]
        params[f"factor/{t}/w"] = ad.parameter(block.T.copy())   # stored (D, d)

    ev = rng_mod.derive(seed, rng_mod.PURPOSE_INIT, _INIT_EVIDENTIAL)
    for t in range(c.num_factors):
        params[f"evid/{t}/w"] = ad.parameter(
            _uniform_fan_in(ev, (c.factor_dim, c.num_prototypes), c.factor_dim))
        params[f"evid/{t}/b"] = ad.parameter(np.zeros(c.num_prototypes))

    aux = rng_mod.derive(seed, rng_mod.PURPOSE_INIT, _INIT_AUX)
    params["aux/w"] = ad.parameter(_uniform_fan_in(aux, (d_, NUM_FAMILIES), d_))
    params["aux/b"] = ad.parameter(np.zeros(NUM_FAMILIES))

    # Cosine-gate temperature, softplus-reparameterized, init tau = 0.1.
    params["gate/tau_raw"] = ad.parameter(
        np.full(c.num_factors, _inverse_softplus(0.1)))

    return Model(config=config, params=params)


# ---------------------------------------------------------------------------
# Forward graphs


def encode(model: Model, x: ad.Tensor) -> ad.Tensor:
    """Backbone features h: 3 strided conv blocks, GAP, linear to D."""
    p = model.params
    h = x
    for i in range(1, len(model.config.conv_widths) + 1):
        h = ad.relu(ad.conv2d(h, p[f"enc/conv{i}/w"], p[f"enc/conv{i}/b"],
                              stride=2, pad=1))
    h = ad.mean(h, axis=(2, 3))
    return ad.matmul(h, p["enc/fc/w"]) + p["enc/fc/b"]


def project(model: Model, h: ad.Tensor) -> ad.Tensor:
    p = model.params
    hidden = ad.relu(ad.matmul(h, p["proj/fc1/w"]) + p["proj/fc1/b"])
    out = ad.matmul(hidden, p["proj/fc2/w"]) + p["proj/fc2/b"]
    return ad.l2_normalize(out)


def factorize(model: Model, h: ad.Tensor) -> list:
    """Per-factor unit-norm embeddings z^t = normalize(W^t g(h))."""
    p = model.params
    g = ad.relu(ad.matmul(h, p["stem/fc1/w"]) + p["stem/fc1/b"])
    g = ad.matmul(g, p["stem/fc2/w"]) + p["stem/fc2/b"]
    zs = []
    for t in range(model.config.num_factors):
        pre = ad.matmul(g, p[f"factor/{t}/w"])
        norms = np.sqrt(np.sum(pre.data * pre.data, axis=-1))
        model.degenerate_norm_count += int(np.sum(norms < 1e-12))
        zs.append(ad.l2_normalize(pre))
    return zs


@dataclass
class EvidenceState:
    """Per-factor evidential outputs, all graph tensors.

    e: (B, M) evidence; alpha: (B, M); strength: (B,); belief: (B, M);
    ignorance: (B,). Detached consumers read .data.
    """
    e: ad.Tensor
    alpha: ad.Tensor
    strength: ad.Tensor
    belief: ad.Tensor
    ignorance: ad.Tensor


def evidence(model: Model, z: ad.Tensor, t: int) -> EvidenceState:
    p = model.params
    c = model.config
    raw = ad.matmul(z, p[f"evid/{t}/w"]) + p[f"evid/{t}/b"]
    e = ad.softplus(raw)
    alpha = ad.add_scalar(e, c.prior_strength)
    s_keep = ad.sum_(alpha, axis=-1, keepdims=True)            # (B, 1)
    belief = e / s_keep
    u_keep = ad.constant(c.prior_strength * c.num_prototypes) / s_keep
    batch = z.shape[0]
    return EvidenceState(
        e=e,
        alpha=alpha,
        strength=ad.reshape(s_keep, (batch,)),
        belief=belief,
        ignorance=ad.reshape(u_keep, (batch,)),
    )


def aux_predict(model: Model, h: ad.Tensor) -> ad.Tensor:
    p = model.params
    return ad.matmul(h, p["aux/w"]) + p["aux/b"]


def encode_features(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Inference-mode backbone features for a stack of images."""
    outs = []
    with ad.no_grad():
        for start in range(0, images.shape[0], batch_size):
            x = ad.constant(images[start : start + batch_size])
            outs.append(encode(model, x).data)
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, model.config.backbone_dim))


# ---------------------------------------------------------------------------
# Checkpoint IO
#
# Layout: magic 'TSSLCKPT' | u32 version | u32 blob_len | config JSON blob |
# records of (u32 name_len | name | u32 rank | u32 dims... | f64 payload).
# Optimizer buffers ride along as 'opt/momentum/<param-name>' records.
# Little-endian throughout.


def _write_record(f, name: str, arr: np.ndarray):
    name_b = name.encode("utf-8")
    f.write(struct.pack("<I", len(name_b)))
    f.write(name_b)
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.tobytes())


def save_checkpoint(path, model: Model, meta: dict, extra_arrays: dict = None):
    """Write model params (+ optional named buffers) with a JSON meta blob."""
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name, tensor in model.params.items():
            _write_record(f, name, tensor.data)
        for name, arr in (extra_arrays or {}).items():
            _write_record(f, name, arr)


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError(f"checkpoint: truncated while reading {what}")
    return buf


def load_checkpoint(path):
    """Read (meta dict, arrays dict) back from a checkpoint file."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"checkpoint: bad magic {magic!r}")
        version = struct.unpack("<I", _read_exact(f, 4, "version"))[0]
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint: unsupported version {version}")
        blob_len = struct.unpack("<I", _read_exact(f, 4, "meta length"))[0]
        meta = json.loads(_read_exact(f, blob_len, "meta blob").decode("utf-8"))
        arrays = {}
        while True:
            head = f.read(4)
            if not head:
                break
            name_len = struct.unpack("<I", head)[0]
            name = _read_exact(f, name_len, "record name").decode("utf-8")
            rank = struct.unpack("<I", _read_exact(f, 4, "record rank"))[0]
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "record dims"))
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = _read_exact(f, count * 8, f"payload of {name}")
            arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    return meta, arrays


def restore_model(config: ModelConfig, arrays: dict) -> Model:
    """Build a Model whose params take their values from checkpoint arrays."""
    model = init_model(config, seed=0)
    for name, tensor in model.params.items():
        if name not in arrays:
            raise ValueError(f"checkpoint: missing parameter record {name!r}")
        if arrays[name].shape != tensor.data.shape:
            raise ValueError(
                f"checkpoint: parameter {name!r} has shape {arrays[name].shape}, "
                f"expected {tensor.data.shape}"
            )
        tensor.data = arrays[name].copy()
    return model
