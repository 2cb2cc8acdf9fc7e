"""Pyramid generator/critic networks and the Wasserstein GAN training loop."""
from __future__ import annotations

import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor
from .geodata import RealizationSet

logger = logging.getLogger(__name__)

CONV, TCONV, RELU, LRELU, TANH, SIGMOID = range(6)
KIND_NAMES = {CONV: "conv", TCONV: "tconv", RELU: "relu", LRELU: "lrelu", TANH: "tanh", SIGMOID: "sigmoid"}

CHECKPOINT_MAGIC = b"GWTS"
CHECKPOINT_VERSION = 1
INIT_STD = 0.02


@dataclass
class Layer:
    kind: int
    in_maps: int = 0
    out_maps: int = 0
    kernel: int = 0
    stride: int = 0
    pad: int = 0
    weight: Parameter | None = None
    bias: Parameter | None = None
    slope: float = ad.LEAKY_SLOPE

    def params(self) -> list[Parameter]:
        return [p for p in (self.weight, self.bias) if p is not None]

    def descriptor(self) -> tuple[int, ...]:
        return (self.kind, self.in_maps, self.out_maps, self.kernel, self.stride, self.pad)

    def __call__(self, x: Tensor) -> Tensor:
        if self.kind == CONV:
            y = ad.conv2d(x, self.weight, self.stride, self.pad)
        elif self.kind == TCONV:
            y = ad.conv2d_transpose(x, self.weight, self.stride, self.pad)
        elif self.kind == RELU:
            return ad.relu(x)
        elif self.kind == LRELU:
            return ad.leaky_relu(x, self.slope)
        elif self.kind == TANH:
            return ad.tanh(x)
        elif self.kind == SIGMOID:
            return ad.sigmoid(x)
        else:
            raise ValueError(f"unknown layer kind {self.kind}")
        if self.bias is not None:
            y = ad.add(y, ad.reshape(self.bias, (self.out_maps, 1, 1)))
        return y


def _conv_layer(kind, cin, cout, k, s, p, rng, bias=False) -> Layer:
    shape = (cout, cin, k, k) if kind == CONV else (cin, cout, k, k)
    w = Parameter(rng.normal(0.0, INIT_STD, size=shape))
    b = Parameter(np.zeros(cout)) if bias else None
    return Layer(kind, cin, cout, k, s, p, w, b)


class Network:
    """Ordered stack of layers applied to (N, C, H, W) batches."""

    def __init__(self, layers: list[Layer]):
        self.layers = layers

    def __call__(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        for layer in self.layers:
            x = layer(x)
        return x

    def forward_array(self, x: np.ndarray) -> np.ndarray:
        return self(Tensor(x)).data

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.params()]

    def weights(self) -> list[Parameter]:
        return [layer.weight for layer in self.layers if layer.weight is not None]

    def n_params(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        ad.zero_grad(self.parameters())

    def descriptors(self) -> list[tuple[int, ...]]:
        return [layer.descriptor() for layer in self.layers]

    def summary(self) -> str:
        rows = [f"{KIND_NAMES[l.kind]:>7} {l.in_maps:>4}->{l.out_maps:<4} k={l.kernel} s={l.stride} p={l.pad}"
                for l in self.layers]
        return "\n".join(rows)


class Generator(Network):
    @property
    def n_z(self) -> int:
        return self.layers[0].in_maps

    def output_size(self, n: int) -> int:
        """Spatial extent produced from an (n_z, n, n) latent array."""
        for layer in self.layers:
            if layer.kind == TCONV:
                n = ad.conv_transpose_output_size(n, layer.kernel, layer.stride, layer.pad)
        return n


class Discriminator(Network):
    def __init__(self, layers: list[Layer], input_size: int):
        super().__init__(layers)
        self.input_size = input_size

    def __call__(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[-2:] != (self.input_size, self.input_size):
            raise ad.ShapeError(f"critic expects {self.input_size}x{self.input_size} input, got {x.shape}")
        return super().__call__(x)


def _stages(size: int) -> int:
    n = int(round(math.log2(size / 4)))
    if n < 1 or 4 * 2 ** n != size:
        raise ValueError(f"output size must be 4 * 2^k with k >= 1, got {size}")
    return n


def build_generator(n_z: int = 30, size: int = 64, base_maps: int = 512, seed=None,
                    bias: bool = False) -> Generator:
    """Transposed-conv pyramid: (n_z,1,1) -> (base,4,4) -> ... -> (1,size,size)."""
    if n_z < 1:
        raise ValueError("n_z must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = _stages(size)
    layers = [_conv_layer(TCONV, n_z, base_maps, 4, 1, 0, rng, bias), Layer(RELU)]
    maps = base_maps
    for _ in range(n - 1):
        layers += [_conv_layer(TCONV, maps, maps // 2, 4, 2, 1, rng, bias), Layer(RELU)]
        maps //= 2
    layers += [_conv_layer(TCONV, maps, 1, 4, 2, 1, rng, bias), Layer(TANH)]
    return Generator(layers)


def build_discriminator(size: int = 64, base_maps: int = 8, mode: str = "wgan", seed=None,
                        slope: float = ad.LEAKY_SLOPE, bias: bool = False) -> Discriminator:
    """Mirror of the generator: strided convs down to 4x4, then one 4x4 conv to a scalar."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = _stages(size)
    layers = []
    cin, cout = 1, base_maps
    for _ in range(n):
        layers += [_conv_layer(CONV, cin, cout, 4, 2, 1, rng, bias), Layer(LRELU, slope=slope)]
        cin, cout = cout, cout * 2
    layers.append(_conv_layer(CONV, cin, 1, 4, 1, 0, rng, bias))
    if mode == "gan":
        layers.append(Layer(SIGMOID))
    elif mode != "wgan":
        raise ValueError(f"unknown mode {mode!r}")
    return Discriminator(layers, size)


PRESETS = {
    "paper": dict(size=64, g_maps=512, d_maps=8),
    "desk": dict(size=32, g_maps=256, d_maps=8),
}


def build_pair(preset: str = "paper", n_z: int = 30, mode: str = "wgan", seed=None,
               d_maps: int | None = None, g_maps: int | None = None, bias: bool = False,
               slope: float = ad.LEAKY_SLOPE):
    cfg = PRESETS[preset]
    rng = np.random.default_rng(seed)
    G = build_generator(n_z, cfg["size"], g_maps or cfg["g_maps"], rng, bias=bias)
    D = build_discriminator(cfg["size"], d_maps or cfg["d_maps"], mode, rng, slope=slope, bias=bias)
    return G, D


# ---------------------------------------------------------------- losses

def _as_batch(x) -> Tensor:
    if isinstance(x, RealizationSet):
        x = x.values
    if isinstance(x, Tensor):
        return x
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty batch")
    if x.ndim == 3:
        x = x[:, None]
    return Tensor(x)


def wgan_losses(D: Callable, real, fake) -> tuple[Tensor, Tensor]:
    """Return (critic objective to ascend, generator objective to descend)."""
    real, fake = _as_batch(real), _as_batch(fake)
    if real.shape[0] == 0 or fake.shape[0] == 0:
        raise ValueError("empty batch")
    if real.shape[0] != fake.shape[0]:
        raise ValueError("real and fake batches differ in size")
    d_real = ad.mean(D(real))
    d_fake = ad.mean(D(fake))
    return ad.add(d_real, ad.neg(d_fake)), ad.neg(d_fake)


PROB_EPS = 1e-7


def standard_gan_losses(D: Callable, real, fake) -> tuple[Tensor, Tensor]:
    """Minimax losses for a sigmoid-headed discriminator.

    loss_D = mean log D(real) + mean log(1 - D(fake)) is ascended by D and
    loss_G = mean log(1 - D(fake)) is descended by G.
    """
    real, fake = _as_batch(real), _as_batch(fake)
    if real.shape[0] != fake.shape[0]:
        raise ValueError("real and fake batches differ in size")
    p_real = ad.clamp(D(real), PROB_EPS, 1 - PROB_EPS)
    p_fake = ad.clamp(D(fake), PROB_EPS, 1 - PROB_EPS)
    log_fake = ad.mean(ad.log(ad.add(1.0, ad.neg(p_fake))))
    loss_d = ad.add(ad.mean(ad.log(p_real)), log_fake)
    return loss_d, log_fake


def generator_loss(D: Callable, fake: Tensor, mode: str = "wgan") -> Tensor:
    if mode == "wgan":
        return ad.neg(ad.mean(D(fake)))
    p_fake = ad.clamp(D(fake), PROB_EPS, 1 - PROB_EPS)
    return ad.mean(ad.log(ad.add(1.0, ad.neg(p_fake))))


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    n_d: int = 5
    batch: int = 32
    clip: float = 0.01
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    iterations: int = 20000
    n_z: int = 30
    seed: int = 0
    mode: str = "wgan"
    preset: str = "paper"
    bias: bool = False
    slope: float = ad.LEAKY_SLOPE
    val_every: int = 10
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.clip <= 0:
            raise ValueError("clip must be positive")
        if self.batch < 1 or self.n_d < 1:
            raise ValueError("batch and n_d must be >= 1")
        if self.mode not in ("wgan", "gan"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainRecord:
    iteration: int
    wasserstein: float
    loss_g: float
    validation: float | None = None
    wall_time: float = 0.0
    checkpoint: str | None = None


@dataclass
class TrainLog:
    records: list[TrainRecord] = field(default_factory=list)
    d_updates: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def series(self, name: str) -> np.ndarray:
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in self.records])

    def to_csv(self, path, wall_time: bool = False) -> None:
        cols = ["iteration", "wasserstein", "loss_g", "validation", "checkpoint"]
        if wall_time:
            cols.append("wall_time")
        lines = [",".join(cols)]
        for r in self.records:
            row = [str(r.iteration), repr(r.wasserstein), repr(r.loss_g),
                   "" if r.validation is None else repr(r.validation), r.checkpoint or ""]
            if wall_time:
                row.append(f"{r.wall_time:.3f}")
            lines.append(",".join(row))
        Path(path).write_text("\n".join(lines) + "\n")


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, log: TrainLog, record: dict):
        super().__init__(message)
        self.log = log
        self.record = record


def _sample_z(rng, m, n_z, ny=1, nx=1) -> np.ndarray:
    return rng.standard_normal((m, n_z, ny, nx))


def _sample_data(rng, data: np.ndarray, m: int) -> np.ndarray:
    idx = rng.choice(data.shape[0], size=m, replace=False)
    return data[idx][:, None]


def train(config: TrainConfig, data: RealizationSet, validation: RealizationSet | None = None,
          G: Generator | None = None, D: Discriminator | None = None,
          on_d_update: Callable | None = None, on_iteration: Callable | None = None):
    """Run the alternating critic/generator loop and return (G, D, TrainLog).

    Each generator iteration performs ``n_d`` critic updates, each on fresh
    latent and data minibatches and (in wgan mode) followed by weight
    clipping, then one generator update on a fresh latent batch.
    """
    values = data.values if isinstance(data, RealizationSet) else np.asarray(data)
    if values.shape[0] < config.batch:
        raise ValueError(f"dataset of {values.shape[0]} realizations is smaller than batch {config.batch}")
    rng = np.random.default_rng(config.seed)
    if G is None or D is None:
        preset = PRESETS[config.preset]
        G = G or build_generator(config.n_z, preset["size"], preset["g_maps"], rng, bias=config.bias)
        D = D or build_discriminator(preset["size"], preset["d_maps"], config.mode, rng,
                                     slope=config.slope, bias=config.bias)
    losses = wgan_losses if config.mode == "wgan" else standard_gan_losses
    d_params, g_params = D.parameters(), G.parameters()
    log = TrainLog()
    m, n_z = config.batch, G.n_z
    t0 = time.perf_counter()

    for it in range(1, config.iterations + 1):
        for _ in range(config.n_d):
            fake = G.forward_array(_sample_z(rng, m, n_z))
            real = _sample_data(rng, values, m)
            D.zero_grad()
            with Tape() as tape:
                loss_d, _ = losses(D, real, fake)
                objective = ad.neg(loss_d)
            w_est = loss_d.item()
            if not math.isfinite(w_est):
                raise TrainingDiverged(f"non-finite critic loss at iteration {it}", log,
                                       {"iteration": it, "stage": "critic", "loss": w_est})
            tape.backward(objective)
            ad.adam_step(d_params, config.lr, config.beta1, config.beta2)
            if config.mode == "wgan":
                ad.clip_weights(d_params, config.clip)
            log.d_updates += 1
            if on_d_update is not None:
                on_d_update(D)

        G.zero_grad()
        with Tape() as tape:
            loss_g = generator_loss(D, G(Tensor(_sample_z(rng, m, n_z))), config.mode)
        lg = loss_g.item()
        if not math.isfinite(lg):
            raise TrainingDiverged(f"non-finite generator loss at iteration {it}", log,
                                   {"iteration": it, "stage": "generator", "loss": lg})
        tape.backward(loss_g)
        ad.adam_step(g_params, config.lr, config.beta1, config.beta2)
        # critic gradients picked up through the generator loss are discarded
        D.zero_grad()

        rec = TrainRecord(it, w_est, lg, wall_time=time.perf_counter() - t0)
        if validation is not None and config.val_every and it % config.val_every == 0:
            rec.validation = wasserstein_validation(D, G, validation, len(validation),
                                                    seed=(config.seed, it))
        if config.checkpoint_every and config.checkpoint_dir and it % config.checkpoint_every == 0:
            tag = f"iter{it:06d}"
            d = Path(config.checkpoint_dir)
            d.mkdir(parents=True, exist_ok=True)
            save_checkpoint(G, d / f"generator_{tag}.gwts")
            save_checkpoint(D, d / f"critic_{tag}.gwts")
            rec.checkpoint = tag
        log.records.append(rec)
        if on_iteration is not None:
            on_iteration(rec)
    return G, D, log


def wasserstein_validation(D: Discriminator, G: Generator, validation, n_fake: int, seed=None) -> float:
    """Critic estimate mean D(validation) - mean D(fresh fakes)."""
    vals = validation.values if isinstance(validation, RealizationSet) else np.asarray(validation)
    if len(vals) == 0:
        raise ValueError("empty validation set")
    rng = np.random.default_rng(seed)
    fake = G.forward_array(_sample_z(rng, n_fake, G.n_z))
    return float(D.forward_array(vals[:, None]).mean() - D.forward_array(fake).mean())


def divergence_flags(log: TrainLog, warmup: int = 20, factor: float = 3.0) -> np.ndarray:
    """Flag validated iterations whose train/validation gap exceeds ``factor``
    times the interquartile range of the gap over the first ``warmup`` validations.

    Returns a boolean array aligned with the validated records; the warmup
    records themselves are never flagged.
    """
    recs = [r for r in log.records if r.validation is not None]
    gaps = np.array([abs(r.wasserstein - r.validation) for r in recs])
    flags = np.zeros(len(gaps), dtype=bool)
    if len(gaps) <= warmup:
        return flags
    q1, q3 = np.percentile(gaps[:warmup], [25, 75])
    flags[warmup:] = gaps[warmup:] > factor * (q3 - q1)
    return flags


# ---------------------------------------------------------------- sampling

def generate(G: Generator, n: int, seed=None, batch: int = 256) -> RealizationSet:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    z = _sample_z(rng, n, G.n_z)
    out = [G.forward_array(z[i:i + batch])[:, 0] for i in range(0, n, batch)]
    return RealizationSet(np.concatenate(out), domain="gan")


def generate_from(G: Generator, z: np.ndarray) -> np.ndarray:
    """Rasters for explicit latent vectors ``z`` of shape (n, n_z) or (n_z,)."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z = z.reshape(-1, G.n_z, 1, 1)
    out = G.forward_array(z)[:, 0]
    return out[0] if single else out


def expanded_size(G: Generator, n: int) -> int:
    return G.output_size(n)


def generate_expanded(G: Generator, n_y: int, n_x: int, seed=None) -> np.ndarray:
    """Feed the generator a (n_z, n_y, n_x) latent array to get a larger raster."""
    if n_y < 1 or n_x < 1:
        raise ValueError("expanded latent extents must be >= 1")
    rng = np.random.default_rng(seed)
    return G.forward_array(_sample_z(rng, 1, G.n_z, n_y, n_x))[0, 0]


# ---------------------------------------------------------------- checkpoints

class CheckpointError(ValueError):
    pass


def checkpoint_bytes(net: Network) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(net.layers))]
    for layer in net.layers:
        params = layer.params()
        count = sum(p.data.size for p in params)
        parts.append(struct.pack("<B5IQ", layer.kind, layer.in_maps, layer.out_maps,
                                 layer.kernel, layer.stride, layer.pad, count))
        for p in params:
            parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(net: Network, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))


_LAYER_HEADER = struct.Struct("<B5IQ")


def _read_layers(buf: bytes):
    if len(buf) < 12:
        raise CheckpointError("truncated checkpoint header")
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}")
    version, n_layers = struct.unpack("<II", buf[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    out = []
    for _ in range(n_layers):
        if pos + _LAYER_HEADER.size > len(buf):
            raise CheckpointError("truncated layer descriptor")
        kind, cin, cout, k, s, p, count = _LAYER_HEADER.unpack_from(buf, pos)
        pos += _LAYER_HEADER.size
        if kind not in KIND_NAMES:
            raise CheckpointError(f"unknown layer kind {kind}")
        if pos + 8 * count > len(buf):
            raise CheckpointError("truncated weights")
        weights = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64)
        pos += 8 * count
        out.append(((kind, cin, cout, k, s, p), weights))
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last layer")
    return out


def _unpack_layer(desc, weights) -> Layer:
    kind, cin, cout, k, s, p = desc
    layer = Layer(kind, cin, cout, k, s, p)
    if kind in (CONV, TCONV):
        shape = (cout, cin, k, k) if kind == CONV else (cin, cout, k, k)
        n_w = int(np.prod(shape))
        if weights.size not in (n_w, n_w + cout):
            raise CheckpointError(f"layer {KIND_NAMES[kind]} expects {n_w} weights, file has {weights.size}")
        layer.weight = Parameter(weights[:n_w].reshape(shape))
        if weights.size > n_w:
            layer.bias = Parameter(weights[n_w:])
    elif weights.size:
        raise CheckpointError(f"activation layer {KIND_NAMES[kind]} carries weights")
    return layer


def load_checkpoint(path) -> Network:
    """Rebuild a network from a checkpoint file.

    Generators start with a transposed convolution; anything else loads as a critic.
    """
    layers = [_unpack_layer(d, w) for d, w in _read_layers(Path(path).read_bytes())]
    if layers and layers[0].kind == TCONV:
        return Generator(layers)
    size = 4 * 2 ** sum(1 for l in layers if l.kind == CONV and l.stride == 2)
    return Discriminator(layers, size)


def load_into(net: Network, path) -> Network:
    """Copy checkpoint weights into ``net`` after checking layer descriptors match."""
    entries = _read_layers(Path(path).read_bytes())
    got = [d for d, _ in entries]
    want = net.descriptors()
    if got != want:
        raise CheckpointError(f"layer descriptor mismatch: checkpoint {got[:2]}... vs network {want[:2]}...")
    for layer, (desc, weights) in zip(net.layers, entries):
        loaded = _unpack_layer(desc, weights)
        for dst, src in zip(layer.params(), loaded.params()):
            if dst.data.shape != src.data.shape:
                raise CheckpointError("bias layout mismatch")
            dst.data[...] = src.data
    return net
