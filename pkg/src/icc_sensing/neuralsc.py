"""
The trainable semantic transceiver.

A shared convolutional encoder maps each sensor's sample covariance to D
complex symbols, the symbols cross the reporting channel (over the air or on
orthogonal subchannels) and a residual MLP decoder at the FC outputs the
probability that the PU is present.

Everything runs on CPU in float64.
"""

from __future__ import annotations

import copy
import logging
from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from tqdm.auto import tqdm

try:
    import torch
    from torch import nn
except ImportError:
    raise ImportError("torch package is required")

try:
    from pydantic import BaseModel, ConfigDict, Field, model_validator
except ImportError:
    raise ImportError("pydantic package is required")

from .airmodel import (
    ChannelDraws,
    CovarianceSample,
    ReportingMode,
    ScenarioConfig,
    draw_reporting_channel,
    generate_slot,
)
from .errors import ConfigError, TrainingDivergedError
from .numerics import RngStream

logger = logging.getLogger(__name__)

DTYPE = torch.float64
PROBABILITY_EPS = 1e-7
# Keras-style momentum 0.99 expressed in torch's convention.
BATCHNORM_MOMENTUM = 0.01
BATCHNORM_EPS = 1e-5
POWER_MOMENTUM = 0.99

# RngStream lanes used by training
DATA_LANE = 0
SHUFFLE_LANE = 1
CHANNEL_LANE = 2
LABEL_LANE = 3


class Architecture(BaseModel):
    """Layer widths of the encoder and decoder.

    ``block_channels`` are the output channels of the inception blocks; the last
    one is the number of reals the encoder emits, paired into
    ``n_symbols = block_channels[-1] // 2`` complex symbols.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    input_size: int = Field(28, ge=1)
    block_channels: tuple[int, ...] = (4, 8, 16)
    kernels: tuple[int, ...] = (3, 5, 7)
    residual_widths: tuple[int, ...] = (32, 64, 128, 64, 32, 16)
    symbol_budget: int | None = Field(None, ge=1)

    @model_validator(mode="after")
    def _check_chain(self) -> Architecture:
        if not self.block_channels:
            raise ValueError("at least one inception block is required")
        if not self.residual_widths:
            raise ValueError("at least one residual block is required")
        if any(k < 1 or k % 2 == 0 for k in self.kernels):
            raise ValueError(f"kernel sizes must be odd and positive, got {self.kernels}")
        if self.block_channels[-1] % 2:
            raise ValueError("the last block width must be even to pair reals into symbols")
        if self.input_size < 2 ** len(self.block_channels):
            raise ValueError(
                f"input size {self.input_size} is too small for "
                f"{len(self.block_channels)} stride-2 blocks"
            )
        if self.n_symbols > self.budget:
            raise ValueError(f"D={self.n_symbols} exceeds the symbol budget {self.budget}")
        return self

    @property
    def n_symbols(self) -> int:
        return self.block_channels[-1] // 2

    @property
    def budget(self) -> int:
        return self.n_symbols if self.symbol_budget is None else self.symbol_budget

    def spatial_sizes(self) -> list[int]:
        """Feature-map side length at the input and after each block."""
        sizes = [self.input_size]
        for _ in self.block_channels:
            sizes.append(-(-sizes[-1] // 2))
        return sizes

    @classmethod
    def full_size(cls, input_size: int = 28) -> Architecture:
        return cls(input_size=input_size)

    @classmethod
    def desk_scale(cls, input_size: int = 12) -> Architecture:
        """Full-size encoder with a narrower decoder for CPU-sized experiments."""
        return cls(input_size=input_size, residual_widths=(32, 64, 32, 16))

    @classmethod
    def miniature(cls, input_size: int = 8) -> Architecture:
        return cls(input_size=input_size, block_channels=(4,), residual_widths=(8, 4))

    def check_scenario(self, cfg: ScenarioConfig) -> None:
        if cfg.M != self.input_size:
            raise ConfigError(
                f"architecture expects M={self.input_size} antennas, scenario has M={cfg.M}"
            )


class InceptionBlock(nn.Module):
    """Parallel depthwise-separable branches, a merging conv and a stride-2 conv."""

    def __init__(self, in_channels: int, out_channels: int, kernels: Sequence[int]):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(in_channels, in_channels, k, padding=k // 2, groups=in_channels),
                nn.Conv2d(in_channels, out_channels, 1),
                nn.ELU(),
            )
            for k in kernels
        )
        self.merge = nn.Sequential(
            nn.Conv2d(out_channels * len(kernels), out_channels, 3, padding=1), nn.ELU()
        )
        self.downsample = nn.Sequential(
            nn.Conv2d(out_channels, out_channels, 3, stride=2, padding=1), nn.ELU()
        )
        self.norm = nn.BatchNorm2d(out_channels, eps=BATCHNORM_EPS, momentum=BATCHNORM_MOMENTUM)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = torch.cat([branch(x) for branch in self.branches], dim=1)
        return self.norm(self.downsample(self.merge(x)))


class PowerNormalization(nn.Module):
    """Scale symbols so the mean power per complex symbol is one.

    In training mode the scale comes from the current batch (all B*K encoded
    vectors together); a running mean-square estimate is kept for inference.
    """

    def __init__(self, momentum: float = POWER_MOMENTUM):
        super().__init__()
        self.momentum = momentum
        self.register_buffer("running_power", torch.ones((), dtype=DTYPE))
        self.register_buffer("num_batches_tracked", torch.zeros((), dtype=torch.long))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.training:
            # Two reals per complex symbol.
            power = 2.0 * torch.mean(x**2)
            with torch.no_grad():
                if self.num_batches_tracked == 0:
                    self.running_power.copy_(power)
                else:
                    self.running_power.mul_(self.momentum).add_((1.0 - self.momentum) * power)
                self.num_batches_tracked += 1
        else:
            power = self.running_power
        return x / torch.sqrt(torch.clamp(power, min=torch.finfo(DTYPE).tiny))


class SemanticEncoder(nn.Module):
    def __init__(self, arch: Architecture):
        super().__init__()
        widths = (2, *arch.block_channels)
        self.blocks = nn.Sequential(
            *(InceptionBlock(widths[i], widths[i + 1], arch.kernels) for i in range(len(widths) - 1))
        )
        self.power = PowerNormalization()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        features = self.blocks(x).mean(dim=(-2, -1))
        return self.power(features)


class ResidualBlock(nn.Module):
    """Three linear layers with ELU, a (projected) skip connection and batch norm."""

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Linear(in_features, out_features),
            nn.ELU(),
            nn.Linear(out_features, out_features),
            nn.ELU(),
            nn.Linear(out_features, out_features),
            nn.ELU(),
        )
        self.skip = (
            nn.Identity() if in_features == out_features else nn.Linear(in_features, out_features)
        )
        self.norm = nn.BatchNorm1d(out_features, eps=BATCHNORM_EPS, momentum=BATCHNORM_MOMENTUM)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(self.body(x) + self.skip(x))


class SemanticDecoder(nn.Module):
    def __init__(self, arch: Architecture):
        super().__init__()
        widths = (2 * arch.n_symbols, *arch.residual_widths)
        self.blocks = nn.Sequential(
            *(ResidualBlock(widths[i], widths[i + 1]) for i in range(len(widths) - 1))
        )
        self.head = nn.Linear(widths[-1], 1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        """Probability h_{H1} that the PU is present."""
        return torch.sigmoid(self.head(self.blocks(z))).squeeze(-1)


class SemanticTransceiver(nn.Module):
    """Shared encoder (α) and FC decoder (β)."""

    def __init__(self, arch: Architecture):
        super().__init__()
        self.arch = arch
        self.encoder = SemanticEncoder(arch)
        self.decoder = SemanticDecoder(arch)
        self.to(DTYPE)


@dataclass
class ModelParams:
    """Transceiver weights with the Adam moments and per-epoch loss log.

    ``optimizer_state`` maps each parameter name to its ``step``, ``exp_avg``
    and ``exp_avg_sq``; it is empty before the first training run.
    """

    arch: Architecture
    model: SemanticTransceiver
    optimizer_state: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    loss_log: list[float] = field(default_factory=list)

    def encoder_tensors(self) -> dict[str, np.ndarray]:
        return {
            name: p.detach().numpy().copy() for name, p in self.model.encoder.named_parameters()
        }

    def decoder_tensors(self) -> dict[str, np.ndarray]:
        return {
            name: p.detach().numpy().copy() for name, p in self.model.decoder.named_parameters()
        }

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.model.parameters())


def init_params(arch: Architecture, seed: int = 0) -> ModelParams:
    """Fresh transceiver with torch's default initialization under ``seed``."""
    torch.manual_seed(seed)
    return ModelParams(arch=arch, model=SemanticTransceiver(arch))


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    learning_rate: float = Field(1e-3, ge=0.0)
    batch_size: int = Field(512, ge=2)
    epochs: int = Field(300, ge=0)
    dataset_size: int = Field(8192, ge=2)
    train_snr_sense_db: float = -15.0
    train_snr_report_db: float = -10.0
    seed: int = 0
    reporting: ReportingMode = "aircomp"
    threads: int = Field(1, ge=1)
    architecture: Architecture | None = None


def covariance_to_input(rs) -> torch.Tensor:
    """Stack real and imaginary parts: (..., M, M) complex -> (..., 2, M, M) float64."""
    rs = np.asarray(rs, dtype=np.complex128)
    return torch.from_numpy(np.stack([rs.real, rs.imag], axis=-3).copy())


def pack_symbols(x: np.ndarray) -> np.ndarray:
    """Consecutive reals (2i, 2i+1) -> complex symbol i."""
    return x[..., 0::2] + 1j * x[..., 1::2]


def unpack_symbols(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.complex128)
    return np.stack([z.real, z.imag], axis=-1).reshape(*z.shape[:-1], 2 * z.shape[-1])


def _check_size(params: ModelParams, m: int) -> None:
    if m != params.arch.input_size:
        raise ConfigError(f"architecture expects {params.arch.input_size}x{params.arch.input_size} input, got M={m}")


def encode(params: ModelParams, r) -> np.ndarray:
    """Inference-mode encoder: covariance(s) (..., M, M) -> complex symbols (..., D)."""
    r = np.asarray(r, dtype=np.complex128)
    _check_size(params, r.shape[-1])
    batch = r.shape[:-2]
    params.model.eval()
    with torch.no_grad():
        out = params.model.encoder(covariance_to_input(r.reshape(-1, *r.shape[-2:])))
    return pack_symbols(out.numpy()).reshape(*batch, params.arch.n_symbols)


def decode(params: ModelParams, z):
    """Inference-mode decoder: received symbols (..., D) -> h_{H1} in (0, 1)."""
    z = np.asarray(z, dtype=np.complex128)
    if z.shape[-1] != params.arch.n_symbols:
        raise ConfigError(f"decoder expects {params.arch.n_symbols} symbols, got {z.shape[-1]}")
    batch = z.shape[:-1]
    params.model.eval()
    with torch.no_grad():
        out = params.model.decoder(torch.from_numpy(unpack_symbols(z.reshape(-1, z.shape[-1]))))
    probabilities = out.numpy().reshape(batch)
    return float(probabilities) if probabilities.ndim == 0 else probabilities


def decode_hypotheses(params: ModelParams, z) -> tuple[np.ndarray, np.ndarray]:
    """(h_{H1}, h_{H0}) with h_{H0} = 1 - h_{H1}."""
    h1 = np.asarray(decode(params, z))
    return h1, 1.0 - h1


def loss(predictions, labels) -> torch.Tensor:
    """Binary cross-entropy with natural log and predictions clipped to [1e-7, 1 - 1e-7]."""
    h = torch.clamp(torch.as_tensor(predictions, dtype=DTYPE), PROBABILITY_EPS, 1.0 - PROBABILITY_EPS)
    e = torch.as_tensor(labels, dtype=DTYPE)
    if h.shape != e.shape:
        raise ValueError(f"predictions {tuple(h.shape)} and labels {tuple(e.shape)} differ in shape")
    return -torch.mean(e * torch.log(h) + (1.0 - e) * torch.log(1.0 - h))


def channel_layer(symbols: torch.Tensor, draws: ChannelDraws) -> torch.Tensor:
    """Differentiable replay of a reporting use.

    Args:
        symbols: Encoder output of shape (B, K, 2D), consecutive (Re, Im) pairs.
        draws: Realized channel with gains of shape (B, K) and matching noise.

    Returns:
        Decoder input of shape (B, 2D). AirComp yields z; orthogonal reporting
        yields the average of the K received vectors.

    Gains and noise are constants to autograd.
    """
    k = symbols.shape[-2]
    y_re, y_im = symbols[..., 0::2], symbols[..., 1::2]
    g_re = torch.from_numpy(np.ascontiguousarray(draws.gains.real))[..., None]
    g_im = torch.from_numpy(np.ascontiguousarray(draws.gains.imag))[..., None]
    out_re = g_re * y_re - g_im * y_im
    out_im = g_re * y_im + g_im * y_re
    n_re = torch.from_numpy(np.ascontiguousarray(draws.noise.real))
    n_im = torch.from_numpy(np.ascontiguousarray(draws.noise.imag))
    if draws.mode == "aircomp":
        z_re = out_re.sum(dim=-2) / k + n_re
        z_im = out_im.sum(dim=-2) / k + n_im
    else:
        z_re = (out_re + n_re).sum(dim=-2) / k
        z_im = (out_im + n_im).sum(dim=-2) / k
    return torch.stack([z_re, z_im], dim=-1).flatten(start_dim=-2)


@contextmanager
def divergence_guard(model: nn.Module) -> Iterator[None]:
    """Raise ``TrainingDivergedError`` naming the first layer with a non-finite output."""

    def check(name: str):
        def hook(module, inputs, output):
            if isinstance(output, torch.Tensor) and not torch.isfinite(output).all():
                raise TrainingDivergedError(name or "model")

        return hook

    handles = [
        module.register_forward_hook(check(name))
        for name, module in model.named_modules()
        if not list(module.children())
    ]
    try:
        yield
    finally:
        for handle in handles:
            handle.remove()


def batch_inputs(batch: Sequence[CovarianceSample]) -> tuple[torch.Tensor, torch.Tensor]:
    """Network inputs (B, K, 2, M, M) and labels (B,) of a list of slots."""
    if not batch:
        raise ValueError("batch must not be empty")
    inputs = covariance_to_input(np.stack([s.covariances for s in batch]))
    labels = torch.tensor([s.label for s in batch], dtype=DTYPE)
    return inputs, labels


def pipeline_loss(
    model: SemanticTransceiver, inputs: torch.Tensor, labels: torch.Tensor, draws: ChannelDraws
) -> torch.Tensor:
    """Training-mode loss of encoder -> channel -> decoder on fixed channel draws."""
    b, k = inputs.shape[:2]
    symbols = model.encoder(inputs.flatten(0, 1)).reshape(b, k, -1)
    z = channel_layer(symbols, draws)
    return loss(model.decoder(z), labels)


def forward_train(
    params: ModelParams,
    batch: Sequence[CovarianceSample],
    cfg: ScenarioConfig,
    stream: RngStream,
    draws: ChannelDraws | None = None,
    mode: ReportingMode = "aircomp",
) -> tuple[float, dict[str, np.ndarray]]:
    """One forward and reverse pass over a batch.

    Args:
        params: Transceiver to differentiate; its gradients are overwritten.
        batch: At least two labeled slots, each with K covariances.
        cfg: Scenario describing the reporting channel.
        stream: Source of fresh fades, estimation errors and noise.
        draws: Replay these channel draws instead (gradient checks).
        mode: Reporting mode used when drawing a fresh channel.

    Returns:
        The batch loss and the gradient of every named parameter.
    """
    params.arch.check_scenario(cfg)
    if len(batch) < 2:
        raise ConfigError(
            f"training batch needs at least 2 slots for batch normalization, got {len(batch)}"
        )
    inputs, labels = batch_inputs(batch)
    if draws is None:
        draws = draw_reporting_channel(cfg, stream, params.arch.n_symbols, mode, (len(batch),))
    model = params.model
    model.train()
    model.zero_grad(set_to_none=True)
    with divergence_guard(model):
        value = pipeline_loss(model, inputs, labels, draws)
    if not torch.isfinite(value):
        raise TrainingDivergedError("loss", f"value {value.item()}")
    value.backward()
    gradients = {
        name: (p.grad.detach().numpy().copy() if p.grad is not None else np.zeros(tuple(p.shape)))
        for name, p in model.named_parameters()
    }
    return float(value.detach()), gradients


def finite_difference_check(
    params: ModelParams,
    batch: Sequence[CovarianceSample],
    cfg: ScenarioConfig,
    draws: ChannelDraws,
    n_checks: int = 200,
    step: float = 1e-4,
    seed: int = 0,
) -> float:
    """Largest relative gap between backprop and central-difference gradients.

    ``n_checks`` scalar parameters are picked at random across all tensors; the
    difference step is ``step * max(|w|, 0.01)``. Gradients below 1e-4 are
    compared in absolute terms.
    """
    _, gradients = forward_train(params, batch, cfg, RngStream(seed), draws=draws)
    inputs, labels = batch_inputs(batch)
    named = dict(params.model.named_parameters())
    flat_index = [(name, i) for name, p in named.items() for i in range(p.numel())]
    picks = RngStream(seed, lane=(1,)).permutation(len(flat_index))[:n_checks]
    worst = 0.0
    with torch.no_grad():
        for pick in picks:
            name, i = flat_index[pick]
            flat = named[name].view(-1)
            original = flat[i].item()
            h = step * max(abs(original), 1e-2)
            flat[i] = original + h
            upper = pipeline_loss(params.model, inputs, labels, draws).item()
            flat[i] = original - h
            lower = pipeline_loss(params.model, inputs, labels, draws).item()
            flat[i] = original
            numeric = (upper - lower) / (2.0 * h)
            analytic = float(gradients[name].reshape(-1)[i])
            scale = max(abs(numeric), abs(analytic), 1e-4)
            worst = max(worst, abs(numeric - analytic) / scale)
    return worst


def _export_optimizer_state(
    model: SemanticTransceiver, optimizer: torch.optim.Optimizer
) -> dict[str, dict[str, np.ndarray]]:
    state = {}
    for name, p in model.named_parameters():
        entry = optimizer.state.get(p)
        if not entry:
            continue
        state[name] = {
            "step": np.asarray(float(entry["step"]), dtype=float),
            "exp_avg": entry["exp_avg"].detach().numpy().copy(),
            "exp_avg_sq": entry["exp_avg_sq"].detach().numpy().copy(),
        }
    return state


def _restore_optimizer_state(
    model: SemanticTransceiver,
    optimizer: torch.optim.Optimizer,
    state: dict[str, dict[str, np.ndarray]],
) -> None:
    for name, p in model.named_parameters():
        if name not in state:
            continue
        entry = state[name]
        optimizer.state[p] = {
            "step": torch.tensor(float(entry["step"])),
            "exp_avg": torch.from_numpy(np.array(entry["exp_avg"], dtype=np.float64)),
            "exp_avg_sq": torch.from_numpy(np.array(entry["exp_avg_sq"], dtype=np.float64)),
        }


def generate_dataset(
    cfg: ScenarioConfig, size: int, seed: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """``size`` slots with equiprobable labels (exactly half carry the PU when even)."""
    labels = np.zeros(size, dtype=np.int8)
    labels[: size // 2] = 1
    labels = labels[RngStream(seed, lane=(LABEL_LANE,)).permutation(size)]
    slots = [generate_slot(cfg, int(e), RngStream(seed, i, (DATA_LANE,))) for i, e in enumerate(labels)]
    return batch_inputs(slots)


def train(
    params: ModelParams,
    tcfg: TrainConfig,
    scfg: ScenarioConfig,
    progress: bool = False,
) -> ModelParams:
    """Mini-batch Adam over a freshly generated dataset.

    The scenario's sensing and reporting SNRs are replaced by the training
    SNRs; every mini-batch sees fresh reporting-channel draws. The input
    ``params`` is left untouched.

    ``tcfg.threads`` sets torch's intra-op thread count for the duration of
    the call only.

    Returns:
        Trained parameters with the optimizer moments and one mean loss per epoch
        appended to the loss log.
    """
    params.arch.check_scenario(scfg)
    previous_threads = torch.get_num_threads()
    torch.set_num_threads(tcfg.threads)
    try:
        return _fit(params, tcfg, scfg, progress)
    finally:
        torch.set_num_threads(previous_threads)


def _fit(
    params: ModelParams, tcfg: TrainConfig, scfg: ScenarioConfig, progress: bool
) -> ModelParams:
    cfg = scfg.with_updates(
        snr_sense_db=tcfg.train_snr_sense_db, snr_report_db=tcfg.train_snr_report_db
    )
    model = copy.deepcopy(params.model)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=tcfg.learning_rate, betas=(0.9, 0.999), eps=1e-8
    )
    _restore_optimizer_state(model, optimizer, params.optimizer_state)
    loss_log = list(params.loss_log)
    if tcfg.epochs == 0:
        return ModelParams(params.arch, model, copy.deepcopy(params.optimizer_state), loss_log)

    logger.info(
        "generating %d training slots (K=%d, M=%d, N=%d)", tcfg.dataset_size, cfg.K, cfg.M, cfg.N
    )
    inputs, labels = generate_dataset(cfg, tcfg.dataset_size, tcfg.seed)
    n_symbols = params.arch.n_symbols
    model.train()
    epochs = tqdm(range(tcfg.epochs), desc="train", disable=not progress)
    for epoch in epochs:
        order = RngStream(tcfg.seed, epoch, (SHUFFLE_LANE,)).permutation(tcfg.dataset_size)
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, tcfg.dataset_size, tcfg.batch_size)):
            index = torch.from_numpy(order[start : start + tcfg.batch_size])
            if len(index) < 2:
                # batch norm needs two samples
                continue
            channel = RngStream(tcfg.seed, epoch, (CHANNEL_LANE, b))
            draws = draw_reporting_channel(cfg, channel, n_symbols, tcfg.reporting, (len(index),))
            optimizer.zero_grad(set_to_none=True)
            with divergence_guard(model):
                value = pipeline_loss(model, inputs[index], labels[index], draws)
            if not torch.isfinite(value):
                raise TrainingDivergedError("loss", f"epoch {epoch + 1}, batch {b}")
            value.backward()
            optimizer.step()
            total += value.item() * len(index)
            seen += len(index)
        mean_loss = total / seen
        loss_log.append(mean_loss)
        epochs.set_postfix(loss=f"{mean_loss:.4f}")
        logger.info("epoch %d/%d mean loss %.6f", epoch + 1, tcfg.epochs, mean_loss)

    return ModelParams(params.arch, model, _export_optimizer_state(model, optimizer), loss_log)


def smoothed_losses(loss_log: Sequence[float], window: int = 5) -> np.ndarray:
    """Trailing moving average of the loss log."""
    values = np.asarray(loss_log, dtype=float)
    if values.size < window:
        return values.copy()
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")

