"""The separation network: encoder, decomposer, decoder and the indicator gate.

All three submodules are stacks of Inception-style blocks (four parallel
same-padded convolutions with kernel widths 3/5/11/15, concatenated on the
channel axis, ReLU). The decomposer ends in a 1x1 projection squashed through
a sigmoid to produce the attenuation vector; the decoder ends in a linear 1x1
projection back to one channel. No fully connected layer appears anywhere, so
the network accepts inputs of any length.

Given input x and an indicator constant c in {0, 1}::

    z      = encoder(x)
    v_atte = sigmoid(decomposer(x))
    z_gate = |c - v_atte| * z
    y_hat  = decoder(z_gate)

c = 0 reconstructs the clean signal, c = 1 the artifact; the two gates sum to
one elementwise, so the gated embeddings sum back to z.

Weight files (extension .dsw) are little-endian: magic "DSW1", u32 tensor
count, then per tensor: u16 name length, UTF-8 name, u8 ndim, ndim x u32
dims, dims-product x f32 values. Names follow the dotted scheme
"encoder.block0.branch3.weight" / "decomposer.proj.bias" etc.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .autodiff import (
    Tensor,
    conv1d_same,
    elementwise_mul,
    elementwise_sub_abs,
    multi_conv1d_same,
    relu,
    sigmoid,
)
from .errors import (
    FileFormatError,
    IncompleteModelError,
    ShapeMismatchError,
    TruncatedFileError,
)

KERNEL_WIDTHS = (3, 5, 11, 15)

WEIGHT_MAGIC = b"DSW1"


class IndicatorMode(IntEnum):
    """Indicator constant selecting what the decoder reconstructs."""

    SIGNAL = 0
    ARTIFACT = 1


@dataclass(frozen=True)
class ArchConfig:
    """Width/depth knobs. Kernel widths are fixed by design.

    c_branch: output channels per convolution branch (block output is 4x this).
    blocks: Inception blocks per submodule (encoder / decomposer / decoder).
    """

    c_branch: int = 8
    blocks: int = 2

    @property
    def embed_channels(self) -> int:
        return 4 * self.c_branch

    def validate(self) -> None:
        if self.c_branch < 1:
            raise ValueError(f"c_branch must be >= 1, got {self.c_branch}")
        if self.blocks < 1:
            raise ValueError(f"blocks must be >= 1, got {self.blocks}")


# reference configuration small enough for exhaustive finite-difference checks
TINY_ARCH = ArchConfig(c_branch=2, blocks=2)


@dataclass
class InceptionBlockParams:
    """Four parallel conv branches (kernel widths 3/5/11/15) plus biases."""

    weights: list[Tensor]
    biases: list[Tensor]

    @property
    def in_channels(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_channels(self) -> int:
        return sum(w.shape[0] for w in self.weights)


@dataclass
class NetworkParams:
    """The complete learnable parameter set of encoder, decomposer and decoder."""

    encoder: list[InceptionBlockParams]
    decomposer: list[InceptionBlockParams]
    decomposer_proj_weight: Tensor
    decomposer_proj_bias: Tensor
    decoder: list[InceptionBlockParams]
    decoder_proj_weight: Tensor
    decoder_proj_bias: Tensor
    arch: ArchConfig = field(default_factory=ArchConfig)

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        """All parameters in a fixed, documented order."""
        out: list[tuple[str, Tensor]] = []
        for stage_name, blocks in (("encoder", self.encoder),
                                   ("decomposer", self.decomposer),
                                   ("decoder", self.decoder)):
            for bi, block in enumerate(blocks):
                for ki in range(len(KERNEL_WIDTHS)):
                    prefix = f"{stage_name}.block{bi}.branch{ki}"
                    out.append((f"{prefix}.weight", block.weights[ki]))
                    out.append((f"{prefix}.bias", block.biases[ki]))
        out.append(("decomposer.proj.weight", self.decomposer_proj_weight))
        out.append(("decomposer.proj.bias", self.decomposer_proj_bias))
        out.append(("decoder.proj.weight", self.decoder_proj_weight))
        out.append(("decoder.proj.bias", self.decoder_proj_bias))
        return out

    def all_tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.all_tensors())


def _expected_layout(arch: ArchConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Name -> shape table for a given architecture; the serialization contract."""
    ce = arch.embed_channels
    layout: list[tuple[str, tuple[int, ...]]] = []
    for stage, cin0 in (("encoder", 1), ("decomposer", 1), ("decoder", ce)):
        cin = cin0
        for bi in range(arch.blocks):
            for ki, k in enumerate(KERNEL_WIDTHS):
                layout.append((f"{stage}.block{bi}.branch{ki}.weight", (arch.c_branch, cin, k)))
                layout.append((f"{stage}.block{bi}.branch{ki}.bias", (arch.c_branch,)))
            cin = ce
    layout.append(("decomposer.proj.weight", (ce, ce, 1)))
    layout.append(("decomposer.proj.bias", (ce,)))
    layout.append(("decoder.proj.weight", (1, ce, 1)))
    layout.append(("decoder.proj.bias", (1,)))
    return layout


def init_weights(arch: ArchConfig = ArchConfig(), seed: int = 0) -> NetworkParams:
    """Fan-in-scaled uniform initialization, deterministic under seed.

    Conv weights are drawn from U(-s, s) with s = sqrt(6 / (Cin * K)); biases
    start at zero.
    """
    arch.validate()
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in _expected_layout(arch):
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            fan_in = shape[1] * shape[2]
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return _assemble(arch, tensors)


def _assemble(arch: ArchConfig, tensors: dict[str, Tensor]) -> NetworkParams:
    def block_list(stage: str) -> list[InceptionBlockParams]:
        blocks = []
        for bi in range(arch.blocks):
            ws = [tensors[f"{stage}.block{bi}.branch{ki}.weight"] for ki in range(4)]
            bs = [tensors[f"{stage}.block{bi}.branch{ki}.bias"] for ki in range(4)]
            blocks.append(InceptionBlockParams(ws, bs))
        return blocks

    return NetworkParams(
        encoder=block_list("encoder"),
        decomposer=block_list("decomposer"),
        decomposer_proj_weight=tensors["decomposer.proj.weight"],
        decomposer_proj_bias=tensors["decomposer.proj.bias"],
        decoder=block_list("decoder"),
        decoder_proj_weight=tensors["decoder.proj.weight"],
        decoder_proj_bias=tensors["decoder.proj.bias"],
        arch=arch,
    )


# --------------------------------------------------------------------------
# forward pass
# --------------------------------------------------------------------------

def inception_forward(x: Tensor, p: InceptionBlockParams) -> Tensor:
    """Four branch convolutions concatenated on channels, then ReLU."""
    return relu(multi_conv1d_same(x, p.weights, p.biases))


def forward(x: Tensor, params: NetworkParams, mode: IndicatorMode
            ) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Run the network on a standardized input batch.

    x must be [batch, 1, length]; multi-channel data is handled channel by
    channel at the caller. Returns (y_hat, embedding, attenuation, gated
    embedding) so the latent vectors can be inspected or dumped.
    """
    if x.ndim != 3 or x.shape[1] != 1:
        raise ValueError(f"forward expects a [batch, 1, length] input, got {x.shape}")
    z = x
    for block in params.encoder:
        z = inception_forward(z, block)
    h = x
    for block in params.decomposer:
        h = inception_forward(h, block)
    v_atte = sigmoid(conv1d_same(h, params.decomposer_proj_weight,
                                 params.decomposer_proj_bias))
    gate = elementwise_sub_abs(float(mode), v_atte)
    z_gated = elementwise_mul(gate, z)
    y = z_gated
    for block in params.decoder:
        y = inception_forward(y, block)
    y_hat = conv1d_same(y, params.decoder_proj_weight, params.decoder_proj_bias)
    return y_hat, z, v_atte, z_gated


def standardization_factor(samples: np.ndarray) -> float:
    """Per-segment scale: the standard deviation, or 1 for a flat segment."""
    sd = float(np.std(samples))
    return sd if sd > 0.0 else 1.0


def denoise_batch(params: NetworkParams, segments: np.ndarray,
                  mode: IndicatorMode = IndicatorMode.SIGNAL,
                  batch_size: int = 64) -> np.ndarray:
    """Run inference on [n, length] segments, undoing per-segment standardization.

    Each segment is divided by its own standard deviation before the forward
    pass and the output is multiplied back, so results are equivariant to the
    input scale.
    """
    segments = np.atleast_2d(np.asarray(segments, dtype=np.float64))
    n = segments.shape[0]
    out = np.empty_like(segments)
    for start in range(0, n, batch_size):
        chunk = segments[start:start + batch_size]
        scales = np.array([standardization_factor(s) for s in chunk])
        x = Tensor((chunk / scales[:, None])[:, None, :])
        y_hat = forward(x, params, mode)[0].data[:, 0, :]
        out[start:start + batch_size] = y_hat * scales[:, None]
    return out


def denoise_segment(params: NetworkParams, samples: np.ndarray,
                    mode: IndicatorMode = IndicatorMode.SIGNAL) -> np.ndarray:
    """Denoise (or extract the artifact from) one 1-D segment of any length."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise ValueError(f"expected a 1-D segment, got shape {samples.shape}")
    return denoise_batch(params, samples[None, :], mode)[0]


# --------------------------------------------------------------------------
# weight-file serialization
# --------------------------------------------------------------------------

def write_tensor_records(path: str | Path, records: list[tuple[str, np.ndarray]]) -> None:
    """Write named float arrays in the DSW1 record format (values cast to f32)."""
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records:
            arr = np.asarray(arr)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())


def read_tensor_records(path: str | Path) -> dict[str, np.ndarray]:
    """Read a DSW1 record file into name -> float64 arrays."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != WEIGHT_MAGIC:
        raise FileFormatError(f"{path}: bad magic {data[:4]!r}, expected {WEIGHT_MAGIC!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedFileError(f"{path}: truncated at byte {pos} (needed {n} more)")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n_values = int(np.prod(dims)) if ndim else 1
        values = np.frombuffer(take(4 * n_values), dtype="<f4").astype(np.float64)
        records[name] = values.reshape(dims)
    if pos != len(data):
        raise FileFormatError(f"{path}: {len(data) - pos} trailing bytes after {count} records")
    return records


def save_weights(params: NetworkParams, path: str | Path) -> None:
    """Serialize all parameters (32-bit values) to a DSW1 weight file."""
    write_tensor_records(path, [(n, t.data) for n, t in params.named_tensors()])


def load_weights(path: str | Path, arch: ArchConfig | None = None) -> NetworkParams:
    """Load a DSW1 weight file, validating names and shapes against the layout.

    If ``arch`` is omitted it is inferred from the stored records.
    """
    records = read_tensor_records(path)
    if arch is None:
        arch = _infer_arch(path, records)
    else:
        arch.validate()
    expected = dict(_expected_layout(arch))
    missing = sorted(set(expected) - set(records))
    if missing:
        raise IncompleteModelError(f"{path}: missing tensor records: {', '.join(missing)}")
    extra = sorted(set(records) - set(expected))
    if extra:
        raise FileFormatError(f"{path}: unexpected tensor records: {', '.join(extra)}")
    tensors: dict[str, Tensor] = {}
    for name, shape in expected.items():
        arr = records[name]
        if arr.shape != shape:
            raise ShapeMismatchError(
                f"{path}: tensor {name} has shape {arr.shape}, architecture requires {shape}")
        tensors[name] = Tensor(arr, requires_grad=True)
    return _assemble(arch, tensors)


def _infer_arch(path, records: dict[str, np.ndarray]) -> ArchConfig:
    key = "encoder.block0.branch0.weight"
    if key not in records:
        raise IncompleteModelError(f"{path}: missing tensor records: {key}")
    first = records[key]
    if first.ndim != 3:
        raise ShapeMismatchError(f"{path}: tensor {key} must be 3-D, got {first.ndim}-D")
    blocks = 0
    while f"encoder.block{blocks}.branch0.weight" in records:
        blocks += 1
    arch = ArchConfig(c_branch=int(first.shape[0]), blocks=blocks)
    arch.validate()
    return arch
