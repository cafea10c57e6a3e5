"""Binary weight container ("EAKW") for model bundles.

Layout, all little-endian:
    magic b"EAKW" | u32 version | 8 x u32 config (ModelConfig.FIELD_ORDER)
    u32 n_tensors | directory entries | float32 payloads in directory order
Directory entry: u32 name_len | UTF-8 name | u32 rank | rank x u32 dims | u8 dtype
Dense layers store "<layer>.weight"; factored layers store "<layer>.lr_a" and
"<layer>.lr_b". Biases, when present, are "<layer>.bias".
"""

import struct
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np
from pydantic import ValidationError

from src.errors import ContainerFormatError
from src.logging_config import get_logger
from src.model_core import (
    AttentionParams,
    ConvFrontend,
    DenseLinear,
    FactoredLinear,
    LayerNormParams,
    LinearLayer,
    ModelBundle,
    ModelConfig,
    ResidualBlock,
)

logger = get_logger(__name__)

MAGIC = b"EAKW"
FORMAT_VERSION = 1
DTYPE_F32 = 0

PathLike = Union[str, Path]

_ATTN_PARTS = ("q", "k", "v", "out")


def _linear_tensors(name: str, layer: LinearLayer) -> Iterator[tuple[str, np.ndarray]]:
    if isinstance(layer, FactoredLinear):
        yield f"{name}.lr_a", layer.a
        yield f"{name}.lr_b", layer.b
    else:
        yield f"{name}.weight", layer.weight
    if layer.bias is not None:
        yield f"{name}.bias", layer.bias


def _ln_tensors(name: str, ln: LayerNormParams) -> Iterator[tuple[str, np.ndarray]]:
    yield f"{name}.weight", ln.weight
    yield f"{name}.bias", ln.bias


def _block_tensors(prefix: str, block: ResidualBlock) -> Iterator[tuple[str, np.ndarray]]:
    for part in _ATTN_PARTS:
        yield from _linear_tensors(f"{prefix}.attn_{part}", getattr(block.attn, part))
    yield from _ln_tensors(f"{prefix}.attn_ln", block.attn_ln)
    if block.cross_attn is not None:
        for part in _ATTN_PARTS:
            yield from _linear_tensors(f"{prefix}.cross_{part}", getattr(block.cross_attn, part))
        yield from _ln_tensors(f"{prefix}.cross_ln", block.cross_attn_ln)
    yield from _linear_tensors(f"{prefix}.mlp_fc1", block.mlp_fc1)
    yield from _linear_tensors(f"{prefix}.mlp_fc2", block.mlp_fc2)
    yield from _ln_tensors(f"{prefix}.mlp_ln", block.mlp_ln)


def iter_tensors(bundle: ModelBundle) -> Iterator[tuple[str, np.ndarray]]:
    """All named tensors of a bundle in canonical container order"""
    yield "encoder.conv1.weight", bundle.conv.conv1_weight
    yield "encoder.conv1.bias", bundle.conv.conv1_bias
    yield "encoder.conv2.weight", bundle.conv.conv2_weight
    yield "encoder.conv2.bias", bundle.conv.conv2_bias
    for i, block in enumerate(bundle.encoder_layers):
        yield from _block_tensors(f"encoder.layers.{i}", block)
    yield from _ln_tensors("encoder.ln_post", bundle.encoder_ln)
    yield "decoder.token_embedding", bundle.token_embedding
    yield "decoder.positional_embedding", bundle.decoder_positional
    for i, block in enumerate(bundle.decoder_layers):
        yield from _block_tensors(f"decoder.layers.{i}", block)
    yield from _ln_tensors("decoder.ln", bundle.decoder_ln)


def bundle_to_bytes(bundle: ModelBundle) -> bytes:
    """Serialize a bundle to container bytes"""
    tensors = list(iter_tensors(bundle))
    header = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    header.append(struct.pack("<8I", *(getattr(bundle.config, f) for f in ModelConfig.FIELD_ORDER)))
    header.append(struct.pack("<I", len(tensors)))
    payloads = []
    for name, arr in tensors:
        encoded = name.encode("utf-8")
        header.append(struct.pack("<I", len(encoded)) + encoded)
        header.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        header.append(struct.pack("<B", DTYPE_F32))
        payloads.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(header + payloads)


def save_bundle(bundle: ModelBundle, path: PathLike) -> None:
    """Write a bundle to a container file"""
    data = bundle_to_bytes(bundle)
    Path(path).write_bytes(data)
    logger.info(f"Saved bundle to {path} ({len(data)} bytes)")


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def unpack(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.blob):
            raise ContainerFormatError("container truncated")
        values = struct.unpack_from(fmt, self.blob, self.offset)
        self.offset += size
        return values

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.blob):
            raise ContainerFormatError("container truncated")
        chunk = self.blob[self.offset:self.offset + n]
        self.offset += n
        return chunk


def _read_directory(blob: bytes) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    reader = _Reader(blob)
    if reader.take(4) != MAGIC:
        raise ContainerFormatError("bad magic: not an EAKW weight container")
    (version,) = reader.unpack("<I")
    if version != FORMAT_VERSION:
        raise ContainerFormatError(f"container version {version} not supported (expected {FORMAT_VERSION})")
    fields = reader.unpack("<8I")
    try:
        config = ModelConfig(**dict(zip(ModelConfig.FIELD_ORDER, fields)))
    except ValidationError as e:
        raise ContainerFormatError(f"invalid config block: {e}") from e

    (n_tensors,) = reader.unpack("<I")
    directory = []
    for _ in range(n_tensors):
        (name_len,) = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<I")
        dims = reader.unpack(f"<{rank}I")
        (dtype,) = reader.unpack("<B")
        if dtype != DTYPE_F32:
            raise ContainerFormatError(f"{name}: unsupported dtype tag {dtype}")
        directory.append((name, dims))

    tensors: dict[str, np.ndarray] = {}
    for name, dims in directory:
        if name in tensors:
            raise ContainerFormatError(f"duplicate tensor {name}")
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(reader.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise ContainerFormatError(f"{name}: non-finite weight")
        tensors[name] = arr
    if reader.offset != len(blob):
        raise ContainerFormatError(f"{len(blob) - reader.offset} trailing bytes after payloads")
    return config, tensors


class _TensorPool:
    """Pops named tensors so leftovers can be reported"""

    def __init__(self, tensors: dict[str, np.ndarray]):
        self.tensors = dict(tensors)

    def pop(self, name: str) -> np.ndarray:
        if name not in self.tensors:
            raise ContainerFormatError(f"missing tensor {name}")
        return self.tensors.pop(name)

    def pop_optional(self, name: str) -> Optional[np.ndarray]:
        return self.tensors.pop(name, None)

    def linear(self, name: str) -> LinearLayer:
        bias = self.pop_optional(f"{name}.bias")
        if f"{name}.weight" in self.tensors:
            return DenseLinear(weight=self.pop(f"{name}.weight"), bias=bias)
        if f"{name}.lr_a" in self.tensors:
            return FactoredLinear(a=self.pop(f"{name}.lr_a"), b=self.pop(f"{name}.lr_b"), bias=bias)
        raise ContainerFormatError(f"missing tensor {name}.weight (or {name}.lr_a/.lr_b)")

    def layer_norm(self, name: str) -> LayerNormParams:
        return LayerNormParams(weight=self.pop(f"{name}.weight"), bias=self.pop(f"{name}.bias"))

    def attention(self, prefix: str) -> AttentionParams:
        return AttentionParams(**{part: self.linear(f"{prefix}_{part}") for part in _ATTN_PARTS})

    def block(self, prefix: str, decoder: bool) -> ResidualBlock:
        return ResidualBlock(
            attn=self.attention(f"{prefix}.attn"),
            attn_ln=self.layer_norm(f"{prefix}.attn_ln"),
            mlp_fc1=self.linear(f"{prefix}.mlp_fc1"),
            mlp_fc2=self.linear(f"{prefix}.mlp_fc2"),
            mlp_ln=self.layer_norm(f"{prefix}.mlp_ln"),
            cross_attn=self.attention(f"{prefix}.cross") if decoder else None,
            cross_attn_ln=self.layer_norm(f"{prefix}.cross_ln") if decoder else None,
        )


def bundle_from_bytes(blob: bytes) -> ModelBundle:
    """Parse and fully validate container bytes"""
    config, tensors = _read_directory(blob)
    pool = _TensorPool(tensors)
    try:
        conv = ConvFrontend(
            conv1_weight=pool.pop("encoder.conv1.weight"),
            conv1_bias=pool.pop("encoder.conv1.bias"),
            conv2_weight=pool.pop("encoder.conv2.weight"),
            conv2_bias=pool.pop("encoder.conv2.bias"),
        )
        encoder_layers = tuple(pool.block(f"encoder.layers.{i}", decoder=False) for i in range(config.n_audio_layers))
        encoder_ln = pool.layer_norm("encoder.ln_post")
        token_embedding = pool.pop("decoder.token_embedding")
        positional = pool.pop("decoder.positional_embedding")
        decoder_layers = tuple(pool.block(f"decoder.layers.{i}", decoder=True) for i in range(config.n_text_layers))
        decoder_ln = pool.layer_norm("decoder.ln")
        if pool.tensors:
            raise ContainerFormatError(f"unexpected tensors: {sorted(pool.tensors)[:5]}")
        return ModelBundle(
            config=config,
            conv=conv,
            encoder_layers=encoder_layers,
            encoder_ln=encoder_ln,
            token_embedding=token_embedding,
            decoder_positional=positional,
            decoder_layers=decoder_layers,
            decoder_ln=decoder_ln,
        )
    except ContainerFormatError:
        raise
    except ValueError as e:
        raise ContainerFormatError(f"tensor inconsistent with config: {e}") from e


def load_bundle(path: PathLike) -> ModelBundle:
    """Read a container file into a validated ModelBundle"""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise ContainerFormatError(f"Cannot read weight container {path}: {e}") from e
    bundle = bundle_from_bytes(blob)
    logger.info(
        f"Loaded bundle {path.name}: d_model={bundle.config.d_model}, "
        f"{bundle.config.n_audio_layers}+{bundle.config.n_text_layers} layers"
    )
    return bundle
