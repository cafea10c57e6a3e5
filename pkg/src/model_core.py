"""Encoder-decoder transformer inference (Whisper-family shapes).

Linear layers are either dense or rank-factored; everything runs in float32
numpy. Decoding is greedy with a key/value cache.
"""

import dataclasses
from dataclasses import dataclass
from typing import Callable, ClassVar, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from src.audio_frontend import MelFeatures
from src.errors import InferenceError, ShapeMismatchError
from src.kernels import (
    FlopCounter,
    add,
    add_bias,
    conv1d,
    gelu,
    layer_norm,
    matmul,
    scale,
    scoped,
    softmax,
)
from src.logging_config import get_logger
from src.tokenizer import ByteTokenizer, Tokenizer

logger = get_logger(__name__)

LinearKind = Literal["attn_q", "attn_k", "attn_v", "attn_out", "mlp_fc1", "mlp_fc2"]
LINEAR_KINDS: tuple[str, ...] = ("attn_q", "attn_k", "attn_v", "attn_out", "mlp_fc1", "mlp_fc2")

# Called with (layer_id, input activations) before each encoder linear layer
CaptureFn = Callable[[str, np.ndarray], None]


class ModelConfig(BaseModel):
    """Architecture shape; stored as eight u32 values in the weight container"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    FIELD_ORDER: ClassVar[tuple[str, ...]] = (
        "n_mels", "n_audio_ctx", "n_audio_layers", "n_text_layers",
        "d_model", "n_heads", "n_vocab", "n_text_ctx",
    )

    n_mels: int = 80
    n_audio_ctx: int
    n_audio_layers: int
    n_text_layers: int
    d_model: int
    n_heads: int
    n_vocab: int
    n_text_ctx: int

    @model_validator(mode="after")
    def _check_shape(self) -> "ModelConfig":
        for name in self.FIELD_ORDER:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_model % 2 != 0:
            raise ValueError(f"d_model={self.d_model} must be even for sinusoidal positions")
        if self.n_vocab < 4:
            raise ValueError(f"n_vocab={self.n_vocab} leaves no room for special tokens")
        return self

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_mlp(self) -> int:
        return 4 * self.d_model

    @property
    def n_frames(self) -> int:
        """Mel frames consumed per encode (the stride-2 conv halves them)"""
        return 2 * self.n_audio_ctx

    @classmethod
    def preset(cls, name: str) -> "ModelConfig":
        """Shapes of the English-only Whisper checkpoints"""
        presets = {
            "tiny.en": dict(n_audio_layers=4, n_text_layers=4, d_model=384, n_heads=6),
            "base.en": dict(n_audio_layers=6, n_text_layers=6, d_model=512, n_heads=8),
            "small.en": dict(n_audio_layers=12, n_text_layers=12, d_model=768, n_heads=12),
        }
        if name not in presets:
            raise ValueError(f"unknown preset '{name}', choose from {sorted(presets)}")
        return cls(n_mels=80, n_audio_ctx=1500, n_vocab=51864, n_text_ctx=448, **presets[name])


def _check_finite(name: str, *arrays: Optional[np.ndarray]) -> None:
    for arr in arrays:
        if arr is not None and not np.all(np.isfinite(arr)):
            raise ValueError(f"{name}: non-finite entries")


@dataclass(frozen=True)
class DenseLinear:
    """y = x W^T + b, W: [d_out x d_in]"""
    weight: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.weight.ndim != 2:
            raise ShapeMismatchError(f"dense weight must be 2-D, got {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.d_out,):
            raise ShapeMismatchError(f"bias shape {self.bias.shape} does not match d_out={self.d_out}")
        _check_finite("dense layer", self.weight, self.bias)

    @property
    def d_in(self) -> int:
        return int(self.weight.shape[1])

    @property
    def d_out(self) -> int:
        return int(self.weight.shape[0])

    @property
    def rank(self) -> Optional[int]:
        return None

    @property
    def param_count(self) -> int:
        return self.d_in * self.d_out + (self.d_out if self.bias is not None else 0)


@dataclass(frozen=True)
class FactoredLinear:
    """y = (x B^T) A^T + b, A: [d_out x k], B: [k x d_in]"""
    a: np.ndarray
    b: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.a.ndim != 2 or self.b.ndim != 2 or self.a.shape[1] != self.b.shape[0]:
            raise ShapeMismatchError(f"factor shapes {self.a.shape} and {self.b.shape} do not chain")
        if not 1 <= self.rank <= min(self.d_in, self.d_out):
            raise ShapeMismatchError(f"rank {self.rank} outside [1, {min(self.d_in, self.d_out)}]")
        if self.bias is not None and self.bias.shape != (self.d_out,):
            raise ShapeMismatchError(f"bias shape {self.bias.shape} does not match d_out={self.d_out}")
        _check_finite("factored layer", self.a, self.b, self.bias)

    @property
    def d_in(self) -> int:
        return int(self.b.shape[1])

    @property
    def d_out(self) -> int:
        return int(self.a.shape[0])

    @property
    def rank(self) -> int:
        return int(self.a.shape[1])

    @property
    def param_count(self) -> int:
        return self.rank * (self.d_in + self.d_out) + (self.d_out if self.bias is not None else 0)

    def dense_weight(self) -> np.ndarray:
        return (self.a.astype(np.float64) @ self.b.astype(np.float64)).astype(np.float32)


LinearLayer = Union[DenseLinear, FactoredLinear]


@dataclass(frozen=True)
class LayerNormParams:
    weight: np.ndarray
    bias: np.ndarray

    @property
    def param_count(self) -> int:
        return int(self.weight.size + self.bias.size)


@dataclass(frozen=True)
class AttentionParams:
    q: LinearLayer
    k: LinearLayer
    v: LinearLayer
    out: LinearLayer

    @property
    def param_count(self) -> int:
        return sum(layer.param_count for layer in (self.q, self.k, self.v, self.out))


@dataclass(frozen=True)
class ResidualBlock:
    """Pre-norm block; decoder blocks also carry cross-attention"""
    attn: AttentionParams
    attn_ln: LayerNormParams
    mlp_fc1: LinearLayer
    mlp_fc2: LinearLayer
    mlp_ln: LayerNormParams
    cross_attn: Optional[AttentionParams] = None
    cross_attn_ln: Optional[LayerNormParams] = None

    def linear(self, kind: str) -> LinearLayer:
        if kind.startswith("attn_"):
            return getattr(self.attn, kind[len("attn_"):])
        if kind in ("mlp_fc1", "mlp_fc2"):
            return getattr(self, kind)
        raise KeyError(f"unknown linear kind: {kind}")

    def with_linear(self, kind: str, layer: LinearLayer) -> "ResidualBlock":
        if kind.startswith("attn_"):
            attn = dataclasses.replace(self.attn, **{kind[len("attn_"):]: layer})
            return dataclasses.replace(self, attn=attn)
        if kind in ("mlp_fc1", "mlp_fc2"):
            return dataclasses.replace(self, **{kind: layer})
        raise KeyError(f"unknown linear kind: {kind}")

    @property
    def param_count(self) -> int:
        total = self.attn.param_count + self.attn_ln.param_count
        total += self.mlp_fc1.param_count + self.mlp_fc2.param_count + self.mlp_ln.param_count
        if self.cross_attn is not None:
            total += self.cross_attn.param_count + self.cross_attn_ln.param_count
        return total


@dataclass(frozen=True)
class ConvFrontend:
    """conv1: [d x n_mels x 3] stride 1, conv2: [d x d x 3] stride 2"""
    conv1_weight: np.ndarray
    conv1_bias: np.ndarray
    conv2_weight: np.ndarray
    conv2_bias: np.ndarray

    @property
    def param_count(self) -> int:
        return int(self.conv1_weight.size + self.conv1_bias.size + self.conv2_weight.size + self.conv2_bias.size)


@dataclass(frozen=True)
class ModelBundle:
    """Config plus all weights; immutable once built"""
    config: ModelConfig
    conv: ConvFrontend
    encoder_layers: tuple[ResidualBlock, ...]
    encoder_ln: LayerNormParams
    token_embedding: np.ndarray
    decoder_positional: np.ndarray
    decoder_layers: tuple[ResidualBlock, ...]
    decoder_ln: LayerNormParams

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        """Check every tensor shape against the config"""
        cfg = self.config
        d, d_mlp = cfg.d_model, cfg.d_mlp

        def expect(name: str, arr: np.ndarray, shape: tuple[int, ...]) -> None:
            if arr.shape != shape:
                raise ShapeMismatchError(f"{name}: shape {arr.shape}, expected {shape}")

        def expect_linear(name: str, layer: LinearLayer, d_in: int, d_out: int) -> None:
            if (layer.d_in, layer.d_out) != (d_in, d_out):
                raise ShapeMismatchError(f"{name}: {layer.d_in}->{layer.d_out}, expected {d_in}->{d_out}")

        def expect_block(prefix: str, block: ResidualBlock, decoder: bool) -> None:
            for kind in LINEAR_KINDS:
                d_in = d_mlp if kind == "mlp_fc2" else d
                d_out = d_mlp if kind == "mlp_fc1" else d
                expect_linear(f"{prefix}.{kind}", block.linear(kind), d_in, d_out)
            for ln_name in ("attn_ln", "mlp_ln"):
                ln = getattr(block, ln_name)
                expect(f"{prefix}.{ln_name}.weight", ln.weight, (d,))
                expect(f"{prefix}.{ln_name}.bias", ln.bias, (d,))
            if decoder != (block.cross_attn is not None):
                raise ShapeMismatchError(f"{prefix}: cross-attention present only in decoder blocks")
            if block.cross_attn is not None:
                for part in ("q", "k", "v", "out"):
                    expect_linear(f"{prefix}.cross_{part}", getattr(block.cross_attn, part), d, d)
                expect(f"{prefix}.cross_attn_ln.weight", block.cross_attn_ln.weight, (d,))

        expect("encoder.conv1.weight", self.conv.conv1_weight, (d, cfg.n_mels, 3))
        expect("encoder.conv1.bias", self.conv.conv1_bias, (d,))
        expect("encoder.conv2.weight", self.conv.conv2_weight, (d, d, 3))
        expect("encoder.conv2.bias", self.conv.conv2_bias, (d,))
        if len(self.encoder_layers) != cfg.n_audio_layers:
            raise ShapeMismatchError(f"{len(self.encoder_layers)} encoder layers, config says {cfg.n_audio_layers}")
        if len(self.decoder_layers) != cfg.n_text_layers:
            raise ShapeMismatchError(f"{len(self.decoder_layers)} decoder layers, config says {cfg.n_text_layers}")
        for i, block in enumerate(self.encoder_layers):
            expect_block(f"encoder.layers.{i}", block, decoder=False)
        for i, block in enumerate(self.decoder_layers):
            expect_block(f"decoder.layers.{i}", block, decoder=True)
        expect("encoder.ln_post.weight", self.encoder_ln.weight, (d,))
        expect("decoder.token_embedding", self.token_embedding, (cfg.n_vocab, d))
        expect("decoder.positional_embedding", self.decoder_positional, (cfg.n_text_ctx, d))
        expect("decoder.ln.weight", self.decoder_ln.weight, (d,))

    @property
    def tokenizer(self) -> ByteTokenizer:
        return ByteTokenizer(self.config.n_vocab)


class Transcript(BaseModel):
    """Greedy decoding output; token_ids exclude the start sequence"""
    token_ids: list[int]
    text: str
    n_decoded_tokens: int


class ParamCount(BaseModel):
    encoder: int
    decoder: int
    total: int


def linear_apply(layer: LinearLayer, x: np.ndarray, counter: Optional[FlopCounter] = None) -> np.ndarray:
    """Apply a dense or factored layer to x: [T x d_in]"""
    if x.ndim != 2 or x.shape[1] != layer.d_in:
        raise ShapeMismatchError(f"input shape {x.shape} incompatible with d_in={layer.d_in}")
    if isinstance(layer, FactoredLinear):
        y = matmul(matmul(x, layer.b.T, counter), layer.a.T, counter)
    else:
        y = matmul(x, layer.weight.T, counter)
    return add_bias(y, layer.bias, counter)


def param_count(bundle: ModelBundle) -> ParamCount:
    """Exact element counts; encoder positions are computed, not stored"""
    encoder = bundle.conv.param_count + bundle.encoder_ln.param_count
    encoder += sum(block.param_count for block in bundle.encoder_layers)
    decoder = int(bundle.token_embedding.size + bundle.decoder_positional.size) + bundle.decoder_ln.param_count
    decoder += sum(block.param_count for block in bundle.decoder_layers)
    return ParamCount(encoder=encoder, decoder=decoder, total=encoder + decoder)


def sinusoids(length: int, channels: int, max_timescale: float = 10000.0) -> np.ndarray:
    """Sinusoidal encoder positions [length x channels]"""
    log_timescale_increment = np.log(max_timescale) / (channels // 2 - 1) if channels > 2 else 0.0
    inv_timescales = np.exp(-log_timescale_increment * np.arange(channels // 2))
    scaled_time = np.arange(length)[:, None] * inv_timescales[None, :]
    return np.concatenate([np.sin(scaled_time), np.cos(scaled_time)], axis=1).astype(np.float32)


def _linear(
    layer: LinearLayer,
    x: np.ndarray,
    layer_id: str,
    counter: Optional[FlopCounter],
    capture: Optional[CaptureFn] = None,
) -> np.ndarray:
    if capture is not None:
        capture(layer_id, x)
    with scoped(counter, layer_id):
        return linear_apply(layer, x, counter)


def _ln(params: LayerNormParams, x: np.ndarray, counter: Optional[FlopCounter]) -> np.ndarray:
    return layer_norm(x, params.weight, params.bias, counter)


def attend(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    n_heads: int,
    counter: Optional[FlopCounter] = None,
) -> np.ndarray:
    """softmax(Q K^T / sqrt(d_head)) V per head; q: [T x d], k/v: [S x d]"""
    t, d = q.shape
    s = k.shape[0]
    d_head = d // n_heads
    q = scale(q, d_head ** -0.5, counter)
    qh = q.reshape(t, n_heads, d_head).transpose(1, 0, 2)
    kh = k.reshape(s, n_heads, d_head).transpose(1, 2, 0)
    vh = v.reshape(s, n_heads, d_head).transpose(1, 0, 2)
    weights = softmax(matmul(qh, kh, counter), counter)
    out = matmul(weights.astype(np.float32), vh, counter)
    return out.transpose(1, 0, 2).reshape(t, d)


def _encoder_block(
    block: ResidualBlock,
    x: np.ndarray,
    n_heads: int,
    prefix: str,
    counter: Optional[FlopCounter],
    capture: Optional[CaptureFn],
) -> np.ndarray:
    with scoped(counter, f"{prefix}.norm"):
        h = _ln(block.attn_ln, x, counter)
    q = _linear(block.attn.q, h, f"{prefix}.attn_q", counter, capture)
    k = _linear(block.attn.k, h, f"{prefix}.attn_k", counter, capture)
    v = _linear(block.attn.v, h, f"{prefix}.attn_v", counter, capture)
    with scoped(counter, f"{prefix}.attention"):
        a = attend(q, k, v, n_heads, counter)
    a = _linear(block.attn.out, a, f"{prefix}.attn_out", counter, capture)
    with scoped(counter, f"{prefix}.residual"):
        x = add(x, a, counter)

    with scoped(counter, f"{prefix}.norm"):
        h = _ln(block.mlp_ln, x, counter)
    h = _linear(block.mlp_fc1, h, f"{prefix}.mlp_fc1", counter, capture)
    with scoped(counter, f"{prefix}.mlp_act"):
        h = gelu(h, counter)
    h = _linear(block.mlp_fc2, h, f"{prefix}.mlp_fc2", counter, capture)
    with scoped(counter, f"{prefix}.residual"):
        return add(x, h, counter)


def conv_frontend(bundle: ModelBundle, mel: MelFeatures, counter: Optional[FlopCounter] = None) -> np.ndarray:
    """Two GELU convolutions plus sinusoidal positions -> [n_audio_ctx x d_model]"""
    cfg = bundle.config
    if mel.values.shape != (cfg.n_mels, cfg.n_frames):
        raise ShapeMismatchError(f"mel shape {mel.values.shape}, expected {(cfg.n_mels, cfg.n_frames)}")
    x = mel.values.astype(np.float32)
    with scoped(counter, "encoder.conv1"):
        x = gelu(conv1d(x, bundle.conv.conv1_weight, bundle.conv.conv1_bias, 1, counter), counter)
    with scoped(counter, "encoder.conv2"):
        x = gelu(conv1d(x, bundle.conv.conv2_weight, bundle.conv.conv2_bias, 2, counter), counter)
    x = np.ascontiguousarray(x.T)
    with scoped(counter, "encoder.positional"):
        return add(x, sinusoids(cfg.n_audio_ctx, cfg.d_model), counter)


def encode(
    bundle: ModelBundle,
    mel: MelFeatures,
    counter: Optional[FlopCounter] = None,
    capture: Optional[CaptureFn] = None,
) -> np.ndarray:
    """Run the audio encoder; mel must have 2 x n_audio_ctx frames"""
    cfg = bundle.config
    x = conv_frontend(bundle, mel, counter)
    for i, block in enumerate(bundle.encoder_layers):
        x = _encoder_block(block, x, cfg.n_heads, f"encoder.layers.{i}", counter, capture)
    with scoped(counter, "encoder.ln_post"):
        return _ln(bundle.encoder_ln, x, counter)


class _DecoderCache:
    """Self-attention K/V grown one position at a time; cross K/V fixed"""

    def __init__(self, bundle: ModelBundle, enc: np.ndarray, counter: Optional[FlopCounter]):
        self.self_k: list[np.ndarray] = []
        self.self_v: list[np.ndarray] = []
        self.cross_k: list[np.ndarray] = []
        self.cross_v: list[np.ndarray] = []
        d = bundle.config.d_model
        for i, block in enumerate(bundle.decoder_layers):
            prefix = f"decoder.layers.{i}"
            self.cross_k.append(_linear(block.cross_attn.k, enc, f"{prefix}.cross_k", counter))
            self.cross_v.append(_linear(block.cross_attn.v, enc, f"{prefix}.cross_v", counter))
            self.self_k.append(np.zeros((0, d), dtype=np.float32))
            self.self_v.append(np.zeros((0, d), dtype=np.float32))


def _decoder_step(
    bundle: ModelBundle,
    token: int,
    position: int,
    cache: _DecoderCache,
    counter: Optional[FlopCounter],
) -> np.ndarray:
    """Process one token at one position; returns the residual stream [1 x d]"""
    cfg = bundle.config
    with scoped(counter, "decoder.embedding"):
        x = add(bundle.token_embedding[token][None, :], bundle.decoder_positional[position][None, :], counter)
    for i, block in enumerate(bundle.decoder_layers):
        prefix = f"decoder.layers.{i}"
        with scoped(counter, f"{prefix}.norm"):
            h = _ln(block.attn_ln, x, counter)
        q = _linear(block.attn.q, h, f"{prefix}.attn_q", counter)
        k = _linear(block.attn.k, h, f"{prefix}.attn_k", counter)
        v = _linear(block.attn.v, h, f"{prefix}.attn_v", counter)
        cache.self_k[i] = np.concatenate([cache.self_k[i], k])
        cache.self_v[i] = np.concatenate([cache.self_v[i], v])
        with scoped(counter, f"{prefix}.attention"):
            a = attend(q, cache.self_k[i], cache.self_v[i], cfg.n_heads, counter)
        a = _linear(block.attn.out, a, f"{prefix}.attn_out", counter)
        with scoped(counter, f"{prefix}.residual"):
            x = add(x, a, counter)

        with scoped(counter, f"{prefix}.norm"):
            h = _ln(block.cross_attn_ln, x, counter)
        q = _linear(block.cross_attn.q, h, f"{prefix}.cross_q", counter)
        with scoped(counter, f"{prefix}.attention"):
            a = attend(q, cache.cross_k[i], cache.cross_v[i], cfg.n_heads, counter)
        a = _linear(block.cross_attn.out, a, f"{prefix}.cross_out", counter)
        with scoped(counter, f"{prefix}.residual"):
            x = add(x, a, counter)

        with scoped(counter, f"{prefix}.norm"):
            h = _ln(block.mlp_ln, x, counter)
        h = _linear(block.mlp_fc1, h, f"{prefix}.mlp_fc1", counter)
        with scoped(counter, f"{prefix}.mlp_act"):
            h = gelu(h, counter)
        h = _linear(block.mlp_fc2, h, f"{prefix}.mlp_fc2", counter)
        with scoped(counter, f"{prefix}.residual"):
            x = add(x, h, counter)
    return x


def _logits(bundle: ModelBundle, x: np.ndarray, counter: Optional[FlopCounter]) -> np.ndarray:
    """Final layer norm and tied output projection"""
    with scoped(counter, "decoder.logits"):
        h = _ln(bundle.decoder_ln, x, counter)
        return matmul(h, bundle.token_embedding.T, counter)[0]


def greedy_decode(
    bundle: ModelBundle,
    enc: np.ndarray,
    max_tokens: int,
    tokenizer: Optional[Tokenizer] = None,
    counter: Optional[FlopCounter] = None,
) -> Transcript:
    """Greedy argmax decoding from the start sequence until EOT or max_tokens.

    Ties in argmax resolve to the lowest token id.
    """
    cfg = bundle.config
    tokenizer = tokenizer or bundle.tokenizer
    if enc.shape != (cfg.n_audio_ctx, cfg.d_model):
        raise ShapeMismatchError(f"encoder output {enc.shape}, expected {(cfg.n_audio_ctx, cfg.d_model)}")
    if not 0 <= max_tokens <= cfg.n_text_ctx:
        raise ValueError(f"max_tokens must lie in [0, {cfg.n_text_ctx}], got {max_tokens}")
    if max_tokens == 0:
        return Transcript(token_ids=[], text="", n_decoded_tokens=0)

    prompt = tuple(tokenizer.sot_sequence)
    cache = _DecoderCache(bundle, enc, counter)
    for position, token in enumerate(prompt[:-1]):
        _decoder_step(bundle, token, position, cache, counter)

    decoded: list[int] = []
    current, position = prompt[-1], len(prompt) - 1
    while True:
        x = _decoder_step(bundle, current, position, cache, counter)
        logits = _logits(bundle, x, counter)
        if not np.all(np.isfinite(logits)):
            raise InferenceError(f"non-finite logits at position {position}")
        next_token = int(np.argmax(logits))
        decoded.append(next_token)
        if next_token == tokenizer.eot or len(decoded) >= max_tokens or position + 1 >= cfg.n_text_ctx:
            break
        current, position = next_token, position + 1

    text = tokenizer.decode([t for t in decoded if t != tokenizer.eot])
    logger.debug(f"Decoded {len(decoded)} tokens")
    return Transcript(token_ids=decoded, text=text, n_decoded_tokens=len(decoded))
