"""Low-rank compression of encoder linear layers.

Two modes:
  weight-svd      W = U S V^T truncated at the energy threshold; A = U_k S_k, B = V_k^T
  activation-svd  Y = X W^T over calibration activations X; the top-k right
                  singular vectors U_k of Y span the output; A = U_k, B = U_k^T W
A layer is replaced only when k (d_in + d_out) < d_in d_out, i.e. the factored
form is strictly smaller.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import linalg

from src.audio_frontend import AudioClip, log_mel
from src.config import CompressionConfig
from src.errors import CalibrationError
from src.logging_config import get_logger
from src.model_core import (
    LINEAR_KINDS,
    DenseLinear,
    FactoredLinear,
    LinearLayer,
    ModelBundle,
    encode,
    param_count,
)

logger = get_logger(__name__)

REPORT_SCHEMA_VERSION = 1
METHOD_NOTES = (
    "encoder linear layers only; convolutions, embeddings and decoder untouched",
    "Q, K and V projections are compressed independently",
    "biases are never factored",
    "energy criterion: cumulative squared singular values",
)

CompressionMode = Literal["weight-svd", "activation-svd"]


class CompressionPolicy(BaseModel):
    """What to compress and how"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    threshold_theta: float = Field(default_factory=lambda: CompressionConfig.threshold, gt=0.0, le=1.0)
    calibration_samples: int = Field(default_factory=lambda: CompressionConfig.calibration_samples, ge=1)
    mode: CompressionMode = "activation-svd"
    target_kinds: tuple[str, ...] = LINEAR_KINDS
    seed: int = Field(default=0, ge=0)
    max_rows: int = Field(default_factory=lambda: CompressionConfig.max_calibration_rows, ge=1)

    @field_validator("target_kinds")
    @classmethod
    def _check_kinds(cls, v: tuple[str, ...]) -> tuple[str, ...]:
        if not v:
            raise ValueError("target_kinds must not be empty")
        unknown = sorted(set(v) - set(LINEAR_KINDS))
        if unknown:
            raise ValueError(f"unknown target kinds {unknown}; choose from {list(LINEAR_KINDS)}")
        # Keep canonical order regardless of how they were listed
        return tuple(k for k in LINEAR_KINDS if k in v)


@dataclass
class CalibrationSet:
    """Input activations [n_rows x d_in] per target layer id"""
    activations: dict[str, np.ndarray] = field(default_factory=dict)
    n_clips: int = 0

    def rows(self, layer_id: str) -> int:
        arr = self.activations.get(layer_id)
        return 0 if arr is None else int(arr.shape[0])


class CompressionEntry(BaseModel):
    layer_id: str
    kind: str
    d_in: int
    d_out: int
    selected_rank: int
    original_params: int
    new_params: int
    substituted: bool
    energy_captured: float


class CompressionReport(BaseModel):
    schema_version: int = REPORT_SCHEMA_VERSION
    policy: CompressionPolicy
    notes: list[str] = Field(default_factory=lambda: list(METHOD_NOTES))
    entries: list[CompressionEntry]
    params_before: int
    params_after: int
    params_saved: int

    @property
    def n_substituted(self) -> int:
        return sum(e.substituted for e in self.entries)

    def to_table(self) -> str:
        """Fixed-width per-layer table followed by encoder totals"""
        lines = [
            f"# mode={self.policy.mode} theta={self.policy.threshold_theta}",
            *(f"# {note}" for note in self.notes),
            f"{'layer':<28} {'d_in':>5} {'d_out':>5} {'k':>5} {'before':>9} {'after':>9} {'energy':>8}  sub",
        ]
        for e in self.entries:
            lines.append(
                f"{e.layer_id:<28} {e.d_in:>5} {e.d_out:>5} {e.selected_rank:>5} "
                f"{e.original_params:>9} {e.new_params:>9} {e.energy_captured:>8.5f}  {'yes' if e.substituted else 'no'}"
            )
        lines.append(
            f"encoder params: {self.params_before} -> {self.params_after} "
            f"(saved {self.params_saved}, {self.params_saved / 1e6:.2f}M)"
        )
        return "\n".join(lines)


class _Reservoir:
    """Uniform row sample without replacement, capped at max_rows.

    Each row gets a random key; the max_rows smallest keys survive. Rows are
    returned in arrival order.
    """

    def __init__(self, max_rows: int, rng: np.random.Generator):
        self.max_rows = max_rows
        self.rng = rng
        self.rows: list[np.ndarray] = []
        self.keys = np.zeros(0)
        self.order = np.zeros(0, dtype=np.int64)
        self.seen = 0

    def add(self, x: np.ndarray) -> None:
        n = x.shape[0]
        self.rows.append(np.asarray(x, dtype=np.float32))
        self.keys = np.concatenate([self.keys, self.rng.random(n)])
        self.order = np.concatenate([self.order, np.arange(self.seen, self.seen + n)])
        self.seen += n
        if len(self.keys) > self.max_rows:
            self._shrink()

    def _shrink(self) -> None:
        stacked = np.concatenate(self.rows)
        keep = np.argpartition(self.keys, self.max_rows - 1)[: self.max_rows]
        keep = keep[np.argsort(self.order[keep])]
        self.rows = [stacked[keep]]
        self.keys = self.keys[keep]
        self.order = self.order[keep]

    def matrix(self) -> np.ndarray:
        return np.concatenate(self.rows)


def collect_calibration(
    bundle: ModelBundle,
    clips: Sequence[AudioClip],
    policy: CompressionPolicy,
) -> CalibrationSet:
    """Record input activations of every targeted encoder layer.

    Runs encode over the first min(len(clips), calibration_samples) clips and
    keeps at most policy.max_rows rows per layer, sampled with the policy seed.
    """
    if not clips:
        raise CalibrationError("calibration needs at least one clip")
    n_clips = min(len(clips), policy.calibration_samples)
    layer_ids = [
        f"encoder.layers.{i}.{kind}"
        for i in range(bundle.config.n_audio_layers)
        for kind in policy.target_kinds
    ]
    reservoirs = {
        layer_id: _Reservoir(policy.max_rows, np.random.default_rng([policy.seed, idx]))
        for idx, layer_id in enumerate(layer_ids)
    }

    def capture(layer_id: str, x: np.ndarray) -> None:
        if layer_id in reservoirs:
            reservoirs[layer_id].add(x)

    logger.info(f"Collecting calibration activations from {n_clips} clips")
    for clip in clips[:n_clips]:
        mel = log_mel(clip, n_frames=bundle.config.n_frames)
        encode(bundle, mel, capture=capture)

    calib = CalibrationSet(n_clips=n_clips)
    for layer_id, reservoir in reservoirs.items():
        x = reservoir.matrix()
        if not np.all(np.isfinite(x)):
            raise CalibrationError(f"{layer_id}: non-finite calibration activations")
        if x.shape[0] < x.shape[1]:
            logger.warning(f"{layer_id}: only {x.shape[0]} calibration rows for d_in={x.shape[1]}")
        calib.activations[layer_id] = x
    return calib


def numerical_rank_cutoff(singular_values: np.ndarray, shape: tuple[int, int]) -> float:
    """Singular values at or below this are float32 round-off"""
    if singular_values.size == 0:
        return 0.0
    return float(max(shape) * np.finfo(np.float32).eps * singular_values[0])


def select_rank(singular_values: Sequence[float], theta: float) -> int:
    """Smallest k whose leading squared singular values hold a theta share of the energy"""
    s = np.asarray(singular_values, dtype=np.float64)
    if not 0.0 < theta <= 1.0:
        raise ValueError(f"theta must lie in (0, 1], got {theta}")
    if s.ndim != 1 or s.size == 0:
        raise ValueError("singular values must be a non-empty 1-D sequence")
    if np.any(s < 0) or np.any(np.diff(s) > 0):
        raise ValueError("singular values must be non-negative and sorted descending")
    n_positive = int(np.count_nonzero(s > 0))
    if n_positive == 0:
        raise ValueError("all-zero spectrum: rank undefined")
    if theta == 1.0:
        return n_positive
    energy = np.cumsum(s**2)
    ratio = energy / energy[-1]
    k = int(np.searchsorted(ratio, theta, side="left")) + 1
    return min(k, n_positive)


def _truncated_spectrum(s: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    s = s.copy()
    s[s <= numerical_rank_cutoff(s, shape)] = 0.0
    return s


def _energy(s: np.ndarray, k: int) -> float:
    total = float(np.sum(s**2))
    return float(np.sum(s[:k] ** 2) / total) if total > 0 else 0.0


def substitution_pays(d_in: int, d_out: int, k: int) -> bool:
    return k * (d_in + d_out) < d_in * d_out


def compress_layer(
    layer: LinearLayer,
    activations: Optional[np.ndarray],
    policy: CompressionPolicy,
    layer_id: str = "",
    kind: str = "",
) -> tuple[LinearLayer, CompressionEntry]:
    """Factor one dense layer if its selected rank makes it smaller"""
    if not isinstance(layer, DenseLinear):
        raise ValueError(f"{layer_id or 'layer'} is already factored")
    w = layer.weight.astype(np.float64)
    d_out, d_in = w.shape

    if policy.mode == "weight-svd":
        u, s, vt = linalg.svd(w, full_matrices=False)
        spectrum = _truncated_spectrum(s, w.shape)
    else:
        if activations is None:
            raise CalibrationError(f"{layer_id or 'layer'}: activation-svd needs calibration activations")
        if activations.ndim != 2 or activations.shape[1] != d_in:
            raise CalibrationError(f"{layer_id}: activations {activations.shape} do not match d_in={d_in}")
        y = activations.astype(np.float64) @ w.T
        _, s, vt = linalg.svd(y, full_matrices=False)
        spectrum = _truncated_spectrum(s, y.shape)

    if not np.any(spectrum > 0):
        logger.warning(f"{layer_id}: zero spectrum, layer kept dense")
        k, energy = 0, 0.0
    else:
        k = select_rank(spectrum, policy.threshold_theta)
        energy = _energy(spectrum, k)

    entry = CompressionEntry(
        layer_id=layer_id,
        kind=kind,
        d_in=d_in,
        d_out=d_out,
        selected_rank=k,
        original_params=layer.param_count,
        new_params=layer.param_count,
        substituted=False,
        energy_captured=energy,
    )
    if k == 0 or not substitution_pays(d_in, d_out, k):
        return layer, entry

    if policy.mode == "weight-svd":
        a = u[:, :k] * s[:k]
        b = vt[:k]
    else:
        a = vt[:k].T
        b = a.T @ w
    factored = FactoredLinear(a=a.astype(np.float32), b=b.astype(np.float32), bias=layer.bias)
    entry.new_params = factored.param_count
    entry.substituted = True
    return factored, entry


def _carried_over(layer: FactoredLinear, layer_id: str, kind: str) -> CompressionEntry:
    """Entry for a layer factored by an earlier pass; it keeps all of its own energy"""
    return CompressionEntry(
        layer_id=layer_id,
        kind=kind,
        d_in=layer.d_in,
        d_out=layer.d_out,
        selected_rank=layer.rank,
        original_params=layer.param_count,
        new_params=layer.param_count,
        substituted=False,
        energy_captured=1.0,
    )


def compress_bundle(
    bundle: ModelBundle,
    calib: Optional[CalibrationSet],
    policy: CompressionPolicy,
    workers: int = 1,
) -> tuple[ModelBundle, CompressionReport]:
    """Compress every targeted encoder layer; the decoder is never touched"""
    if policy.mode == "activation-svd" and calib is None:
        raise CalibrationError("activation-svd needs a calibration set")

    tasks = []
    for i, block in enumerate(bundle.encoder_layers):
        for kind in policy.target_kinds:
            layer = block.linear(kind)
            layer_id = f"encoder.layers.{i}.{kind}"
            acts = calib.activations.get(layer_id) if calib is not None and isinstance(layer, DenseLinear) else None
            tasks.append((i, kind, layer_id, layer, acts))

    def run(task):
        _, kind, layer_id, layer, acts = task
        if isinstance(layer, FactoredLinear):
            return layer, _carried_over(layer, layer_id, kind)
        return compress_layer(layer, acts, policy, layer_id=layer_id, kind=kind)

    # map() yields in submission order, so the report is in layer order
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(run, tasks))

    blocks = list(bundle.encoder_layers)
    entries = []
    n_carried = 0
    for (i, kind, _, _, _), (new_layer, entry) in zip(tasks, results):
        if entry.substituted:
            blocks[i] = blocks[i].with_linear(kind, new_layer)
            logger.info(f"{entry.layer_id}: rank {entry.selected_rank}, {entry.original_params} -> {entry.new_params}")
        elif isinstance(new_layer, FactoredLinear):
            n_carried += 1
            logger.info(f"{entry.layer_id}: already factored at rank {entry.selected_rank}, carried over")
        else:
            logger.debug(f"{entry.layer_id}: rank {entry.selected_rank} kept dense")
        entries.append(entry)

    compressed = ModelBundle(
        config=bundle.config,
        conv=bundle.conv,
        encoder_layers=tuple(blocks),
        encoder_ln=bundle.encoder_ln,
        token_embedding=bundle.token_embedding,
        decoder_positional=bundle.decoder_positional,
        decoder_layers=bundle.decoder_layers,
        decoder_ln=bundle.decoder_ln,
    )
    before = param_count(bundle).encoder
    after = param_count(compressed).encoder
    notes = list(METHOD_NOTES)
    if n_carried:
        notes.append(f"{n_carried} layers were already factored and carried over unchanged; their selected_rank is the existing rank")
    report = CompressionReport(
        policy=policy,
        notes=notes,
        entries=entries,
        params_before=before,
        params_after=after,
        params_saved=before - after,
    )
    logger.info(f"Compressed {report.n_substituted}/{len(entries)} layers, saved {report.params_saved} encoder params")
    return compressed, report
