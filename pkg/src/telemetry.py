"""RAM usage and CPU temperature sampling alongside benchmarks.

The sampler thread only appends to a locked list; benchmark timing never
waits on it.
"""

import threading
import time
from pathlib import Path
from typing import Iterator, Literal, Optional, Protocol, Sequence

import psutil
from pydantic import BaseModel

from src.config import TelemetryConfig
from src.logging_config import get_logger

logger = get_logger(__name__)

THROTTLE_TEMP_C = 80.0
CRITICAL_TEMP_C = 85.0

ThermalStatus = Literal["normal", "throttling range", "critical"]


def classify_temperature(temp_c: float) -> ThermalStatus:
    if temp_c >= CRITICAL_TEMP_C:
        return "critical"
    if temp_c >= THROTTLE_TEMP_C:
        return "throttling range"
    return "normal"


class TelemetrySample(BaseModel):
    t_monotonic_s: float
    ram_used_pct: float
    cpu_temp_c: float

    @property
    def thermal_status(self) -> ThermalStatus:
        return classify_temperature(self.cpu_temp_c)


def thermal_event_counts(samples: Sequence[TelemetrySample]) -> tuple[int, int]:
    """(throttle, critical) sample counts; critical samples also count as throttle"""
    throttle = sum(s.cpu_temp_c >= THROTTLE_TEMP_C for s in samples)
    critical = sum(s.cpu_temp_c >= CRITICAL_TEMP_C for s in samples)
    return throttle, critical


class TelemetryProvider(Protocol):
    def read(self) -> tuple[float, float]:
        """(ram_used_pct, cpu_temp_c); raises OSError when unavailable"""
        ...


class SystemTelemetryProvider:
    """Reads platform memory statistics and a sysfs thermal zone.

    meminfo_path: a /proc/meminfo-style file; empty uses psutil
    thermal_path: file holding millidegrees Celsius; falls back to psutil sensors
    """

    def __init__(self, meminfo_path: Optional[str] = None, thermal_path: Optional[str] = None):
        self.meminfo_path = meminfo_path if meminfo_path is not None else TelemetryConfig.meminfo_path
        self.thermal_path = thermal_path if thermal_path is not None else TelemetryConfig.thermal_path

    def _ram_used_pct(self) -> float:
        if not self.meminfo_path:
            return float(psutil.virtual_memory().percent)
        fields = {}
        for line in Path(self.meminfo_path).read_text().splitlines():
            key, _, value = line.partition(":")
            parts = value.split()
            if parts:
                fields[key.strip()] = float(parts[0])
        try:
            total, available = fields["MemTotal"], fields["MemAvailable"]
        except KeyError as e:
            raise OSError(f"{self.meminfo_path}: missing {e}") from e
        return 100.0 * (1.0 - available / total)

    def _cpu_temp_c(self) -> float:
        path = Path(self.thermal_path) if self.thermal_path else None
        if path is not None and path.exists():
            return int(path.read_text().strip()) / 1000.0
        sensors = getattr(psutil, "sensors_temperatures", lambda: {})()
        for entries in sensors.values():
            if entries:
                return float(entries[0].current)
        raise OSError("no CPU temperature source available")

    def read(self) -> tuple[float, float]:
        try:
            return self._ram_used_pct(), self._cpu_temp_c()
        except ValueError as e:
            raise OSError(f"unparseable telemetry: {e}") from e


class SyntheticTelemetryProvider:
    """Deterministic readings: constant RAM, temperature from a sequence.

    After the sequence is exhausted the last temperature repeats. Every
    `fail_every`-th read raises OSError.
    """

    def __init__(self, ram_pct: float = 50.0, temps_c: Sequence[float] = (50.0,), fail_every: int = 0):
        if not temps_c:
            raise ValueError("temps_c must not be empty")
        self.ram_pct = ram_pct
        self.temps_c = list(temps_c)
        self.fail_every = fail_every
        self._reads = 0
        self._lock = threading.Lock()

    @classmethod
    def ramp(cls, start_c: float, end_c: float, n_steps: int, ram_pct: float = 50.0) -> "SyntheticTelemetryProvider":
        step = (end_c - start_c) / max(1, n_steps - 1)
        return cls(ram_pct=ram_pct, temps_c=[start_c + i * step for i in range(n_steps)])

    def read(self) -> tuple[float, float]:
        with self._lock:
            self._reads += 1
            n = self._reads
        if self.fail_every and n % self.fail_every == 0:
            raise OSError(f"synthetic read failure #{n}")
        return self.ram_pct, self.temps_c[min(n, len(self.temps_c)) - 1]


def sample_telemetry(
    provider: TelemetryProvider,
    period_s: float,
    stop: Optional[threading.Event] = None,
    max_samples: Optional[int] = None,
) -> Iterator[TelemetrySample]:
    """Yield one sample per period until `stop` is set or max_samples reached.

    Deadlines are start + k * period on the monotonic clock, so the period
    does not drift. Failed reads are skipped.
    """
    if period_s <= 0:
        raise ValueError(f"period must be positive, got {period_s}")
    stop = stop or threading.Event()
    start = time.monotonic()
    last_t = float("-inf")
    produced = 0
    k = 0
    while not stop.is_set():
        try:
            ram, temp = provider.read()
        except OSError as e:
            logger.warning(f"Telemetry read failed, sample skipped: {e}")
        else:
            t = time.monotonic()
            if t > last_t:
                last_t = t
                produced += 1
                yield TelemetrySample(t_monotonic_s=t, ram_used_pct=ram, cpu_temp_c=temp)
                if max_samples is not None and produced >= max_samples:
                    return
        k += 1
        if stop.wait(timeout=max(0.0, start + k * period_s - time.monotonic())):
            return


class TelemetrySampler:
    """Background thread collecting samples for the duration of a with-block"""

    def __init__(self, provider: TelemetryProvider, period_s: Optional[float] = None):
        self.provider = provider
        self.period_s = period_s if period_s is not None else TelemetryConfig.period_s
        self._samples: list[TelemetrySample] = []
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def _run(self) -> None:
        try:
            for sample in sample_telemetry(self.provider, self.period_s, self._stop):
                with self._lock:
                    self._samples.append(sample)
        except Exception as e:
            # Samples collected so far are kept; the benchmark itself carries on
            logger.error(f"Telemetry sampler stopped after {len(self._samples)} samples: {e}", exc_info=True)

    def start(self) -> "TelemetrySampler":
        if self._thread is not None:
            raise RuntimeError("sampler already started")
        self._thread = threading.Thread(target=self._run, name="telemetry-sampler", daemon=True)
        self._thread.start()
        logger.debug(f"Telemetry sampler started, period {self.period_s} s")
        return self

    def stop(self) -> list[TelemetrySample]:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        return self.samples()

    def samples(self) -> list[TelemetrySample]:
        with self._lock:
            return list(self._samples)

    def __enter__(self) -> "TelemetrySampler":
        return self.start()

    def __exit__(self, exc_type, exc, tb) -> None:
        self.stop()
