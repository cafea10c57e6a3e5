"""Configuration management for toolkit environment variables"""

import os
from dotenv import load_dotenv
from pathlib import Path

# Load environment variables
env_path = Path(__file__).parent.parent / ".env"
load_dotenv(env_path)


class ToolkitConfig:
    """General toolkit configuration (seed, output location, logging)"""
    seed: int = int(os.getenv("EDGE_ASR_SEED") or "0")
    output_dir: str = os.getenv("EDGE_ASR_OUTPUT_DIR", "outputs")
    log_level: str = os.getenv("EDGE_ASR_LOG_LEVEL", "INFO")
    # Empty means console-only logging
    log_file: str = os.getenv("EDGE_ASR_LOG_FILE", "")

    @classmethod
    def validate(cls) -> None:
        """Validate toolkit configuration"""
        if cls.log_level.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"EDGE_ASR_LOG_LEVEL has unknown level: {cls.log_level}")
        if cls.seed < 0:
            raise ValueError("EDGE_ASR_SEED must be non-negative")


class TelemetryConfig:
    """RAM / CPU temperature sampler configuration"""
    # Empty means psutil.virtual_memory() is used instead of a meminfo file
    meminfo_path: str = os.getenv("EDGE_ASR_MEMINFO_PATH", "")
    # Sysfs thermal zones report millidegrees Celsius
    thermal_path: str = os.getenv("EDGE_ASR_THERMAL_PATH", "/sys/class/thermal/thermal_zone0/temp")
    period_s: float = float(os.getenv("EDGE_ASR_TELEMETRY_PERIOD") or "0.5")

    @classmethod
    def validate(cls) -> None:
        """Validate telemetry configuration"""
        if cls.period_s <= 0:
            raise ValueError("EDGE_ASR_TELEMETRY_PERIOD must be positive")


class BenchConfig:
    """Benchmark harness configuration"""
    n_runs: int = int(os.getenv("EDGE_ASR_BENCH_RUNS") or "10")
    max_tokens: int = int(os.getenv("EDGE_ASR_MAX_TOKENS") or "224")

    @classmethod
    def validate(cls) -> None:
        """Validate benchmark configuration"""
        if cls.n_runs < 1:
            raise ValueError("EDGE_ASR_BENCH_RUNS must be at least 1")
        if cls.max_tokens < 0:
            raise ValueError("EDGE_ASR_MAX_TOKENS must be non-negative")


class CompressionConfig:
    """Defaults for low-rank encoder compression"""
    calibration_samples: int = int(os.getenv("EDGE_ASR_CALIBRATION_SAMPLES") or "500")
    threshold: float = float(os.getenv("EDGE_ASR_THRESHOLD") or "0.999")
    max_calibration_rows: int = int(os.getenv("EDGE_ASR_MAX_CALIBRATION_ROWS") or "8192")

    @classmethod
    def validate(cls) -> None:
        """Validate compression defaults"""
        if not 0.0 < cls.threshold <= 1.0:
            raise ValueError("EDGE_ASR_THRESHOLD must lie in (0, 1]")
        if cls.calibration_samples < 1:
            raise ValueError("EDGE_ASR_CALIBRATION_SAMPLES must be at least 1")
        if cls.max_calibration_rows < 1:
            raise ValueError("EDGE_ASR_MAX_CALIBRATION_ROWS must be at least 1")


def validate_all_configs() -> None:
    """Validate all configurations"""
    ToolkitConfig.validate()
    TelemetryConfig.validate()
    BenchConfig.validate()
    CompressionConfig.validate()
