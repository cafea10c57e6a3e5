"""Telemetry charts: RAM usage and CPU temperature over a benchmark run"""

from pathlib import Path
from typing import Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from src.telemetry import CRITICAL_TEMP_C, THROTTLE_TEMP_C, TelemetrySample  # noqa: E402


def plot_telemetry(samples: Sequence[TelemetrySample], path: Union[str, Path], title: str = "") -> None:
    """Two stacked panels sharing the time axis, with the 80/85 C lines"""
    if not samples:
        raise ValueError("no telemetry samples to plot")
    t0 = samples[0].t_monotonic_s
    t = [s.t_monotonic_s - t0 for s in samples]

    fig, (ax_ram, ax_temp) = plt.subplots(nrows=2, ncols=1, sharex=True, figsize=(7, 5))
    ax_ram.plot(t, [s.ram_used_pct for s in samples], color="tab:blue")
    ax_ram.set_ylabel("RAM used (%)")
    ax_ram.set_ylim(0, 100)

    ax_temp.plot(t, [s.cpu_temp_c for s in samples], color="tab:red")
    ax_temp.axhline(THROTTLE_TEMP_C, linestyle="--", color="tab:orange", label="throttling")
    ax_temp.axhline(CRITICAL_TEMP_C, linestyle=":", color="black", label="critical")
    ax_temp.set_ylabel("CPU temperature (°C)")
    ax_temp.set_xlabel("time (s)")
    ax_temp.legend(loc="lower right", fontsize=8)

    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
