"""Run artifacts: manifest, append-only metric series, tidy export.

A run directory holds

    manifest.cfg   full resolved config snapshot (itself a loadable config;
                   code version and creation time ride along as comments)
    metrics.txt    one line per update: step=N wall_ms=F key=value ...
    checkpoints/   self-describing parameter files

so a finished run is re-creatable from the manifest plus its dataset. The
metric series is deterministic given (config, seed) except for the wall_ms
field, which measures real time; comparisons for reproducibility strip it.
"""

from __future__ import annotations

import datetime
from pathlib import Path

from .config import RunConfig, to_text
from .envs import generator_version
from .errors import ContractError

MANIFEST_NAME = "manifest.cfg"
METRICS_NAME = "metrics.txt"


def _fmt_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


class MetricsSink:
    """Single-writer sink for one run directory."""

    def __init__(self, run_dir):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "checkpoints").mkdir(exist_ok=True)
        self._fh = open(self.run_dir / METRICS_NAME, "a", buffering=1)

    def write_manifest(self, cfg: RunConfig) -> None:
        stamp = datetime.datetime.now(datetime.timezone.utc).isoformat()
        body = (f"# nfrl run manifest\n"
                f"# version={generator_version()}\n"
                f"# created={stamp}\n") + to_text(cfg)
        (self.run_dir / MANIFEST_NAME).write_text(body)

    def log(self, step: int, wall_ms: float, values: dict) -> None:
        parts = [f"step={step}", f"wall_ms={wall_ms:.3f}"]
        parts += [f"{k}={_fmt_value(v)}" for k, v in values.items()]
        self._fh.write(" ".join(parts) + "\n")

    def checkpoint_path(self, step: int, name: str = "model") -> Path:
        return self.run_dir / "checkpoints" / f"step-{step:08d}.{name}.nfc"

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[dict]:
    """Parse a metric series back into dicts; values stay strings except
    step, which orders the series."""
    path = Path(path)
    records = []
    for i, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        rec = {}
        for tok in line.split():
            if "=" not in tok:
                raise ContractError(f"{path}:{i}: malformed metric token {tok!r}")
            k, v = tok.split("=", 1)
            rec[k] = v
        if "step" not in rec:
            raise ContractError(f"{path}:{i}: metric record without a step")
        rec["step"] = int(rec["step"])
        records.append(rec)
    return records


def series_without_walltime(path) -> list[dict]:
    """The deterministic part of a metric series (drops wall_ms)."""
    out = []
    for rec in read_metrics(path):
        out.append({k: v for k, v in rec.items() if k != "wall_ms"})
    return out


def export_long_table(metrics_path, out_path) -> int:
    """Tidy long-format CSV (step,metric,value) for external plotters.
    Returns the number of rows written."""
    rows = 0
    with open(out_path, "w") as fh:
        fh.write("step,metric,value\n")
        for rec in read_metrics(metrics_path):
            for k, v in rec.items():
                if k == "step":
                    continue
                fh.write(f"{rec['step']},{k},{v}\n")
                rows += 1
    return rows
