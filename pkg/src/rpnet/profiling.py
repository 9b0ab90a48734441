"""Parameter, MAC and latency accounting.

MACs are counted for convolutions and linear layers only:
``Cin / groups * Cout * kh * kw * Hout * Wout`` per convolution. Activations,
normalisation, pooling and interpolation are not counted. FLOPs are reported
as ``2 * MACs`` next to the raw MAC count, because published tables mix the
two conventions.

Latency is measured on device-resident inputs around the whole single-shot
path (network, reconstruction, final upsample and argmax); data loading and
host-device copies fall outside the timed region.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn

LATENCY_SIZES = ((320, 480), (360, 640), (720, 1280), (1080, 1920))  # (H, W)


@dataclass
class LatencyRow:
    height: int
    width: int
    mean_ms: float | None
    warmup: int
    repeats: int
    note: str = ""

    @property
    def fps(self) -> float | None:
        return None if self.mean_ms is None else 1000.0 / self.mean_ms

    @property
    def label(self) -> str:
        return f"{self.width}x{self.height}"


@dataclass
class ProfileReport:
    name: str
    params: int
    macs: int
    input_size: tuple[int, int, int]
    latency: list[LatencyRow] = field(default_factory=list)

    @property
    def flops(self) -> int:
        return 2 * self.macs

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "params": self.params,
            "macs": self.macs,
            "flops": self.flops,
            "input_size": list(self.input_size),
            "latency": [
                {**asdict(row), "fps": row.fps, "size": row.label} for row in self.latency
            ],
        }


def _conv_macs(module, output) -> int:
    if isinstance(module, nn.Linear):
        return module.in_features * module.out_features * (output.numel() // output.shape[-1])
    kh, kw = module.kernel_size
    return module.in_channels // module.groups * kh * kw * output.numel()


def _validate_size(input_size):
    if len(input_size) != 3 or not all(isinstance(v, int) and v > 0 for v in input_size):
        raise ValueError(f"input_size must be a static (C, H, W) of positive ints, got {input_size}")


@torch.no_grad()
def count_macs(model: nn.Module, input_size) -> int:
    _validate_size(input_size)
    total = 0

    def hook(module, inputs, output):
        nonlocal total
        if isinstance(module, nn.ConvTranspose2d):
            x = inputs[0]
            kh, kw = module.kernel_size
            total += (
                x.numel() // x.shape[-3] * module.in_channels
                * module.out_channels // module.groups * kh * kw
            )
        else:
            total += _conv_macs(module, output)

    handles = [
        m.register_forward_hook(hook)
        for m in model.modules()
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear))
    ]
    was_training = model.training
    model.eval()
    try:
        device = next(model.parameters()).device
        model(torch.zeros(1, *input_size, device=device))
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    return total


def count_params_macs(model: nn.Module, input_size, name="model") -> ProfileReport:
    params = sum(p.numel() for p in model.parameters())
    return ProfileReport(name, params, count_macs(model, input_size), tuple(input_size))


def _sync(device):
    if device.type == "cuda":
        torch.cuda.synchronize(device)


def _is_oom(exc) -> bool:
    return isinstance(exc, torch.cuda.OutOfMemoryError) or "out of memory" in str(exc).lower()


@torch.no_grad()
def benchmark_latency(model, input_sizes=LATENCY_SIZES, warmup=3, repeats=10, channels=3):
    """Mean forward latency per ``(H, W)`` size; out-of-memory sizes are skipped."""
    if repeats < 10:
        raise ValueError("repeats must be at least 10")
    was_training = model.training
    model.eval()
    device = next(model.parameters()).device
    run = model.predict if hasattr(model, "predict") else model
    rows = []
    try:
        for h, w in input_sizes:
            try:
                x = torch.rand(1, channels, h, w, device=device)
                for _ in range(warmup):
                    run(x)
                elapsed = 0.0
                for _ in range(repeats):
                    _sync(device)
                    t0 = time.perf_counter()
                    run(x)
                    _sync(device)
                    elapsed += time.perf_counter() - t0
                rows.append(LatencyRow(h, w, 1000.0 * elapsed / repeats, warmup, repeats))
            except RuntimeError as exc:
                if not _is_oom(exc):
                    raise
                if device.type == "cuda":
                    torch.cuda.empty_cache()
                rows.append(LatencyRow(h, w, None, warmup, repeats, note="out of memory"))
    finally:
        model.train(was_training)
    return rows


def _fmt_count(n, unit):
    return f"{n / unit:.4f}"


def format_accounting_table(reports) -> str:
    """Aligned text mirroring the FLOPs/parameters layout of an ablation table."""
    header = ("Method", "MACs (B)", "FLOPs=2*MACs (B)", "Parameters (M)")
    rows = [
        (r.name, _fmt_count(r.macs, 1e9), _fmt_count(r.flops, 1e9), _fmt_count(r.params, 1e6))
        for r in reports
    ]
    return _align([header, *rows])


def format_latency_table(reports_or_rows) -> str:
    """Aligned text with one ms/fps column pair per input size."""
    reports = reports_or_rows
    sizes = [row.label for row in reports[0].latency]
    header = ["Model"] + [f"{s} {unit}" for s in sizes for unit in ("ms", "fps")]
    lines = [header]
    for r in reports:
        cells = [r.name]
        for row in r.latency:
            if row.mean_ms is None:
                cells += ["-", "-"]
            else:
                cells += [f"{row.mean_ms:.2f}", f"{row.fps:.2f}"]
        lines.append(cells)
    return _align(lines)


def _align(rows) -> str:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    out = []
    for j, r in enumerate(rows):
        out.append("  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w)
                             for i, (c, w) in enumerate(zip(r, widths))))
        if j == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"


def write_reports(reports, out_dir, stem="profile") -> dict[str, Path]:
    """Write ``<stem>.json``, ``<stem>.tsv`` and ``<stem>.txt`` under ``out_dir``.

    JSON keys: ``name, params, macs, flops, input_size, latency[]`` with
    latency rows ``height, width, size, mean_ms, fps, warmup, repeats, note``.
    The TSV has one row per (model, size).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": out_dir / f"{stem}.json",
        "tsv": out_dir / f"{stem}.tsv",
        "txt": out_dir / f"{stem}.txt",
    }
    paths["json"].write_text(json.dumps([r.to_dict() for r in reports], indent=2) + "\n")
    cols = ["name", "params", "macs", "flops", "size", "mean_ms", "fps", "warmup", "repeats", "note"]
    lines = ["\t".join(cols)]
    for r in reports:
        rows = r.latency or [None]
        for row in rows:
            vals = [r.name, r.params, r.macs, r.flops]
            if row is None:
                vals += ["", "", "", "", "", ""]
            else:
                vals += [row.label, "" if row.mean_ms is None else f"{row.mean_ms:.4f}",
                         "" if row.fps is None else f"{row.fps:.4f}", row.warmup, row.repeats, row.note]
            lines.append("\t".join(str(v) for v in vals))
    paths["tsv"].write_text("\n".join(lines) + "\n")
    text = format_accounting_table(reports)
    if any(r.latency for r in reports):
        text += "\n" + format_latency_table([r for r in reports if r.latency])
    paths["txt"].write_text(text)
    return paths
