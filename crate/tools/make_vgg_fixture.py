#!/usr/bin/env python3
"""Generates the VGG-19 encoder reference fixture.

Builds the 16-conv/5-stage topology (conv 3x3 pad 1 + ReLU, 2x2 max-pool
after stages 1-4) in PyTorch at width multiplier 0.125, runs a fixed random
input through it, and writes the weights (DUOW) plus input/activation
tensors (DUOT) consumed by crates/core/tests/vgg_fixture.rs.

Run from the repository root:  python3 tools/make_vgg_fixture.py
"""

import struct
from pathlib import Path

import torch
import torch.nn.functional as F

OUT_DIR = Path(__file__).resolve().parent.parent / "crates" / "core" / "tests" / "fixtures" / "vgg"

WIDTHS = [8, 16, 32, 64, 64]          # stage widths at multiplier 0.125
CONVS_PER_STAGE = [2, 2, 4, 4, 4]


def write_duot(path: Path, tensor: torch.Tensor) -> None:
    t = tensor.detach().to(torch.float32).contiguous()
    assert t.dim() == 4
    with open(path, "wb") as f:
        f.write(b"DUOT")
        f.write(struct.pack("<H", 1))          # version
        f.write(struct.pack("<BB", 0, 4))      # dtype f32, rank 4
        for d in t.shape:
            f.write(struct.pack("<I", d))
        f.write(t.numpy().tobytes())


def write_duow(path: Path, entries) -> None:
    with open(path, "wb") as f:
        f.write(b"DUOW")
        f.write(struct.pack("<H", 1))
        f.write(struct.pack("<I", len(entries)))
        for name, tensor in entries:
            t = tensor.detach().to(torch.float32).contiguous()
            assert t.dim() == 4
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BB", 0, 4))
            for d in t.shape:
                f.write(struct.pack("<I", d))
            f.write(t.numpy().tobytes())


def main() -> None:
    torch.manual_seed(20240612)
    OUT_DIR.mkdir(parents=True, exist_ok=True)

    entries = []
    convs = []
    c_in = 3
    for stage, (width, count) in enumerate(zip(WIDTHS, CONVS_PER_STAGE), start=1):
        stage_convs = []
        for i in range(1, count + 1):
            fan_in = c_in * 9
            w = torch.empty(width, c_in, 3, 3).uniform_(-1, 1) * (6.0 / fan_in) ** 0.5
            b = torch.empty(width).uniform_(-0.1, 0.1)
            entries.append((f"net1.enc.s{stage}.c{i}.weight", w))
            entries.append((f"net1.enc.s{stage}.c{i}.bias", b.reshape(1, width, 1, 1)))
            stage_convs.append((w, b))
            c_in = width
        convs.append(stage_convs)

    x = torch.rand(1, 3, 32, 32)
    write_duot(OUT_DIR / "input.duot", x)
    write_duow(OUT_DIR / "weights.duow", entries)

    cur = x
    skips = []
    for stage, stage_convs in enumerate(convs):
        for w, b in stage_convs:
            cur = F.relu(F.conv2d(cur, w, b, stride=1, padding=1))
        if stage < 4:
            skips.append(cur)
            cur = F.max_pool2d(cur, kernel_size=2, stride=2)

    write_duot(OUT_DIR / "bottleneck.duot", cur)
    for i, s in enumerate(skips):
        write_duot(OUT_DIR / f"skip{i}.duot", s)

    total = sum(e[1].numel() for e in entries)
    print(f"wrote {len(entries)} tensors ({total} scalars) to {OUT_DIR}")
    print(f"bottleneck shape: {tuple(cur.shape)}")


if __name__ == "__main__":
    main()
